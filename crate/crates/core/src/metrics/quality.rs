use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_dims(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "images are {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for data range 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of a row-major field.
fn filter_valid(src: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (ow, oh) = (width - k + 1, height - k + 1);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * src[y * width + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean structural similarity on luminance with an 11x11 Gaussian window
/// (sigma 1.5) and data range 1. Images smaller than the window use the
/// largest odd window that fits.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = a.dims();
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let kernel = gaussian_window(size, SSIM_SIGMA);
    let la = a.luminance();
    let lb = b.luminance();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };

    let mu_a = filter_valid(&la, w, h, &kernel);
    let mu_b = filter_valid(&lb, w, h, &kernel);
    let e_aa = filter_valid(&prod(&la, &la), w, h, &kernel);
    let e_bb = filter_valid(&prod(&lb, &lb), w, h, &kernel);
    let e_ab = filter_valid(&prod(&la, &lb), w, h, &kernel);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.random::<f64>()).collect();
        RasterImage::new(w, h, data).unwrap()
    }

    /// Smooth pattern with mid-range contrast around 0.5.
    fn test_pattern() -> RasterImage {
        RasterImage::from_fn(48, 40, |x, y| {
            let v = 0.5 + 0.3 * ((x as f64 * 0.4).sin() * (y as f64 * 0.3).cos());
            [v, v * 0.9 + 0.05, 1.0 - v]
        })
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        for seed in 0..5 {
            let x = random_image(seed, 23, 17);
            assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        }
        let x = test_pattern();
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = random_image(1, 30, 20);
        let b = random_image(2, 30, 20);
        let ab = ssim(&a, &b).unwrap();
        assert_eq!(ab, ssim(&b, &a).unwrap());
        assert!(ab.abs() <= 1.0);
    }

    #[test]
    fn ssim_of_inverted_pattern_is_low() {
        let x = test_pattern();
        let inv = RasterImage::from_fn(48, 40, |i, j| {
            let p = x.pixel(i, j);
            [1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]
        });
        let s = ssim(&x, &inv).unwrap();
        assert!(s < 0.5, "ssim(x, 1-x) = {s}");
    }

    #[test]
    fn ssim_handles_tiny_images() {
        let a = random_image(3, 4, 6);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = RasterImage::filled(1, 1, [0.2; 3]);
        assert_eq!(ssim(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = RasterImage::filled(8, 8, [0.2; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = RasterImage::filled(8, 8, [0.3; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = RasterImage::filled(8, 8, [0.7; 3]);
        let expected = 10.0 * 4f64.log10();
        assert!((psnr(&a, &c).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn psnr_decreases_with_error() {
        let a = RasterImage::filled(4, 4, [0.0; 3]);
        let mut last = f64::INFINITY;
        for k in 1..=10 {
            let b = RasterImage::filled(4, 4, [k as f64 * 0.1; 3]);
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = RasterImage::filled(4, 4, [0.0; 3]);
        let b = RasterImage::filled(4, 5, [0.0; 3]);
        assert!(matches!(ssim(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
    }

    proptest::proptest! {
        #[test]
        fn psnr_falls_as_uniform_error_grows(a in 0.001f64..0.4, b in 0.001f64..0.4) {
            proptest::prop_assume!((a - b).abs() > 1e-6);
            let base = RasterImage::filled(6, 5, [0.3, 0.4, 0.5]);
            let shift = |d: f64| RasterImage::filled(6, 5, [0.3 + d, 0.4 + d, 0.5 + d]);
            let (pa, pb) = (psnr(&base, &shift(a)).unwrap(), psnr(&base, &shift(b)).unwrap());
            proptest::prop_assert_eq!(a < b, pa > pb);
        }

        #[test]
        fn ssim_random_pairs_symmetric(seed in proptest::prelude::any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut img = || RasterImage::new(12, 12, (0..432).map(|_| rng.random::<f64>()).collect()).unwrap();
            let (a, b) = (img(), img());
            let s = ssim(&a, &b).unwrap();
            proptest::prop_assert!((-1.0..=1.0).contains(&s));
            proptest::prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
