use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Eigenvalues above `-EIGEN_CLAMP * max(1, largest)` are clamped to zero.
const EIGEN_CLAMP: f64 = 1e-10;

/// A deterministic, frozen image embedding used as the FID front-end.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn features(&self, image: &RasterImage) -> Result<Vec<f64>>;
}

/// One feature row per image, in input order.
pub fn extract_features(
    images: &[RasterImage],
    extractor: &dyn FeatureExtractor,
) -> Result<DMatrix<f64>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to embed".into()));
    }
    let d = extractor.dim();
    let mut out = DMatrix::zeros(images.len(), d);
    for (i, img) in images.iter().enumerate() {
        let row = extractor.features(img)?;
        if row.len() != d {
            return Err(Error::Shape(format!(
                "extractor returned {} features, expected {d}",
                row.len()
            )));
        }
        for (j, v) in row.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn clamped_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let largest = eig.eigenvalues.iter().cloned().fold(1.0f64, f64::max);
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -EIGEN_CLAMP * largest {
                return Err(Error::Numeric(format!(
                    "covariance product has eigenvalue {v}"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// Frechet distance between Gaussian fits of two feature sets (rows are samples).
///
/// The trace of `(Sa Sb)^(1/2)` is taken from the symmetric product
/// `Sa^(1/2) Sb Sa^(1/2)`, which has the same eigenvalues.
pub fn fid(features_a: &DMatrix<f64>, features_b: &DMatrix<f64>) -> Result<f64> {
    for (name, f) in [("first", features_a), ("second", features_b)] {
        if f.nrows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{name} feature set has {} samples, need at least 2",
                f.nrows()
            )));
        }
        if f.ncols() == 0 {
            return Err(Error::InvalidArgument(format!("{name} feature set has no columns")));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{name} feature set is not finite")));
        }
    }
    if features_a.ncols() != features_b.ncols() {
        return Err(Error::Shape(format!(
            "feature dims {} and {}",
            features_a.ncols(),
            features_b.ncols()
        )));
    }
    let (mu_a, cov_a) = moments(features_a);
    let (mu_b, cov_b) = moments(features_b);
    let root_a = sym_sqrt(&cov_a)?;
    let product = &root_a * &cov_b * &root_a;
    let tr_root: f64 = clamped_eigen(&product)?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(seed: u64, n: usize, d: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        for (n, d) in [(20, 4), (5, 12), (50, 50)] {
            let f = random_features(n as u64, n, d);
            assert!(fid(&f, &f).unwrap() < 1e-6);
        }
    }

    #[test]
    fn one_dimensional_hand_case() {
        let a = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn univariate_closed_form() {
        // For d = 1: (ma - mb)^2 + (sa - sb)^2 with sample standard deviations.
        let a = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let b = DMatrix::from_row_slice(3, 1, &[5.0, 7.0, 9.0]);
        let (ma, mb) = (1.5, 7.0);
        let sa = (5.0f64 / 3.0).sqrt();
        let sb = 2.0;
        let expected = (ma - mb) * (ma - mb) + (sa - sb) * (sa - sb);
        assert!((fid(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn translation_invariant() {
        let a = random_features(1, 30, 6);
        let b = random_features(2, 25, 6);
        let shift = DVector::from_vec(vec![3.0, -1.0, 0.5, 10.0, -7.0, 2.0]);
        let shifted = |m: &DMatrix<f64>| {
            let mut m = m.clone();
            for mut row in m.row_iter_mut() {
                row += shift.transpose();
            }
            m
        };
        let base = fid(&a, &b).unwrap();
        assert!((fid(&shifted(&a), &shifted(&b)).unwrap() - base).abs() < 1e-8);
        assert!(base >= 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let one = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let two = random_features(0, 2, 2);
        assert!(matches!(fid(&one, &two), Err(Error::InvalidArgument(_))));
        let mut nan = two.clone();
        nan[(0, 0)] = f64::NAN;
        assert!(matches!(fid(&nan, &two), Err(Error::Numeric(_))));
        assert!(matches!(fid(&two, &random_features(0, 3, 3)), Err(Error::Shape(_))));
    }
}
