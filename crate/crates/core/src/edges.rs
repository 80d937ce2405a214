//! Canny edge extraction and splicing of polyp edges into clean-colon edge maps.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, EdgeMap, RasterImage};

/// Gradient magnitudes below this are treated as flat regardless of the
/// relative thresholds, so rounding noise on constant images yields no edges.
const MIN_GRADIENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CannyParams {
    /// Standard deviation of the Gaussian pre-smoothing, in pixels.
    pub sigma: f64,
    /// High hysteresis threshold as a fraction of the maximum gradient magnitude.
    pub high_ratio: f64,
    /// Low threshold as a fraction of the high threshold.
    pub low_ratio: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            high_ratio: 0.2,
            low_ratio: 0.5,
        }
    }
}

impl CannyParams {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.high_ratio > 0.0 && self.high_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "high_ratio {} outside (0, 1]",
                self.high_ratio
            )));
        }
        if !(self.low_ratio > 0.0 && self.low_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "low_ratio {} outside (0, 1]",
                self.low_ratio
            )));
        }
        Ok(())
    }
}

struct Field<'a> {
    data: &'a [f64],
    width: usize,
    height: usize,
}

impl Field<'_> {
    /// Clamp-to-edge access.
    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

fn gaussian_blur(src: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let pass = |data: &[f64], horizontal: bool| -> Vec<f64> {
        let f = Field {
            data,
            width,
            height,
        };
        let mut out = vec![0.0; width * height];
        for y in 0..height as isize {
            for x in 0..width as isize {
                out[y as usize * width + x as usize] = kernel
                    .iter()
                    .zip(-radius..=radius)
                    .map(|(k, o)| {
                        k * if horizontal {
                            f.at(x + o, y)
                        } else {
                            f.at(x, y + o)
                        }
                    })
                    .sum();
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Canny edges of the luminance channel with the default thresholds.
pub fn extract_edges(image: &RasterImage, sigma: f64) -> Result<EdgeMap> {
    extract_edges_with(image, &CannyParams::with_sigma(sigma))
}

pub fn extract_edges_with(image: &RasterImage, params: &CannyParams) -> Result<EdgeMap> {
    params.validate()?;
    let (w, h) = image.dims();
    let smooth = gaussian_blur(&image.luminance(), w, h, params.sigma);
    let f = Field {
        data: &smooth,
        width: w,
        height: h,
    };

    let mut mag = vec![0.0; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (f.at(x + 1, y - 1) + 2.0 * f.at(x + 1, y) + f.at(x + 1, y + 1))
                - (f.at(x - 1, y - 1) + 2.0 * f.at(x - 1, y) + f.at(x - 1, y + 1));
            let gy = (f.at(x - 1, y + 1) + 2.0 * f.at(x, y + 1) + f.at(x + 1, y + 1))
                - (f.at(x - 1, y - 1) + 2.0 * f.at(x, y - 1) + f.at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            // Direction bin: 0 horizontal, 1 diagonal (/), 2 vertical, 3 diagonal (\).
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = ((angle + 22.5) / 45.0) as u8 % 4;
        }
    }

    let m = Field {
        data: &mag,
        width: w,
        height: h,
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            let v = mag[i];
            // Ties resolve toward the negative side so plateaus stay one pixel wide.
            if v >= m.at(x - dx, y - dy) && v > m.at(x + dx, y + dy) {
                thin[i] = v;
            }
        }
    }

    let max = thin.iter().cloned().fold(0.0f64, f64::max);
    let mut edges = vec![0u8; w * h];
    if max < MIN_GRADIENT {
        return EdgeMap::new(w, h, edges);
    }
    let high = (params.high_ratio * max).max(MIN_GRADIENT);
    let low = (params.low_ratio * high).max(MIN_GRADIENT);

    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= high {
            edges[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edges[j] == 0 && thin[j] >= low {
                    edges[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    EdgeMap::new(w, h, edges)
}

/// Edges of `polyp_image` restricted to the mask region.
pub fn extract_polyp_edges(
    polyp_image: &RasterImage,
    mask: &BinaryMask,
    sigma: f64,
) -> Result<EdgeMap> {
    extract_polyp_edges_with(polyp_image, mask, &CannyParams::with_sigma(sigma))
}

pub fn extract_polyp_edges_with(
    polyp_image: &RasterImage,
    mask: &BinaryMask,
    params: &CannyParams,
) -> Result<EdgeMap> {
    if polyp_image.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} differ",
            polyp_image.dims(),
            mask.dims()
        )));
    }
    let edges = extract_edges_with(polyp_image, params)?;
    restrict(&edges, mask)
}

/// Elementwise `edges * mask`.
pub fn restrict(edges: &EdgeMap, mask: &BinaryMask) -> Result<EdgeMap> {
    if edges.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "edges {:?} and mask {:?} differ",
            edges.dims(),
            mask.dims()
        )));
    }
    let (w, h) = edges.dims();
    EdgeMap::new(
        w,
        h,
        edges.data().iter().zip(mask.data()).map(|(e, m)| e & m).collect(),
    )
}

/// Polyp edges inside the mask, clean-image edges outside it.
pub fn merge_edges(clean_edges: &EdgeMap, polyp_edges: &EdgeMap, mask: &BinaryMask) -> Result<EdgeMap> {
    if clean_edges.dims() != mask.dims() || polyp_edges.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "clean {:?}, polyp {:?} and mask {:?} must agree",
            clean_edges.dims(),
            polyp_edges.dims(),
            mask.dims()
        )));
    }
    let (w, h) = mask.dims();
    let data = clean_edges
        .data()
        .iter()
        .zip(polyp_edges.data())
        .zip(mask.data())
        .map(|((&c, &p), &m)| if m == 1 { p } else { c })
        .collect();
    EdgeMap::new(w, h, data)
}
