//! Pixel-level domain types: RGB rasters, binary masks and edge maps.
//!
//! Rasters store interleaved RGB in row-major order with every channel value
//! in `[0, 1]`. Masks and edge maps store one byte per pixel, restricted to
//! `{0, 1}`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Threshold applied to luminance when a stored mask is binarized.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty raster {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "raster {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "raster value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds a raster from a per-pixel closure. Values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        assert!(width > 0 && height > 0, "empty raster");
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for v in f(x, y) {
                    data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Interleaved RGB values, row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Per-pixel Rec. 601 luminance.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect()
    }

    /// Bilinear resize. Returns a clone when the size already matches.
    pub fn resize(&self, width: usize, height: usize) -> RasterImage {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("buffer length checked at construction");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Self {
            width,
            height,
            data: out
                .into_raw()
                .into_iter()
                .map(|v| f64::from(v).clamp(0.0, 1.0))
                .collect(),
        }
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> RasterImage {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize_u8(v) as f64 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| quantize_u8(v)).collect(),
        )
        .expect("buffer length checked at construction")
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        Self {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            data: rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    /// Loads an image file, optionally resizing it to `size = (width, height)`.
    pub fn load(path: &Path, size: Option<(usize, usize)>) -> Result<Self> {
        let img = decode(path)?;
        let raster = Self::from_dynamic(&img);
        Ok(match size {
            Some((w, h)) => raster.resize(w, h),
            None => raster,
        })
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Nearest-neighbour resampling index: destination pixel centre mapped back to
/// the source grid.
fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

macro_rules! binary_field {
    ($name:ident, $what:literal) => {
        #[derive(Clone, Debug, PartialEq, Eq, Hash)]
        pub struct $name {
            width: usize,
            height: usize,
            data: Vec<u8>,
        }

        impl $name {
            pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
                if width == 0 || height == 0 {
                    return Err(Error::Shape(format!(
                        concat!("empty ", $what, " {}x{}"),
                        width, height
                    )));
                }
                if data.len() != width * height {
                    return Err(Error::Shape(format!(
                        concat!($what, " {}x{} needs {} values, got {}"),
                        width,
                        height,
                        width * height,
                        data.len()
                    )));
                }
                if let Some(v) = data.iter().find(|v| **v > 1) {
                    return Err(Error::InvalidArgument(format!(
                        concat!($what, " value {} is not binary"),
                        v
                    )));
                }
                Ok(Self {
                    width,
                    height,
                    data,
                })
            }

            pub fn zeros(width: usize, height: usize) -> Self {
                Self::from_fn(width, height, |_, _| false)
            }

            pub fn ones(width: usize, height: usize) -> Self {
                Self::from_fn(width, height, |_, _| true)
            }

            pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
                assert!(width > 0 && height > 0, concat!("empty ", $what));
                let mut data = Vec::with_capacity(width * height);
                for y in 0..height {
                    for x in 0..width {
                        data.push(u8::from(f(x, y)));
                    }
                }
                Self {
                    width,
                    height,
                    data,
                }
            }

            /// Binarizes a row-major field of values: `v >= threshold` maps to 1.
            pub fn from_values(
                width: usize,
                height: usize,
                values: &[f64],
                threshold: f64,
            ) -> Result<Self> {
                Self::new(
                    width,
                    height,
                    values.iter().map(|&v| u8::from(v >= threshold)).collect(),
                )
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }

            /// Row-major `{0, 1}` values.
            pub fn data(&self) -> &[u8] {
                &self.data
            }

            pub fn get(&self, x: usize, y: usize) -> bool {
                self.data[y * self.width + x] == 1
            }

            pub fn count(&self) -> usize {
                self.data.iter().filter(|&&v| v == 1).count()
            }

            pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
                if (width, height) == self.dims() {
                    return self.clone();
                }
                let mut data = Vec::with_capacity(width * height);
                for y in 0..height {
                    let sy = nearest_index(y, height, self.height);
                    for x in 0..width {
                        let sx = nearest_index(x, width, self.width);
                        data.push(self.data[sy * self.width + sx]);
                    }
                }
                Self {
                    width,
                    height,
                    data,
                }
            }

            /// Loads a stored field, binarizing luminance at 0.5 before the
            /// optional nearest-neighbour resize.
            pub fn load(path: &Path, size: Option<(usize, usize)>) -> Result<Self> {
                let raster = RasterImage::from_dynamic(&decode(path)?);
                let field = Self::from_values(
                    raster.width(),
                    raster.height(),
                    &raster.luminance(),
                    MASK_THRESHOLD,
                )?;
                Ok(match size {
                    Some((w, h)) => field.resize_nearest(w, h),
                    None => field,
                })
            }

            /// Writes a 1-bit grayscale PNG.
            pub fn save_png(&self, path: &Path) -> Result<()> {
                write_bilevel_png(path, self.width, self.height, &self.data)
            }
        }
    };
}

binary_field!(BinaryMask, "mask");
binary_field!(EdgeMap, "edge map");

impl BinaryMask {
    /// Fraction of pixels set to 1.
    pub fn fill_ratio(&self) -> f64 {
        self.count() as f64 / (self.width * self.height) as f64
    }
}

impl EdgeMap {
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            data: mask.data.clone(),
        }
    }
}

fn write_bilevel_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let encode_err = |e: png::EncodingError| {
        Error::io(path, std::io::Error::other(e.to_string()))
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    let stride = width.div_ceil(8);
    let mut packed = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if data[y * width + x] == 1 {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    writer.write_image_data(&packed).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// An image with a hole cut out by a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSample {
    pub image: RasterImage,
    pub mask: BinaryMask,
    pub holed_image: RasterImage,
}

impl MaskedSample {
    pub fn new(image: RasterImage, mask: BinaryMask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::Shape(format!(
                "image {:?} and mask {:?} differ",
                image.dims(),
                mask.dims()
            )));
        }
        let holed_image = apply_hole(&image, &mask);
        Ok(Self {
            image,
            mask,
            holed_image,
        })
    }
}

/// Zeroes every channel at mask = 1 pixels.
pub fn apply_hole(image: &RasterImage, mask: &BinaryMask) -> RasterImage {
    debug_assert_eq!(image.dims(), mask.dims());
    let mut data = image.data.clone();
    for (px, &m) in data.chunks_exact_mut(3).zip(mask.data()) {
        if m == 1 {
            px.fill(0.0);
        }
    }
    RasterImage {
        width: image.width,
        height: image.height,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(RasterImage::new(1, 1, vec![0.0, 1.0, 1.5]).is_err());
        assert!(RasterImage::new(1, 1, vec![0.0, f64::NAN, 0.5]).is_err());
        assert!(RasterImage::new(0, 1, vec![]).is_err());
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
    }

    #[test]
    fn fill_ratio_counts_ones() {
        let m = BinaryMask::from_fn(4, 4, |x, _| x < 1);
        assert_eq!(m.fill_ratio(), 0.25);
    }

    #[test]
    fn nearest_upscale_doubles_pixels() {
        let m = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let up = m.resize_nearest(4, 4);
        assert_eq!(
            up.data(),
            &[1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1]
        );
        assert_eq!(up.fill_ratio(), m.fill_ratio());
    }

    #[test]
    fn masked_sample_zeroes_hole_only() {
        let img = RasterImage::from_fn(3, 2, |x, y| [0.1 * x as f64, 0.2 * y as f64 + 0.1, 0.5]);
        let mask = BinaryMask::from_fn(3, 2, |x, y| x == 1 && y == 0);
        let s = MaskedSample::new(img.clone(), mask).unwrap();
        assert_eq!(s.holed_image.pixel(1, 0), [0.0; 3]);
        assert_eq!(s.holed_image.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(s.holed_image.pixel(2, 1), img.pixel(2, 1));
    }

    #[test]
    fn bilevel_png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = BinaryMask::from_fn(13, 7, |x, y| (x * y) % 3 == 1);
        m.save_png(&path).unwrap();
        assert_eq!(BinaryMask::load(&path, None).unwrap(), m);
    }

    #[test]
    fn rgb_png_round_trips_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let img = RasterImage::from_fn(5, 4, |x, y| [x as f64 / 7.0, y as f64 / 3.3, 0.123]);
        img.save_png(&path).unwrap();
        assert_eq!(RasterImage::load(&path, None).unwrap(), img.quantized());
    }
}
