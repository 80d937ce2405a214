use candle_core::{DType, Tensor, D};
use candle_nn::Module;

use super::{conv_cfg, images_to_tensor, Conv2d, ParamStore};
use crate::error::Result;
use crate::metrics::FeatureExtractor;
use crate::raster::RasterImage;

const CHANNELS: [usize; 3] = [8, 16, 32];

/// A small convolutional network with fixed random weights.
///
/// Serves both as the perceptual/style feature front-end during inpainting
/// training and as the FID embedding (per-channel mean and standard deviation
/// of every stage).
#[derive(Clone)]
pub struct FrozenFeatures {
    convs: Vec<Conv2d>,
}

impl FrozenFeatures {
    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in CHANNELS.iter().enumerate() {
            let conv = store.conv2d(&format!("f{i}"), cin, cout, 3, conv_cfg(1, 2))?;
            // Plain tensors: no gradients reach these weights.
            convs.push(conv.detached());
            cin = cout;
        }
        Ok(Self { convs })
    }

    /// Activations after each stage for an `[N, 3, H, W]` batch in `[0, 1]`.
    pub fn maps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = ((x * 2.0)? - 1.0)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

impl FeatureExtractor for FrozenFeatures {
    fn dim(&self) -> usize {
        2 * CHANNELS.iter().sum::<usize>()
    }

    fn features(&self, image: &RasterImage) -> Result<Vec<f64>> {
        let dtype = self.convs[0].weight().dtype();
        let x = images_to_tensor(&[image], dtype)?;
        let mut out = Vec::with_capacity(self.dim());
        for m in self.maps(&x)? {
            let flat = m.flatten_from(2)?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let std = flat.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)?.sqrt()?;
            out.extend(mean.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
            out.extend(std.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}
