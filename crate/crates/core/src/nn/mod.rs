//! Shared neural-network plumbing on top of candle.
//!
//! Parameters are initialised from a seeded ChaCha stream rather than the
//! device RNG, so every model in the crate is a pure function of its seed.

mod conv;
mod features;
pub(crate) mod ops;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use conv::{Conv2d, ConvCfg};
pub use features::FrozenFeatures;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, EdgeMap, RasterImage};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default)]
pub struct Weights(BTreeMap<String, Tensor>);

impl Weights {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Copies `other` in under `prefix.`.
    pub fn insert_prefixed(&mut self, prefix: &str, other: &Weights) {
        for (k, v) in &other.0 {
            self.0.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Weights {
        let p = format!("{prefix}.");
        Weights(
            self.0
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        )
    }

    /// Largest absolute elementwise difference; `None` when the names or
    /// shapes differ.
    pub fn max_abs_diff(&self, other: &Weights) -> Result<Option<f64>> {
        if self.0.len() != other.0.len() {
            return Ok(None);
        }
        let mut worst = 0.0f64;
        for (k, a) in &self.0 {
            let Some(b) = other.0.get(k) else {
                return Ok(None);
            };
            if a.dims() != b.dims() {
                return Ok(None);
            }
            let d = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
                .abs()?
                .flatten_all()?
                .max(0)?
                .to_scalar::<f64>()?;
            worst = worst.max(d);
        }
        Ok(Some(worst))
    }

    pub fn same_values(&self, other: &Weights) -> Result<bool> {
        Ok(self.max_abs_diff(other)? == Some(0.0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<&str, Tensor> = self.0.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        candle_core::safetensors::save(&map, path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        Ok(Weights(map.into_iter().collect()))
    }
}

/// Creates and owns the trainable variables of a model.
///
/// A store built with [`ParamStore::new`] initialises parameters on first
/// request; one built from saved [`Weights`] requires every requested name to
/// exist with the requested shape.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: Option<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn from_weights(weights: &Weights, dtype: DType) -> Result<Self> {
        let vars = weights
            .0
            .iter()
            .map(|(k, t)| Ok((k.clone(), Var::from_tensor(&t.to_dtype(dtype)?)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            vars,
            dtype,
            rng: None,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn param(&mut self, name: &str, shape: &[usize], fan_in: Option<usize>) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let Some(rng) = self.rng.as_mut() else {
            return Err(Error::Checkpoint(format!("checkpoint lacks parameter {name}")));
        };
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match fan_in {
            Some(fan_in) => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(rng)).collect()
            }
            None => vec![0.0; n],
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: ConvCfg,
    ) -> Result<Conv2d> {
        let w = self.param(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Some(in_channels * kernel * kernel),
        )?;
        let b = self.param(&format!("{name}.bias"), &[out_channels], None)?;
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let w = self.param(&format!("{name}.weight"), &[out_dim, in_dim], Some(in_dim))?;
        let b = self.param(&format!("{name}.bias"), &[out_dim], None)?;
        Ok(Linear::new(w, Some(b)))
    }

    /// Variables whose name starts with `prefix`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<Weights> {
        self.snapshot_prefix("")
    }

    /// Deep copy of the variables under `prefix`, with the prefix kept.
    pub fn snapshot_prefix(&self, prefix: &str) -> Result<Weights> {
        Ok(Weights(
            self.vars
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
                .collect::<Result<_>>()?,
        ))
    }
}

pub fn conv_cfg(padding: usize, stride: usize) -> ConvCfg {
    ConvCfg {
        padding,
        stride,
        dilation: 1,
    }
}

/// Stacks rasters into an `[N, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&RasterImage], dtype: DType) -> Result<Tensor> {
    let (w, h) = dims_of(images.iter().map(|i| i.dims()))?;
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        for c in 0..3 {
            data.extend(img.data().iter().skip(c).step_by(3).map(|&v| v as f32));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks single-channel fields into an `[N, 1, H, W]` tensor.
pub fn planes_to_tensor(planes: &[&[f64]], width: usize, height: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(planes.len() * width * height);
    for p in planes {
        if p.len() != width * height {
            return Err(Error::Shape(format!(
                "plane of {} values for {width}x{height}",
                p.len()
            )));
        }
        data.extend(p.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (planes.len(), 1, height, width), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn masks_to_tensor(masks: &[&BinaryMask], dtype: DType) -> Result<Tensor> {
    let (w, h) = dims_of(masks.iter().map(|m| m.dims()))?;
    let planes: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| m.data().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let refs: Vec<&[f64]> = planes.iter().map(Vec::as_slice).collect();
    planes_to_tensor(&refs, w, h, dtype)
}

pub fn edges_to_tensor(edges: &[&EdgeMap], dtype: DType) -> Result<Tensor> {
    let (w, h) = dims_of(edges.iter().map(|m| m.dims()))?;
    let planes: Vec<Vec<f64>> = edges
        .iter()
        .map(|m| m.data().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let refs: Vec<&[f64]> = planes.iter().map(Vec::as_slice).collect();
    planes_to_tensor(&refs, w, h, dtype)
}

/// Splits an `[N, 3, H, W]` tensor with values in `[0, 1]` back into rasters.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RasterImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let values: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    (0..n)
        .map(|i| {
            let base = i * 3 * plane;
            Ok(RasterImage::from_fn(w, h, |x, y| {
                let p = y * w + x;
                [
                    values[base + p],
                    values[base + plane + p],
                    values[base + 2 * plane + p],
                ]
            }))
        })
        .collect()
}

/// Row-major values of every `[1, H, W]` plane in an `[N, 1, H, W]` tensor.
pub fn tensor_to_planes(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("expected 1 channel, got {c}")));
    }
    let values: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(values.chunks(h * w).take(n).map(<[f64]>::to_vec).collect())
}

fn dims_of(mut it: impl Iterator<Item = (usize, usize)>) -> Result<(usize, usize)> {
    let first = it
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    if let Some(other) = it.find(|d| *d != first) {
        return Err(Error::Shape(format!("batch mixes {first:?} and {other:?}")));
    }
    Ok(first)
}

/// Errors with [`Error::TrainingDiverged`] unless `value` is finite.
pub(crate) fn ensure_finite(value: f32, stage: &str, iteration: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingDiverged {
            stage: stage.to_string(),
            iteration,
            loss: what.to_string(),
        })
    }
}
