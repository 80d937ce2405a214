//! U-Net polyp segmentation on real and synthetic mixtures.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_kind, read_sidecar, write_sidecar};
use crate::dataset::{DatasetManifest, Origin, Split};
use crate::error::{Error, Result};
use crate::metrics::{iou_suite, SegMetrics};
use crate::nn::ops::{bce_with_logits, soft_dice_loss};
use crate::nn::{
    conv_cfg, ensure_finite, images_to_tensor, masks_to_tensor, tensor_to_planes, Conv2d, ParamStore, Weights,
};
use crate::raster::{BinaryMask, RasterImage};
use crate::seeding::{config_hash, derive_seed};

const CHECKPOINT_KIND: &str = "unet";
/// Records decoded per chunk when loading a manifest into memory.
const LOAD_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub resolution: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub seed: u64,
    pub base_channels: usize,
    /// Number of pooling steps in the encoder.
    pub depth: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            threshold: 0.5,
            seed: 0,
            base_channels: 8,
            depth: 3,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("resolution", self.resolution),
            ("batch_size", self.batch_size),
            ("base_channels", self.base_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("seg.{name} must be positive")));
            }
        }
        if self.resolution % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "seg.resolution {} is not divisible by 2^{}",
                self.resolution, self.depth
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("seg.learning_rate must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("seg.threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

struct DoubleConv(Conv2d, Conv2d);

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self(
            store.conv2d(&format!("{name}.a"), cin, cout, 3, conv_cfg(1, 1))?,
            store.conv2d(&format!("{name}.b"), cout, cout, 3, conv_cfg(1, 1))?,
        ))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.apply(&self.0)?.relu()?.apply(&self.1)?.relu()?)
    }
}

struct UNet {
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    /// Channel-reducing conv after each upsampling, then the merge block.
    up: Vec<(Conv2d, DoubleConv)>,
    head: Conv2d,
}

impl UNet {
    fn new(store: &mut ParamStore, base: usize, depth: usize) -> Result<Self> {
        let mut down = Vec::new();
        let mut cin = 3;
        for i in 0..depth {
            let c = base << i;
            down.push(DoubleConv::new(store, &format!("down.{i}"), cin, c)?);
            cin = c;
        }
        let bottom = DoubleConv::new(store, "bottom", cin, base << depth)?;
        let mut up = Vec::new();
        for i in (0..depth).rev() {
            let c = base << i;
            up.push((
                store.conv2d(&format!("up.{i}.reduce"), c * 2, c, 3, conv_cfg(1, 1))?,
                DoubleConv::new(store, &format!("up.{i}.merge"), c * 2, c)?,
            ));
        }
        let head = store.conv2d("head", base, 1, 1, conv_cfg(0, 1))?;
        Ok(Self {
            down,
            bottom,
            up,
            head,
        })
    }

    /// Logits `[N, 1, H, W]`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x.clone();
        for block in &self.down {
            h = block.forward(&h)?;
            skips.push(h.clone());
            h = h.max_pool2d(2)?;
        }
        h = self.bottom.forward(&h)?;
        for ((reduce, merge), skip) in self.up.iter().zip(skips.iter().rev()) {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?.apply(reduce)?.relu()?;
            h = merge.forward(&Tensor::cat(&[&h, skip], 1)?)?;
        }
        Ok(h.apply(&self.head)?)
    }
}

#[derive(Clone, Debug)]
pub struct SegCheckpoint {
    pub config: SegConfig,
    pub weights: Weights,
    pub epochs_trained: usize,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct SegMeta {
    kind: String,
    epochs_trained: usize,
    config_hash: String,
    config: SegConfig,
}

impl SegCheckpoint {
    pub fn initialize(config: &SegConfig) -> Result<Self> {
        config.validate()?;
        let (store, _) = fresh(config)?;
        Ok(Self {
            config: config.clone(),
            weights: store.snapshot()?,
            epochs_trained: 0,
            config_hash: config_hash(config),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.weights.save(path)?;
        write_sidecar(
            path,
            &SegMeta {
                kind: CHECKPOINT_KIND.into(),
                epochs_trained: self.epochs_trained,
                config_hash: self.config_hash.clone(),
                config: self.config.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: SegMeta = read_sidecar(path)?;
        check_kind(&meta.kind, CHECKPOINT_KIND, path)?;
        meta.config.validate()?;
        let ckpt = Self {
            weights: Weights::load(path)?,
            epochs_trained: meta.epochs_trained,
            config_hash: meta.config_hash,
            config: meta.config,
        };
        SegModel::new(&ckpt)?;
        Ok(ckpt)
    }
}

fn fresh(config: &SegConfig) -> Result<(ParamStore, UNet)> {
    let mut store = ParamStore::new(derive_seed(config.seed, "seg.unet"), DType::F32);
    let net = UNet::new(&mut store, config.base_channels, config.depth)?;
    Ok((store, net))
}

/// Loads a fully annotated manifest as `([N, 3, R, R], [N, 1, R, R])`.
fn load_tensors(data: &DatasetManifest, resolution: usize) -> Result<(Tensor, Tensor)> {
    let size = Some((resolution, resolution));
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for chunk in data.records.chunks(LOAD_CHUNK) {
        let part = DatasetManifest::new(chunk.to_vec()).load_all(size)?;
        let imgs: Vec<&RasterImage> = part.iter().map(|(i, _)| i).collect();
        let ms: Vec<&BinaryMask> = part
            .iter()
            .map(|(_, m)| m.as_ref().expect("masks checked by caller"))
            .collect();
        images.push(images_to_tensor(&imgs, DType::F32)?);
        masks.push(masks_to_tensor(&ms, DType::F32)?);
    }
    Ok((Tensor::cat(&images, 0)?, Tensor::cat(&masks, 0)?))
}

/// Trains a U-Net with BCE + soft Dice on every record of `data`.
pub fn train_unet(data: &DatasetManifest, config: &SegConfig) -> Result<SegCheckpoint> {
    config.validate()?;
    data.require_masks()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("segmentation training set is empty".into()));
    }
    let (store, net) = fresh(config)?;
    if config.epochs > 0 {
        let (images, masks) = load_tensors(data, config.resolution)?;
        let mut opt = AdamW::new(
            store.vars_with_prefix(""),
            ParamsAdamW {
                lr: config.learning_rate,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "seg.train"));
        let mut order: Vec<u32> = (0..data.len() as u32).collect();
        let mut step = 0u64;
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                let idx = Tensor::new(batch, images.device())?;
                let x = images.index_select(&idx, 0)?;
                let y = masks.index_select(&idx, 0)?;
                let logits = net.forward(&x)?;
                let probs = candle_nn::ops::sigmoid(&logits)?;
                let loss = (bce_with_logits(&logits, &y)? + soft_dice_loss(&probs, &y)?)?;
                opt.backward_step(&loss)?;
                step += 1;
                let value: f32 = loss.to_scalar()?;
                ensure_finite(value, "seg", step, "BCE + Dice loss")?;
                epoch_loss += f64::from(value) * batch.len() as f64;
            }
            log::debug!("seg epoch {epoch}: mean loss {:.4}", epoch_loss / data.len() as f64);
        }
    }
    Ok(SegCheckpoint {
        config: config.clone(),
        weights: store.snapshot()?,
        epochs_trained: config.epochs,
        config_hash: config_hash(config),
    })
}

/// Inference wrapper around a checkpoint.
pub struct SegModel {
    net: UNet,
    resolution: usize,
}

impl SegModel {
    pub fn new(ckpt: &SegCheckpoint) -> Result<Self> {
        let mut store = ParamStore::from_weights(&ckpt.weights, DType::F32)?;
        Ok(Self {
            net: UNet::new(&mut store, ckpt.config.base_channels, ckpt.config.depth)?,
            resolution: ckpt.config.resolution,
        })
    }

    /// Foreground probabilities, one row-major plane per image.
    pub fn probabilities(&self, images: &[&RasterImage]) -> Result<Vec<Vec<f64>>> {
        let r = self.resolution;
        if let Some(bad) = images.iter().find(|i| i.dims() != (r, r)) {
            return Err(Error::Shape(format!("model expects {r}x{r}, got {:?}", bad.dims())));
        }
        let x = images_to_tensor(images, DType::F32)?;
        tensor_to_planes(&candle_nn::ops::sigmoid(&self.net.forward(&x)?)?)
    }

    pub fn predict(&self, images: &[&RasterImage], threshold: f64) -> Result<Vec<BinaryMask>> {
        let r = self.resolution;
        self.probabilities(images)?
            .iter()
            .map(|p| BinaryMask::from_values(r, r, p, threshold))
            .collect()
    }
}

/// Scores thresholded predictions on `val` at the model resolution.
pub fn evaluate_seg(ckpt: &SegCheckpoint, val: &DatasetManifest, threshold: f64) -> Result<SegMetrics> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation manifest is empty".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    val.require_masks()?;
    let model = SegModel::new(ckpt)?;
    let r = ckpt.config.resolution;
    let mut preds = Vec::with_capacity(val.len());
    let mut truth = Vec::with_capacity(val.len());
    for chunk in val.records.chunks(LOAD_CHUNK) {
        let part = DatasetManifest::new(chunk.to_vec()).load_all(Some((r, r)))?;
        for batch in part.chunks(ckpt.config.batch_size.max(1)) {
            let imgs: Vec<&RasterImage> = batch.iter().map(|(i, _)| i).collect();
            preds.extend(model.predict(&imgs, threshold)?);
        }
        truth.extend(part.into_iter().map(|(_, m)| m.expect("masks checked above")));
    }
    iou_suite(&preds, &truth)
}

/// `real_train` plus the first `n_synth` synthetic records of a seeded
/// shuffle, all tagged as training data.
pub fn build_mixed_dataset(
    real_train: &DatasetManifest,
    synthetic: &DatasetManifest,
    n_synth: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_synth > synthetic.len() {
        return Err(Error::InsufficientData(format!(
            "requested {n_synth} synthetic records from a pool of {}",
            synthetic.len()
        )));
    }
    if let Some(r) = real_train
        .records
        .iter()
        .find(|r| r.origin != Origin::Real || r.split == Some(Split::Val))
    {
        return Err(Error::InvalidArgument(format!(
            "{} is not a real training record",
            r.image_path.display()
        )));
    }
    let mut order: Vec<usize> = (0..synthetic.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut records = real_train.records.clone();
    records.extend(order[..n_synth].iter().map(|&i| synthetic.records[i].clone()));
    for r in &mut records {
        r.split = Some(Split::Train);
    }
    Ok(DatasetManifest {
        records,
        seed: real_train.seed,
    })
}
