//! Progressive-growing GAN over binary polyp masks, and the fill-ratio filter
//! applied to its samples.
//!
//! Training starts at `start_resolution` and doubles up to
//! `target_resolution`. Every stage after the first spends the first half of
//! its iterations fading the new block in. The generator emits a continuous
//! field in `[0, 1]`; binarization only happens when sampling.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Linear, Module, Optimizer, ParamsAdamW};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_kind, read_sidecar, write_sidecar};
use crate::error::{Error, Result};
use crate::nn::ops::{adv_fake, adv_real, leaky_relu, lerp};
use crate::nn::{conv_cfg, Conv2d, ensure_finite, masks_to_tensor, tensor_to_planes, ParamStore, Weights};
use crate::raster::BinaryMask;
use crate::seeding::{config_hash, derive_seed};

const BASE_RESOLUTION: usize = 4;
const CHECKPOINT_KIND: &str = "mask_gan";
const SAMPLE_BATCH: usize = 64;
/// Step of the central difference used by the gradient-norm penalty.
const PENALTY_STEP: f64 = 0.05;

pub const DEFAULT_MIN_FILL: f64 = 0.05;
pub const DEFAULT_MAX_FILL: f64 = 0.70;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskGanConfig {
    pub start_resolution: usize,
    pub target_resolution: usize,
    pub iterations_per_stage: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub latent_dim: usize,
    /// Feature width of the low-resolution blocks; halves as resolution grows.
    pub channels: usize,
    /// Weight of the discriminator gradient-norm penalty on real samples.
    pub penalty_weight: f64,
}

impl Default for MaskGanConfig {
    fn default() -> Self {
        Self {
            start_resolution: 8,
            target_resolution: 256,
            iterations_per_stage: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            latent_dim: 64,
            channels: 64,
            penalty_weight: 10.0,
        }
    }
}

impl MaskGanConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v >= BASE_RESOLUTION && v.is_power_of_two();
        if !pow2(self.start_resolution) || !pow2(self.target_resolution) {
            return Err(Error::Config(format!(
                "mask_gan resolutions must be powers of two >= {BASE_RESOLUTION}, got {} and {}",
                self.start_resolution, self.target_resolution
            )));
        }
        if self.start_resolution > self.target_resolution {
            return Err(Error::Config(format!(
                "mask_gan start_resolution {} exceeds target_resolution {}",
                self.start_resolution, self.target_resolution
            )));
        }
        for (name, v) in [
            ("iterations_per_stage", self.iterations_per_stage),
            ("batch_size", self.batch_size),
            ("latent_dim", self.latent_dim),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("mask_gan.{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("mask_gan.learning_rate must be positive".into()));
        }
        if !(self.penalty_weight >= 0.0) {
            return Err(Error::Config("mask_gan.penalty_weight must be non-negative".into()));
        }
        Ok(())
    }

    fn level(resolution: usize) -> usize {
        (resolution / BASE_RESOLUTION).trailing_zeros() as usize
    }

    fn start_level(&self) -> usize {
        Self::level(self.start_resolution)
    }

    fn target_level(&self) -> usize {
        Self::level(self.target_resolution)
    }

    fn width(&self, level: usize) -> usize {
        // Full width up to 16 px, then halve per doubling, never below 8.
        let res = BASE_RESOLUTION << level;
        (self.channels * 16 / res.max(16)).max(8).min(self.channels)
    }
}

struct Generator {
    latent_dim: usize,
    base_width: usize,
    dense: Linear,
    base_conv: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    to_mask: Vec<Conv2d>,
}

impl Generator {
    fn build(store: &mut ParamStore, cfg: &MaskGanConfig) -> Result<Self> {
        let w0 = cfg.width(0);
        let dense = store.linear("dense", cfg.latent_dim, w0 * 16)?;
        let base_conv = store.conv2d("base", w0, w0, 3, conv_cfg(1, 1))?;
        let mut blocks = Vec::new();
        let mut to_mask = vec![store.conv2d("to_mask.0", w0, 1, 1, conv_cfg(0, 1))?];
        for l in 1..=cfg.target_level() {
            let (cin, cout) = (cfg.width(l - 1), cfg.width(l));
            blocks.push((
                store.conv2d(&format!("block.{l}.a"), cin, cout, 3, conv_cfg(1, 1))?,
                store.conv2d(&format!("block.{l}.b"), cout, cout, 3, conv_cfg(1, 1))?,
            ));
            to_mask.push(store.conv2d(&format!("to_mask.{l}"), cout, 1, 1, conv_cfg(0, 1))?);
        }
        Ok(Self {
            latent_dim: cfg.latent_dim,
            base_width: w0,
            dense,
            base_conv,
            blocks,
            to_mask,
        })
    }

    /// Soft masks `[B, 1, R, R]` at `level`, blending in the previous
    /// level's output with weight `1 - alpha`.
    fn forward(&self, z: &Tensor, level: usize, alpha: f64) -> Result<Tensor> {
        let b = z.dim(0)?;
        let mut h = self.dense.forward(z)?.reshape((b, self.base_width, 4, 4))?;
        h = leaky_relu(&leaky_relu(&h)?.apply(&self.base_conv)?)?;
        let mut prev = None;
        for (a, c) in &self.blocks[..level] {
            prev = Some(h.clone());
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            h = leaky_relu(&leaky_relu(&h.apply(a)?)?.apply(c)?)?;
        }
        let mut logits = h.apply(&self.to_mask[level])?;
        if let (Some(p), true) = (prev, alpha < 1.0) {
            let (_, _, hh, ww) = logits.dims4()?;
            let skip = p.apply(&self.to_mask[level - 1])?.upsample_nearest2d(hh, ww)?;
            logits = lerp(&skip, &logits, alpha)?;
        }
        // Linear output centred on 0.5; a squashing activation saturates
        // once the generator drifts to empty masks and never recovers.
        Ok(((logits * 0.5)? + 0.5)?)
    }
}

struct Discriminator {
    from_mask: Vec<Conv2d>,
    blocks: Vec<(Conv2d, Conv2d)>,
    final_conv: Conv2d,
    head: Linear,
}

impl Discriminator {
    fn build(store: &mut ParamStore, cfg: &MaskGanConfig) -> Result<Self> {
        let w0 = cfg.width(0);
        let mut from_mask = vec![store.conv2d("from_mask.0", 1, w0, 1, conv_cfg(0, 1))?];
        let mut blocks = Vec::new();
        for l in 1..=cfg.target_level() {
            let (cin, cout) = (cfg.width(l), cfg.width(l - 1));
            from_mask.push(store.conv2d(&format!("from_mask.{l}"), 1, cin, 1, conv_cfg(0, 1))?);
            blocks.push((
                store.conv2d(&format!("block.{l}.a"), cin, cin, 3, conv_cfg(1, 1))?,
                store.conv2d(&format!("block.{l}.b"), cin, cout, 3, conv_cfg(1, 1))?,
            ));
        }
        let final_conv = store.conv2d("final", w0 + 1, w0, 3, conv_cfg(1, 1))?;
        let head = store.linear("head", w0 * 16, 1)?;
        Ok(Self {
            from_mask,
            blocks,
            final_conv,
            head,
        })
    }

    fn block(&self, level: usize, h: &Tensor) -> Result<Tensor> {
        let (a, c) = &self.blocks[level - 1];
        let h = leaky_relu(&leaky_relu(&h.apply(a)?)?.apply(c)?)?;
        Ok(h.avg_pool2d(2)?)
    }

    /// Realness logits `[B, 1]` for masks in `[0, 1]` at `level`.
    fn forward(&self, x: &Tensor, level: usize, alpha: f64) -> Result<Tensor> {
        let x = ((x * 2.0)? - 1.0)?;
        let mut h = leaky_relu(&x.apply(&self.from_mask[level])?)?;
        if level > 0 {
            h = self.block(level, &h)?;
            if alpha < 1.0 {
                let skip = leaky_relu(&x.avg_pool2d(2)?.apply(&self.from_mask[level - 1])?)?;
                h = lerp(&skip, &h, alpha)?;
            }
            for l in (1..level).rev() {
                h = self.block(l, &h)?;
            }
        }
        // Minibatch standard deviation as an extra feature map.
        let (b, _, hh, ww) = h.dims4()?;
        let mean = h.mean_keepdim(0)?;
        let std = (h.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)? + 1e-8)?
            .sqrt()?
            .mean_all()?;
        let std_map = std.reshape((1, 1, 1, 1))?.broadcast_as((b, 1, hh, ww))?.contiguous()?;
        let h = Tensor::cat(&[&h, &std_map], 1)?;
        let h = leaky_relu(&h.apply(&self.final_conv)?)?;
        Ok(self.head.forward(&h.flatten_from(1)?)?)
    }
}

/// Trained (or freshly initialised) mask GAN state.
#[derive(Clone, Debug)]
pub struct MaskGanCheckpoint {
    pub config: MaskGanConfig,
    pub generator: Weights,
    pub discriminator: Weights,
    /// Current output resolution.
    pub stage: usize,
    pub iteration: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct MaskGanMeta {
    kind: String,
    stage: usize,
    iteration: u64,
    config_hash: String,
    config: MaskGanConfig,
}

impl MaskGanCheckpoint {
    /// Untrained networks at the start resolution.
    pub fn initialize(config: &MaskGanConfig) -> Result<Self> {
        config.validate()?;
        let (g, d) = build_stores(config)?;
        Ok(Self {
            config: config.clone(),
            generator: g.0.snapshot()?,
            discriminator: d.0.snapshot()?,
            stage: config.start_resolution,
            iteration: 0,
            config_hash: config_hash(config),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = Weights::default();
        all.insert_prefixed("generator", &self.generator);
        all.insert_prefixed("discriminator", &self.discriminator);
        all.save(path)?;
        write_sidecar(
            path,
            &MaskGanMeta {
                kind: CHECKPOINT_KIND.into(),
                stage: self.stage,
                iteration: self.iteration,
                config_hash: self.config_hash.clone(),
                config: self.config.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: MaskGanMeta = read_sidecar(path)?;
        check_kind(&meta.kind, CHECKPOINT_KIND, path)?;
        meta.config.validate()?;
        let all = Weights::load(path)?;
        Ok(Self {
            generator: all.strip_prefix("generator"),
            discriminator: all.strip_prefix("discriminator"),
            stage: meta.stage,
            iteration: meta.iteration,
            config_hash: meta.config_hash,
            config: meta.config,
        })
    }
}

fn build_stores(cfg: &MaskGanConfig) -> Result<((ParamStore, Generator), (ParamStore, Discriminator))> {
    let mut gs = ParamStore::new(derive_seed(cfg.seed, "mask_gan.generator"), DType::F32);
    let g = Generator::build(&mut gs, cfg)?;
    let mut ds = ParamStore::new(derive_seed(cfg.seed, "mask_gan.discriminator"), DType::F32);
    let d = Discriminator::build(&mut ds, cfg)?;
    Ok(((gs, g), (ds, d)))
}

/// Per-iteration losses recorded during mask GAN training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaskGanStep {
    pub stage: usize,
    pub iteration: u64,
    pub alpha: f64,
    pub d_loss: f32,
    pub g_loss: f32,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn downsample(x: &Tensor, resolution: usize) -> Result<Tensor> {
    let (_, _, h, _) = x.dims4()?;
    Ok(if h == resolution {
        x.clone()
    } else {
        x.avg_pool2d(h / resolution)?
    })
}

/// Trains the progressive GAN on `masks`, returning the final checkpoint.
pub fn train_mask_generator(masks: &[BinaryMask], config: &MaskGanConfig) -> Result<MaskGanCheckpoint> {
    train_mask_generator_logged(masks, config).map(|(ckpt, _)| ckpt)
}

/// As [`train_mask_generator`], also returning the loss trace.
pub fn train_mask_generator_logged(
    masks: &[BinaryMask],
    config: &MaskGanConfig,
) -> Result<(MaskGanCheckpoint, Vec<MaskGanStep>)> {
    config.validate()?;
    if masks.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "mask GAN needs at least 2 masks, got {}",
            masks.len()
        )));
    }
    let t = config.target_resolution;
    let resized: Vec<BinaryMask> = masks.iter().map(|m| m.resize_nearest(t, t)).collect();
    let refs: Vec<&BinaryMask> = resized.iter().collect();
    let reals = masks_to_tensor(&refs, DType::F32)?;

    let ((gs, generator), (ds, discriminator)) = build_stores(config)?;
    let adam = ParamsAdamW {
        lr: config.learning_rate,
        beta1: 0.0,
        beta2: 0.99,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut g_opt = AdamW::new(gs.vars_with_prefix(""), adam.clone())?;
    let mut d_opt = AdamW::new(ds.vars_with_prefix(""), adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "mask_gan.train"));
    let indices: Vec<u32> = (0..masks.len() as u32).collect();
    let batch = config.batch_size;

    let mut log = Vec::new();
    let mut iteration = 0u64;
    for level in config.start_level()..=config.target_level() {
        let res = BASE_RESOLUTION << level;
        let stage_reals = downsample(&reals, res)?;
        let coarse_reals = if level > 0 {
            downsample(&reals, res / 2)?.upsample_nearest2d(res, res)?
        } else {
            stage_reals.clone()
        };
        let fade = if level > config.start_level() {
            config.iterations_per_stage / 2
        } else {
            0
        };
        for it in 0..config.iterations_per_stage {
            let alpha = if it < fade {
                (it + 1) as f64 / (fade + 1) as f64
            } else {
                1.0
            };
            let pick: Vec<u32> = (0..batch)
                .map(|_| *indices.choose(&mut rng).expect("non-empty"))
                .collect();
            let pick = Tensor::new(pick.as_slice(), &Device::Cpu)?;
            let mut real = stage_reals.index_select(&pick, 0)?;
            if alpha < 1.0 {
                real = lerp(&coarse_reals.index_select(&pick, 0)?, &real, alpha)?;
            }

            let z = normal_tensor(&mut rng, &[batch, generator.latent_dim])?;
            let fake = generator.forward(&z, level, alpha)?.detach();
            let mut d_loss = (adv_fake(&discriminator.forward(&fake, level, alpha)?)?
                + adv_real(&discriminator.forward(&real, level, alpha)?)?)?;
            if config.penalty_weight > 0.0 {
                // E[(grad . e)^2] = |grad|^2 for standard normal e; the
                // directional derivative is taken by central difference.
                let e = (normal_tensor(&mut rng, real.dims())? * PENALTY_STEP)?;
                let up = discriminator.forward(&(&real + &e)?, level, alpha)?;
                let down = discriminator.forward(&(&real - &e)?, level, alpha)?;
                let slope = ((up - down)? / (2.0 * PENALTY_STEP))?;
                let penalty = slope.sqr()?.mean_all()?;
                d_loss = (d_loss + (penalty * (config.penalty_weight / 2.0))?)?;
            }
            d_opt.backward_step(&d_loss)?;

            let z = normal_tensor(&mut rng, &[batch, generator.latent_dim])?;
            let g_loss = adv_real(&discriminator.forward(&generator.forward(&z, level, alpha)?, level, alpha)?)?;
            g_opt.backward_step(&g_loss)?;

            iteration += 1;
            let (dl, gl) = (d_loss.to_scalar::<f32>()?, g_loss.to_scalar::<f32>()?);
            let stage = format!("mask_gan@{res}");
            ensure_finite(dl, &stage, iteration, "discriminator loss")?;
            ensure_finite(gl, &stage, iteration, "generator loss")?;
            log.push(MaskGanStep {
                stage: res,
                iteration,
                alpha,
                d_loss: dl,
                g_loss: gl,
            });
        }
        log::debug!("mask GAN stage {res} done at iteration {iteration}");
    }

    Ok((
        MaskGanCheckpoint {
            config: config.clone(),
            generator: gs.snapshot()?,
            discriminator: ds.snapshot()?,
            stage: t,
            iteration,
            config_hash: config_hash(config),
        },
        log,
    ))
}

/// Draws `n` binary masks at the checkpoint's resolution.
pub fn sample_masks(ckpt: &MaskGanCheckpoint, n: usize, seed: u64) -> Result<Vec<BinaryMask>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let mut store = ParamStore::from_weights(&ckpt.generator, DType::F32)?;
    let generator = Generator::build(&mut store, &ckpt.config)?;
    let level = MaskGanConfig::level(ckpt.stage);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let b = SAMPLE_BATCH.min(n - out.len());
        let z = normal_tensor(&mut rng, &[b, generator.latent_dim])?;
        let probs = generator.forward(&z, level, 1.0)?;
        for plane in tensor_to_planes(&probs)? {
            out.push(BinaryMask::from_values(ckpt.stage, ckpt.stage, &plane, 0.5)?);
        }
    }
    Ok(out)
}

/// Keeps masks whose fill ratio lies in `[min_fill, max_fill]`, in order.
pub fn filter_masks(masks: &[BinaryMask], min_fill: f64, max_fill: f64) -> Result<Vec<BinaryMask>> {
    if !(0.0..=1.0).contains(&min_fill) || !(0.0..=1.0).contains(&max_fill) || min_fill >= max_fill {
        return Err(Error::InvalidArgument(format!(
            "fill bounds must satisfy 0 <= min < max <= 1, got [{min_fill}, {max_fill}]"
        )));
    }
    Ok(masks
        .iter()
        .filter(|m| (min_fill..=max_fill).contains(&m.fill_ratio()))
        .cloned()
        .collect())
}
