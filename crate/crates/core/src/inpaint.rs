//! Two-stage edge-conditioned inpainting.
//!
//! Stage A completes the edge map inside the hole from the holed grayscale
//! image, the holed edges and the mask. Stage B paints RGB into the hole from
//! the holed image, the completed edges and the mask. Both stages are trained
//! against a PatchGAN discriminator.
//!
//! At generation time stage A is skipped and the caller's merged edge map is
//! the edge condition.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_kind, read_sidecar, write_sidecar};
use crate::dataset::{pair_random_mask, DatasetManifest};
use crate::edges::extract_edges;
use crate::error::{Error, Result};
use crate::metrics::{extract_features, fid, psnr, ssim};
use crate::nn::ops::{adv_fake, adv_real, composite, gram, instance_norm, leaky_relu};
use crate::nn::{
    conv_cfg, edges_to_tensor, ensure_finite, images_to_tensor, masks_to_tensor, planes_to_tensor,
    tensor_to_images, Conv2d, ConvCfg, FrozenFeatures, ParamStore, Weights,
};
use crate::raster::{quantize_u8, BinaryMask, EdgeMap, RasterImage};
use crate::seeding::{config_hash, derive_seed};

const CHECKPOINT_KIND: &str = "inpaint";
/// Training items whose reconstruction error is tracked in the log.
const PROBE_ITEMS: usize = 4;
/// Fixed seed of the feature network used for FID, so reports from different
/// runs share an embedding.
pub const FID_FEATURE_SEED: u64 = 0x5EED_F1D0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub style: f64,
    pub feature_matching: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 0.1,
            l1: 1.0,
            perceptual: 0.1,
            style: 250.0,
            feature_matching: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintConfig {
    pub resolution: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub eval_every: usize,
    pub seed: u64,
    /// Canny smoothing used for the training edge maps.
    pub edge_sigma: f64,
    /// Generator width at full resolution; doubles per downsampling.
    pub base_channels: usize,
    pub downsamples: usize,
    pub residual_blocks: usize,
    /// Discriminator learning rate as a fraction of `learning_rate`.
    pub discriminator_lr_ratio: f64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            iterations: 1000,
            batch_size: 4,
            learning_rate: 1e-3,
            loss_weights: LossWeights::default(),
            eval_every: 100,
            seed: 0,
            edge_sigma: 2.0,
            base_channels: 16,
            downsamples: 2,
            residual_blocks: 2,
            discriminator_lr_ratio: 0.1,
        }
    }
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("resolution", self.resolution),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("base_channels", self.base_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("inpaint.{name} must be positive")));
            }
        }
        let step = 1usize << self.downsamples;
        if self.resolution % step != 0 || self.resolution / step < 4 {
            return Err(Error::Config(format!(
                "inpaint.resolution {} does not support {} downsamplings",
                self.resolution, self.downsamples
            )));
        }
        if self.resolution < 16 {
            return Err(Error::Config(format!(
                "inpaint.resolution {} is below the discriminator minimum of 16",
                self.resolution
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("inpaint.learning_rate must be positive".into()));
        }
        if !(self.discriminator_lr_ratio > 0.0 && self.discriminator_lr_ratio.is_finite()) {
            return Err(Error::Config("inpaint.discriminator_lr_ratio must be positive".into()));
        }
        if !(self.edge_sigma > 0.0 && self.edge_sigma.is_finite()) {
            return Err(Error::Config("inpaint.edge_sigma must be positive".into()));
        }
        let w = &self.loss_weights;
        let all = [w.adversarial, w.l1, w.perceptual, w.style, w.feature_matching];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("inpaint.loss_weights must be non-negative".into()));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("inpaint.loss_weights are all zero".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            base_channels: self.base_channels,
            downsamples: self.downsamples,
            residual_blocks: self.residual_blocks,
        }
    }
}

/// Generator shape shared by both stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub base_channels: usize,
    pub downsamples: usize,
    pub residual_blocks: usize,
}

/// Encoder, dilated residual bottleneck and decoder; returns raw logits.
#[derive(Clone, Debug)]
pub struct InpaintGenerator {
    input: Conv2d,
    down: Vec<Conv2d>,
    residual: Vec<(Conv2d, Conv2d)>,
    up: Vec<Conv2d>,
    output: Conv2d,
    normalize: bool,
}

impl InpaintGenerator {
    /// Parameters are registered in `store` under `prefix`. Instance
    /// normalisation is applied after every hidden layer when `normalize`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        arch: Architecture,
        normalize: bool,
    ) -> Result<Self> {
        let c = arch.base_channels;
        let input = store.conv2d(&format!("{prefix}.input"), in_channels, c, 3, conv_cfg(1, 1))?;
        let mut width = c;
        let mut down = Vec::new();
        for i in 0..arch.downsamples {
            down.push(store.conv2d(&format!("{prefix}.down.{i}"), width, width * 2, 4, conv_cfg(1, 2))?);
            width *= 2;
        }
        let dilated = ConvCfg {
            padding: 2,
            stride: 1,
            dilation: 2,
        };
        let mut residual = Vec::new();
        for i in 0..arch.residual_blocks {
            residual.push((
                store.conv2d(&format!("{prefix}.res.{i}.a"), width, width, 3, dilated)?,
                store.conv2d(&format!("{prefix}.res.{i}.b"), width, width, 3, conv_cfg(1, 1))?,
            ));
        }
        let mut up = Vec::new();
        for i in 0..arch.downsamples {
            up.push(store.conv2d(&format!("{prefix}.up.{i}"), width, width / 2, 3, conv_cfg(1, 1))?);
            width /= 2;
        }
        let output = store.conv2d(&format!("{prefix}.output"), width, out_channels, 3, conv_cfg(1, 1))?;
        Ok(Self {
            input,
            down,
            residual,
            up,
            output,
            normalize,
        })
    }

    fn act(&self, x: Tensor) -> Result<Tensor> {
        let x = if self.normalize { instance_norm(&x)? } else { x };
        Ok(x.relu()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.act(x.apply(&self.input)?)?;
        for conv in &self.down {
            h = self.act(h.apply(conv)?)?;
        }
        for (a, b) in &self.residual {
            let r = self.act(h.apply(a)?)?;
            let r = r.apply(b)?;
            let r = if self.normalize { instance_norm(&r)? } else { r };
            h = (h + r)?;
        }
        for conv in &self.up {
            let (_, _, hh, ww) = h.dims4()?;
            h = self.act(h.upsample_nearest2d(hh * 2, ww * 2)?.apply(conv)?)?;
        }
        Ok(h.apply(&self.output)?)
    }
}

/// Stride-2 PatchGAN returning patch logits and intermediate activations.
#[derive(Clone, Debug)]
struct PatchDiscriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, base: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = in_channels;
        for (i, mult) in [1, 2, 4].into_iter().enumerate() {
            convs.push(store.conv2d(&format!("{prefix}.conv.{i}"), cin, base * mult, 4, conv_cfg(1, 2))?);
            cin = base * mult;
        }
        let head = store.conv2d(&format!("{prefix}.head"), cin, 1, 3, conv_cfg(1, 1))?;
        Ok(Self { convs, head })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut feats = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = leaky_relu(&h.apply(conv)?)?;
            feats.push(h.clone());
        }
        Ok((h.apply(&self.head)?, feats))
    }
}

/// Mean absolute difference of paired feature lists.
fn feature_distance(a: &[Tensor], b: &[Tensor]) -> Result<Tensor> {
    let mut total = Tensor::zeros((), a[0].dtype(), &Device::Cpu)?;
    for (x, y) in a.iter().zip(b) {
        total = (total + (x - y)?.abs()?.mean_all()?)?;
    }
    Ok(total)
}

/// The L1 term of stage B: mean absolute error over the whole output,
/// divided by the mean mask value so small holes are not under-weighted.
pub fn reconstruction_l1(output: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let err = (output - target)?.abs()?.mean_all()?;
    let coverage = mask.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok((err / coverage.max(1e-8))?)
}

/// Mean absolute error inside the mask, per pixel and channel.
fn masked_l1(output: &RasterImage, target: &RasterImage, mask: &BinaryMask) -> f64 {
    let n = mask.count();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = output
        .data()
        .chunks_exact(3)
        .zip(target.data().chunks_exact(3))
        .zip(mask.data())
        .filter(|(_, &m)| m == 1)
        .map(|((a, b), _)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    sum / (3 * n) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug)]
pub struct InpaintCheckpoint {
    pub config: InpaintConfig,
    /// Generator and discriminator of the edge-completion stage.
    pub edge_stage: Weights,
    /// Generator and discriminator of the RGB stage.
    pub inpaint_stage: Weights,
    pub iteration: u64,
    pub phase: Phase,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct InpaintMeta {
    kind: String,
    iteration: u64,
    phase: Phase,
    config_hash: String,
    config: InpaintConfig,
}

struct Networks {
    edge_store: ParamStore,
    edge_gen: InpaintGenerator,
    edge_disc: PatchDiscriminator,
    rgb_store: ParamStore,
    rgb_gen: InpaintGenerator,
    rgb_disc: PatchDiscriminator,
}

impl Networks {
    fn build(mut edge_store: ParamStore, mut rgb_store: ParamStore, config: &InpaintConfig) -> Result<Self> {
        let arch = config.architecture();
        let base = config.base_channels;
        let edge_gen = InpaintGenerator::new(&mut edge_store, "generator", 3, 1, arch, true)?;
        let edge_disc = PatchDiscriminator::new(&mut edge_store, "discriminator", 2, base)?;
        let rgb_gen = InpaintGenerator::new(&mut rgb_store, "generator", 5, 3, arch, true)?;
        let rgb_disc = PatchDiscriminator::new(&mut rgb_store, "discriminator", 3, base)?;
        Ok(Self {
            edge_store,
            edge_gen,
            edge_disc,
            rgb_store,
            rgb_gen,
            rgb_disc,
        })
    }

    fn fresh(config: &InpaintConfig) -> Result<Self> {
        Self::build(
            ParamStore::new(derive_seed(config.seed, "inpaint.edge_stage"), DType::F32),
            ParamStore::new(derive_seed(config.seed, "inpaint.inpaint_stage"), DType::F32),
            config,
        )
    }

    fn from_checkpoint(ckpt: &InpaintCheckpoint) -> Result<Self> {
        Self::build(
            ParamStore::from_weights(&ckpt.edge_stage, DType::F32)?,
            ParamStore::from_weights(&ckpt.inpaint_stage, DType::F32)?,
            &ckpt.config,
        )
    }

    /// Completed edge probabilities `[B, 1, H, W]`.
    fn complete_edges(&self, gray: &Tensor, edges: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let keep = (mask.neg()? + 1.0)?;
        let x = Tensor::cat(&[&(gray * &keep)?, &(edges * &keep)?, mask], 1)?;
        Ok(candle_nn::ops::sigmoid(&self.edge_gen.forward(&x)?)?)
    }

    /// Raw RGB prediction `[B, 3, H, W]` in `[0, 1]`.
    fn paint(&self, images: &Tensor, edges: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let keep = (mask.neg()? + 1.0)?;
        let x = Tensor::cat(&[&images.broadcast_mul(&keep)?, edges, mask], 1)?;
        Ok(((self.rgb_gen.forward(&x)?.tanh()? + 1.0)? * 0.5)?)
    }

    /// Stage A then stage B, composited.
    fn reconstruct(&self, images: &Tensor, gray: &Tensor, edges: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let completed = composite(&self.complete_edges(gray, edges, mask)?, edges, mask)?;
        composite(&self.paint(images, &completed, mask)?, images, mask).map_err(Into::into)
    }

    fn checkpoint(&self, config: &InpaintConfig, iteration: u64, phase: Phase) -> Result<InpaintCheckpoint> {
        Ok(InpaintCheckpoint {
            config: config.clone(),
            edge_stage: self.edge_store.snapshot()?,
            inpaint_stage: self.rgb_store.snapshot()?,
            iteration,
            phase,
            config_hash: config_hash(config),
        })
    }
}

impl InpaintCheckpoint {
    /// Untrained networks.
    pub fn initialize(config: &InpaintConfig) -> Result<Self> {
        config.validate()?;
        Networks::fresh(config)?.checkpoint(config, 0, Phase::Pretrain)
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = Weights::default();
        all.insert_prefixed("edge_stage", &self.edge_stage);
        all.insert_prefixed("inpaint_stage", &self.inpaint_stage);
        all.save(path)?;
        write_sidecar(
            path,
            &InpaintMeta {
                kind: CHECKPOINT_KIND.into(),
                iteration: self.iteration,
                phase: self.phase,
                config_hash: self.config_hash.clone(),
                config: self.config.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: InpaintMeta = read_sidecar(path)?;
        check_kind(&meta.kind, CHECKPOINT_KIND, path)?;
        meta.config.validate()?;
        let all = Weights::load(path)?;
        let ckpt = Self {
            edge_stage: all.strip_prefix("edge_stage"),
            inpaint_stage: all.strip_prefix("inpaint_stage"),
            iteration: meta.iteration,
            phase: meta.phase,
            config_hash: meta.config_hash,
            config: meta.config,
        };
        // Surfaces missing or misshapen tensors at load time.
        Networks::from_checkpoint(&ckpt)?;
        Ok(ckpt)
    }
}

/// Masked-region reconstruction error on the probe items at one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InpaintLogEntry {
    pub iteration: u64,
    pub masked_l1: f64,
    pub edge_generator_loss: f32,
    pub inpaint_generator_loss: f32,
    pub inpaint_discriminator_loss: f32,
}

/// One training example at the model resolution.
struct Example {
    image: RasterImage,
    edges: EdgeMap,
    mask: BinaryMask,
}

struct Batch {
    images: Tensor,
    gray: Tensor,
    edges: Tensor,
    mask: Tensor,
}

impl Batch {
    fn new(examples: &[Example]) -> Result<Self> {
        let images: Vec<&RasterImage> = examples.iter().map(|e| &e.image).collect();
        let gray: Vec<Vec<f64>> = examples.iter().map(|e| e.image.luminance()).collect();
        let gray_refs: Vec<&[f64]> = gray.iter().map(Vec::as_slice).collect();
        let edges: Vec<&EdgeMap> = examples.iter().map(|e| &e.edges).collect();
        let masks: Vec<&BinaryMask> = examples.iter().map(|e| &e.mask).collect();
        let (w, h) = examples[0].image.dims();
        Ok(Self {
            images: images_to_tensor(&images, DType::F32)?,
            gray: planes_to_tensor(&gray_refs, w, h, DType::F32)?,
            edges: edges_to_tensor(&edges, DType::F32)?,
            mask: masks_to_tensor(&masks, DType::F32)?,
        })
    }
}

/// Where training holes come from.
enum HoleSource<'a> {
    Pool(&'a [BinaryMask]),
    Annotation,
}

struct Trainer<'a> {
    config: &'a InpaintConfig,
    data: &'a DatasetManifest,
    holes: HoleSource<'a>,
    edge_cache: HashMap<usize, (RasterImage, EdgeMap, Option<BinaryMask>)>,
}

impl Trainer<'_> {
    fn example(&mut self, index: usize, hole_seed: u64) -> Result<Example> {
        let res = self.config.resolution;
        if !self.edge_cache.contains_key(&index) {
            let record = &self.data.records[index];
            let (image, mask) = match self.holes {
                HoleSource::Pool(_) => (record.load_image(Some((res, res)))?, None),
                HoleSource::Annotation => {
                    let (i, m) = record.load_pair(Some((res, res)))?;
                    (i, Some(m))
                }
            };
            let edges = extract_edges(&image, self.config.edge_sigma)?;
            self.edge_cache.insert(index, (image, edges, mask));
        }
        let (image, edges, annotation) = &self.edge_cache[&index];
        let mask = match (&self.holes, annotation) {
            (HoleSource::Pool(pool), _) => pair_random_mask(image, pool, hole_seed)?.mask,
            (HoleSource::Annotation, Some(m)) => m.clone(),
            (HoleSource::Annotation, None) => unreachable!("annotated records are loaded with masks"),
        };
        Ok(Example {
            image: image.clone(),
            edges: edges.clone(),
            mask,
        })
    }

    fn run(
        &mut self,
        nets: Networks,
        start_iteration: u64,
        phase: Phase,
    ) -> Result<(InpaintCheckpoint, Vec<InpaintLogEntry>)> {
        let cfg = self.config;
        let label = format!("inpaint.{phase}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &label));
        let probe_seed = derive_seed(cfg.seed, &format!("{label}.probe"));
        let probe: Vec<Example> = (0..self.data.len().min(PROBE_ITEMS))
            .map(|i| self.example(i, probe_seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        let probe = Batch::new(&probe)?;

        let features = FrozenFeatures::new(derive_seed(cfg.seed, "inpaint.features"), DType::F32)?;
        let g_params = ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let d_params = ParamsAdamW {
            lr: cfg.learning_rate * cfg.discriminator_lr_ratio,
            ..g_params.clone()
        };
        let mut edge_g_opt = AdamW::new(nets.edge_store.vars_with_prefix("generator."), g_params.clone())?;
        let mut edge_d_opt = AdamW::new(nets.edge_store.vars_with_prefix("discriminator."), d_params.clone())?;
        let mut rgb_g_opt = AdamW::new(nets.rgb_store.vars_with_prefix("generator."), g_params)?;
        let mut rgb_d_opt = AdamW::new(nets.rgb_store.vars_with_prefix("discriminator."), d_params)?;
        let w = cfg.loss_weights;

        let mut log = Vec::new();
        let mut iteration = start_iteration;
        for step in 1..=cfg.iterations {
            let picks: Vec<(usize, u64)> = (0..cfg.batch_size)
                .map(|_| (rng.random_range(0..self.data.len()), rng.random()))
                .collect();
            let examples: Vec<Example> = picks
                .into_iter()
                .map(|(i, s)| self.example(i, s))
                .collect::<Result<_>>()?;
            let b = Batch::new(&examples)?;
            iteration += 1;
            let stage_name = |s: &str| format!("{label}.{s}");

            // Stage A: edge completion, conditioned on grayscale in the critic.
            let pred_edges = nets.complete_edges(&b.gray, &b.edges, &b.mask)?;
            let real_pair = Tensor::cat(&[&b.edges, &b.gray], 1)?;
            let fake_pair = Tensor::cat(&[&pred_edges, &b.gray], 1)?;
            let (real_logits, real_feats) = nets.edge_disc.forward(&real_pair)?;
            let (fake_logits, _) = nets.edge_disc.forward(&fake_pair.detach())?;
            let d_loss = ((adv_real(&real_logits)? + adv_fake(&fake_logits)?)? * 0.5)?;
            edge_d_opt.backward_step(&d_loss)?;
            ensure_finite(d_loss.to_scalar()?, &stage_name("edge"), iteration, "discriminator loss")?;

            let (fake_logits, fake_feats) = nets.edge_disc.forward(&fake_pair)?;
            let real_feats: Vec<Tensor> = real_feats.iter().map(Tensor::detach).collect();
            let edge_g_loss = ((adv_real(&fake_logits)? * w.adversarial)?
                + (feature_distance(&fake_feats, &real_feats)? * w.feature_matching)?)?;
            edge_g_opt.backward_step(&edge_g_loss)?;
            let edge_g_value: f32 = edge_g_loss.to_scalar()?;
            ensure_finite(edge_g_value, &stage_name("edge"), iteration, "generator loss")?;

            // Stage B: RGB painting on the completed edges.
            let completed = composite(&pred_edges.detach(), &b.edges, &b.mask)?;
            let output = nets.paint(&b.images, &completed, &b.mask)?;
            let merged = composite(&output, &b.images, &b.mask)?;
            let (real_logits, real_feats) = nets.rgb_disc.forward(&b.images)?;
            let (fake_logits, _) = nets.rgb_disc.forward(&merged.detach())?;
            let rgb_d_loss = ((adv_real(&real_logits)? + adv_fake(&fake_logits)?)? * 0.5)?;
            rgb_d_opt.backward_step(&rgb_d_loss)?;
            let rgb_d_value: f32 = rgb_d_loss.to_scalar()?;
            ensure_finite(rgb_d_value, &stage_name("inpaint"), iteration, "discriminator loss")?;

            let (fake_logits, fake_feats) = nets.rgb_disc.forward(&merged)?;
            let real_feats: Vec<Tensor> = real_feats.iter().map(Tensor::detach).collect();
            let mut rgb_g_loss = (reconstruction_l1(&output, &b.images, &b.mask)? * w.l1)?;
            if w.adversarial > 0.0 {
                rgb_g_loss = (rgb_g_loss + (adv_real(&fake_logits)? * w.adversarial)?)?;
            }
            if w.feature_matching > 0.0 {
                rgb_g_loss = (rgb_g_loss + (feature_distance(&fake_feats, &real_feats)? * w.feature_matching)?)?;
            }
            if w.perceptual > 0.0 || w.style > 0.0 {
                let fake_maps = features.maps(&merged)?;
                let real_maps: Vec<Tensor> = features.maps(&b.images)?.iter().map(Tensor::detach).collect();
                if w.perceptual > 0.0 {
                    rgb_g_loss = (rgb_g_loss + (feature_distance(&fake_maps, &real_maps)? * w.perceptual)?)?;
                }
                if w.style > 0.0 {
                    let fake_grams = fake_maps.iter().map(gram).collect::<candle_core::Result<Vec<_>>>()?;
                    let real_grams = real_maps.iter().map(gram).collect::<candle_core::Result<Vec<_>>>()?;
                    rgb_g_loss = (rgb_g_loss + (feature_distance(&fake_grams, &real_grams)? * w.style)?)?;
                }
            }
            rgb_g_opt.backward_step(&rgb_g_loss)?;
            let rgb_g_value: f32 = rgb_g_loss.to_scalar()?;
            ensure_finite(rgb_g_value, &stage_name("inpaint"), iteration, "generator loss")?;

            if step % cfg.eval_every == 0 || step == cfg.iterations {
                let masked_l1 = probe_error(&nets, &probe)?;
                log::debug!("{label} iteration {iteration}: masked L1 {masked_l1:.4}");
                log.push(InpaintLogEntry {
                    iteration,
                    masked_l1,
                    edge_generator_loss: edge_g_value,
                    inpaint_generator_loss: rgb_g_value,
                    inpaint_discriminator_loss: rgb_d_value,
                });
            }
        }
        Ok((nets.checkpoint(cfg, iteration, phase)?, log))
    }
}

fn probe_error(nets: &Networks, probe: &Batch) -> Result<f64> {
    let out = tensor_to_images(&nets.reconstruct(&probe.images, &probe.gray, &probe.edges, &probe.mask)?)?;
    let targets = tensor_to_images(&probe.images)?;
    let masks = crate::nn::tensor_to_planes(&probe.mask)?;
    let mut total = 0.0;
    for ((o, t), m) in out.iter().zip(&targets).zip(&masks) {
        let (w, h) = o.dims();
        total += masked_l1(o, t, &BinaryMask::from_values(w, h, m, 0.5)?);
    }
    Ok(total / out.len() as f64)
}

/// Step 1: self-supervised training on unlabeled images with pooled holes.
pub fn pretrain(
    unlabeled: &DatasetManifest,
    mask_pool: &[BinaryMask],
    config: &InpaintConfig,
) -> Result<InpaintCheckpoint> {
    pretrain_logged(unlabeled, mask_pool, config).map(|(c, _)| c)
}

/// As [`pretrain`], also returning the probe log.
pub fn pretrain_logged(
    unlabeled: &DatasetManifest,
    mask_pool: &[BinaryMask],
    config: &InpaintConfig,
) -> Result<(InpaintCheckpoint, Vec<InpaintLogEntry>)> {
    config.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::InsufficientData("pretraining manifest is empty".into()));
    }
    if mask_pool.is_empty() {
        return Err(Error::InsufficientData("mask pool is empty".into()));
    }
    let mut trainer = Trainer {
        config,
        data: unlabeled,
        holes: HoleSource::Pool(mask_pool),
        edge_cache: HashMap::new(),
    };
    trainer.run(Networks::fresh(config)?, 0, Phase::Pretrain)
}

/// Step 2: continues training with each record's annotated polyp as the hole.
pub fn finetune(
    ckpt: &InpaintCheckpoint,
    polyp_data: &DatasetManifest,
    config: &InpaintConfig,
) -> Result<InpaintCheckpoint> {
    finetune_logged(ckpt, polyp_data, config).map(|(c, _)| c)
}

pub fn finetune_logged(
    ckpt: &InpaintCheckpoint,
    polyp_data: &DatasetManifest,
    config: &InpaintConfig,
) -> Result<(InpaintCheckpoint, Vec<InpaintLogEntry>)> {
    config.validate()?;
    if config.architecture() != ckpt.config.architecture() || config.resolution != ckpt.config.resolution {
        return Err(Error::Config(format!(
            "finetune config (resolution {}, {:?}) does not match checkpoint (resolution {}, {:?})",
            config.resolution,
            config.architecture(),
            ckpt.config.resolution,
            ckpt.config.architecture()
        )));
    }
    polyp_data.require_masks()?;
    if polyp_data.is_empty() {
        return Err(Error::InsufficientData("finetuning manifest is empty".into()));
    }
    if config.iterations == 0 {
        let mut same = ckpt.clone();
        same.phase = Phase::Finetune;
        return Ok((same, Vec::new()));
    }
    let mut trainer = Trainer {
        config,
        data: polyp_data,
        holes: HoleSource::Annotation,
        edge_cache: HashMap::new(),
    };
    trainer.run(Networks::from_checkpoint(ckpt)?, ckpt.iteration, Phase::Finetune)
}

/// Stage B of a checkpoint, ready for repeated inference.
pub struct InpaintModel {
    nets: Networks,
    resolution: usize,
}

impl InpaintModel {
    pub fn new(ckpt: &InpaintCheckpoint) -> Result<Self> {
        Ok(Self {
            nets: Networks::from_checkpoint(ckpt)?,
            resolution: ckpt.config.resolution,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Paints the hole with `edges` as the structure condition. Generated
    /// pixels are rounded to 8 bits; pixels outside the mask are copied from
    /// `image` unchanged.
    pub fn inpaint(&self, image: &RasterImage, edges: &EdgeMap, mask: &BinaryMask) -> Result<RasterImage> {
        let r = self.resolution;
        if image.dims() != (r, r) || edges.dims() != (r, r) || mask.dims() != (r, r) {
            return Err(Error::Shape(format!(
                "inpainting at {r}x{r} got image {:?}, edges {:?}, mask {:?}",
                image.dims(),
                edges.dims(),
                mask.dims()
            )));
        }
        if mask.count() == 0 {
            return Ok(image.clone());
        }
        let generated = self.nets.paint(
            &images_to_tensor(&[image], DType::F32)?,
            &edges_to_tensor(&[edges], DType::F32)?,
            &masks_to_tensor(&[mask], DType::F32)?,
        )?;
        let generated = tensor_to_images(&generated)?.remove(0);
        let mut data = image.data().to_vec();
        for ((px, g), &m) in data
            .chunks_exact_mut(3)
            .zip(generated.data().chunks_exact(3))
            .zip(mask.data())
        {
            if m == 1 {
                for (p, v) in px.iter_mut().zip(g) {
                    *p = f64::from(quantize_u8(*v)) / 255.0;
                }
            }
        }
        RasterImage::new(r, r, data)
    }

    /// Full two-stage reconstruction: stage A completes the image's own
    /// edges inside the hole, stage B paints.
    pub fn reconstruct(&self, image: &RasterImage, mask: &BinaryMask, edge_sigma: f64) -> Result<RasterImage> {
        let edges = extract_edges(image, edge_sigma)?;
        let b = Batch::new(&[Example {
            image: image.clone(),
            edges,
            mask: mask.clone(),
        }])?;
        let out = self.nets.reconstruct(&b.images, &b.gray, &b.edges, &b.mask)?;
        Ok(tensor_to_images(&out)?.remove(0))
    }
}

/// Step 4: paints a polyp into a clean image along `merged_edges`.
pub fn inpaint_polyp(
    ckpt: &InpaintCheckpoint,
    clean_image: &RasterImage,
    merged_edges: &EdgeMap,
    mask: &BinaryMask,
) -> Result<RasterImage> {
    InpaintModel::new(ckpt)?.inpaint(clean_image, merged_edges, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintEvalRow {
    pub iteration: u64,
    pub ssim: f64,
    pub psnr: f64,
    pub fid: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InpaintEvalReport {
    pub rows: Vec<InpaintEvalRow>,
}

impl InpaintEvalReport {
    /// Appends `row`; iterations must strictly increase.
    pub fn push(&mut self, row: InpaintEvalRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iteration <= last.iteration {
                return Err(Error::InvalidArgument(format!(
                    "report row at iteration {} follows iteration {}",
                    row.iteration, last.iteration
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Re-inpaints every validation polyp and compares against the original.
///
/// The condition is the record's own full-image edge map, which is what the
/// generation step feeds stage B.
pub fn evaluate_checkpoint(ckpt: &InpaintCheckpoint, val: &DatasetManifest) -> Result<InpaintEvalRow> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation manifest is empty".into()));
    }
    val.require_masks()?;
    let model = InpaintModel::new(ckpt)?;
    let r = ckpt.config.resolution;
    let pairs = val.load_all(Some((r, r)))?;
    let mut reals = Vec::with_capacity(pairs.len());
    let mut fakes = Vec::with_capacity(pairs.len());
    for (image, mask) in pairs {
        let mask = mask.expect("masks checked above");
        let edges = extract_edges(&image, ckpt.config.edge_sigma)?;
        fakes.push(model.inpaint(&image, &edges, &mask)?);
        reals.push(image);
    }
    let n = reals.len() as f64;
    let mut ssim_sum = 0.0;
    let mut psnr_sum = 0.0;
    for (a, b) in reals.iter().zip(&fakes) {
        ssim_sum += ssim(a, b)?;
        psnr_sum += psnr(a, b)?;
    }
    let extractor = FrozenFeatures::new(FID_FEATURE_SEED, DType::F64)?;
    let fid = fid(&extract_features(&reals, &extractor)?, &extract_features(&fakes, &extractor)?)?;
    Ok(InpaintEvalRow {
        iteration: ckpt.iteration,
        ssim: ssim_sum / n,
        psnr: psnr_sum / n,
        fid,
    })
}
