//! End-to-end orchestration: configuration, per-phase seeding, run
//! directories and synthetic batch generation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{list_images, load_dataset, split_dataset, DatasetManifest, Layout, Origin, Record};
use crate::edges::{extract_edges, extract_polyp_edges, merge_edges};
use crate::error::{Error, Result};
use crate::inpaint::{
    evaluate_checkpoint, finetune_logged, pretrain_logged, InpaintCheckpoint, InpaintConfig, InpaintEvalReport,
    InpaintModel,
};
use crate::mask_gan::{
    filter_masks, sample_masks, train_mask_generator, MaskGanConfig, DEFAULT_MAX_FILL, DEFAULT_MIN_FILL,
};
use crate::metrics::SegMetrics;
use crate::raster::{BinaryMask, EdgeMap, RasterImage};
use crate::seeding::{config_hash, derive_seed};
use crate::seg::{build_mixed_dataset, evaluate_seg, train_unet, SegCheckpoint, SegConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Parent of the run directory.
    pub out: PathBuf,
    /// Working resolution of every model in the run.
    pub resolution: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            resolution: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `images/` + `masks/` layout.
    pub labeled_root: PathBuf,
    pub unlabeled_root: Option<PathBuf>,
    pub clean_root: Option<PathBuf>,
    #[serde(default = "default_val_count")]
    pub val_count: usize,
}

fn default_val_count() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phases {
    pub gen_masks: bool,
    pub pretrain: bool,
    pub finetune: bool,
    pub generate: bool,
    pub eval_inpaint: bool,
    pub train_seg: bool,
    pub eval_seg: bool,
}

impl Default for Phases {
    fn default() -> Self {
        Self {
            gen_masks: true,
            pretrain: true,
            finetune: true,
            generate: true,
            eval_inpaint: true,
            train_seg: true,
            eval_seg: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    /// Masks sampled before the fill filter.
    pub count: usize,
    pub min_fill: f64,
    pub max_fill: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            count: 1000,
            min_fill: DEFAULT_MIN_FILL,
            max_fill: DEFAULT_MAX_FILL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub count: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { count: 800 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixSection {
    /// Synthetic records added to the real training split.
    pub n_synth: usize,
}

impl Default for MixSection {
    fn default() -> Self {
        Self { n_synth: 800 }
    }
}

/// Upstream artifacts from earlier runs, used when the producing phase is off.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactSection {
    pub mask_dir: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub finetuned: Option<PathBuf>,
    pub synthetic_manifest: Option<PathBuf>,
    pub seg_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub phases: Phases,
    #[serde(default)]
    pub mask_gan: MaskGanConfig,
    #[serde(default)]
    pub masks: MaskSection,
    #[serde(default)]
    pub inpaint: InpaintConfig,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub mix: MixSection,
    #[serde(default)]
    pub seg: SegConfig,
    #[serde(default)]
    pub artifacts: ArtifactSection,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Parses `path`; relative paths inside are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config =
            Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config(e))))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run.out);
        if let Some(d) = &mut self.data {
            fix(&mut d.labeled_root);
            d.unlabeled_root.as_mut().map(fix);
            d.clean_root.as_mut().map(fix);
        }
        let a = &mut self.artifacts;
        for p in [
            &mut a.mask_dir,
            &mut a.pretrained,
            &mut a.finetuned,
            &mut a.synthetic_manifest,
            &mut a.seg_checkpoint,
        ] {
            p.as_mut().map(fix);
        }
    }

    /// Module configs with the run's derived seeds and resolution applied.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        let seed = self.run.seed;
        let res = self.run.resolution;
        c.mask_gan.seed = derive_seed(seed, "mask_gan");
        c.mask_gan.target_resolution = res;
        c.mask_gan.start_resolution = c.mask_gan.start_resolution.min(res);
        c.inpaint.seed = derive_seed(seed, "inpaint");
        c.inpaint.resolution = res;
        c.seg.seed = derive_seed(seed, "seg");
        c.seg.resolution = res;
        c
    }

    /// Digest of everything that determines the run's results; the output
    /// location is excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.run.out = PathBuf::new();
        config_hash(&c)
    }

    /// `<out>/run-<seed>-<digest>`.
    pub fn run_dir(&self) -> PathBuf {
        self.run.out.join(format!("run-{}-{}", self.run.seed, self.digest()))
    }

    pub fn validate(&self) -> Result<()> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("missing [data] section".into()))?;
        let p = &self.phases;
        require_dir("data.labeled_root", Some(&data.labeled_root))?;
        if p.pretrain {
            require_dir("data.unlabeled_root", data.unlabeled_root.as_ref())?;
        }
        if p.generate {
            require_dir("data.clean_root", data.clean_root.as_ref())?;
        }
        if data.val_count == 0 {
            return Err(Error::Config("data.val_count must be positive".into()));
        }
        if self.run.resolution == 0 {
            return Err(Error::Config("run.resolution must be positive".into()));
        }
        let e = self.effective();
        if p.gen_masks {
            e.mask_gan.validate()?;
            if self.masks.count == 0 {
                return Err(Error::Config("masks.count must be positive".into()));
            }
        }
        if p.pretrain || p.finetune {
            e.inpaint.validate()?;
        }
        if p.generate && self.generate.count == 0 {
            return Err(Error::Config("generate.count must be positive".into()));
        }
        if p.train_seg || p.eval_seg {
            e.seg.validate()?;
        }
        Ok(())
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn require_dir(key: &str, path: Option<&PathBuf>) -> Result<()> {
    match path {
        None => Err(Error::Config(format!("{key} is required by the enabled phases"))),
        Some(p) if !p.is_dir() => Err(Error::Config(format!("{key}: {} is not a directory", p.display()))),
        Some(_) => Ok(()),
    }
}

/// Command-line overrides of `[run]`.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            config.run.seed = s;
        }
        if let Some(o) = &self.out {
            config.run.out = o.clone();
        }
    }
}

/// Metrics report written by `eval-seg`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    #[serde(flatten)]
    pub metrics: SegMetrics,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub seed: u64,
    pub config_hash: String,
    pub phases: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every PNG/JPEG in `dir` (sorted by name) as a mask of `size`.
pub fn load_mask_dir(dir: &Path, size: Option<(usize, usize)>) -> Result<Vec<BinaryMask>> {
    if !dir.is_dir() {
        return Err(Error::Ingestion(format!("mask directory {} does not exist", dir.display())));
    }
    list_images(dir)?.iter().map(|p| BinaryMask::load(p, size)).collect()
}

/// Writes `mask_00000.png`, `mask_00001.png`, ... into `dir`.
pub fn write_mask_dir(masks: &[BinaryMask], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let p = dir.join(format!("mask_{i:05}.png"));
            m.save_png(&p)?;
            Ok(p)
        })
        .collect()
}

/// Runs the configuration at `config_path` with `overrides` applied.
pub fn run_pipeline(config_path: &Path, overrides: &Overrides) -> Result<RunSummary> {
    let mut config = PipelineConfig::load(config_path)?;
    overrides.apply(&mut config);
    run_config(&config)
}

/// Runs an already resolved configuration.
pub fn run_config(config: &PipelineConfig) -> Result<RunSummary> {
    config.validate()?;
    let run_dir = config.run_dir();
    if run_dir.exists() {
        return Err(Error::InvalidArgument(format!(
            "run directory {} already exists",
            run_dir.display()
        )));
    }
    Run::new(config, run_dir)?.execute()
}

struct Run<'a> {
    config: PipelineConfig,
    raw: &'a PipelineConfig,
    dir: PathBuf,
    done: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(raw: &'a PipelineConfig, dir: PathBuf) -> Result<Self> {
        for sub in ["manifests", "checkpoints", "reports"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self {
            config: raw.effective(),
            raw,
            dir,
            done: Vec::new(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.config.run.seed, label)
    }

    fn finish(&mut self, phase: &str) {
        log::info!("phase {phase} done");
        self.done.push(phase.to_string());
    }

    fn execute(mut self) -> Result<RunSummary> {
        write_json(&self.path("config.json"), &self.config)?;
        let cfg = self.config.clone();
        let data = cfg.data.as_ref().expect("validated");
        let res = cfg.run.resolution;
        let phases = &cfg.phases;

        let labeled = load_dataset(&data.labeled_root, Layout::Labeled)?;
        let labeled = split_dataset(&labeled, data.val_count, self.seed("split"))?;
        labeled.write(&self.path("manifests/labeled.tsv"))?;
        let (real_train, val) = (labeled.train(), labeled.val());
        self.finish("ingest");

        let mut pool = None;
        if phases.gen_masks {
            let masks: Vec<BinaryMask> = real_train
                .load_all(None)?
                .into_iter()
                .map(|(_, m)| m.expect("labeled records carry masks"))
                .collect();
            let ckpt = train_mask_generator(&masks, &cfg.mask_gan)?;
            ckpt.save(&self.path("checkpoints/mask_gan.safetensors"))?;
            let sampled = sample_masks(&ckpt, cfg.masks.count, self.seed("gen_masks.sample"))?;
            let kept = filter_masks(&sampled, cfg.masks.min_fill, cfg.masks.max_fill)?;
            write_mask_dir(&kept, &self.path("masks"))?;
            write_json(
                &self.path("reports/masks.json"),
                &serde_json::json!({ "sampled": sampled.len(), "retained": kept.len() }),
            )?;
            if kept.is_empty() {
                return Err(Error::InsufficientData("no sampled mask passed the fill filter".into()));
            }
            pool = Some(kept);
            self.finish("gen-masks");
        } else if let Some(dir) = &cfg.artifacts.mask_dir {
            pool = Some(load_mask_dir(dir, Some((res, res)))?);
        }

        let mut pretrained = None;
        if phases.pretrain {
            let pool = pool
                .as_ref()
                .ok_or_else(|| Error::Dependency("pretrain needs gen-masks or artifacts.mask_dir".into()))?;
            let root = data.unlabeled_root.as_ref().expect("validated");
            let unlabeled = load_dataset(root, Layout::Unlabeled)?;
            unlabeled.write(&self.path("manifests/unlabeled.tsv"))?;
            let (ckpt, log) = pretrain_logged(&unlabeled, pool, &cfg.inpaint)?;
            ckpt.save(&self.path("checkpoints/inpaint_pretrain.safetensors"))?;
            write_json(&self.path("reports/pretrain_log.json"), &log)?;
            pretrained = Some(ckpt);
            self.finish("pretrain");
        } else if let Some(p) = &cfg.artifacts.pretrained {
            pretrained = Some(InpaintCheckpoint::load(p)?);
        }

        let mut finetuned = None;
        if phases.finetune {
            let base = pretrained
                .as_ref()
                .ok_or_else(|| Error::Dependency("finetune needs a pretrain checkpoint".into()))?;
            let (ckpt, log) = finetune_logged(base, &real_train, &cfg.inpaint)?;
            ckpt.save(&self.path("checkpoints/inpaint_finetune.safetensors"))?;
            write_json(&self.path("reports/finetune_log.json"), &log)?;
            finetuned = Some(ckpt);
            self.finish("finetune");
        } else if let Some(p) = &cfg.artifacts.finetuned {
            finetuned = Some(InpaintCheckpoint::load(p)?);
        }

        if phases.eval_inpaint {
            let mut ckpts: Vec<&InpaintCheckpoint> = pretrained.iter().chain(finetuned.iter()).collect();
            if ckpts.is_empty() {
                return Err(Error::Dependency("eval-inpaint needs an inpainting checkpoint".into()));
            }
            ckpts.sort_by_key(|c| c.iteration);
            ckpts.dedup_by_key(|c| c.iteration);
            let mut report = InpaintEvalReport::default();
            for c in ckpts {
                report.push(evaluate_checkpoint(c, &val)?)?;
            }
            write_json(&self.path("reports/inpaint_eval.json"), &report)?;
            self.finish("eval-inpaint");
        }

        let mut synthetic = None;
        if phases.generate {
            let ckpt = finetuned
                .as_ref()
                .ok_or_else(|| Error::Dependency("generate needs a finetuned checkpoint".into()))?;
            let root = data.clean_root.as_ref().expect("validated");
            let clean = load_dataset(root, Layout::Unlabeled)?;
            clean.write(&self.path("manifests/clean.tsv"))?;
            let out = self.path("generated");
            let batch = generate_batch(ckpt, &clean, &real_train, cfg.generate.count, self.seed("generate"), &out)?;
            batch.write(&self.path("manifests/synthetic.tsv"))?;
            synthetic = Some(batch);
            self.finish("generate");
        } else if let Some(p) = &cfg.artifacts.synthetic_manifest {
            synthetic = Some(DatasetManifest::read(p)?);
        }

        let mut seg_ckpt = None;
        if phases.train_seg {
            let synthetic = match (synthetic.as_ref(), cfg.mix.n_synth) {
                (_, 0) => DatasetManifest::default(),
                (Some(s), _) => s.clone(),
                (None, _) => {
                    return Err(Error::Dependency(
                        "train-seg with mix.n_synth > 0 needs generate or artifacts.synthetic_manifest".into(),
                    ))
                }
            };
            let mixed = build_mixed_dataset(&real_train, &synthetic, cfg.mix.n_synth, self.seed("mix"))?;
            mixed.write(&self.path("manifests/seg_train.tsv"))?;
            let ckpt = train_unet(&mixed, &cfg.seg)?;
            ckpt.save(&self.path("checkpoints/unet.safetensors"))?;
            seg_ckpt = Some(ckpt);
            self.finish("train-seg");
        } else if let Some(p) = &cfg.artifacts.seg_checkpoint {
            seg_ckpt = Some(SegCheckpoint::load(p)?);
        }

        if phases.eval_seg {
            let ckpt = seg_ckpt
                .as_ref()
                .ok_or_else(|| Error::Dependency("eval-seg needs a segmentation checkpoint".into()))?;
            let metrics = evaluate_seg(ckpt, &val, cfg.seg.threshold)?;
            write_json(
                &self.path("reports/seg_metrics.json"),
                &SegReport {
                    metrics,
                    records: val.len(),
                },
            )?;
            self.finish("eval-seg");
        }

        Ok(RunSummary {
            run_dir: self.dir.clone(),
            seed: cfg.run.seed,
            config_hash: self.raw.digest(),
            phases: self.done,
        })
    }
}

/// Step 3 for one pairing: clean-image edges outside the mask, polyp edges
/// inside it.
pub fn merged_edges_for(
    clean: &RasterImage,
    polyp: &RasterImage,
    mask: &BinaryMask,
    sigma: f64,
) -> Result<EdgeMap> {
    let clean_edges = extract_edges(clean, sigma)?;
    let polyp_edges = extract_polyp_edges(polyp, mask, sigma)?;
    merge_edges(&clean_edges, &polyp_edges, mask)
}

/// Generates `n` synthetic polyp images. Clean images and annotated polyps
/// are drawn independently with replacement.
///
/// Images and their ground-truth masks go to `out_dir/images` and
/// `out_dir/masks` as `synth_<k>_c<clean>_p<polyp>.png`, where the indices
/// refer to the input manifests; `out_dir/pairing.tsv` lists the source
/// paths.
pub fn generate_batch(
    ckpt: &InpaintCheckpoint,
    clean: &DatasetManifest,
    polyp_source: &DatasetManifest,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if clean.is_empty() || polyp_source.is_empty() {
        return Err(Error::InsufficientData(format!(
            "generation needs clean images and polyps, got {} and {}",
            clean.len(),
            polyp_source.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("generation count must be positive".into()));
    }
    polyp_source.require_masks()?;
    let model = InpaintModel::new(ckpt)?;
    let r = model.resolution();
    let sigma = ckpt.config.edge_sigma;
    let (img_dir, mask_dir) = (out_dir.join("images"), out_dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut clean_cache: HashMap<usize, (RasterImage, EdgeMap)> = HashMap::new();
    let mut polyp_cache: HashMap<usize, (RasterImage, BinaryMask, EdgeMap)> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut pairing = String::from("# image\tclean\tpolyp\n");
    for k in 0..n {
        let ci = rng.random_range(0..clean.len());
        let pi = rng.random_range(0..polyp_source.len());
        if let std::collections::hash_map::Entry::Vacant(e) = clean_cache.entry(ci) {
            let img = clean.records[ci].load_image(Some((r, r)))?;
            let edges = extract_edges(&img, sigma)?;
            e.insert((img, edges));
        }
        if let std::collections::hash_map::Entry::Vacant(e) = polyp_cache.entry(pi) {
            let (img, mask) = polyp_source.records[pi].load_pair(Some((r, r)))?;
            let edges = extract_polyp_edges(&img, &mask, sigma)?;
            e.insert((img, mask, edges));
        }
        let (clean_img, clean_edges) = &clean_cache[&ci];
        let (_, mask, polyp_edges) = &polyp_cache[&pi];
        let merged = merge_edges(clean_edges, polyp_edges, mask)?;
        let out = model.inpaint(clean_img, &merged, mask)?;

        let name = format!("synth_{k:05}_c{ci:05}_p{pi:05}.png");
        let (ip, mp) = (img_dir.join(&name), mask_dir.join(&name));
        out.save_png(&ip)?;
        mask.save_png(&mp)?;
        pairing.push_str(&format!(
            "{name}\t{}\t{}\n",
            clean.records[ci].image_path.display(),
            polyp_source.records[pi].image_path.display()
        ));
        records.push(Record::new(ip, Some(mp), Origin::Synthetic));
    }
    let pairing_path = out_dir.join("pairing.tsv");
    fs::write(&pairing_path, pairing).map_err(|e| Error::io(&pairing_path, e))?;
    Ok(DatasetManifest::new(records))
}
