use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use polypconnect::inpaint::{
    evaluate_checkpoint, finetune, inpaint_polyp, pretrain, InpaintCheckpoint, InpaintEvalReport,
};
use polypconnect::mask_gan::{
    filter_masks, sample_masks, train_mask_generator, MaskGanCheckpoint, DEFAULT_MAX_FILL, DEFAULT_MIN_FILL,
};
use polypconnect::metrics::{score_survey, ReaderResponse, Truth, DEFAULT_SURVEY_THRESHOLD};
use polypconnect::pipeline::{
    generate_batch, load_mask_dir, run_pipeline, write_json, write_mask_dir, Overrides, PipelineConfig, SegReport,
};
use polypconnect::seg::{evaluate_seg, train_unet, SegCheckpoint};
use polypconnect::{
    extract_edges, load_dataset, split_dataset, BinaryMask, DatasetManifest, EdgeMap, Error, Layout, RasterImage,
    Result,
};

#[derive(Parser)]
#[command(name = "polypconnect", version, about = "Synthetic polyp generation and segmentation experiments")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory of the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Labeled,
    Unlabeled,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate a dataset directory into a manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_enum)]
        layout: LayoutArg,
        /// Tag this many records as validation.
        #[arg(long)]
        val_count: Option<usize>,
    },
    /// Train the mask GAN on a directory of masks.
    TrainMasks {
        #[arg(long)]
        masks: PathBuf,
    },
    /// Sample masks from a mask GAN checkpoint and keep those within the fill bounds.
    GenMasks {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = DEFAULT_MIN_FILL)]
        min_fill: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_FILL)]
        max_fill: f64,
    },
    /// Pretrain the inpainting model on unlabeled images with pooled masks.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        masks: PathBuf,
    },
    /// Fine-tune an inpainting checkpoint on annotated polyps.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a 1-bit Canny edge map for every image in a directory.
    ExtractEdges {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        sigma: f64,
    },
    /// Paint a polyp into one clean image.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Generate a batch of synthetic polyp images with their masks.
    GenerateBatch {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        polyps: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a U-Net on a manifest.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a U-Net checkpoint on a validation manifest.
    EvalSeg {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Append an evaluation row for an inpainting checkpoint to a report.
    EvalInpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        val: PathBuf,
    },
    /// Score a reader study from a CSV of responses.
    ScoreSurvey {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SURVEY_THRESHOLD)]
        threshold: u8,
    },
    /// Run every enabled phase of the configuration.
    Run,
}

impl Cli {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--out is required".into()))
    }

    /// The configuration file, or defaults when none is given.
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(p) => PipelineConfig::load(p),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Deserialize)]
struct ResponseRow {
    image_id: String,
    confidence: u8,
    truth: String,
}

fn read_responses(path: &Path) -> Result<Vec<ReaderResponse>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    reader
        .deserialize::<ResponseRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| Error::Ingestion(format!("{} row {}: {e}", path.display(), i + 1)))?;
            Ok(ReaderResponse {
                image_id: row.image_id,
                confidence: row.confidence,
                truth: row.truth.parse::<Truth>()?,
            })
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { root, layout, val_count } => {
            let layout = match layout {
                LayoutArg::Labeled => Layout::Labeled,
                LayoutArg::Unlabeled => Layout::Unlabeled,
            };
            let mut manifest = load_dataset(root, layout)?;
            if let Some(n) = val_count {
                manifest = split_dataset(&manifest, *n, cli.seed.unwrap_or(0))?;
            }
            manifest.write(cli.out()?)?;
            println!("{} records", manifest.len());
        }
        Command::TrainMasks { masks } => {
            let mut config = cli.pipeline_config()?.mask_gan;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let pool = load_mask_dir(masks, None)?;
            train_mask_generator(&pool, &config)?.save(cli.out()?)?;
        }
        Command::GenMasks {
            ckpt,
            count,
            min_fill,
            max_fill,
        } => {
            let ckpt = MaskGanCheckpoint::load(ckpt)?;
            let sampled = sample_masks(&ckpt, *count, cli.seed.unwrap_or(0))?;
            let kept = filter_masks(&sampled, *min_fill, *max_fill)?;
            write_mask_dir(&kept, cli.out()?)?;
            println!("kept {} of {} masks", kept.len(), sampled.len());
        }
        Command::Pretrain { data, masks } => {
            let mut config = cli.pipeline_config()?.inpaint;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let r = config.resolution;
            let pool = load_mask_dir(masks, Some((r, r)))?;
            pretrain(&DatasetManifest::read(data)?, &pool, &config)?.save(cli.out()?)?;
        }
        Command::Finetune { ckpt, data } => {
            let base = InpaintCheckpoint::load(ckpt)?;
            let mut config = match &cli.config {
                Some(p) => PipelineConfig::load(p)?.inpaint,
                None => base.config.clone(),
            };
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            finetune(&base, &DatasetManifest::read(data)?, &config)?.save(cli.out()?)?;
        }
        Command::ExtractEdges { input, sigma } => {
            let out = cli.out()?;
            let images = load_dataset(input, Layout::Unlabeled)?;
            create_dir(out)?;
            for r in &images.records {
                let edges = extract_edges(&r.load_image(None)?, *sigma)?;
                let stem = r.image_path.file_stem().unwrap_or_default();
                edges.save_png(&out.join(stem).with_extension("png"))?;
            }
            println!("{} edge maps", images.len());
        }
        Command::Inpaint {
            ckpt,
            image,
            edges,
            mask,
        } => {
            let ckpt = InpaintCheckpoint::load(ckpt)?;
            let out = inpaint_polyp(
                &ckpt,
                &RasterImage::load(image, None)?,
                &EdgeMap::load(edges, None)?,
                &BinaryMask::load(mask, None)?,
            )?;
            out.save_png(cli.out()?)?;
        }
        Command::GenerateBatch {
            ckpt,
            clean,
            polyps,
            count,
        } => {
            let out = cli.out()?;
            let ckpt = InpaintCheckpoint::load(ckpt)?;
            let batch = generate_batch(
                &ckpt,
                &DatasetManifest::read(clean)?,
                &DatasetManifest::read(polyps)?,
                *count,
                cli.seed.unwrap_or(0),
                out,
            )?;
            batch.write(&out.join("manifest.tsv"))?;
            println!("{} synthetic records", batch.len());
        }
        Command::TrainSeg { data } => {
            let mut config = cli.pipeline_config()?.seg;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            train_unet(&DatasetManifest::read(data)?, &config)?.save(cli.out()?)?;
        }
        Command::EvalSeg { ckpt, val, threshold } => {
            let ckpt = SegCheckpoint::load(ckpt)?;
            let val = DatasetManifest::read(val)?;
            let metrics = evaluate_seg(&ckpt, &val, threshold.unwrap_or(ckpt.config.threshold))?;
            let report = SegReport {
                metrics,
                records: val.len(),
            };
            write_json(cli.out()?, &report)?;
        }
        Command::EvalInpaint { ckpt, val } => {
            let out = cli.out()?;
            let mut report: InpaintEvalReport = if out.exists() {
                let text = fs::read_to_string(out).map_err(|e| Error::Io {
                    path: out.to_path_buf(),
                    source: e,
                })?;
                serde_json::from_str(&text)?
            } else {
                InpaintEvalReport::default()
            };
            report.push(evaluate_checkpoint(&InpaintCheckpoint::load(ckpt)?, &DatasetManifest::read(val)?)?)?;
            write_json(out, &report)?;
        }
        Command::ScoreSurvey { responses, threshold } => {
            let score = score_survey(&read_responses(responses)?, *threshold)?;
            write_json(cli.out()?, &score)?;
        }
        Command::Run => {
            let config = cli
                .config
                .as_deref()
                .ok_or_else(|| Error::Config("run needs --config".into()))?;
            let overrides = Overrides {
                seed: cli.seed,
                out: cli.out.clone(),
            };
            let summary = run_pipeline(config, &overrides)?;
            println!("{}", summary.run_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
