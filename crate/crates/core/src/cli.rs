//! Command-line interface: dataset generation, the two training stages,
//! inference, and metric reporting. Flat `key = value` config files with
//! `--set` overrides; all outputs land under `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::Config;
use crate::data::{
    load_clip, load_png_rgb, load_pose_json, make_toy_dataset, save_png_rgb, ToyDatasetSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    cts, evaluate_checkpoint, feature_stats, fid, CtsPair, Embedder, GridProjectionEmbedder,
    IdentityMethod, PipelineMethod, TransferSource, TransferTarget, TryOnMethod,
};
use crate::tensor::Arr;
use crate::train::{train_stage1, train_stage2, Dataset};

/// Fixed seed for the evaluation embedder so metric values are comparable
/// across runs and checkpoints.
const EMBEDDER_SEED: u64 = 17;

fn default_embedder() -> GridProjectionEmbedder {
    GridProjectionEmbedder::new(4, 8, EMBEDDER_SEED)
}

#[derive(Parser)]
#[command(name = "vton", version, about = "Two-stage video virtual try-on toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key, e.g. --set train.stage1_iters=50.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// RNG seed; overrides train.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic procedural toy dataset.
    MakeToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        clips: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the stage-I pose-guided try-on generator.
    TrainTryon {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-II memory refinement on top of a stage-I checkpoint.
    TrainRefine {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dress one clip with the clothes of a model image.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clip: String,
        /// Model image PNG; its pose is read from a sibling
        /// `model_pose.json` unless --model-pose is given.
        #[arg(long)]
        model_image: PathBuf,
        #[arg(long)]
        model_pose: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fréchet distance between two directories of PNG frames.
    Fid {
        #[arg(long)]
        dir_a: PathBuf,
        #[arg(long)]
        dir_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cycle transfer score of a checkpoint over the test split.
    Cts {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// `pipeline` (requires --ckpt) or `identity`.
        #[arg(long, default_value = "pipeline")]
        method: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full report: FID + CTS over the test split, written as JSON and CSV.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct InferSummary {
    schema: String,
    clip: String,
    frames: usize,
    method: String,
    checkpoint: String,
}

#[derive(Serialize)]
struct MetricSummary {
    schema: String,
    metric: String,
    value: f64,
    n_a: usize,
    n_b: usize,
}

#[derive(Serialize)]
struct CtsSummary {
    schema: String,
    method: String,
    embedder: String,
    cts: f64,
    cycle_l1: f64,
    n_pairs: usize,
    skipped: usize,
}

fn load_dir_images(dir: &Path) -> Result<Vec<Arr>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_png_rgb(p)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn cts_pairs(dataset: &Dataset, indices: &[usize]) -> Vec<CtsPair> {
    indices
        .iter()
        .map(|&ci| {
            let lc = &dataset.clips[ci];
            CtsPair {
                model_image: lc.model.pixels.clone(),
                model_pose: lc.model_pose.clone(),
                model_parsing: lc.model_parsing.clone(),
                frames: lc.clip.frames.iter().map(|f| f.pixels.clone()).collect(),
                poses: lc.clip.poses.clone(),
                parsings: lc.clip.parsing.clone(),
            }
        })
        .collect()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToyData { out, clips, frames, height, width, seed } => {
            let spec = ToyDatasetSpec {
                n_clips: clips,
                frames_per_clip: frames,
                height,
                width,
                seed,
            };
            let manifest = make_toy_dataset(&out, &spec)?;
            println!("wrote {} clips to {}", manifest.clips.len(), out.display());
        }
        Command::TrainTryon { cfg, data, out } => {
            let cfg = cfg.build()?;
            let dataset = Dataset::load(&data)?;
            let outcome = train_stage1(&dataset, &cfg, &out)?;
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("metrics: {}", outcome.metrics_csv.display());
        }
        Command::TrainRefine { cfg, data, ckpt, out } => {
            let cfg = cfg.build()?;
            let dataset = Dataset::load(&data)?;
            let outcome = train_stage2(&dataset, &cfg, &ckpt, &out)?;
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("metrics: {}", outcome.metrics_csv.display());
        }
        Command::Infer { cfg, ckpt, data, clip, model_image, model_pose, out } => {
            let cfg = cfg.build()?;
            let (h, w) = (cfg.arch.height, cfg.arch.width);
            let clip_data = load_clip(&data, &clip)?;
            let image = load_png_rgb(&model_image)?;
            let pose_path = model_pose.unwrap_or_else(|| {
                model_image.with_file_name("model_pose.json")
            });
            let pose = load_pose_json(&pose_path, h, w)?;
            let (_, store) = crate::checkpoint::load_checkpoint(&ckpt, &cfg.arch)?;
            let method = PipelineMethod::new(cfg, store);
            let source = TransferSource { image, pose };
            let target = TransferTarget {
                frames: clip_data.frames.iter().map(|f| f.pixels.clone()).collect(),
                poses: clip_data.poses.clone(),
                parsings: clip_data.parsing.clone(),
            };
            let outputs = method.transfer(&source, &target)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, frame) in outputs.iter().enumerate() {
                save_png_rgb(&out.join(format!("{i:05}.png")), frame)?;
            }
            let summary = InferSummary {
                schema: "vton-infer-v1".to_string(),
                clip,
                frames: outputs.len(),
                method: method.name().to_string(),
                checkpoint: ckpt.display().to_string(),
            };
            write_json(&out.join("summary.json"), &summary)?;
            println!("wrote {} frames to {}", outputs.len(), out.display());
        }
        Command::Fid { dir_a, dir_b, out } => {
            let embedder = default_embedder();
            let a = load_dir_images(&dir_a)?;
            let b = load_dir_images(&dir_b)?;
            let value = fid(&feature_stats(&embedder, &a)?, &feature_stats(&embedder, &b)?)?;
            println!("{value:.6}");
            if let Some(out) = out {
                let summary = MetricSummary {
                    schema: "vton-fid-v1".to_string(),
                    metric: "fid".to_string(),
                    value,
                    n_a: a.len(),
                    n_b: b.len(),
                };
                write_json(&out.join("fid.json"), &summary)?;
            }
        }
        Command::Cts { cfg, ckpt, data, method, out } => {
            let cfg = cfg.build()?;
            let dataset = Dataset::load(&data)?;
            let mut idx = dataset.split_indices("test");
            if idx.len() < 2 {
                idx = (0..dataset.clips.len()).collect();
            }
            let pairs = cts_pairs(&dataset, &idx);
            let embedder = default_embedder();
            let method: Box<dyn TryOnMethod> = match method.as_str() {
                "identity" => Box::new(IdentityMethod),
                "pipeline" => {
                    let ckpt = ckpt
                        .ok_or_else(|| Error::Config("--ckpt required for pipeline".to_string()))?;
                    let (_, store) = crate::checkpoint::load_checkpoint(&ckpt, &cfg.arch)?;
                    Box::new(PipelineMethod::new(cfg, store))
                }
                other => return Err(Error::Config(format!("unknown method '{other}'"))),
            };
            let res = cts(method.as_ref(), &embedder, &pairs)?;
            println!("{:.6}", res.score);
            if let Some(out) = out {
                let summary = CtsSummary {
                    schema: "vton-cts-v1".to_string(),
                    method: method.name().to_string(),
                    embedder: embedder.name().to_string(),
                    cts: res.score,
                    cycle_l1: res.cycle_l1,
                    n_pairs: res.n_pairs,
                    skipped: res.skipped,
                };
                write_json(&out.join("cts.json"), &summary)?;
            }
        }
        Command::Evaluate { cfg, ckpt, data, out } => {
            let cfg = cfg.build()?;
            let dataset = Dataset::load(&data)?;
            let embedder = default_embedder();
            let report = evaluate_checkpoint(&ckpt, &dataset, &embedder, &cfg, &out)?;
            println!("fid {:.6} cts {:.6}", report.fid, report.cts);
        }
    }
    Ok(())
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let is_usage = e.use_stderr();
            let _ = e.print();
            return if is_usage { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
