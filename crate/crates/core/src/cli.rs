//! `modkit` command line: dataset generation, annotation, training,
//! inference, evaluation, mode comparison and gradient checking.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad config, failed
//! check), 2 I/O error. Every command that writes outputs also writes a
//! `manifest.<command>.json` (command line, seed, config hash) beside them.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::annotator::{annotate_dataset, AnnotatorConfig};
use crate::error::{Error, Result};
use crate::flowio::{overlay, read_ppm, write_ppm};
use crate::model::{full_gradcheck_suite, Model, ModelConfig, JOINT_CHECK_SEEDS};
use crate::scenegen::{frame_name, generate_dataset, DatasetSpec};
use crate::trainer::{
    compare_modes, evaluate, history_csv, predict_frames, Dataset, EvalOptions, LabelSource, TrainConfig, Trainer,
};

/// Relative error bound of the gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "modkit",
    version,
    about = "Joint vehicle detection and motion segmentation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic driving dataset.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 250)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        /// Frames per sequence.
        #[arg(long, default_value_t = 10)]
        seq_len: usize,
        /// Vehicles per sequence.
        #[arg(long, default_value_t = 6)]
        objects: usize,
        /// Fraction of sequences held out as the `val` split.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
    /// Derive static/moving labels and masks from tracks and odometry.
    Annotate {
        #[arg(long)]
        data: PathBuf,
        /// World speed (m/s) above which an object is moving.
        #[arg(long, default_value_t = 1.0)]
        speed_thresh: f64,
        /// Consecutive moving verdicts needed to label a track moving.
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value_t = 0.5)]
        iou_min: f64,
    },
    /// Train the network(s) of one mode from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: next to the config, named after it).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a training checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write overlays (green motion, blue boxes) and detections per frame.
    Infer {
        /// Checkpoint; repeat to combine a segmentation and a detection model.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0.1)]
        min_conf: f64,
    },
    /// Evaluate checkpoints on a split and write a metrics report.
    Eval {
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "generated")]
        labels: String,
        /// Output directory (default: the first checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        min_conf: f64,
    },
    /// Train and evaluate several configs and tabulate their differences.
    Compare {
        #[arg(long, required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Output directory (default: `compare` next to the first config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and of the joint network graph.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 10)]
        instances: usize,
        /// Directory for a JSON report and manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    seed: Option<u64>,
    config_hash: String,
    config: &'a str,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_manifest(dir: &Path, command: &str, argv: &[String], seed: Option<u64>, config: &str) -> Result<()> {
    let m = Manifest {
        command,
        argv: argv.to_vec(),
        seed,
        config_hash: sha256_hex(config.as_bytes()),
        config,
    };
    let text = serde_json::to_string_pretty(&m)?;
    write(&dir.join(format!("manifest.{command}.json")), text + "\n")
}

/// Applies `MODKIT_THREADS` to the global worker pool.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MODKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MODKIT_THREADS must be a positive integer, got {v:?}")))?;
    // A pool may already exist when running inside a test harness.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Model>> {
    paths.iter().map(|p| Model::load(p)).collect()
}

/// Model config whose input shaping (motion input) the dataset must follow.
fn data_config(models: &[Model]) -> ModelConfig {
    models
        .iter()
        .find(|m| m.config.seg_head && m.config.motion_stream)
        .unwrap_or(&models[0])
        .config
        .clone()
}

fn models_digest(paths: &[PathBuf]) -> Result<String> {
    let mut s = String::new();
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        s.push_str(&format!("{} {}\n", p.display(), sha256_hex(&bytes)));
    }
    Ok(s)
}

fn default_run_dir(config: &Path) -> PathBuf {
    let stem = config.file_stem().map_or_else(|| "run".into(), |s| s.to_os_string());
    config.parent().unwrap_or(Path::new(".")).join(stem)
}

fn run_train(config_path: &Path, out: Option<PathBuf>, resume: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let cfg = TrainConfig::load(config_path)?;
    let out = out.unwrap_or_else(|| default_run_dir(config_path));
    create_dir(&out)?;
    write(&out.join("config.txt"), cfg.to_kv())?;
    let model_cfgs = cfg.model_configs()?;
    let train = Dataset::load(&cfg.data, &cfg.train_split, cfg.labels, &model_cfgs[0])?;
    let eval = if cfg.eval_every > 0 {
        Some(Dataset::load(&cfg.data, &cfg.eval_split, cfg.labels, &model_cfgs[0])?)
    } else {
        None
    };
    let names: Vec<&str> = if model_cfgs.len() == 1 {
        vec!["model"]
    } else {
        vec!["seg", "det"]
    };
    if resume.is_some() && model_cfgs.len() != 1 {
        return Err(Error::Config(format!(
            "--resume needs a single-model mode, {} trains two",
            cfg.mode
        )));
    }
    for (k, mc) in model_cfgs.into_iter().enumerate() {
        let name = names[k];
        let mut t = match &resume {
            Some(p) => {
                let t = Trainer::load(p, cfg.epochs, &train)?;
                if t.config.mode != cfg.mode || t.config.seed != cfg.seed {
                    return Err(Error::Config(format!(
                        "checkpoint was trained as {} seed {}, config asks for {} seed {}",
                        t.config.mode, t.config.seed, cfg.mode, cfg.seed
                    )));
                }
                t
            }
            None => Trainer::new(&cfg, mc, crate::trainer::model_seed(cfg.seed, k), &train)?,
        };
        let steps = t.steps_per_epoch();
        while t.state.epoch < cfg.epochs {
            t.run_epoch()?;
            let smoothed = t.state.epoch_smoothed.last().copied().unwrap_or(f64::NAN);
            println!(
                "{name}: epoch {}/{} step {} ({} per epoch) smoothed loss {smoothed:.4}",
                t.state.epoch, cfg.epochs, t.state.step, steps
            );
            t.save(&out.join(format!("{name}.modw")))?;
            write(&out.join(format!("{name}.history.csv")), history_csv(&t.state.history))?;
            if let Some(ev) = &eval {
                if t.state.epoch % cfg.eval_every == 0 {
                    let r = evaluate(&[&t.model], ev, &EvalOptions::default())?;
                    write(
                        &out.join(format!("{name}.eval.epoch{:03}.json", t.state.epoch)),
                        r.to_json()? + "\n",
                    )?;
                }
            }
        }
        t.save(&out.join(format!("{name}.modw")))?;
        write(&out.join(format!("{name}.history.csv")), history_csv(&t.state.history))?;
    }
    write_manifest(&out, "train", argv, Some(cfg.seed), &cfg.to_kv())
}

fn run(cli: Cli, argv: &[String]) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate {
            seed,
            frames,
            out,
            seq_len,
            objects,
            val_fraction,
        } => {
            let spec = DatasetSpec {
                seed,
                frames,
                seq_len,
                n_objects: objects,
                val_fraction,
                ..DatasetSpec::default()
            };
            let index = generate_dataset(&spec, &out)?;
            println!(
                "wrote {} frames in {} sequences to {}",
                index.frames,
                index.sequences.len(),
                out.display()
            );
            write_manifest(&out, "generate", argv, Some(seed), &serde_json::to_string(&spec)?)
        }
        Command::Annotate {
            data,
            speed_thresh,
            window,
            iou_min,
        } => {
            let cfg = AnnotatorConfig {
                iou_min,
                speed_thresh,
                window,
            };
            let s = annotate_dataset(&data, &cfg)?;
            println!(
                "annotated {} frames, {} tracks ({} moving), {} boxes; {} disagree with generator labels",
                s.frames, s.tracks, s.moving_tracks, s.boxes, s.disagreements
            );
            write(
                &data.join("annotate_summary.json"),
                serde_json::to_string_pretty(&s)? + "\n",
            )?;
            write_manifest(&data, "annotate", argv, None, &serde_json::to_string(&cfg)?)
        }
        Command::Train { config, out, resume } => run_train(&config, out, resume, argv),
        Command::Infer {
            ckpt,
            data,
            out,
            split,
            min_conf,
        } => {
            let models = load_models(&ckpt)?;
            let ds = Dataset::load(&data, &split, LabelSource::Generated, &data_config(&models))?;
            let opts = EvalOptions {
                min_conf,
                ..EvalOptions::default()
            };
            let refs: Vec<&Model> = models.iter().collect();
            let preds = predict_frames(&refs, &ds, &opts)?;
            create_dir(&out)?;
            for p in &preds {
                let name = frame_name(p.frame);
                let rgb = read_ppm(&data.join("frames").join(format!("{name}.ppm")))?;
                let mask = p
                    .mask
                    .clone()
                    .unwrap_or_else(|| crate::flowio::Mask::zeros(rgb.width, rgb.height));
                let boxes: Vec<_> = p.detections.iter().map(|d| d.bbox).collect();
                write_ppm(&out.join(format!("{name}.ppm")), &overlay(&rgb, &mask, &boxes)?)?;
                write(
                    &out.join(format!("{name}.json")),
                    serde_json::to_string_pretty(&p.detections)? + "\n",
                )?;
            }
            println!("wrote {} overlays to {}", preds.len(), out.display());
            let config = format!("{}split = {split}\nmin_conf = {min_conf}\n", models_digest(&ckpt)?);
            write_manifest(&out, "infer", argv, None, &config)
        }
        Command::Eval {
            ckpt,
            data,
            split,
            labels,
            out,
            min_conf,
        } => {
            let labels: LabelSource = labels.parse()?;
            let models = load_models(&ckpt)?;
            let ds = Dataset::load(&data, &split, labels, &data_config(&models))?;
            let opts = EvalOptions {
                min_conf,
                ..EvalOptions::default()
            };
            let refs: Vec<&Model> = models.iter().collect();
            let mut report = evaluate(&refs, &ds, &opts)?;
            report.config.insert("split".into(), split.clone());
            print!("{}", report.to_table());
            let out = out.unwrap_or_else(|| ckpt[0].parent().unwrap_or(Path::new(".")).to_path_buf());
            create_dir(&out)?;
            write(&out.join(format!("eval.{split}.json")), report.to_json()? + "\n")?;
            let config = format!(
                "{}split = {split}\nlabels = {}\nmin_conf = {min_conf}\n",
                models_digest(&ckpt)?,
                labels.as_str()
            );
            write_manifest(&out, "eval", argv, None, &config)
        }
        Command::Compare { configs, out } => {
            let cfgs: Vec<TrainConfig> = configs.iter().map(|p| TrainConfig::load(p)).collect::<Result<_>>()?;
            let report = compare_modes(&cfgs, &EvalOptions::default())?;
            let table = report.to_table();
            print!("{table}");
            let out = out.unwrap_or_else(|| configs[0].parent().unwrap_or(Path::new(".")).join("compare"));
            create_dir(&out)?;
            write(&out.join("comparison.txt"), &table)?;
            write(&out.join("comparison.json"), report.to_json()? + "\n")?;
            let config: String = cfgs.iter().map(|c| c.to_kv() + "---\n").collect();
            write_manifest(&out, "compare", argv, cfgs.first().map(|c| c.seed), &config)
        }
        Command::Gradcheck { instances, out } => {
            let results = full_gradcheck_suite(instances, &JOINT_CHECK_SEEDS)?;
            let mut worst: f64 = 0.0;
            for (name, r) in &results {
                println!(
                    "{name:<28} max rel err {:.3e} over {} coordinates",
                    r.max_rel_error, r.coordinates
                );
                worst = worst.max(r.max_rel_error);
            }
            println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
            if let Some(dir) = out {
                create_dir(&dir)?;
                let rows: Vec<_> = results
                    .iter()
                    .map(|(n, r)| serde_json::json!({"check": n, "max_rel_error": r.max_rel_error, "coordinates": r.coordinates}))
                    .collect();
                write(&dir.join("gradcheck.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
                write_manifest(&dir, "gradcheck", argv, None, &format!("instances = {instances}\n"))?;
            }
            if worst > GRADCHECK_TOLERANCE {
                return Err(Error::Invalid(format!(
                    "gradient check failed: {worst:.3e} > {GRADCHECK_TOLERANCE:e}"
                )));
            }
            Ok(())
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}
