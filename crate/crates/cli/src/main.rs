use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tumorseg::data::{PhantomSpec, Split};
use tumorseg::harness::ablate::ablate;
use tumorseg::harness::gradcheck::{gradcheck, GradcheckOptions};
use tumorseg::harness::synth::synth;
use tumorseg::harness::train::history_csv;
use tumorseg::harness::{evaluate, train, Checkpoint, Dataset, Precision, RunConfig};
use tumorseg::metrics::Hd95Mode;
use tumorseg::{Error, Result, Scalar, Variant};

#[derive(Parser)]
#[command(name = "tumorseg", version, about = "Multi-modal brain tumour segmentation: train, evaluate, check, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort on disk with a split manifest.
    Synth {
        /// Phantom spec (JSON); defaults to the built-in spec.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write checkpoints plus a per-epoch CSV.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; defaults to the data section of the checkpoint's config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
        /// Stack each subject's slices before scoring.
        #[arg(long)]
        volume: bool,
        #[arg(long, value_enum)]
        hd95: Option<Hd95Arg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every gradient on a tiny model.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Number of parameter elements to check.
        #[arg(long, default_value_t = 100)]
        params: usize,
    },
    /// Train and score the full model and its three ablations on identical data.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON); defaults to the selected profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    ablate: Option<AblateArg>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Dataset manifest, overriding the config's data source.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Reference,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    #[value(name = "mt-aff")]
    MtAff,
    #[value(name = "mt-tsfi")]
    MtTsfi,
    #[value(name = "mt-fe")]
    MtFe,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Hd95Arg {
    Directed,
    Pooled,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

impl RunArgs {
    fn resolve(&self, default: Profile) -> Result<RunConfig> {
        let profile = if self.config.is_none() { self.profile } else { default };
        let mut cfg = match (&self.config, profile) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Profile::Desk) => RunConfig::desk(),
            (None, Profile::Reference) => RunConfig::reference(),
            (None, Profile::Tiny) => RunConfig::tiny(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(a) = self.ablate {
            cfg = cfg.with_variant(match a {
                AblateArg::MtAff => Variant::MtAff,
                AblateArg::MtTsfi => Variant::MtTsfi,
                AblateArg::MtFe => Variant::MtFe,
            });
        }
        if let Some(p) = self.precision {
            cfg.precision = p.into();
        }
        if let Some(m) = &self.manifest {
            cfg.data.manifest = Some(m.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn run_train<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let data = Dataset::from_config(&cfg.data)?;
    let policy = cfg.data.policy;
    let (tr, va) = (data.slices(Split::Train, policy)?, data.slices(Split::Val, policy)?);
    let result = train::<T>(cfg, &tr, &va)?;
    create_dir(out)?;
    write(&out.join("config.json"), &serde_json::to_string_pretty(cfg)?)?;
    write(&out.join("history.csv"), &history_csv(&result.history, result.best_epoch))?;
    Checkpoint::from_store(cfg, &result.best).save(&out.join("checkpoint_best.json"))?;
    Checkpoint::from_store(cfg, &result.last).save(&out.join("checkpoint_last.json"))?;
    let best = result.history.iter().find(|r| r.epoch == result.best_epoch);
    Ok(json!({
        "command": "train",
        "fingerprint": cfg.fingerprint(),
        "data_fingerprint": data.fingerprint(),
        "train_slices": tr.len(),
        "val_slices": va.len(),
        "steps": result.steps,
        "best_epoch": result.best_epoch,
        "best_dice": best.map(|r| r.dice),
    }))
}

struct EvalArgs<'a> {
    checkpoint: &'a Path,
    manifest: Option<&'a Path>,
    split: Split,
    volume: bool,
    hd95: Option<Hd95Mode>,
    out: &'a Path,
}

fn run_eval<T: Scalar>(ck: &Checkpoint, args: &EvalArgs<'_>) -> Result<serde_json::Value> {
    let (net, store) = ck.restore::<T>(None)?;
    let mut data_cfg = ck.config.data.clone();
    if let Some(m) = args.manifest {
        data_cfg.manifest = Some(m.to_path_buf());
    }
    let data = Dataset::from_config(&data_cfg)?;
    let samples = data.slices(args.split, data_cfg.policy)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("split `{}` has zero samples", args.split.key())));
    }
    let mode = args.hd95.unwrap_or(ck.config.hd95);
    let volume = args.volume || ck.config.volume_metrics;
    let report = evaluate(&net, &store, &samples, mode, volume, &ck.fingerprint)?;
    create_dir(args.out)?;
    write(&args.out.join("report.json"), &report.to_json()?)?;
    write(&args.out.join("report.csv"), &report.table_csv(ck.config.model.variant().key()))?;
    write(&args.out.join("per_sample.csv"), &report.per_sample_csv())?;
    Ok(json!({
        "command": "eval",
        "checkpoint": args.checkpoint,
        "split": args.split.key(),
        "items": report.items,
        "mean_dice": report.mean.dice,
        "fingerprint": report.fingerprint,
    }))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Synth { config, out, count, seed } => {
            let mut spec = match config {
                Some(path) => {
                    let bytes = std::fs::read(&path).map_err(|e| io_error(&path, e))?;
                    serde_json::from_slice::<PhantomSpec>(&bytes)?
                }
                None => PhantomSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let m = synth(&spec, &out, count)?;
            Ok(json!({
                "command": "synth",
                "subjects": count,
                "train": m.count(Split::Train),
                "val": m.count(Split::Val),
                "test": m.count(Split::Test),
                "manifest": out.join(tumorseg::harness::synth::MANIFEST_FILE),
            }))
        }
        Command::Train { run, out } => {
            let cfg = run.resolve(Profile::Desk)?;
            match cfg.precision {
                Precision::F32 => run_train::<f32>(&cfg, &out),
                Precision::F64 => run_train::<f64>(&cfg, &out),
            }
        }
        Command::Eval { checkpoint, manifest, split, precision, volume, hd95, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let args = EvalArgs {
                checkpoint: &checkpoint,
                manifest: manifest.as_deref(),
                split: Split::parse(&split)?,
                volume,
                hd95: hd95.map(|h| match h {
                    Hd95Arg::Directed => Hd95Mode::Directed,
                    Hd95Arg::Pooled => Hd95Mode::Pooled,
                }),
                out: &out,
            };
            match precision.map(Precision::from).unwrap_or(ck.config.precision) {
                Precision::F32 => run_eval::<f32>(&ck, &args),
                Precision::F64 => run_eval::<f64>(&ck, &args),
            }
        }
        Command::Gradcheck { mut run, params } => {
            if run.config.is_none() {
                run.profile = Profile::Tiny;
            }
            let cfg = run.resolve(Profile::Tiny)?;
            let opts = GradcheckOptions { params, seed: cfg.seed, ..GradcheckOptions::default() };
            let report = gradcheck(&cfg.model, cfg.seed, &opts)?;
            print!("{}", report.table());
            if let Some(bad) = report.failures().next() {
                return Err(Error::Contract(format!(
                    "gradcheck failed for {} of {} checks; first: {} (relative error {:e})",
                    report.failures().count(),
                    report.rows.len(),
                    bad.label,
                    bad.rel_err
                )));
            }
            Ok(json!({
                "command": "gradcheck",
                "checks": report.rows.len(),
                "max_rel_err": report.max_rel_err,
                "resampled": report.resampled,
                "passed": true,
            }))
        }
        Command::Ablate { run, out } => {
            let cfg = run.resolve(Profile::Desk)?;
            let report = match cfg.precision {
                Precision::F32 => ablate::<f32>(&cfg)?,
                Precision::F64 => ablate::<f64>(&cfg)?,
            };
            create_dir(&out)?;
            write(&out.join("ablation.csv"), &report.table_csv())?;
            write(&out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
            let means: serde_json::Map<String, serde_json::Value> =
                report.rows.iter().map(|r| (r.variant.key().to_string(), json!(r.report.mean.dice))).collect();
            Ok(json!({ "command": "ablate", "data_fingerprint": report.data_fingerprint, "mean_dice": means }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
