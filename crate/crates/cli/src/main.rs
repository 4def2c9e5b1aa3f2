//! Command-line driver: dataset generation, training, evaluation,
//! cross-validation and gradient checking.
//!
//! Exit codes are a stable contract: 0 success, 2 usage/config errors,
//! 3 I/O errors, 4 numeric failures.

use clap::{Parser, Subcommand, ValueEnum};
use dmqca_core::config::{AblationConfig, PhantomConfig, RunConfig};
use dmqca_core::evalkit::{
    aggregate_report, bland_altman_csv, format_table, run_protocol, EvalReport, FoldPredictions,
};
use dmqca_core::model::{train_model, DmqcaModel, INDEX_NAMES};
use dmqca_core::phantom::{generate_dataset, load_dataset, Sample};
use dmqca_core::{Error, Tensor};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod gradcheck;

#[derive(Parser)]
#[command(name = "dmqca", version, about = "Multiview vessel index quantification pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset with exact labels.
    Generate {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Preset: desk = 4 frames of 64x64, full = 10 frames of 256x256.
        #[arg(long, value_enum, default_value_t = Size::Desk)]
        size: Size,
    },
    /// Train one configuration on a generated dataset.
    Train {
        /// JSON run config (see README for the schema).
        #[arg(long)]
        config: PathBuf,
        /// Configuration name: Ours, Sup+Key, Main+Key, Key, Main,
        /// Main-ConAtt or Ours-SelfAtt.
        #[arg(long, default_value = "Ours")]
        ablation: String,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log (CSV). Defaults to <out>.loss.csv.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; defaults to data_dir from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "Ours")]
        ablation: String,
        /// Report path prefix (writes <prefix>.txt/.json and BA CSVs).
        #[arg(long, default_value = "eval_report")]
        out: PathBuf,
    },
    /// Full k-fold cross-validation over the configured ablations.
    Crossval {
        #[arg(long)]
        config: PathBuf,
        /// Report path prefix (writes <prefix>.txt/.json and BA CSVs).
        #[arg(long, default_value = "crossval_report")]
        out: PathBuf,
    },
    /// Finite-difference checks for every differentiable operator.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Json(_) => 2,
        Error::Io(_) | Error::Checkpoint(_) | Error::Generation(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Generate { n, seed, out, size } => cmd_generate(n, seed, &out, size),
        Cmd::Train {
            config,
            ablation,
            out,
            log,
        } => cmd_train(&config, &ablation, &out, log.as_deref()),
        Cmd::Eval {
            config,
            ckpt,
            data,
            ablation,
            out,
        } => cmd_eval(&config, &ckpt, data.as_deref(), &ablation, &out),
        Cmd::Crossval { config, out } => cmd_crossval(&config, &out),
        Cmd::Gradcheck { seed } => gradcheck::cmd_gradcheck(seed),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let bytes = std::fs::read(path)?;
    let cfg: RunConfig = serde_json::from_slice(&bytes)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_generate(n: usize, seed: u64, out: &Path, size: Size) -> Result<(), Error> {
    let cfg = match size {
        Size::Desk => PhantomConfig::desk(),
        Size::Full => PhantomConfig::full_scale(),
    };
    let manifest = generate_dataset(n, seed, &cfg, out)?;
    println!(
        "wrote {} samples to {} ({} frames of {}x{}, {:.3} mm/px, seed {})",
        manifest.samples.len(),
        out.display(),
        cfg.frames,
        cfg.height,
        cfg.width,
        cfg.mm_per_pixel,
        seed
    );
    Ok(())
}

fn cmd_train(config: &Path, ablation: &str, out: &Path, log: Option<&Path>) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let ab = AblationConfig::from_name(ablation)?;
    let (_, samples) = load_dataset(Path::new(&cfg.data_dir))?;
    let mut model = DmqcaModel::new(&cfg.model, &ab, cfg.train.seed)?;
    let trajectory = train_model(&mut model, &samples, &cfg.train)?;
    model.round_to_storage_precision();
    model.save_checkpoint(out)?;
    let log_path = log
        .map(PathBuf::from)
        .unwrap_or_else(|| out.with_extension("loss.csv"));
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in trajectory.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&log_path, csv)?;
    println!(
        "trained '{ablation}' for {} epochs: loss {:.6} -> {:.6}; checkpoint {}, log {}",
        trajectory.len(),
        trajectory.first().copied().unwrap_or(f64::NAN),
        trajectory.last().copied().unwrap_or(f64::NAN),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn write_reports(prefix: &Path, reports: &[EvalReport]) -> Result<(), Error> {
    let text = format_table(reports);
    std::fs::write(prefix.with_extension("txt"), &text)?;
    std::fs::write(
        prefix.with_extension("json"),
        serde_json::to_vec_pretty(reports)?,
    )?;
    for r in reports {
        for (j, pairs) in r.bland_altman_pairs.iter().enumerate() {
            let name = format!(
                "{}_{}_{}_ba.csv",
                prefix.display(),
                r.config_name.replace(['+', '-'], "_"),
                INDEX_NAMES[j]
            );
            std::fs::write(name, bland_altman_csv(pairs))?;
        }
    }
    print!("{text}");
    println!("reports written with prefix {}", prefix.display());
    Ok(())
}

fn cmd_eval(
    config: &Path,
    ckpt: &Path,
    data: Option<&Path>,
    ablation: &str,
    out: &Path,
) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let ab = AblationConfig::from_name(ablation)?;
    let data_dir = data
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
    let (_, samples) = load_dataset(&data_dir)?;
    let mut model = DmqcaModel::load_checkpoint(ckpt, &cfg.model, &ab)?;
    let mut test = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        test.push((i, model.predict(s)?, s.label.clone()));
    }
    let mean = label_mean(&samples);
    let fold = FoldPredictions {
        fold: 0,
        test,
        train_label_mean: mean,
        failed: false,
    };
    let report = aggregate_report(ablation, samples.len(), vec![fold])?;
    write_reports(out, &[report])
}

fn label_mean(samples: &[Sample]) -> Tensor {
    let n = samples.len() as f64;
    let k = samples[0].label.numel();
    let mut m = vec![0.0; k];
    for s in samples {
        for j in 0..k {
            m[j] += s.label.data()[j] / n;
        }
    }
    Tensor::from_vec(m)
}

fn cmd_crossval(config: &Path, out: &Path) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let (_, samples) = load_dataset(Path::new(&cfg.data_dir))?;
    let mut reports = Vec::new();
    for name in cfg.ablation_names() {
        let ab = AblationConfig::from_name(&name)?;
        reports.push(run_protocol(
            &samples, &cfg.model, &ab, &name, &cfg.train, &cfg.eval,
        )?);
    }
    write_reports(out, &reports)
}
