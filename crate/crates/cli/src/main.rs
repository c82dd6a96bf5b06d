use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fvp_core::config::RunConfig;
use fvp_core::dataset::{self, write_ply};
use fvp_core::probe::{self, CorpusSource};
use fvp_core::trainer::{self, Checkpoint};
use fvp_core::{Error, Exec};

#[derive(Parser, Debug)]
#[command(name = "fvp", version, about = "Next-frame point-cloud pre-training and BC probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config leaf, e.g. `--set pretrain.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run work items on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Split {
    Train,
    HeldOut,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic demonstration corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Pre-train encoder and denoiser on a corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Export (condition, predicted, truth) triples as PLY.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, short = 'n')]
        n: Option<usize>,
    },
    /// Held-out prediction quality against the copy baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Run the behavior-cloning ablation arms.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path, or `fresh` to pre-train inside the run.
        #[arg(long, default_value = "fresh")]
        checkpoint: String,
        /// Fixed corpus for every seed; generated per seed when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

impl Common {
    fn load(&self) -> fvp_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides)?,
            None => RunConfig::with_overrides(&self.overrides)?,
        };
        cfg.apply_env()?;
        Ok(cfg)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> fvp_core::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

/// `runs/fvp.ckpt` -> `runs/fvp.metrics.csv`.
fn metrics_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("metrics.csv")
}

fn gen_data(common: &Common, split: Split) -> fvp_core::Result<()> {
    let cfg = common.load()?;
    let (n, seed, default_dir) = match split {
        Split::Train => (cfg.corpus.n_trajectories, cfg.seed, &cfg.paths.corpus),
        Split::HeldOut => (cfg.corpus.held_out_trajectories, cfg.held_out_seed(), &cfg.paths.held_out),
    };
    let out = common.out.clone().unwrap_or_else(|| default_dir.clone());
    let set = dataset::generate_synthetic(&cfg.scene, n, seed)?;
    dataset::save_demoset(&set, &out)?;
    eprintln!(
        "wrote {} trajectories ({} frames) to {}",
        set.manifest.n_trajectories,
        set.manifest.total_frames,
        out.display()
    );
    Ok(())
}

fn pretrain(common: &Common, corpus: Option<PathBuf>) -> fvp_core::Result<()> {
    let cfg = common.load()?;
    let corpus = corpus.unwrap_or_else(|| cfg.paths.corpus.clone());
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let demos = dataset::load_demoset(&corpus)?;
    let mut csv = String::from("epoch,loss,wall_seconds\n");
    let ckpt = trainer::pretrain_with(&demos, &cfg.pretrain_config(), common.exec(), |r| {
        eprintln!("epoch {:>4}  loss {:.6}  {:.1}s", r.epoch, r.loss, r.wall_seconds);
        csv.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.wall_seconds));
    })?;
    trainer::save_checkpoint(&ckpt, &out)?;
    write(&metrics_path(&out), csv)?;
    eprintln!("checkpoint written to {}", out.display());
    Ok(())
}

fn load_inputs(cfg: &RunConfig, checkpoint: Option<PathBuf>, corpus: Option<PathBuf>) -> fvp_core::Result<(Checkpoint, dataset::DemoSet)> {
    let ckpt = trainer::load_checkpoint(&checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone()))?;
    let held_out = dataset::load_demoset(&corpus.unwrap_or_else(|| cfg.paths.held_out.clone()))?;
    Ok((ckpt, held_out))
}

fn sample(common: &Common, checkpoint: Option<PathBuf>, corpus: Option<PathBuf>, n: Option<usize>) -> fvp_core::Result<()> {
    let cfg = common.load()?;
    let (ckpt, held_out) = load_inputs(&cfg, checkpoint, corpus)?;
    let n = n.unwrap_or(cfg.eval.n_pairs);
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.out.join("samples"));
    let triples = trainer::predict_pairs(&ckpt, &held_out, n, cfg.seed, common.exec())?;
    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    for (i, tr) in triples.iter().enumerate() {
        write_ply(&out.join(format!("pair_{i:03}_condition.ply")), &tr.condition)?;
        write_ply(&out.join(format!("pair_{i:03}_predicted.ply")), &tr.predicted)?;
        write_ply(&out.join(format!("pair_{i:03}_truth.ply")), &tr.truth)?;
    }
    let metrics = trainer::summarize_predictions(&triples, ckpt.config.condition_mode)?;
    write(&out.join("summary.json"), to_json(&metrics))?;
    eprintln!(
        "{} pairs: predicted {:.6}  copy {:.6}",
        metrics.n_pairs, metrics.mean_predicted_chamfer, metrics.mean_copy_chamfer
    );
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<PathBuf>, corpus: Option<PathBuf>) -> fvp_core::Result<()> {
    let cfg = common.load()?;
    let (ckpt, held_out) = load_inputs(&cfg, checkpoint, corpus)?;
    let metrics = trainer::evaluate_prediction_with(&ckpt, &held_out, cfg.eval.n_pairs, cfg.seed, common.exec())?;
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.out.join("eval.json"));
    write(&out, to_json(&metrics))?;
    println!(
        "predicted_chamfer={:.6} copy_chamfer={:.6} pairs={}",
        metrics.mean_predicted_chamfer, metrics.mean_copy_chamfer, metrics.n_pairs
    );
    Ok(())
}

fn run_probe(common: &Common, checkpoint: &str, corpus: Option<PathBuf>) -> fvp_core::Result<()> {
    let cfg = common.load()?;
    let supplied = match checkpoint {
        "fresh" => None,
        path => Some(trainer::load_checkpoint(Path::new(path))?),
    };
    let fixed = corpus.as_deref().map(dataset::load_demoset).transpose()?;
    let source = match &fixed {
        Some(d) => CorpusSource::Fixed(d),
        None => CorpusSource::Generate {
            scene: &cfg.scene,
            n_trajectories: cfg.corpus.n_trajectories,
        },
    };
    let outcome = probe::run_ablation_matrix(
        source,
        &cfg.pretrain_config(),
        &cfg.probe,
        supplied.as_ref(),
        common.exec(),
        |msg| eprintln!("{msg}"),
    )?;
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.out.join("probe.csv"));
    write(&out, outcome.report.to_csv())?;
    write(&out.with_extension("json"), to_json(&outcome.report))?;
    print!("{}", outcome.report.to_csv());
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { common, split } => gen_data(common, *split),
        Command::Pretrain { common, corpus } => pretrain(common, corpus.clone()),
        Command::Sample {
            common,
            checkpoint,
            corpus,
            n,
        } => sample(common, checkpoint.clone(), corpus.clone(), *n),
        Command::Eval {
            common,
            checkpoint,
            corpus,
        } => eval(common, checkpoint.clone(), corpus.clone()),
        Command::Probe {
            common,
            checkpoint,
            corpus,
        } => run_probe(common, checkpoint, corpus.clone()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
