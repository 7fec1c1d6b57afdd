use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use td2net::ablation::{ablation_csv, run_ablation, AblationAxis};
use td2net::checks::CheckRegistry;
use td2net::config::RunConfig;
use td2net::eval::{evaluate_task, EvalOptions, Mode};
use td2net::report::{summary_table, write_report, PredictionDump, PREDICTIONS_VERSION};
use td2net::synthdata::{generate_dataset, read_dataset, write_dataset};
use td2net::train::{run_training, Checkpoint, Trainer};
use td2net::Error;

#[derive(Parser)]
#[command(name = "td2net", version, about = "Dynamic scene graph training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset.
    Gen(Common),
    /// Train a model and write checkpoints, logs and final metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or a saved prediction dump, on the test split.
    Eval {
        #[command(flatten)]
        common: OptionalConfig,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a prediction dump instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Compare every registered gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Only run checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate each variant along one ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// module, topk or loss.
        #[arg(long)]
        axis: String,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptionalConfig {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    With,
    No,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            Self::With => vec![Mode::With],
            Self::No => vec![Mode::No],
            Self::Both => vec![Mode::With, Mode::No],
        }
    }
}

enum Failure {
    Error(Error),
    /// A check ran and reported failure.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(c) => gen(c),
        Command::Train { common, checkpoint } => train(common, checkpoint),
        Command::Eval {
            common,
            checkpoint,
            predictions,
            mode,
            k,
        } => eval(common, checkpoint, predictions, mode, k),
        Command::Gradcheck {
            seed,
            instances,
            filter,
            out,
        } => gradcheck(seed, instances, filter, out),
        Command::Ablate { common, axis } => ablate(common, &axis),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error[check]: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            let usage = matches!(e, Error::Config(_) | Error::Contract(_));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

/// Loads the config; an unreadable config file counts as a config error.
fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Error> {
    let cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read config {path}: {source}")),
        other => other,
    })?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serialisable")
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), Error> {
    ensure_parent(path)?;
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn gen(c: Common) -> Outcome {
    let cfg = load_config(&c.config, c.seed)?;
    let (train_path, test_path) = match &c.out {
        Some(dir) => (dir.join("train.json"), dir.join("test.json")),
        None => (cfg.data.train.clone(), cfg.data.test.clone()),
    };
    let data = generate_dataset(&cfg.generator)?;
    for (path, ds) in [(&train_path, &data.train), (&test_path, &data.test)] {
        ensure_parent(path)?;
        write_dataset(path, ds)?;
        println!("wrote {} ({} videos)", path.display(), ds.videos.len());
    }
    Ok(())
}

fn train(c: Common, resume: Option<PathBuf>) -> Outcome {
    let cfg = load_config(&c.config, c.seed)?;
    let out = c.out.unwrap_or_else(|| cfg.out_dir.clone());
    let train = read_dataset(&cfg.data.train)?;
    let test = read_dataset(&cfg.data.test)?;
    let resume = resume.map(Checkpoint::<f64>::load).transpose()?;
    write_file(&out.join("run_config.toml"), cfg.to_toml_string())?;
    let outcome = run_training(&cfg, &train, Some(&test), Some(&out), resume)?;
    for e in &outcome.epochs {
        println!("epoch {:>3}  loss {:.6}  grad_norm {:.4}", e.epoch, e.mean_loss, e.mean_grad_norm);
    }
    if let Some(report) = &outcome.report {
        write_report(&out, report)?;
        print!("{}", summary_table(report));
    }
    println!("checkpoints and logs in {}", out.display());
    Ok(())
}

fn eval(
    c: OptionalConfig,
    checkpoint: Option<PathBuf>,
    predictions: Option<PathBuf>,
    mode: Option<ModeArg>,
    k: Option<Vec<usize>>,
) -> Outcome {
    let requested = c.config.as_deref().map(|p| load_config(p, c.seed)).transpose()?;
    let modes = mode.map(ModeArg::modes);

    if let Some(path) = predictions {
        let dump = PredictionDump::load(&path)?;
        if let Some(cfg) = &requested {
            check_task(cfg, dump.task)?;
        }
        let base = requested.clone().unwrap_or_default();
        let ks = k.unwrap_or(base.eval.k.clone());
        let modes = modes.unwrap_or(base.eval.modes.clone());
        let options = EvalOptions {
            group_constraint: base.eval.group_constraint,
            predicate_groups: dump.predicate_groups.clone(),
        };
        let report = evaluate_task(&dump.videos, dump.task, dump.num_predicates, &modes, &ks, &options)?;
        let out = c.out.unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
        write_report(&out, &report)?;
        print!("{}", summary_table(&report));
        return Ok(());
    }

    let path = checkpoint.expect("clap requires --checkpoint without --predictions");
    let ckpt = Checkpoint::<f64>::load(&path)?;
    if let Some(cfg) = &requested {
        check_task(cfg, ckpt.task)?;
    }
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    if let Some(cfg) = &requested {
        trainer.run.data = cfg.data.clone();
        trainer.run.eval = cfg.eval.clone();
        trainer.run.out_dir = cfg.out_dir.clone();
    }
    if let Some(ks) = k {
        trainer.run.eval.k = ks;
    }
    if let Some(m) = modes {
        trainer.run.eval.modes = m;
    }
    trainer.run.validate()?;
    let test = read_dataset(&trainer.run.data.test)?;
    let videos = trainer.model.prepare_all(&test)?;
    let (report, preds) = trainer.evaluate(&videos)?;
    let out = c.out.unwrap_or_else(|| trainer.run.out_dir.clone());
    write_report(&out, &report)?;
    PredictionDump {
        format_version: PREDICTIONS_VERSION,
        task: trainer.model.task,
        num_predicates: trainer.model.meta.num_predicates,
        predicate_groups: trainer.model.meta.predicate_groups.clone(),
        videos: preds,
    }
    .save(out.join("predictions.json"))?;
    print!("{}", summary_table(&report));
    Ok(())
}

fn check_task(cfg: &RunConfig, found: td2net::eval::Task) -> Result<(), Error> {
    if cfg.task != found {
        return Err(Error::Contract(format!("checkpoint holds a {found} model but the config requests {}", cfg.task)));
    }
    Ok(())
}

fn gradcheck(seed: u64, instances: usize, filter: Option<String>, out: Option<PathBuf>) -> Outcome {
    let mut registry = CheckRegistry::standard(instances);
    if let Some(f) = &filter {
        registry.retain(f);
    }
    let outcomes = registry.run(seed)?;
    println!("{:<32} {:>9} {:>12}  result", "check", "instances", "worst_rel");
    for o in &outcomes {
        let verdict = if o.passed { "pass" } else { "FAIL" };
        println!("{:<32} {:>9} {:>12.3e}  {verdict}", o.name, o.instances, o.worst_error);
    }
    if let Some(dir) = out {
        write_file(&dir.join("gradcheck.json"), json(&outcomes))?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("{} gradient check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

fn ablate(c: Common, axis: &str) -> Outcome {
    let axis: AblationAxis = axis.parse()?;
    let cfg = load_config(&c.config, c.seed)?;
    let out = c.out.unwrap_or_else(|| cfg.out_dir.join("ablation"));
    let train = read_dataset(&cfg.data.train)?;
    let test = read_dataset(&cfg.data.test)?;
    let rows = run_ablation(&cfg, axis, &train, &test)?;
    let table = ablation_csv(&rows);
    write_file(&out.join("ablation.csv"), &table)?;
    write_file(&out.join("ablation.json"), json(&rows))?;
    let runtimes: String = std::iter::once("variant,seconds\n".to_string())
        .chain(rows.iter().map(|r| format!("{},{:.3}\n", r.variant, r.seconds)))
        .collect();
    write_file(&out.join("runtimes.csv"), runtimes)?;
    print!("{table}");
    Ok(())
}
