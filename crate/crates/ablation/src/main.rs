use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddtr_ablation::config::{DatasetSource, ExperimentConfig, HELD_OUT_START};
use ddtr_ablation::data::{load_splits, load_validation};
use ddtr_ablation::search::{hp_search, SearchSpace};
use ddtr_ablation::{ablate, eval, report, train, Axis, HarnessError};
use ddtr_core::data::{generate_range, write_dataset, PREDICTIONS_FILE};
use ddtr_core::model::{weights, DeformableDetr};

#[derive(Parser)]
#[command(name = "ddtr", version, about = "Deformable DETR design-choice ablations on synthetic lesion data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dataset directory with train/ and test/ splits, overriding the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Seed (replaces the config's seed list with this single seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset into <out>/train and <out>/test.
    Synth(Common),
    /// Train one model; writes weights.bin, trace.json and config.json.
    Train(Common),
    /// Evaluate saved weights on the test split; writes predictions and metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Run one design-axis grid at every seed and write the report.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// resolution, encoder_layers, feature_levels, num_queries or decoding
        axis: String,
    },
    /// Random hyperparameter search ranked by validation FAUC.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Re-render CSV and plot files from a results.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

fn create_dir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = load_config(&c)?;
            let DatasetSource::Synthetic { mut spec, train, test } = cfg.dataset else {
                return Err(HarnessError::Config("synth needs a synthetic dataset source".into()));
            };
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            write_dataset(&generate_range(&spec, 0, train)?, &c.out.join("train"))?;
            write_dataset(&generate_range(&spec, HELD_OUT_START, test)?, &c.out.join("test"))?;
            println!("wrote {train} training and {test} test images to {}", c.out.display());
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let splits = load_splits(&cfg, c.dataset.as_deref())?;
            let seed = cfg.seeds[0];
            let out = train::train(&cfg, &splits.train, seed)?;
            create_dir(&c.out)?;
            weights::save(out.model.params(), &c.out.join("weights.bin"))?;
            write_file(
                &c.out.join("trace.json"),
                &serde_json::to_string_pretty(&out.trace).expect("trace serializes"),
            )?;
            write_file(&c.out.join("config.json"), &cfg.to_json())?;
            let last = out.trace.entries.last().expect("at least one step");
            println!("seed {seed}: final loss {:.4} after {:.1}s", last.total, out.seconds);
        }
        Command::Eval { common, weights: path } => {
            let cfg = load_config(&common)?;
            let splits = load_splits(&cfg, common.dataset.as_deref())?;
            let mut model = DeformableDetr::<f64>::new(cfg.model.clone(), cfg.seeds[0])?;
            weights::load(model.params_mut(), &path)?;
            create_dir(&common.out)?;
            let metrics =
                eval::evaluate(&model, &splits.test, cfg.eval_class, Some(&common.out.join(PREDICTIONS_FILE)))?;
            let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
            write_file(&common.out.join("metrics.json"), &json)?;
            println!("{json}");
        }
        Command::Ablate { common, axis } => {
            let axis: Axis = axis.parse()?;
            let cfg = load_config(&common)?;
            let splits = load_splits(&cfg, common.dataset.as_deref())?;
            let rows = ablate(axis, &cfg, &splits)?;
            for p in report::write_report(&rows, &common.out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Search { common, trials } => {
            let cfg = load_config(&common)?;
            let splits = load_splits(&cfg, common.dataset.as_deref())?;
            let validation = load_validation(&cfg, common.dataset.as_deref())?;
            let outcome =
                hp_search(&cfg, &SearchSpace::default(), trials, common.seed.unwrap_or(0), &splits.train, &validation)?;
            create_dir(&common.out)?;
            write_file(
                &common.out.join("leaderboard.json"),
                &serde_json::to_string_pretty(&outcome.leaderboard).expect("leaderboard serializes"),
            )?;
            write_file(&common.out.join("best_config.json"), &outcome.best.to_json())?;
            for e in &outcome.leaderboard {
                let f = e.fauc.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"));
                println!("trial {:>3}  fauc {f}  lr {:.2e}", e.trial, e.config.training.lr);
            }
        }
        Command::Report { input, out } => {
            let text =
                std::fs::read_to_string(&input).map_err(|source| HarnessError::Io { path: input.clone(), source })?;
            let rows = report::rows_from_json(&text)?;
            for p in report::write_report(&rows, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
