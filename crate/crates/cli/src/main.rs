use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cats::data::save_dataset;
use cats::error::{Error, Result};
use cats::experiment::train::{config_folds, dataset_dims};
use cats::experiment::{
    ablate_gcn_depth, ablate_independent, evaluate_checkpoints, evaluate_ground_truth, load_data,
    read_run, render_videos, report_text, train_folds, write_run, AblationTable, EpochLog,
    Precision, RunConfig,
};
use cats::metrics::F1Report;
use cats::model::Cats;
use cats::scalar::Scalar;

const OVERRIDE_HELP: &str = "\
Any configuration key can be overridden as --section.key=value, for example
--model.gcn_layers=2 or --scenario.preset=hard. --seed=N sets train.seed and
is required by train and the ablations.";

#[derive(Parser, Debug)]
#[command(name = "cats", version, about = "Train, evaluate and ablate CATS models", after_help = OVERRIDE_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// INI configuration file, applied before overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print per-epoch training lines to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    Synth {
        /// Output file; defaults to <output.dir>/dataset.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train every fold and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Re-evaluate the checkpoints of a run directory.
    Eval {
        #[arg(long)]
        run: Option<PathBuf>,
        /// Score ground truth against itself instead of a model.
        #[arg(long)]
        ground_truth: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Compare GCN depths with everything else fixed.
    AblateDepth {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        depths: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare identity adjacency in the category graphs with the full model.
    AblateIndependent {
        #[command(flatten)]
        common: Common,
    },
    /// Render timelines and attention maps for a run's held-out videos.
    Render {
        #[arg(long)]
        run: PathBuf,
        /// Outline segments whose best IoU falls below this value.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[command(flatten)]
        common: Common,
    },
}

/// Separates `--section.key=value` and `--seed` overrides from clap flags.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut flags = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            flags.push(a);
            continue;
        };
        match body.split_once('=') {
            Some((key, _)) if key.contains('.') || key == "seed" => {
                overrides.push(body.to_string())
            }
            None if body == "seed" => match it.next() {
                Some(v) => overrides.push(format!("seed={v}")),
                None => overrides.push("seed".into()),
            },
            _ => flags.push(a),
        }
    }
    (flags, overrides)
}

fn load_config(common: &Common, base: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn epoch_printer(verbose: bool) -> impl FnMut(&EpochLog) {
    move |e: &EpochLog| {
        if verbose {
            eprintln!(
                "fold {} epoch {:>3} tau {:.3} loss {:.4} acc {:.3} F1@10 {:.1}",
                e.fold, e.epoch, e.tau, e.loss, e.train_accuracy, e.test_f1_10
            );
        }
    }
}

fn train<T: Scalar>(cfg: &RunConfig, verbose: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let outcome = train_folds::<T>(cfg, &data, &mut epoch_printer(verbose))?;
    write_run::<T>(&cfg.output, cfg, &data, &outcome)?;
    println!("{}", outcome.aggregate.summary_text());
    println!("run written to {}", cfg.output.display());
    Ok(())
}

fn eval<T: Scalar>(cfg: &RunConfig, run: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let folds = read_run(run)?;
    let (classes, visual, joints) = dataset_dims(&data, cfg.scenario.num_classes)?;
    let expected = cfg.model_config(classes, visual, joints)?;
    let (reports, agg) = evaluate_checkpoints::<T>(&data, &folds, Some(&expected))?;
    emit_eval(
        run,
        &folds.iter().map(|(s, _)| s.fold).collect::<Vec<_>>(),
        &reports,
        &agg,
    )
}

fn emit_eval(dir: &Path, ids: &[usize], reports: &[F1Report], agg: &F1Report) -> Result<()> {
    let per_fold: Vec<(usize, &F1Report)> = ids.iter().copied().zip(reports).collect();
    let (table, records) = report_text(&per_fold, agg);
    write(&dir.join("eval.txt"), &table)?;
    write(&dir.join("eval_records.jsonl"), &records)?;
    println!("{}", agg.summary_text());
    Ok(())
}

fn ablation_output(cfg: &RunConfig, name: &str, table: &AblationTable) -> Result<()> {
    let text = table.to_text();
    write(&cfg.output.join(format!("{name}.txt")), &text)?;
    let json = serde_json::to_string_pretty(table).unwrap_or_default();
    write(&cfg.output.join(format!("{name}.json")), &(json + "\n"))?;
    print!("{text}");
    if !table.folds_identical() {
        return Err(Error::Config(
            "ablation rows were evaluated on different folds".into(),
        ));
    }
    Ok(())
}

fn render<T: Scalar>(cfg: &RunConfig, run: &Path, threshold: f64) -> Result<()> {
    let data = load_data(cfg)?;
    let out = run.join("render");
    for (split, ckpt) in read_run(run)? {
        let model: Cats<T> = ckpt.to_model()?;
        let videos = cats::data::select(&data, &split.test)?;
        render_videos(&out, &model, &videos, threshold)?;
    }
    println!("rendered into {}", out.display());
    Ok(())
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.train.precision {
            Precision::F64 => $f::<f64>($($arg),*),
            Precision::F32 => $f::<f32>($($arg),*),
        }
    };
}

fn run(cli: Cli, overrides: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Synth { out, common } => {
            let cfg = load_config(&common, None, &overrides)?;
            let data = cats::data::synthesize(&cfg.scenario)?;
            let path = out.unwrap_or_else(|| cfg.output.join("dataset.jsonl"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
            }
            save_dataset(&path, &data)?;
            println!("{} videos written to {}", data.len(), path.display());
            Ok(())
        }
        Command::Train { common } => {
            let cfg = load_config(&common, None, &overrides)?;
            cfg.require_seed()?;
            with_precision!(cfg, train(&cfg, common.verbose))
        }
        Command::Eval {
            run,
            ground_truth,
            common,
        } => {
            let base = run.as_ref().map(|r| r.join("config.ini"));
            let cfg = load_config(&common, base.as_deref(), &overrides)?;
            if ground_truth {
                let data = load_data(&cfg)?;
                let splits = match &run {
                    Some(r) => read_run(r)?.into_iter().map(|(s, _)| s).collect(),
                    None => config_folds(&cfg, &data)?.0,
                };
                let (reports, agg) = evaluate_ground_truth(&data, &splits, cfg.model.background)?;
                let dir = run.unwrap_or_else(|| cfg.output.clone());
                let ids: Vec<usize> = splits.iter().map(|s| s.fold).collect();
                return emit_eval(&dir, &ids, &reports, &agg);
            }
            let run = run
                .ok_or_else(|| Error::Config("eval needs --run <dir> or --ground-truth".into()))?;
            with_precision!(cfg, eval(&cfg, &run))
        }
        Command::AblateDepth { depths, common } => {
            let cfg = load_config(&common, None, &overrides)?;
            cfg.require_seed()?;
            let data = load_data(&cfg)?;
            let mut log = epoch_printer(common.verbose);
            let table = match cfg.train.precision {
                Precision::F64 => ablate_gcn_depth::<f64>(&cfg, &data, &depths, &mut log)?,
                Precision::F32 => ablate_gcn_depth::<f32>(&cfg, &data, &depths, &mut log)?,
            };
            ablation_output(&cfg, "ablate_depth", &table)
        }
        Command::AblateIndependent { common } => {
            let cfg = load_config(&common, None, &overrides)?;
            cfg.require_seed()?;
            let data = load_data(&cfg)?;
            let mut log = epoch_printer(common.verbose);
            let table = match cfg.train.precision {
                Precision::F64 => ablate_independent::<f64>(&cfg, &data, &mut log)?,
                Precision::F32 => ablate_independent::<f32>(&cfg, &data, &mut log)?,
            };
            ablation_output(&cfg, "ablate_independent", &table)
        }
        Command::Render {
            run,
            threshold,
            common,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::InvalidArgument(format!(
                    "threshold {threshold} is outside [0, 1]"
                )));
            }
            let cfg = load_config(&common, Some(&run.join("config.ini")), &overrides)?;
            with_precision!(cfg, render(&cfg, &run, threshold))
        }
    }
}

fn main() -> ExitCode {
    let (flags, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(flags) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
