//! `gvt2rpm`: generate synthetic data, train, evaluate, search and check gradients.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gvt2rpm::gradcheck::full_suite;
use gvt2rpm::io::{load_dataset, save_dataset, Record, RunDir};
use gvt2rpm::preprocess::{make_examples, Example};
use gvt2rpm::search::{greedy_adapt, DesignSpace, SearchTrace};
use gvt2rpm::synthdata::generate_dataset;
use gvt2rpm::training::{evaluate, split_dataset, train_model_with, Partition, PerfectStub, Predictor, SplitMode};
use gvt2rpm::{Error, ModelConfig, PresetName, Result, SynthPreset};

use crate::config::RunConfig;

const THREADS_VAR: &str = "GVT2RPM_THREADS";

#[derive(Parser)]
#[command(name = "gvt2rpm", version, about = "Video transformer rPPG toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Simple,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stub {
    /// Returns each window's own target.
    Perfect,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic planted-pulse dataset and its manifest.
    Gen {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        subjects: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        clips_per_subject: u64,
        /// Clip extents as TxHxW.
        #[arg(long, value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, value_parser = parse_fps)]
        fps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split and report held-out metrics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run, or a stub predictor, on every clip of a dataset.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Used when the run directory has no config.json.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        stub: Option<Stub>,
    },
    /// Greedy configuration search scored by validation MAE.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        seeds: u64,
    },
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected TxHxW, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| format!("{p:?} is not a whole number"))?;
        if *o == 0 {
            return Err("every extent must be positive".into());
        }
    }
    Ok(out)
}

fn parse_fps(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("frame rate must be a positive number, got {s:?}")),
    }
}

/// 0 success, 1 usage, 2 data, 3 numeric failure.
fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) => 1,
        Error::Numeric(_) | Error::Estimation(_) => 3,
        _ => 2,
    }
}

fn check_threads() -> Result<()> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match check_threads().and_then(|()| run(cli.command)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Gen {
            preset,
            subjects,
            clips_per_subject,
            dims,
            fps,
            seed,
            out,
        } => {
            let preset = SynthPreset::from_name(match preset {
                Preset::Simple => PresetName::Simple,
                Preset::Hard => PresetName::Hard,
            });
            let ds = generate_dataset(&preset, subjects as usize, clips_per_subject as usize, dims, fps, seed)?;
            save_dataset(&out, &ds)?;
            println!("wrote {} clips to {}", ds.clips.len(), out.display());
            Ok(0)
        }
        Command::Train { data, config, out } => train(&data, config.as_deref(), &out),
        Command::Eval { run, data, config, stub } => eval(&run, &data, config.as_deref(), stub),
        Command::Search { data, config, out } => search(&data, config.as_deref(), &out),
        Command::Gradcheck { seeds } => gradcheck(seeds),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Records of each partition in manifest order: train, validation, test.
struct Split {
    train: Vec<Record>,
    val: Vec<Record>,
    test: Vec<Record>,
}

fn split_records(records: Vec<Record>, cfg: &RunConfig) -> Result<Split> {
    let subjects: Vec<String> = records.iter().map(|r| r.entry.subject_id.clone()).collect();
    let plan = split_dataset(&subjects, cfg.split.split, cfg.split.split_seed)?;
    let mut s = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for r in records {
        let part = plan.partition_of(&r.entry.subject_id).expect("every subject is assigned");
        let dest = match (cfg.split.split, part) {
            (_, Partition::Train) => &mut s.train,
            (_, Partition::Val) => &mut s.val,
            (_, Partition::Test) => &mut s.test,
            (SplitMode::KFold(_), Partition::Fold(f)) if f == cfg.split.test_fold => &mut s.test,
            (_, Partition::Fold(_)) => &mut s.train,
        };
        dest.push(r);
    }
    Ok(s)
}

fn examples(records: &[Record], cfg: &ModelConfig) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(make_examples(&r.id, &r.clip, &r.trace, cfg)?);
    }
    Ok(out)
}

fn train(data: &Path, config: Option<&Path>, out: &Path) -> Result<u8> {
    let cfg = load_config(config)?;
    let (_, records) = load_dataset(data)?;
    let split = split_records(records, &cfg)?;
    let run = RunDir::create(out)?;
    run.write_text(RunDir::CONFIG, &cfg.to_json())?;
    let train = examples(&split.train, &cfg.model)?;
    let val = examples(&split.val, &cfg.model)?;
    let test = examples(&split.test, &cfg.model)?;
    eprintln!(
        "training on {} windows ({} validation, {} test)",
        train.len(),
        val.len(),
        test.len()
    );
    let outcome = train_model_with(&cfg.model, &cfg.train, &train, &val, |r| {
        let val = r.val_mae.map_or_else(|| "-".into(), |v| format!("{v:.3}"));
        eprintln!("epoch {:>3}  train_loss {:.6}  val_mae {val}", r.epoch, r.train_loss);
    })?;
    run.write_history(&outcome.history)?;
    run.save_model(&outcome.model)?;
    let held_out = if !test.is_empty() { &test } else { &val };
    if !held_out.is_empty() {
        let result = evaluate(&outcome.model, &cfg.model, held_out)?;
        run.write_result(&result)?;
        println!(
            "best epoch {}  held-out MAE {:.3}  RMSE {:.3}  excluded {}",
            outcome.best_epoch, result.mae, result.rmse, result.excluded_windows
        );
    } else {
        println!("best epoch {} (no held-out clips)", outcome.best_epoch);
    }
    Ok(0)
}

fn eval(run_path: &Path, data: &Path, config: Option<&Path>, stub: Option<Stub>) -> Result<u8> {
    let run = RunDir::open(run_path);
    let config_path = run.path(RunDir::CONFIG);
    let cfg = if config_path.exists() {
        RunConfig::load(&config_path)?
    } else if stub.is_some() {
        load_config(config)?
    } else {
        return Err(Error::Input(format!("{} has no {}", run_path.display(), RunDir::CONFIG)));
    };
    let (_, records) = load_dataset(data)?;
    let windows = examples(&records, &cfg.model)?;
    let model;
    let predictor: &dyn Predictor = match stub {
        Some(Stub::Perfect) => &PerfectStub,
        None => {
            model = run.load_model()?;
            if model.config() != &cfg.model {
                return Err(Error::Input("checkpoint and config.json disagree on the model".into()));
            }
            &model
        }
    };
    let result = evaluate(predictor, &cfg.model, &windows)?;
    let run = RunDir::create(run_path)?;
    if !config_path.exists() {
        run.write_text(RunDir::CONFIG, &cfg.to_json())?;
    }
    run.write_result(&result)?;
    println!(
        "MAE {:.6}  RMSE {:.6}  pearson {}  windows {}  excluded {}",
        result.mae,
        result.rmse,
        result.pearson.map_or_else(|| "n/a".into(), |p| format!("{p:.4}")),
        result.pairs.len(),
        result.excluded_windows
    );
    Ok(0)
}

fn stage_one_tokens(cfg: &ModelConfig) -> Result<usize> {
    let g = cfg.stage_grids()?;
    Ok(g[0][0] * g[0][1] * g[0][2])
}

fn search(data: &Path, config: Option<&Path>, out: &Path) -> Result<u8> {
    let cfg = load_config(config)?;
    let (_, records) = load_dataset(data)?;
    let split = split_records(records, &cfg)?;
    let scoring = if split.val.is_empty() { &split.test } else { &split.val };
    if scoring.is_empty() {
        return Err(Error::Input("search needs validation or test clips to score candidates".into()));
    }
    let run = RunDir::create(out)?;
    run.write_text(RunDir::CONFIG, &cfg.to_json())?;
    let start = ModelConfig {
        output_format: gvt2rpm::OutputFormat::Hr,
        frame_format: gvt2rpm::FrameFormat::Raw,
        signal_norm: false,
        pos_encoding: gvt2rpm::PosEncoding::Rel,
        scaling: gvt2rpm::ScalingStrategy::ALL[0],
        ..cfg.model.clone()
    };
    let trace: SearchTrace = greedy_adapt(
        |cand| {
            let tokens = stage_one_tokens(cand)?;
            if tokens > cfg.search.search_max_tokens {
                return Err(Error::Config(format!(
                    "{tokens} stage-1 tokens exceed search_max_tokens = {}",
                    cfg.search.search_max_tokens
                )));
            }
            let train = examples(&split.train, cand)?;
            let score = examples(scoring, cand)?;
            let outcome = train_model_with(cand, &cfg.train, &train, &[], |_| {})?;
            let mae = evaluate(&outcome.model, cand, &score)?.mae;
            eprintln!("{}: MAE {mae:.3}", serde_json::to_string(cand).unwrap_or_default());
            Ok(mae)
        },
        &DesignSpace::default(),
        &start,
    )?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    run.write_text(RunDir::SEARCH_TRACE, &String::from_utf8(csv).expect("CSV is UTF-8"))?;
    run.write_json("search.json", &trace)?;
    let best = RunConfig {
        model: trace.final_config.clone(),
        ..cfg
    };
    run.write_text("best_config.json", &best.to_json())?;
    println!(
        "{} evaluator calls; selected {}",
        trace.evaluator_calls,
        serde_json::to_string(&trace.final_config)?
    );
    Ok(0)
}

fn gradcheck(seeds: u64) -> Result<u8> {
    let rows = full_suite(seeds)?;
    println!("{:<28} {:>14} {:>10}  status", "check", "max_rel_err", "tolerance");
    for r in &rows {
        println!(
            "{:<28} {:>14.3e} {:>10.0e}  {}",
            r.name,
            r.max_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(if rows.iter().all(|r| r.passed()) { 0 } else { 3 })
}
