//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tspnco::bench::{
    compare_runs, curves_from_reports, emit_plot_data, evaluate, generalization_sweep, read_reports, sweep_dataset,
    write_comparison, write_reports, EvalReport, RunInfo,
};
use tspnco::dataset::{read_dataset, write_dataset, Dataset, SolverTag};
use tspnco::model::PolicyModel;
use tspnco::training::{load_policy, Paradigm, TrainConfig, Trainer};

use crate::config::{resolve_decode, resolve_sweep, resolve_train, FileConfig, TrainSection, DEFAULT_COUNT};
use crate::{EvalArgs, GenerateArgs, PlotArgs, SweepArgs, TrainArgs, Usage};

const CHECKPOINT: &str = "checkpoint.bin";
const TRAIN_LOG: &str = "train_log.csv";
const CONFIG_ECHO: &str = "config.toml";

pub fn generate(a: GenerateArgs) -> Result<()> {
    let solver: SolverTag = a.solve.parse().map_err(|e: tspnco::Error| Usage(e.to_string()))?;
    if a.size < 2 {
        return Err(Usage(format!("--size must be at least 2, got {}", a.size)).into());
    }
    solver.check_size(a.size)?;
    log::info!("generating {} instances of size {} (solver {})", a.count, a.size, a.solve);
    let ds = Dataset::generate(a.size, a.count, a.seed, solver)?;
    write_dataset(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        f(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_state(dir: &Path, t: &Trainer) -> Result<()> {
    write_atomic(&dir.join(CHECKPOINT), |w| Ok(t.save(w)?))?;
    write_atomic(&dir.join(TRAIN_LOG), |w| Ok(t.log().write_csv(w)?))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let data = a
        .data
        .as_deref()
        .map(|p| read_dataset(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let mut flags = TrainSection {
        preset: None,
        paradigm: a.paradigm,
        baseline: a.baseline,
        graph_size: a.graph_size,
        epochs: a.epochs,
        epoch_size: a.epoch_size,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        val_size: a.val_size,
        val_every: a.val_every,
    };
    if let (Some(ds), None, None) = (&data, flags.graph_size, file.train().graph_size) {
        flags.graph_size = Some(ds.size());
    }
    let (config, resolved) = resolve_train(&file, flags, a.encoder)?;
    if config.paradigm == Paradigm::Sl {
        let ds = data
            .as_ref()
            .ok_or_else(|| Usage("supervised training needs --data with solutions".into()))?;
        if ds.solutions.is_none() {
            return Err(Usage("--data has no solutions; supervised training needs labels".into()).into());
        }
        if ds.size() != config.graph_size {
            return Err(Usage(format!(
                "--data holds size {} instances but graph_size is {}",
                ds.size(),
                config.graph_size
            ))
            .into());
        }
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut comment = vec!["resolved configuration of tspnco train".to_string()];
    if let Some(p) = &a.data {
        comment.push(format!("data = {}", p.display()));
    }
    resolved.echo(&a.out.join(CONFIG_ECHO), &comment)?;
    let ckpt = a.out.join(CHECKPOINT);
    let mut trainer = if a.resume && ckpt.exists() {
        let t = Trainer::load(BufReader::new(File::open(&ckpt)?))
            .with_context(|| format!("loading {}", ckpt.display()))?;
        let mut saved = *t.config();
        saved.epochs = config.epochs;
        if saved != config {
            return Err(Usage("checkpoint was trained with a different configuration".into()).into());
        }
        let mut t = t;
        t.set_epochs(config.epochs);
        log::info!("resuming after epoch {} ({} batches)", t.epoch(), t.batches());
        t
    } else {
        Trainer::new(config)?
    };
    log::info!(
        "training {} on TSP{} with {} parameters",
        config.paradigm.as_str(),
        config.graph_size,
        trainer.model().parameter_count()
    );
    while trainer.epoch() < config.epochs {
        trainer.run_epoch(data.as_ref())?;
        save_state(&a.out, &trainer)?;
    }
    save_state(&a.out, &trainer)?;
    if let Some(gap) = trainer.log().last_val_gap() {
        log::info!("final greedy validation gap {gap:.4}%");
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(PolicyModel, Option<TrainConfig>)> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    load_policy(BufReader::new(f)).with_context(|| format!("loading {}", path.display()))
}

fn run_info(path: &Path, name: Option<String>, config: Option<&TrainConfig>, model: &PolicyModel) -> RunInfo {
    let model_name = name.unwrap_or_else(|| {
        let from = if path.file_name().is_some_and(|f| f == CHECKPOINT) {
            path.parent().and_then(Path::file_name)
        } else {
            path.file_stem()
        };
        from.map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
    });
    log::info!("model {model_name} uses the {} encoder", model.config().encoder.kind.as_str());
    RunInfo {
        model: model_name,
        paradigm: config.map_or("unknown", |c| c.paradigm.as_str()).into(),
        train_size: config.map_or(0, |c| c.graph_size),
    }
}

fn emit_reports(out: Option<&PathBuf>, reports: &[EvalReport], echo: &FileConfig, comment: &[String]) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_atomic(path, |w| Ok(write_reports(w, reports)?))?;
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".config.toml");
            echo.echo(&path.with_file_name(name), comment)
        }
        None => {
            let stdout = io::stdout();
            Ok(write_reports(stdout.lock(), reports)?)
        }
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let (model, train) = load_model(&a.checkpoint)?;
    let info = run_info(&a.checkpoint, a.name, train.as_ref(), &model);
    let (decodes, decode_section) = resolve_decode(&file, a.decode.as_deref(), a.decode_seed)?;
    let mut echo = FileConfig {
        decode: Some(decode_section),
        ..FileConfig::default()
    };
    let mut comment = vec![
        "resolved configuration of tspnco eval".to_string(),
        format!("checkpoint = {}", a.checkpoint.display()),
    ];
    let ds = match &a.data {
        Some(p) => {
            comment.push(format!("data = {}", p.display()));
            read_dataset(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => {
            let s = file.sweep();
            let size = a.size.or(train.map(|t| t.graph_size)).ok_or_else(|| {
                Usage("--size is required when the checkpoint carries no training size".into())
            })?;
            let count = a.count.or(s.count).unwrap_or(DEFAULT_COUNT);
            let seed = a.seed.or(s.seed).unwrap_or(0);
            if size < 2 || count == 0 {
                return Err(Usage("--size must be at least 2 and --count positive".into()).into());
            }
            comment.push(format!("size = {size}"));
            echo.sweep = Some(crate::config::SweepSection {
                sizes: Some(vec![size]),
                count: Some(count),
                seed: Some(seed),
                exact_only: Some(a.exact_only),
            });
            sweep_dataset(size, count, seed)?
        }
    };
    let mut reports = Vec::new();
    for d in &decodes {
        log::info!("evaluating {} on {} instances of size {}", d.mode, ds.len(), ds.size());
        let row = evaluate(&model, &ds, d, a.exact_only)?;
        reports.push(EvalReport {
            info: info.clone(),
            decode: d.mode,
            rows: vec![row],
        });
    }
    emit_reports(a.out.as_ref(), &reports, &echo, &comment)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let (model, train) = load_model(&a.checkpoint)?;
    let info = run_info(&a.checkpoint, a.name, train.as_ref(), &model);
    let (decodes, decode_section) = resolve_decode(&file, a.decode.as_deref(), a.decode_seed)?;
    let (spec, exact_only, sweep_section) = resolve_sweep(&file, a.sizes, a.count, a.seed, a.exact_only, decodes)?;
    let reports = generalization_sweep(&model, &info, &spec, exact_only)?;
    let echo = FileConfig {
        decode: Some(decode_section),
        sweep: Some(sweep_section),
        ..FileConfig::default()
    };
    let comment = vec![
        "resolved configuration of tspnco sweep".to_string(),
        format!("checkpoint = {}", a.checkpoint.display()),
    ];
    emit_reports(a.out.as_ref(), &reports, &echo, &comment)
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let mut reports = Vec::new();
    for p in &a.reports {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        reports.extend(read_reports(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?);
    }
    if reports.is_empty() {
        return Err(Usage("the given reports contain no rows".into()).into());
    }
    let paths = emit_plot_data(&curves_from_reports(&reports), &a.out)?;
    for p in &paths {
        log::info!("wrote {}", p.display());
    }
    match compare_runs(&reports) {
        Ok(c) => {
            let path = a.out.join("comparison.csv");
            write_atomic(&path, |w| Ok(write_comparison(w, &c)?))?;
            log::info!("wrote {}", path.display());
        }
        Err(e) => log::warn!("no comparison table: {e}"),
    }
    Ok(())
}
