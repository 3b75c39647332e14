//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use affuse_core::checkpoint;
use affuse_core::data::dataset::{load_trial, make_windows, TrialData};
use affuse_core::data::folds::{make_folds, FoldFile};
use affuse_core::data::labels::read_label_csv;
use affuse_core::data::manifest::{resolve, Partition, PreparedManifest};
use affuse_core::data::prepare::prepare;
use affuse_core::data::synthetic::{generate, write_dataset, SyntheticSpec};
use affuse_core::data::windows::WindowSpec;
use affuse_core::data::Dimension;
use affuse_core::ensemble::{merge, read_trace, write_trace, ClipOrder, MergePolicy};
use affuse_core::fusion::ModelConfig;
use affuse_core::gradcheck::suite;
use affuse_core::metrics::ccc;
use affuse_core::trainer::{fit, predict_trial, write_history};
use affuse_core::FusionModel;
use anyhow::{bail, Context, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn synth(out: &Path, spec: Option<&Path>, seed: u64) -> Result<PathBuf> {
    let spec: SyntheticSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("malformed synthetic spec {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    let trials = generate(&spec, seed)?;
    Ok(write_dataset(out, &trials)?)
}

pub fn cmd_prepare(manifest: &Path, out: &Path) -> Result<()> {
    let report = prepare(manifest, out)?;
    for id in &report.skipped {
        log::warn!("skipped {id}: no valid labels");
    }
    log::info!("prepared {} trials into {}", report.prepared.trials.len(), out.display());
    Ok(())
}

pub fn cmd_folds(prepared: &Path, k: usize, seed: u64, out: &Path) -> Result<()> {
    let manifest = PreparedManifest::load(prepared)?;
    let folds = make_folds(&manifest.infos(), k, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    FoldFile { seed, folds }.save(out)?;
    Ok(())
}

fn load_ids(
    prepared_path: &Path,
    manifest: &PreparedManifest,
    ids: &[String],
    model: &ModelConfig,
    dimension: Option<Dimension>,
) -> Result<Vec<TrialData<f64>>> {
    ids.iter()
        .map(|id| {
            let trial = manifest.trial(id).with_context(|| format!("trial {id} not in {}", prepared_path.display()))?;
            Ok(load_trial(prepared_path, trial, model.kind, dimension)?)
        })
        .collect()
}

/// Seed for one (fold, dimension) run, so runs differ but stay reproducible.
fn run_seed(seed: u64, fold: usize, dimension: Dimension) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(2 * fold as u64 + dimension.column() as u64)
}

pub fn train(config: &RunConfig, fold: usize, out: &Path) -> Result<()> {
    let prepared_path = config.prepared.as_deref().context("config has no `prepared` path")?;
    let folds_path = config.folds.as_deref().context("config has no `folds` path")?;
    let manifest = PreparedManifest::load(prepared_path)?;
    let split = FoldFile::load(folds_path)?.fold(fold)?.clone();
    create_dir(out)?;
    for dimension in config.dimension.dimensions() {
        let train = load_ids(prepared_path, &manifest, &split.train, &config.model, Some(dimension))?;
        let val = load_ids(prepared_path, &manifest, &split.validation, &config.model, Some(dimension))?;
        let train = make_windows(&train, &config.window)?;
        let val = make_windows(&val, &config.window)?;
        let seed = run_seed(config.trainer.seed, fold, dimension);
        let mut model = FusionModel::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        let trainer = affuse_core::trainer::TrainerConfig { seed, ..config.trainer.clone() };
        log::info!(
            "fold {fold} {}: {} train / {} validation windows",
            dimension.as_str(),
            train.len(),
            val.len()
        );
        let result = fit(&mut model, &train, &val, &trainer)?;
        checkpoint::save(&model, &out.join(format!("checkpoint-{}.afmd", dimension.as_str())))?;
        write_history(&out.join(format!("history-{}.csv", dimension.as_str())), &result.history)?;
        println!(
            "fold={fold} dimension={} epochs={} best_val_ccc={:.6}",
            dimension.as_str(),
            result.history.len(),
            result.best_val_ccc
        );
    }
    Ok(())
}

pub fn predict(
    checkpoint_path: &Path,
    prepared_path: &Path,
    partitions: &[Partition],
    window: &WindowSpec,
    out: &Path,
) -> Result<()> {
    let model: FusionModel = checkpoint::load(checkpoint_path)?;
    let manifest = PreparedManifest::load(prepared_path)?;
    create_dir(out)?;
    let mut written = 0;
    for trial in manifest.trials.iter().filter(|t| partitions.contains(&t.partition)) {
        let data: TrialData<f64> = load_trial(prepared_path, trial, model.kind(), None)?;
        let trace = predict_trial(&model, &data.input, window)?;
        write_trace(&out.join(format!("{}.csv", trial.trial_id)), &trace)?;
        written += 1;
    }
    log::info!("wrote {written} traces to {}", out.display());
    Ok(())
}

/// Trial ids with a `<id>.csv` trace in `dir`, sorted.
fn trace_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn cmd_merge(dirs: &[PathBuf], order: ClipOrder, out: &Path) -> Result<()> {
    let Some(first) = dirs.first() else { bail!("no trace directories given") };
    let ids = trace_ids(first)?;
    if ids.is_empty() {
        bail!("no traces in {}", first.display());
    }
    create_dir(out)?;
    let policy = MergePolicy::new(order);
    for id in &ids {
        let traces = dirs
            .iter()
            .map(|d| read_trace::<f64>(&d.join(format!("{id}.csv"))).map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()?;
        let merged = merge(&traces, &policy).with_context(|| format!("merging {id}"))?;
        write_trace(&out.join(format!("{id}.csv")), &merged)?;
    }
    Ok(())
}

/// One report row per trace plus an `ALL` row over the concatenation.
pub fn eval(traces: &Path, prepared_path: &Path, dimension: Dimension) -> Result<String> {
    let manifest = PreparedManifest::load(prepared_path)?;
    let mut report = String::from("dimension,trial_id,frames,ccc\n");
    let (mut all_pred, mut all_gold) = (Vec::new(), Vec::new());
    for id in trace_ids(traces)? {
        let trial = manifest.trial(&id).with_context(|| format!("trace {id} has no prepared trial"))?;
        let pred: Vec<f64> = read_trace(&traces.join(format!("{id}.csv")))?;
        let rows: Vec<Vec<f64>> = read_label_csv(&resolve(prepared_path, &trial.labels))?;
        let gold: Vec<f64> = rows.iter().map(|r| r[dimension.column()]).collect();
        if pred.len() != gold.len() {
            bail!("trace {id} has {} frames, labels have {}", pred.len(), gold.len());
        }
        let value = ccc(&pred, &gold)?;
        report.push_str(&format!("{},{id},{},{value}\n", dimension.as_str(), gold.len()));
        all_pred.extend(pred);
        all_gold.extend(gold);
    }
    if all_gold.is_empty() {
        bail!("no traces in {}", traces.display());
    }
    report.push_str(&format!("{},ALL,{},{}\n", dimension.as_str(), all_gold.len(), ccc(&all_pred, &all_gold)?));
    Ok(report)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Returns the CSV report and whether every check passed.
pub fn gradcheck(model: &ModelConfig, frames: usize, seed: u64, coords: Option<usize>) -> Result<(String, bool)> {
    let reports = suite::run(model, frames, seed, coords)?;
    let mut out = String::from("check,coordinates,max_rel_error,passed\n");
    let mut ok = true;
    for r in &reports {
        let passed = r.passed(GRADCHECK_TOLERANCE);
        ok &= passed;
        out.push_str(&format!("{},{},{:e},{}\n", r.name, r.coordinates, r.max_rel_error, passed));
    }
    Ok((out, ok))
}
