//! Experiment commands behind the `srns` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use srns_core::data::{
    build_false_negative_set, build_index, file_hash, ingest, read_snapshot, split_leave_one_out, split_random,
    write_snapshot, FalseNegativeSet, InteractionDataset, SnapshotMeta,
};
use srns_core::math::{mean, population_std};
use srns_core::model::ModelState;
use srns_core::sampler::{SamplerConfig, Strategy};
use srns_core::trainer::{diagnose, matched_hard_class, timing_profile, train_with, DiagnosticConfig, RunLog, TimingRow};
use srns_core::Error;

pub use config::{ExperimentConfig, SplitKind};

/// Process exit code for an error chain: 2 for bad input, 3 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_input_error() => 2,
        _ => 3,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepareReport {
    pub num_users: usize,
    pub num_items: usize,
    pub positives: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub snapshot: PathBuf,
}

/// Ingests, indexes and splits the raw file, writing a snapshot directory.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PrepareReport> {
    let d = &cfg.dataset;
    let records = ingest(&d.path, d.format, cfg.threshold())?;
    let indexed = build_index(&records, d.min_user_records)?;
    let positives = indexed.train_pairs.len();
    let ds = match d.split {
        SplitKind::Random => split_random(&indexed, d.test_fraction, d.seed)?,
        SplitKind::LeaveOneOut => split_leave_one_out(&indexed)?,
    };
    let meta = SnapshotMeta {
        num_users: ds.num_users,
        num_items: ds.num_items,
        seed: d.seed,
        source_hash: file_hash(&d.path)?,
    };
    write_snapshot(&ds, &d.snapshot, &meta)?;
    Ok(PrepareReport {
        num_users: ds.num_users,
        num_items: ds.num_items,
        positives,
        train: ds.train_pairs.len(),
        validation: ds.num_validation(),
        test: ds.num_test_pairs(),
        snapshot: d.snapshot.clone(),
    })
}

pub fn load_snapshot(cfg: &ExperimentConfig) -> Result<InteractionDataset> {
    let dir = &cfg.dataset.snapshot;
    if !dir.join("meta.json").exists() {
        return Err(Error::Config(format!(
            "no prepared snapshot at {} (run `srns prepare` first)",
            dir.display()
        ))
        .into());
    }
    Ok(read_snapshot(dir)?.0)
}

/// False negatives for noise level `sigma`, or `None` when noise is off.
pub fn false_negatives(cfg: &ExperimentConfig, ds: &InteractionDataset, sigma: f64) -> Result<Option<FalseNegativeSet>> {
    if cfg.noise.flip_fraction <= 0.0 {
        return Ok(None);
    }
    Ok(Some(build_false_negative_set(ds, cfg.noise.flip_fraction, sigma, cfg.noise.seed)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct TailAverages {
    pub epochs: usize,
    pub test_ndcg1: Option<f64>,
    pub test_ndcg3: Option<f64>,
    pub test_recall3: Option<f64>,
}

/// Averages over the last 50 epochs, the reporting window for noise runs.
pub const TAIL_EPOCHS: usize = 50;

pub fn tail_averages(log: &RunLog) -> TailAverages {
    TailAverages {
        epochs: TAIL_EPOCHS.min(log.epochs.len()),
        test_ndcg1: log.tail_mean(TAIL_EPOCHS, |e| e.test_ndcg1),
        test_ndcg3: log.tail_mean(TAIL_EPOCHS, |e| e.test_ndcg3),
        test_recall3: log.tail_mean(TAIL_EPOCHS, |e| e.test_recall3),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub sigma: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_validation: Option<(usize, f64)>,
    /// Test metrics at the best validation epoch, or the last epoch.
    pub reported_test_ndcg1: Option<f64>,
    pub tail: TailAverages,
    pub mean_epoch_seconds: f64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss: f64,
    pub val_ndcg1: Option<f64>,
    pub test_ndcg1: Option<f64>,
    pub test_ndcg3: Option<f64>,
    pub test_recall3: Option<f64>,
    pub ler: Option<f64>,
    pub epoch_seconds: f64,
    pub sampling_seconds: f64,
}

/// One training run; writes metrics, summary, config echo and checkpoint
/// into `dir` when given.
pub fn train_once(
    cfg: &ExperimentConfig,
    ds: &InteractionDataset,
    seed: u64,
    sigma: f64,
    dir: Option<&Path>,
) -> Result<(RunSummary, RunLog)> {
    let fns = false_negatives(cfg, ds, sigma)?;
    let run = cfg.run_config(seed);
    let (log, model) = train_with(ds, &run, fns.as_ref(), |m| {
        log::debug!(
            "seed {seed} epoch {} loss {:.5} ndcg@3 {:?}",
            m.epoch,
            m.loss,
            m.test_ndcg3
        )
    })?;
    let reported_test_ndcg1 = match log.best_validation {
        Some((e, _)) => log.epochs[e - 1].test_ndcg1,
        None => log.last().and_then(|m| m.test_ndcg1),
    };
    let summary = RunSummary {
        seed,
        sigma,
        epochs_run: log.epochs.len(),
        stopped_early: log.stopped_early,
        best_validation: log.best_validation,
        reported_test_ndcg1,
        tail: tail_averages(&log),
        mean_epoch_seconds: log.mean_epoch_seconds(),
        config: cfg.clone(),
    };
    if let Some(dir) = dir {
        create_dir(dir)?;
        let rows: Vec<MetricsRow> = log
            .epochs
            .iter()
            .map(|e| MetricsRow {
                epoch: e.epoch,
                loss: e.loss,
                val_ndcg1: e.val_ndcg1,
                test_ndcg1: e.test_ndcg1,
                test_ndcg3: e.test_ndcg3,
                test_recall3: e.test_recall3,
                ler: e.ler,
                epoch_seconds: e.epoch_seconds,
                sampling_seconds: e.sampling_seconds,
            })
            .collect();
        write_csv(&dir.join(&cfg.output.metrics_csv), &rows)?;
        write_file(
            &dir.join(&cfg.output.summary_json),
            serde_json::to_string_pretty(&summary)? + "\n",
        )?;
        write_file(&dir.join("config.toml"), cfg.to_toml())?;
        model.save(&dir.join("checkpoint.json"))?;
    }
    Ok((summary, log))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        MeanStd {
            mean: mean(values),
            std: population_std(values),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub tail_test_ndcg3: MeanStd,
    pub tail_test_recall3: MeanStd,
    pub tail_test_ndcg1: MeanStd,
    pub reported_test_ndcg1: MeanStd,
}

pub fn aggregate(summaries: &[RunSummary]) -> Aggregate {
    let pick = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> MeanStd {
        MeanStd::of(&summaries.iter().filter_map(f).collect::<Vec<_>>())
    };
    Aggregate {
        runs: summaries.len(),
        seeds: summaries.iter().map(|s| s.seed).collect(),
        tail_test_ndcg3: pick(&|s| s.tail.test_ndcg3),
        tail_test_recall3: pick(&|s| s.tail.test_recall3),
        tail_test_ndcg1: pick(&|s| s.tail.test_ndcg1),
        reported_test_ndcg1: pick(&|s| s.reported_test_ndcg1),
    }
}

/// Runs `seeds` in worker threads, each with its own output directory.
pub fn train_seeds(
    cfg: &ExperimentConfig,
    ds: &InteractionDataset,
    seeds: &[u64],
    sigma: f64,
    root: Option<&Path>,
) -> Result<Vec<RunSummary>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let dir = root.map(|r| {
                    if seeds.len() == 1 {
                        r.to_path_buf()
                    } else {
                        r.join(format!("seed-{seed}"))
                    }
                });
                scope.spawn(move || train_once(cfg, ds, seed, sigma, dir.as_deref()).map(|(s, _)| s))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| anyhow::anyhow!("training thread panicked"))?)
            .collect()
    })
}

/// `train` command: `train.repeat` runs from `train.seed` upwards, plus
/// `aggregate.json` when more than one.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    let ds = load_snapshot(cfg)?;
    let seeds: Vec<u64> = (0..cfg.train.repeat as u64).map(|k| cfg.train.seed + k).collect();
    let out = &cfg.output.dir;
    let summaries = train_seeds(cfg, &ds, &seeds, cfg.sigma(), Some(out))?;
    if summaries.len() > 1 {
        write_file(
            &out.join("aggregate.json"),
            serde_json::to_string_pretty(&aggregate(&summaries))? + "\n",
        )?;
    }
    Ok(summaries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepStrategy {
    /// Memory sampler with the variance term switched off.
    DifficultyOnly,
    VarianceBased,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub strategy: SweepStrategy,
    pub runs: usize,
    pub ndcg3_mean: f64,
    pub ndcg3_std: f64,
    pub recall3_mean: f64,
    pub recall3_std: f64,
}

/// `noise-sweep`: for each sigma, the memory sampler with and without the
/// variance term over `seeds` seeds; writes `sweep.csv`.
pub fn cmd_noise_sweep(cfg: &ExperimentConfig, seeds: usize) -> Result<Vec<SweepRow>> {
    let ds = load_snapshot(cfg)?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| cfg.train.seed + k).collect();
    let mut rows = Vec::new();
    for &sigma in &cfg.noise.sigmas {
        for strategy in [SweepStrategy::DifficultyOnly, SweepStrategy::VarianceBased] {
            let mut c = cfg.clone();
            c.sampler.strategy = Strategy::Srns;
            if strategy == SweepStrategy::DifficultyOnly {
                c.sampler.alpha = 0.0;
            }
            let sums = train_seeds(&c, &ds, &seed_list, sigma, None)?;
            let agg = aggregate(&sums);
            log::info!("sigma {sigma} {strategy:?}: ndcg@3 {:.4}", agg.tail_test_ndcg3.mean);
            rows.push(SweepRow {
                sigma,
                strategy,
                runs: sums.len(),
                ndcg3_mean: agg.tail_test_ndcg3.mean,
                ndcg3_std: agg.tail_test_ndcg3.std,
                recall3_mean: agg.tail_test_recall3.mean,
                recall3_std: agg.tail_test_recall3.std,
            });
        }
    }
    create_dir(&cfg.output.dir)?;
    write_csv(&cfg.output.dir.join("sweep.csv"), &rows)?;
    Ok(rows)
}

/// `profile`: mean epoch and sampling time per memory size (`S1 = S2 =
/// total / 2`) and lazy-update period, plus a uniform baseline; writes
/// `timing.csv`.
pub fn cmd_profile(cfg: &ExperimentConfig, totals: &[usize], lazy: &[usize], epochs: usize) -> Result<Vec<TimingRow>> {
    let ds = load_snapshot(cfg)?;
    let mut variants = vec![SamplerConfig {
        strategy: Strategy::Uniform,
        ..cfg.sampler.clone()
    }];
    for &total in totals {
        for &e in lazy {
            variants.push(SamplerConfig {
                strategy: Strategy::Srns,
                memory_size: (total / 2).max(1),
                expansion_size: total - (total / 2).max(1),
                lazy_update: e,
                ..cfg.sampler.clone()
            });
        }
    }
    let rows = timing_profile(&ds, &cfg.run_config(cfg.train.seed), &variants, epochs)?;
    create_dir(&cfg.output.dir)?;
    write_csv(&cfg.output.dir.join("timing.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
struct StatRow<'a> {
    class: &'a str,
    statistic: &'a str,
    value: f64,
}

/// `analyze`: diagnostics of a checkpoint (or a fresh model when
/// `checkpoint` is `None`); writes `ccdf.csv`, `ler_by_difficulty.csv`,
/// `std_mean.csv` and `ler_per_batch.csv`.
pub fn cmd_analyze(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    diag: &DiagnosticConfig,
) -> Result<srns_core::eval::DiagnosticReport> {
    let ds = load_snapshot(cfg)?;
    let model = match checkpoint {
        Some(p) => ModelState::load(p)?,
        None => {
            let run = cfg.run_config(cfg.train.seed);
            ModelState::init(ds.num_users, ds.num_items, &run.hyper, run.scorer, run.seed)?
        }
    };
    let fns = false_negatives(cfg, &ds, cfg.sigma())?
        .ok_or_else(|| Error::Config("analysis needs noise.flip_fraction > 0".into()))?;
    let mut run = cfg.run_config(cfg.train.seed);
    run.sampler.strategy = Strategy::Uniform;
    let report = diagnose(&ds, &fns, model, &run, diag)?;

    let out = &cfg.output.dir;
    create_dir(out)?;
    #[derive(Serialize)]
    struct CcdfRow {
        x: f64,
        ccdf: f64,
    }
    #[derive(Serialize)]
    struct LerRow {
        difficulty: usize,
        ler: f64,
    }
    #[derive(Serialize)]
    struct BatchRow {
        batch: usize,
        ler: f64,
    }
    write_csv(
        &out.join("ccdf.csv"),
        &report.ccdf.iter().map(|&(x, ccdf)| CcdfRow { x, ccdf }).collect::<Vec<_>>(),
    )?;
    write_csv(
        &out.join("ler_by_difficulty.csv"),
        &report
            .ler_by_difficulty
            .iter()
            .map(|&(difficulty, ler)| LerRow { difficulty, ler })
            .collect::<Vec<_>>(),
    )?;
    write_csv(
        &out.join("ler_per_batch.csv"),
        &report
            .ler_per_batch
            .iter()
            .enumerate()
            .map(|(b, &ler)| BatchRow { batch: b + 1, ler })
            .collect::<Vec<_>>(),
    )?;
    let mut stats = Vec::new();
    for c in &report.std_mean_by_class {
        stats.push(StatRow { class: &c.class, statistic: "count", value: c.count as f64 });
        stats.push(StatRow { class: &c.class, statistic: "median_std_mean", value: c.median_std_mean });
        stats.push(StatRow { class: &c.class, statistic: "median_ppos", value: c.median_ppos });
    }
    let matched = matched_hard_class(&report.std_mean_by_class);
    if let Some(m) = matched {
        stats.push(StatRow { class: "HN_matched", statistic: "median_std_mean", value: m.median_std_mean });
    }
    write_csv(&out.join("std_mean.csv"), &stats)?;
    Ok(report)
}
