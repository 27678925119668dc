//! Mini-batch training loop, evaluation schedule and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FalseNegativeSet, InteractionDataset};
use crate::error::{Error, Result};
use crate::eval::{
    ccdf, label_error_ratio, mean_positive_scores, ppos_against_mean_positive, std_mean_report, ClassSummary,
    DiagnosticReport, Evaluator, Protocol, Split,
};
use crate::math::{median, sigmoid};
use crate::model::{ModelState, ScorerKind, TrainHyper, Triplet};
use crate::sampler::{
    sample_hard_d, sample_rank_based, sample_uniform, PopularitySampler, SamplerConfig, SelectScratch, SrnsSampler,
    Strategy,
};
use crate::history::WINDOW;
use crate::{ItemIdx, UserIdx};

const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const SAMPLER_STREAM: u64 = 0xc2b2_ae3d_27d4_eb4f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub epochs: usize,
    /// Stop after this many epochs without a better validation NDCG@1.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Evaluate every this many epochs (and always on the last); 0 never.
    pub eval_every: usize,
    pub scorer: ScorerKind,
    pub hyper: TrainHyper,
    pub sampler: SamplerConfig,
    pub protocol: Protocol,
    /// Seed of the fixed sampled-protocol candidate lists.
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 400,
            patience: Some(100),
            seed: 0,
            eval_every: 1,
            scorer: ScorerKind::Gmf,
            hyper: TrainHyper::default(),
            sampler: SamplerConfig::default(),
            protocol: Protocol::Full,
            eval_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.patience.is_some_and(|p| p > self.epochs) {
            return Err(Error::Config("patience must not exceed epochs".into()));
        }
        self.hyper.validate()?;
        self.sampler.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_ndcg1: Option<f64>,
    pub test_ndcg1: Option<f64>,
    pub test_ndcg3: Option<f64>,
    pub test_recall3: Option<f64>,
    /// Share of selected negatives that are false negatives.
    pub ler: Option<f64>,
    pub epoch_seconds: f64,
    /// Time spent choosing negatives and refreshing memories.
    pub sampling_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochMetrics>,
    /// `(epoch, NDCG@1)` of the best validation evaluation.
    pub best_validation: Option<(usize, f64)>,
    pub stopped_early: bool,
}

impl RunLog {
    pub fn mean_epoch_seconds(&self) -> f64 {
        crate::math::mean(&self.epochs.iter().map(|e| e.epoch_seconds).collect::<Vec<_>>())
    }

    /// Mean of `f` over the evaluated epochs among the last `n` epochs.
    pub fn tail_mean(&self, n: usize, f: impl Fn(&EpochMetrics) -> Option<f64>) -> Option<f64> {
        let start = self.epochs.len().saturating_sub(n);
        let vals: Vec<f64> = self.epochs[start..].iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| crate::math::mean(&vals))
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

#[cfg(not(target_arch = "wasm32"))]
struct Stopwatch(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Stopwatch {
    fn start() -> Self {
        Stopwatch(std::time::Instant::now())
    }
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

// No monotonic clock on bare wasm; timings read as zero there.
#[cfg(target_arch = "wasm32")]
struct Stopwatch;

#[cfg(target_arch = "wasm32")]
impl Stopwatch {
    fn start() -> Self {
        Stopwatch
    }
    fn seconds(&self) -> f64 {
        0.0
    }
}

enum NegativeSource {
    Uniform,
    Popularity(PopularitySampler),
    RankBased,
    Srns(Box<SrnsSampler>, SelectScratch),
}

/// Outcome of one training epoch, before evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub ler: Option<f64>,
    pub ler_per_batch: Vec<f64>,
    pub sampling_seconds: f64,
}

/// Stateful training run, advanced one epoch at a time.
pub struct Trainer<'a> {
    ds: &'a InteractionDataset,
    run: RunConfig,
    fns: Option<&'a FalseNegativeSet>,
    model: ModelState,
    source: NegativeSource,
    shuffle_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    order: Vec<usize>,
    epoch: usize,
    record_history: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a InteractionDataset, run: &RunConfig, fns: Option<&'a FalseNegativeSet>) -> Result<Self> {
        let model = ModelState::init(ds.num_users, ds.num_items, &run.hyper, run.scorer, run.seed)?;
        Self::with_model(ds, run, fns, model)
    }

    /// Continues from an existing model (e.g. a checkpoint).
    pub fn with_model(
        ds: &'a InteractionDataset,
        run: &RunConfig,
        fns: Option<&'a FalseNegativeSet>,
        model: ModelState,
    ) -> Result<Self> {
        run.validate()?;
        if ds.train_pairs.is_empty() {
            return Err(Error::EmptyDataset("no training pairs".into()));
        }
        if model.num_users != ds.num_users || model.num_items != ds.num_items {
            return Err(Error::Config(format!(
                "model is {}x{}, dataset is {}x{}",
                model.num_users, model.num_items, ds.num_users, ds.num_items
            )));
        }
        let mut sample_rng = ChaCha8Rng::seed_from_u64(run.seed ^ SAMPLER_STREAM);
        let source = match run.sampler.strategy {
            Strategy::Uniform => NegativeSource::Uniform,
            Strategy::Popularity => NegativeSource::Popularity(PopularitySampler::new(&ds.item_popularity())),
            Strategy::RankBased => NegativeSource::RankBased,
            Strategy::Srns => {
                let s = SrnsSampler::new(ds, &run.sampler, fns, &mut sample_rng)?;
                let scratch = s.new_scratch();
                NegativeSource::Srns(Box::new(s), scratch)
            }
        };
        // Histories are only read by the variance term.
        let cfg = &run.sampler;
        let record_history = cfg.alpha > 0.0 || cfg.lazy_pick == crate::sampler::LazyPick::StaleVariance;
        Ok(Trainer {
            ds,
            run: run.clone(),
            fns,
            model,
            source,
            shuffle_rng: ChaCha8Rng::seed_from_u64(run.seed ^ SHUFFLE_STREAM),
            sample_rng,
            order: (0..ds.train_pairs.len()).collect(),
            epoch: 0,
            record_history,
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn srns(&self) -> Option<&SrnsSampler> {
        match &self.source {
            NegativeSource::Srns(s, _) => Some(s),
            _ => None,
        }
    }

    /// Forces epoch-end score logging even when the variance term is off.
    pub fn set_record_history(&mut self, on: bool) {
        self.record_history = on;
    }

    fn negative(&mut self, u: UserIdx, i: ItemIdx, alpha_t: f64, refresh: bool) -> Result<ItemIdx> {
        let ds = self.ds;
        let positives = &ds.positives[u as usize];
        let cfg = &self.run.sampler;
        match &mut self.source {
            NegativeSource::Uniform => sample_uniform(u, ds.num_items, positives, &mut self.sample_rng),
            NegativeSource::Popularity(p) => p.sample(u, positives, &mut self.sample_rng),
            NegativeSource::RankBased => sample_rank_based(
                &self.model,
                u,
                positives,
                cfg.lambda_rank,
                cfg.rank_pool,
                &mut self.sample_rng,
            ),
            NegativeSource::Srns(s, scratch) => {
                if refresh {
                    let j = s.select(&self.model, u, i, alpha_t, scratch)?;
                    s.update_memory(&self.model, u, &mut self.sample_rng, scratch)?;
                    Ok(j)
                } else {
                    s.select_stale(u, i, alpha_t, &mut self.sample_rng, scratch)
                }
            }
        }
    }

    /// Runs one pass over the shuffled training pairs.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let t = self.epoch + 1;
        let alpha_t = self.run.sampler.alpha_at(t);
        let refresh = self.run.sampler.is_update_epoch(t);
        self.order.shuffle(&mut self.shuffle_rng);
        let order = std::mem::take(&mut self.order);
        let bsz = self.run.hyper.batch_size;
        let mut batch: Vec<Triplet> = Vec::with_capacity(bsz);
        let mut loss_sum = 0.0;
        let mut sampling_seconds = 0.0;
        let mut fn_hits = 0usize;
        let mut ler_per_batch = Vec::new();
        let result = (|| -> Result<()> {
            for (b, chunk) in order.chunks(bsz).enumerate() {
                batch.clear();
                let clock = Stopwatch::start();
                for &idx in chunk {
                    let (u, i) = self.ds.train_pairs[idx];
                    let j = self.negative(u, i, alpha_t, refresh)?;
                    batch.push(Triplet { user: u, pos: i, neg: j });
                }
                sampling_seconds += clock.seconds();
                if let Some(f) = self.fns {
                    let hits = batch.iter().filter(|tr| f.contains(tr.user, tr.neg)).count();
                    fn_hits += hits;
                    ler_per_batch.push(hits as f64 / batch.len() as f64);
                }
                let loss = self.model.grad_and_step(&batch, &self.run.hyper).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {t}, batch {}: {m}", b + 1)),
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("epoch {t}, batch {}: loss is {loss}", b + 1)));
                }
                loss_sum += loss * batch.len() as f64;
            }
            Ok(())
        })();
        self.order = order;
        result?;

        if self.record_history {
            if let NegativeSource::Srns(s, _) = &mut self.source {
                s.end_epoch(&self.model, t, &mut self.sample_rng)?;
            }
        }
        self.epoch = t;
        let n = self.order.len() as f64;
        Ok(EpochStats {
            loss: loss_sum / n,
            ler: self.fns.map(|_| fn_hits as f64 / n),
            ler_per_batch,
            sampling_seconds,
        })
    }
}

/// Full training run with per-epoch evaluation and early stopping.
pub fn train(
    ds: &InteractionDataset,
    run: &RunConfig,
    fns: Option<&FalseNegativeSet>,
) -> Result<(RunLog, ModelState)> {
    train_with(ds, run, fns, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch's metrics are final.
pub fn train_with(
    ds: &InteractionDataset,
    run: &RunConfig,
    fns: Option<&FalseNegativeSet>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(RunLog, ModelState)> {
    let mut trainer = Trainer::new(ds, run, fns)?;
    let test_eval = Evaluator::new(ds, Split::Test, run.protocol, run.eval_seed)?;
    let val_eval = Evaluator::new(ds, Split::Validation, run.protocol, run.eval_seed)?;
    let mut log = RunLog::default();
    for epoch in 1..=run.epochs {
        let clock = Stopwatch::start();
        let stats = trainer.run_epoch()?;
        let epoch_seconds = clock.seconds();
        let evaluate = run.eval_every > 0 && (epoch % run.eval_every == 0 || epoch == run.epochs);
        let mut m = EpochMetrics {
            epoch,
            loss: stats.loss,
            val_ndcg1: None,
            test_ndcg1: None,
            test_ndcg3: None,
            test_recall3: None,
            ler: stats.ler,
            epoch_seconds,
            sampling_seconds: stats.sampling_seconds,
        };
        if evaluate {
            if !val_eval.is_empty() {
                m.val_ndcg1 = Some(val_eval.evaluate(trainer.model(), ds, &[1]).ndcg(1));
            }
            if !test_eval.is_empty() {
                let r = test_eval.evaluate(trainer.model(), ds, &[1, 3]);
                m.test_ndcg1 = Some(r.ndcg(1));
                m.test_ndcg3 = Some(r.ndcg(3));
                m.test_recall3 = Some(r.recall(3));
            }
        }
        if let Some(v) = m.val_ndcg1 {
            if log.best_validation.is_none_or(|(_, b)| v > b) {
                log.best_validation = Some((epoch, v));
            }
        }
        on_epoch(&m);
        log.epochs.push(m);
        if let (Some(p), Some((best, _))) = (run.patience, log.best_validation) {
            if epoch - best >= p && epoch < run.epochs {
                log.stopped_early = true;
                log::info!("early stop at epoch {epoch}, best validation at {best}");
                break;
            }
        }
    }
    Ok((log, trainer.into_model()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub strategy: Strategy,
    pub memory_size: usize,
    pub expansion_size: usize,
    pub lazy_update: usize,
    pub epochs: usize,
    pub mean_epoch_seconds: f64,
    pub mean_sampling_seconds: f64,
}

/// Mean per-epoch wall-clock of each sampler variant on the same data and
/// model settings, without evaluation.
pub fn timing_profile(
    ds: &InteractionDataset,
    base: &RunConfig,
    variants: &[SamplerConfig],
    epochs: usize,
) -> Result<Vec<TimingRow>> {
    variants
        .iter()
        .map(|v| {
            let run = RunConfig {
                epochs,
                patience: None,
                eval_every: 0,
                sampler: v.clone(),
                ..base.clone()
            };
            let (log, _) = train(ds, &run, None)?;
            let n = log.epochs.len().max(1) as f64;
            Ok(TimingRow {
                strategy: v.strategy,
                memory_size: v.memory_size,
                expansion_size: v.expansion_size,
                lazy_update: v.lazy_update,
                epochs: log.epochs.len(),
                mean_epoch_seconds: log.epochs.iter().map(|e| e.epoch_seconds).sum::<f64>() / n,
                mean_sampling_seconds: log.epochs.iter().map(|e| e.sampling_seconds).sum::<f64>() / n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticConfig {
    pub difficulties: Vec<usize>,
    /// Tracked pairs per class for the std/mean statistic.
    pub pairs_per_class: usize,
    pub ccdf_points: usize,
    pub seed: u64,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        DiagnosticConfig {
            difficulties: vec![1, 4, 16, 64],
            pairs_per_class: 2000,
            ccdf_points: 101,
            seed: 0,
        }
    }
}

/// Diagnostics of a trained model against a false-negative set.
///
/// * LER of the difficulty-`D` sampler, one draw per training pair.
/// * CCDF of `P_pos` for uniform negatives.
/// * Std/mean of `P_pos` histories, for uniform negatives (`UN`), hard
///   negatives of each difficulty (`HN_D`) and false negatives (`FN`),
///   recorded while training continues `WINDOW` epochs with `run`.
///
/// `P_pos` is taken against the user's mean training-positive score.
pub fn diagnose(
    ds: &InteractionDataset,
    fns: &FalseNegativeSet,
    model: ModelState,
    run: &RunConfig,
    cfg: &DiagnosticConfig,
) -> Result<DiagnosticReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_STREAM);
    let users: Vec<UserIdx> = ds.train_pairs.iter().map(|&(u, _)| u).collect();

    let mut ler_by_difficulty = Vec::new();
    let mut hard_pairs: Vec<(usize, Vec<(UserIdx, ItemIdx)>)> = Vec::new();
    for &d in &cfg.difficulties {
        let picks: Vec<(UserIdx, ItemIdx)> = users
            .iter()
            .map(|&u| Ok((u, sample_hard_d(&model, u, &ds.positives[u as usize], d, &mut rng)?)))
            .collect::<Result<_>>()?;
        ler_by_difficulty.push((d, label_error_ratio(&picks, fns)));
        hard_pairs.push((d, subsample(&picks, cfg.pairs_per_class, &mut rng)));
    }
    let uniform: Vec<(UserIdx, ItemIdx)> = users
        .iter()
        .map(|&u| Ok((u, sample_uniform(u, ds.num_items, &ds.positives[u as usize], &mut rng)?)))
        .collect::<Result<_>>()?;

    let mean_pos = mean_positive_scores(&model, ds);
    let ppos_un = ppos_against_mean_positive(&model, &mean_pos, &uniform);
    let thresholds: Vec<f64> = (0..cfg.ccdf_points)
        .map(|k| k as f64 / (cfg.ccdf_points.max(2) - 1) as f64)
        .collect();
    let ccdf_rows = ccdf(&ppos_un, &thresholds);

    let fn_pairs: Vec<(UserIdx, ItemIdx)> = fns
        .per_user
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (u as UserIdx, i)))
        .collect();
    let mut classes: Vec<(String, Vec<(UserIdx, ItemIdx)>)> = vec![
        ("UN".to_string(), subsample(&uniform, cfg.pairs_per_class, &mut rng)),
        ("FN".to_string(), subsample(&fn_pairs, cfg.pairs_per_class, &mut rng)),
    ];
    for (d, pairs) in hard_pairs {
        classes.push((format!("HN_{d}"), pairs));
    }

    // Continue training and log P_pos of every tracked pair per epoch.
    let mut histories: Vec<Vec<Vec<f64>>> = classes.iter().map(|(_, p)| vec![Vec::new(); p.len()]).collect();
    let mut trainer = Trainer::with_model(ds, run, Some(fns), model)?;
    let mut ler_per_batch = Vec::new();
    for _ in 0..WINDOW {
        let stats = trainer.run_epoch()?;
        ler_per_batch.extend(stats.ler_per_batch);
        let mean_pos = mean_positive_scores(trainer.model(), ds);
        for (c, (_, pairs)) in classes.iter().enumerate() {
            let pp = ppos_against_mean_positive(trainer.model(), &mean_pos, pairs);
            for (h, v) in histories[c].iter_mut().zip(pp) {
                h.push(v);
            }
        }
    }
    let named: Vec<(String, Vec<Vec<f64>>)> = classes
        .iter()
        .map(|(n, _)| n.clone())
        .zip(histories)
        .collect();
    Ok(DiagnosticReport {
        ccdf: ccdf_rows,
        ler_per_batch,
        ler_by_difficulty,
        std_mean_by_class: std_mean_report(&named),
    })
}

/// The `HN_D` class whose median `P_pos` is closest to the `FN` class's.
pub fn matched_hard_class(report: &[ClassSummary]) -> Option<&ClassSummary> {
    let fn_p50 = report.iter().find(|c| c.class == "FN")?.median_ppos;
    report
        .iter()
        .filter(|c| c.class.starts_with("HN_"))
        .min_by(|a, b| {
            (a.median_ppos - fn_p50)
                .abs()
                .total_cmp(&(b.median_ppos - fn_p50).abs())
        })
}

fn subsample<T: Copy>(items: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if items.len() <= n {
        return items.to_vec();
    }
    rand::seq::index::sample(rng, items.len(), n)
        .into_iter()
        .map(|k| items[k])
        .collect()
}

/// Median `P_pos` of uniform negatives against the mean positive score;
/// about 0.5 for an untrained model.
pub fn median_uniform_ppos(model: &ModelState, ds: &InteractionDataset, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_pos = mean_positive_scores(model, ds);
    let mut vals = Vec::with_capacity(ds.train_pairs.len());
    for &(u, _) in &ds.train_pairs {
        let j = sample_uniform(u, ds.num_items, &ds.positives[u as usize], &mut rng)?;
        vals.push(sigmoid(model.score(u, j) - mean_pos[u as usize]));
    }
    Ok(median(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;

    fn small_run(strategy: Strategy) -> RunConfig {
        RunConfig {
            epochs: 3,
            patience: None,
            hyper: TrainHyper {
                batch_size: 16,
                ..TrainHyper::default()
            },
            sampler: SamplerConfig {
                strategy,
                memory_size: 4,
                expansion_size: 4,
                ..SamplerConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_embeddings() {
        let ds = synthetic(10, 40, 6, 3, 1);
        for strategy in [Strategy::Uniform, Strategy::Popularity, Strategy::RankBased, Strategy::Srns] {
            let mut run = small_run(strategy);
            run.epochs = 1;
            run.hyper.learning_rate = 0.0;
            let init = ModelState::init(ds.num_users, ds.num_items, &run.hyper, run.scorer, run.seed).unwrap();
            let (_, m) = train(&ds, &run, None).unwrap();
            assert_eq!(m.user_embeddings, init.user_embeddings);
            assert_eq!(m.item_embeddings, init.item_embeddings);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = synthetic(12, 50, 8, 3, 2);
        let run = small_run(Strategy::Srns);
        let strip = |l: RunLog| -> Vec<(f64, Option<f64>)> { l.epochs.iter().map(|e| (e.loss, e.test_ndcg3)).collect() };
        let a = train(&ds, &run, None).unwrap();
        let b = train(&ds, &run, None).unwrap();
        assert_eq!(strip(a.0), strip(b.0));
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let ds = synthetic(12, 50, 8, 3, 3);
        let ds = crate::data::split_leave_one_out(&ds).unwrap();
        let mut run = small_run(Strategy::Uniform);
        run.epochs = 60;
        run.patience = Some(2);
        run.hyper.learning_rate = 0.0;
        let (log, _) = train(&ds, &run, None).unwrap();
        let (best, _) = log.best_validation.unwrap();
        assert!(log.stopped_early);
        assert_eq!(log.epochs.len(), best + 2);
    }

    #[test]
    fn lazy_epochs_skip_scoring() {
        let ds = synthetic(12, 50, 8, 3, 4);
        let mut run = small_run(Strategy::Srns);
        run.sampler.lazy_update = 2;
        let (log, _) = train(&ds, &run, None).unwrap();
        assert_eq!(log.epochs.len(), 3);
    }
}
