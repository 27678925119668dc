//! Negative samplers.
//!
//! Baselines draw from a fixed or score-ranked distribution over a user's
//! non-interacted items. [`SrnsSampler`] keeps a small per-user memory of
//! candidate negatives. Each positive instance picks its negative from
//! memory by `P_pos + alpha_t * std[P_pos]`. The memory is then refreshed
//! by merging it with fresh uniform draws and keeping `S1` items sampled
//! without replacement from a temperature softmax over their scores.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::data::{FalseNegativeSet, InteractionDataset};
use crate::error::{Error, Result};
use crate::history::{ScoreHistory, WINDOW};
use crate::math::{population_std, sigmoid};
use crate::model::ModelState;
use crate::{ItemIdx, UserIdx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    Popularity,
    RankBased,
    Srns,
}

/// Warm-start shape of the variance weight `alpha_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Increased,
    Flat,
    Decreased,
}

/// How the memory sampler picks negatives on epochs that skip the memory
/// refresh (`lazy_update > 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LazyPick {
    /// Uniformly from the stale memory, no scoring.
    Uniform,
    /// Variance-based rule, with the latest epoch-end scores standing in for
    /// the current ones.
    StaleVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// `S1`.
    pub memory_size: usize,
    /// `S2`.
    pub expansion_size: usize,
    /// `tau` of the memory-refresh softmax.
    pub temperature: f64,
    pub alpha: f64,
    /// `T0`.
    pub warm_start: usize,
    pub schedule: Schedule,
    /// `E`: refresh memories every `E` epochs.
    pub lazy_update: usize,
    pub lazy_pick: LazyPick,
    /// `lambda` of the rank-based sampler.
    pub lambda_rank: f64,
    /// Scored pool for the rank-based sampler; 0 ranks every candidate.
    pub rank_pool: usize,
    /// `D` of the hard-negative analysis sampler.
    pub difficulty: usize,
    /// Per-user item pool for expansion draws and history logging. `None`
    /// tracks the whole catalogue.
    pub var_set_size: Option<usize>,
    /// Epochs between var-set regenerations.
    pub var_set_period: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: Strategy::Srns,
            memory_size: 20,
            expansion_size: 20,
            temperature: 1.0,
            alpha: 20.0,
            warm_start: 100,
            schedule: Schedule::Increased,
            lazy_update: 1,
            lazy_pick: LazyPick::Uniform,
            lambda_rank: 10.0,
            rank_pool: 500,
            difficulty: 1,
            var_set_size: None,
            var_set_period: WINDOW,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.memory_size == 0 {
            return bad("memory_size (S1) must be at least 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if self.warm_start == 0 {
            return bad("warm_start (T0) must be at least 1");
        }
        if self.lazy_update == 0 {
            return bad("lazy_update (E) must be at least 1");
        }
        if !(self.lambda_rank > 0.0) {
            return bad("lambda_rank must be positive");
        }
        if self.difficulty == 0 {
            return bad("difficulty (D) must be at least 1");
        }
        if let Some(n) = self.var_set_size {
            if n < self.memory_size + self.expansion_size {
                return bad("var_set_size must be at least S1 + S2");
            }
        }
        if self.var_set_period == 0 {
            return bad("var_set_period must be at least 1");
        }
        Ok(())
    }

    /// `alpha_t` at epoch `t`.
    pub fn alpha_at(&self, t: usize) -> f64 {
        alpha_at(self.schedule, self.alpha, self.warm_start, t)
    }

    /// Whether epoch `t` (1-based) refreshes memories.
    pub fn is_update_epoch(&self, t: usize) -> bool {
        (t.max(1) - 1) % self.lazy_update == 0
    }
}

pub fn alpha_at(schedule: Schedule, alpha: f64, warm_start: usize, t: usize) -> f64 {
    let ratio = t as f64 / warm_start as f64;
    match schedule {
        Schedule::Increased => alpha * ratio.min(1.0),
        Schedule::Flat => alpha,
        Schedule::Decreased => alpha * (1.0 - ratio).max(0.0),
    }
}

/// Items a user may receive as negatives: everything outside `positives`
/// and `excluded` (both sorted).
#[derive(Debug, Clone, Copy)]
pub struct CandidateSpace<'a> {
    pub num_items: usize,
    pub positives: &'a [ItemIdx],
    pub excluded: &'a [ItemIdx],
}

impl<'a> CandidateSpace<'a> {
    pub fn new(num_items: usize, positives: &'a [ItemIdx]) -> Self {
        CandidateSpace {
            num_items,
            positives,
            excluded: &[],
        }
    }

    pub fn excluding(mut self, excluded: &'a [ItemIdx]) -> Self {
        self.excluded = excluded;
        self
    }

    #[inline]
    pub fn allows(&self, item: ItemIdx) -> bool {
        (item as usize) < self.num_items
            && self.positives.binary_search(&item).is_err()
            && self.excluded.binary_search(&item).is_err()
    }

    pub fn count(&self) -> usize {
        let blocked = self.positives.len()
            + self
                .excluded
                .iter()
                .filter(|i| self.positives.binary_search(i).is_err())
                .count();
        self.num_items - blocked.min(self.num_items)
    }

    pub fn enumerate(&self) -> Vec<ItemIdx> {
        (0..self.num_items as ItemIdx).filter(|&i| self.allows(i)).collect()
    }

    /// Uniform draw by rejection, falling back to enumeration when the
    /// space is nearly exhausted.
    pub fn draw(&self, user: UserIdx, rng: &mut impl Rng) -> Result<ItemIdx> {
        for _ in 0..64 {
            let i = rng.random_range(0..self.num_items) as ItemIdx;
            if self.allows(i) {
                return Ok(i);
            }
        }
        let all = self.enumerate();
        if all.is_empty() {
            return Err(Error::NoCandidate { user });
        }
        Ok(all[rng.random_range(0..all.len())])
    }
}

/// Uniform over `{j not in R_u}`.
pub fn sample_uniform(
    user: UserIdx,
    num_items: usize,
    positives: &[ItemIdx],
    rng: &mut impl Rng,
) -> Result<ItemIdx> {
    CandidateSpace::new(num_items, positives).draw(user, rng)
}

/// `P(j) ∝ pop_j^0.75` over non-interacted items.
#[derive(Debug, Clone)]
pub struct PopularitySampler {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl PopularitySampler {
    pub fn new(popularity: &[u32]) -> Self {
        let weights: Vec<f64> = popularity.iter().map(|&p| (p as f64).powf(0.75)).collect();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        PopularitySampler { weights, cumulative }
    }

    pub fn sample(&self, user: UserIdx, positives: &[ItemIdx], rng: &mut impl Rng) -> Result<ItemIdx> {
        let space = CandidateSpace::new(self.weights.len(), positives);
        let total = *self.cumulative.last().unwrap_or(&0.0);
        if total > 0.0 {
            for _ in 0..64 {
                let x = rng.random::<f64>() * total;
                let i = self.cumulative.partition_point(|&c| c <= x).min(self.weights.len() - 1);
                if self.weights[i] > 0.0 && space.allows(i as ItemIdx) {
                    return Ok(i as ItemIdx);
                }
            }
        }
        // Exact fallback over this user's candidates.
        let cands = space.enumerate();
        if cands.is_empty() {
            return Err(Error::NoCandidate { user });
        }
        let mass: f64 = cands.iter().map(|&i| self.weights[i as usize]).sum();
        if mass <= 0.0 {
            return Ok(cands[rng.random_range(0..cands.len())]);
        }
        let mut x = rng.random::<f64>() * mass;
        for &i in &cands {
            x -= self.weights[i as usize];
            if x < 0.0 {
                return Ok(i);
            }
        }
        Ok(*cands
            .iter()
            .rev()
            .find(|&&i| self.weights[i as usize] > 0.0)
            .expect("positive mass"))
    }
}

/// Draws a 1-based rank `n` in `1..=len` with `P(n) ∝ exp(-n / lambda)`,
/// returned 0-based.
pub fn draw_rank(len: usize, lambda: f64, rng: &mut impl Rng) -> usize {
    if len <= 1 {
        return 0;
    }
    let q = (-1.0 / lambda).exp();
    if 1.0 - q < 1e-12 {
        return rng.random_range(0..len);
    }
    // Inverse CDF of a geometric law truncated to `len` outcomes.
    let u: f64 = rng.random();
    let tail = q.powi(len as i32);
    let n = ((1.0 - u * (1.0 - tail)).ln() / q.ln()).floor() as usize;
    n.min(len - 1)
}

/// Sorts candidates by descending score, ties by ascending item index.
fn rank_desc(scored: &mut [(f64, ItemIdx)]) {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

/// Rank-based adaptive sampler: score a pool of candidates, rank them, and
/// pick rank `n` with probability `∝ exp(-n / lambda)`.
pub fn sample_rank_based(
    model: &ModelState,
    user: UserIdx,
    positives: &[ItemIdx],
    lambda: f64,
    pool_size: usize,
    rng: &mut impl Rng,
) -> Result<ItemIdx> {
    let space = CandidateSpace::new(model.num_items, positives);
    let available = space.count();
    if available == 0 {
        return Err(Error::NoCandidate { user });
    }
    let pool: Vec<ItemIdx> = if pool_size == 0 || available <= pool_size {
        space.enumerate()
    } else {
        let mut seen = std::collections::HashSet::with_capacity(pool_size);
        let mut pool = Vec::with_capacity(pool_size);
        while pool.len() < pool_size {
            let i = space.draw(user, rng)?;
            if seen.insert(i) {
                pool.push(i);
            }
        }
        pool
    };
    let mut scorer = model.user_scorer(user);
    let mut scored: Vec<(f64, ItemIdx)> = pool.iter().map(|&i| (scorer.score(i), i)).collect();
    rank_desc(&mut scored);
    Ok(scored[draw_rank(scored.len(), lambda, rng)].1)
}

/// Hard negative of difficulty `D`: the highest-scoring of `D` uniform
/// draws (with replacement). When `D` covers the whole candidate space the
/// global argmax is returned.
pub fn sample_hard_d(
    model: &ModelState,
    user: UserIdx,
    positives: &[ItemIdx],
    difficulty: usize,
    rng: &mut impl Rng,
) -> Result<ItemIdx> {
    let space = CandidateSpace::new(model.num_items, positives);
    let mut scorer = model.user_scorer(user);
    let better = |a: (f64, ItemIdx), b: (f64, ItemIdx)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1);
    if difficulty >= space.count() {
        let cands = space.enumerate();
        let mut best: Option<(f64, ItemIdx)> = None;
        for i in cands {
            let s = (scorer.score(i), i);
            if best.is_none_or(|b| better(s, b)) {
                best = Some(s);
            }
        }
        return best.map(|b| b.1).ok_or(Error::NoCandidate { user });
    }
    let mut best: Option<(f64, ItemIdx)> = None;
    for _ in 0..difficulty.max(1) {
        let i = space.draw(user, rng)?;
        let s = (scorer.score(i), i);
        if best.is_none_or(|b| better(s, b)) {
            best = Some(s);
        }
    }
    Ok(best.expect("at least one draw").1)
}

/// Samples `k` distinct indices with successive-draw probabilities
/// `exp(s/tau) / sum exp(s'/tau)` over the not-yet-drawn entries, in draw
/// order. Each entry races an exponential clock of rate `exp(s/tau)`; the
/// first `k` to fire realise exactly this law.
pub fn softmax_sample_without_replacement(
    scores: &[f64],
    tau: f64,
    k: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut keys: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(idx, &s)| {
            let e: f64 = Exp1.sample(rng);
            (e * ((top - s) / tau).exp(), idx)
        })
        .collect();
    let k = k.min(keys.len());
    if k < keys.len() {
        keys.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0));
        keys.truncate(k);
    }
    keys.sort_by(|a, b| a.0.total_cmp(&b.0));
    keys.into_iter().map(|(_, idx)| idx).collect()
}

/// Population std over a history of at most [`WINDOW`] values.
pub fn std_over_window(history: &[f64]) -> f64 {
    population_std(history)
}

/// `argmax_k ppos[k] + alpha_t * std[k]`, ties to the lowest index.
pub fn variance_select(current_ppos: &[f64], stds: &[f64], alpha_t: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &p) in current_ppos.iter().enumerate() {
        let v = if alpha_t == 0.0 { p } else { p + alpha_t * stds[k] };
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Candidate negatives cached for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMemory {
    pub candidates: Vec<ItemIdx>,
    /// When set, the last candidate is the injected false negative.
    pub noise_slot: bool,
}

impl UserMemory {
    pub fn regular(&self) -> &[ItemIdx] {
        let n = self.candidates.len() - usize::from(self.noise_slot);
        &self.candidates[..n]
    }
}

/// Per-user item pools for pruned history tracking. Expansion draws come
/// from `active`, which has been logged for a full window; `pending` is
/// being logged to replace it.
#[derive(Debug, Clone)]
struct VarSets {
    size: usize,
    active: Vec<Vec<ItemIdx>>,
    pending: Vec<Vec<ItemIdx>>,
}

/// Reusable per-call buffers.
#[derive(Debug, Default)]
pub struct SelectScratch {
    /// Current scores of the memory candidates, reused by the refresh.
    pub cand_scores: Vec<f64>,
    ppos: Vec<f64>,
    stds: Vec<f64>,
    pool: Vec<ItemIdx>,
    pool_scores: Vec<f64>,
    stamp: Vec<u32>,
    stamp_gen: u32,
}

/// Memory-based sampler with variance-aware selection.
#[derive(Debug)]
pub struct SrnsSampler {
    config: SamplerConfig,
    num_items: usize,
    memories: Vec<UserMemory>,
    history: ScoreHistory,
    var_sets: Option<VarSets>,
    /// Sorted active false negatives per user, when noise injection is on.
    noise: Option<Vec<Vec<ItemIdx>>>,
    positives: Vec<Vec<ItemIdx>>,
}

impl SrnsSampler {
    pub fn new(
        ds: &InteractionDataset,
        config: &SamplerConfig,
        noise: Option<&FalseNegativeSet>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let noise = noise.map(|f| f.active_per_user.clone());
        let empty: Vec<ItemIdx> = Vec::new();
        let mut var_sets = None;
        if let Some(size) = config.var_set_size {
            let draw_sets = |rng: &mut ChaCha8Rng| -> Result<Vec<Vec<ItemIdx>>> {
                (0..ds.num_users)
                    .map(|u| {
                        let excl = noise.as_ref().map_or(&empty, |n| &n[u]);
                        let space = CandidateSpace::new(ds.num_items, &ds.positives[u]).excluding(excl);
                        distinct_draws(space, u as UserIdx, size, rng)
                    })
                    .collect()
            };
            let active = draw_sets(rng)?;
            let pending = draw_sets(rng)?;
            var_sets = Some(VarSets { size, active, pending });
        }

        let mut memories = Vec::with_capacity(ds.num_users);
        for u in 0..ds.num_users {
            let user = u as UserIdx;
            let active_fn = noise.as_ref().map_or(&empty, |n| &n[u]);
            let has_noise = !active_fn.is_empty();
            let regular_len = config.memory_size - usize::from(has_noise);
            let mut candidates = match &var_sets {
                Some(vs) => {
                    let mut c = Vec::with_capacity(regular_len);
                    let mut seen = std::collections::HashSet::new();
                    let pool = &vs.active[u];
                    for _ in 0..regular_len * 8 {
                        if c.len() == regular_len {
                            break;
                        }
                        let i = pool[rng.random_range(0..pool.len())];
                        if seen.insert(i) {
                            c.push(i);
                        }
                    }
                    c
                }
                None => Vec::new(),
            };
            let space = CandidateSpace::new(ds.num_items, &ds.positives[u]).excluding(active_fn);
            if space.count() < regular_len {
                return Err(Error::NoCandidate { user });
            }
            // Fill (or top up) with distinct uniform draws.
            let mut seen: std::collections::HashSet<ItemIdx> = candidates.iter().copied().collect();
            while candidates.len() < regular_len {
                let i = space.draw(user, rng)?;
                if seen.insert(i) {
                    candidates.push(i);
                }
            }
            if has_noise {
                candidates.push(active_fn[rng.random_range(0..active_fn.len())]);
            }
            memories.push(UserMemory {
                candidates,
                noise_slot: has_noise,
            });
        }

        let history = match &var_sets {
            None => ScoreHistory::full(ds.num_users, ds.num_items),
            Some(vs) => ScoreHistory::tracked(
                ds.num_items,
                (0..ds.num_users)
                    .map(|u| tracked_set(&ds.positives[u], &vs.active[u], &vs.pending[u], &memories[u]))
                    .collect(),
            ),
        };

        Ok(SrnsSampler {
            config: config.clone(),
            num_items: ds.num_items,
            memories,
            history,
            var_sets,
            noise,
            positives: ds.positives.clone(),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn memory(&self, u: UserIdx) -> &UserMemory {
        &self.memories[u as usize]
    }

    pub fn history(&self) -> &ScoreHistory {
        &self.history
    }

    pub fn new_scratch(&self) -> SelectScratch {
        SelectScratch {
            stamp: vec![0; self.num_items],
            ..SelectScratch::default()
        }
    }

    /// Population std of `[P_pos(k|u,i)]` over the recorded window.
    pub fn ppos_std(&self, u: UserIdx, k: ItemIdx, i: ItemIdx) -> f64 {
        let mut buf = [0.0; WINDOW];
        let n = self.history.ppos_history(u, k, i, &mut buf);
        std_over_window(&buf[..n])
    }

    /// Variance-based selection from `u`'s memory for positive `i`. Leaves
    /// the candidates' current scores in `scratch.cand_scores`.
    pub fn select(
        &self,
        model: &ModelState,
        u: UserIdx,
        i: ItemIdx,
        alpha_t: f64,
        scratch: &mut SelectScratch,
    ) -> Result<ItemIdx> {
        let mem = &self.memories[u as usize];
        if mem.candidates.is_empty() {
            return Err(Error::NoCandidate { user: u });
        }
        let mut scorer = model.user_scorer(u);
        let r_ui = scorer.score(i);
        scratch.cand_scores.clear();
        scratch.ppos.clear();
        scratch.stds.clear();
        for &k in &mem.candidates {
            let r_uk = scorer.score(k);
            scratch.cand_scores.push(r_uk);
            scratch.ppos.push(sigmoid(r_uk - r_ui));
            if alpha_t != 0.0 {
                scratch.stds.push(self.ppos_std(u, k, i));
            }
        }
        let idx = variance_select(&scratch.ppos, &scratch.stds, alpha_t).expect("non-empty memory");
        Ok(mem.candidates[idx])
    }

    /// Selection on a lazy (non-refresh) epoch.
    pub fn select_stale(
        &self,
        u: UserIdx,
        i: ItemIdx,
        alpha_t: f64,
        rng: &mut impl Rng,
        scratch: &mut SelectScratch,
    ) -> Result<ItemIdx> {
        let mem = &self.memories[u as usize];
        if mem.candidates.is_empty() {
            return Err(Error::NoCandidate { user: u });
        }
        match self.config.lazy_pick {
            LazyPick::Uniform => Ok(mem.candidates[rng.random_range(0..mem.candidates.len())]),
            LazyPick::StaleVariance => {
                let r_ui = self.history.latest(u, i).unwrap_or(0.0);
                scratch.ppos.clear();
                scratch.stds.clear();
                for &k in &mem.candidates {
                    let r_uk = self.history.latest(u, k).unwrap_or(0.0);
                    scratch.ppos.push(sigmoid(r_uk - r_ui));
                    if alpha_t != 0.0 {
                        scratch.stds.push(self.ppos_std(u, k, i));
                    }
                }
                let idx = variance_select(&scratch.ppos, &scratch.stds, alpha_t).expect("non-empty");
                Ok(mem.candidates[idx])
            }
        }
    }

    /// Refreshes `u`'s memory. `scratch.cand_scores` must hold the current
    /// scores of the memory candidates (as left by [`SrnsSampler::select`]).
    pub fn update_memory(
        &mut self,
        model: &ModelState,
        u: UserIdx,
        rng: &mut impl Rng,
        scratch: &mut SelectScratch,
    ) -> Result<()> {
        let ui = u as usize;
        let empty: [ItemIdx; 0] = [];
        let active_fn: &[ItemIdx] = self.noise.as_ref().map_or(&empty[..], |n| &n[ui]);
        let space = CandidateSpace::new(self.num_items, &self.positives[ui]).excluding(active_fn);
        let mem = &self.memories[ui];
        let regular_len = mem.regular().len();

        scratch.stamp_gen = scratch.stamp_gen.wrapping_add(1);
        if scratch.stamp_gen == 0 {
            scratch.stamp.fill(0);
            scratch.stamp_gen = 1;
        }
        let generation = scratch.stamp_gen;
        scratch.pool.clear();
        scratch.pool_scores.clear();
        for (k, &item) in mem.regular().iter().enumerate() {
            if scratch.stamp[item as usize] != generation {
                scratch.stamp[item as usize] = generation;
                scratch.pool.push(item);
                scratch.pool_scores.push(scratch.cand_scores[k]);
            }
        }
        let mut scorer = model.user_scorer(u);
        let mut push = |item: ItemIdx, scratch: &mut SelectScratch| {
            if scratch.stamp[item as usize] != generation {
                scratch.stamp[item as usize] = generation;
                scratch.pool.push(item);
                scratch.pool_scores.push(scorer.score(item));
            }
        };
        match &self.var_sets {
            Some(vs) => {
                let pool = &vs.active[ui];
                for _ in 0..self.config.expansion_size {
                    let item = pool[rng.random_range(0..pool.len())];
                    push(item, scratch);
                }
            }
            None => {
                for _ in 0..self.config.expansion_size {
                    let item = space.draw(u, rng)?;
                    push(item, scratch);
                }
            }
        }
        // Duplicates can leave the pool short of S1; pad with fresh draws.
        if scratch.pool.len() < regular_len {
            if space.count() < regular_len {
                return Err(Error::NoCandidate { user: u });
            }
            while scratch.pool.len() < regular_len {
                let item = space.draw(u, rng)?;
                push(item, scratch);
            }
        }

        let picked = softmax_sample_without_replacement(
            &scratch.pool_scores,
            self.config.temperature,
            regular_len,
            rng,
        );
        let noise_slot = mem.noise_slot;
        let mut candidates: Vec<ItemIdx> = picked.iter().map(|&k| scratch.pool[k]).collect();
        if noise_slot {
            candidates.push(active_fn[rng.random_range(0..active_fn.len())]);
        }
        self.memories[ui].candidates = candidates;
        Ok(())
    }

    /// Epoch-end bookkeeping: log scores for the variance window and, with
    /// pruning, rotate var-sets on period boundaries.
    pub fn end_epoch(&mut self, model: &ModelState, epoch: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        self.history.record_epoch(model);
        let period = self.config.var_set_period;
        if let Some(vs) = self.var_sets.as_mut() {
            if epoch % period == 0 {
                let empty: Vec<ItemIdx> = Vec::new();
                for u in 0..self.memories.len() {
                    let excl = self.noise.as_ref().map_or(&empty, |n| &n[u]);
                    let space = CandidateSpace::new(self.num_items, &self.positives[u]).excluding(excl);
                    let fresh = distinct_draws(space, u as UserIdx, vs.size, rng)?;
                    vs.active[u] = std::mem::replace(&mut vs.pending[u], fresh);
                    let tracked = tracked_set(&self.positives[u], &vs.active[u], &vs.pending[u], &self.memories[u]);
                    self.history.retrack(u as UserIdx, tracked);
                }
            }
        }
        Ok(())
    }

    /// One JSON object per user: memory candidates and their score windows.
    pub fn dump_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            user: UserIdx,
            candidates: &'a [ItemIdx],
            noise_slot: bool,
            histories: Vec<Vec<f64>>,
            positive_histories: Vec<Vec<f64>>,
        }
        for (u, mem) in self.memories.iter().enumerate() {
            let user = u as UserIdx;
            let line = Line {
                user,
                candidates: &mem.candidates,
                noise_slot: mem.noise_slot,
                histories: mem.candidates.iter().map(|&k| self.history.scores(user, k)).collect(),
                positive_histories: self.positives[u].iter().map(|&i| self.history.scores(user, i)).collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn tracked_set(
    positives: &[ItemIdx],
    active: &[ItemIdx],
    pending: &[ItemIdx],
    memory: &UserMemory,
) -> Vec<ItemIdx> {
    let mut items: Vec<ItemIdx> = positives
        .iter()
        .chain(active)
        .chain(pending)
        .chain(&memory.candidates)
        .copied()
        .collect();
    items.sort_unstable();
    items.dedup();
    items
}

fn distinct_draws(space: CandidateSpace<'_>, user: UserIdx, n: usize, rng: &mut impl Rng) -> Result<Vec<ItemIdx>> {
    let available = space.count();
    if available <= n {
        return Ok(space.enumerate());
    }
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let i = space.draw(user, rng)?;
        if seen.insert(i) {
            out.push(i);
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScorerKind, TrainHyper};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn alpha_schedules() {
        assert_eq!(alpha_at(Schedule::Increased, 5.0, 50, 25), 2.5);
        assert_eq!(alpha_at(Schedule::Increased, 5.0, 50, 50), 5.0);
        assert_eq!(alpha_at(Schedule::Increased, 5.0, 50, 400), 5.0);
        assert_eq!(alpha_at(Schedule::Flat, 5.0, 50, 3), 5.0);
        assert_eq!(alpha_at(Schedule::Decreased, 5.0, 50, 75), 0.0);
        assert_eq!(alpha_at(Schedule::Decreased, 5.0, 50, 0), 5.0);
    }

    #[test]
    fn uniform_sampler_frequencies() {
        let mut r = rng(1);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[sample_uniform(0, 3, &[0], &mut r).unwrap() as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((*c as f64 / 1e4 - 0.5).abs() < 0.02);
        }
        assert!(matches!(sample_uniform(7, 2, &[0, 1], &mut r), Err(Error::NoCandidate { user: 7 })));
    }

    #[test]
    fn popularity_sampler_ratio() {
        let s = PopularitySampler::new(&[16, 1, 5]);
        let mut r = rng(2);
        let mut c0 = 0;
        for _ in 0..10_000 {
            let i = s.sample(0, &[2], &mut r).unwrap();
            assert_ne!(i, 2);
            if i == 0 {
                c0 += 1;
            }
        }
        // 16^0.75 : 1 = 8 : 1
        assert!((c0 as f64 / 1e4 - 8.0 / 9.0).abs() < 0.02);
        let single = PopularitySampler::new(&[3, 4]);
        assert_eq!(single.sample(0, &[0], &mut r).unwrap(), 1);
        let zeros = PopularitySampler::new(&[0, 0, 0]);
        assert!(zeros.sample(0, &[1], &mut r).unwrap() != 1);
        assert!(zeros.sample(0, &[0, 1, 2], &mut r).is_err());
    }

    #[test]
    fn rank_draw_probabilities() {
        let mut r = rng(3);
        let mut top = 0;
        for _ in 0..10_000 {
            if draw_rank(3, 1.0, &mut r) == 0 {
                top += 1;
            }
        }
        let e = |x: f64| (-x).exp();
        let p = e(1.0) / (e(1.0) + e(2.0) + e(3.0));
        assert!((top as f64 / 1e4 - p).abs() < 0.03);
        assert_eq!(draw_rank(1, 1.0, &mut r), 0);
        // Effectively infinite lambda is uniform over ranks.
        let mut counts = [0; 4];
        for _ in 0..8000 {
            counts[draw_rank(4, 1e15, &mut r)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 8000.0 - 0.25).abs() < 0.03);
        }
    }

    fn scored_model(scores: &[f64]) -> ModelState {
        let hyper = TrainHyper {
            embedding_dim: 1,
            ..TrainHyper::default()
        };
        let mut m = ModelState::init(1, scores.len(), &hyper, ScorerKind::Gmf, 0).unwrap();
        m.user_embeddings = vec![1.0];
        m.scorer_params = vec![1.0];
        m.item_embeddings = scores.to_vec();
        m
    }

    #[test]
    fn rank_based_picks_top_item_most() {
        let m = scored_model(&[0.1, 3.0, 2.0, 1.0]);
        let mut r = rng(4);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_rank_based(&m, 0, &[0], 1.0, 500, &mut r).unwrap() as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        assert!((counts[1] as f64 / 1e4 - 0.665).abs() < 0.03);
        let single = scored_model(&[0.0, 1.0]);
        assert_eq!(sample_rank_based(&single, 0, &[0], 1.0, 500, &mut r).unwrap(), 1);
    }

    #[test]
    fn hard_negative_difficulty() {
        let m = scored_model(&[3.0, 2.0, 1.0]);
        let mut r = rng(5);
        let mut c0 = 0;
        for _ in 0..10_000 {
            if sample_hard_d(&m, 0, &[], 2, &mut r).unwrap() == 0 {
                c0 += 1;
            }
        }
        assert!((c0 as f64 / 1e4 - 5.0 / 9.0).abs() < 0.03);
        assert_eq!(sample_hard_d(&m, 0, &[], 3, &mut r).unwrap(), 0);
        assert_eq!(sample_hard_d(&m, 0, &[0], 100, &mut r).unwrap(), 1);
    }

    #[test]
    fn softmax_sampling_examples() {
        let mut r = rng(6);
        let mut first = 0;
        for _ in 0..10_000 {
            if softmax_sample_without_replacement(&[0.7, 0.7], 1.0, 1, &mut r)[0] == 0 {
                first += 1;
            }
        }
        assert!((first as f64 / 1e4 - 0.5).abs() < 0.02);
        let mut first = 0;
        for _ in 0..10_000 {
            if softmax_sample_without_replacement(&[2f64.ln(), 0.0], 1.0, 1, &mut r)[0] == 0 {
                first += 1;
            }
        }
        assert!((first as f64 / 1e4 - 2.0 / 3.0).abs() < 0.02);
        let mut hits = 0;
        for _ in 0..10_000 {
            if softmax_sample_without_replacement(&[0.1, 0.5, 0.3], 0.01, 1, &mut r)[0] == 1 {
                hits += 1;
            }
        }
        assert!(hits as f64 / 1e4 >= 0.999);
        let all = softmax_sample_without_replacement(&[1.0, 2.0, 3.0, 4.0], 1.0, 4, &mut r);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn std_window_examples() {
        assert_eq!(std_over_window(&[0.4; 5]), 0.0);
        assert!((std_over_window(&[0.0, 1.0, 0.0, 1.0, 0.0]) - 0.24f64.sqrt()).abs() < 1e-15);
        assert_eq!(std_over_window(&[0.7]), 0.0);
    }

    #[test]
    fn variance_select_examples() {
        assert_eq!(variance_select(&[0.9, 0.2, 0.5], &[0.0; 3], 0.0), Some(0));
        assert_eq!(variance_select(&[0.9, 0.8], &[0.0, 0.1], 5.0), Some(1));
        assert_eq!(variance_select(&[0.3], &[0.2], 100.0), Some(0));
        assert_eq!(variance_select(&[0.5, 0.5], &[0.1, 0.1], 1.0), Some(0));
        assert_eq!(variance_select(&[], &[], 1.0), None);
    }

    fn toy() -> InteractionDataset {
        let pairs: Vec<(UserIdx, ItemIdx)> = vec![(0, 0), (0, 1), (1, 2), (1, 3), (1, 4)];
        InteractionDataset::from_pairs(2, 30, &pairs, None, vec![vec![5, 6, 7], vec![8]]).unwrap()
    }

    #[test]
    fn memory_never_holds_positives() {
        let ds = toy();
        let cfg = SamplerConfig {
            memory_size: 6,
            expansion_size: 6,
            ..SamplerConfig::default()
        };
        let mut r = rng(7);
        let mut s = SrnsSampler::new(&ds, &cfg, None, &mut r).unwrap();
        let hyper = TrainHyper {
            embedding_dim: 2,
            ..TrainHyper::default()
        };
        let m = ModelState::init(2, 30, &hyper, ScorerKind::Gmf, 1).unwrap();
        let mut scratch = s.new_scratch();
        for step in 0..200 {
            let u = (step % 2) as UserIdx;
            let i = ds.positives[u as usize][0];
            let j = s.select(&m, u, i, 1.0, &mut scratch).unwrap();
            assert!(!ds.is_positive(u, j));
            s.update_memory(&m, u, &mut r, &mut scratch).unwrap();
            let mem = s.memory(u);
            assert_eq!(mem.candidates.len(), 6);
            let mut c = mem.candidates.clone();
            c.sort_unstable();
            c.dedup();
            assert_eq!(c.len(), 6);
            assert!(mem.candidates.iter().all(|&k| !ds.is_positive(u, k)));
        }
    }

    #[test]
    fn noise_slot_invariant() {
        let ds = toy();
        let fns = FalseNegativeSet {
            per_user: vec![vec![5, 6, 7], vec![8]],
            sigma: 1.0,
            active_per_user: vec![vec![5, 6], vec![]],
        };
        let cfg = SamplerConfig {
            memory_size: 4,
            expansion_size: 10,
            ..SamplerConfig::default()
        };
        let mut r = rng(8);
        let mut s = SrnsSampler::new(&ds, &cfg, Some(&fns), &mut r).unwrap();
        let hyper = TrainHyper {
            embedding_dim: 2,
            ..TrainHyper::default()
        };
        let m = ModelState::init(2, 30, &hyper, ScorerKind::Gmf, 1).unwrap();
        let mut scratch = s.new_scratch();
        for _ in 0..100 {
            for u in 0..2u32 {
                s.select(&m, u, ds.positives[u as usize][0], 0.0, &mut scratch).unwrap();
                s.update_memory(&m, u, &mut r, &mut scratch).unwrap();
            }
            let m0 = s.memory(0);
            assert!(m0.noise_slot);
            let in_fn = m0.candidates.iter().filter(|k| [5, 6].contains(*k)).count();
            assert_eq!(in_fn, 1);
            assert!([5, 6].contains(m0.candidates.last().unwrap()));
            assert_eq!(m0.candidates.len(), 4);
            let m1 = s.memory(1);
            assert!(!m1.noise_slot);
            assert_eq!(m1.candidates.len(), 4);
        }
    }

    #[test]
    fn memory_larger_than_space_is_rejected() {
        let ds = toy();
        let cfg = SamplerConfig {
            memory_size: 29,
            ..SamplerConfig::default()
        };
        assert!(matches!(
            SrnsSampler::new(&ds, &cfg, None, &mut rng(9)),
            Err(Error::NoCandidate { .. })
        ));
    }

    #[test]
    fn pruned_var_sets_feed_memory() {
        let ds = toy();
        let cfg = SamplerConfig {
            memory_size: 3,
            expansion_size: 3,
            var_set_size: Some(8),
            ..SamplerConfig::default()
        };
        let mut r = rng(10);
        let mut s = SrnsSampler::new(&ds, &cfg, None, &mut r).unwrap();
        let hyper = TrainHyper {
            embedding_dim: 2,
            ..TrainHyper::default()
        };
        let m = ModelState::init(2, 30, &hyper, ScorerKind::Gmf, 1).unwrap();
        let mut scratch = s.new_scratch();
        for epoch in 1..=12 {
            for u in 0..2u32 {
                s.select(&m, u, ds.positives[u as usize][0], 1.0, &mut scratch).unwrap();
                s.update_memory(&m, u, &mut r, &mut scratch).unwrap();
                for &k in &s.memory(u).candidates {
                    assert!(s.history().is_tracked(u, k));
                }
            }
            s.end_epoch(&m, epoch, &mut r).unwrap();
        }
        let mut out = Vec::new();
        s.dump_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["candidates"].as_array().unwrap().len(), 3);
    }
}
