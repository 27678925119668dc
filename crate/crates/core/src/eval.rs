//! Ranking metrics and diagnostic statistics.
//!
//! NDCG@k follows the unnormalised form `sum 1/log2(p + 1)` over hits in
//! the top `k`; with one held-out item per user it coincides with the
//! usual normalised NDCG, with several it can exceed 1.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{FalseNegativeSet, InteractionDataset};
use crate::error::{Error, Result};
use crate::math::{mean, median, population_std, sigmoid};
use crate::model::ModelState;
use crate::sampler::CandidateSpace;
use crate::{ItemIdx, UserIdx};

pub const SAMPLED_LIST_LEN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Rank every item the user has not interacted with in training.
    Full,
    /// Rank the held-out items against uniformly drawn non-interacted items,
    /// 100 in total.
    Sampled100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: UserIdx,
    pub items: Vec<ItemIdx>,
    /// Sorted.
    pub ground_truth: Vec<ItemIdx>,
}

/// Orders `(score, item)` by descending score, then ascending item.
#[inline]
fn ranks_before(a: (f64, ItemIdx), b: (f64, ItemIdx)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn sort_ranked(scored: &mut [(f64, ItemIdx)]) {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

fn held_out(ds: &InteractionDataset, u: usize, split: Split) -> Vec<ItemIdx> {
    match split {
        Split::Test => ds.test[u].clone(),
        Split::Validation => ds
            .validation
            .as_ref()
            .and_then(|v| v[u])
            .into_iter()
            .collect(),
    }
}

/// Held-out items of the other split, kept out of this split's ranking.
fn other_held_out(ds: &InteractionDataset, u: usize, split: Split) -> Vec<ItemIdx> {
    let other = match split {
        Split::Test => Split::Validation,
        Split::Validation => Split::Test,
    };
    let mut items = held_out(ds, u, other);
    let gt = held_out(ds, u, split);
    items.retain(|i| gt.binary_search(i).is_err());
    items.sort_unstable();
    items
}

fn sample_candidates(
    ds: &InteractionDataset,
    u: usize,
    ground_truth: &[ItemIdx],
    rng: &mut impl Rng,
) -> Result<Vec<ItemIdx>> {
    let user = u as UserIdx;
    let need = SAMPLED_LIST_LEN.saturating_sub(ground_truth.len());
    let mut excluded: Vec<ItemIdx> = ground_truth.to_vec();
    excluded.extend(held_out(ds, u, Split::Validation));
    excluded.extend(held_out(ds, u, Split::Test));
    excluded.sort_unstable();
    excluded.dedup();
    let space = CandidateSpace::new(ds.num_items, &ds.positives[u]).excluding(&excluded);
    if space.count() < need {
        return Err(Error::Protocol(format!(
            "user {u} has {} candidate items, sampled protocol needs {need}",
            space.count()
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(need);
    let mut out: Vec<ItemIdx> = ground_truth.to_vec();
    while out.len() < ground_truth.len() + need {
        let i = space.draw(user, rng)?;
        if seen.insert(i) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Ranked list for `u` against its test items.
pub fn build_ranked_list(
    model: &ModelState,
    ds: &InteractionDataset,
    u: UserIdx,
    protocol: Protocol,
    rng: &mut impl Rng,
) -> Result<RankedList> {
    let ui = u as usize;
    let ground_truth = ds.test[ui].clone();
    if ground_truth.is_empty() {
        return Err(Error::Protocol(format!("user {u} has no test items")));
    }
    let candidates = match protocol {
        Protocol::Full => {
            let excl = other_held_out(ds, ui, Split::Test);
            CandidateSpace::new(ds.num_items, &ds.positives[ui])
                .excluding(&excl)
                .enumerate()
        }
        Protocol::Sampled100 => sample_candidates(ds, ui, &ground_truth, rng)?,
    };
    let mut scorer = model.user_scorer(u);
    let mut scored: Vec<(f64, ItemIdx)> = candidates.iter().map(|&i| (scorer.score(i), i)).collect();
    sort_ranked(&mut scored);
    Ok(RankedList {
        user: u,
        items: scored.into_iter().map(|(_, i)| i).collect(),
        ground_truth,
    })
}

/// `|S_u(k) ∩ G_u| / |G_u|`.
pub fn recall_at_k(list: &RankedList, k: usize) -> f64 {
    if list.ground_truth.is_empty() {
        return 0.0;
    }
    let hits = list
        .items
        .iter()
        .take(k)
        .filter(|i| list.ground_truth.binary_search(i).is_ok())
        .count();
    hits as f64 / list.ground_truth.len() as f64
}

/// `sum over hits at 1-based rank p <= k of 1 / log2(p + 1)`.
pub fn ndcg_at_k(list: &RankedList, k: usize) -> f64 {
    list.items
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| list.ground_truth.binary_search(i).is_ok())
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum()
}

/// Mean metrics over evaluated users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub users: usize,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl RankingMetrics {
    fn position(&self, k: usize) -> usize {
        self.ks
            .iter()
            .position(|&x| x == k)
            .unwrap_or_else(|| panic!("k={k} was not evaluated"))
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.recall[self.position(k)]
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.ndcg[self.position(k)]
    }
}

struct EvalUser {
    user: UserIdx,
    ground_truth: Vec<ItemIdx>,
    /// Full protocol: extra items kept out of the ranking. Sampled: the
    /// fixed candidate list.
    items: Vec<ItemIdx>,
}

/// Reusable evaluation over one split. Sampled candidates are drawn once
/// at construction, so every epoch ranks the same lists.
pub struct Evaluator {
    protocol: Protocol,
    users: Vec<EvalUser>,
}

impl Evaluator {
    pub fn new(ds: &InteractionDataset, split: Split, protocol: Protocol, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
        let mut users = Vec::new();
        for u in 0..ds.num_users {
            let ground_truth = held_out(ds, u, split);
            if ground_truth.is_empty() {
                continue;
            }
            let items = match protocol {
                Protocol::Full => other_held_out(ds, u, split),
                Protocol::Sampled100 => sample_candidates(ds, u, &ground_truth, &mut rng)?,
            };
            users.push(EvalUser {
                user: u as UserIdx,
                ground_truth,
                items,
            });
        }
        Ok(Evaluator { protocol, users })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Top `max_k` items of one user, in rank order.
    fn top_k(&self, model: &ModelState, ds: &InteractionDataset, eu: &EvalUser, max_k: usize) -> Vec<ItemIdx> {
        let mut top: Vec<(f64, ItemIdx)> = Vec::with_capacity(max_k + 1);
        let mut offer = |s: f64, i: ItemIdx| {
            if top.len() == max_k && !ranks_before((s, i), top[max_k - 1]) {
                return;
            }
            let pos = top.iter().position(|&t| ranks_before((s, i), t)).unwrap_or(top.len());
            top.insert(pos, (s, i));
            top.truncate(max_k);
        };
        let mut scorer = model.user_scorer(eu.user);
        match self.protocol {
            Protocol::Full => {
                let space = CandidateSpace::new(ds.num_items, &ds.positives[eu.user as usize]).excluding(&eu.items);
                for i in 0..ds.num_items as ItemIdx {
                    if space.allows(i) {
                        offer(scorer.score(i), i);
                    }
                }
            }
            Protocol::Sampled100 => {
                for &i in &eu.items {
                    offer(scorer.score(i), i);
                }
            }
        }
        top.into_iter().map(|(_, i)| i).collect()
    }

    pub fn evaluate(&self, model: &ModelState, ds: &InteractionDataset, ks: &[usize]) -> RankingMetrics {
        let max_k = ks.iter().copied().max().unwrap_or(1).max(1);
        let per_user = |eu: &EvalUser| -> (Vec<f64>, Vec<f64>) {
            let list = RankedList {
                user: eu.user,
                items: self.top_k(model, ds, eu, max_k),
                ground_truth: eu.ground_truth.clone(),
            };
            (
                ks.iter().map(|&k| recall_at_k(&list, k)).collect(),
                ks.iter().map(|&k| ndcg_at_k(&list, k)).collect(),
            )
        };
        #[cfg(feature = "parallel")]
        let rows: Vec<(Vec<f64>, Vec<f64>)> = {
            use rayon::prelude::*;
            self.users.par_iter().map(per_user).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let rows: Vec<(Vec<f64>, Vec<f64>)> = self.users.iter().map(per_user).collect();

        let n = rows.len().max(1) as f64;
        let mut recall = vec![0.0; ks.len()];
        let mut ndcg = vec![0.0; ks.len()];
        for (r, g) in &rows {
            for k in 0..ks.len() {
                recall[k] += r[k];
                ndcg[k] += g[k];
            }
        }
        RankingMetrics {
            users: rows.len(),
            ks: ks.to_vec(),
            recall: recall.into_iter().map(|x| x / n).collect(),
            ndcg: ndcg.into_iter().map(|x| x / n).collect(),
        }
    }
}

/// Fraction of selected `(u, j)` pairs with `j` in `F_u`.
pub fn label_error_ratio(selected: &[(UserIdx, ItemIdx)], fns: &FalseNegativeSet) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    let hits = selected.iter().filter(|&&(u, j)| fns.contains(u, j)).count();
    hits as f64 / selected.len() as f64
}

/// Empirical `P(value >= x)` at each threshold.
pub fn ccdf(values: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let n = values.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&x| (x, values.iter().filter(|&&v| v >= x).count() as f64 / n))
        .collect()
}

/// Mean training-positive score per user (0 for users without positives).
pub fn mean_positive_scores(model: &ModelState, ds: &InteractionDataset) -> Vec<f64> {
    (0..ds.num_users)
        .map(|u| {
            let mut scorer = model.user_scorer(u as UserIdx);
            let scores: Vec<f64> = ds.positives[u].iter().map(|&i| scorer.score(i)).collect();
            mean(&scores)
        })
        .collect()
}

/// `sigmoid(r_uj - mean_i r_ui)` for each negative pair.
pub fn ppos_against_mean_positive(
    model: &ModelState,
    mean_pos: &[f64],
    pairs: &[(UserIdx, ItemIdx)],
) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(u, j)| sigmoid(model.score(u, j) - mean_pos[u as usize]))
        .collect()
}

/// `std / mean` of one history; 0 when the mean is 0.
pub fn std_mean_ratio(history: &[f64]) -> f64 {
    let m = mean(history);
    if m == 0.0 {
        0.0
    } else {
        population_std(history) / m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub count: usize,
    pub median_std_mean: f64,
    /// Median of the latest value of each history.
    pub median_ppos: f64,
}

/// Per-class median std/mean ratio of `P_pos` histories.
pub fn std_mean_report(classes: &[(String, Vec<Vec<f64>>)]) -> Vec<ClassSummary> {
    classes
        .iter()
        .map(|(name, histories)| {
            let ratios: Vec<f64> = histories.iter().map(|h| std_mean_ratio(h)).collect();
            let latest: Vec<f64> = histories.iter().filter_map(|h| h.last().copied()).collect();
            ClassSummary {
                class: name.clone(),
                count: histories.len(),
                median_std_mean: median(&ratios),
                median_ppos: median(&latest),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub ccdf: Vec<(f64, f64)>,
    pub ler_per_batch: Vec<f64>,
    /// LER of the difficulty-`D` sampler, per `D`.
    pub ler_by_difficulty: Vec<(usize, f64)>,
    pub std_mean_by_class: Vec<ClassSummary>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScorerKind, TrainHyper};

    fn list(items: &[ItemIdx], gt: &[ItemIdx]) -> RankedList {
        RankedList {
            user: 0,
            items: items.to_vec(),
            ground_truth: gt.to_vec(),
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(recall_at_k(&list(&[5, 1, 2], &[5]), 3), 1.0);
        assert_eq!(recall_at_k(&list(&[1, 2, 3, 5], &[5]), 3), 0.0);
        assert_eq!(recall_at_k(&list(&[1, 5, 3], &[5, 9]), 3), 0.5);
        assert_eq!(ndcg_at_k(&list(&[5, 1], &[5]), 1), 1.0);
        assert!((ndcg_at_k(&list(&[1, 5, 2], &[5]), 3) - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&list(&[1, 2, 3, 5], &[5]), 3), 0.0);
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
    fn full_ranking_order_and_ties() {
        let ds = InteractionDataset::from_pairs(1, 4, &[(0, 3)], None, vec![vec![0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = scored_model(&[0.1, 0.9, 0.5, 2.0]);
        let l = build_ranked_list(&m, &ds, 0, Protocol::Full, &mut rng).unwrap();
        assert_eq!(l.items, vec![1, 2, 0]);
        let flat = scored_model(&[0.0; 4]);
        let l = build_ranked_list(&flat, &ds, 0, Protocol::Full, &mut rng).unwrap();
        assert_eq!(l.items, vec![0, 1, 2]);
    }

    #[test]
    fn sampled_list_has_hundred_items() {
        let ds = InteractionDataset::from_pairs(1, 150, &[(0, 3)], None, vec![vec![7]]).unwrap();
        let m = scored_model(&vec![0.0; 150]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = build_ranked_list(&m, &ds, 0, Protocol::Sampled100, &mut rng).unwrap();
        assert_eq!(l.items.len(), 100);
        assert!(l.items.contains(&7));
        assert!(!l.items.contains(&3));
        let small = InteractionDataset::from_pairs(1, 50, &[(0, 3)], None, vec![vec![7]]).unwrap();
        assert!(matches!(
            build_ranked_list(&m, &small, 0, Protocol::Sampled100, &mut rng),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn evaluator_matches_full_lists() {
        let ds = InteractionDataset::from_pairs(
            2,
            6,
            &[(0, 0), (1, 1)],
            None,
            vec![vec![2, 4], vec![5]],
        )
        .unwrap();
        let hyper = TrainHyper {
            embedding_dim: 2,
            ..TrainHyper::default()
        };
        let m = ModelState::init(2, 6, &hyper, ScorerKind::Gmf, 4).unwrap();
        let ev = Evaluator::new(&ds, Split::Test, Protocol::Full, 0).unwrap();
        let got = ev.evaluate(&m, &ds, &[1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lists: Vec<RankedList> = (0..2)
            .map(|u| build_ranked_list(&m, &ds, u, Protocol::Full, &mut rng).unwrap())
            .collect();
        let want3 = (ndcg_at_k(&lists[0], 3) + ndcg_at_k(&lists[1], 3)) / 2.0;
        let want1 = (recall_at_k(&lists[0], 1) + recall_at_k(&lists[1], 1)) / 2.0;
        assert_eq!(got.ndcg(3), want3);
        assert_eq!(got.recall(1), want1);
        assert_eq!(got.users, 2);
    }

    #[test]
    fn ler_and_ccdf_examples() {
        let fns = FalseNegativeSet {
            per_user: vec![vec![1, 2, 3]],
            sigma: 1.0,
            active_per_user: vec![vec![1, 2, 3]],
        };
        let none = [(0, 5), (0, 6)];
        assert_eq!(label_error_ratio(&none, &fns), 0.0);
        assert_eq!(label_error_ratio(&[(0, 1), (0, 2)], &fns), 1.0);
        let mixed = [(0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7), (0, 8)];
        assert_eq!(label_error_ratio(&mixed, &fns), 0.375);

        let v = [0.2, 0.6, 0.9];
        let c = ccdf(&v, &[0.0, 0.5, 1.01]);
        assert_eq!(c[0].1, 1.0);
        assert!((c[1].1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c[2].1, 0.0);
    }

    #[test]
    fn std_mean_examples() {
        assert_eq!(std_mean_ratio(&[0.3; 5]), 0.0);
        assert!((std_mean_ratio(&[0.0, 1.0, 0.0, 1.0, 0.0]) - 1.224_744_871_391_589).abs() < 1e-12);
        assert_eq!(std_mean_ratio(&[0.0; 5]), 0.0);
        let rep = std_mean_report(&[
            ("flat".into(), vec![vec![0.4; 5]; 3]),
            ("osc".into(), vec![vec![0.0, 1.0, 0.0, 1.0, 0.0]; 3]),
        ]);
        assert!(rep[1].median_std_mean > rep[0].median_std_mean);
    }
}
