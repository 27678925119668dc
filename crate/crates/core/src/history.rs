//! Ring buffers of epoch-end scores.
//!
//! Per-item scores are stored rather than `P_pos(k|u,i)`: a user has many
//! positives `i`, and the history of `P_pos(k|u,i)` for any pair is
//! recovered as `sigmoid(r_uk[s] - r_ui[s])` over the shared epochs `s`.
//! Each slot holds `exp(r)` so that this sigmoid is a single division,
//! `e_k / (e_k + e_i)`. Scores are clamped to `±SCORE_CLAMP` first.

use crate::model::ModelState;
use crate::{ItemIdx, UserIdx};

/// Number of most recent epochs the variance term looks at.
pub const WINDOW: usize = 5;

/// Keeps `exp(r)` and sums of two such terms finite and non-zero.
pub const SCORE_CLAMP: f64 = 300.0;

#[inline]
fn encode(r: f64) -> f64 {
    r.clamp(-SCORE_CLAMP, SCORE_CLAMP).exp()
}

#[derive(Debug, Clone, PartialEq)]
struct UserTrack {
    /// Sorted tracked items; `None` tracks the whole catalogue.
    items: Option<Vec<ItemIdx>>,
    /// Epoch counter value when tracking of each slot began.
    start: Vec<u32>,
    /// `slots * WINDOW`, indexed by `slot * WINDOW + epoch % WINDOW`.
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHistory {
    num_items: usize,
    epochs: u32,
    users: Vec<UserTrack>,
}

impl ScoreHistory {
    /// Tracks every item for every user.
    pub fn full(num_users: usize, num_items: usize) -> Self {
        let users = (0..num_users)
            .map(|_| UserTrack {
                items: None,
                start: vec![0; num_items],
                values: vec![1.0; num_items * WINDOW],
            })
            .collect();
        ScoreHistory {
            num_items,
            epochs: 0,
            users,
        }
    }

    /// Tracks only the given (per-user) item sets.
    pub fn tracked(num_items: usize, sets: Vec<Vec<ItemIdx>>) -> Self {
        let users = sets
            .into_iter()
            .map(|mut items| {
                items.sort_unstable();
                items.dedup();
                let n = items.len();
                UserTrack {
                    items: Some(items),
                    start: vec![0; n],
                    values: vec![1.0; n * WINDOW],
                }
            })
            .collect();
        ScoreHistory {
            num_items,
            epochs: 0,
            users,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn epochs_recorded(&self) -> u32 {
        self.epochs
    }

    pub fn is_full(&self) -> bool {
        self.users.first().is_none_or(|t| t.items.is_none())
    }

    #[inline]
    fn slot(&self, u: UserIdx, item: ItemIdx) -> Option<usize> {
        match &self.users[u as usize].items {
            None => ((item as usize) < self.num_items).then_some(item as usize),
            Some(items) => items.binary_search(&item).ok(),
        }
    }

    #[inline]
    fn len_of(&self, track: &UserTrack, slot: usize) -> usize {
        ((self.epochs - track.start[slot]) as usize).min(WINDOW)
    }

    pub fn is_tracked(&self, u: UserIdx, item: ItemIdx) -> bool {
        self.slot(u, item).is_some()
    }

    /// Number of recorded entries for `(u, item)`; 0 when untracked.
    pub fn len(&self, u: UserIdx, item: ItemIdx) -> usize {
        self.slot(u, item)
            .map_or(0, |s| self.len_of(&self.users[u as usize], s))
    }

    /// Recorded scores for `(u, item)`, oldest first.
    pub fn scores(&self, u: UserIdx, item: ItemIdx) -> Vec<f64> {
        let Some(slot) = self.slot(u, item) else {
            return Vec::new();
        };
        let track = &self.users[u as usize];
        let n = self.len_of(track, slot);
        (self.epochs as usize - n..self.epochs as usize)
            .map(|e| track.values[slot * WINDOW + e % WINDOW].ln())
            .collect()
    }

    /// Most recent recorded score, if any.
    pub fn latest(&self, u: UserIdx, item: ItemIdx) -> Option<f64> {
        let slot = self.slot(u, item)?;
        let track = &self.users[u as usize];
        if self.len_of(track, slot) == 0 {
            return None;
        }
        let e = self.epochs as usize - 1;
        Some(track.values[slot * WINDOW + e % WINDOW].ln())
    }

    /// `[P_pos(k|u,i)]_s = sigmoid(r_uk[s] - r_ui[s])` over the most recent
    /// epochs for which both scores were recorded, oldest first. Writes into
    /// `out` and returns the count.
    pub fn ppos_history(&self, u: UserIdx, k: ItemIdx, i: ItemIdx, out: &mut [f64; WINDOW]) -> usize {
        let (Some(sk), Some(si)) = (self.slot(u, k), self.slot(u, i)) else {
            return 0;
        };
        let track = &self.users[u as usize];
        let n = self.len_of(track, sk).min(self.len_of(track, si));
        let end = self.epochs as usize;
        for (o, e) in (end - n..end).enumerate() {
            let pos = e % WINDOW;
            let ek = track.values[sk * WINDOW + pos];
            let ei = track.values[si * WINDOW + pos];
            out[o] = ek / (ek + ei);
        }
        n
    }

    /// Records the current score of every tracked item for every user.
    pub fn record_epoch(&mut self, model: &ModelState) {
        let pos = self.epochs as usize % WINDOW;
        let record = |(u, track): (usize, &mut UserTrack)| {
            let mut scorer = model.user_scorer(u as UserIdx);
            match &track.items {
                None => {
                    for i in 0..track.start.len() {
                        track.values[i * WINDOW + pos] = encode(scorer.score(i as ItemIdx));
                    }
                }
                Some(items) => {
                    for (slot, &i) in items.iter().enumerate() {
                        track.values[slot * WINDOW + pos] = encode(scorer.score(i));
                    }
                }
            }
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            self.users.par_iter_mut().enumerate().for_each(record);
        }
        #[cfg(not(feature = "parallel"))]
        self.users.iter_mut().enumerate().for_each(record);
        self.epochs += 1;
    }

    /// Replaces the tracked set of a pruned user, keeping the history of
    /// items present in both the old and new sets.
    pub fn retrack(&mut self, u: UserIdx, mut items: Vec<ItemIdx>) {
        items.sort_unstable();
        items.dedup();
        let old = &self.users[u as usize];
        let Some(old_items) = old.items.as_ref() else {
            return;
        };
        let mut start = vec![self.epochs; items.len()];
        let mut values = vec![1.0f64; items.len() * WINDOW];
        let mut j = 0;
        for (slot, &item) in items.iter().enumerate() {
            while j < old_items.len() && old_items[j] < item {
                j += 1;
            }
            if j < old_items.len() && old_items[j] == item {
                start[slot] = old.start[j];
                values[slot * WINDOW..(slot + 1) * WINDOW]
                    .copy_from_slice(&old.values[j * WINDOW..(j + 1) * WINDOW]);
            }
        }
        self.users[u as usize] = UserTrack {
            items: Some(items),
            start,
            values,
        };
    }

    pub fn tracked_items(&self, u: UserIdx) -> Option<&[ItemIdx]> {
        self.users[u as usize].items.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sigmoid;
    use crate::model::{ScorerKind, TrainHyper};

    fn model() -> ModelState {
        let hyper = TrainHyper {
            embedding_dim: 3,
            ..TrainHyper::default()
        };
        ModelState::init(2, 6, &hyper, ScorerKind::Gmf, 3).unwrap()
    }

    #[test]
    fn buffers_fill_then_evict() {
        let mut m = model();
        let mut h = ScoreHistory::full(2, 6);
        let mut log: Vec<f64> = Vec::new();
        for epoch in 0..7 {
            m.item_embeddings[3] = 0.1 * epoch as f64;
            log.push(m.score(1, 1));
            h.record_epoch(&m);
            let expect_len = (epoch + 1).min(WINDOW);
            assert_eq!(h.len(1, 1), expect_len);
            let got = h.scores(1, 1);
            for (g, w) in got.iter().zip(&log[log.len() - expect_len..]) {
                assert!((g - w).abs() < 1e-12);
            }
        }
        assert!((h.latest(1, 1).unwrap() - log.last().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pruned_tracking_and_retrack() {
        let m = model();
        let mut h = ScoreHistory::tracked(6, vec![vec![0, 2], vec![5]]);
        assert!(!h.is_full());
        assert!(h.is_tracked(0, 2));
        assert!(!h.is_tracked(0, 1));
        h.record_epoch(&m);
        h.record_epoch(&m);
        h.retrack(0, vec![2, 4]);
        assert_eq!(h.len(0, 2), 2);
        assert_eq!(h.len(0, 4), 0);
        assert_eq!(h.len(0, 0), 0);
        h.record_epoch(&m);
        assert_eq!(h.len(0, 2), 3);
        assert_eq!(h.len(0, 4), 1);
    }

    #[test]
    fn ppos_history_uses_common_epochs() {
        let m = model();
        let mut h = ScoreHistory::tracked(6, vec![vec![0, 1], vec![]]);
        h.record_epoch(&m);
        h.retrack(0, vec![0, 1, 3]);
        h.record_epoch(&m);
        let mut buf = [0.0; WINDOW];
        assert_eq!(h.ppos_history(0, 1, 0, &mut buf), 2);
        assert_eq!(h.ppos_history(0, 3, 0, &mut buf), 1);
        let expect = sigmoid(m.score(0, 3) - m.score(0, 0));
        assert!((buf[0] - expect).abs() < 1e-14);
        assert_eq!(h.ppos_history(0, 4, 0, &mut buf), 0);
    }
}
