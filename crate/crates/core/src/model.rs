//! Scoring functions, the pairwise logistic loss and its optimiser.
//!
//! Parameters are stored as flat `f64` buffers. Embedding rows are updated
//! lazily: only rows that appear in a batch have their Adam moments and
//! values touched, while scorer parameters receive a dense update every step.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, sigmoid, softplus};
use crate::{ItemIdx, UserIdx};

const INIT_STD: f64 = 0.01;

/// Rescales N(0, INIT_STD²) draws to N(0, 1/fan_in). Scorer weights at 0.01
/// make the loss gradient cubic in the init scale, so with any L2 term the
/// model decays to zero before it learns.
fn fan_in(mut v: Vec<f64>, fan_in: usize) -> Vec<f64> {
    let k = (1.0 / fan_in as f64).sqrt() / INIT_STD;
    v.iter_mut().for_each(|x| *x *= k);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// `beta^T (p_u * q_i)`.
    Gmf,
    /// Sigmoid MLP over `[p_u; q_i]` with halving layer widths.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub mlp_hidden_layers: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            embedding_dim: 8,
            learning_rate: 1e-3,
            l2_reg: 1e-3,
            batch_size: 1024,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mlp_hidden_layers: 3,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(self.l2_reg >= 0.0) {
            return Err(Error::Config("l2_reg must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A positive `(user, pos)` paired with a sampled negative `neg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub user: UserIdx,
    pub pos: ItemIdx,
    pub neg: ItemIdx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub user: Vec<f64>,
    pub item: Vec<f64>,
    pub scorer: Vec<f64>,
}

impl Moments {
    fn zeros_like(user: usize, item: usize, scorer: usize) -> Self {
        Moments {
            user: vec![0.0; user],
            item: vec![0.0; item],
            scorer: vec![0.0; scorer],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub scorer: ScorerKind,
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    /// MLP layer widths `d_0 = 2F, d_1, ..., d_H`; empty for GMF.
    pub layer_widths: Vec<usize>,
    pub user_embeddings: Vec<f64>,
    pub item_embeddings: Vec<f64>,
    /// GMF: `beta` (length F). MLP: `W_1, b_1, ..., W_H, b_H, w_out, b_out`.
    pub scorer_params: Vec<f64>,
    pub adam_m: Moments,
    pub adam_v: Moments,
    pub step_count: u64,
}

/// Widths `2F, F, F/2, ...` for `hidden` halvings.
pub fn mlp_widths(dim: usize, hidden: usize) -> Result<Vec<usize>> {
    let d0 = 2 * dim;
    if hidden >= usize::BITS as usize || d0 % (1usize << hidden) != 0 {
        return Err(Error::Config(format!(
            "MLP input width {d0} is not divisible by 2^{hidden}"
        )));
    }
    Ok((0..=hidden).map(|l| d0 >> l).collect())
}

fn mlp_param_count(widths: &[usize]) -> usize {
    let hidden: usize = widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
    hidden + widths.last().copied().unwrap_or(0) + 1
}

impl ModelState {
    pub fn init(
        num_users: usize,
        num_items: usize,
        hyper: &TrainHyper,
        scorer: ScorerKind,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        if num_users == 0 || num_items == 0 {
            return Err(Error::Config("model needs at least one user and one item".into()));
        }
        let dim = hyper.embedding_dim;
        let layer_widths = match scorer {
            ScorerKind::Gmf => Vec::new(),
            ScorerKind::Mlp => mlp_widths(dim, hyper.mlp_hidden_layers)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let user_embeddings = draw(num_users * dim);
        let item_embeddings = draw(num_items * dim);
        let scorer_params = match scorer {
            ScorerKind::Gmf => fan_in(draw(dim), dim),
            ScorerKind::Mlp => {
                let mut params = Vec::with_capacity(mlp_param_count(&layer_widths));
                for w in layer_widths.windows(2) {
                    params.extend(fan_in(draw(w[1] * w[0]), w[0]));
                    params.extend(std::iter::repeat_n(0.0, w[1]));
                }
                let last = *layer_widths.last().unwrap();
                params.extend(fan_in(draw(last), last));
                params.push(0.0);
                params
            }
        };
        let (nu, ni, ns) = (user_embeddings.len(), item_embeddings.len(), scorer_params.len());
        Ok(ModelState {
            scorer,
            num_users,
            num_items,
            dim,
            layer_widths,
            user_embeddings,
            item_embeddings,
            scorer_params,
            adam_m: Moments::zeros_like(nu, ni, ns),
            adam_v: Moments::zeros_like(nu, ni, ns),
            step_count: 0,
        })
    }

    #[inline]
    pub fn user_vec(&self, u: UserIdx) -> &[f64] {
        let d = self.dim;
        &self.user_embeddings[u as usize * d..(u as usize + 1) * d]
    }

    #[inline]
    pub fn item_vec(&self, i: ItemIdx) -> &[f64] {
        let d = self.dim;
        &self.item_embeddings[i as usize * d..(i as usize + 1) * d]
    }

    /// `r(p_u, q_i, beta)`.
    pub fn score(&self, u: UserIdx, i: ItemIdx) -> f64 {
        let p = self.user_vec(u);
        let q = self.item_vec(i);
        match self.scorer {
            ScorerKind::Gmf => gmf_score(&self.scorer_params, p, q),
            ScorerKind::Mlp => {
                let mut acts = MlpActivations::new(&self.layer_widths);
                mlp_forward(&self.layer_widths, &self.scorer_params, p, q, &mut acts)
            }
        }
    }

    /// Returns a reusable scorer for one user, amortising the per-user work
    /// across many items.
    pub fn user_scorer(&self, u: UserIdx) -> UserScorer<'_> {
        let p = self.user_vec(u);
        match self.scorer {
            ScorerKind::Gmf => UserScorer::Gmf {
                model: self,
                weighted: p.iter().zip(&self.scorer_params).map(|(a, b)| a * b).collect(),
            },
            ScorerKind::Mlp => UserScorer::Mlp {
                model: self,
                p,
                acts: MlpActivations::new(&self.layer_widths),
            },
        }
    }

    /// Scores every item for `u` into `out` (length `num_items`).
    pub fn score_all_items(&self, u: UserIdx, out: &mut [f64]) {
        let mut s = self.user_scorer(u);
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = s.score(i as ItemIdx);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.user_embeddings
            .iter()
            .chain(&self.item_embeddings)
            .chain(&self.scorer_params)
            .all(|v| v.is_finite())
    }

    /// Mean over the batch of `pair_loss + reg * (|p_u|^2 + |q_i|^2 + |q_j|^2)`.
    pub fn objective(&self, batch: &[Triplet], l2_reg: f64) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|t| {
                let x = self.score(t.user, t.pos) - self.score(t.user, t.neg);
                let norms = [self.user_vec(t.user), self.item_vec(t.pos), self.item_vec(t.neg)]
                    .iter()
                    .map(|v| dot(v, v))
                    .sum::<f64>();
                pair_loss_diff(x) + l2_reg * norms
            })
            .sum();
        total / batch.len() as f64
    }

    /// Analytic gradient of [`ModelState::objective`].
    pub fn gradients(&self, batch: &[Triplet], l2_reg: f64) -> Result<Gradients> {
        let d = self.dim;
        let mut grads = Gradients::new(d, self.scorer_params.len());
        if batch.is_empty() {
            return Ok(grads);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut acts_i = MlpActivations::new(&self.layer_widths);
        let mut acts_j = MlpActivations::new(&self.layer_widths);
        let mut gp = vec![0.0; d];
        let mut gqi = vec![0.0; d];
        let mut gqj = vec![0.0; d];
        let mut loss_sum = 0.0;
        for t in batch {
            let p = self.user_vec(t.user);
            let qi = self.item_vec(t.pos);
            let qj = self.item_vec(t.neg);
            gp.fill(0.0);
            gqi.fill(0.0);
            gqj.fill(0.0);
            let (ri, rj) = match self.scorer {
                ScorerKind::Gmf => (
                    gmf_score(&self.scorer_params, p, qi),
                    gmf_score(&self.scorer_params, p, qj),
                ),
                ScorerKind::Mlp => (
                    mlp_forward(&self.layer_widths, &self.scorer_params, p, qi, &mut acts_i),
                    mlp_forward(&self.layer_widths, &self.scorer_params, p, qj, &mut acts_j),
                ),
            };
            let x = ri - rj;
            let loss = pair_loss_diff(x);
            // d/dx of -ln sigmoid(x)
            let dx = -sigmoid(-x);
            if !loss.is_finite() || !dx.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss for triplet (user {}, pos {}, neg {}): r_ui={ri}, r_uj={rj}",
                    t.user, t.pos, t.neg
                )));
            }
            loss_sum += loss;
            let up_i = dx * scale;
            let up_j = -dx * scale;
            match self.scorer {
                ScorerKind::Gmf => {
                    let beta = &self.scorer_params;
                    for f in 0..d {
                        gp[f] += up_i * beta[f] * qi[f] + up_j * beta[f] * qj[f];
                        gqi[f] += up_i * beta[f] * p[f];
                        gqj[f] += up_j * beta[f] * p[f];
                        grads.scorer[f] += up_i * p[f] * qi[f] + up_j * p[f] * qj[f];
                    }
                }
                ScorerKind::Mlp => {
                    mlp_backward(&self.layer_widths, &self.scorer_params, &acts_i, up_i, &mut gp, &mut gqi, &mut grads.scorer);
                    mlp_backward(&self.layer_widths, &self.scorer_params, &acts_j, up_j, &mut gp, &mut gqj, &mut grads.scorer);
                }
            }
            let reg = 2.0 * l2_reg * scale;
            for f in 0..d {
                gp[f] += reg * p[f];
                gqi[f] += reg * qi[f];
                gqj[f] += reg * qj[f];
            }
            if gp.iter().chain(&gqi).chain(&gqj).any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient for triplet (user {}, pos {}, neg {})",
                    t.user, t.pos, t.neg
                )));
            }
            grads.add_user(t.user, &gp);
            grads.add_item(t.pos, &gqi);
            grads.add_item(t.neg, &gqj);
        }
        grads.mean_loss = loss_sum * scale;
        Ok(grads)
    }

    /// One Adam step with bias correction. Embedding rows absent from
    /// `grads` keep their values and moments.
    pub fn apply_adam(&mut self, grads: &Gradients, hyper: &TrainHyper) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - hyper.adam_beta1.powi(t);
        let c2 = 1.0 - hyper.adam_beta2.powi(t);
        let adam = AdamStep {
            lr: hyper.learning_rate,
            b1: hyper.adam_beta1,
            b2: hyper.adam_beta2,
            eps: hyper.adam_eps,
            c1,
            c2,
        };
        let d = self.dim;
        for (k, &u) in grads.user_rows.iter().enumerate() {
            let r = u as usize * d..(u as usize + 1) * d;
            adam.apply(
                &mut self.user_embeddings[r.clone()],
                &mut self.adam_m.user[r.clone()],
                &mut self.adam_v.user[r],
                &grads.user_grad[k * d..(k + 1) * d],
            );
        }
        for (k, &i) in grads.item_rows.iter().enumerate() {
            let r = i as usize * d..(i as usize + 1) * d;
            adam.apply(
                &mut self.item_embeddings[r.clone()],
                &mut self.adam_m.item[r.clone()],
                &mut self.adam_v.item[r],
                &grads.item_grad[k * d..(k + 1) * d],
            );
        }
        adam.apply(
            &mut self.scorer_params,
            &mut self.adam_m.scorer,
            &mut self.adam_v.scorer,
            &grads.scorer,
        );
    }

    /// Gradient plus Adam update for one mini-batch; returns the mean pair
    /// loss (without the regulariser).
    pub fn grad_and_step(&mut self, batch: &[Triplet], hyper: &TrainHyper) -> Result<f64> {
        for t in batch {
            if t.user as usize >= self.num_users
                || t.pos as usize >= self.num_items
                || t.neg as usize >= self.num_items
            {
                return Err(Error::Config(format!(
                    "triplet ({}, {}, {}) out of range",
                    t.user, t.pos, t.neg
                )));
            }
        }
        let grads = self.gradients(batch, hyper.l2_reg)?;
        self.apply_adam(&grads, hyper);
        Ok(grads.mean_loss)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: ModelState = serde_json::from_str(&text)?;
        let d = state.dim;
        if state.user_embeddings.len() != state.num_users * d
            || state.item_embeddings.len() != state.num_items * d
        {
            return Err(Error::Config(format!(
                "{}: embedding tables do not match declared dimensions",
                path.display()
            )));
        }
        Ok(state)
    }
}

struct AdamStep {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
}

impl AdamStep {
    #[inline]
    fn apply(&self, theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]) {
        for k in 0..theta.len() {
            m[k] = self.b1 * m[k] + (1.0 - self.b1) * g[k];
            v[k] = self.b2 * v[k] + (1.0 - self.b2) * g[k] * g[k];
            let m_hat = m[k] / self.c1;
            let v_hat = v[k] / self.c2;
            theta[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Sparse batch gradient: touched embedding rows plus the dense scorer part.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    dim: usize,
    pub user_rows: Vec<UserIdx>,
    pub user_grad: Vec<f64>,
    pub item_rows: Vec<ItemIdx>,
    pub item_grad: Vec<f64>,
    pub scorer: Vec<f64>,
    pub mean_loss: f64,
    user_slot: HashMap<UserIdx, usize>,
    item_slot: HashMap<ItemIdx, usize>,
}

impl Gradients {
    fn new(dim: usize, scorer_len: usize) -> Self {
        Gradients {
            dim,
            user_rows: Vec::new(),
            user_grad: Vec::new(),
            item_rows: Vec::new(),
            item_grad: Vec::new(),
            scorer: vec![0.0; scorer_len],
            mean_loss: 0.0,
            user_slot: HashMap::new(),
            item_slot: HashMap::new(),
        }
    }

    fn add_user(&mut self, u: UserIdx, g: &[f64]) {
        let d = self.dim;
        let slot = *self.user_slot.entry(u).or_insert_with(|| {
            self.user_rows.push(u);
            self.user_grad.extend(std::iter::repeat_n(0.0, d));
            self.user_rows.len() - 1
        });
        for (a, b) in self.user_grad[slot * d..(slot + 1) * d].iter_mut().zip(g) {
            *a += b;
        }
    }

    fn add_item(&mut self, i: ItemIdx, g: &[f64]) {
        let d = self.dim;
        let slot = *self.item_slot.entry(i).or_insert_with(|| {
            self.item_rows.push(i);
            self.item_grad.extend(std::iter::repeat_n(0.0, d));
            self.item_rows.len() - 1
        });
        for (a, b) in self.item_grad[slot * d..(slot + 1) * d].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn user(&self, u: UserIdx) -> Option<&[f64]> {
        let d = self.dim;
        self.user_slot.get(&u).map(|&s| &self.user_grad[s * d..(s + 1) * d])
    }

    pub fn item(&self, i: ItemIdx) -> Option<&[f64]> {
        let d = self.dim;
        self.item_slot.get(&i).map(|&s| &self.item_grad[s * d..(s + 1) * d])
    }
}

/// `P_neg(j | u, i) = sigmoid(r_ui - r_uj)`.
#[inline]
pub fn p_neg(r_ui: f64, r_uj: f64) -> f64 {
    sigmoid(r_ui - r_uj)
}

/// `P_pos(j | u, i) = 1 - P_neg = sigmoid(r_uj - r_ui)`.
#[inline]
pub fn p_pos(r_ui: f64, r_uj: f64) -> f64 {
    sigmoid(r_uj - r_ui)
}

/// `-ln sigmoid(r_ui - r_uj)`.
#[inline]
pub fn pair_loss(r_ui: f64, r_uj: f64) -> f64 {
    pair_loss_diff(r_ui - r_uj)
}

#[inline]
fn pair_loss_diff(x: f64) -> f64 {
    softplus(-x)
}

#[inline]
fn gmf_score(beta: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for f in 0..p.len() {
        s += beta[f] * p[f] * q[f];
    }
    s
}

/// Per-layer activations `z_0 .. z_H` of one MLP forward pass.
#[derive(Debug, Clone)]
pub struct MlpActivations {
    z: Vec<Vec<f64>>,
}

impl MlpActivations {
    fn new(widths: &[usize]) -> Self {
        MlpActivations {
            z: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

fn mlp_forward(widths: &[usize], params: &[f64], p: &[f64], q: &[f64], acts: &mut MlpActivations) -> f64 {
    let dim = p.len();
    acts.z[0][..dim].copy_from_slice(p);
    acts.z[0][dim..].copy_from_slice(q);
    let mut off = 0;
    for l in 1..widths.len() {
        let (din, dout) = (widths[l - 1], widths[l]);
        let w = &params[off..off + dout * din];
        let b = &params[off + dout * din..off + dout * din + dout];
        let (prev, next) = acts.z.split_at_mut(l);
        let input = &prev[l - 1];
        for r in 0..dout {
            next[0][r] = sigmoid(dot(&w[r * din..(r + 1) * din], input) + b[r]);
        }
        off += dout * din + dout;
    }
    let last = widths.len() - 1;
    let w_out = &params[off..off + widths[last]];
    dot(w_out, &acts.z[last]) + params[off + widths[last]]
}

/// Accumulates `upstream * d r / d(p, q, params)` given the activations of
/// the matching forward pass.
fn mlp_backward(
    widths: &[usize],
    params: &[f64],
    acts: &MlpActivations,
    upstream: f64,
    grad_p: &mut [f64],
    grad_q: &mut [f64],
    grad_params: &mut [f64],
) {
    let layers = widths.len() - 1;
    let mut offsets = Vec::with_capacity(layers + 1);
    let mut off = 0;
    for l in 1..=layers {
        offsets.push(off);
        off += widths[l] * widths[l - 1] + widths[l];
    }
    let out_off = off;
    let d_h = widths[layers];
    // Output layer.
    let mut delta: Vec<f64> = vec![0.0; d_h];
    for k in 0..d_h {
        grad_params[out_off + k] += upstream * acts.z[layers][k];
        delta[k] = upstream * params[out_off + k];
    }
    grad_params[out_off + d_h] += upstream;
    // `delta` holds dL/dz_l; walk back through the sigmoid layers.
    for l in (1..=layers).rev() {
        let (din, dout) = (widths[l - 1], widths[l]);
        let w_off = offsets[l - 1];
        let b_off = w_off + dout * din;
        let z_out = &acts.z[l];
        let z_in = &acts.z[l - 1];
        let mut next = vec![0.0; din];
        for r in 0..dout {
            let pre = delta[r] * z_out[r] * (1.0 - z_out[r]);
            grad_params[b_off + r] += pre;
            let row = &params[w_off + r * din..w_off + (r + 1) * din];
            let grow = &mut grad_params[w_off + r * din..w_off + (r + 1) * din];
            for c in 0..din {
                grow[c] += pre * z_in[c];
                next[c] += pre * row[c];
            }
        }
        delta = next;
    }
    let dim = grad_p.len();
    for f in 0..dim {
        grad_p[f] += delta[f];
        grad_q[f] += delta[dim + f];
    }
}

/// Scores items for a fixed user.
pub enum UserScorer<'a> {
    Gmf {
        model: &'a ModelState,
        weighted: Vec<f64>,
    },
    Mlp {
        model: &'a ModelState,
        p: &'a [f64],
        acts: MlpActivations,
    },
}

impl UserScorer<'_> {
    #[inline]
    pub fn score(&mut self, i: ItemIdx) -> f64 {
        match self {
            UserScorer::Gmf { model, weighted } => dot(weighted, model.item_vec(i)),
            UserScorer::Mlp { model, p, acts } => {
                mlp_forward(&model.layer_widths, &model.scorer_params, p, model.item_vec(i), acts)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scorer: ScorerKind) -> ModelState {
        let hyper = TrainHyper {
            embedding_dim: 2,
            mlp_hidden_layers: 1,
            ..TrainHyper::default()
        };
        ModelState::init(2, 3, &hyper, scorer, 1).unwrap()
    }

    #[test]
    fn gmf_examples() {
        let mut m = tiny(ScorerKind::Gmf);
        m.user_embeddings[..2].copy_from_slice(&[1.0, 0.0]);
        m.item_embeddings[..2].copy_from_slice(&[1.0, 0.0]);
        m.scorer_params = vec![1.0, 1.0];
        assert_eq!(m.score(0, 0), 1.0);

        m.user_embeddings[..2].copy_from_slice(&[0.5, 2.0]);
        m.item_embeddings[..2].copy_from_slice(&[2.0, 0.5]);
        m.scorer_params = vec![1.0, 2.0];
        // 1*0.5*2 + 2*2*0.5
        assert!((m.score(0, 0) - 3.0).abs() < 1e-15);

        m.user_embeddings[..2].copy_from_slice(&[0.0, 0.0]);
        assert_eq!(m.score(0, 0), 0.0);
        assert_eq!(m.score(0, 2), 0.0);
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let hyper = TrainHyper {
            embedding_dim: 4,
            ..TrainHyper::default()
        };
        let a = ModelState::init(5, 7, &hyper, ScorerKind::Gmf, 42).unwrap();
        let b = ModelState::init(5, 7, &hyper, ScorerKind::Gmf, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scorer_params.len(), 4);
        assert!(a.adam_m.user.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_width_halving() {
        assert_eq!(mlp_widths(8, 3).unwrap(), vec![16, 8, 4, 2]);
        assert!(mlp_widths(3, 2).is_err());
        let hyper = TrainHyper {
            embedding_dim: 8,
            mlp_hidden_layers: 3,
            ..TrainHyper::default()
        };
        let m = ModelState::init(2, 2, &hyper, ScorerKind::Mlp, 0).unwrap();
        // 16->8, 8->4, 4->2, 2->1
        assert_eq!(m.scorer_params.len(), (128 + 8) + (32 + 4) + (8 + 2) + (2 + 1));
        let bad = TrainHyper {
            embedding_dim: 3,
            mlp_hidden_layers: 2,
            ..TrainHyper::default()
        };
        assert!(matches!(
            ModelState::init(2, 2, &bad, ScorerKind::Mlp, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn probability_and_loss_examples() {
        assert_eq!(p_neg(0.3, 0.3), 0.5);
        assert!(p_neg(20.0, 0.0) >= 1.0 - 1e-8);
        assert!((p_neg(1.0, 0.0) - 0.731_058_6).abs() < 1e-6);
        assert!((pair_loss(1.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        // softplus(-20) = ln(1 + e^-20)
        let expect = (-20.0f64).exp().ln_1p();
        assert!((pair_loss(20.0, 0.0) - expect).abs() < 1e-24);
        assert!((pair_loss(20.0, 0.0) - 2.06e-9).abs() < 1e-11);
        assert!((pair_loss(0.0, 20.0) - 20.0).abs() < 1e-8);
        assert!(pair_loss(0.0, 1000.0).is_finite());
    }

    #[test]
    fn gradient_at_zero_difference() {
        let mut m = tiny(ScorerKind::Gmf);
        // Make item 1 and item 2 identical so r_ui - r_uj = 0.
        let q1 = m.item_vec(1).to_vec();
        m.item_embeddings[4..6].copy_from_slice(&q1);
        let t = Triplet { user: 0, pos: 1, neg: 2 };
        let g = m.gradients(&[t], 0.0).unwrap();
        // dL/dbeta = dx * (p*q_i - p*q_j) vanishes; dL/dq_i = -0.5 * beta * p.
        let p = m.user_vec(0);
        let beta = &m.scorer_params;
        for f in 0..2 {
            assert!((g.item(1).unwrap()[f] - (-0.5 * beta[f] * p[f])).abs() < 1e-15);
        }
        assert!((g.mean_loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        for kind in [ScorerKind::Gmf, ScorerKind::Mlp] {
            let mut m = tiny(kind);
            let before = m.clone();
            let hyper = TrainHyper {
                learning_rate: 0.0,
                ..TrainHyper::default()
            };
            m.grad_and_step(&[Triplet { user: 1, pos: 0, neg: 2 }], &hyper).unwrap();
            assert_eq!(m.step_count, 1);
            assert_eq!(m.user_embeddings, before.user_embeddings);
            assert_eq!(m.item_embeddings, before.item_embeddings);
            assert_eq!(m.scorer_params, before.scorer_params);
        }
    }

    #[test]
    fn untouched_rows_do_not_move() {
        let mut m = tiny(ScorerKind::Gmf);
        let before = m.clone();
        m.grad_and_step(&[Triplet { user: 0, pos: 0, neg: 1 }], &TrainHyper::default()).unwrap();
        assert_eq!(m.user_vec(1), before.user_vec(1));
        assert_eq!(m.item_vec(2), before.item_vec(2));
        assert_ne!(m.user_vec(0), before.user_vec(0));
        assert_ne!(m.scorer_params, before.scorer_params);
    }

    #[test]
    fn out_of_range_triplet_rejected() {
        let mut m = tiny(ScorerKind::Gmf);
        let bad = Triplet { user: 0, pos: 0, neg: 9 };
        assert!(m.grad_and_step(&[bad], &TrainHyper::default()).is_err());
    }

    #[test]
    fn non_finite_gradient_names_triplet() {
        let mut m = tiny(ScorerKind::Gmf);
        m.user_embeddings[0] = f64::NAN;
        let err = m
            .grad_and_step(&[Triplet { user: 0, pos: 1, neg: 2 }], &TrainHyper::default())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("user 0") && msg.contains("pos 1") && msg.contains("neg 2"), "{msg}");
    }

    #[test]
    fn user_scorer_matches_score() {
        for kind in [ScorerKind::Gmf, ScorerKind::Mlp] {
            let m = tiny(kind);
            let mut out = vec![0.0; 3];
            m.score_all_items(1, &mut out);
            for i in 0..3 {
                assert!((out[i] - m.score(1, i as ItemIdx)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut m = tiny(ScorerKind::Mlp);
        m.grad_and_step(&[Triplet { user: 0, pos: 1, neg: 2 }], &TrainHyper::default()).unwrap();
        m.user_embeddings[0] = 0.1 + 0.2;
        m.item_embeddings[1] = 1e-300;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        m.save(&path).unwrap();
        let back = ModelState::load(&path).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.user_embeddings.iter().zip(&m.user_embeddings) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
