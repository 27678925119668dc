//! WebAssembly bindings for the demo page in `www/`.
//!
//! Three operations are exposed: the memory refresh law (softmax sampling
//! without replacement), the `alpha_t` schedule with variance-based
//! selection, and a side-by-side toy training run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use srns_core::data::{build_false_negative_set, split_random, synthetic};
use srns_core::eval::{Evaluator, Protocol, Split};
use srns_core::sampler::{self, Schedule, Strategy};
use srns_core::trainer::{RunConfig, Trainer};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// `exp(s/tau) / sum exp(s'/tau)`.
#[wasm_bindgen]
pub fn softmax_probabilities(scores: &[f64], tau: f64) -> Result<Vec<f64>, JsError> {
    if !(tau > 0.0) {
        return Err(js_err("temperature must be positive"));
    }
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| ((s - top) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Fraction of `draws` refreshes in which each pool item lands in a memory
/// of `memory_size` slots.
#[wasm_bindgen]
pub fn memory_inclusion(
    scores: &[f64],
    tau: f64,
    memory_size: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    if !(tau > 0.0) {
        return Err(js_err("temperature must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; scores.len()];
    for _ in 0..draws {
        for k in sampler::softmax_sample_without_replacement(scores, tau, memory_size, &mut rng) {
            counts[k] += 1;
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / draws.max(1) as f64).collect())
}

fn parse_schedule(name: &str) -> Result<Schedule, JsError> {
    match name {
        "increased" => Ok(Schedule::Increased),
        "flat" => Ok(Schedule::Flat),
        "decreased" => Ok(Schedule::Decreased),
        other => Err(js_err(format!("unknown schedule `{other}`"))),
    }
}

/// `alpha_t` for `t = 1..=epochs`.
#[wasm_bindgen]
pub fn alpha_schedule(schedule: &str, alpha: f64, warm_start: usize, epochs: usize) -> Result<Vec<f64>, JsError> {
    let s = parse_schedule(schedule)?;
    if warm_start == 0 {
        return Err(js_err("warm start must be at least 1"));
    }
    Ok((1..=epochs).map(|t| sampler::alpha_at(s, alpha, warm_start, t)).collect())
}

/// Index chosen by `argmax ppos + alpha_t * std`, or -1 for an empty memory.
#[wasm_bindgen]
pub fn variance_pick(ppos: &[f64], stds: &[f64], alpha_t: f64) -> Result<i32, JsError> {
    if ppos.len() != stds.len() {
        return Err(js_err("ppos and stds differ in length"));
    }
    Ok(sampler::variance_select(ppos, stds, alpha_t).map_or(-1, |i| i as i32))
}

#[derive(Serialize)]
struct Curve {
    name: &'static str,
    ndcg3: Vec<f64>,
    ler: Vec<f64>,
}

/// Trains GMF on a synthetic dataset with uniform, difficulty-only and
/// variance-based negatives under the same seed and noise level. Returns
/// JSON: `[{name, ndcg3: [...], ler: [...]}, ...]`, one entry per epoch.
#[wasm_bindgen]
pub fn compare_samplers(sigma: f64, alpha: f64, epochs: usize, seed: u64) -> Result<String, JsError> {
    let full = synthetic(150, 240, 24, 4, seed);
    let ds = split_random(&full, 0.2, seed).map_err(js_err)?;
    let fns = build_false_negative_set(&ds, 0.5, sigma, seed).map_err(js_err)?;
    let eval = Evaluator::new(&ds, Split::Test, Protocol::Full, seed).map_err(js_err)?;

    let mut base = RunConfig {
        epochs,
        patience: None,
        seed,
        eval_every: 0,
        ..RunConfig::default()
    };
    base.hyper.learning_rate = 0.01;
    base.hyper.batch_size = 256;
    base.sampler.memory_size = 10;
    base.sampler.expansion_size = 10;
    base.sampler.warm_start = (epochs / 2).max(1);

    let variants = [
        ("uniform", Strategy::Uniform, 0.0),
        ("difficulty only", Strategy::Srns, 0.0),
        ("variance based", Strategy::Srns, alpha),
    ];
    let mut curves = Vec::new();
    for (name, strategy, a) in variants {
        let mut run = base.clone();
        run.sampler.strategy = strategy;
        run.sampler.alpha = a;
        let mut trainer = Trainer::new(&ds, &run, Some(&fns)).map_err(js_err)?;
        let mut curve = Curve {
            name,
            ndcg3: Vec::with_capacity(epochs),
            ler: Vec::with_capacity(epochs),
        };
        for _ in 0..epochs {
            let stats = trainer.run_epoch().map_err(js_err)?;
            curve.ndcg3.push(eval.evaluate(trainer.model(), &ds, &[3]).ndcg(3));
            curve.ler.push(stats.ler.unwrap_or(0.0));
        }
        curves.push(curve);
    }
    serde_json::to_string(&curves).map_err(js_err)
}
