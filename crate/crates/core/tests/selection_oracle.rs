//! Variance-based selection against a brute-force evaluation over randomized
//! memories and score histories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use srns_core::data::InteractionDataset;
use srns_core::model::{ModelState, ScorerKind, TrainHyper};
use srns_core::sampler::{SamplerConfig, SrnsSampler};

const INSTANCES: usize = 1000;
const WINDOW: usize = 5;

/// Items sharing a palette entry score identically, so ties are common.
fn random_model(
    scorer: ScorerKind,
    num_items: usize,
    palette: usize,
    rng: &mut ChaCha8Rng,
) -> ModelState {
    let hyper = TrainHyper {
        embedding_dim: 4,
        mlp_hidden_layers: 1,
        ..TrainHyper::default()
    };
    let mut m = ModelState::init(1, num_items, &hyper, scorer, rng.random()).unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let colours: Vec<Vec<f64>> = (0..palette)
        .map(|_| (0..4).map(|_| normal.sample(rng)).collect())
        .collect();
    for i in 0..num_items {
        m.item_embeddings[i * 4..(i + 1) * 4].copy_from_slice(&colours[i % palette]);
    }
    for v in m.user_embeddings.iter_mut().chain(m.scorer_params.iter_mut()) {
        *v = normal.sample(rng);
    }
    m
}

fn brute_force(
    memory: &[u32],
    pos: u32,
    current: &ModelState,
    past: &[ModelState],
    alpha_t: f64,
) -> usize {
    let window = &past[past.len().saturating_sub(WINDOW)..];
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (idx, &k) in memory.iter().enumerate() {
        let p_now = 1.0 / (1.0 + (current.score(0, pos) - current.score(0, k)).exp());
        let mut value = p_now;
        if alpha_t != 0.0 {
            let ps: Vec<f64> = window
                .iter()
                .map(|m| 1.0 / (1.0 + (m.score(0, pos) - m.score(0, k)).exp()))
                .collect();
            let std = if ps.is_empty() {
                0.0
            } else {
                let n = ps.len() as f64;
                let mean = ps.iter().sum::<f64>() / n;
                (ps.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n).sqrt()
            };
            value += alpha_t * std;
        }
        if value > best_value {
            best = idx;
            best_value = value;
        }
    }
    best
}

#[test]
fn selection_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ties = 0;
    for _ in 0..INSTANCES {
        let size = rng.random_range(1..=64);
        let positives = 3;
        let num_items = size + positives + rng.random_range(0..8);
        let pos_items: Vec<u32> = (0..positives as u32).collect();
        let ds = InteractionDataset::from_pairs(
            1,
            num_items,
            &pos_items.iter().map(|&i| (0, i)).collect::<Vec<_>>(),
            None,
            Vec::new(),
        )
        .unwrap();
        let cfg = SamplerConfig {
            memory_size: size,
            expansion_size: 4,
            ..SamplerConfig::default()
        };
        let mut srng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut sampler = SrnsSampler::new(&ds, &cfg, None, &mut srng).unwrap();

        let scorer = if rng.random_bool(0.7) { ScorerKind::Gmf } else { ScorerKind::Mlp };
        let palette = if rng.random_bool(0.3) { num_items } else { rng.random_range(1..=6) };
        let epochs = rng.random_range(0..=8);
        let mut past = Vec::new();
        for t in 1..=epochs {
            let m = random_model(scorer, num_items, palette, &mut rng);
            sampler.end_epoch(&m, t, &mut srng).unwrap();
            past.push(m);
        }
        let current = random_model(scorer, num_items, palette, &mut rng);
        let alpha_t = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..50.0) };
        let pos = pos_items[rng.random_range(0..positives)];

        let memory = sampler.memory(0).candidates.clone();
        let mut scratch = sampler.new_scratch();
        let got = sampler.select(&current, 0, pos, alpha_t, &mut scratch).unwrap();
        let want = memory[brute_force(&memory, pos, &current, &past, alpha_t)];
        assert_eq!(got, want, "size {size} epochs {epochs} alpha {alpha_t}");
        if palette < size {
            ties += 1;
        }
    }
    assert!(ties > INSTANCES / 2, "too few tie-heavy instances: {ties}");
}
