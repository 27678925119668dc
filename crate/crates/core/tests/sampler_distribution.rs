//! Goodness-of-fit of the sampling laws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srns_core::data::InteractionDataset;
use srns_core::model::{ModelState, ScorerKind, TrainHyper};
use srns_core::sampler::{sample_uniform, softmax_sample_without_replacement, SamplerConfig, SrnsSampler};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const MIN_P_VALUE: f64 = 0.01;

fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let w: Vec<f64> = scores.iter().map(|s| (s / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

/// One user, item 0 positive, items 1..=pool candidates. S2 is large enough
/// that every candidate enters the pool on each refresh, so the single
/// memory slot follows the softmax over all of them.
#[test]
fn memory_refresh_follows_softmax() {
    let pool = 10;
    let draws = 100_000;
    let ds = InteractionDataset::from_pairs(1, pool + 1, &[(0, 0)], None, Vec::new()).unwrap();
    let hyper = TrainHyper {
        embedding_dim: 2,
        ..TrainHyper::default()
    };
    let mut model = ModelState::init(1, pool + 1, &hyper, ScorerKind::Gmf, 3).unwrap();
    model.user_embeddings.copy_from_slice(&[1.0, 0.5]);
    model.scorer_params.copy_from_slice(&[1.0, 1.0]);
    for i in 0..=pool {
        let x = i as f64 / pool as f64;
        model.item_embeddings[2 * i] = 2.0 * x - 1.0;
        model.item_embeddings[2 * i + 1] = (3.0 * x).sin();
    }
    let scores: Vec<f64> = (1..=pool as u32).map(|i| model.score(0, i)).collect();

    for tau in [0.5, 1.0, 2.0, 10.0] {
        let cfg = SamplerConfig {
            memory_size: 1,
            expansion_size: 300,
            temperature: tau,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(tau.to_bits());
        let mut sampler = SrnsSampler::new(&ds, &cfg, None, &mut rng).unwrap();
        let mut scratch = sampler.new_scratch();
        let mut counts = vec![0u64; pool];
        for _ in 0..draws {
            sampler.select(&model, 0, 0, 0.0, &mut scratch).unwrap();
            sampler.update_memory(&model, 0, &mut rng, &mut scratch).unwrap();
            counts[sampler.memory(0).candidates[0] as usize - 1] += 1;
        }
        let p = chi_square_p(&counts, &softmax(&scores, tau));
        println!("tau {tau}: p = {p:.4}");
        assert!(p > MIN_P_VALUE, "tau {tau}: chi-square p = {p}");
    }
}

/// Ordered pairs from a two-item draw: `P(a, b) = p_a * p_b / (1 - p_a)`.
#[test]
fn without_replacement_order_law() {
    let scores = [0.3, -1.0, 1.2, 0.0];
    let tau = 0.8;
    let p = softmax(&scores, tau);
    let mut probs = Vec::new();
    let mut index = std::collections::HashMap::new();
    for a in 0..4 {
        for b in 0..4 {
            if a != b {
                index.insert((a, b), probs.len());
                probs.push(p[a] * p[b] / (1.0 - p[a]));
            }
        }
    }
    let mut counts = vec![0u64; probs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100_000 {
        let d = softmax_sample_without_replacement(&scores, tau, 2, &mut rng);
        counts[index[&(d[0], d[1])]] += 1;
    }
    let pv = chi_square_p(&counts, &probs);
    assert!(pv > MIN_P_VALUE, "p = {pv}");
}

#[test]
fn uniform_sampler_is_uniform_over_non_positives() {
    let num_items = 1447;
    let positives: Vec<u32> = (0..40).map(|k| k * 31 + 5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut counts = vec![0u64; num_items];
    for _ in 0..200_000 {
        counts[sample_uniform(0, num_items, &positives, &mut rng).unwrap() as usize] += 1;
    }
    for &i in &positives {
        assert_eq!(counts[i as usize], 0);
    }
    let allowed: Vec<u64> = (0..num_items as u32)
        .filter(|i| positives.binary_search(i).is_err())
        .map(|i| counts[i as usize])
        .collect();
    assert_eq!(allowed.len(), 1407);
    let probs = vec![1.0 / allowed.len() as f64; allowed.len()];
    let pv = chi_square_p(&allowed, &probs);
    assert!(pv > MIN_P_VALUE, "p = {pv}");
}
