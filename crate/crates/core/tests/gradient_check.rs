//! Analytic gradients against central finite differences of the batch
//! objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use srns_core::model::{ModelState, ScorerKind, TrainHyper, Triplet};

const H: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-4;
const INSTANCES: usize = 100;

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        // Both effectively zero; the difference is all rounding.
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn random_model(scorer: ScorerKind, dim: usize, hidden: usize, seed: u64) -> (ModelState, Vec<Triplet>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hyper = TrainHyper {
        embedding_dim: dim,
        mlp_hidden_layers: hidden,
        ..TrainHyper::default()
    };
    let (users, items) = (4, 7);
    let mut model = ModelState::init(users, items, &hyper, scorer, seed).unwrap();
    let normal = Normal::new(0.0, 0.7).unwrap();
    for v in model
        .user_embeddings
        .iter_mut()
        .chain(model.item_embeddings.iter_mut())
        .chain(model.scorer_params.iter_mut())
    {
        *v = normal.sample(&mut rng);
    }
    let batch: Vec<Triplet> = (0..rng.random_range(1..5))
        .map(|_| {
            let pos = rng.random_range(0..items as u32);
            let mut neg = rng.random_range(0..items as u32 - 1);
            if neg >= pos {
                neg += 1;
            }
            Triplet {
                user: rng.random_range(0..users as u32),
                pos,
                neg,
            }
        })
        .collect();
    let reg = [0.0, 1e-3, 1e-2][rng.random_range(0..3)];
    (model, batch, reg)
}

#[derive(Clone, Copy)]
enum Block {
    User,
    Item,
    Scorer,
}

fn param(model: &mut ModelState, block: Block, idx: usize) -> &mut f64 {
    match block {
        Block::User => &mut model.user_embeddings[idx],
        Block::Item => &mut model.item_embeddings[idx],
        Block::Scorer => &mut model.scorer_params[idx],
    }
}

fn numeric(model: &ModelState, batch: &[Triplet], reg: f64, block: Block, idx: usize) -> f64 {
    let mut m = model.clone();
    let x = *param(&mut m, block, idx);
    *param(&mut m, block, idx) = x + H;
    let up = m.objective(batch, reg);
    *param(&mut m, block, idx) = x - H;
    let down = m.objective(batch, reg);
    (up - down) / (2.0 * H)
}

fn check(scorer: ScorerKind, dim: usize, hidden: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES as u64 {
        let (model, batch, reg) = random_model(scorer, dim, hidden, seed);
        let grads = model.gradients(&batch, reg).unwrap();
        let d = model.dim;
        for u in 0..model.num_users {
            let analytic = grads.user(u as u32).map(<[f64]>::to_vec).unwrap_or(vec![0.0; d]);
            for c in 0..d {
                let n = numeric(&model, &batch, reg, Block::User, u * d + c);
                worst = worst.max(rel_err(analytic[c], n));
            }
        }
        for i in 0..model.num_items {
            let analytic = grads.item(i as u32).map(<[f64]>::to_vec).unwrap_or(vec![0.0; d]);
            for c in 0..d {
                let n = numeric(&model, &batch, reg, Block::Item, i * d + c);
                worst = worst.max(rel_err(analytic[c], n));
            }
        }
        for p in 0..model.scorer_params.len() {
            let n = numeric(&model, &batch, reg, Block::Scorer, p);
            worst = worst.max(rel_err(grads.scorer[p], n));
        }
    }
    worst
}

#[test]
fn gmf_gradients_match_finite_differences() {
    let worst = check(ScorerKind::Gmf, 3, 0);
    assert!(worst <= MAX_REL_ERR, "max relative error {worst:e}");
}

// Halving widths need 2F divisible by 2^H, so F=3 only admits one hidden
// layer; two hidden layers are checked at F=4.
#[test]
fn mlp_gradients_match_finite_differences() {
    for (dim, hidden) in [(3, 1), (4, 2)] {
        let worst = check(ScorerKind::Mlp, dim, hidden);
        assert!(worst <= MAX_REL_ERR, "F={dim} H={hidden}: max relative error {worst:e}");
    }
}

#[test]
fn untouched_rows_have_no_gradient() {
    let (model, batch, reg) = random_model(ScorerKind::Gmf, 3, 0, 7);
    let grads = model.gradients(&batch, reg).unwrap();
    for u in 0..model.num_users as u32 {
        assert_eq!(grads.user(u).is_some(), batch.iter().any(|t| t.user == u));
    }
    for i in 0..model.num_items as u32 {
        assert_eq!(grads.item(i).is_some(), batch.iter().any(|t| t.pos == i || t.neg == i));
    }
}
