use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srns_core::data::{split_leave_one_out, synthetic};
use srns_core::eval::{build_ranked_list, ndcg_at_k, recall_at_k, Protocol, RankedList};
use srns_core::model::{ModelState, ScorerKind, TrainHyper};

fn brute_recall(items: &[u32], truth: &[u32], k: usize) -> f64 {
    let mut hits = 0;
    for g in truth {
        if let Some(p) = items.iter().position(|x| x == g) {
            if p < k {
                hits += 1;
            }
        }
    }
    hits as f64 / truth.len() as f64
}

fn brute_ndcg(items: &[u32], truth: &[u32], k: usize) -> f64 {
    let mut ranks: Vec<usize> = truth
        .iter()
        .filter_map(|g| items.iter().position(|x| x == g))
        .map(|p| p + 1)
        .filter(|&r| r <= k)
        .collect();
    ranks.sort_unstable();
    let mut total = 0.0;
    for r in ranks {
        total += 1.0 / ((r + 1) as f64).log2();
    }
    total
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..500 {
        let n = rng.random_range(1..40);
        let mut items: Vec<u32> = (0..n as u32 * 2).collect();
        items.shuffle(&mut rng);
        items.truncate(n);
        let mut truth: Vec<u32> = (0..n as u32 * 2).filter(|_| rng.random_bool(0.2)).collect();
        if truth.is_empty() {
            truth.push(items[rng.random_range(0..n)]);
        }
        let list = RankedList {
            user: 0,
            items: items.clone(),
            ground_truth: truth.clone(),
        };
        for k in [1, 3, 5, 10, 50] {
            assert_eq!(recall_at_k(&list, k), brute_recall(&items, &truth, k), "recall@{k}");
            assert_eq!(ndcg_at_k(&list, k), brute_ndcg(&items, &truth, k), "ndcg@{k}");
        }
    }
}

#[test]
fn ndcg1_equals_recall1_on_leave_one_out() {
    let ds = split_leave_one_out(&synthetic(60, 200, 12, 4, 5)).unwrap();
    let hyper = TrainHyper {
        embedding_dim: 4,
        ..TrainHyper::default()
    };
    let model = ModelState::init(ds.num_users, ds.num_items, &hyper, ScorerKind::Gmf, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut users = 0;
    for u in ds.test_users() {
        for protocol in [Protocol::Full, Protocol::Sampled100] {
            let list = build_ranked_list(&model, &ds, u, protocol, &mut rng).unwrap();
            assert_eq!(list.ground_truth.len(), 1);
            assert_eq!(ndcg_at_k(&list, 1), recall_at_k(&list, 1), "user {u}");
        }
        users += 1;
    }
    assert_eq!(users, 60);
}
