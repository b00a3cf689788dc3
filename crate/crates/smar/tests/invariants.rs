//! Property tests for the numeric and metric invariants.

use std::collections::HashSet;

use proptest::prelude::*;

use smar::numerics::{l2_normalize, softmax, Tape, Tensor};
use smar::objectives::in_batch_ce;
use smar::retrieval::metrics::prf_at_k;
use smar::retrieval::{topk, EmbeddingIndex, IndexMode};

fn finite_vec(len: usize, mag: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-mag..mag, len)
}

fn unit_matrix(b: usize, k: usize, data: Vec<f64>) -> Option<Tensor> {
    let mut out = Vec::with_capacity(b * k);
    for row in data.chunks(k) {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return None;
        }
        out.extend(row.iter().map(|v| v / norm));
    }
    Tensor::matrix(b, k, out).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        data in finite_vec(12, 60.0),
        shift in -40.0f64..40.0,
    ) {
        let x = Tensor::matrix(3, 4, data.clone()).unwrap();
        let y = softmax(&x, 1).unwrap();
        for r in 0..3 {
            let sum: f64 = y.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "row {r} sums to {sum}");
            prop_assert!(y.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        // Adding a per-row constant leaves the softmax unchanged.
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let ys = softmax(&Tensor::matrix(3, 4, shifted).unwrap(), 1).unwrap();
        for (a, b) in y.data().iter().zip(ys.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_idempotent_and_scale_invariant(
        data in finite_vec(8, 100.0),
        scale in 1e-3f64..1e3,
    ) {
        let x = Tensor::vector(data.clone()).unwrap();
        prop_assume!(x.l2_norm() > 1e-6);
        let once = l2_normalize(&x).unwrap();
        prop_assert!((once.l2_norm() - 1.0).abs() < 1e-9);

        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }

        let scaled = l2_normalize(
            &Tensor::vector(data.iter().map(|v| v * scale).collect()).unwrap(),
        )
        .unwrap();
        for (a, b) in once.data().iter().zip(scaled.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_linear_in_loss_combination(
        data in finite_vec(6, 2.0),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let base = Tensor::vector(data).unwrap().with_grad();
        let grad_of = |ca: f64, cb: f64| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(&base);
            let l1 = x.dot(x).unwrap();
            let l2 = x.gelu().unwrap().sum().unwrap();
            let loss = l1.scale(ca).unwrap().add(l2.scale(cb).unwrap()).unwrap();
            tape.backward(loss).unwrap().get(x).data().to_vec()
        };
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        let combo = grad_of(a, b);
        for i in 0..combo.len() {
            prop_assert!((combo[i] - (a * g1[i] + b * g2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn in_batch_ce_is_non_negative_and_permutation_invariant(
        qdata in finite_vec(20, 1.0),
        sdata in finite_vec(20, 1.0),
        tau in 0.05f64..2.0,
    ) {
        let (b, k) = (4, 5);
        let q = match unit_matrix(b, k, qdata) { Some(t) => t, None => return Ok(()) };
        let s = match unit_matrix(b, k, sdata) { Some(t) => t, None => return Ok(()) };
        let loss = in_batch_ce(&q, &s, tau).unwrap();
        prop_assert!(loss >= 0.0);

        let perm = [3usize, 1, 0, 2];
        let permute = |t: &Tensor| {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(b, k, data).unwrap()
        };
        let permuted = in_batch_ce(&permute(&q), &permute(&s), tau).unwrap();
        prop_assert!((loss - permuted).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_give_ln_b(b in 1usize..8) {
        // Identical rows make every pairwise score equal; the loss is ln B.
        let row = vec![0.6, 0.8];
        let mut data = Vec::new();
        for _ in 0..b {
            data.extend_from_slice(&row);
        }
        let e = Tensor::matrix(b, 2, data).unwrap();
        let loss = in_batch_ce(&e, &e, 1.0).unwrap();
        prop_assert!((loss - (b as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn metric_bounds_and_monotone_recall(
        n_ranked in 1usize..30,
        n_rel in 1usize..10,
        seed in 0u64..1000,
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<String> = (0..30).map(|i| format!("i{i:02}")).collect();
        ids.shuffle(&mut rng);
        let ranked: Vec<String> = ids[..n_ranked].to_vec();
        ids.shuffle(&mut rng);
        let relevant: HashSet<&str> = ids[..n_rel].iter().map(|s| s.as_str()).collect();

        let mut prev_recall = 0.0;
        for k in 1..=12 {
            let m = prf_at_k(&ranked, &relevant, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.recall));
            prop_assert!((0.0..=1.0).contains(&m.precision));
            prop_assert!((0.0..=1.0).contains(&m.f1));
            prop_assert!(m.precision <= (relevant.len() as f64 / k as f64).min(1.0) + 1e-12);
            prop_assert!(m.recall >= prev_recall - 1e-12, "recall must not drop with k");
            prev_recall = m.recall;
        }
    }

    #[test]
    fn topk_matches_full_sort_oracle(
        data in finite_vec(40, 1.0),
        qdata in finite_vec(4, 1.0),
        k in 1usize..12,
    ) {
        let index = match unit_matrix(10, 4, data) { Some(t) => t, None => return Ok(()) };
        let qnorm: f64 = qdata.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(qnorm > 1e-6);
        let q = Tensor::vector(qdata.iter().map(|v| v / qnorm).collect()).unwrap();
        let idx = EmbeddingIndex::new(
            IndexMode::Text,
            (0..10).map(|i| format!("item-{i}")).collect(),
            index,
        )
        .unwrap();
        let got = topk(&idx, &q, k).unwrap();

        let mut oracle: Vec<(String, f64)> = (0..10)
            .map(|r| {
                let s: f64 = idx.embeddings.row(r).iter().zip(q.data()).map(|(a, b)| a * b).sum();
                (idx.item_ids[r].clone(), s)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        oracle.truncate(k);
        prop_assert_eq!(got, oracle);
    }
}
