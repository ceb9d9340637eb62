use ndarray::Array2;
use proptest::prelude::*;

use mmrec_core::autograd::Tape;
use mmrec_core::backbone::propagate;
use mmrec_core::codebook::{assign_hard, assign_soft};
use mmrec_core::config::RunConfig;
use mmrec_core::dataset::{generate_synthetic, split_leave_one_out, InteractionGraph, SyntheticSpec};
use mmrec_core::diffusion::{forward_diffuse, make_schedule, ScheduleKind};
use mmrec_core::frontdoor::{build_causal_subgraph, concrete_sample, sample_mask};
use mmrec_core::metrics::evaluate;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn graph() -> impl Strategy<Value = InteractionGraph> {
    (1usize..6, 1usize..8).prop_flat_map(|(nu, ni)| {
        prop::collection::btree_set((0..nu, 0..ni), 1..=nu * ni)
            .prop_map(move |e| InteractionGraph::new(nu, ni, e.into_iter().collect()).unwrap())
    })
}

fn independent_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

proptest! {
    #[test]
    fn soft_rows_are_distributions((h, cb) in (1usize..5, 2usize..6, 1usize..5).prop_flat_map(|(n, k, d)| (matrix(n, d), matrix(k, d))), temp in 0.05f64..10.0) {
        let s = assign_soft(&h, &cb, temp).unwrap();
        for row in s.probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn moving_a_code_closer_raises_its_probability(h in matrix(1, 3), cb in matrix(3, 3), j in 0usize..3) {
        let before = assign_soft(&h, &cb, 1.0).unwrap().probs[[0, j]];
        let mut closer = cb.clone();
        let row = (&cb.row(j) + &h.row(0)) * 0.5;
        closer.row_mut(j).assign(&row);
        prop_assume!(cb.row(j) != h.row(0));
        let after = assign_soft(&h, &closer, 1.0).unwrap().probs[[0, j]];
        prop_assume!(before < 1.0 - 1e-12);
        prop_assert!(after > before);
    }

    #[test]
    fn soft_tends_to_hard(h in matrix(4, 3), cb in matrix(4, 3)) {
        let hard = assign_hard(&h, &cb).unwrap();
        // skip near-ties, where the limit is a mixture
        let d = |i: usize, j: usize| (0..3).map(|c| (h[[i, c]] - cb[[j, c]]).powi(2)).sum::<f64>();
        for i in 0..4 {
            let best = d(i, hard.labels[i]);
            prop_assume!((0..4).filter(|&j| j != hard.labels[i]).all(|j| d(i, j) - best > 1e-3));
        }
        let soft = assign_soft(&h, &cb, 1e-6).unwrap();
        let gap = (&soft.quantized - &hard.quantized).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(gap < 1e-4);
        prop_assert_eq!(soft.argmax(), hard.labels);
    }

    #[test]
    fn mask_matches_its_formula(omega in prop::collection::vec(-8.0f64..8.0, 1..10), tau in 0.05f64..5.0, seed in 0u64..1000) {
        let eps: Vec<f64> = (0..omega.len()).map(|k| ((seed as f64 + 1.0) * (k as f64 + 0.37)).fract().clamp(1e-6, 1.0 - 1e-6)).collect();
        let tape = Tape::new();
        let col = tape.leaf(Array2::from_shape_vec((omega.len(), 1), omega.clone()).unwrap());
        let rho = sample_mask(col, tau, &eps).unwrap();
        for (k, r) in rho.value().iter().enumerate() {
            let expect = independent_sigmoid(((eps[k] / (1.0 - eps[k])).ln() + omega[k]) / tau);
            prop_assert!((r - expect).abs() < 1e-12);
            prop_assert!((concrete_sample(omega[k], tau, eps[k]).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_adjacency_stays_inside_the_base_support(g in graph(), seed in 0u64..100) {
        let rho: Vec<f64> = (0..g.edges().len()).map(|k| ((k as u64 * 7919 + seed) % 101) as f64 / 100.0).collect();
        let sub = build_causal_subgraph(&g, &rho).unwrap();
        let base = g.norm_adjacency().to_dense();
        let masked = sub.adjacency.to_dense();
        for (b, m) in base.iter().zip(masked.iter()) {
            if *b == 0.0 {
                prop_assert_eq!(*m, 0.0);
            }
            prop_assert!(m.abs() <= b.abs() + 1e-15);
        }
        prop_assert_eq!(&masked, &masked.t());
        let ones = build_causal_subgraph(&g, &vec![1.0; g.edges().len()]).unwrap();
        prop_assert_eq!(ones.adjacency.to_dense(), base);
    }

    #[test]
    fn propagation_is_linear(g in graph(), alpha in -3.0f64..3.0, layers in 0usize..4) {
        let n = g.num_nodes();
        let e = Array2::from_shape_fn((n, 2), |(i, j)| (i as f64 * 0.7 - j as f64).sin());
        let a = propagate(g.norm_adjacency(), &(&e * alpha), layers);
        let b = propagate(g.norm_adjacency(), &e, layers) * alpha;
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn recall_and_ndcg_grow_with_k(scores in matrix(6, 12), held in prop::collection::vec(0usize..12, 6)) {
        let pairs: Vec<(usize, usize)> = held.iter().enumerate().map(|(u, &i)| (u, i)).collect();
        let train = vec![vec![0usize, 1]; 6];
        let r = evaluate(&scores, &pairs, &train, &[2, 5, 10]).unwrap();
        for (lo, hi) in [(2, 5), (5, 10)] {
            prop_assert!(r.recall(lo).unwrap() <= r.recall(hi).unwrap());
            prop_assert!(r.ndcg(lo).unwrap() <= r.ndcg(hi).unwrap());
        }
        for v in r.metrics.values() {
            prop_assert!((0.0..=1.0).contains(&v.recall) && (0.0..=1.0).contains(&v.ndcg));
        }
    }

    #[test]
    fn metrics_invariant_to_item_relabeling(scores in matrix(5, 9), shift in 1usize..9) {
        let perm: Vec<usize> = (0..9).map(|i| (i * 2 + shift) % 9).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort(); p == (0..9).collect::<Vec<_>>() });
        let pairs: Vec<(usize, usize)> = (0..5).map(|u| (u, (u * 4) % 9)).collect();
        let train: Vec<Vec<usize>> = (0..5).map(|u| vec![(u + 1) % 9]).collect();
        let mut permuted = Array2::zeros((5, 9));
        for u in 0..5 {
            for i in 0..9 {
                permuted[[u, perm[i]]] = scores[[u, i]];
            }
        }
        let pairs_p: Vec<(usize, usize)> = pairs.iter().map(|&(u, i)| (u, perm[i])).collect();
        let train_p: Vec<Vec<usize>> = train.iter().map(|t| t.iter().map(|&i| perm[i]).collect()).collect();
        // ties could legitimately reorder under relabeling
        let mut flat: Vec<f64> = scores.iter().cloned().collect();
        flat.sort_by(|a, b| a.total_cmp(b));
        prop_assume!(flat.windows(2).all(|w| w[0] != w[1]));
        let a = evaluate(&scores, &pairs, &train, &[1, 3]).unwrap();
        let b = evaluate(&permuted, &pairs_p, &train_p, &[1, 3]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn forward_step_zero_is_identity(h in matrix(3, 2), noise in matrix(3, 2)) {
        let s = make_schedule(10, 1e-4, 0.02, ScheduleKind::Cosine).unwrap();
        prop_assert_eq!(forward_diffuse(&h, 0, &noise, &s).unwrap(), h.clone());
        prop_assert!(forward_diffuse(&h, 11, &noise, &s).is_err());
    }

    #[test]
    fn split_parts_are_disjoint(g in graph(), seed in 0u64..50) {
        let s = split_leave_one_out(&g, seed);
        let train = s.train_graph(&g).unwrap().user_items();
        for &(u, i) in s.validation_pairs.iter().chain(&s.test_pairs) {
            prop_assert!(!train[u].contains(&i));
        }
        for (&(u1, v), &(u2, t)) in s.validation_pairs.iter().zip(&s.test_pairs) {
            prop_assert_eq!(u1, u2);
            prop_assert_ne!(v, t);
        }
        prop_assert_eq!(s.train_edges.len() + s.validation_pairs.len() + s.test_pairs.len(), g.edges().len());
    }

    #[test]
    fn config_hash_ignores_key_order(dim in 1usize..100, lr in 1e-5f64..1.0, seed in 0u64..1000) {
        let a = format!("seed = {seed}\n[model]\ndim = {dim}\nlayers = 3\n[train]\nlr = {lr}\nepochs = 4\n");
        let b = format!("seed = {seed}\n[train]\nepochs = 4\nlr = {lr}\n[model]\nlayers = 3\ndim = {dim}\n");
        let ca = RunConfig::from_toml_str(&a).unwrap();
        let cb = RunConfig::from_toml_str(&b).unwrap();
        prop_assert_eq!(ca.hash(), cb.hash());
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SyntheticSpec::new(50, 60, 3, 0.7, 0.4, 12);
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.graph.edges(), b.graph.edges());
    assert_eq!(a.visual, b.visual);
    assert_eq!(a.textual, b.textual);
    assert_eq!(a.deconfounded_test, b.deconfounded_test);
    assert_eq!(split_leave_one_out(&a.graph, 4), split_leave_one_out(&b.graph, 4));
}
