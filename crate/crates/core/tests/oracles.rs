//! Library operations against independent brute-force implementations.

use std::collections::HashSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use mmrec_core::backbone::propagate;
use mmrec_core::codebook::assign_hard;
use mmrec_core::dataset::{sample_bpr_triples, InteractionGraph, Modality, ModalityFeatures};
use mmrec_core::diffusion::{make_schedule, mean_from_x0, NoiseSchedule, ScheduleKind};
use mmrec_core::metrics::evaluate;
use mmrec_core::rng::{self, Rng};
use mmrec_core::semantic_graph::{build_knn_graph, fuse_and_normalize};

fn gaussian(rng: &mut Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Full sort of every candidate; returns `None` when the k-th and
/// (k+1)-th similarities are too close to order reliably.
fn brute_knn(x: &Array2<f64>, k: usize) -> Option<Vec<Vec<usize>>> {
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut out = Vec::new();
    for i in 0..rows.len() {
        let mut sims: Vec<(f64, usize)> = (0..rows.len())
            .filter(|&j| j != i)
            .map(|j| (cosine(&rows[i], &rows[j]), j))
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if sims.len() > k && (sims[k - 1].0 - sims[k].0).abs() < 1e-9 {
            return None;
        }
        out.push(sims[..k].iter().map(|s| s.1).collect());
    }
    Some(out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_exhaustive_search(n in 3usize..20, dim in 1usize..6, k_frac in 0.0f64..1.0, seed in 0u64..1000) {
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        let x = gaussian(&mut rng::stream(seed, "test"), n, dim);
        let expected = brute_knn(&x, k);
        prop_assume!(expected.is_some());
        let g = build_knn_graph(&ModalityFeatures::new(Modality::Visual, x).unwrap(), k).unwrap();
        prop_assert_eq!(g.neighbors, expected.unwrap());
    }
}

#[test]
fn fused_graph_matches_dense_normalization() {
    let mut r = rng::stream(3, "test");
    let (n, k, w) = (9, 3, 0.3);
    let v = ModalityFeatures::new(Modality::Visual, gaussian(&mut r, n, 4)).unwrap();
    let t = ModalityFeatures::new(Modality::Textual, gaussian(&mut r, n, 5)).unwrap();
    let gv = build_knn_graph(&v, k).unwrap();
    let gt = build_knn_graph(&t, k).unwrap();
    let mut dense = Array2::<f64>::zeros((n, n));
    for (g, wt) in [(&gv, w), (&gt, 1.0 - w)] {
        for (i, nb) in g.neighbors.iter().enumerate() {
            for &j in nb {
                dense[[i, j]] += wt;
            }
        }
    }
    let deg: Vec<f64> = dense.rows().into_iter().map(|r| r.sum()).collect();
    let expected = Array2::from_shape_fn((n, n), |(i, j)| dense[[i, j]] / (deg[i] * deg[j]).sqrt());
    let fused = fuse_and_normalize(gv, gt, w).unwrap().fused.to_dense();
    for (a, b) in fused.iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn random_graph(r: &mut Rng, nu: usize, ni: usize, p: f64) -> InteractionGraph {
    let mut edges = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            if r.random::<f64>() < p {
                edges.push((u, i));
            }
        }
    }
    InteractionGraph::new(nu, ni, edges).unwrap()
}

fn dense_bipartite(g: &InteractionGraph) -> Array2<f64> {
    let (nu, n) = (g.num_users(), g.num_nodes());
    let mut a = Array2::<f64>::zeros((n, n));
    for &(u, i) in g.edges() {
        a[[u, nu + i]] = 1.0;
        a[[nu + i, u]] = 1.0;
    }
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn((n, n), |(x, y)| {
        if a[[x, y]] == 0.0 {
            0.0
        } else {
            1.0 / (deg[x] * deg[y]).sqrt()
        }
    })
}

#[test]
fn propagation_equals_averaged_dense_powers() {
    let mut r = rng::stream(11, "test");
    for layers in 0..4 {
        let g = random_graph(&mut r, 5, 7, 0.4);
        let e0 = gaussian(&mut r, g.num_nodes(), 3);
        let a = dense_bipartite(&g);
        let mut acc = e0.clone();
        let mut pow = Array2::<f64>::eye(g.num_nodes());
        for _ in 0..layers {
            pow = pow.dot(&a);
            acc = acc + pow.dot(&e0);
        }
        let expected = acc / (layers + 1) as f64;
        assert_eq!(g.norm_adjacency().to_dense().dim(), a.dim());
        let got = propagate(g.norm_adjacency(), &e0, layers);
        for (x, y) in got.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12, "layers {layers}");
        }
    }
}

#[test]
fn two_node_layer_mean() {
    let g = InteractionGraph::new(1, 1, vec![(0, 0)]).unwrap();
    let e0 = ndarray::array![[1.0, 2.0], [5.0, -4.0]];
    let out = propagate(g.norm_adjacency(), &e0, 1);
    assert_eq!(out.row(0).to_vec(), vec![3.0, -1.0]);
}

/// Composes `q(h_t | h_{t−1}) = N(√α_t·h, β_t)` one step at a time.
fn composed_kernel(s: &NoiseSchedule, t: usize) -> (f64, f64) {
    let (mut mean, mut var) = (1.0f64, 0.0f64);
    for step in 1..=t {
        let b = s.beta[step - 1];
        mean *= (1.0 - b).sqrt();
        var = (1.0 - b) * var + b;
    }
    (mean, var)
}

proptest! {
    #[test]
    fn closed_form_kernel_equals_composition(
        steps in 1usize..=50,
        start in 1e-5f64..0.05,
        width in 0.0f64..0.3,
        cosine in any::<bool>(),
    ) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = make_schedule(steps, start, start + width, kind).unwrap();
        for t in 1..=steps {
            let (m, v) = composed_kernel(&s, t);
            let ab = s.alpha_bar_at(t);
            prop_assert!((m - ab.sqrt()).abs() < 1e-6);
            prop_assert!((v - (1.0 - ab)).abs() < 1e-6);
        }
    }

    /// With the true clean state, the reverse mean is the Gaussian
    /// posterior mean of `q(h_{t−1} | h_t, h_0)`.
    #[test]
    fn reverse_mean_with_true_x0_is_posterior_mean(steps in 2usize..30, t_frac in 0.0f64..1.0, seed in 0u64..100) {
        let s = make_schedule(steps, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let t = 1 + ((steps - 1) as f64 * t_frac) as usize;
        let mut r = rng::stream(seed, "test");
        let x0 = gaussian(&mut r, 3, 4);
        let ht = gaussian(&mut r, 3, 4);
        let (ab, ab_prev, b) = (s.alpha_bar_at(t), s.alpha_bar_at(t - 1), s.beta_at(t));
        let c0 = ab_prev.sqrt() * b / (1.0 - ab);
        let ct = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let expected = &x0 * c0 + &ht * ct;
        let got = mean_from_x0(&ht, &x0, t, &s);
        for (a, e) in got.iter().zip(expected.iter()) {
            prop_assert!((a - e).abs() < 1e-9);
        }
        let var = (1.0 - ab_prev) / (1.0 - ab) * b;
        prop_assert!((s.posterior_var_at(t) - var).abs() < 1e-15);
    }
}

#[test]
fn two_step_posterior_variance_fixture() {
    let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.1, 0.2]).unwrap();
    assert!((s.alpha_bar_at(1) - 0.9).abs() < 1e-15);
    assert!((s.alpha_bar_at(2) - 0.72).abs() < 1e-15);
    assert!((s.posterior_var_at(2) - 0.1 * 0.2 / 0.28).abs() < 1e-9);
    assert!((s.posterior_var_at(2) - 0.0714286).abs() < 1e-7);
}

#[test]
fn negatives_are_uniform_over_unobserved_items() {
    // user 0 owns items {0, 3}; 8 candidates remain
    let g = InteractionGraph::new(1, 10, vec![(0, 0), (0, 3)]).unwrap();
    let draws = 40_000;
    let triples = sample_bpr_triples(&g, draws, &mut rng::stream(5, rng::DATA)).unwrap();
    let mut counts = [0usize; 10];
    for (_, _, n) in triples {
        counts[n] += 1;
    }
    assert_eq!(counts[0] + counts[3], 0);
    let expected = draws as f64 / 8.0;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != 0 && *i != 3)
        .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(chi2);
    assert!(p > 1e-3, "chi2 {chi2}, p {p}");
}

#[test]
fn hard_assignment_matches_exhaustive_nearest_code() {
    let mut r = rng::stream(17, "test");
    for _ in 0..1000 {
        let k = r.random_range(1..=16);
        let d = r.random_range(1..=32);
        let n = r.random_range(1..=12);
        let cb = gaussian(&mut r, k, d);
        let mut h = gaussian(&mut r, n, d);
        if r.random::<f64>() < 0.2 {
            // exact hits and duplicated codes exercise ties
            h.row_mut(0).assign(&cb.row(k - 1));
        }
        let got = assign_hard(&h, &cb).unwrap();
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for j in 0..k {
                let dist: f64 = (0..d).map(|c| (h[[i, c]] - cb[[j, c]]).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            assert_eq!(got.labels[i], best.1);
            assert_eq!(got.quantized.row(i), cb.row(best.1));
        }
    }
}

/// Rank of `held` among unmasked items: 1 + number of items that beat it.
fn brute_rank(scores: &[f64], masked: &HashSet<usize>, held: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| j != held && !masked.contains(&j))
        .filter(|&j| scores[j] > scores[held] || (scores[j] == scores[held] && j < held))
        .count()
}

#[test]
fn metrics_match_brute_force() {
    let mut r = rng::stream(23, "test");
    for _ in 0..50 {
        let nu = r.random_range(2..20);
        let ni = r.random_range(5..30);
        // coarse scores make ties common
        let scores = Array2::from_shape_simple_fn((nu, ni), || (r.random_range(0..6)) as f64);
        let mut train: Vec<Vec<usize>> = vec![Vec::new(); nu];
        let mut pairs = Vec::new();
        for (u, t) in train.iter_mut().enumerate() {
            for i in 0..ni {
                if r.random::<f64>() < 0.2 {
                    t.push(i);
                }
            }
            pairs.push((u, r.random_range(0..ni)));
        }
        let ks = [1, 3, 10];
        let report = evaluate(&scores, &pairs, &train, &ks).unwrap();
        for &k in &ks {
            let (mut rec, mut ndcg) = (0.0, 0.0);
            for &(u, held) in &pairs {
                let masked: HashSet<usize> = train[u].iter().copied().filter(|&i| i != held).collect();
                let rank = brute_rank(scores.row(u).as_slice().unwrap(), &masked, held);
                if rank <= k {
                    rec += 1.0;
                    ndcg += 1.0 / ((rank + 1) as f64).log2();
                }
            }
            let n = pairs.len() as f64;
            assert_eq!(report.recall(k).unwrap(), rec / n);
            assert!((report.ndcg(k).unwrap() - ndcg / n).abs() < 1e-15);
        }
    }
}
