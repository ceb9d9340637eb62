//! k-means with k-means++ seeding, plus the adjusted Rand index for
//! comparing partitions.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;

use crate::autograd::Matrix;
use crate::rng::Rng;

pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center for each row; ties go to the lower center index.
pub fn nearest(points: &Matrix, centers: &Matrix) -> Vec<usize> {
    points
        .rows()
        .into_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.rows().into_iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// k-means++ seeding: first center uniform, the rest proportional to
/// squared distance from the closest chosen center.
pub fn kmeans_pp_init(points: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = points.nrows();
    assert!(n > 0 && k > 0);
    let mut centers = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(pick)));
        }
    }
    centers
}

/// Lloyd iterations from k-means++ seeds. Returns `(centers, labels)`.
pub fn kmeans(points: &Matrix, k: usize, iters: usize, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let mut centers = kmeans_pp_init(points, k, rng);
    let mut labels = nearest(points, &centers);
    for _ in 0..iters {
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let mut row = sums.row_mut(l);
            row += &points.row(i);
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
                centers.row_mut(j).assign(&mean);
            }
        }
        let next = nearest(points, &centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    (centers, labels)
}

/// Sum of squared distances from each point to its center.
pub fn inertia(points: &Matrix, centers: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.row(i), centers.row(l)))
        .sum()
}

/// Best of `restarts` independent [`kmeans`] runs by inertia; earlier runs
/// win ties.
pub fn kmeans_best_of(points: &Matrix, k: usize, iters: usize, restarts: usize, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let mut best: Option<(f64, Matrix, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let (c, l) = kmeans(points, k, iters, rng);
        let score = inertia(points, &c, &l);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, c, l));
        }
    }
    let (_, c, l) = best.expect("at least one run");
    (c, l)
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as u64;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut ra: HashMap<usize, u64> = HashMap::new();
    let mut rb: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = ra.values().map(|&c| choose2(c)).sum();
    let sb: f64 = rb.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n);
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn ari_of_identical_partitions_is_one() {
        assert!((adjusted_rand_index(&[0, 0, 1, 1, 2], &[5, 5, 3, 3, 9]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ari_matches_hand_computation() {
        // contingency [[2,1],[0,2]]; index = 1 + 1 = 2; rows 3,2 -> 3+1 = 4;
        // cols 2,3 -> 1+3 = 4; expected = 16/10; max = 4
        let a = [0, 0, 0, 1, 1];
        let b = [0, 0, 1, 1, 1];
        let expect = (2.0 - 1.6) / (4.0 - 1.6);
        assert!((adjusted_rand_index(&a, &b) - expect).abs() < 1e-12);
    }

    #[test]
    fn kmeans_separates_blobs() {
        let pts = array![
            [0.0, 0.0],
            [0.1, 0.0],
            [0.0, 0.1],
            [5.0, 5.0],
            [5.1, 5.0],
            [5.0, 5.1]
        ];
        let (_, labels) = kmeans(&pts, 2, 20, &mut rng::stream(1, "t"));
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[0], labels[2]);
        assert_eq!(labels[3], labels[4]);
        assert_ne!(labels[0], labels[3]);
    }
}
