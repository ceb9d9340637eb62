use std::collections::HashSet;

use rand::Rng as _;

use super::InteractionGraph;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAX_NEGATIVE_RETRIES: usize = 1000;

/// Uniform `(user, positive, negative)` sampler over a graph's edges.
#[derive(Debug, Clone)]
pub struct BprSampler {
    edges: Vec<(usize, usize)>,
    observed: Vec<HashSet<usize>>,
    num_items: usize,
}

impl BprSampler {
    pub fn new(graph: &InteractionGraph) -> Self {
        let mut observed = vec![HashSet::new(); graph.num_users()];
        for &(u, i) in graph.edges() {
            observed[u].insert(i);
        }
        BprSampler {
            edges: graph.edges().to_vec(),
            observed,
            num_items: graph.num_items(),
        }
    }

    /// Draws `batch_size` triples. Positives come from a uniformly chosen
    /// edge, negatives uniformly from the user's unobserved items by
    /// rejection.
    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<(usize, usize, usize)>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.edges.is_empty() {
            return Err(Error::InvalidArgument("graph has no edges to sample".into()));
        }
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let (u, pos) = self.edges[rng.random_range(0..self.edges.len())];
            let mut neg = None;
            for _ in 0..MAX_NEGATIVE_RETRIES {
                let cand = rng.random_range(0..self.num_items);
                if !self.observed[u].contains(&cand) {
                    neg = Some(cand);
                    break;
                }
            }
            let neg = neg.ok_or(Error::Sampling {
                user: u,
                retries: MAX_NEGATIVE_RETRIES,
            })?;
            out.push((u, pos, neg));
        }
        Ok(out)
    }
}

pub fn sample_bpr_triples(
    graph: &InteractionGraph,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    BprSampler::new(graph).sample(batch_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn forced_triple() {
        let g = InteractionGraph::new(1, 2, vec![(0, 0)]).unwrap();
        let t = sample_bpr_triples(&g, 5, &mut rng::stream(0, rng::DATA)).unwrap();
        assert!(t.iter().all(|&x| x == (0, 0, 1)));
    }

    #[test]
    fn batch_respects_membership() {
        let edges: Vec<(usize, usize)> = (0..10).flat_map(|u| (0..4).map(move |k| (u, (u + k * 5) % 40))).collect();
        let g = InteractionGraph::new(10, 40, edges).unwrap();
        let sets = g.user_items();
        let t = sample_bpr_triples(&g, 256, &mut rng::stream(1, rng::DATA)).unwrap();
        assert_eq!(t.len(), 256);
        for (u, p, n) in t {
            assert!(sets[u].contains(&p));
            assert!(!sets[u].contains(&n));
        }
    }

    #[test]
    fn saturated_user_errors() {
        let g = InteractionGraph::new(1, 2, vec![(0, 0), (0, 1)]).unwrap();
        let err = sample_bpr_triples(&g, 1, &mut rng::stream(1, rng::DATA)).unwrap_err();
        assert!(matches!(err, Error::Sampling { user: 0, .. }));
    }

    #[test]
    fn zero_batch_rejected() {
        let g = InteractionGraph::new(1, 2, vec![(0, 0)]).unwrap();
        assert!(sample_bpr_triples(&g, 0, &mut rng::stream(1, rng::DATA)).is_err());
    }
}
