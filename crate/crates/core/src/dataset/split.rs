use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::InteractionGraph;
use crate::error::Result;
use crate::rng;

/// Leave-one-out partition of a graph's edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train_edges: Vec<(usize, usize)>,
    pub validation_pairs: Vec<(usize, usize)>,
    pub test_pairs: Vec<(usize, usize)>,
    /// Users with fewer than three interactions; all their edges train.
    pub train_only_users: usize,
}

impl SplitSet {
    /// The graph induced by the training edges only.
    pub fn train_graph(&self, full: &InteractionGraph) -> Result<InteractionGraph> {
        InteractionGraph::new(full.num_users(), full.num_items(), self.train_edges.clone())
    }
}

/// Holds out each qualifying user's most recent interaction for test and
/// the one before it for validation.
///
/// Users with fewer than three interactions keep everything in training.
/// When a user has any edge without a timestamp, their interactions are
/// ordered by a seeded shuffle instead; timestamp ties are also broken by
/// that shuffle.
pub fn split_leave_one_out(graph: &InteractionGraph, seed: u64) -> SplitSet {
    let mut rng = rng::stream(seed, rng::SPLIT);
    let mut per_user: Vec<Vec<(usize, Option<i64>)>> = vec![Vec::new(); graph.num_users()];
    for (k, &(u, i)) in graph.edges().iter().enumerate() {
        per_user[u].push((i, graph.timestamps()[k]));
    }

    let mut split = SplitSet {
        train_edges: Vec::new(),
        validation_pairs: Vec::new(),
        test_pairs: Vec::new(),
        train_only_users: 0,
    };
    for (u, mut items) in per_user.into_iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        if items.len() < 3 {
            split.train_only_users += 1;
            split.train_edges.extend(items.iter().map(|&(i, _)| (u, i)));
            continue;
        }
        items.shuffle(&mut rng);
        if items.iter().all(|(_, t)| t.is_some()) {
            items.sort_by_key(|&(_, t)| t);
        }
        let test = items.pop().expect("len >= 3");
        let val = items.pop().expect("len >= 2");
        split.test_pairs.push((u, test.0));
        split.validation_pairs.push((u, val.0));
        split.train_edges.extend(items.iter().map(|&(i, _)| (u, i)));
    }
    if split.train_only_users > 0 {
        log::info!(
            "{} users have fewer than 3 interactions and are train-only",
            split.train_only_users
        );
    }
    split
}
