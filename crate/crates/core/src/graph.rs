//! Simple undirected graphs over dense node ids, BFS orderings and complements.

use std::collections::VecDeque;

use rand::seq::SliceRandom;

use crate::error::{input, Result};
use crate::rng;

/// Undirected simple graph on nodes `0..n`.
///
/// Edges are stored once as `(i, j)` with `i < j`, sorted; adjacency lists are
/// sorted and derived from the edge list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
}

impl Graph {
    /// Build a graph, rejecting self-loops, duplicate pairs and out-of-range ids.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut norm = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return input(format!("edge ({a}, {b}) out of range for {n} nodes"));
            }
            if a == b {
                return input(format!("self-loop on node {a}"));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        if let Some(w) = norm.windows(2).find(|w| w[0] == w[1]) {
            return input(format!("duplicate edge ({}, {})", w[0].0, w[0].1));
        }
        Ok(Self::from_sorted(n, norm))
    }

    fn from_sorted(n: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        Graph { n, edges, adj }
    }

    pub fn empty(n: usize) -> Self {
        Self::from_sorted(n, Vec::new())
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Self::from_sorted(n, edges)
    }

    pub fn path(n: usize) -> Self {
        Self::from_sorted(n, (1..n).map(|i| (i - 1, i)).collect())
    }

    /// Star with center 0 and leaves `1..=leaves`.
    pub fn star(leaves: usize) -> Self {
        Self::from_sorted(leaves + 1, (1..=leaves).map(|i| (0, i)).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && self.adj[i].binary_search(&j).is_ok()
    }

    /// Rebuild adjacency from the edge list and compare.
    pub fn is_consistent(&self) -> bool {
        let rebuilt = Self::from_sorted(self.n, self.edges.clone());
        rebuilt.adj == self.adj
            && self.edges.iter().all(|&(a, b)| a < b && b < self.n)
            && self.edges.windows(2).all(|w| w[0] < w[1])
    }

    /// Graph on the same nodes whose edges are exactly the non-edges of `self`.
    pub fn complement(&self) -> Graph {
        let mut edges = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2 - self.edges.len());
        for i in 0..self.n {
            let mut nb = self.adj[i].iter().peekable();
            for j in i + 1..self.n {
                while nb.peek().is_some_and(|&&x| x < j) {
                    nb.next();
                }
                if nb.peek() == Some(&&j) {
                    continue;
                }
                edges.push((i, j));
            }
        }
        Self::from_sorted(self.n, edges)
    }

    /// Breadth-first ordering from `start`.
    ///
    /// Neighbors discovered from one node are appended in a random order drawn
    /// from a stream keyed by `tiebreak_seed`. Unreached components are visited
    /// afterwards, each starting at its smallest node id.
    pub fn bfs_order(&self, start: usize, tiebreak_seed: u64) -> Result<NodeOrdering> {
        if start >= self.n {
            return input(format!("BFS start {start} out of range for {} nodes", self.n));
        }
        let mut rng = rng::stream(tiebreak_seed, &[0xBF5]);
        let mut visited = vec![false; self.n];
        let mut order = Vec::with_capacity(self.n);
        let mut queue = VecDeque::new();
        let mut next_root = 0;
        let mut root = Some(start);
        let mut fresh = Vec::new();
        while let Some(r) = root {
            visited[r] = true;
            queue.push_back(r);
            while let Some(u) = queue.pop_front() {
                order.push(u);
                fresh.clear();
                fresh.extend(self.adj[u].iter().copied().filter(|&v| !visited[v]));
                fresh.shuffle(&mut rng);
                for &v in &fresh {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
            while next_root < self.n && visited[next_root] {
                next_root += 1;
            }
            root = (next_root < self.n).then_some(next_root);
        }
        Ok(NodeOrdering::from_order(order))
    }
}

/// A permutation of `0..n` together with its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeOrdering {
    order: Vec<usize>,
    rank: Vec<usize>,
}

impl NodeOrdering {
    /// Panics if `order` is not a permutation.
    pub fn from_order(order: Vec<usize>) -> Self {
        let mut rank = vec![usize::MAX; order.len()];
        for (pos, &v) in order.iter().enumerate() {
            assert!(v < order.len() && rank[v] == usize::MAX, "not a permutation");
            rank[v] = pos;
        }
        NodeOrdering { order, rank }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_order((0..n).collect())
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn rank(&self) -> &[usize] {
        &self.rank
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Extend with trailing ids `len..n` in ascending order.
    pub fn extended(&self, n: usize) -> Self {
        let mut order = self.order.clone();
        order.extend(self.order.len()..n);
        Self::from_order(order)
    }
}
