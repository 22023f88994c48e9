//! Synthetic instance families (RB, random regular, Barabási–Albert, G(n,p))
//! and the plain-text edge-list format.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::graph::Graph;
use crate::rng;

/// Generator family with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Family {
    Rb { n_groups: usize, group_size: usize, p: f64 },
    Rrg { n: usize, d: usize },
    Ba { n: usize, m: usize },
    Gnp { n: usize, p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub family: Family,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<Graph> {
        match self.family {
            Family::Rb { n_groups, group_size, p } => gen_rb(n_groups, group_size, p, self.seed),
            Family::Rrg { n, d } => gen_rrg(n, d, self.seed),
            Family::Ba { n, m } => gen_ba(n, m, self.seed),
            Family::Gnp { n, p } => gen_gnp(n, p, self.seed),
        }
    }
}

/// RB-model graph: `n_groups` disjoint cliques of `group_size` nodes plus
/// random inter-group constraint edges.
///
/// With `α = ln k′ / ln g` and `r = −α / ln(1 − p)`, `⌊r·g·ln g⌋` rounds each pick
/// two distinct groups and join `⌈p·k′²⌉` random cross pairs. Smaller `p` gives
/// more rounds and more edges overall; `p = 1` adds none.
pub fn gen_rb(n_groups: usize, group_size: usize, p: f64, seed: u64) -> Result<Graph> {
    if n_groups < 2 || group_size < 2 || !(p > 0.0 && p <= 1.0) {
        return input(format!("RB needs n_groups >= 2, group_size >= 2, p in (0, 1]; got {n_groups}, {group_size}, {p}"));
    }
    let (g, k) = (n_groups as f64, group_size as f64);
    let mut edges = BTreeSet::new();
    for c in 0..n_groups {
        let base = c * group_size;
        for i in 0..group_size {
            for j in i + 1..group_size {
                edges.insert((base + i, base + j));
            }
        }
    }
    let alpha = k.ln() / g.ln();
    let r = if p >= 1.0 { 0.0 } else { -alpha / (1.0 - p).ln() };
    let rounds = (r * g * g.ln()).floor() as usize;
    let per_round = (p * k * k).ceil() as usize;
    let mut rng = rng::stream(seed, &[0x4B]);
    for _ in 0..rounds {
        let a = rng.gen_range(0..n_groups);
        let mut b = rng.gen_range(0..n_groups - 1);
        if b >= a {
            b += 1;
        }
        let mut pairs: Vec<(usize, usize)> =
            (0..group_size).flat_map(|i| (0..group_size).map(move |j| (i, j))).collect();
        let (pairs, _) = pairs.partial_shuffle(&mut rng, per_round.min(group_size * group_size));
        for &(i, j) in pairs.iter() {
            let (u, v) = (a * group_size + i, b * group_size + j);
            edges.insert((u.min(v), u.max(v)));
        }
    }
    Graph::new(n_groups * group_size, edges)
}

/// Draw RB graphs with `n_groups` and `group_size` uniform in the given inclusive
/// ranges and `p` uniform in `p_range`, keeping only graphs with node count inside
/// `n_range`. Each graph comes with the spec that regenerates it.
pub fn rb_dataset(
    count: usize,
    groups: (usize, usize),
    sizes: (usize, usize),
    p_range: (f64, f64),
    n_range: (usize, usize),
    seed: u64,
) -> Result<Vec<(Graph, GeneratorSpec)>> {
    let feasible = (groups.0..=groups.1).any(|g| (sizes.0..=sizes.1).any(|k| (n_range.0..=n_range.1).contains(&(g * k))));
    if !feasible {
        return input("no (n_groups, group_size) combination satisfies the size filter");
    }
    let mut out = Vec::with_capacity(count);
    let mut attempt = 0u64;
    while out.len() < count {
        let mut r = rng::stream(seed, &[0xDA7A, attempt]);
        attempt += 1;
        let g = r.gen_range(groups.0..=groups.1);
        let k = r.gen_range(sizes.0..=sizes.1);
        if !(n_range.0..=n_range.1).contains(&(g * k)) {
            continue;
        }
        let p = if p_range.0 == p_range.1 { p_range.0 } else { r.gen_range(p_range.0..p_range.1) };
        let spec = GeneratorSpec { family: Family::Rb { n_groups: g, group_size: k, p }, seed: rng::derive(seed, &[0x6B, attempt]) };
        out.push((spec.generate()?, spec));
    }
    Ok(out)
}

/// Uniformly random `d`-regular simple graph.
///
/// Stubs are paired from a shuffled list; a pair that would form a self-loop or a
/// repeated edge is returned to the pool and re-paired in the next pass. When no
/// admissible pair remains the whole pairing restarts.
pub fn gen_rrg(n: usize, d: usize, seed: u64) -> Result<Graph> {
    if d >= n.max(1) || (n * d) % 2 != 0 {
        return input(format!("RRG needs d < n and n*d even; got n={n}, d={d}"));
    }
    let mut rng = rng::stream(seed, &[0x2E6]);
    'restart: loop {
        let mut edges = BTreeSet::new();
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat(v).take(d)).collect();
        while !stubs.is_empty() {
            stubs.shuffle(&mut rng);
            let mut left = Vec::new();
            for pair in stubs.chunks(2) {
                let (u, v) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
                if u != v && edges.insert((u, v)) {
                    continue;
                }
                left.extend_from_slice(pair);
            }
            if !left.is_empty() {
                let admissible = left.iter().enumerate().any(|(i, &u)| {
                    left[i + 1..].iter().any(|&v| u != v && !edges.contains(&(u.min(v), u.max(v))))
                });
                if !admissible {
                    continue 'restart;
                }
            }
            stubs = left;
        }
        return Graph::new(n, edges);
    }
}

/// Barabási–Albert graph grown from a clique on `m + 1` nodes; each new node
/// attaches to `m` distinct existing nodes drawn proportionally to degree.
pub fn gen_ba(n: usize, m: usize, seed: u64) -> Result<Graph> {
    if m < 1 || m >= n {
        return input(format!("BA needs 1 <= m < n; got n={n}, m={m}"));
    }
    let mut rng = rng::stream(seed, &[0xBA]);
    let mut edges = Vec::new();
    // node v appears deg(v) times
    let mut urn = Vec::new();
    for i in 0..=m {
        for j in i + 1..=m {
            edges.push((i, j));
            urn.push(i);
            urn.push(j);
        }
    }
    let mut targets = Vec::with_capacity(m);
    for v in m + 1..n {
        targets.clear();
        while targets.len() < m {
            let t = urn[rng.gen_range(0..urn.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for &t in &targets {
            edges.push((t, v));
            urn.push(t);
            urn.push(v);
        }
    }
    Graph::new(n, edges)
}

/// Erdős–Rényi `G(n, p)`.
pub fn gen_gnp(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) {
        return input(format!("edge probability {p} outside [0, 1]"));
    }
    let mut rng = rng::stream(seed, &[0x6E7]);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    Graph::new(n, edges)
}

/// Parse an edge list: one `u v` pair per line, `#` starts a comment, labels are
/// arbitrary tokens relabeled to `0..n` in order of first occurrence. A line with a
/// single label declares a node without edges.
pub fn parse_edgelist(text: &str) -> Result<Graph> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut edges = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = body.split_whitespace().collect();
        match tokens[..] {
            [] => {}
            [a] => {
                intern(&mut ids, a);
            }
            [a, b] => {
                let u = intern(&mut ids, a);
                let v = intern(&mut ids, b);
                if u == v {
                    return Err(Error::Parse { line, msg: format!("self-loop on {a:?}") });
                }
                if !edges.insert((u.min(v), u.max(v))) {
                    return Err(Error::Parse { line, msg: format!("duplicate edge {a:?} {b:?}") });
                }
            }
            _ => return Err(Error::Parse { line, msg: format!("expected `u v`, found {:?}", body.trim()) }),
        }
    }
    Graph::new(ids.len(), edges)
}

fn intern<'a>(ids: &mut HashMap<&'a str, usize>, label: &'a str) -> usize {
    let next = ids.len();
    *ids.entry(label).or_insert(next)
}

pub fn load_edgelist(path: &Path) -> Result<Graph> {
    parse_edgelist(&std::fs::read_to_string(path)?)
}

/// Serialize so that [`parse_edgelist`] reproduces node ids exactly: every node is
/// declared on its own line first, then the edges follow.
pub fn write_edgelist(graph: &Graph) -> String {
    let mut s = format!("# nodes {} edges {}\n", graph.n(), graph.num_edges());
    for v in 0..graph.n() {
        writeln!(s, "{v}").unwrap();
    }
    for &(u, v) in graph.edges() {
        writeln!(s, "{u} {v}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ising::{encode, ProblemKind};

    #[test]
    fn rb_groups_are_cliques() {
        let g = gen_rb(2, 3, 1.0, 3).unwrap();
        assert_eq!(g.n(), 6);
        for c in 0..2 {
            for i in 0..3 {
                for j in i + 1..3 {
                    assert!(g.has_edge(3 * c + i, 3 * c + j));
                }
            }
        }
        assert_eq!(g.num_edges(), 6);
        assert_eq!(gen_rb(4, 5, 0.3, 9).unwrap(), gen_rb(4, 5, 0.3, 9).unwrap());
        assert!(gen_rb(1, 3, 0.5, 0).is_err());
        assert!(gen_rb(3, 3, 0.0, 0).is_err());
    }

    #[test]
    fn rb_smaller_p_means_more_edges() {
        let mean_edges = |p: f64| -> f64 {
            (0..40).map(|s| gen_rb(8, 5, p, s).unwrap().num_edges() as f64).sum::<f64>() / 40.0
        };
        let e: Vec<f64> = [0.2, 0.4, 0.6, 0.8, 1.0].iter().map(|&p| mean_edges(p)).collect();
        assert!(e.windows(2).all(|w| w[0] >= w[1]), "{e:?}");
    }

    #[test]
    fn rb_smaller_p_is_harder_for_greedy() {
        // gap between the optimum and degree-greedy grows as p falls
        let gap = |p: f64| -> f64 {
            (0..20)
                .map(|s| {
                    let g = gen_rb(6, 5, p, 100 + s).unwrap();
                    let inst = encode(ProblemKind::Mis, &g, 1.0, 1.1).unwrap();
                    let opt = crate::exact::solve_instance(&inst, 26).unwrap().best_energy;
                    let greedy = inst.energy(&crate::baselines::db_greedy(&inst)).unwrap();
                    greedy - opt
                })
                .sum::<f64>()
        };
        assert!(gap(0.25) >= gap(1.0));
    }

    #[test]
    fn rb_size_filter() {
        let data = rb_dataset(50, (20, 25), (9, 10), (0.3, 1.0), (200, 300), 4).unwrap();
        assert_eq!(data.len(), 50);
        for (g, spec) in &data {
            assert!((200..=300).contains(&g.n()));
            let Family::Rb { n_groups, group_size, .. } = spec.family else { panic!("not RB") };
            assert_eq!(g.n(), n_groups * group_size);
            assert_eq!(&spec.generate().unwrap(), g);
        }
        assert!(rb_dataset(1, (2, 2), (2, 2), (0.5, 0.5), (10, 20), 0).is_err());
    }

    #[test]
    fn rrg_examples() {
        assert_eq!(gen_rrg(4, 0, 1).unwrap(), Graph::empty(4));
        assert_eq!(gen_rrg(4, 3, 1).unwrap(), Graph::complete(4));
        assert!(gen_rrg(5, 3, 1).is_err());
        assert!(gen_rrg(4, 4, 1).is_err());
        for d in [3, 7, 10, 20] {
            let g = gen_rrg(100, d, d as u64).unwrap();
            assert!((0..100).all(|v| g.degree(v) == d));
        }
    }

    #[test]
    fn rrg_degrees_exact_on_random_params() {
        let mut r = rng::stream(11, &[]);
        for s in 0..100 {
            let n = r.gen_range(2..=200);
            let mut d = r.gen_range(0..n.min(12));
            if n * d % 2 == 1 {
                d -= 1;
            }
            let g = gen_rrg(n, d, s).unwrap();
            assert!(g.is_consistent());
            assert!((0..n).all(|v| g.degree(v) == d), "n={n} d={d}");
            assert_eq!(g, gen_rrg(n, d, s).unwrap());
        }
    }

    #[test]
    fn ba_small_tree() {
        let g = gen_ba(5, 1, 2).unwrap();
        assert_eq!(g.num_edges(), 4);
        // connected with n-1 edges means acyclic
        assert_eq!(g.bfs_order(0, 0).unwrap().len(), 5);
        let mut seen = vec![false; 5];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in g.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        assert!(seen.iter().all(|&x| x));
        assert!(gen_ba(3, 3, 0).is_err());
        assert!(gen_ba(3, 0, 0).is_err());
    }

    #[test]
    fn ba_edge_count_formula() {
        let mut r = rng::stream(12, &[]);
        for s in 0..100 {
            let n = r.gen_range(2..=300);
            let m = r.gen_range(1..n.min(8));
            let g = gen_ba(n, m, s).unwrap();
            assert_eq!(g.num_edges(), m * (m + 1) / 2 + (n - m - 1) * m);
        }
        for n in [200, 250, 300] {
            assert_eq!(gen_ba(n, 4, 1).unwrap().num_edges(), 10 + (n - 5) * 4);
            assert_eq!(gen_ba(n, 4, 1).unwrap(), gen_ba(n, 4, 1).unwrap());
        }
    }

    #[test]
    fn edgelist_parsing() {
        assert_eq!(parse_edgelist("0 1\n1 2").unwrap(), Graph::path(3));
        let g = parse_edgelist("a b\n# comment\nb c # trailing\n").unwrap();
        assert_eq!(g, Graph::path(3));
        match parse_edgelist("0 0") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_edgelist("0 1\n\n1 0") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_edgelist("0 1 2"), Err(Error::Parse { line: 1, .. })));
        // ids chosen by first occurrence
        let g = parse_edgelist("5 9\n9 7").unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn edgelist_round_trip_keeps_ids_and_isolated_nodes() {
        let g = Graph::new(6, [(0, 5), (2, 5), (1, 3)]).unwrap();
        assert_eq!(parse_edgelist(&write_edgelist(&g)).unwrap(), g);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        std::fs::write(&path, write_edgelist(&g)).unwrap();
        assert_eq!(load_edgelist(&path).unwrap(), g);
    }

    #[test]
    fn spec_serde_round_trip() {
        let spec = GeneratorSpec { family: Family::Rrg { n: 10, d: 3 }, seed: 4 };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"family":"rrg","n":10,"d":3,"seed":4}"#);
        let back: GeneratorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.generate().unwrap(), spec.generate().unwrap());
    }
}
