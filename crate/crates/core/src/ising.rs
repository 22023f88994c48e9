//! Ising models, the problem encodings built on them, feasibility repair and
//! energy standardization.
//!
//! An [`IsingModel`] stores `E(σ) = Σ_{i<j} J_ij σ_i σ_j + Σ_i B_i σ_i + offset`.
//! The offset keeps the constants produced by rewriting a 0/1 objective in
//! spin variables, so spin-form and binary-form energies agree exactly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::graph::{Graph, NodeOrdering};

/// Quadratic spin energy with sparse couplings.
#[derive(Clone, Debug, PartialEq)]
pub struct IsingModel {
    n: usize,
    couplings: Vec<(usize, usize, f64)>,
    fields: Vec<f64>,
    offset: f64,
    adj: Vec<Vec<(usize, f64)>>,
}

impl IsingModel {
    /// Couplings may be given in either index order; zero entries are dropped and
    /// repeated pairs are rejected.
    pub fn new(
        n: usize,
        couplings: impl IntoIterator<Item = (usize, usize, f64)>,
        fields: Vec<f64>,
        offset: f64,
    ) -> Result<Self> {
        if fields.len() != n {
            return input(format!("{} fields for {n} spins", fields.len()));
        }
        let mut cs = Vec::new();
        for (a, b, j) in couplings {
            if a >= n || b >= n || a == b {
                return input(format!("invalid coupling ({a}, {b}) for {n} spins"));
            }
            if !j.is_finite() {
                return input(format!("non-finite coupling on ({a}, {b})"));
            }
            if j != 0.0 {
                cs.push((a.min(b), a.max(b), j));
            }
        }
        cs.sort_by_key(|&(a, b, _)| (a, b));
        if cs.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return input("repeated coupling pair");
        }
        let mut adj = vec![Vec::new(); n];
        for &(a, b, j) in &cs {
            adj[a].push((b, j));
            adj[b].push((a, j));
        }
        Ok(IsingModel { n, couplings: cs, fields, offset, adj })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn couplings(&self) -> &[(usize, usize, f64)] {
        &self.couplings
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// `(neighbor, J)` pairs of spin `i`.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    /// Energy of `s`; errors on length mismatch.
    pub fn energy(&self, s: &SpinState) -> Result<f64> {
        if s.len() != self.n {
            return input(format!("state of length {} for {} spins", s.len(), self.n));
        }
        Ok(self.energy_of(s.spins()))
    }

    pub(crate) fn energy_of(&self, s: &[i8]) -> f64 {
        let mut e = self.offset;
        for &(a, b, j) in &self.couplings {
            e += j * f64::from(s[a]) * f64::from(s[b]);
        }
        for (b, &x) in self.fields.iter().zip(s) {
            e += b * f64::from(x);
        }
        e
    }

    /// `B_i + Σ_j J_ij σ_j` over assigned neighbors (spin value 0 = unassigned).
    pub fn local_field(&self, s: &[i8], i: usize) -> f64 {
        self.fields[i] + self.adj[i].iter().map(|&(k, j)| j * f64::from(s[k])).sum::<f64>()
    }

    /// Same energy function with `extra` appended spins that have no field and no couplings.
    pub fn padded(&self, extra: usize) -> IsingModel {
        let mut fields = self.fields.clone();
        fields.resize(self.n + extra, 0.0);
        let mut adj = self.adj.clone();
        adj.resize(self.n + extra, Vec::new());
        IsingModel { n: self.n + extra, couplings: self.couplings.clone(), fields, offset: self.offset, adj }
    }

    /// `(E - shift) / scale` as a model.
    pub fn affine(&self, shift: f64, scale: f64) -> IsingModel {
        IsingModel {
            n: self.n,
            couplings: self.couplings.iter().map(|&(a, b, j)| (a, b, j / scale)).collect(),
            fields: self.fields.iter().map(|b| b / scale).collect(),
            offset: (self.offset - shift) / scale,
            adj: self.adj.iter().map(|l| l.iter().map(|&(k, j)| (k, j / scale)).collect()).collect(),
        }
    }
}

/// Vector of ±1 spins.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinState(Vec<i8>);

impl SpinState {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if spins.iter().any(|&x| x != 1 && x != -1) {
            return input("spins must be -1 or +1");
        }
        Ok(SpinState(spins))
    }

    pub fn all(n: usize, value: i8) -> Self {
        assert!(value == 1 || value == -1);
        SpinState(vec![value; n])
    }

    /// `q_i = (σ_i + 1) / 2`.
    pub fn from_q(q: &[bool]) -> Self {
        SpinState(q.iter().map(|&b| if b { 1 } else { -1 }).collect())
    }

    /// Bit `i` of `mask` set means `σ_i = +1`.
    pub fn from_mask(n: usize, mask: u64) -> Self {
        SpinState((0..n).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect())
    }

    pub fn to_mask(&self) -> u64 {
        self.0.iter().enumerate().filter(|(_, &s)| s == 1).map(|(i, _)| 1u64 << i).sum()
    }

    pub fn spins(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn q(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn qs(&self) -> Vec<bool> {
        self.0.iter().map(|&s| s == 1).collect()
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i] = -self.0[i];
    }

    pub fn set(&mut self, i: usize, value: i8) {
        assert!(value == 1 || value == -1);
        self.0[i] = value;
    }

    pub fn truncated(&self, n: usize) -> SpinState {
        SpinState(self.0[..n].to_vec())
    }

    /// Compact `0`/`1` string of the q-variables.
    pub fn to_bitstring(&self) -> String {
        self.0.iter().map(|&s| if s == 1 { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(1),
                '0' => Ok(-1),
                _ => input(format!("invalid bit {c:?}")),
            })
            .collect::<Result<Vec<i8>>>()
            .map(SpinState)
    }
}

/// `σ_v (B_v + Σ_{u before v} J_uv σ_u)` for the node at position `step` of `ordering`.
///
/// `partial` uses 0 for unassigned spins; every spin at positions `..=step` must be set.
pub fn delta_energy(model: &IsingModel, partial: &[i8], ordering: &NodeOrdering, step: usize) -> Result<f64> {
    if partial.len() != model.n() || ordering.len() != model.n() {
        return input("length mismatch between model, state and ordering");
    }
    if step >= model.n() {
        return input(format!("step {step} beyond {} spins", model.n()));
    }
    if let Some(p) = (0..=step).find(|&p| partial[ordering.order()[p]] == 0) {
        return Err(Error::State(format!("spin at ordering position {p} is unassigned")));
    }
    let v = ordering.order()[step];
    let rank = ordering.rank();
    let prefix: f64 =
        model.neighbors(v).iter().filter(|&&(u, _)| rank[u] < step).map(|&(u, j)| j * f64::from(partial[u])).sum();
    Ok(f64::from(partial[v]) * (prefix + model.fields()[v]))
}

/// Per-step energy increments of a full state along `ordering`; they sum to `E(σ) - offset`.
pub fn delta_energies(model: &IsingModel, s: &SpinState, ordering: &NodeOrdering) -> Result<Vec<f64>> {
    (0..model.n()).map(|t| delta_energy(model, s.spins(), ordering, t)).collect()
}

/// The four supported problem kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Mis,
    Mvc,
    MaxCl,
    MaxCut,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [ProblemKind::Mis, ProblemKind::Mvc, ProblemKind::MaxCl, ProblemKind::MaxCut];

    pub fn is_constrained(self) -> bool {
        self != ProblemKind::MaxCut
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Mis => "mis",
            ProblemKind::Mvc => "mvc",
            ProblemKind::MaxCl => "maxcl",
            ProblemKind::MaxCut => "maxcut",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mis" => Ok(ProblemKind::Mis),
            "mvc" => Ok(ProblemKind::Mvc),
            "maxcl" | "maxclique" => Ok(ProblemKind::MaxCl),
            "maxcut" => Ok(ProblemKind::MaxCut),
            other => input(format!("unknown problem kind {other:?}")),
        }
    }
}

/// A graph problem together with its Ising encoding.
///
/// For maximum clique, `graph` is the complement of `original` and the energy is
/// the independent-set energy on it.
#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub kind: ProblemKind,
    pub graph: Graph,
    pub original: Graph,
    pub penalty_a: f64,
    pub penalty_b: f64,
    pub model: IsingModel,
}

/// Encode `graph` as an Ising model for `kind`. Penalties are ignored for max-cut.
pub fn encode(kind: ProblemKind, graph: &Graph, penalty_a: f64, penalty_b: f64) -> Result<ProblemInstance> {
    if kind.is_constrained() && !(penalty_a > 0.0 && penalty_a < penalty_b && penalty_b.is_finite()) {
        return input(format!("penalties must satisfy 0 < A < B, got A={penalty_a}, B={penalty_b}"));
    }
    let working = match kind {
        ProblemKind::MaxCl => graph.complement(),
        _ => graph.clone(),
    };
    let n = working.n();
    let m = working.num_edges() as f64;
    let (a, b) = (penalty_a, penalty_b);
    let deg = |i: usize| working.degree(i) as f64;
    let (coupling, fields, offset) = match kind {
        // q_i q_j = (σ_iσ_j + σ_i + σ_j + 1) / 4
        ProblemKind::Mis | ProblemKind::MaxCl => {
            (b / 4.0, (0..n).map(|i| -a / 2.0 + b / 4.0 * deg(i)).collect(), -a * n as f64 / 2.0 + b * m / 4.0)
        }
        // (1 - q_i)(1 - q_j) = (σ_iσ_j - σ_i - σ_j + 1) / 4
        ProblemKind::Mvc => {
            (b / 4.0, (0..n).map(|i| a / 2.0 - b / 4.0 * deg(i)).collect(), a * n as f64 / 2.0 + b * m / 4.0)
        }
        ProblemKind::MaxCut => (0.5, vec![0.0; n], -m / 2.0),
    };
    let model = IsingModel::new(n, working.edges().iter().map(|&(i, j)| (i, j, coupling)), fields, offset)?;
    let (penalty_a, penalty_b) = if kind.is_constrained() { (a, b) } else { (0.0, 0.0) };
    Ok(ProblemInstance { kind, graph: working, original: graph.clone(), penalty_a, penalty_b, model })
}

/// The 0/1 objective evaluated directly on the original graph.
pub fn binary_energy(kind: ProblemKind, original: &Graph, a: f64, b: f64, q: &[bool]) -> f64 {
    let x = |i: usize| if q[i] { 1.0 } else { 0.0 };
    let n = original.n();
    let count: f64 = (0..n).map(x).sum();
    match kind {
        ProblemKind::Mvc => a * count + b * original.edges().iter().map(|&(i, j)| (1.0 - x(i)) * (1.0 - x(j))).sum::<f64>(),
        ProblemKind::Mis => -a * count + b * original.edges().iter().map(|&(i, j)| x(i) * x(j)).sum::<f64>(),
        ProblemKind::MaxCl => {
            let mut pen = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    if !original.has_edge(i, j) {
                        pen += x(i) * x(j);
                    }
                }
            }
            -a * count + b * pen
        }
        ProblemKind::MaxCut => {
            let s = |i: usize| 2.0 * x(i) - 1.0;
            -original.edges().iter().map(|&(i, j)| (1.0 - s(i) * s(j)) / 2.0).sum::<f64>()
        }
    }
}

impl ProblemInstance {
    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn energy(&self, s: &SpinState) -> Result<f64> {
        self.model.energy(s)
    }

    /// Number of violated constraints (the count behind the B-term).
    pub fn violations(&self, s: &SpinState) -> usize {
        let q = s.spins();
        match self.kind {
            ProblemKind::Mis | ProblemKind::MaxCl => {
                self.graph.edges().iter().filter(|&&(i, j)| q[i] == 1 && q[j] == 1).count()
            }
            ProblemKind::Mvc => self.graph.edges().iter().filter(|&&(i, j)| q[i] == -1 && q[j] == -1).count(),
            ProblemKind::MaxCut => 0,
        }
    }

    pub fn is_feasible(&self, s: &SpinState) -> bool {
        self.violations(s) == 0
    }

    /// Number of selected nodes (`q_i = 1`).
    pub fn set_size(&self, s: &SpinState) -> usize {
        s.spins().iter().filter(|&&x| x == 1).count()
    }

    /// Flip the spin involved in the most violations, lowest id first on ties,
    /// toward its constraint-satisfying value until no violation remains.
    pub fn repair(&self, s: &SpinState) -> SpinState {
        let mut out = s.clone();
        let bad: i8 = match self.kind {
            ProblemKind::MaxCut => return out,
            // a selected node conflicting with selected neighbors
            ProblemKind::Mis | ProblemKind::MaxCl => 1,
            // an unselected node with unselected neighbors (uncovered edges)
            ProblemKind::Mvc => -1,
        };
        let n = self.graph.n();
        let mut count: Vec<usize> = (0..n)
            .map(|i| {
                if out.spins()[i] == bad {
                    self.graph.neighbors(i).iter().filter(|&&j| out.spins()[j] == bad).count()
                } else {
                    0
                }
            })
            .collect();
        loop {
            let (best, &c) = match count.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) {
                Some(x) => x,
                None => break,
            };
            if c == 0 {
                break;
            }
            out.set(best, -bad);
            count[best] = 0;
            for &j in self.graph.neighbors(best) {
                if out.spins()[j] == bad {
                    count[j] -= 1;
                }
            }
        }
        out
    }
}

/// Mean and standard deviation used to put energies on a common scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyScale {
    pub mean: f64,
    pub std: f64,
}

impl EnergyScale {
    pub const IDENTITY: EnergyScale = EnergyScale { mean: 0.0, std: 1.0 };

    /// Population mean and standard deviation of `energies`.
    pub fn fit(energies: &[f64]) -> Result<Self> {
        if energies.len() < 2 {
            return Err(Error::Degenerate("need at least two reference energies".into()));
        }
        let n = energies.len() as f64;
        let mean = energies.iter().sum::<f64>() / n;
        let var = energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Degenerate("reference energies have zero spread".into()));
        }
        Ok(EnergyScale { mean, std })
    }

    pub fn apply(&self, model: &IsingModel) -> IsingModel {
        model.affine(self.mean, self.std)
    }
}

/// Scale a model so that `E'(σ) = (E(σ) - mean) / std` with statistics taken over `reference`.
pub fn standardize(model: &IsingModel, reference: &[SpinState]) -> Result<(IsingModel, f64, f64)> {
    let energies = reference.iter().map(|s| model.energy(s)).collect::<Result<Vec<_>>>()?;
    let scale = EnergyScale::fit(&energies)?;
    Ok((scale.apply(model), scale.mean, scale.std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn all_states(n: usize) -> impl Iterator<Item = SpinState> {
        (0..1u64 << n).map(move |m| SpinState::from_mask(n, m))
    }

    pub(crate) fn random_graph(rng: &mut rng::Rng, n: usize, p: f64) -> Graph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        Graph::new(n, edges).unwrap()
    }

    fn random_model(rng: &mut rng::Rng, n: usize) -> IsingModel {
        let g = random_graph(rng, n, 0.5);
        let couplings: Vec<_> = g.edges().iter().map(|&(a, b)| (a, b, rng.gen_range(-1.0..1.0))).collect();
        let fields = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        IsingModel::new(n, couplings, fields, rng.gen_range(-2.0..2.0)).unwrap()
    }

    #[test]
    fn energy_small_cases() {
        let z = IsingModel::new(3, [], vec![0.0; 3], 0.0).unwrap();
        assert_eq!(z.energy(&SpinState::from_mask(3, 5)).unwrap(), 0.0);
        let one = IsingModel::new(1, [], vec![1.0], 0.0).unwrap();
        assert_eq!(one.energy(&SpinState::all(1, 1)).unwrap(), 1.0);
        assert_eq!(one.energy(&SpinState::all(1, -1)).unwrap(), -1.0);
        let two = IsingModel::new(2, [(0, 1, 1.0)], vec![0.0; 2], 0.0).unwrap();
        assert_eq!(two.energy(&SpinState::new(vec![1, -1]).unwrap()).unwrap(), -1.0);
        assert!(two.energy(&SpinState::all(3, 1)).is_err());
    }

    #[test]
    fn mis_single_node_matches_binary_form() {
        let inst = encode(ProblemKind::Mis, &Graph::empty(1), 1.0, 1.1).unwrap();
        assert!((inst.energy(&SpinState::all(1, 1)).unwrap() + 1.0).abs() < 1e-12);
        assert!(inst.energy(&SpinState::all(1, -1)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mvc_single_edge_all_assignments() {
        let g = Graph::path(2);
        let inst = encode(ProblemKind::Mvc, &g, 1.0, 1.1).unwrap();
        let expect = [(false, false, 1.1), (true, false, 1.0), (false, true, 1.0), (true, true, 2.0)];
        for (a, b, e) in expect {
            let s = SpinState::from_q(&[a, b]);
            assert!((inst.energy(&s).unwrap() - e).abs() < 1e-12, "{a} {b}");
            assert!((binary_energy(ProblemKind::Mvc, &g, 1.0, 1.1, &[a, b]) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn maxcut_triangle_minimum() {
        let inst = encode(ProblemKind::MaxCut, &Graph::complete(3), 0.0, 0.0).unwrap();
        let min = all_states(3).map(|s| inst.energy(&s).unwrap()).fold(f64::INFINITY, f64::min);
        assert_eq!(min, -2.0);
    }

    #[test]
    fn invalid_penalties_rejected() {
        let g = Graph::path(3);
        assert!(encode(ProblemKind::Mis, &g, 1.1, 1.0).is_err());
        assert!(encode(ProblemKind::Mvc, &g, 0.0, 1.0).is_err());
        assert!(encode(ProblemKind::MaxCut, &g, 5.0, 1.0).is_ok());
    }

    #[test]
    fn encodings_match_binary_forms_everywhere() {
        let mut r = rng::stream(1, &[]);
        for _ in 0..60 {
            let n = r.gen_range(1..=8);
            let g = { let p = r.gen_range(0.1..0.9); random_graph(&mut r, n, p) };
            for kind in ProblemKind::ALL {
                let inst = encode(kind, &g, 1.0, 1.1).unwrap();
                for s in all_states(n) {
                    let e = inst.energy(&s).unwrap();
                    let b = binary_energy(kind, &g, 1.0, 1.1, &s.qs());
                    assert!((e - b).abs() <= 1e-9, "{kind} {e} {b}");
                }
            }
        }
    }

    #[test]
    fn decomposition_sums_to_energy_for_any_ordering() {
        let mut r = rng::stream(2, &[]);
        let m = random_model(&mut r, 10);
        let s = SpinState::from_mask(10, r.gen::<u64>() & 1023);
        let o1 = NodeOrdering::identity(10);
        let mut perm: Vec<usize> = (0..10).rev().collect();
        perm.swap(2, 7);
        let o2 = NodeOrdering::from_order(perm);
        let d1 = delta_energies(&m, &s, &o1).unwrap();
        let d2 = delta_energies(&m, &s, &o2).unwrap();
        let target = m.energy(&s).unwrap() - m.offset();
        assert!((d1.iter().sum::<f64>() - target).abs() < 1e-9);
        assert!((d2.iter().sum::<f64>() - target).abs() < 1e-9);
        assert!(d1.iter().zip(&d2).any(|(a, b)| (a - b).abs() > 1e-9));
        // first step only sees its field
        let v = o1.order()[0];
        assert_eq!(d1[0], m.fields()[v] * f64::from(s.spins()[v]));
    }

    #[test]
    fn delta_energy_requires_assigned_prefix() {
        let m = IsingModel::new(3, [(0, 1, 1.0)], vec![0.0; 3], 0.0).unwrap();
        let o = NodeOrdering::identity(3);
        assert!(matches!(delta_energy(&m, &[1, 0, 1], &o, 2), Err(Error::State(_))));
        assert_eq!(delta_energy(&m, &[1, 1, 0], &o, 1).unwrap(), 1.0);
    }

    #[test]
    fn repair_examples() {
        let g = Graph::path(2);
        let mis = encode(ProblemKind::Mis, &g, 1.0, 1.1).unwrap();
        let fixed = mis.repair(&SpinState::from_q(&[true, true]));
        assert_eq!(fixed, SpinState::from_q(&[false, true]));
        assert!((mis.energy(&fixed).unwrap() + 1.0).abs() < 1e-12);
        let mvc = encode(ProblemKind::Mvc, &g, 1.0, 1.1).unwrap();
        let fixed = mvc.repair(&SpinState::from_q(&[false, false]));
        assert_eq!(fixed, SpinState::from_q(&[true, false]));
        assert!((mvc.energy(&fixed).unwrap() - 1.0).abs() < 1e-12);
        let feasible = SpinState::from_q(&[false, true]);
        assert_eq!(mvc.repair(&feasible), feasible);
    }

    #[test]
    fn repair_is_feasible_monotone_and_idempotent() {
        let mut r = rng::stream(3, &[]);
        for _ in 0..500 {
            let n = r.gen_range(1..=14);
            let g = { let p = r.gen_range(0.1..0.8); random_graph(&mut r, n, p) };
            for kind in [ProblemKind::Mis, ProblemKind::Mvc, ProblemKind::MaxCl] {
                let inst = encode(kind, &g, 1.0, 1.1).unwrap();
                let s = SpinState::from_mask(n, r.gen());
                let fixed = inst.repair(&s);
                assert!(inst.is_feasible(&fixed));
                assert!(inst.energy(&fixed).unwrap() <= inst.energy(&s).unwrap() + 1e-12);
                assert_eq!(inst.repair(&fixed), fixed);
            }
        }
    }

    #[test]
    fn global_minima_are_feasible() {
        let mut r = rng::stream(4, &[]);
        for _ in 0..100 {
            let n = r.gen_range(1..=8);
            let g = { let p = r.gen_range(0.1..0.9); random_graph(&mut r, n, p) };
            for kind in [ProblemKind::Mis, ProblemKind::Mvc, ProblemKind::MaxCl] {
                let inst = encode(kind, &g, 1.0, 1.1).unwrap();
                let es: Vec<(f64, SpinState)> = all_states(n).map(|s| (inst.energy(&s).unwrap(), s)).collect();
                let min = es.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
                for (e, s) in &es {
                    if (e - min).abs() < 1e-9 {
                        assert!(inst.is_feasible(s));
                    }
                }
            }
        }
    }

    #[test]
    fn standardize_is_exact_affine_map() {
        let mut r = rng::stream(5, &[]);
        let m = random_model(&mut r, 9);
        let refs: Vec<SpinState> = (0..20).map(|_| SpinState::from_mask(9, r.gen())).collect();
        let (scaled, mean, std) = standardize(&m, &refs).unwrap();
        for _ in 0..100 {
            let s = SpinState::from_mask(9, r.gen());
            let want = (m.energy(&s).unwrap() - mean) / std;
            assert!((scaled.energy(&s).unwrap() - want).abs() <= 1e-9);
        }
        let identity = EnergyScale::IDENTITY.apply(&m);
        assert_eq!(identity, m);
        let same = vec![SpinState::all(9, 1); 3];
        assert!(matches!(standardize(&m, &same), Err(Error::Degenerate(_))));
    }

    #[test]
    fn bitstring_round_trip() {
        let s = SpinState::from_q(&[true, false, true]);
        assert_eq!(s.to_bitstring(), "101");
        assert_eq!(SpinState::from_bitstring("101").unwrap(), s);
        assert_eq!(SpinState::from_mask(3, s.to_mask()), s);
    }
}
