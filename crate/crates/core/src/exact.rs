//! Exact oracles: exhaustive minimization, branch and bound for
//! independent-set encodings, and full Boltzmann enumeration.

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::graph::Graph;
use crate::ising::{IsingModel, ProblemInstance, ProblemKind, SpinState};

/// Largest spin count accepted by [`brute_force_min`].
pub const EXHAUSTIVE_LIMIT: usize = 26;
/// Largest spin count accepted by [`boltzmann_enumerate`].
pub const BOLTZMANN_LIMIT: usize = 20;
/// Largest graph accepted by [`mis_branch_and_bound`].
pub const BNB_LIMIT: usize = 128;
/// Optimum counting in branch and bound stops here.
pub const COUNT_CAP: u64 = 10_000;

const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// q-variables of the optimum as a `0`/`1` string.
    pub best_state: String,
    pub best_energy: f64,
    pub optimum_count: u64,
    /// True when `optimum_count` is a lower bound because counting hit [`COUNT_CAP`].
    pub count_capped: bool,
    pub nodes_explored: u64,
}

impl OracleResult {
    pub fn state(&self) -> SpinState {
        SpinState::from_bitstring(&self.best_state).expect("oracle state is a bitstring")
    }
}

/// Global minimum of `model` by Gray-code enumeration of all `2^n` states.
///
/// Ties within 1e-9 count as distinct optima; the reported state is the optimum
/// with the smallest bitmask and its energy is recomputed directly.
pub fn brute_force_min(model: &IsingModel, limit_n: usize) -> Result<OracleResult> {
    let n = model.n();
    if n > limit_n.min(EXHAUSTIVE_LIMIT) {
        return Err(Error::Capacity(format!("{n} spins exceed exhaustive limit {}", limit_n.min(EXHAUSTIVE_LIMIT))));
    }
    let mut s = vec![-1i8; n];
    let mut h: Vec<f64> = (0..n).map(|i| model.local_field(&s, i)).collect();
    let mut e = model.energy_of(&s);
    let (mut best_e, mut best_mask, mut count) = (e, 0u64, 1u64);
    let total = 1u64 << n;
    for step in 1..total {
        let i = step.trailing_zeros() as usize;
        e -= 2.0 * f64::from(s[i]) * h[i];
        s[i] = -s[i];
        let si = f64::from(s[i]);
        for &(k, j) in model.neighbors(i) {
            h[k] += 2.0 * j * si;
        }
        if step & 0xFFFF == 0 {
            e = model.energy_of(&s);
        }
        let mask = step ^ (step >> 1);
        if e < best_e - TIE_TOL {
            (best_e, best_mask, count) = (e, mask, 1);
        } else if e <= best_e + TIE_TOL {
            count += 1;
            if mask < best_mask {
                best_mask = mask;
            }
            best_e = best_e.min(e);
        }
    }
    let state = SpinState::from_mask(n, best_mask);
    Ok(OracleResult {
        best_state: state.to_bitstring(),
        best_energy: model.energy_of(state.spins()),
        optimum_count: count,
        count_capped: false,
        nodes_explored: total,
    })
}

/// Maximum independent set found by branch and bound.
#[derive(Clone, Debug, PartialEq)]
pub struct MisResult {
    pub set: Vec<bool>,
    pub size: usize,
    pub count: u64,
    pub count_capped: bool,
    pub nodes: u64,
}

struct Bnb {
    adj: Vec<u128>,
    best: u128,
    best_size: u32,
    count: u64,
    capped: bool,
    nodes: u64,
}

fn lowest(s: u128) -> usize {
    s.trailing_zeros() as usize
}

impl Bnb {
    /// Greedy clique cover of `s`; its size bounds the independence number.
    fn clique_cover(&self, mut s: u128) -> u32 {
        let mut cliques = 0;
        while s != 0 {
            let v = lowest(s);
            let mut cand = s & self.adj[v];
            s &= !(1u128 << v);
            while cand != 0 {
                let u = lowest(cand);
                cand &= self.adj[u];
                s &= !(1u128 << u);
            }
            cliques += 1;
        }
        cliques
    }

    fn record(&mut self, chosen: u128) {
        let size = chosen.count_ones();
        if self.count == 0 || size > self.best_size {
            (self.best, self.best_size, self.count) = (chosen, size, 1);
        } else if size == self.best_size {
            self.count += 1;
            if chosen < self.best {
                self.best = chosen;
            }
            if self.count >= COUNT_CAP {
                self.capped = true;
            }
        }
    }

    fn search(&mut self, mut chosen: u128, mut s: u128) {
        self.nodes += 1;
        // isolated vertices belong to every maximum set of the residual graph
        let mut iso = 0u128;
        let mut rest = s;
        while rest != 0 {
            let v = lowest(rest);
            rest &= rest - 1;
            if s & self.adj[v] == 0 {
                iso |= 1u128 << v;
            }
        }
        chosen |= iso;
        s &= !iso;
        if s == 0 {
            self.record(chosen);
            return;
        }
        let bound = chosen.count_ones() + self.clique_cover(s);
        // ties are explored to count optima until the cap is reached
        if bound < self.best_size || (self.capped && bound <= self.best_size) {
            return;
        }
        let mut v = lowest(s);
        let mut deg = 0;
        let mut rest = s;
        while rest != 0 {
            let u = lowest(rest);
            rest &= rest - 1;
            let d = (s & self.adj[u]).count_ones();
            if d > deg {
                (v, deg) = (u, d);
            }
        }
        let bit = 1u128 << v;
        self.search(chosen | bit, s & !bit & !self.adj[v]);
        self.search(chosen, s & !bit);
    }
}

/// Maximum independent sets of `graph`: one optimum (smallest bitmask among those
/// found) and the number of distinct optima, capped at [`COUNT_CAP`].
pub fn mis_branch_and_bound(graph: &Graph) -> Result<MisResult> {
    let n = graph.n();
    if n > BNB_LIMIT {
        return Err(Error::Capacity(format!("{n} nodes exceed branch-and-bound limit {BNB_LIMIT}")));
    }
    let adj = (0..n).map(|v| graph.neighbors(v).iter().fold(0u128, |m, &u| m | 1u128 << u)).collect();
    let mut bnb = Bnb { adj, best: 0, best_size: 0, count: 0, capped: false, nodes: 0 };
    let all = if n == 128 { u128::MAX } else { (1u128 << n) - 1 };
    bnb.search(0, all);
    Ok(MisResult {
        set: (0..n).map(|v| bnb.best >> v & 1 == 1).collect(),
        size: bnb.best_size as usize,
        count: bnb.count,
        count_capped: bnb.capped,
        nodes: bnb.nodes,
    })
}

/// Exact optimum of a problem instance. Independent-set encodings (MIS, MaxCl on
/// the complement, MVC as the complement of an independent set) use branch and
/// bound; max-cut is enumerated up to `limit_n` spins.
pub fn solve_instance(instance: &ProblemInstance, limit_n: usize) -> Result<OracleResult> {
    let res = match instance.kind {
        ProblemKind::MaxCut => return brute_force_min(&instance.model, limit_n),
        _ => mis_branch_and_bound(&instance.graph)?,
    };
    let q: Vec<bool> = match instance.kind {
        ProblemKind::Mvc => res.set.iter().map(|&x| !x).collect(),
        _ => res.set,
    };
    let state = SpinState::from_q(&q);
    Ok(OracleResult {
        best_state: state.to_bitstring(),
        best_energy: instance.energy(&state)?,
        optimum_count: res.count,
        count_capped: res.count_capped,
        nodes_explored: res.nodes,
    })
}

/// Exact Boltzmann distribution over all `2^n` states, indexed by bitmask.
#[derive(Clone, Debug)]
pub struct BoltzmannTable {
    pub beta: f64,
    pub energies: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
    pub partition_log: f64,
}

/// Sum with a fixed binary-tree shape, independent of thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// `ln Σ exp(x)` with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let shifted: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    max + pairwise_sum(&shifted).ln()
}

/// Energies of all `2^n` states, indexed by bitmask.
pub fn all_energies(model: &IsingModel, limit_n: usize) -> Result<Vec<f64>> {
    let n = model.n();
    if n > limit_n {
        return Err(Error::Capacity(format!("{n} spins exceed enumeration limit {limit_n}")));
    }
    Ok((0..1u64 << n).map(|m| model.energy_of(SpinState::from_mask(n, m).spins())).collect())
}

pub fn boltzmann_enumerate(model: &IsingModel, beta: f64) -> Result<BoltzmannTable> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return input(format!("beta must be finite and >= 0, got {beta}"));
    }
    let energies = all_energies(model, BOLTZMANN_LIMIT)?;
    let logits: Vec<f64> = energies.iter().map(|e| -beta * e).collect();
    let partition_log = log_sum_exp(&logits);
    let log_probs: Vec<f64> = logits.iter().map(|l| l - partition_log).collect();
    let probs = log_probs.iter().map(|l| l.exp()).collect();
    Ok(BoltzmannTable { beta, energies, log_probs, probs, partition_log })
}

impl BoltzmannTable {
    /// Probability mass on states within `tol` of the minimum energy.
    pub fn mass_on_minimizers(&self, tol: f64) -> f64 {
        let min = self.energies.iter().copied().fold(f64::INFINITY, f64::min);
        self.energies.iter().zip(&self.probs).filter(|(e, _)| **e <= min + tol).map(|(_, p)| p).sum()
    }
}

/// `Σ p (E + ln p / β)` over a full distribution, with `0 ln 0 = 0`.
pub fn free_energy_exact(probs: &[f64], energies: &[f64], beta: f64) -> Result<f64> {
    if probs.len() != energies.len() {
        return input("distribution and energy table differ in length");
    }
    if !(beta > 0.0) {
        return input(format!("beta must be positive, got {beta}"));
    }
    if probs.iter().any(|&p| !(p >= 0.0)) || (pairwise_sum(probs) - 1.0).abs() > 1e-9 {
        return input("distribution is not normalized");
    }
    let terms: Vec<f64> = probs
        .iter()
        .zip(energies)
        .map(|(&p, &e)| if p == 0.0 { 0.0 } else { p * (e + p.ln() / beta) })
        .collect();
    Ok(pairwise_sum(&terms))
}
