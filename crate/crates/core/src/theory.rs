//! Empirical check of the sample-complexity bound for fitting the inverse
//! temperature of a one-parameter Boltzmann family by regularized maximum
//! likelihood.
//!
//! For `p_β(s) ∝ exp(−β E(s))` with `E ∈ [0, 1]`, the fit `β̂` minimizing
//! cross-entropy plus `λ|β|` with `λ = √(ln(2/δ) / 2m)` satisfies, with
//! probability at least `1 − δ`,
//! `KL(p_β* ‖ p_β̂) ≤ |β*|/√m · √(2 ln(2/δ))`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::nn::log_sum_exp;
use crate::rng;

/// Search interval for `β` on each sign branch.
pub const BETA_MAX: f64 = 100.0;
pub const BETA_TOL: f64 = 1e-8;
/// Largest supported state space.
pub const MAX_STATES: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct BoltzmannFamily {
    energies: Vec<f64>,
}

impl BoltzmannFamily {
    pub fn new(energies: Vec<f64>) -> Result<Self> {
        if energies.is_empty() || energies.len() > MAX_STATES {
            return input(format!("family needs 1..={MAX_STATES} states, got {}", energies.len()));
        }
        if let Some(e) = energies.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return input(format!("energies must lie in [0, 1], got {e}"));
        }
        Ok(BoltzmannFamily { energies })
    }

    /// Energies drawn uniformly from `[0, 1]`.
    pub fn random(n_states: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[0xFA]);
        BoltzmannFamily::new((0..n_states).map(|_| r.gen::<f64>()).collect())
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn log_partition(&self, beta: f64) -> f64 {
        log_sum_exp(&self.energies.iter().map(|e| -beta * e).collect::<Vec<_>>())
    }

    pub fn log_probs(&self, beta: f64) -> Vec<f64> {
        let lz = self.log_partition(beta);
        self.energies.iter().map(|e| -beta * e - lz).collect()
    }

    pub fn probs(&self, beta: f64) -> Vec<f64> {
        self.log_probs(beta).into_iter().map(f64::exp).collect()
    }

    /// Average negative log-likelihood of samples whose mean energy is `mean_energy`.
    pub fn cross_entropy(&self, mean_energy: f64, beta: f64) -> f64 {
        beta * mean_energy + self.log_partition(beta)
    }

    /// `KL(p_a ‖ p_b)`, computed exactly.
    pub fn kl(&self, a: f64, b: f64) -> f64 {
        let (la, lb) = (self.log_probs(a), self.log_probs(b));
        la.iter().zip(&lb).map(|(x, y)| if x.is_finite() { x.exp() * (x - y) } else { 0.0 }).sum::<f64>().max(0.0)
    }

    /// `m` i.i.d. state indices from `p_β`.
    pub fn sample(&self, beta: f64, m: usize, r: &mut rng::Rng) -> Vec<usize> {
        let dist = WeightedIndex::new(self.probs(beta)).expect("probabilities are positive and finite");
        (0..m).map(|_| dist.sample(r)).collect()
    }

    pub fn mean_energy(&self, samples: &[usize]) -> f64 {
        samples.iter().map(|&s| self.energies[s]).sum::<f64>() / samples.len() as f64
    }
}

/// Minimize a unimodal `f` on `[lo, hi]`. Returns the minimizer and the objective
/// at the best interior point after each iteration.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, Vec<f64>) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut trace = Vec::new();
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        trace.push(fc.min(fd));
    }
    let x = if fc <= fd { c } else { d };
    (x, trace)
}

/// Regularized maximum-likelihood `β̂` over `[−BETA_MAX, BETA_MAX]`. The objective
/// is convex on each sign branch; `β = 0` wins ties.
pub fn fit_beta(family: &BoltzmannFamily, samples: &[usize], lambda_reg: f64) -> Result<f64> {
    if samples.is_empty() {
        return input("fit_beta needs at least one sample");
    }
    if !(lambda_reg >= 0.0) {
        return input(format!("regularization must be >= 0, got {lambda_reg}"));
    }
    let mean = family.mean_energy(samples);
    let obj = |b: f64| family.cross_entropy(mean, b) + lambda_reg * b.abs();
    let mut best = (0.0, obj(0.0));
    for (lo, hi) in [(-BETA_MAX, 0.0), (0.0, BETA_MAX)] {
        let (b, _) = golden_section(obj, lo, hi, BETA_TOL);
        let v = obj(b);
        if v < best.1 - 1e-12 * best.1.abs().max(1.0) {
            best = (b, v);
        }
    }
    Ok(best.0)
}

/// Right-hand side `|β*|/√m · √(2 ln(2/δ))`.
pub fn bound_rhs(beta_star: f64, m: usize, delta: f64) -> f64 {
    beta_star.abs() / (m as f64).sqrt() * (2.0 * (2.0 / delta).ln()).sqrt()
}

/// `λ = √(ln(2/δ) / 2m)`.
pub fn bound_lambda(m: usize, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * m as f64)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub m: usize,
    pub delta: f64,
    pub beta_star: f64,
    pub coverage: f64,
    pub mean_kl: f64,
    pub bound_rhs: f64,
}

/// Fraction of `trials` in which the fitted `β̂` satisfies the KL bound.
pub fn check_bound(family: &BoltzmannFamily, beta_star: f64, m: usize, delta: f64, trials: usize, seed: u64) -> Result<BoundCheck> {
    if m == 0 || trials == 0 || !(delta > 0.0 && delta < 1.0) {
        return input(format!("need m >= 1, trials >= 1, delta in (0, 1); got {m}, {trials}, {delta}"));
    }
    if !beta_star.is_finite() {
        return Err(Error::Input(format!("beta_star must be finite, got {beta_star}")));
    }
    let lambda = bound_lambda(m, delta);
    let rhs = bound_rhs(beta_star, m, delta);
    let kls: Vec<Result<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[0x7B, t]);
            let samples = family.sample(beta_star, m, &mut r);
            let b = fit_beta(family, &samples, lambda)?;
            Ok(family.kl(beta_star, b))
        })
        .collect();
    let kls = kls.into_iter().collect::<Result<Vec<_>>>()?;
    let covered = kls.iter().filter(|&&k| k <= rhs).count();
    Ok(BoundCheck {
        m,
        delta,
        beta_star,
        coverage: covered as f64 / trials as f64,
        mean_kl: kls.iter().sum::<f64>() / trials as f64,
        bound_rhs: rhs,
    })
}

/// Sweep of [`check_bound`] over families, sample sizes and confidence levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryConfig {
    pub n_families: usize,
    pub n_states: usize,
    pub beta_star: f64,
    pub ms: Vec<usize>,
    pub deltas: Vec<f64>,
    pub trials: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig { n_families: 5, n_states: 16, beta_star: 2.0, ms: vec![50, 200, 800], deltas: vec![0.1, 0.05], trials: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub family: usize,
    pub m: usize,
    pub delta: f64,
    pub beta_star: f64,
    pub coverage: f64,
    pub mean_kl: f64,
    pub bound_rhs: f64,
}

pub fn run_theory(cfg: &TheoryConfig, seed: u64) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::new();
    for f in 0..cfg.n_families {
        let fam = BoltzmannFamily::random(cfg.n_states, rng::derive(seed, &[0xFA, f as u64]))?;
        for &m in &cfg.ms {
            for &delta in &cfg.deltas {
                let c = check_bound(&fam, cfg.beta_star, m, delta, cfg.trials, rng::derive(seed, &[0xCB, f as u64, m as u64]))?;
                rows.push(TheoryRow {
                    family: f,
                    m,
                    delta,
                    beta_star: cfg.beta_star,
                    coverage: c.coverage,
                    mean_kl: c.mean_kl,
                    bound_rhs: c.bound_rhs,
                });
            }
        }
    }
    Ok(rows)
}
