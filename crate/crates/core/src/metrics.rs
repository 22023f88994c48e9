//! Solution-quality metrics against exact optima, and benchmark reports.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{db_greedy, mfa_ce_decode, rga, MfaNet};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ising::{EnergyScale, ProblemInstance, SpinState};
use crate::policy::{generate, PolicyValueNet, PreparedProblem, SamplingMode};
use crate::rng;

fn check_oracle(oracle_energy: f64, samples: &[f64]) -> Result<()> {
    if oracle_energy == 0.0 || !oracle_energy.is_finite() {
        return Err(Error::MetricUndefined(format!("oracle energy {oracle_energy} has no usable magnitude")));
    }
    if samples.is_empty() {
        return Err(Error::MetricUndefined("no sample energies".into()));
    }
    Ok(())
}

/// Best approximation ratio `|E(σ_j)| / |E_opt|` over samples, choosing the ratio
/// closest to 1. For maximization-form sizes (negative optima of MIS, MaxCl,
/// MaxCut) that is the largest ratio, ≤ 1 when worse; for MVC-form sizes it is
/// the smallest, ≥ 1 when worse.
pub fn ar_star(sample_energies: &[f64], oracle_energy: f64) -> Result<f64> {
    check_oracle(oracle_energy, sample_energies)?;
    let ratios = sample_energies.iter().map(|e| e.abs() / oracle_energy.abs());
    Ok(ratios.min_by(|a, b| (a - 1.0).abs().total_cmp(&(b - 1.0).abs())).expect("nonempty"))
}

/// Mean ratio `|E(σ_j)| / |E_opt|` over samples.
pub fn ar_hat(sample_energies: &[f64], oracle_energy: f64) -> Result<f64> {
    check_oracle(oracle_energy, sample_energies)?;
    Ok(sample_energies.iter().map(|e| e.abs() / oracle_energy.abs()).sum::<f64>() / sample_energies.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsMode {
    Best,
    Mean,
}

/// Relative error `|E_opt − E_j| / |E_opt|`, minimized (`Best`) or averaged
/// (`Mean`) over samples.
pub fn eps_rel(sample_energies: &[f64], oracle_energy: f64, mode: EpsMode) -> Result<f64> {
    check_oracle(oracle_energy, sample_energies)?;
    let errs = sample_energies.iter().map(|e| (oracle_energy - e).abs() / oracle_energy.abs());
    Ok(match mode {
        EpsMode::Best => errs.fold(f64::INFINITY, f64::min),
        EpsMode::Mean => errs.sum::<f64>() / sample_energies.len() as f64,
    })
}

/// Number of cut edges.
pub fn maxcut_value(graph: &Graph, s: &SpinState) -> Result<usize> {
    if s.len() != graph.n() {
        return Err(Error::Input(format!("state has {} spins, graph has {} nodes", s.len(), graph.n())));
    }
    Ok(graph.edges().iter().filter(|&&(i, j)| s.spins()[i] != s.spins()[j]).count())
}

/// Mean and standard error (sample std / √n; 0 for a single value).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// A method under evaluation: produces sample energies for one instance.
pub trait Solver: Sync {
    fn name(&self) -> String;
    /// Energies (original units) of the `n_s` solutions the method reports.
    fn solve(&self, instance: &ProblemInstance, n_s: usize, seed: u64) -> Result<Vec<f64>>;
}

pub struct DbGreedySolver;

impl Solver for DbGreedySolver {
    fn name(&self) -> String {
        "db-greedy".into()
    }

    fn solve(&self, instance: &ProblemInstance, _n_s: usize, _seed: u64) -> Result<Vec<f64>> {
        Ok(vec![instance.energy(&db_greedy(instance))?])
    }
}

pub struct RgaSolver {
    pub n_r: usize,
}

impl Solver for RgaSolver {
    fn name(&self) -> String {
        "rga".into()
    }

    fn solve(&self, instance: &ProblemInstance, n_s: usize, seed: u64) -> Result<Vec<f64>> {
        (0..n_s.max(1) as u64)
            .map(|i| instance.energy(&instance.repair(&rga(&instance.model, self.n_r, rng::derive(seed, &[i])))))
            .collect()
    }
}

/// Mean-field network decoded by best-of-8 conditional expectation.
pub struct MfaCeSolver {
    pub label: String,
    pub net: MfaNet,
    pub scale: EnergyScale,
}

impl Solver for MfaCeSolver {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn solve(&self, instance: &ProblemInstance, _n_s: usize, seed: u64) -> Result<Vec<f64>> {
        Ok(vec![mfa_ce_decode(&self.net, instance, &self.scale.apply(&instance.model), seed)?.1])
    }
}

/// Autoregressive policy. `Og` uses `n_s` orderings, `S` a single ordering, and
/// `Os` spreads `n_s` samples over `os_orderings` orderings.
pub struct VagCoSolver {
    pub net: PolicyValueNet,
    pub scale: EnergyScale,
    pub mode: SamplingMode,
    pub os_orderings: usize,
}

impl Solver for VagCoSolver {
    fn name(&self) -> String {
        format!("vagco-{}", format!("{:?}", self.mode).to_lowercase())
    }

    fn solve(&self, instance: &ProblemInstance, n_s: usize, seed: u64) -> Result<Vec<f64>> {
        let p = PreparedProblem::new(instance.clone(), self.scale, self.net.config.token_k)?;
        let ts = match self.mode {
            SamplingMode::Og => generate(&p, &self.net, SamplingMode::Og, 0, n_s, seed)?,
            SamplingMode::Os => generate(&p, &self.net, SamplingMode::Os, n_s, self.os_orderings.min(n_s), seed)?,
            SamplingMode::S => generate(&p, &self.net, SamplingMode::S, n_s, 1, seed)?,
        };
        Ok(ts.iter().map(|t| t.energy).collect())
    }
}

/// Reports the dataset's optimal energy for each instance; a self-check that
/// must score AR* = 1. `run_benchmark` resolves it by name.
pub struct OracleSolver;

impl Solver for OracleSolver {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn solve(&self, _instance: &ProblemInstance, _n_s: usize, _seed: u64) -> Result<Vec<f64>> {
        Err(Error::State("oracle solver is resolved by instance id".into()))
    }
}

/// One benchmark row; metric cells are empty when the oracle is unavailable or
/// the method failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub instance_id: String,
    pub method: String,
    pub seed: u64,
    #[serde(rename = "n_S")]
    pub n_s: usize,
    pub best_energy: Option<f64>,
    pub oracle_energy: Option<f64>,
    pub ar_star: Option<f64>,
    pub ar_hat: Option<f64>,
    pub eps_best: Option<f64>,
    pub eps_mean: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub instance_id: String,
    pub method: String,
    pub seed: u64,
    pub message: String,
}

/// Mean ± standard error over seeds of per-seed dataset means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std_err: f64,
    pub seeds: usize,
}

pub const REPORT_FORMAT: &str = "vagco-bench/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub format: String,
    pub rows: Vec<BenchRow>,
    /// Sample energies per row, aligned with `rows`.
    pub samples: Vec<Vec<f64>>,
    pub errors: Vec<RowError>,
    pub aggregates: Vec<Aggregate>,
    pub config: serde_json::Value,
}

/// A dataset entry: id, instance and optimal energy if known.
pub struct BenchInstance {
    pub id: String,
    pub instance: ProblemInstance,
    pub oracle: Option<f64>,
}

fn row_metrics(row: &mut BenchRow, samples: &[f64]) -> Result<()> {
    row.best_energy = samples.iter().copied().reduce(f64::min);
    if let Some(opt) = row.oracle_energy {
        row.ar_star = Some(ar_star(samples, opt)?);
        row.ar_hat = Some(ar_hat(samples, opt)?);
        row.eps_best = Some(eps_rel(samples, opt, EpsMode::Best)?);
        row.eps_mean = Some(eps_rel(samples, opt, EpsMode::Mean)?);
    }
    Ok(())
}

/// Evaluate every (instance, method, seed) triple. Rows come out ordered by
/// instance, then method, then seed; failures become error records.
pub fn run_benchmark(
    dataset: &[BenchInstance],
    solvers: &[&dyn Solver],
    n_s: usize,
    seeds: &[u64],
    timing: bool,
    config: serde_json::Value,
) -> BenchReport {
    let jobs: Vec<(usize, usize, u64)> = (0..dataset.len())
        .flat_map(|i| (0..solvers.len()).flat_map(move |m| seeds.iter().map(move |&s| (i, m, s))))
        .collect();
    let results: Vec<(BenchRow, Vec<f64>, Option<String>)> = jobs
        .par_iter()
        .map(|&(i, m, seed)| {
            let d = &dataset[i];
            let solver = solvers[m];
            let mut row = BenchRow {
                instance_id: d.id.clone(),
                method: solver.name(),
                seed,
                n_s,
                best_energy: None,
                oracle_energy: d.oracle,
                ar_star: None,
                ar_hat: None,
                eps_best: None,
                eps_mean: None,
                wall_ms: 0.0,
            };
            let start = Instant::now();
            let sub = rng::derive(seed, &[i as u64]);
            let solved = if solver.name() == "oracle" {
                d.oracle.map(|e| vec![e]).ok_or_else(|| Error::Capacity("oracle unavailable".into()))
            } else {
                solver.solve(&d.instance, n_s, sub)
            };
            if timing {
                row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            }
            match solved.and_then(|s| row_metrics(&mut row, &s).map(|_| s)) {
                Ok(s) => (row, s, None),
                Err(e) => (row, Vec::new(), Some(e.to_string())),
            }
        })
        .collect();
    let mut report = BenchReport {
        format: REPORT_FORMAT.into(),
        rows: Vec::new(),
        samples: Vec::new(),
        errors: Vec::new(),
        aggregates: Vec::new(),
        config,
    };
    for (row, s, err) in results {
        if let Some(message) = err {
            report.errors.push(RowError { instance_id: row.instance_id.clone(), method: row.method.clone(), seed: row.seed, message });
        }
        report.rows.push(row);
        report.samples.push(s);
    }
    report.aggregates = aggregate(&report.rows, seeds);
    report
}

type MetricFn = fn(&BenchRow) -> Option<f64>;

fn aggregate(rows: &[BenchRow], seeds: &[u64]) -> Vec<Aggregate> {
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let metrics: [(&str, MetricFn); 4] =
        [("ar_star", |r| r.ar_star), ("ar_hat", |r| r.ar_hat), ("eps_best", |r| r.eps_best), ("eps_mean", |r| r.eps_mean)];
    let mut out = Vec::new();
    for m in &methods {
        for (name, f) in metrics {
            let per_seed: Vec<f64> = seeds
                .iter()
                .filter_map(|&s| {
                    let v: Vec<f64> = rows.iter().filter(|r| &r.method == m && r.seed == s).filter_map(f).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            if per_seed.is_empty() {
                continue;
            }
            let (mean, std_err) = mean_se(&per_seed);
            out.push(Aggregate { method: m.clone(), metric: name.into(), mean, std_err, seeds: per_seed.len() });
        }
    }
    out
}

impl BenchReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>> {
        let mut rd = csv::Reader::from_path(path)?;
        rd.deserialize().map(|r| r.map_err(Error::from)).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn aggregate_of(&self, method: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.metric == metric)
    }

    /// Line plot of a per-instance metric against a per-instance parameter, one
    /// series per method (points averaged over seeds and equal x values).
    pub fn svg(&self, metric: &str, x_label: &str, x_of: impl Fn(&str) -> Option<f64>) -> String {
        let get = |r: &BenchRow| match metric {
            "ar_star" => r.ar_star,
            "ar_hat" => r.ar_hat,
            "eps_best" => r.eps_best,
            _ => r.eps_mean,
        };
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for r in &self.rows {
            let (Some(x), Some(y)) = (x_of(&r.instance_id), get(r)) else { continue };
            match series.iter_mut().find(|s| s.0 == r.method) {
                Some(s) => s.1.push((x, y)),
                None => series.push((r.method.clone(), vec![(x, y)])),
            }
        }
        for s in &mut series {
            s.1.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut merged: Vec<(f64, f64, usize)> = Vec::new();
            for &(x, y) in &s.1 {
                match merged.last_mut() {
                    Some(m) if m.0 == x => {
                        m.1 += y;
                        m.2 += 1;
                    }
                    _ => merged.push((x, y, 1)),
                }
            }
            s.1 = merged.into_iter().map(|(x, y, c)| (x, y / c as f64)).collect();
        }
        svg_plot(&series, x_label, metric)
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn svg_plot(series: &[(String, Vec<(f64, f64)>)], x_label: &str, y_label: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    out += &format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - pad,
        r = w - pad
    );
    out += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n", w / 2.0, h - 15.0);
    out += &format!("<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">{y_label}</text>\n", h / 2.0, h / 2.0);
    for (v, anchor, x, y) in [(x0, "start", pad, h - pad + 15.0), (x1, "end", w - pad, h - pad + 15.0)] {
        out += &format!("<text x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\">{v:.3}</text>\n");
    }
    for (v, y) in [(y0, h - pad), (y1, pad)] {
        out += &format!("<text x=\"{}\" y=\"{y}\" text-anchor=\"end\">{v:.4}</text>\n", pad - 5.0);
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        out += &format!("<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>\n", path.join(" "));
        for &(x, y) in pts {
            out += &format!("<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{c}\"/>\n", sx(x), sy(y));
        }
        out += &format!("<text x=\"{}\" y=\"{}\" fill=\"{c}\">{name}</text>\n", w - pad + 5.0 - 100.0, pad + 15.0 * k as f64);
    }
    out + "</svg>\n"
}
