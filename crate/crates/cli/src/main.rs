//! `vagco` command-line driver.

mod config;
mod dataset;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use vagco::baselines::{train_mfa, MfaMethod, MfaNet};
use vagco::exact::solve_instance;
use vagco::instance_gen::{rb_dataset, Family, GeneratorSpec};
use vagco::ising::{EnergyScale, ProblemKind};
use vagco::metrics::{run_benchmark, BenchInstance, DbGreedySolver, MfaCeSolver, OracleSolver, RgaSolver, Solver, VagCoSolver};
use vagco::nn::Checkpoint;
use vagco::policy::{PolicyValueNet, PreparedProblem, SamplingMode};
use vagco::ppo::{fit_energy_scale, train, Validation};
use vagco::theory::{run_theory, TheoryConfig};
use vagco::{rng, Error, Result};

use config::{RunConfig, TrainMethod, CONFIG_ECHO};
use dataset::{load_oracles, oracle_path, write_dataset, Dataset, OracleFile, ORACLE_FORMAT};

const SCALE_FILE: &str = "energy_scale.json";
const BENCH_CSV: &str = "bench.csv";
const BENCH_JSON: &str = "bench.json";
const THEORY_CSV: &str = "theory.csv";
const MFA_LOG: &str = "mfa_log.csv";
/// Default exhaustive-search ceiling for max-cut oracles.
const ORACLE_LIMIT_N: usize = 24;

#[derive(Parser, Debug)]
#[command(name = "vagco", version, about = "Variational annealing on graphs for combinatorial optimization")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record wall-clock times in reports (otherwise 0, keeping outputs reproducible).
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a policy (PPO) or a mean-field baseline from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained policy checkpoint.
    Eval(EvalArgs),
    /// Run a non-learned or mean-field baseline.
    Baseline(BaselineArgs),
    /// Solve every instance exactly.
    Oracle {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        problem: ProblemArgs,
        /// Largest max-cut instance to enumerate.
        #[arg(long, default_value_t = ORACLE_LIMIT_N)]
        limit_n: usize,
    },
    /// Empirical coverage of the regularized-fit KL bound.
    Theory {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FamilyArg {
    Rb,
    Rrg,
    Ba,
    Gnp,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Node count (rrg, ba, gnp).
    #[arg(long)]
    n: Option<usize>,
    /// Degree (rrg).
    #[arg(long)]
    d: Option<usize>,
    /// Attachment edges per node (ba).
    #[arg(long)]
    m: Option<usize>,
    /// Edge probability (gnp) or RB tightness, as `x` or `lo:hi`.
    #[arg(long)]
    p: Option<String>,
    /// RB clique count range `lo:hi`.
    #[arg(long, default_value = "6:12")]
    groups: String,
    /// RB clique size range `lo:hi`.
    #[arg(long, default_value = "4:6")]
    sizes: String,
    /// RB node-count filter `lo:hi`.
    #[arg(long, default_value = "30:60")]
    n_range: String,
}

/// Problem encoding; unset values come from the checkpoint's run config when
/// there is one, else MVC with A = 1, B = 1.1.
#[derive(Args, Debug, Clone, Serialize)]
struct ProblemArgs {
    #[arg(long)]
    kind: Option<ProblemKind>,
    #[arg(long)]
    penalty_a: Option<f64>,
    #[arg(long)]
    penalty_b: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Oracle directory; without it metric columns stay empty.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    n_samples: usize,
    #[arg(long, default_value = "og")]
    mode: SamplingMode,
    /// Orderings for `os` mode (default n_samples / 2).
    #[arg(long)]
    orderings: Option<usize>,
    /// Energy scale file (default: next to the checkpoint).
    #[arg(long)]
    scale: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    n_seeds: u64,
    /// Also write an SVG of eps_best per instance.
    #[arg(long)]
    plot: bool,
    /// Output directory (not echoed, so reruns elsewhere stay byte-identical)
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[command(flatten)]
    problem: ProblemArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum BaselineMethod {
    DbGreedy,
    Rga,
    MfaCe,
    EgnCe,
    Oracle,
}

#[derive(Args, Debug, Serialize)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: BaselineMethod,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Trained mean-field network (mfa-ce, egn-ce).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scale: Option<PathBuf>,
    /// Samples per instance (rga).
    #[arg(long, default_value_t = 8)]
    n_samples: usize,
    /// Restarts per RGA sample.
    #[arg(long, default_value_t = 1)]
    n_r: usize,
    #[arg(long, default_value_t = 1)]
    n_seeds: u64,
    #[arg(long)]
    plot: bool,
    /// Output directory (not echoed, so reruns elsewhere stay byte-identical)
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[command(flatten)]
    problem: ProblemArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 || rayon::ThreadPoolBuilder::new().num_threads(t).build_global().is_err() {
            eprintln!("error: cannot start {t} worker threads");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Parse { .. } | Error::Json(_) | Error::Io(_) | Error::Csv(_) => 2,
        Error::Capacity(_) => 3,
        Error::Numeric(_) | Error::Degenerate(_) | Error::MetricUndefined(_) => 4,
        Error::State(_) => 1,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Generate(a) => generate(a, seed),
        Command::Train { config, out } => train_cmd(config, out, cli.seed),
        Command::Eval(a) => eval(a, seed, cli.timing),
        Command::Baseline(a) => baseline(a, seed, cli.timing),
        Command::Oracle { dataset, out, problem, limit_n } => oracle(dataset, out, problem, *limit_n),
        Command::Theory { config, out } => theory(config.as_deref(), out, seed),
    }
}

fn parse_range<T: std::str::FromStr + Copy>(s: &str, what: &str) -> Result<(T, T)> {
    let bad = || Error::Input(format!("{what}: expected `x` or `lo:hi`, got {s:?}"));
    match s.split_once(':') {
        Some((lo, hi)) => Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?)),
        None => {
            let v = s.trim().parse().map_err(|_| bad())?;
            Ok((v, v))
        }
    }
}

fn need<T: Copy>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::Input(format!("--{flag} is required for this family")))
}

fn generate(a: &GenerateArgs, seed: u64) -> Result<()> {
    let name = format!("{:?}", a.family).to_lowercase();
    let specs: Vec<GeneratorSpec> = match a.family {
        FamilyArg::Rb => {
            let p = parse_range::<f64>(a.p.as_deref().unwrap_or("0.3:1.0"), "--p")?;
            let groups = parse_range(&a.groups, "--groups")?;
            let sizes = parse_range(&a.sizes, "--sizes")?;
            let n_range = parse_range(&a.n_range, "--n-range")?;
            rb_dataset(a.count, groups, sizes, p, n_range, seed)?.into_iter().map(|(_, s)| s).collect()
        }
        other => {
            let n = need(a.n, "n")?;
            let family = match other {
                FamilyArg::Rrg => Family::Rrg { n, d: need(a.d, "d")? },
                FamilyArg::Ba => Family::Ba { n, m: need(a.m, "m")? },
                _ => {
                    let (p, hi) = parse_range::<f64>(a.p.as_deref().ok_or_else(|| Error::Input("--p is required for gnp".into()))?, "--p")?;
                    if p != hi {
                        return Err(Error::Input("gnp takes a single --p".into()));
                    }
                    Family::Gnp { n, p }
                }
            };
            (0..a.count as u64).map(|i| GeneratorSpec { family: family.clone(), seed: rng::derive(seed, &[0x6E, i]) }).collect()
        }
    };
    let graphs = specs
        .into_iter()
        .enumerate()
        .map(|(i, s)| Ok((format!("{name}_{i:04}"), s.generate()?, Some(s))))
        .collect::<Result<Vec<_>>>()?;
    let m = write_dataset(&a.out, seed, &graphs)?;
    println!("wrote {} instances to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn train_cmd(config_path: &Path, out: &Path, seed_flag: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data_dir = cfg.dataset.clone().ok_or_else(|| Error::Input("config needs a training `dataset`".into()))?;
    let data = Dataset::load(&data_dir)?;
    let instances = data.encode(cfg.kind, cfg.penalty_a, cfg.penalty_b)?;
    std::fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let scale = fit_energy_scale(&instances, rng::derive(cfg.seed, &[0x5C]))?;
    std::fs::write(out.join(SCALE_FILE), serde_json::to_string_pretty(&scale)? + "\n")?;
    match cfg.method {
        TrainMethod::Ppo => {
            let k = cfg.net.token_k;
            let problems = instances.into_iter().map(|i| PreparedProblem::new(i, scale, k)).collect::<Result<Vec<_>>>()?;
            let val_data = match (&cfg.val_dataset, &cfg.val_oracle) {
                (Some(d), Some(o)) => {
                    let vd = Dataset::load(d)?;
                    let oracles = load_oracles(o, &vd.ids(), cfg.kind, cfg.penalty_a, cfg.penalty_b)?;
                    let energies = oracles
                        .into_iter()
                        .zip(vd.ids())
                        .map(|(e, id)| e.ok_or_else(|| Error::Input(format!("no oracle result for validation instance {id}"))))
                        .collect::<Result<Vec<f64>>>()?;
                    let vp = vd
                        .encode(cfg.kind, cfg.penalty_a, cfg.penalty_b)?
                        .into_iter()
                        .map(|i| PreparedProblem::new(i, scale, k))
                        .collect::<Result<Vec<_>>>()?;
                    Some((vp, energies))
                }
                _ => None,
            };
            let val = val_data.as_ref().map(|(p, e)| Validation { problems: p, oracle_energies: e });
            let mut net = PolicyValueNet::new(cfg.net.clone(), cfg.seed)?;
            let report = train(&mut net, &cfg.ppo, &cfg.schedule, &problems, val.as_ref(), cfg.seed, Some(out))?;
            println!("trained {} epochs, {} updates", report.log.len(), report.updates);
        }
        TrainMethod::Mfa | TrainMethod::Egn => {
            let mut mcfg = cfg.mfa.clone();
            mcfg.method = if cfg.method == TrainMethod::Mfa { MfaMethod::Reinforce } else { MfaMethod::Egn };
            let models: Vec<_> = instances.iter().map(|i| scale.apply(&i.model)).collect();
            let mut net = MfaNet::new(cfg.mfa_net.clone(), cfg.seed)?;
            let log = train_mfa(&mut net, &mcfg, &models, cfg.seed)?;
            let mut w = csv::Writer::from_path(out.join(MFA_LOG))?;
            for row in &log {
                w.serialize(row)?;
            }
            w.flush()?;
            net.checkpoint().save(&out.join(vagco::ppo::FINAL_CHECKPOINT))?;
            println!("trained {} epochs", log.len());
        }
    }
    Ok(())
}

/// Problem settings: flags, else the run config beside `checkpoint`, else defaults.
fn resolve_problem(p: &ProblemArgs, checkpoint: Option<&Path>) -> Result<(ProblemKind, f64, f64)> {
    let sibling = checkpoint.and_then(|c| c.parent()).map(|d| d.join(CONFIG_ECHO)).filter(|f| f.exists());
    let base = match sibling {
        Some(f) => RunConfig::load(&f)?,
        None => RunConfig::default(),
    };
    Ok((p.kind.unwrap_or(base.kind), p.penalty_a.unwrap_or(base.penalty_a), p.penalty_b.unwrap_or(base.penalty_b)))
}

fn load_scale(flag: Option<&Path>, checkpoint: &Path) -> Result<EnergyScale> {
    let path = match flag {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(SCALE_FILE),
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Input(format!("cannot read energy scale {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn bench_dataset(dir: &Path, oracle: Option<&Path>, kind: ProblemKind, a: f64, b: f64) -> Result<(Dataset, Vec<BenchInstance>)> {
    let data = Dataset::load(dir)?;
    let ids = data.ids();
    let oracles = match oracle {
        Some(o) => load_oracles(o, &ids, kind, a, b)?,
        None => vec![None; ids.len()],
    };
    let entries = data
        .encode(kind, a, b)?
        .into_iter()
        .zip(ids)
        .zip(oracles)
        .map(|((instance, id), oracle)| BenchInstance { id, instance, oracle })
        .collect();
    Ok((data, entries))
}

fn write_report(
    out: &Path,
    data: &Dataset,
    entries: &[BenchInstance],
    solver: &dyn Solver,
    n_s: usize,
    seeds: &[u64],
    timing: bool,
    plot: bool,
    config: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_ECHO), serde_json::to_string_pretty(&config)? + "\n")?;
    let report = run_benchmark(entries, &[solver], n_s, seeds, timing, config);
    report.write_csv(&out.join(BENCH_CSV))?;
    report.write_json(&out.join(BENCH_JSON))?;
    if plot {
        let x_of = |id: &str| {
            let e = data.manifest.entries.iter().find(|e| e.id == id)?;
            match e.generator.as_ref().map(|g| &g.family) {
                Some(Family::Rb { p, .. }) => Some(*p),
                Some(Family::Rrg { d, .. }) => Some(*d as f64),
                _ => Some(e.n as f64),
            }
        };
        std::fs::write(out.join("eps_best.svg"), report.svg("eps_best", "generator parameter", x_of))?;
    }
    for e in &report.errors {
        eprintln!("warning: {} / {} / seed {}: {}", e.instance_id, e.method, e.seed, e.message);
    }
    for a in report.aggregates.iter().filter(|a| a.metric == "eps_best" || a.metric == "ar_star") {
        println!("{} {} = {:.6} ± {:.6}", a.method, a.metric, a.mean, a.std_err);
    }
    Ok(())
}

fn seeds(seed: u64, n: u64) -> Vec<u64> {
    (0..n.max(1)).map(|i| seed + i).collect()
}

fn eval(a: &EvalArgs, seed: u64, timing: bool) -> Result<()> {
    let (kind, pa, pb) = resolve_problem(&a.problem, Some(&a.checkpoint))?;
    let net = PolicyValueNet::from_checkpoint(&Checkpoint::read(&a.checkpoint)?)?;
    let scale = load_scale(a.scale.as_deref(), &a.checkpoint)?;
    let (data, entries) = bench_dataset(&a.dataset, a.oracle.as_deref(), kind, pa, pb)?;
    if a.n_samples == 0 {
        return Err(Error::Input("--n-samples must be positive".into()));
    }
    let orderings = a.orderings.unwrap_or((a.n_samples / 2).max(1));
    let solver = VagCoSolver { net, scale, mode: a.mode, os_orderings: orderings };
    let config = json!({
        "format": vagco::metrics::REPORT_FORMAT, "command": "eval", "seed": seed, "kind": kind,
        "penalty_a": pa, "penalty_b": pb, "args": a,
    });
    write_report(&a.out, &data, &entries, &solver, a.n_samples, &seeds(seed, a.n_seeds), timing, a.plot, config)
}

fn baseline(a: &BaselineArgs, seed: u64, timing: bool) -> Result<()> {
    let (kind, pa, pb) = resolve_problem(&a.problem, a.checkpoint.as_deref())?;
    let (data, entries) = bench_dataset(&a.dataset, a.oracle.as_deref(), kind, pa, pb)?;
    let solver: Box<dyn Solver> = match a.method {
        BaselineMethod::DbGreedy => Box::new(DbGreedySolver),
        BaselineMethod::Rga => Box::new(RgaSolver { n_r: a.n_r }),
        BaselineMethod::Oracle => {
            if a.oracle.is_none() {
                return Err(Error::Input("--method oracle needs --oracle".into()));
            }
            Box::new(OracleSolver)
        }
        BaselineMethod::MfaCe | BaselineMethod::EgnCe => {
            let ckpt = a.checkpoint.as_ref().ok_or_else(|| Error::Input("mean-field baselines need --checkpoint".into()))?;
            let net = MfaNet::from_checkpoint(&Checkpoint::read(ckpt)?)?;
            let label = if a.method == BaselineMethod::MfaCe { "mfa-ce" } else { "egn-ce" };
            Box::new(MfaCeSolver { label: label.into(), net, scale: load_scale(a.scale.as_deref(), ckpt)? })
        }
    };
    let config = json!({
        "format": vagco::metrics::REPORT_FORMAT, "command": "baseline", "seed": seed, "kind": kind,
        "penalty_a": pa, "penalty_b": pb, "args": a,
    });
    write_report(&a.out, &data, &entries, solver.as_ref(), a.n_samples, &seeds(seed, a.n_seeds), timing, a.plot, config)
}

fn oracle(dir: &Path, out: &Path, p: &ProblemArgs, limit_n: usize) -> Result<()> {
    let (kind, pa, pb) = resolve_problem(p, None)?;
    let data = Dataset::load(dir)?;
    let instances = data.encode(kind, pa, pb)?;
    std::fs::create_dir_all(out)?;
    let echo = json!({"format": ORACLE_FORMAT, "command": "oracle", "kind": kind, "penalty_a": pa, "penalty_b": pb, "limit_n": limit_n});
    std::fs::write(out.join(CONFIG_ECHO), serde_json::to_string_pretty(&echo)? + "\n")?;
    let mut first_err: Option<Error> = None;
    for (id, inst) in data.ids().into_iter().zip(&instances) {
        match solve_instance(inst, limit_n) {
            Ok(result) => {
                let f = OracleFile { format: ORACLE_FORMAT.into(), instance_id: id.clone(), kind, penalty_a: pa, penalty_b: pb, result };
                std::fs::write(oracle_path(out, &id), serde_json::to_string_pretty(&f)? + "\n")?;
            }
            Err(e) => {
                eprintln!("warning: {id}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => {
            println!("solved {} instances", instances.len());
            Ok(())
        }
    }
}

fn theory(config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let cfg = match config {
        Some(p) => {
            let rc = RunConfig::load(p)?;
            rc.theory
        }
        None => TheoryConfig::default(),
    };
    let rows = run_theory(&cfg, seed)?;
    std::fs::create_dir_all(out)?;
    let echo = json!({"format": "vagco-theory/1", "command": "theory", "seed": seed, "theory": cfg});
    std::fs::write(out.join(CONFIG_ECHO), serde_json::to_string_pretty(&echo)? + "\n")?;
    let mut w = csv::Writer::from_path(out.join(THEORY_CSV))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("wrote {} rows", rows.len());
    Ok(())
}
