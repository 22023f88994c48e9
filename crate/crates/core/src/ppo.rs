//! PPO training of [`PolicyValueNet`](crate::policy::PolicyValueNet) under an
//! annealed free-energy reward.

use std::path::Path;

use rand::seq::SliceRandom as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::ising::{EnergyScale, ProblemInstance};
use crate::metrics::{eps_rel, EpsMode};
use crate::nn::{Gradients, Optimizer, OptimizerKind, Tape, Tensor, Var};
use crate::policy::{
    batched_outputs, generate, pick_config, GenerationState, Observation, PolicyValueNet, PreparedProblem, SamplingMode,
};
use crate::rng;

/// Warmup at `t0`, then a cosine-modulated decay reaching zero at
/// `n_warmup + n_anneal`.
///
/// After warmup, with `r = (epoch − n_warmup) / n_anneal`:
/// `T = t0 / (1 + slope·r) · ½·[cos(2π(oscillations + ½)·r) + 1]`.
/// The ½ keeps the schedule continuous at the warmup boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealSchedule {
    pub t0: f64,
    pub n_warmup: usize,
    pub n_anneal: usize,
    pub oscillations: u32,
    pub slope: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule { t0: 0.05, n_warmup: 400, n_anneal: 2000, oscillations: 3, slope: 6.0 }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 >= 0.0 && self.t0.is_finite()) {
            return input(format!("t0 must be finite and >= 0, got {}", self.t0));
        }
        if self.n_anneal == 0 {
            return input("n_anneal must be >= 1");
        }
        if !(self.slope >= 0.0) {
            return input("slope must be >= 0");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.n_warmup + self.n_anneal
    }

    /// Envelope `t0 / (1 + slope·r)` without the oscillation.
    pub fn envelope(&self, epoch: usize) -> f64 {
        let r = self.progress(epoch);
        self.t0 / (1.0 + self.slope * r)
    }

    fn progress(&self, epoch: usize) -> f64 {
        (epoch.saturating_sub(self.n_warmup) as f64 / self.n_anneal as f64).min(1.0)
    }

    pub fn temperature(&self, epoch: usize) -> f64 {
        if epoch < self.n_warmup {
            return self.t0;
        }
        let e = (epoch - self.n_warmup) as u128;
        let na = self.n_anneal as u128;
        if e >= na {
            return 0.0;
        }
        // bracket zeros sit where (2λ+1)·e / n_anneal is an odd integer; detect them
        // exactly so the schedule hits 0 rather than roundoff
        let phase = e * (2 * u128::from(self.oscillations) + 1);
        if phase % na == 0 && (phase / na) % 2 == 1 {
            return 0.0;
        }
        let r = e as f64 / na as f64;
        let w = 2.0 * std::f64::consts::PI * (f64::from(self.oscillations) + 0.5);
        self.t0 / (1.0 + self.slope * r) * 0.5 * ((w * r).cos() + 1.0)
    }

    /// `1/T`, or `None` when the entropy term is switched off (`T = 0`).
    pub fn beta(&self, epoch: usize) -> Option<f64> {
        beta_of(self.temperature(epoch))
    }

    /// Epochs in the anneal range where the bracket is exactly zero.
    pub fn analytic_zero_count(&self) -> usize {
        let odd = 2 * self.oscillations as usize + 1;
        (0..=self.oscillations as usize)
            .filter(|j| (2 * j + 1) * self.n_anneal % odd == 0)
            .count()
    }
}

pub fn beta_of(temperature: f64) -> Option<f64> {
    (temperature > 0.0).then(|| 1.0 / temperature)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub n_repeat: usize,
    pub gamma: f64,
    /// `None` means `1 − 1/horizon`.
    pub gae_lambda: Option<f64>,
    /// Token steps collected per slot each epoch.
    pub horizon: usize,
    /// Instances collected in parallel.
    pub n_instances: usize,
    /// Trajectories per instance.
    pub n_samples: usize,
    pub minib_instances: usize,
    pub minib_steps: usize,
    pub minib_samples: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub normalize_advantages: bool,
    /// `None` runs the schedule's warmup plus anneal length.
    pub epochs: Option<usize>,
    /// Validate every this many epochs (and after the last one); 0 disables.
    pub val_every: usize,
    /// Greedy orderings per validation instance.
    pub val_orderings: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.1,
            value_coef: 0.5,
            n_repeat: 2,
            gamma: 1.0,
            gae_lambda: None,
            horizon: 5,
            n_instances: 30,
            n_samples: 30,
            minib_instances: 10,
            minib_steps: 5,
            minib_samples: 10,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            clip_norm: Some(1.0),
            normalize_advantages: true,
            epochs: None,
            val_every: 50,
            val_orderings: 8,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return input(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return input(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if let Some(l) = self.gae_lambda {
            if !(0.0..=1.0).contains(&l) {
                return input(format!("gae_lambda must lie in [0, 1], got {l}"));
            }
        }
        let dims = [
            ("horizon", self.horizon),
            ("n_instances", self.n_instances),
            ("n_samples", self.n_samples),
            ("minib_instances", self.minib_instances),
            ("minib_steps", self.minib_steps),
            ("minib_samples", self.minib_samples),
            ("n_repeat", self.n_repeat),
        ];
        if let Some((name, _)) = dims.iter().find(|d| d.1 == 0) {
            return input(format!("{name} must be >= 1"));
        }
        if !(self.lr > 0.0) || self.value_coef < 0.0 {
            return input("lr must be > 0 and value_coef >= 0");
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.gae_lambda.unwrap_or(1.0 - 1.0 / self.horizon as f64)
    }
}

/// Per-token reward `−(ΔE + log p / β)`; `beta = None` drops the entropy term.
pub fn reward(delta_e: f64, log_prob: f64, beta: Option<f64>) -> Result<f64> {
    match beta {
        None => Ok(-delta_e),
        Some(b) if b > 0.0 => Ok(-(delta_e + log_prob / b)),
        Some(b) => input(format!("inverse temperature must be > 0, got {b}")),
    }
}

/// Generalized advantage estimation. `values` carries one bootstrap entry past
/// the horizon (0 for a terminal state).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    gae_with_dones(rewards, values, &vec![false; rewards.len()], gamma, lambda)
}

/// GAE where `dones[t]` cuts bootstrapping and accumulation after step `t`.
pub fn gae_with_dones(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = rewards.len();
    if values.len() != t + 1 || dones.len() != t {
        return input(format!("GAE needs {} values and {t} done flags, got {} and {}", t + 1, values.len(), dones.len()));
    }
    let mut adv = vec![0.0; t];
    let mut next = 0.0;
    for i in (0..t).rev() {
        let keep = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * values[i + 1] * keep - values[i];
        next = delta + gamma * lambda * keep * next;
        adv[i] = next;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// One stored decision.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub advantage: f64,
    pub target: f64,
}

/// Transitions indexed by (instance slot h, sample s, step t). The stored
/// observation is the exact network input, so behavior log-probs re-score
/// without replaying the trajectory.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub n_instances: usize,
    pub n_samples: usize,
    pub horizon: usize,
    entries: Vec<Transition>,
}

impl RolloutBuffer {
    fn index(&self, h: usize, s: usize, t: usize) -> usize {
        (h * self.n_samples + s) * self.horizon + t
    }

    pub fn get(&self, h: usize, s: usize, t: usize) -> &Transition {
        &self.entries[self.index(h, s, t)]
    }

    pub fn entries(&self) -> &[Transition] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fill advantages and value targets; `bootstrap[h·S + s]` is the value of the
    /// state following the last stored step.
    pub fn compute_advantages(&mut self, bootstrap: &[f64], gamma: f64, lambda: f64) -> Result<()> {
        let tl = self.horizon;
        for slot in 0..self.n_instances * self.n_samples {
            let span = &mut self.entries[slot * tl..(slot + 1) * tl];
            let rewards: Vec<f64> = span.iter().map(|e| e.reward).collect();
            let mut values: Vec<f64> = span.iter().map(|e| e.value).collect();
            values.push(bootstrap[slot]);
            let dones: Vec<bool> = span.iter().map(|e| e.done).collect();
            let (adv, tgt) = gae_with_dones(&rewards, &values, &dones, gamma, lambda)?;
            for (e, (a, v)) in span.iter_mut().zip(adv.into_iter().zip(tgt)) {
                e.advantage = a;
                e.target = v;
            }
        }
        Ok(())
    }

    /// Nested minibatches: seeded permutations of instances, steps and samples,
    /// cut into blocks of the configured sizes.
    pub fn minibatches(&self, cfg: &PpoConfig, seed: u64) -> Vec<Vec<usize>> {
        let mut r = rng::stream(seed, &[0x3B]);
        let mut perm = |n: usize| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut r);
            p
        };
        let (hp, tp, sp) = (perm(self.n_instances), perm(self.horizon), perm(self.n_samples));
        let mut out = Vec::new();
        for hb in hp.chunks(cfg.minib_instances) {
            for tb in tp.chunks(cfg.minib_steps) {
                for sb in sp.chunks(cfg.minib_samples) {
                    let mut mb = Vec::with_capacity(hb.len() * tb.len() * sb.len());
                    for &h in hb {
                        for &s in sb {
                            for &t in tb {
                                mb.push(self.index(h, s, t));
                            }
                        }
                    }
                    out.push(mb);
                }
            }
        }
        out
    }
}

/// Loss terms of one minibatch chunk. `advantages` are already normalized.
pub struct PpoLosses {
    pub policy: Var,
    pub value: Var,
    pub combined: Var,
}

/// Clipped surrogate and value losses summed over `batch`, each divided by
/// `denom` (the full minibatch size) so chunk gradients add up to the mean.
pub fn ppo_losses(
    tape: &mut Tape,
    net: &PolicyValueNet,
    batch: &[&Transition],
    advantages: &[f64],
    cfg: &PpoConfig,
    denom: usize,
) -> Result<PpoLosses> {
    let obs: Vec<&Observation> = batch.iter().map(|e| &e.obs).collect();
    let out = net.forward(tape, &obs)?;
    let lp = tape.pick_cols(out.log_probs, batch.iter().map(|e| e.action).collect());
    let old = tape.constant(Tensor::column(batch.iter().map(|e| e.log_prob).collect()));
    let diff = tape.sub(lp, old);
    let ratio = tape.exp(diff);
    let a = tape.constant(Tensor::column(advantages.to_vec()));
    let s1 = tape.mul(ratio, a);
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let s2 = tape.mul(clipped, a);
    let m = tape.min(s1, s2);
    let l1 = tape.sum(m);
    let policy = tape.scale(l1, -1.0 / denom as f64);
    let tgt = tape.constant(Tensor::column(batch.iter().map(|e| e.target).collect()));
    let err = tape.sub(out.values, tgt);
    let sq = tape.mul(err, err);
    let l2 = tape.sum(sq);
    let value = tape.scale(l2, 1.0 / denom as f64);
    let wv = tape.scale(value, cfg.value_coef);
    let combined = tape.add(policy, wv);
    Ok(PpoLosses { policy, value, combined })
}

/// Standardize to mean 0, std 1 (population std, `1e-8` guard).
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    xs.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}

/// Energy scale fitted on one random-greedy (`n_R = 1`) solution per instance.
pub fn fit_energy_scale(instances: &[ProblemInstance], seed: u64) -> Result<EnergyScale> {
    let energies = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| inst.energy(&crate::baselines::rga(&inst.model, 1, rng::derive(seed, &[0x5C, i as u64]))))
        .collect::<Result<Vec<_>>>()?;
    EnergyScale::fit(&energies)
}

/// Validation data: prepared problems with their exact optima.
pub struct Validation<'a> {
    pub problems: &'a [PreparedProblem],
    pub oracle_energies: &'a [f64],
}

/// Mean over instances of best and mean relative error under ordered-greedy
/// decoding with `n_orderings` orderings.
pub fn evaluate_og(net: &PolicyValueNet, val: &Validation, n_orderings: usize, seed: u64) -> Result<(f64, f64)> {
    let mut best = 0.0;
    let mut mean = 0.0;
    for (i, (p, &opt)) in val.problems.iter().zip(val.oracle_energies).enumerate() {
        let ts = generate(p, net, SamplingMode::Og, 0, n_orderings, rng::derive(seed, &[0x7A, i as u64]))?;
        let es: Vec<f64> = ts.iter().map(|t| t.energy).collect();
        best += eps_rel(&es, opt, EpsMode::Best)?;
        mean += eps_rel(&es, opt, EpsMode::Mean)?;
    }
    let k = val.problems.len() as f64;
    Ok((best / k, mean / k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub temperature: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub loss: f64,
    /// Means over episodes completed this epoch, in standardized units.
    pub free_energy: Option<f64>,
    pub energy: Option<f64>,
    pub entropy: Option<f64>,
    pub val_eps_best: Option<f64>,
    pub val_eps_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub metric: f64,
    pub checkpoint: crate::nn::Checkpoint,
}

pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_eps_best: Option<BestCheckpoint>,
    pub best_eps_mean: Option<BestCheckpoint>,
    /// Gradient steps taken.
    pub updates: usize,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt.json";
pub const BEST_EPS_BEST_CHECKPOINT: &str = "best_eps_best.ckpt.json";
pub const BEST_EPS_MEAN_CHECKPOINT: &str = "best_eps_mean.ckpt.json";

/// Gradient chunk size; fixed so parallel reductions do not depend on threads.
const GRAD_CHUNK: usize = 32;

struct Group<'a> {
    problem: usize,
    ordering_seed: u64,
    slots: Vec<Slot<'a>>,
}

struct Slot<'a> {
    state: GenerationState<'a>,
    rng: rng::Rng,
    configs: Vec<usize>,
    sum_de: f64,
    sum_lp: f64,
}

/// An episode that finished during collection. Energies are in the network's
/// (standardized) units.
#[derive(Clone, Debug)]
pub struct Episode {
    pub problem: usize,
    pub ordering_seed: u64,
    pub configs: Vec<usize>,
    /// `E(σ)` including the offset.
    pub energy: f64,
    /// `log p(σ)` under the behavior parameters.
    pub log_prob: f64,
}

/// Persistent rollout slots: `n_instances` groups of `n_samples` trajectories
/// sharing an instance and ordering. Episodes longer than the horizon carry over
/// into the next collection; a group restarts on a fresh instance once done.
pub struct Collector<'a> {
    problems: &'a [PreparedProblem],
    n_samples: usize,
    horizon: usize,
    seed: u64,
    order: Vec<usize>,
    refills: u64,
    episodes: u64,
    groups: Vec<Group<'a>>,
}

impl<'a> Collector<'a> {
    pub fn new(problems: &'a [PreparedProblem], cfg: &PpoConfig, seed: u64) -> Result<Self> {
        if problems.is_empty() {
            return input("training set is empty");
        }
        let mut c = Collector {
            problems,
            n_samples: cfg.n_samples,
            horizon: cfg.horizon,
            seed,
            order: Vec::new(),
            refills: 0,
            episodes: 0,
            groups: Vec::new(),
        };
        for h in 0..cfg.n_instances as u64 {
            let g = c.fresh_group(h)?;
            c.groups.push(g);
        }
        Ok(c)
    }

    /// Round-robin over a reshuffled dataset, with a fresh ordering per episode.
    fn fresh_group(&mut self, h: u64) -> Result<Group<'a>> {
        if self.order.is_empty() {
            self.order = (0..self.problems.len()).collect();
            self.order.shuffle(&mut rng::stream(self.seed, &[0xFE, self.refills]));
            self.refills += 1;
        }
        let p = self.order.pop().expect("refilled");
        let ep = self.episodes;
        self.episodes += 1;
        let prob = &self.problems[p];
        let ordering_seed = rng::derive(self.seed, &[0x0E, ep]);
        let ordering = prob.ordering(ordering_seed)?;
        let slots = (0..self.n_samples as u64)
            .map(|s| {
                Ok(Slot {
                    state: GenerationState::new(&prob.net_model, ordering.clone(), prob.token_k)?,
                    rng: rng::stream(self.seed, &[0x5A, ep, h, s]),
                    configs: Vec::new(),
                    sum_de: 0.0,
                    sum_lp: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Group { problem: p, ordering_seed, slots })
    }

    fn observations(&self) -> Result<Vec<Observation>> {
        self.groups.iter().flat_map(|g| g.slots.iter().map(|s| s.state.observation())).collect()
    }

    /// Run `horizon` token steps in every slot at temperature `temperature`.
    /// Advantages are left at zero.
    pub fn collect(&mut self, net: &PolicyValueNet, temperature: f64) -> Result<(RolloutBuffer, Vec<Episode>, Vec<f64>)> {
        let beta = beta_of(temperature);
        let n_slots = self.groups.len() * self.n_samples;
        let mut steps: Vec<Vec<Transition>> = (0..n_slots).map(|_| Vec::with_capacity(self.horizon)).collect();
        let mut finished = Vec::new();
        for _ in 0..self.horizon {
            let obs = self.observations()?;
            let outs = batched_outputs(net, &obs)?;
            let mut it = obs.into_iter().zip(outs);
            for (h, g) in self.groups.iter_mut().enumerate() {
                for (s, slot) in g.slots.iter_mut().enumerate() {
                    let (o, (lps, value)) = it.next().expect("one output per slot");
                    let action = pick_config(&lps, rand::Rng::gen(&mut slot.rng));
                    let de = slot.state.apply_token(action)?;
                    let lp = lps[action];
                    slot.configs.push(action);
                    slot.sum_de += de;
                    slot.sum_lp += lp;
                    let done = slot.state.is_done();
                    if done {
                        finished.push(Episode {
                            problem: g.problem,
                            ordering_seed: g.ordering_seed,
                            configs: std::mem::take(&mut slot.configs),
                            energy: slot.sum_de + self.problems[g.problem].net_model.offset(),
                            log_prob: slot.sum_lp,
                        });
                    }
                    steps[h * self.n_samples + s].push(Transition {
                        obs: o,
                        action,
                        log_prob: lp,
                        value,
                        reward: reward(de, lp, beta)?,
                        done,
                        advantage: 0.0,
                        target: 0.0,
                    });
                }
            }
            for h in 0..self.groups.len() {
                if self.groups[h].slots.iter().all(|s| s.state.is_done()) {
                    self.groups[h] = self.fresh_group(h as u64)?;
                }
            }
        }
        // successor values for truncated trajectories; masked by `done` otherwise
        let bootstrap = batched_outputs(net, &self.observations()?)?.into_iter().map(|(_, v)| v).collect();
        let buffer = RolloutBuffer {
            n_instances: self.groups.len(),
            n_samples: self.n_samples,
            horizon: self.horizon,
            entries: steps.into_iter().flatten().collect(),
        };
        Ok((buffer, finished, bootstrap))
    }
}

/// Train `net` with PPO. Problems must share the network's token size and be
/// standardized. When `out_dir` is given, the log and checkpoints are written
/// there.
pub fn train(
    net: &mut PolicyValueNet,
    cfg: &PpoConfig,
    schedule: &AnnealSchedule,
    problems: &[PreparedProblem],
    val: Option<&Validation>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    schedule.validate()?;
    if problems.is_empty() {
        return input("training set is empty");
    }
    if problems.iter().any(|p| p.token_k != net.config.token_k) {
        return input("training problems and network disagree on token size");
    }
    if let Some(v) = val {
        if v.problems.len() != v.oracle_energies.len() || v.problems.is_empty() {
            return input("validation needs one oracle energy per problem");
        }
    }
    let epochs = cfg.epochs.unwrap_or_else(|| schedule.total_epochs());
    let lambda = cfg.lambda();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.clip_norm);
    let mut collector = Collector::new(problems, cfg, seed)?;
    let mut report = TrainReport { log: Vec::with_capacity(epochs), best_eps_best: None, best_eps_mean: None, updates: 0 };
    let mut writer = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(csv::Writer::from_path(d.join(LOG_FILE))?)
        }
        None => None,
    };
    for epoch in 0..epochs {
        let temperature = schedule.temperature(epoch);
        let (mut buffer, finished, bootstrap) = collector.collect(net, temperature)?;
        buffer.compute_advantages(&bootstrap, cfg.gamma, lambda)?;

        // updates
        let (mut pl, mut vl, mut tl, mut nb) = (0.0, 0.0, 0.0, 0usize);
        for rep in 0..cfg.n_repeat {
            for mb in buffer.minibatches(cfg, rng::derive(seed, &[0x3B, epoch as u64, rep as u64])) {
                let raw: Vec<f64> = mb.iter().map(|&i| buffer.entries[i].advantage).collect();
                let adv = if cfg.normalize_advantages && mb.len() > 1 { normalize(&raw) } else { raw };
                let (p, v, c) = minibatch_gradients(net, &buffer, &mb, &adv, cfg)?;
                if !(p.is_finite() && v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite PPO loss at epoch {epoch}")));
                }
                let norm = opt.step(&mut net.store);
                if !norm.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient norm at epoch {epoch}")));
                }
                report.updates += 1;
                pl += p;
                vl += v;
                tl += c;
                nb += 1;
            }
        }
        let nb = nb.max(1) as f64;
        let mean_of = |f: &dyn Fn(&Episode) -> f64| -> Option<f64> {
            (!finished.is_empty()).then(|| finished.iter().map(f).sum::<f64>() / finished.len() as f64)
        };
        let mut entry = EpochLog {
            epoch,
            temperature,
            policy_loss: pl / nb,
            value_loss: vl / nb,
            loss: tl / nb,
            free_energy: mean_of(&|e| e.energy + temperature * e.log_prob),
            energy: mean_of(&|e| e.energy),
            entropy: mean_of(&|e| -e.log_prob),
            val_eps_best: None,
            val_eps_mean: None,
        };
        if let Some(v) = val {
            if cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == epochs) {
                let (eb, em) = evaluate_og(net, v, cfg.val_orderings, rng::derive(seed, &[0x7A]))?;
                entry.val_eps_best = Some(eb);
                entry.val_eps_mean = Some(em);
                if report.best_eps_best.as_ref().map_or(true, |b| eb < b.metric) {
                    report.best_eps_best = Some(BestCheckpoint { epoch, metric: eb, checkpoint: net.checkpoint() });
                }
                if report.best_eps_mean.as_ref().map_or(true, |b| em < b.metric) {
                    report.best_eps_mean = Some(BestCheckpoint { epoch, metric: em, checkpoint: net.checkpoint() });
                }
            }
        }
        if let Some(w) = writer.as_mut() {
            w.serialize(&entry)?;
            w.flush()?;
        }
        report.log.push(entry);
    }
    if let Some(d) = out_dir {
        net.checkpoint().save(&d.join(FINAL_CHECKPOINT))?;
        if let Some(b) = &report.best_eps_best {
            b.checkpoint.save(&d.join(BEST_EPS_BEST_CHECKPOINT))?;
        }
        if let Some(b) = &report.best_eps_mean {
            b.checkpoint.save(&d.join(BEST_EPS_MEAN_CHECKPOINT))?;
        }
    }
    Ok(report)
}

/// Accumulate the minibatch gradient into the store; returns the loss terms.
fn minibatch_gradients(
    net: &mut PolicyValueNet,
    buffer: &RolloutBuffer,
    mb: &[usize],
    adv: &[f64],
    cfg: &PpoConfig,
) -> Result<(f64, f64, f64)> {
    let chunks: Vec<(&[usize], &[f64])> = mb.chunks(GRAD_CHUNK).zip(adv.chunks(GRAD_CHUNK)).collect();
    let shared: &PolicyValueNet = net;
    let parts: Vec<Result<(Gradients, f64, f64, f64)>> = chunks
        .par_iter()
        .map(|(idx, a)| {
            let batch: Vec<&Transition> = idx.iter().map(|&i| &buffer.entries[i]).collect();
            let mut tape = Tape::new(&shared.store);
            let l = ppo_losses(&mut tape, shared, &batch, a, cfg, mb.len())?;
            let g = tape.backward(l.combined)?;
            Ok((g, tape.scalar(l.policy), tape.scalar(l.value), tape.scalar(l.combined)))
        })
        .collect();
    net.store.zero_grad();
    let (mut p, mut v, mut c) = (0.0, 0.0, 0.0);
    for part in parts {
        let (g, a, b, d) = part?;
        net.store.accumulate(&g);
        p += a;
        v += b;
        c += d;
    }
    Ok((p, v, c))
}
