//! Comparison methods: degree-based greedy, random greedy, and the mean-field
//! family (REINFORCE-trained MFA, closed-form EGN) with conditional-expectation
//! decoding.

use rand::seq::SliceRandom as _;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::ising::{IsingModel, ProblemInstance, ProblemKind, SpinState};
use crate::nn::{Gradients, MessageGraph, Mlp, MpnnLayer, Optimizer, OptimizerKind, OutAct, ParamStore, Tape, Tensor, Var};
use crate::ppo::AnnealSchedule;
use crate::rng;

/// Minimum-degree greedy independent set on the working graph; vertex covers are
/// its complement. Ties go to the lowest node id.
pub fn db_greedy(instance: &ProblemInstance) -> SpinState {
    let g = &instance.graph;
    let n = g.n();
    let mut alive = vec![true; n];
    let mut deg: Vec<usize> = (0..n).map(|v| g.degree(v)).collect();
    let mut set = vec![false; n];
    while let Some(v) = (0..n).filter(|&v| alive[v]).min_by_key(|&v| (deg[v], v)) {
        set[v] = true;
        let mut removed = vec![v];
        removed.extend(g.neighbors(v).iter().copied().filter(|&u| alive[u]));
        for &u in &removed {
            alive[u] = false;
        }
        for &u in &removed {
            for &w in g.neighbors(u) {
                if alive[w] {
                    deg[w] -= 1;
                }
            }
        }
    }
    match instance.kind {
        ProblemKind::Mvc => SpinState::from_q(&set.iter().map(|&x| !x).collect::<Vec<_>>()),
        _ => SpinState::from_q(&set),
    }
}

/// Uniform random state followed by `n·n_r` single-spin proposals, each accepted
/// only when it strictly lowers the energy.
pub fn rga(model: &IsingModel, n_r: usize, seed: u64) -> SpinState {
    let n = model.n();
    let mut r = rng::stream(seed, &[0x26A]);
    let mut s: Vec<i8> = (0..n).map(|_| if r.gen::<bool>() { 1 } else { -1 }).collect();
    if n > 0 {
        for _ in 0..n * n_r {
            let i = r.gen_range(0..n);
            // flipping σ_i changes the energy by −2 σ_i h_i
            if -2.0 * f64::from(s[i]) * model.local_field(&s, i) < 0.0 {
                s[i] = -s[i];
            }
        }
    }
    SpinState::new(s).expect("spins are ±1")
}

/// Probabilities are kept inside `[P_CLAMP, 1 − P_CLAMP]` for log stability.
pub const P_CLAMP: f64 = 1e-7;
/// Random binary node features per decode attempt.
pub const RANDOM_BITS: usize = 6;
/// Decode attempts per instance for conditional-expectation rounding.
pub const CE_ATTEMPTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfaNetConfig {
    pub encoder: Vec<usize>,
    pub mpnn_layers: usize,
    pub msg_mlp: Vec<usize>,
    pub node_mlp: Vec<usize>,
    /// Hidden widths of the per-node output MLP; the 2-way layer is appended.
    pub output: Vec<usize>,
}

impl Default for MfaNetConfig {
    fn default() -> Self {
        MfaNetConfig { encoder: vec![64], mpnn_layers: 3, msg_mlp: vec![64, 64], node_mlp: vec![64, 64], output: vec![64, 64] }
    }
}

impl MfaNetConfig {
    pub fn desk() -> Self {
        MfaNetConfig { encoder: vec![16], mpnn_layers: 2, msg_mlp: vec![16, 16], node_mlp: vec![16, 16], output: vec![16, 16] }
    }
}

/// Per-node product-of-Bernoullis network.
#[derive(Clone, Debug)]
pub struct MfaNet {
    pub config: MfaNetConfig,
    pub store: ParamStore,
    encoder: Mlp,
    layers: Vec<MpnnLayer>,
    output: Mlp,
}

/// Per-node probability of `q_i = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MfaOutput {
    pub probs: Vec<f64>,
}

impl MfaNet {
    pub fn new(config: MfaNetConfig, seed: u64) -> Result<Self> {
        if config.encoder.is_empty() || config.msg_mlp.is_empty() || config.node_mlp.is_empty() {
            return input("MFA encoder, message and node MLPs must be nonempty");
        }
        let mut store = ParamStore::new(seed);
        let encoder = Mlp::new(&mut store, "enc", 1 + RANDOM_BITS, &config.encoder, OutAct::Relu);
        let mut d = encoder.out_dim();
        let mut layers = Vec::new();
        for l in 0..config.mpnn_layers {
            let layer = MpnnLayer::new(&mut store, &format!("mp{l}"), d, &config.msg_mlp, &config.node_mlp, config.mpnn_layers > 3);
            d = layer.out_dim();
            layers.push(layer);
        }
        let mut sizes = config.output.clone();
        sizes.push(2);
        let output = Mlp::new(&mut store, "out", d, &sizes, OutAct::Linear);
        Ok(MfaNet { config, store, encoder, layers, output })
    }

    pub fn output_layer(&self) -> &crate::nn::Linear {
        self.output.output_layer()
    }

    /// Clamped probabilities of `q_i = 1` as an `n × 1` tape variable.
    pub fn probs(&self, tape: &mut Tape, model: &IsingModel, bits: &Tensor) -> Result<Var> {
        let n = model.n();
        if bits.shape() != [n, RANDOM_BITS] {
            return input(format!("random features must be {n} × {RANDOM_BITS}, got {:?}", bits.shape()));
        }
        let mut feats = Tensor::zeros(n, 1 + RANDOM_BITS);
        for i in 0..n {
            feats.data[i * (1 + RANDOM_BITS)] = model.fields()[i];
            feats.data[i * (1 + RANDOM_BITS) + 1..(i + 1) * (1 + RANDOM_BITS)].copy_from_slice(bits.row_slice(i));
        }
        let mut g = MessageGraph::new(n);
        for &(u, v, j) in model.couplings() {
            g.add_edge(u, v, j);
        }
        let x = tape.constant(feats);
        let mut h = self.encoder.forward(tape, x)?;
        for layer in &self.layers {
            h = layer.forward(tape, h, &g)?;
        }
        let logits = self.output.forward(tape, h)?;
        let lsm = tape.log_softmax_rows(logits);
        let first = tape.pick_cols(lsm, vec![0; n]);
        let p = tape.exp(first);
        Ok(tape.clamp(p, P_CLAMP, 1.0 - P_CLAMP))
    }

    pub fn checkpoint(&self) -> crate::nn::Checkpoint {
        self.store.to_checkpoint(serde_json::to_value(&self.config).expect("config serializes"))
    }

    pub fn from_checkpoint(ckpt: &crate::nn::Checkpoint) -> Result<Self> {
        let config: MfaNetConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut net = MfaNet::new(config, ckpt.init_seed)?;
        net.store.load(ckpt)?;
        Ok(net)
    }
}

pub fn mfa_forward(net: &MfaNet, model: &IsingModel, bits: &Tensor) -> Result<MfaOutput> {
    let mut tape = Tape::new(&net.store);
    let p = net.probs(&mut tape, model, bits)?;
    Ok(MfaOutput { probs: tape.value(p).data.clone() })
}

/// `n × 6` matrix of uniform random bits.
pub fn random_bits(n: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[0xB175]);
    Tensor::from_vec(n, RANDOM_BITS, (0..n * RANDOM_BITS).map(|_| f64::from(u8::from(r.gen::<bool>()))).collect())
}

/// Independent draws `q_i ~ Bernoulli(p_i)`.
pub fn sample_q(probs: &[f64], count: usize, r: &mut rng::Rng) -> Vec<Vec<bool>> {
    (0..count).map(|_| probs.iter().map(|&p| r.gen::<f64>() < p).collect()).collect()
}

pub fn log_prob_q(probs: &[f64], q: &[bool]) -> f64 {
    probs.iter().zip(q).map(|(&p, &b)| if b { p.ln() } else { (1.0 - p).ln() }).sum()
}

/// Surrogate whose gradient is the REINFORCE estimate
/// `mean_s (score_s − b)·∇log p(q_s)`; scores are constants and `b` is their
/// sample mean when `baseline` is set, otherwise 0.
pub fn reinforce_surrogate(tape: &mut Tape, p: Var, samples: &[Vec<bool>], scores: &[f64], baseline: bool) -> Result<Var> {
    let s = samples.len();
    if s == 0 || scores.len() != s {
        return input("REINFORCE needs one score per sample and at least one sample");
    }
    let n = tape.value(p).rows;
    let b = if baseline { scores.iter().sum::<f64>() / s as f64 } else { 0.0 };
    let q = Tensor::from_vec(s, n, samples.iter().flatten().map(|&x| f64::from(u8::from(x))).collect());
    let nq = q.map(|x| 1.0 - x);
    let lp = tape.ln(p);
    let one_minus = tape.affine(p, -1.0, 1.0);
    let l1p = tape.ln(one_minus);
    let (qv, nqv) = (tape.constant(q), tape.constant(nq));
    let a = tape.matmul(qv, lp);
    let c = tape.matmul(nqv, l1p);
    let logp = tape.add(a, c);
    let w = tape.constant(Tensor::row(scores.iter().map(|x| (x - b) / s as f64).collect()));
    let loss = tape.matmul(w, logp);
    Ok(tape.sum(loss))
}

/// Score of a sample: its energy, plus `(1/β)·log p` for the annealed variant.
pub fn sample_score(model: &IsingModel, probs: &[f64], q: &[bool], beta: Option<f64>) -> f64 {
    let e = model.energy(&SpinState::from_q(q)).expect("length matches");
    match beta {
        Some(b) => e + log_prob_q(probs, q) / b,
        None => e,
    }
}

/// One REINFORCE gradient estimate for `net` on `model`. Returns the gradients
/// and the mean score.
pub fn reinforce_step(
    net: &MfaNet,
    model: &IsingModel,
    bits: &Tensor,
    n_samples: usize,
    beta: Option<f64>,
    seed: u64,
) -> Result<(Gradients, f64)> {
    if n_samples < 2 {
        return input("REINFORCE needs at least 2 samples");
    }
    let mut tape = Tape::new(&net.store);
    let p = net.probs(&mut tape, model, bits)?;
    let probs = tape.value(p).data.clone();
    let mut r = rng::stream(seed, &[0x2E1F]);
    let samples = sample_q(&probs, n_samples, &mut r);
    let scores: Vec<f64> = samples.iter().map(|q| sample_score(model, &probs, q, beta)).collect();
    let loss = reinforce_surrogate(&mut tape, p, &samples, &scores, true)?;
    let mean = scores.iter().sum::<f64>() / n_samples as f64;
    Ok((tape.backward(loss)?, mean))
}

/// Expected energy of the product distribution, by substituting `σ_i → 2p_i − 1`
/// (exact: the energy is multilinear in independent spins), minus `(1/β)·H(p)`
/// when annealing. Differentiable in `p`.
pub fn egn_loss(tape: &mut Tape, p: Var, model: &IsingModel, beta: Option<f64>) -> Result<Var> {
    let n = model.n();
    if tape.value(p).shape() != [n, 1] {
        return input(format!("expected {n} × 1 probabilities, got {:?}", tape.value(p).shape()));
    }
    let m = tape.affine(p, 2.0, -1.0);
    let bf = tape.constant(Tensor::row(model.fields().to_vec()));
    let mut total = tape.matmul(bf, m);
    if !model.couplings().is_empty() {
        let us = model.couplings().iter().map(|c| c.0).collect();
        let vs = model.couplings().iter().map(|c| c.1).collect();
        let mu = tape.gather_rows(m, us);
        let mv = tape.gather_rows(m, vs);
        let prod = tape.mul(mu, mv);
        let jr = tape.constant(Tensor::row(model.couplings().iter().map(|c| c.2).collect()));
        let pair = tape.matmul(jr, prod);
        total = tape.add(total, pair);
    }
    let mut loss = tape.affine(total, 1.0, model.offset());
    if let Some(b) = beta {
        // −(1/β)·H(p) = (1/β)·Σ [p ln p + (1−p) ln(1−p)]
        let pc = tape.clamp(p, P_CLAMP, 1.0 - P_CLAMP);
        let lp = tape.ln(pc);
        let a = tape.mul(pc, lp);
        let qc = tape.affine(pc, -1.0, 1.0);
        let lq = tape.ln(qc);
        let c = tape.mul(qc, lq);
        let negh = tape.add(a, c);
        let negh = tape.sum(negh);
        let scaled = tape.scale(negh, 1.0 / b);
        loss = tape.add(loss, scaled);
    }
    Ok(tape.sum(loss))
}

/// `Σ_σ p(σ)E(σ)` for a product distribution, in closed form.
pub fn expected_energy(probs: &[f64], model: &IsingModel) -> f64 {
    let m: Vec<f64> = probs.iter().map(|p| 2.0 * p - 1.0).collect();
    let mut e = model.offset();
    for (i, &b) in model.fields().iter().enumerate() {
        e += b * m[i];
    }
    for &(u, v, j) in model.couplings() {
        e += j * m[u] * m[v];
    }
    e
}

/// Sum of per-node binary entropies.
pub fn binary_entropy(probs: &[f64]) -> f64 {
    let h = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()) };
    probs.iter().map(|&p| h(p)).sum()
}

/// Derandomize a product distribution without raising its expected energy.
///
/// Nodes are fixed most-confident first (descending `|2p − 1|`, ties by id). Fixing
/// node `i` to `σ` changes the conditional expectation linearly with slope
/// `c_i = B_i + Σ_j J_ij m_j`, so the lower branch is `σ_i = −sign(c_i)`, and
/// `q_i = 0` on ties. Nodes with `p ∈ {0, 1}` are already fixed and kept.
pub fn conditional_expectation(probs: &[f64], model: &IsingModel) -> SpinState {
    let n = model.n();
    let mut m: Vec<f64> = probs.iter().map(|p| 2.0 * p - 1.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b].abs().total_cmp(&m[a].abs()).then(a.cmp(&b)));
    for i in order {
        if m[i].abs() == 1.0 {
            continue;
        }
        let c = model.fields()[i] + model.neighbors(i).iter().map(|&(j, w)| w * m[j]).sum::<f64>();
        m[i] = if c < 0.0 { 1.0 } else { -1.0 };
    }
    SpinState::new(m.iter().map(|&x| x as i8).collect()).expect("spins are ±1")
}

/// Best repaired CE rounding over [`CE_ATTEMPTS`] random-feature draws.
/// `net_model` is what the network sees (typically standardized); energies are
/// judged on the instance itself.
pub fn mfa_ce_decode(net: &MfaNet, instance: &ProblemInstance, net_model: &IsingModel, seed: u64) -> Result<(SpinState, f64)> {
    let mut best: Option<(SpinState, f64)> = None;
    for a in 0..CE_ATTEMPTS as u64 {
        let bits = random_bits(instance.n(), rng::derive(seed, &[0xCE, a]));
        let out = mfa_forward(net, net_model, &bits)?;
        let s = instance.repair(&conditional_expectation(&out.probs, &instance.model));
        let e = instance.energy(&s)?;
        if best.as_ref().map_or(true, |b| e < b.1) {
            best = Some((s, e));
        }
    }
    Ok(best.expect("at least one attempt"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MfaMethod {
    /// Sampled REINFORCE gradients.
    Reinforce,
    /// Closed-form expected energy.
    Egn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfaTrainConfig {
    pub method: MfaMethod,
    pub epochs: usize,
    pub batch: usize,
    pub n_samples: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    /// Annealing schedule; `None` trains at `T = 0`.
    pub schedule: Option<AnnealSchedule>,
}

impl Default for MfaTrainConfig {
    fn default() -> Self {
        MfaTrainConfig {
            method: MfaMethod::Reinforce,
            epochs: 200,
            batch: 32,
            n_samples: 30,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            clip_norm: Some(1.0),
            schedule: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfaEpochLog {
    pub epoch: usize,
    pub temperature: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Train an MFA network on (standardized) models. Each epoch draws one batch from
/// a seeded permutation and takes one optimizer step.
pub fn train_mfa(net: &mut MfaNet, cfg: &MfaTrainConfig, models: &[IsingModel], seed: u64) -> Result<Vec<MfaEpochLog>> {
    if models.is_empty() || cfg.batch == 0 {
        return input("MFA training needs a nonempty dataset and batch size");
    }
    if cfg.method == MfaMethod::Reinforce && cfg.n_samples < 2 {
        return input("REINFORCE needs at least 2 samples");
    }
    if let Some(s) = &cfg.schedule {
        s.validate()?;
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.clip_norm);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t = cfg.schedule.as_ref().map_or(0.0, |s| s.temperature(epoch));
        let beta = crate::ppo::beta_of(t);
        let batch: Vec<usize> = (0..cfg.batch.min(models.len()))
            .map(|_| {
                if order.is_empty() {
                    order = (0..models.len()).collect();
                    shuffle(&mut order, rng::derive(seed, &[0x0F, epoch as u64]));
                }
                order.pop().expect("refilled")
            })
            .collect();
        let parts: Vec<Result<(Gradients, f64)>> = batch
            .par_iter()
            .enumerate()
            .map(|(b, &i)| {
                let sub = rng::derive(seed, &[0x1E, epoch as u64, b as u64]);
                let bits = random_bits(models[i].n(), sub);
                match cfg.method {
                    MfaMethod::Reinforce => reinforce_step(net, &models[i], &bits, cfg.n_samples, beta, sub),
                    MfaMethod::Egn => {
                        let mut tape = Tape::new(&net.store);
                        let p = net.probs(&mut tape, &models[i], &bits)?;
                        let l = egn_loss(&mut tape, p, &models[i], beta)?;
                        Ok((tape.backward(l)?, tape.scalar(l)))
                    }
                }
            })
            .collect();
        net.store.zero_grad();
        let mut loss = 0.0;
        for part in parts {
            let (g, l) = part?;
            net.store.accumulate(&g);
            loss += l;
        }
        let k = batch.len() as f64;
        net.store.scale_grads(1.0 / k);
        let norm = opt.step(&mut net.store);
        if !norm.is_finite() || !loss.is_finite() {
            return Err(crate::Error::Numeric(format!("non-finite MFA loss or gradient at epoch {epoch}")));
        }
        log.push(MfaEpochLog { epoch, temperature: t, loss: loss / k, grad_norm: norm });
    }
    Ok(log)
}

pub(crate) fn shuffle<T>(xs: &mut [T], seed: u64) {
    xs.shuffle(&mut rng::stream(seed, &[0x5F]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{all_energies, boltzmann_enumerate};
    use crate::graph::Graph;
    use crate::instance_gen::gen_gnp;
    use crate::ising::encode;
    use crate::nn::{max_relative_error, Init};

    fn random_model(r: &mut rng::Rng, n: usize) -> IsingModel {
        let mut couplings = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if r.gen_bool(0.4) {
                    couplings.push((i, j, r.gen_range(-1.0..1.0)));
                }
            }
        }
        let fields = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        IsingModel::new(n, couplings, fields, r.gen_range(-2.0..2.0)).unwrap()
    }

    fn random_probs(r: &mut rng::Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| match r.gen_range(0..5) {
                0 => 0.0,
                1 => 1.0,
                _ => r.gen::<f64>(),
            })
            .collect()
    }

    fn enumerated_expectation(probs: &[f64], model: &IsingModel) -> f64 {
        let n = model.n();
        let es = all_energies(model, 20).unwrap();
        let mut total = 0.0;
        for (mask, e) in es.iter().enumerate() {
            let q: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let p: f64 = probs.iter().zip(&q).map(|(&p, &b)| if b { p } else { 1.0 - p }).product();
            total += p * e;
        }
        total
    }

    fn set_of(s: &SpinState) -> Vec<usize> {
        (0..s.len()).filter(|&i| s.q(i)).collect()
    }

    #[test]
    fn db_greedy_examples() {
        let mis = |g: &Graph| db_greedy(&encode(ProblemKind::Mis, g, 1.0, 1.1).unwrap());
        assert_eq!(set_of(&mis(&Graph::path(3))), vec![0, 2]);
        assert_eq!(set_of(&mis(&Graph::complete(4))).len(), 1);
        let star = Graph::star(4);
        assert_eq!(set_of(&mis(&star)), vec![1, 2, 3, 4]);
        let cover = db_greedy(&encode(ProblemKind::Mvc, &star, 1.0, 1.1).unwrap());
        assert_eq!(set_of(&cover), vec![0]);
    }

    #[test]
    fn db_greedy_is_always_feasible() {
        for seed in 0..100 {
            let g = gen_gnp(15, 0.3, seed).unwrap();
            for kind in [ProblemKind::Mis, ProblemKind::Mvc, ProblemKind::MaxCl] {
                let inst = encode(kind, &g, 1.0, 1.1).unwrap();
                let s = db_greedy(&inst);
                assert!(inst.is_feasible(&s));
                assert_eq!(db_greedy(&inst), s);
            }
        }
    }

    #[test]
    fn rga_examples() {
        let one = IsingModel::new(1, [], vec![1.0], 0.0).unwrap();
        for seed in 0..20 {
            assert_eq!(rga(&one, 5, seed).spins(), &[-1]);
        }
        let mut r = rng::stream(1, &[]);
        for seed in 0..100 {
            let m = random_model(&mut r, 12);
            let start = rga(&m, 0, seed);
            let end = rga(&m, 3, seed);
            assert!(m.energy(&end).unwrap() <= m.energy(&start).unwrap());
            assert_eq!(rga(&m, 3, seed), end);
        }
        // n_R = 0 is a uniform sample
        let free = IsingModel::new(2, [], vec![0.0, 0.0], 0.0).unwrap();
        let mut counts = [0usize; 4];
        for seed in 0..4000 {
            counts[rga(&free, 0, seed).to_mask() as usize] += 1;
        }
        let sd = (4000.0f64 * 0.25 * 0.75).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - 1000.0).abs() < 3.5 * sd), "{counts:?}");
    }

    #[test]
    fn egn_matches_enumeration() {
        let mut r = rng::stream(2, &[]);
        let store = ParamStore::new(0);
        for _ in 0..200 {
            let n = r.gen_range(1..=12);
            let m = random_model(&mut r, n);
            let probs = random_probs(&mut r, n);
            let mut tape = Tape::new(&store);
            let p = tape.constant(Tensor::column(probs.clone()));
            let l = egn_loss(&mut tape, p, &m, None).unwrap();
            let want = enumerated_expectation(&probs, &m);
            assert!((tape.scalar(l) - want).abs() < 1e-9);
            assert!((expected_energy(&probs, &m) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn egn_edge_cases() {
        let g = gen_gnp(8, 0.5, 3).unwrap();
        let inst = encode(ProblemKind::MaxCut, &g, 1.0, 1.1).unwrap();
        let m = &inst.model;
        assert_eq!(expected_energy(&[0.5; 8], m), m.offset());
        let s = SpinState::from_mask(8, 0b1011_0010);
        let probs: Vec<f64> = s.qs().iter().map(|&b| f64::from(u8::from(b))).collect();
        assert!((expected_energy(&probs, m) - m.energy(&s).unwrap()).abs() < 1e-12);
        // annealed loss subtracts T·H
        let store = ParamStore::new(0);
        let probs = vec![0.3; 8];
        let mut tape = Tape::new(&store);
        let p = tape.constant(Tensor::column(probs.clone()));
        let l = egn_loss(&mut tape, p, m, Some(4.0)).unwrap();
        let want = expected_energy(&probs, m) - binary_entropy(&probs) / 4.0;
        assert!((tape.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn ce_guarantee() {
        let mut r = rng::stream(3, &[]);
        for _ in 0..1000 {
            let n = r.gen_range(1..=12);
            let m = random_model(&mut r, n);
            let probs = random_probs(&mut r, n);
            let s = conditional_expectation(&probs, &m);
            assert!(m.energy(&s).unwrap() <= enumerated_expectation(&probs, &m) + 1e-9);
        }
    }

    #[test]
    fn ce_examples() {
        let mut r = rng::stream(4, &[]);
        let m = random_model(&mut r, 9);
        let s = SpinState::from_mask(9, 0b1_0110_1001);
        let probs: Vec<f64> = s.qs().iter().map(|&b| f64::from(u8::from(b))).collect();
        let ce = conditional_expectation(&probs, &m);
        assert_eq!(ce, s);
        assert_eq!(m.energy(&ce).unwrap(), expected_energy(&probs, &m));
        let k2 = encode(ProblemKind::MaxCut, &Graph::path(2), 1.0, 1.1).unwrap();
        let cut = conditional_expectation(&[0.5, 0.5], &k2.model);
        assert_eq!(k2.model.energy(&cut).unwrap(), -1.0);
        assert_eq!(expected_energy(&[0.5, 0.5], &k2.model), -0.5);
    }

    #[test]
    fn mfa_zero_output_is_half() {
        let mut net = MfaNet::new(MfaNetConfig::desk(), 1).unwrap();
        let (w, b) = (net.output_layer().w, net.output_layer().b);
        net.store.value_mut(w).data.iter_mut().for_each(|x| *x = 0.0);
        if let Some(b) = b {
            net.store.value_mut(b).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let inst = encode(ProblemKind::Mis, &gen_gnp(10, 0.3, 1).unwrap(), 1.0, 1.1).unwrap();
        let out = mfa_forward(&net, &inst.model, &random_bits(10, 2)).unwrap();
        assert!(out.probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
        assert!(mfa_forward(&net, &inst.model, &random_bits(9, 2)).is_err());
    }

    #[test]
    fn mfa_is_permutation_equivariant() {
        let net = MfaNet::new(MfaNetConfig::desk(), 2).unwrap();
        let mut r = rng::stream(5, &[]);
        let n = 9;
        let m = random_model(&mut r, n);
        let bits = random_bits(n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let couplings: Vec<_> = m.couplings().iter().map(|&(u, v, j)| (perm[u], perm[v], j)).collect();
        let mut fields = vec![0.0; n];
        let mut pbits = Tensor::zeros(n, RANDOM_BITS);
        for i in 0..n {
            fields[perm[i]] = m.fields()[i];
            pbits.data[perm[i] * RANDOM_BITS..(perm[i] + 1) * RANDOM_BITS].copy_from_slice(bits.row_slice(i));
        }
        let pm = IsingModel::new(n, couplings, fields, m.offset()).unwrap();
        let a = mfa_forward(&net, &m, &bits).unwrap();
        let b = mfa_forward(&net, &pm, &pbits).unwrap();
        for i in 0..n {
            assert!((a.probs[i] - b.probs[perm[i]]).abs() < 1e-9);
        }
    }

    #[test]
    fn mfa_gradients_match_finite_differences() {
        let mut r = rng::stream(6, &[]);
        let m = random_model(&mut r, 6);
        let bits = random_bits(6, 4);
        let mut net = MfaNet::new(MfaNetConfig { encoder: vec![4], mpnn_layers: 1, msg_mlp: vec![4], node_mlp: vec![4], output: vec![4] }, 3).unwrap();
        let probe = net.clone();
        let err = max_relative_error(&mut net.store, 1e-5, |tape| {
            let p = probe.probs(tape, &m, &bits)?;
            egn_loss(tape, p, &m, Some(2.0))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    /// Per-sample REINFORCE terms `(score − b)·∂log p/∂p_i` for a leaf `p`.
    fn per_sample_grads(probs: &[f64], samples: &[Vec<bool>], scores: &[f64], b: f64) -> Vec<Vec<f64>> {
        samples
            .iter()
            .zip(scores)
            .map(|(q, &sc)| {
                probs.iter().zip(q).map(|(&p, &x)| (sc - b) * if x { 1.0 / p } else { -1.0 / (1.0 - p) }).collect()
            })
            .collect()
    }

    fn mean_and_se(rows: &[Vec<f64>], i: usize) -> (f64, f64) {
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r[i]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    fn leaf(probs: &[f64]) -> (ParamStore, crate::nn::ParamId) {
        let mut store = ParamStore::new(0);
        let id = store.add("p", probs.len(), 1, Init::Zeros);
        store.value_mut(id).data.copy_from_slice(probs);
        (store, id)
    }

    #[test]
    fn reinforce_matches_exact_gradient() {
        let m = IsingModel::new(2, [(0, 1, 0.8)], vec![0.5, -0.3], 0.1).unwrap();
        let probs = vec![0.35, 0.6];
        let (store, id) = leaf(&probs);
        // exact ∇_p E_p[E] from the closed form
        let exact = {
            let mut tape = Tape::new(&store);
            let p = tape.param(id);
            let l = egn_loss(&mut tape, p, &m, None).unwrap();
            tape.backward(l).unwrap().get(id).unwrap().data.clone()
        };
        let mut r = rng::stream(7, &[]);
        let samples = sample_q(&probs, 50_000, &mut r);
        let scores: Vec<f64> = samples.iter().map(|q| sample_score(&m, &probs, q, None)).collect();
        let mut tape = Tape::new(&store);
        let p = tape.param(id);
        let loss = reinforce_surrogate(&mut tape, p, &samples, &scores, true).unwrap();
        let est = tape.backward(loss).unwrap().get(id).unwrap().data.clone();
        let b = scores.iter().sum::<f64>() / scores.len() as f64;
        let rows = per_sample_grads(&probs, &samples, &scores, b);
        for i in 0..2 {
            let (mean, se) = mean_and_se(&rows, i);
            assert!((mean - est[i]).abs() < 1e-9);
            assert!((est[i] - exact[i]).abs() < 3.0 * se, "{i}: {} vs {} (se {se})", est[i], exact[i]);
        }
    }

    #[test]
    fn reinforce_constant_landscape_and_baseline() {
        let probs = vec![0.2, 0.7, 0.5];
        let (store, id) = leaf(&probs);
        let mut r = rng::stream(8, &[]);
        let samples = sample_q(&probs, 10_000, &mut r);
        let flat = vec![3.0; samples.len()];
        let grad = |scores: &[f64], baseline: bool| {
            let mut tape = Tape::new(&store);
            let p = tape.param(id);
            let l = reinforce_surrogate(&mut tape, p, &samples, scores, baseline).unwrap();
            tape.backward(l).unwrap().get(id).unwrap().data.clone()
        };
        // without the baseline the estimate is noisy but centred on 0
        let g = grad(&flat, false);
        let rows = per_sample_grads(&probs, &samples, &flat, 0.0);
        for i in 0..3 {
            let (_, se) = mean_and_se(&rows, i);
            assert!(g[i].abs() < 3.0 * se);
        }
        assert!(grad(&flat, true).iter().all(|&x| x == 0.0));
        // the baseline changes the estimate only by a zero-mean term
        let m = IsingModel::new(3, [(0, 1, 1.0), (1, 2, -0.5)], vec![0.2, 0.0, 0.4], 0.0).unwrap();
        let scores: Vec<f64> = samples.iter().map(|q| sample_score(&m, &probs, q, None)).collect();
        let with = grad(&scores, true);
        let without = grad(&scores, false);
        let b = scores.iter().sum::<f64>() / scores.len() as f64;
        let diffs: Vec<Vec<f64>> = per_sample_grads(&probs, &samples, &vec![b; samples.len()], 0.0);
        for i in 0..3 {
            let (mean, se) = mean_and_se(&diffs, i);
            assert!(((without[i] - with[i]) - mean).abs() < 1e-9);
            assert!(mean.abs() < 3.0 * se);
        }
    }

    #[test]
    fn reinforce_training_approaches_boltzmann_expectation() {
        let g = Graph::new(5, [(0, 1), (1, 2), (2, 3), (3, 4), (1, 3)]).unwrap();
        let inst = encode(ProblemKind::Mis, &g, 1.0, 1.1).unwrap();
        let beta = 5.0;
        let table = boltzmann_enumerate(&inst.model, beta).unwrap();
        let boltz: f64 = table.probs.iter().zip(&table.energies).map(|(p, e)| p * e).sum();
        let mut net = MfaNet::new(MfaNetConfig::desk(), 9).unwrap();
        let cfg = MfaTrainConfig {
            epochs: 300,
            batch: 1,
            n_samples: 32,
            lr: 1e-2,
            schedule: Some(AnnealSchedule { t0: 1.0 / beta, n_warmup: 300, ..AnnealSchedule::default() }),
            ..MfaTrainConfig::default()
        };
        train_mfa(&mut net, &cfg, std::slice::from_ref(&inst.model), 1).unwrap();
        let out = mfa_forward(&net, &inst.model, &random_bits(5, 0)).unwrap();
        let got = expected_energy(&out.probs, &inst.model);
        assert!((got - boltz).abs() <= 0.05 * boltz.abs(), "{got} vs {boltz}");
    }

    #[test]
    fn egn_training_and_ce_decode() {
        let g = gen_gnp(10, 0.3, 11).unwrap();
        let inst = encode(ProblemKind::Mvc, &g, 1.0, 1.1).unwrap();
        let mut net = MfaNet::new(MfaNetConfig::desk(), 10).unwrap();
        let cfg = MfaTrainConfig { method: MfaMethod::Egn, epochs: 60, batch: 1, lr: 1e-2, ..MfaTrainConfig::default() };
        let log = train_mfa(&mut net, &cfg, std::slice::from_ref(&inst.model), 2).unwrap();
        assert!(log.last().unwrap().loss < log[0].loss);
        let (s, e) = mfa_ce_decode(&net, &inst, &inst.model, 3).unwrap();
        assert!(inst.is_feasible(&s));
        assert_eq!(mfa_ce_decode(&net, &inst, &inst.model, 3).unwrap().1, e);
        let back = MfaNet::from_checkpoint(&net.checkpoint()).unwrap();
        assert_eq!(mfa_ce_decode(&back, &inst, &inst.model, 3).unwrap().1, e);
    }
}
