//! Autoregressive solution generation.
//!
//! Nodes are visited in BFS order, `k` at a time. Each step the network sees the
//! live graph (nodes not yet generated), predicts a softmax over the `2^k`
//! joint configurations of the current token, and the chosen spins are folded
//! into their live neighbors' fields before the token leaves the graph.
//!
//! Configuration index encoding: bit `j` (LSB first) set means the `j`-th token
//! node in BFS order takes spin `+1`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::graph::{Graph, NodeOrdering};
use crate::ising::{EnergyScale, IsingModel, ProblemInstance, SpinState};
use crate::nn::{Mlp, MessageGraph, MpnnLayer, OutAct, ParamStore, Tape, Tensor, Var};
use crate::rng;

/// Per-node tag columns in the feature vector.
pub const TAG_UP: usize = 0;
pub const TAG_DOWN: usize = 1;
pub const TAG_CURRENT: usize = 2;
pub const TAG_LATER: usize = 3;

/// Readout of the graph-level embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalPool {
    #[default]
    Sum,
    /// Sum divided by the live node count; keeps the readout scale fixed as the
    /// graph shrinks during generation.
    Mean,
}

/// Architecture of [`PolicyValueNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub token_k: usize,
    pub encoder: Vec<usize>,
    pub mpnn_layers: usize,
    pub msg_mlp: Vec<usize>,
    pub node_mlp: Vec<usize>,
    /// Skip connections in message passing; `None` enables them when `mpnn_layers > 3`.
    pub skip: Option<bool>,
    /// Hidden widths of the policy head; the `2^k` output layer is appended.
    pub policy_head: Vec<usize>,
    /// Hidden widths of the value head; the scalar output layer is appended.
    pub value_head: Vec<usize>,
    pub global_pool: GlobalPool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            token_k: 1,
            encoder: vec![40, 40],
            mpnn_layers: 3,
            msg_mlp: vec![64, 64],
            node_mlp: vec![64, 64],
            skip: None,
            policy_head: vec![120, 120],
            value_head: vec![120, 120],
            global_pool: GlobalPool::Sum,
        }
    }
}

impl NetConfig {
    /// Reduced widths for single-core runs, with mean pooling (sum pooling failed
    /// to move off the all-in-cover policy at this width).
    pub fn desk(token_k: usize) -> Self {
        NetConfig {
            token_k,
            encoder: vec![16, 16],
            mpnn_layers: 1,
            msg_mlp: vec![16, 16],
            node_mlp: vec![16, 16],
            skip: None,
            policy_head: vec![32, 32],
            value_head: vec![32, 32],
            global_pool: GlobalPool::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.token_k) {
            return input(format!("token_k must be in 1..=8, got {}", self.token_k));
        }
        let lists = [&self.encoder, &self.msg_mlp, &self.node_mlp];
        if lists.iter().any(|l| l.is_empty() || l.contains(&0)) || self.policy_head.contains(&0) || self.value_head.contains(&0) {
            return input("layer sizes must be >= 1 and encoder / message / node MLPs nonempty");
        }
        Ok(())
    }

    pub fn n_configs(&self) -> usize {
        1 << self.token_k
    }

    pub fn feature_dim(&self) -> usize {
        1 + 4 + self.token_k
    }
}

/// Snapshot of the live graph before one token step, in local ids: live node `i`
/// is the `i`-th remaining node in BFS order, so the token occupies rows `0..k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub fields: Vec<f64>,
    pub edges: Vec<(usize, usize, f64)>,
    pub token_k: usize,
}

impl Observation {
    pub fn n_live(&self) -> usize {
        self.fields.len()
    }

    /// Node features `[B_i, tag one-hot (4), token position one-hot (k)]`.
    pub fn features(&self) -> Tensor {
        let k = self.token_k;
        let w = 5 + k;
        let mut t = Tensor::zeros(self.n_live(), w);
        for (i, &b) in self.fields.iter().enumerate() {
            t.data[i * w] = b;
            if i < k {
                t.data[i * w + 1 + TAG_CURRENT] = 1.0;
                t.data[i * w + 5 + i] = 1.0;
            } else {
                t.data[i * w + 1 + TAG_LATER] = 1.0;
            }
        }
        t
    }
}

/// Encoder → message passing → sum pooling, with a softmax policy head over
/// token configurations and a scalar value head.
#[derive(Clone, Debug)]
pub struct PolicyValueNet {
    pub config: NetConfig,
    pub store: ParamStore,
    encoder: Mlp,
    layers: Vec<MpnnLayer>,
    policy: Mlp,
    value: Mlp,
}

/// Batched network outputs: `log_probs` is `B × 2^k`, `values` is `B × 1`.
pub struct NetOutput {
    pub log_probs: Var,
    pub values: Var,
}

impl PolicyValueNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let encoder = Mlp::new(&mut store, "enc", config.feature_dim(), &config.encoder, OutAct::Relu);
        let skip = config.skip.unwrap_or(config.mpnn_layers > 3);
        let mut d = encoder.out_dim();
        let mut layers = Vec::new();
        for l in 0..config.mpnn_layers {
            let layer = MpnnLayer::new(&mut store, &format!("mp{l}"), d, &config.msg_mlp, &config.node_mlp, skip);
            d = layer.out_dim();
            layers.push(layer);
        }
        let head_in = (config.token_k + 1) * d;
        let mut ps = config.policy_head.clone();
        ps.push(config.n_configs());
        let policy = Mlp::new(&mut store, "pi", head_in, &ps, OutAct::Linear);
        let mut vs = config.value_head.clone();
        vs.push(1);
        let value = Mlp::new(&mut store, "v", head_in, &vs, OutAct::Linear);
        Ok(PolicyValueNet { config, store, encoder, layers, policy, value })
    }

    pub fn policy_output_layer(&self) -> (crate::nn::ParamId, Option<crate::nn::ParamId>) {
        let l = self.policy.output_layer();
        (l.w, l.b)
    }

    /// Run the network on a batch of observations.
    pub fn forward(&self, tape: &mut Tape, obs: &[&Observation]) -> Result<NetOutput> {
        let k = self.config.token_k;
        if obs.is_empty() {
            return input("empty observation batch");
        }
        let total: usize = obs.iter().map(|o| o.n_live()).sum();
        let fd = self.config.feature_dim();
        let mut feats = Tensor::zeros(total, fd);
        let mut mg = MessageGraph::new(total);
        let mut graph_of = Vec::with_capacity(total);
        let mut token_rows = Vec::with_capacity(obs.len() * k);
        let mut off = 0;
        for (b, o) in obs.iter().enumerate() {
            if o.token_k != k || o.n_live() < k {
                return Err(Error::State(format!("observation with {} live nodes for token size {k}", o.n_live())));
            }
            let f = o.features();
            feats.data[off * fd..(off + o.n_live()) * fd].copy_from_slice(&f.data);
            for &(u, v, j) in &o.edges {
                mg.add_edge(off + u, off + v, j);
            }
            graph_of.extend(std::iter::repeat(b).take(o.n_live()));
            token_rows.extend(off..off + k);
            off += o.n_live();
        }
        let x = tape.constant(feats);
        let mut h = self.encoder.forward(tape, x)?;
        for layer in &self.layers {
            h = layer.forward(tape, h, &mg)?;
        }
        let d = tape.value(h).cols;
        let mut global = tape.scatter_add_rows(h, graph_of, obs.len());
        if self.config.global_pool == GlobalPool::Mean {
            let mut w = Tensor::zeros(obs.len(), d);
            for (b, o) in obs.iter().enumerate() {
                w.data[b * d..(b + 1) * d].fill(1.0 / o.n_live() as f64);
            }
            let w = tape.constant(w);
            global = tape.mul(global, w);
        }
        let tok = tape.gather_rows(h, token_rows);
        let tok = tape.reshape(tok, obs.len(), k * d);
        let z = tape.concat_cols(&[tok, global]);
        let logits = self.policy.forward(tape, z)?;
        let log_probs = tape.log_softmax_rows(logits);
        let values = self.value.forward(tape, z)?;
        Ok(NetOutput { log_probs, values })
    }

    /// Token distribution and value estimate for one observation.
    pub fn token_step(&self, obs: &Observation) -> Result<(TokenDistribution, f64)> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, &[obs])?;
        let log_probs = tape.value(out.log_probs).data.clone();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Ok((TokenDistribution { probs, log_probs }, tape.value(out.values).data[0]))
    }

    pub fn checkpoint(&self) -> crate::nn::Checkpoint {
        self.store.to_checkpoint(serde_json::to_value(&self.config).expect("config serializes"))
    }

    pub fn from_checkpoint(ckpt: &crate::nn::Checkpoint) -> Result<Self> {
        let config: NetConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut net = PolicyValueNet::new(config, ckpt.init_seed)?;
        net.store.load(ckpt)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl TokenDistribution {
    /// Argmax with ties to the lowest configuration index.
    pub fn greedy(&self) -> usize {
        argmax(&self.log_probs)
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> usize {
        sample_index(&self.log_probs, rng)
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn sample_index(log_probs: &[f64], rng: &mut rng::Rng) -> usize {
    pick_config(log_probs, rng.gen())
}

/// Inverse-CDF draw for a uniform `u ∈ [0, 1)`.
pub(crate) fn pick_config(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &l) in log_probs.iter().enumerate() {
        let p = l.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Append isolated zero-field spins until the spin count is a multiple of `k`.
pub fn pad_instance(instance: &ProblemInstance, k: usize) -> Result<ProblemInstance> {
    if k == 0 {
        return input("token size must be >= 1");
    }
    let extra = (k - instance.n() % k) % k;
    let n = instance.n() + extra;
    Ok(ProblemInstance {
        kind: instance.kind,
        graph: Graph::new(n, instance.graph.edges().iter().copied())?,
        original: instance.original.clone(),
        penalty_a: instance.penalty_a,
        penalty_b: instance.penalty_b,
        model: instance.model.padded(extra),
    })
}

/// BFS ordering of the instance graph from a seeded uniform start, with any
/// padding ids appended last.
pub fn sample_ordering(graph: &Graph, padded_n: usize, seed: u64) -> Result<NodeOrdering> {
    if graph.n() == 0 {
        return Ok(NodeOrdering::identity(padded_n));
    }
    let start = rng::stream(seed, &[0x57A]).gen_range(0..graph.n());
    Ok(graph.bfs_order(start, seed)?.extended(padded_n))
}

/// A problem ready for generation: the original instance for reporting, and the
/// standardized, padded model the network sees.
#[derive(Clone, Debug)]
pub struct PreparedProblem {
    pub instance: ProblemInstance,
    pub net_model: IsingModel,
    pub token_k: usize,
}

impl PreparedProblem {
    pub fn new(instance: ProblemInstance, scale: EnergyScale, token_k: usize) -> Result<Self> {
        let padded = pad_instance(&instance, token_k)?;
        let net_model = scale.apply(&padded.model);
        Ok(PreparedProblem { instance, net_model, token_k })
    }

    pub fn n(&self) -> usize {
        self.instance.n()
    }

    pub fn padded_n(&self) -> usize {
        self.net_model.n()
    }

    pub fn n_steps(&self) -> usize {
        self.padded_n() / self.token_k
    }

    pub fn ordering(&self, seed: u64) -> Result<NodeOrdering> {
        sample_ordering(&self.instance.graph, self.padded_n(), seed)
    }

    /// Strip padding, repair, and return the state with its original-scale energy.
    pub fn finish(&self, padded: &SpinState) -> Result<(SpinState, f64)> {
        let s = self.instance.repair(&padded.truncated(self.n()));
        let e = self.instance.energy(&s)?;
        Ok((s, e))
    }
}

/// Mutable generation state: live fields, BFS ordering and token cursor.
#[derive(Clone, Debug)]
pub struct GenerationState<'a> {
    model: &'a IsingModel,
    ordering: NodeOrdering,
    k: usize,
    cursor: usize,
    live_fields: Vec<f64>,
    assigned: Vec<i8>,
}

impl<'a> GenerationState<'a> {
    pub fn new(model: &'a IsingModel, ordering: NodeOrdering, k: usize) -> Result<Self> {
        if k == 0 || model.n() % k != 0 {
            return input(format!("{} spins are not a multiple of token size {k}", model.n()));
        }
        if ordering.len() != model.n() {
            return input("ordering length differs from spin count");
        }
        Ok(GenerationState {
            model,
            ordering,
            k,
            cursor: 0,
            live_fields: model.fields().to_vec(),
            assigned: vec![0; model.n()],
        })
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.model.n()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn ordering(&self) -> &NodeOrdering {
        &self.ordering
    }

    pub fn live_field(&self, v: usize) -> f64 {
        self.live_fields[v]
    }

    pub fn assigned(&self) -> &[i8] {
        &self.assigned
    }

    /// Nodes of the current token, in BFS order.
    pub fn token(&self) -> &[usize] {
        &self.ordering.order()[self.cursor..(self.cursor + self.k).min(self.model.n())]
    }

    pub fn observation(&self) -> Result<Observation> {
        if self.is_done() {
            return Err(Error::State("generation already finished".into()));
        }
        let order = &self.ordering.order()[self.cursor..];
        let rank = self.ordering.rank();
        let fields = order.iter().map(|&v| self.live_fields[v]).collect();
        let mut edges = Vec::new();
        for (i, &v) in order.iter().enumerate() {
            for &(u, j) in self.model.neighbors(v) {
                if rank[u] > rank[v] {
                    edges.push((i, rank[u] - self.cursor, j));
                }
            }
        }
        Ok(Observation { fields, edges, token_k: self.k })
    }

    /// Assign the current token and prune it. Returns the token's energy increment.
    pub fn apply_token(&mut self, config: usize) -> Result<f64> {
        if self.is_done() {
            return Err(Error::State("generation already finished".into()));
        }
        if config >> self.k != 0 {
            return input(format!("configuration {config} out of range for token size {}", self.k));
        }
        let rank = self.ordering.rank();
        let mut de = 0.0;
        for j in 0..self.k {
            let v = self.ordering.order()[self.cursor + j];
            let s: i8 = if config >> j & 1 == 1 { 1 } else { -1 };
            let sf = f64::from(s);
            de += sf * self.live_fields[v];
            self.assigned[v] = s;
            for &(u, jv) in self.model.neighbors(v) {
                if rank[u] > rank[v] {
                    self.live_fields[u] += jv * sf;
                }
            }
        }
        self.cursor += self.k;
        Ok(de)
    }

    pub fn spins(&self) -> Result<SpinState> {
        if !self.is_done() {
            return Err(Error::State("generation not finished".into()));
        }
        SpinState::new(self.assigned.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// One ordering, `n_samples` sampled trajectories.
    S,
    /// `n_orderings` orderings sharing `n_samples` sampled trajectories.
    Os,
    /// `n_orderings` orderings, one greedy trajectory each.
    Og,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(SamplingMode::S),
            "os" => Ok(SamplingMode::Os),
            "og" => Ok(SamplingMode::Og),
            other => input(format!("unknown sampling mode {other:?}")),
        }
    }
}

/// One generated solution.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub ordering_seed: u64,
    pub configs: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub delta_e: Vec<f64>,
    /// Raw padded spins before repair.
    pub raw: SpinState,
    /// Repaired solution over the real nodes.
    pub state: SpinState,
    /// Energy of `state` under the original instance.
    pub energy: f64,
    /// Network evaluations spent on this trajectory.
    pub forward_passes: usize,
}

/// Trajectories are evaluated in chunks of this many states per forward pass.
pub const BATCH_CHUNK: usize = 32;

/// Decode `n_samples` solutions (`n_orderings` for greedy decoding).
pub fn generate(
    problem: &PreparedProblem,
    net: &PolicyValueNet,
    mode: SamplingMode,
    n_samples: usize,
    n_orderings: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if net.config.token_k != problem.token_k {
        return input("network and problem disagree on token size");
    }
    let (count, n_ord, greedy) = match mode {
        SamplingMode::S => (n_samples, 1, false),
        SamplingMode::Os => (n_samples, n_orderings.max(1), false),
        SamplingMode::Og => (n_orderings.max(1), n_orderings.max(1), true),
    };
    let ord_seeds: Vec<u64> = (0..n_ord as u64).map(|o| rng::derive(seed, &[0x0D, o])).collect();
    let orderings = ord_seeds.iter().map(|&s| problem.ordering(s)).collect::<Result<Vec<_>>>()?;
    // sample i uses ordering ⌊i·n_O/count⌋
    let which: Vec<usize> = (0..count).map(|i| i * n_ord / count.max(1)).collect();
    let mut states = which
        .iter()
        .map(|&o| GenerationState::new(&problem.net_model, orderings[o].clone(), problem.token_k))
        .collect::<Result<Vec<_>>>()?;
    let mut rngs: Vec<rng::Rng> = (0..count as u64).map(|i| rng::stream(seed, &[0x5A, i])).collect();
    let mut configs = vec![Vec::new(); count];
    let mut log_probs = vec![Vec::new(); count];
    let mut delta_e = vec![Vec::new(); count];
    for _ in 0..problem.n_steps() {
        let obs = states.iter().map(|s| s.observation()).collect::<Result<Vec<_>>>()?;
        let dists = batched_log_probs(net, &obs)?;
        for i in 0..count {
            let c = if greedy { argmax(&dists[i]) } else { sample_index(&dists[i], &mut rngs[i]) };
            delta_e[i].push(states[i].apply_token(c)?);
            log_probs[i].push(dists[i][c]);
            configs[i].push(c);
        }
    }
    let mut out = Vec::with_capacity(count);
    for (i, st) in states.iter().enumerate() {
        let raw = st.spins()?;
        let (state, energy) = problem.finish(&raw)?;
        out.push(Trajectory {
            ordering_seed: ord_seeds[which[i]],
            configs: std::mem::take(&mut configs[i]),
            log_probs: std::mem::take(&mut log_probs[i]),
            delta_e: std::mem::take(&mut delta_e[i]),
            raw,
            state,
            energy,
            forward_passes: problem.n_steps(),
        });
    }
    Ok(out)
}

/// Log-probabilities for each observation, evaluated in fixed-size chunks so the
/// result does not depend on the thread count.
pub fn batched_log_probs(net: &PolicyValueNet, obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
    Ok(batched_outputs(net, obs)?.into_iter().map(|(lp, _)| lp).collect())
}

/// `(log_probs, value)` per observation.
pub fn batched_outputs(net: &PolicyValueNet, obs: &[Observation]) -> Result<Vec<(Vec<f64>, f64)>> {
    let chunks: Vec<Result<Vec<(Vec<f64>, f64)>>> = obs
        .par_chunks(BATCH_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new(&net.store);
            let refs: Vec<&Observation> = chunk.iter().collect();
            let out = net.forward(&mut tape, &refs)?;
            let lp = tape.value(out.log_probs);
            let v = tape.value(out.values);
            Ok((0..chunk.len()).map(|b| (lp.row_slice(b).to_vec(), v.data[b])).collect())
        })
        .collect();
    let mut all = Vec::with_capacity(obs.len());
    for c in chunks {
        all.extend(c?);
    }
    Ok(all)
}

/// Log-probability of each step of a fixed trajectory under `net`.
pub fn rescore(problem: &PreparedProblem, net: &PolicyValueNet, ordering_seed: u64, configs: &[usize]) -> Result<Vec<f64>> {
    let mut st = GenerationState::new(&problem.net_model, problem.ordering(ordering_seed)?, problem.token_k)?;
    let mut out = Vec::with_capacity(configs.len());
    for &c in configs {
        let (dist, _) = net.token_step(&st.observation()?)?;
        out.push(dist.log_probs[c]);
        st.apply_token(c)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ising::{delta_energy, encode, ProblemKind};

    fn random_instance(seed: u64, n: usize, kind: ProblemKind) -> ProblemInstance {
        let g = crate::instance_gen::gen_gnp(n, 0.4, seed).unwrap();
        encode(kind, &g, 1.0, 1.1).unwrap()
    }

    fn zero_policy_head(net: &mut PolicyValueNet) {
        let (w, b) = net.policy_output_layer();
        net.store.value_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
        if let Some(b) = b {
            net.store.value_mut(b).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn padding() {
        let inst = random_instance(1, 10, ProblemKind::Mis);
        assert_eq!(pad_instance(&inst, 5).unwrap().n(), 10);
        assert_eq!(pad_instance(&inst, 1).unwrap().n(), 10);
        let inst = random_instance(2, 7, ProblemKind::MaxCut);
        let p = pad_instance(&inst, 5).unwrap();
        assert_eq!(p.n(), 10);
        let mut r = rng::stream(3, &[]);
        for _ in 0..50 {
            let m: u64 = r.gen();
            let s = SpinState::from_mask(10, m);
            assert_eq!(p.energy(&s).unwrap(), inst.energy(&s.truncated(7)).unwrap());
        }
    }

    #[test]
    fn apply_token_updates_live_fields() {
        let m = IsingModel::new(3, [(0, 1, 1.0)], vec![0.2, -0.3, 0.5], 0.0).unwrap();
        let mut st = GenerationState::new(&m, NodeOrdering::identity(3), 1).unwrap();
        let de = st.apply_token(1).unwrap();
        assert_eq!(de, 0.2);
        assert_eq!(st.live_field(1), -0.3 + 1.0);
        assert_eq!(st.live_field(2), 0.5);
        let obs = st.observation().unwrap();
        assert_eq!(obs.fields, vec![0.7, 0.5]);
        assert!(obs.edges.is_empty());
        // isolated token leaves others unchanged
        st.apply_token(0).unwrap();
        let before = st.live_field(1);
        assert_eq!(before, 0.7);
        st.apply_token(0).unwrap();
        assert!(st.is_done());
        assert!(st.observation().is_err());
        assert!(st.apply_token(0).is_err());
    }

    #[test]
    fn pruned_increments_match_full_model() {
        let mut r = rng::stream(4, &[]);
        for t in 0..200 {
            let n = r.gen_range(1..=12);
            let k = r.gen_range(1..=4);
            let kind = ProblemKind::ALL[t % 4];
            let inst = random_instance(t as u64, n, kind);
            let prep = PreparedProblem::new(inst, EnergyScale { mean: 0.3, std: 1.7 }, k).unwrap();
            let ord = prep.ordering(t as u64).unwrap();
            let mut st = GenerationState::new(&prep.net_model, ord.clone(), k).unwrap();
            let mut total = 0.0;
            while !st.is_done() {
                let cursor = st.cursor();
                let c = r.gen_range(0..1usize << k);
                let de = st.apply_token(c).unwrap();
                let want: f64 =
                    (cursor..cursor + k).map(|p| delta_energy(&prep.net_model, st.assigned(), &ord, p).unwrap()).sum();
                assert!((de - want).abs() < 1e-9);
                total += de;
            }
            let s = st.spins().unwrap();
            let e = prep.net_model.energy(&s).unwrap() - prep.net_model.offset();
            assert!((total - e).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        for k in [1, 3] {
            let mut net = PolicyValueNet::new(NetConfig::desk(k), 5).unwrap();
            zero_policy_head(&mut net);
            let inst = random_instance(5, 7, ProblemKind::Mvc);
            let prep = PreparedProblem::new(inst, EnergyScale::IDENTITY, k).unwrap();
            let st = GenerationState::new(&prep.net_model, prep.ordering(0).unwrap(), k).unwrap();
            let (d, _) = net.token_step(&st.observation().unwrap()).unwrap();
            assert_eq!(d.probs.len(), 1 << k);
            let u = 1.0 / (1 << k) as f64;
            assert!(d.probs.iter().all(|p| (p - u).abs() < 1e-12));
        }
    }

    #[test]
    fn distribution_ignores_relabeling_of_later_nodes() {
        let net = PolicyValueNet::new(NetConfig::desk(2), 6).unwrap();
        let obs = Observation {
            fields: vec![0.1, -0.4, 0.3, 0.9, -0.2],
            edges: vec![(0, 2, 0.5), (1, 3, -0.7), (2, 4, 0.25), (0, 1, 0.1)],
            token_k: 2,
        };
        // relabel only nodes outside the token
        let perm = [0, 1, 4, 2, 3];
        let mut fields = vec![0.0; 5];
        for i in 0..5 {
            fields[perm[i]] = obs.fields[i];
        }
        let edges = obs.edges.iter().map(|&(u, v, j)| (perm[u], perm[v], j)).collect();
        let permuted = Observation { fields, edges, token_k: 2 };
        let (a, va) = net.token_step(&obs).unwrap();
        let (b, vb) = net.token_step(&permuted).unwrap();
        assert!(a.probs.iter().zip(&b.probs).all(|(x, y)| (x - y).abs() < 1e-9));
        assert!((va - vb).abs() < 1e-9);
        let s: f64 = a.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn greedy_generation_is_deterministic_and_feasible() {
        let net = PolicyValueNet::new(NetConfig::desk(2), 7).unwrap();
        let inst = random_instance(7, 11, ProblemKind::Mis);
        let prep = PreparedProblem::new(inst, EnergyScale::IDENTITY, 2).unwrap();
        let a = generate(&prep, &net, SamplingMode::Og, 0, 3, 9).unwrap();
        let b = generate(&prep, &net, SamplingMode::Og, 0, 3, 9).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.state, y.state);
            assert_eq!(x.configs, y.configs);
            assert!(prep.instance.is_feasible(&x.state));
            assert_eq!(x.forward_passes, 6);
        }
        assert!(generate(&prep, &PolicyValueNet::new(NetConfig::desk(1), 1).unwrap(), SamplingMode::S, 2, 1, 0).is_err());
    }

    #[test]
    fn stored_log_probs_match_rescoring() {
        let net = PolicyValueNet::new(NetConfig::desk(3), 8).unwrap();
        for kind in ProblemKind::ALL {
            let inst = random_instance(8, 10, kind);
            let prep = PreparedProblem::new(inst, EnergyScale::IDENTITY, 3).unwrap();
            for t in generate(&prep, &net, SamplingMode::Os, 6, 3, 1).unwrap() {
                let again = rescore(&prep, &net, t.ordering_seed, &t.configs).unwrap();
                for (a, b) in t.log_probs.iter().zip(&again) {
                    assert!((a - b).abs() < 1e-9);
                }
                assert!(prep.instance.is_feasible(&t.state));
                let total: f64 = t.delta_e.iter().sum();
                let e = prep.net_model.energy(&t.raw).unwrap() - prep.net_model.offset();
                assert!((total - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampling_modes_assign_orderings() {
        let net = PolicyValueNet::new(NetConfig::desk(1), 9).unwrap();
        let inst = random_instance(9, 8, ProblemKind::Mvc);
        let prep = PreparedProblem::new(inst, EnergyScale::IDENTITY, 1).unwrap();
        let s = generate(&prep, &net, SamplingMode::S, 6, 4, 3).unwrap();
        assert!(s.iter().all(|t| t.ordering_seed == s[0].ordering_seed));
        let os = generate(&prep, &net, SamplingMode::Os, 6, 3, 3).unwrap();
        let seeds: Vec<u64> = os.iter().map(|t| t.ordering_seed).collect();
        assert_eq!(seeds[0], seeds[1]);
        assert_ne!(seeds[1], seeds[2]);
        assert_eq!(seeds[2], seeds[3]);
        assert_ne!(seeds[3], seeds[4]);
    }

    #[test]
    fn uniform_net_samples_uniformly() {
        let mut net = PolicyValueNet::new(NetConfig::desk(1), 10).unwrap();
        zero_policy_head(&mut net);
        let inst = encode(ProblemKind::MaxCut, &Graph::path(3), 0.0, 0.0).unwrap();
        let prep = PreparedProblem::new(inst, EnergyScale::IDENTITY, 1).unwrap();
        let n = 20_000;
        let ts = generate(&prep, &net, SamplingMode::S, n, 1, 11).unwrap();
        let mut counts = [0usize; 8];
        for t in &ts {
            counts[t.raw.to_mask() as usize] += 1;
        }
        let expect = n as f64 / 8.0;
        let sd = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() <= 3.0 * sd + 1e-9, "{counts:?}");
        }
    }

    #[test]
    fn checkpoint_restores_network() {
        let net = PolicyValueNet::new(NetConfig::desk(2), 12).unwrap();
        let back = PolicyValueNet::from_checkpoint(&net.checkpoint()).unwrap();
        let obs = Observation { fields: vec![0.5, -0.5, 0.1], edges: vec![(0, 2, 1.0)], token_k: 2 };
        assert_eq!(net.token_step(&obs).unwrap(), back.token_step(&obs).unwrap());
    }
}
