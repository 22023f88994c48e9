use serde::{Deserialize, Serialize};

use super::params::{Init, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{input, Result};

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let w = store.add(&format!("{name}.w"), in_dim, out_dim, Init::Glorot);
        let b = bias.then(|| store.add(&format!("{name}.b"), 1, out_dim, Init::Zeros));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => y,
        }
    }
}

/// Learned scale and shift for per-row layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), 1, dim, Init::Ones),
            beta: store.add(&format!("{name}.beta"), 1, dim, Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm_rows(x, g, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutAct {
    Relu,
    Linear,
}

/// Hidden layers are affine → layer norm → ReLU; the output layer is affine
/// followed by `out_act` and never normalized.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Vec<(Linear, LayerNorm)>,
    out: Linear,
    out_act: OutAct,
}

impl Mlp {
    /// `sizes` lists every layer width including the output layer.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, sizes: &[usize], out_act: OutAct) -> Self {
        assert!(!sizes.is_empty() && sizes.iter().all(|&s| s >= 1), "MLP layer sizes must be >= 1");
        let mut hidden = Vec::new();
        let mut d = in_dim;
        for (i, &s) in sizes[..sizes.len() - 1].iter().enumerate() {
            hidden.push((Linear::new(store, &format!("{name}.{i}"), d, s, true), LayerNorm::new(store, &format!("{name}.{i}.ln"), s)));
            d = s;
        }
        let out = Linear::new(store, &format!("{name}.{}", sizes.len() - 1), d, sizes[sizes.len() - 1], true);
        Mlp { hidden, out, out_act }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.first().map_or(self.out.in_dim, |(l, _)| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.value(x).cols;
        if w != self.in_dim() {
            return input(format!("MLP expects width {}, got {w}", self.in_dim()));
        }
        let mut h = x;
        for (lin, ln) in &self.hidden {
            let a = lin.forward(tape, h);
            let n = ln.forward(tape, a);
            h = tape.relu(n);
        }
        let y = self.out.forward(tape, h);
        Ok(match self.out_act {
            OutAct::Relu => tape.relu(y),
            OutAct::Linear => y,
        })
    }
}

/// Directed message lists of a (batched) graph. Each undirected edge appears in
/// both directions; `edge_feats` has one row per directed edge.
#[derive(Clone, Debug, Default)]
pub struct MessageGraph {
    pub n_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_feats: Vec<f64>,
}

impl MessageGraph {
    pub fn new(n_nodes: usize) -> Self {
        MessageGraph { n_nodes, ..Default::default() }
    }

    /// Add `{u, v}` in both directions with a scalar feature.
    pub fn add_edge(&mut self, u: usize, v: usize, feat: f64) {
        self.src.extend([u, v]);
        self.dst.extend([v, u]);
        self.edge_feats.extend([feat, feat]);
    }

    pub fn num_directed(&self) -> usize {
        self.src.len()
    }
}

/// One message-passing layer:
/// `m_i = Σ_{j∈N(i)} Φ([h_j, h_i, e_ij])`, `h_i' = LN(Ψ([h_i, m_i]) + W_skip h_i)`.
#[derive(Clone, Debug)]
pub struct MpnnLayer {
    phi: Mlp,
    psi: Mlp,
    skip: Option<Linear>,
    norm: LayerNorm,
    in_dim: usize,
}

impl MpnnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        msg_sizes: &[usize],
        node_sizes: &[usize],
        skip: bool,
    ) -> Self {
        let phi = Mlp::new(store, &format!("{name}.phi"), 2 * in_dim + 1, msg_sizes, OutAct::Relu);
        let psi = Mlp::new(store, &format!("{name}.psi"), in_dim + phi.out_dim(), node_sizes, OutAct::Relu);
        let out = psi.out_dim();
        let skip = skip.then(|| Linear::new(store, &format!("{name}.skip"), in_dim, out, false));
        let norm = LayerNorm::new(store, &format!("{name}.ln"), out);
        MpnnLayer { phi, psi, skip, norm, in_dim }
    }

    pub fn out_dim(&self) -> usize {
        self.psi.out_dim()
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, g: &MessageGraph) -> Result<Var> {
        let t = tape.value(h);
        if t.cols != self.in_dim || t.rows != g.n_nodes {
            return input(format!(
                "MPNN layer expects {}x{}, got {:?}",
                g.n_nodes,
                self.in_dim,
                t.shape()
            ));
        }
        let hs = tape.gather_rows(h, g.src.clone());
        let hd = tape.gather_rows(h, g.dst.clone());
        let e = tape.constant(Tensor::column(g.edge_feats.clone()));
        let cat = tape.concat_cols(&[hs, hd, e]);
        let msg = self.phi.forward(tape, cat)?;
        let agg = tape.scatter_add_rows(msg, g.dst.clone(), g.n_nodes);
        let upd_in = tape.concat_cols(&[h, agg]);
        let mut upd = self.psi.forward(tape, upd_in)?;
        if let Some(skip) = &self.skip {
            let s = skip.forward(tape, h);
            upd = tape.add(upd, s);
        }
        Ok(self.norm.forward(tape, upd))
    }
}
