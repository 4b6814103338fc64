//! On-node GRU encoder-decoder.
//!
//! The encoder folds an `m`-step window into a hidden state. The decoder
//! starts from the concatenation of that state with the server-provided
//! graph embedding and rolls out `n` predictions, feeding each projected
//! output back in as the next input.
//!
//! GRU gates use the reset/update/candidate form
//!
//! ```text
//! r  = sigmoid(x Wir + bir + h Whr + bhr)
//! z  = sigmoid(x Wiz + biz + h Whz + bhz)
//! n  = tanh(x Win + bin + r * (h Whn + bhn))
//! h' = (1 - z) * n + z * h
//! ```
//!
//! with the three gates packed side by side in each weight matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{uniform, Graph, ParamSet, Tensor, Var};

/// Widths of a node model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalDims {
    /// Feature dimension `D` of each frame.
    pub input_dim: usize,
    /// Encoder hidden width.
    pub enc_hidden: usize,
    /// Width of the graph embedding appended to the decoder state.
    pub graph_hidden: usize,
    /// Number of predicted steps `n`.
    pub horizon: usize,
}

impl Default for TemporalDims {
    fn default() -> Self {
        Self {
            input_dim: 1,
            enc_hidden: 64,
            graph_hidden: 64,
            horizon: 12,
        }
    }
}

impl TemporalDims {
    pub fn dec_hidden(&self) -> usize {
        self.enc_hidden + self.graph_hidden
    }
}

const ENC: usize = 0;
const DEC: usize = 4;
const PROJ_W: usize = 8;
const PROJ_B: usize = 9;

/// Parameter handles for one GRU cell on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    pub hidden: usize,
}

/// Parameter handles for a whole node model on a graph.
#[derive(Clone, Debug)]
pub struct NodeVars {
    pub all: Vec<Var>,
    pub encoder: GruVars,
    pub decoder: GruVars,
    pub proj_w: Var,
    pub proj_b: Var,
}

/// Encoder, decoder and output projection of one node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeModel {
    pub dims: TemporalDims,
    pub params: ParamSet,
}

fn push_gru<R: Rng + ?Sized>(p: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
    let k = 1.0 / (hidden as f64).sqrt();
    p.push(format!("{prefix}.w_ih"), uniform(&[input, 3 * hidden], k, rng));
    p.push(format!("{prefix}.w_hh"), uniform(&[hidden, 3 * hidden], k, rng));
    p.push(format!("{prefix}.b_ih"), uniform(&[3 * hidden], k, rng));
    p.push(format!("{prefix}.b_hh"), uniform(&[3 * hidden], k, rng));
}

impl NodeModel {
    pub fn init<R: Rng + ?Sized>(dims: TemporalDims, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        push_gru(&mut params, "encoder", dims.input_dim, dims.enc_hidden, rng);
        push_gru(&mut params, "decoder", dims.input_dim, dims.dec_hidden(), rng);
        let k = 1.0 / (dims.dec_hidden() as f64).sqrt();
        params.push("proj.w", uniform(&[dims.dec_hidden(), dims.input_dim], k, rng));
        params.push("proj.b", uniform(&[dims.input_dim], k, rng));
        Self { dims, params }
    }

    /// Rebuilds a model from a parameter set, checking its layout.
    pub fn from_params(dims: TemporalDims, params: ParamSet) -> Result<Self> {
        let expected = Self::zeros(dims);
        if !expected.params.same_layout(&params) {
            return Err(Error::Contract(
                "parameter layout does not match node model dims".into(),
            ));
        }
        Ok(Self { dims, params })
    }

    pub fn zeros(dims: TemporalDims) -> Self {
        let mut m = Self::init(dims, &mut rand::rngs::mock::StepRng::new(0, 0));
        for t in m.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        m
    }

    /// Sum of component sizes, computed from the dims alone.
    pub fn expected_param_count(dims: &TemporalDims) -> usize {
        let gru = |i: usize, h: usize| 3 * h * (i + h) + 6 * h;
        gru(dims.input_dim, dims.enc_hidden)
            + gru(dims.input_dim, dims.dec_hidden())
            + dims.dec_hidden() * dims.input_dim
            + dims.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn vars_from(&self, all: Vec<Var>) -> NodeVars {
        let gru = |base: usize, hidden: usize| GruVars {
            w_ih: all[base],
            w_hh: all[base + 1],
            b_ih: all[base + 2],
            b_hh: all[base + 3],
            hidden,
        };
        NodeVars {
            encoder: gru(ENC, self.dims.enc_hidden),
            decoder: gru(DEC, self.dims.dec_hidden()),
            proj_w: all[PROJ_W],
            proj_b: all[PROJ_B],
            all,
        }
    }

    /// Records the parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> NodeVars {
        let all = self.params.bind(g);
        self.vars_from(all)
    }

    /// Records the parameters as constants.
    pub fn bind_frozen(&self, g: &mut Graph) -> NodeVars {
        let all = self.params.bind_frozen(g);
        self.vars_from(all)
    }
}

/// One GRU step. `x: B x I`, `h: B x H`.
pub fn gru_cell(g: &mut Graph, cell: &GruVars, x: Var, h: Var) -> Result<Var> {
    let hd = cell.hidden;
    if g.value(h).cols() != hd {
        return Err(Error::dim("gru hidden", g.value(h).shape(), &[hd]));
    }
    let xi = g.matmul(x, cell.w_ih)?;
    let gi = g.add(xi, cell.b_ih)?;
    let hh = g.matmul(h, cell.w_hh)?;
    let gh = g.add(hh, cell.b_hh)?;

    let gi_r = g.slice(gi, 0, hd)?;
    let gh_r = g.slice(gh, 0, hd)?;
    let r_pre = g.add(gi_r, gh_r)?;
    let r = g.sigmoid(r_pre);

    let gi_z = g.slice(gi, hd, 2 * hd)?;
    let gh_z = g.slice(gh, hd, 2 * hd)?;
    let z_pre = g.add(gi_z, gh_z)?;
    let z = g.sigmoid(z_pre);

    let gi_n = g.slice(gi, 2 * hd, 3 * hd)?;
    let gh_n = g.slice(gh, 2 * hd, 3 * hd)?;
    let gated = g.mul(r, gh_n)?;
    let n_pre = g.add(gi_n, gated)?;
    let n = g.tanh(n_pre);

    // h' = n + z * (h - n)
    let diff = g.sub(h, n)?;
    let mix = g.mul(z, diff)?;
    g.add(n, mix)
}

/// Splits a `B x m x D` window batch into `m` frames of `B x D`.
pub fn frames(x: &Tensor) -> Result<Vec<Tensor>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim("window batch", s, &[0, 0, 0]));
    }
    let (b, m, d) = (s[0], s[1], s[2]);
    Ok((0..m)
        .map(|t| {
            let mut data = Vec::with_capacity(b * d);
            for row in 0..b {
                let off = (row * m + t) * d;
                data.extend_from_slice(&x.data()[off..off + d]);
            }
            Tensor::matrix(b, d, data).expect("frame shape")
        })
        .collect())
}

/// Runs the encoder over `x: B x m x D` from a zero state; returns `B x H_enc`.
pub fn encode(g: &mut Graph, vars: &NodeVars, x: &Tensor) -> Result<Var> {
    if !x.is_finite() {
        return Err(Error::Contract("non-finite value in encoder input".into()));
    }
    let steps = frames(x)?;
    let b = x.shape()[0];
    let mut h = g.constant(Tensor::zeros(&[b, vars.encoder.hidden]));
    for f in steps {
        let xt = g.constant(f);
        h = gru_cell(g, &vars.encoder, xt, h)?;
    }
    Ok(h)
}

/// Autoregressive rollout of `horizon` steps from `last: B x D` and
/// `state: B x (H_enc + H_gn)`; returns `B x horizon x D`.
pub fn decode(g: &mut Graph, vars: &NodeVars, last: Var, state: Var, horizon: usize) -> Result<Var> {
    let width = g.value(state).cols();
    if width != vars.decoder.hidden {
        return Err(Error::dim(
            "decoder state",
            g.value(state).shape(),
            &[vars.decoder.hidden],
        ));
    }
    let b = g.value(last).rows();
    let d = g.value(last).cols();
    let mut h = state;
    let mut input = last;
    let mut outs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        h = gru_cell(g, &vars.decoder, input, h)?;
        let p = g.matmul(h, vars.proj_w)?;
        let y = g.add(p, vars.proj_b)?;
        outs.push(y);
        input = y;
    }
    let flat = g.concat(&outs)?;
    g.reshape(flat, vec![b, horizon, d])
}

/// The last input frame `x[:, m-1, :]` as a `B x D` tensor.
pub fn last_frame(x: &Tensor) -> Result<Tensor> {
    let mut f = frames(x)?;
    f.pop().ok_or_else(|| Error::Degenerate("empty input window".into()))
}

/// Encode, concatenate the graph embedding, decode.
/// Returns `(h_c, y_hat)`.
pub fn forward(g: &mut Graph, vars: &NodeVars, dims: &TemporalDims, x: &Tensor, h_graph: Var) -> Result<(Var, Var)> {
    let h_c = encode(g, vars, x)?;
    let state = g.concat(&[h_c, h_graph])?;
    let last = g.constant(last_frame(x)?);
    let y = decode(g, vars, last, state, dims.horizon)?;
    Ok((h_c, y))
}

/// Mean squared error over every element.
pub fn node_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    g.mse(pred, target)
}
