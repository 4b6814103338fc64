//! Shared fixtures for the integration tests and the acceptance runner.
#![allow(dead_code)]

use cnfgnn::federation::{client_backward, client_encode, gn_grads_per_node};
use cnfgnn::numerics::{uniform, Graph, ParamSet, Tensor, Var};
use cnfgnn::spatial::{gn_forward, BatchedTopology, GnDims, GnModel};
use cnfgnn::temporal::{self, GruVars, NodeModel, TemporalDims};
use cnfgnn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Step used to re-check entries that fail at `FD_EPS`. A ReLU switching
/// inside the wide stencil passes here; a wrong gradient does not.
pub const FD_EPS_FINE: f64 = 1e-7;

/// Outcome of one gradient check.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub entries: usize,
    /// Entries judged with the fine step.
    pub refined: usize,
}

impl GradReport {
    pub fn merge(self, o: GradReport) -> GradReport {
        GradReport {
            max_rel_error: self.max_rel_error.max(o.max_rel_error),
            entries: self.entries + o.entries,
            refined: self.refined + o.refined,
        }
    }
}

/// Judges one entry; `loss_at(x)` evaluates the loss with the entry set to
/// `base + x`.
fn judge(report: &mut GradReport, analytic: f64, mut loss_at: impl FnMut(f64) -> Result<f64>) -> Result<()> {
    report.entries += 1;
    let central =
        |eps: f64, l: &mut dyn FnMut(f64) -> Result<f64>| -> Result<f64> { Ok((l(eps)? - l(-eps)?) / (2.0 * eps)) };
    let mut err = rel_error(analytic, central(FD_EPS, &mut loss_at)?);
    if err >= GRAD_TOL {
        report.refined += 1;
        err = rel_error(analytic, central(FD_EPS_FINE, &mut loss_at)?);
    }
    report.max_rel_error = report.max_rel_error.max(err);
    Ok(())
}

/// Compares reverse-mode gradients with central differences over every
/// entry of every set. `f` must bind the sets and return the scalar loss
/// plus the bound variables in flattened order.
pub fn gradcheck<F>(sets: &[ParamSet], f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[ParamSet]) -> Result<(Var, Vec<Var>)>,
{
    let mut g = Graph::new();
    let (loss, vars) = f(&mut g, sets)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = ParamSet::collect_grads(&g, &grads, &vars)
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();

    let mut report = GradReport::default();
    let mut offset = 0;
    let mut work = sets.to_vec();
    for k in 0..sets.len() {
        let base = sets[k].flatten();
        for j in 0..base.len() {
            judge(&mut report, analytic[offset + j], |dx| {
                let mut p = base.clone();
                p[j] += dx;
                work[k].assign_flat(&p)?;
                let mut g = Graph::new();
                let (l, _) = f(&mut g, &work)?;
                g.value(l).item()
            })?;
        }
        work[k].assign_flat(&base)?;
        offset += base.len();
    }
    Ok(report)
}

fn set(tensors: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in tensors {
        p.push(n, t);
    }
    p
}

/// `sum(out * weights)` with a fixed random weighting, so every output
/// entry carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = uniform(g.value(out).shape(), 1.0, rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Random directed graph without self loops on `n` nodes.
pub fn random_edges(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for s in 0..n {
        for r in 0..n {
            if s != r && rng.gen_bool(p) {
                edges.push((s, r, rng.gen_range(0.1..1.0)));
            }
        }
    }
    edges
}

pub fn gru_cell_case(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let (b, i, h) = (3, 2, 4);
    let cell = set(vec![
        ("w_ih", uniform(&[i, 3 * h], 0.8, &mut r)),
        ("w_hh", uniform(&[h, 3 * h], 0.8, &mut r)),
        ("b_ih", uniform(&[3 * h], 0.8, &mut r)),
        ("b_hh", uniform(&[3 * h], 0.8, &mut r)),
    ]);
    let inputs = set(vec![
        ("x", uniform(&[b, i], 1.0, &mut r)),
        ("h", uniform(&[b, h], 1.0, &mut r)),
    ]);
    let weights_seed = r.gen();
    gradcheck(&[cell, inputs], |g, s| {
        let p = s[0].bind(g);
        let io = s[1].bind(g);
        let vars = GruVars {
            w_ih: p[0],
            w_hh: p[1],
            b_ih: p[2],
            b_hh: p[3],
            hidden: h,
        };
        let out = temporal::gru_cell(g, &vars, io[0], io[1])?;
        let loss = weighted_sum(g, out, &mut rng(weights_seed))?;
        Ok((loss, p.into_iter().chain(io).collect()))
    })
}

fn small_temporal() -> TemporalDims {
    TemporalDims {
        input_dim: 2,
        enc_hidden: 3,
        graph_hidden: 2,
        horizon: 3,
    }
}

pub fn encoder_case(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let dims = small_temporal();
    let model = NodeModel::init(dims, &mut r);
    let x = uniform(&[2, 4, dims.input_dim], 1.5, &mut r);
    let weights_seed = r.gen();
    gradcheck(&[model.params.clone()], |g, s| {
        let m = NodeModel::from_params(dims, s[0].clone())?;
        let vars = m.bind(g);
        let h = temporal::encode(g, &vars, &x)?;
        let loss = weighted_sum(g, h, &mut rng(weights_seed))?;
        Ok((loss, vars.all))
    })
}

pub fn decoder_case(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let dims = small_temporal();
    let model = NodeModel::init(dims, &mut r);
    let b = 2;
    let inputs = set(vec![
        ("last", uniform(&[b, dims.input_dim], 1.0, &mut r)),
        ("state", uniform(&[b, dims.dec_hidden()], 1.0, &mut r)),
    ]);
    let target = uniform(&[b, dims.horizon, dims.input_dim], 1.0, &mut r);
    gradcheck(&[model.params.clone(), inputs], |g, s| {
        let m = NodeModel::from_params(dims, s[0].clone())?;
        let vars = m.bind(g);
        let io = s[1].bind(g);
        let pred = temporal::decode(g, &vars, io[0], io[1], dims.horizon)?;
        let t = g.constant(target.clone());
        let loss = temporal::node_loss(g, pred, t)?;
        Ok((loss, vars.all.into_iter().chain(io).collect()))
    })
}

fn gn_case(seed: u64, layers: usize, node_in: usize) -> Result<GradReport> {
    let mut r = rng(seed);
    let n = r.gen_range(3..=5);
    let edges = random_edges(n, 0.5, &mut r);
    let batch = 2;
    let topo = BatchedTopology::new(n, &edges, batch)?;
    let dims = GnDims {
        node_in,
        mlp_hidden: vec![4],
        out: 3,
        layers,
    };
    let gn = GnModel::init(dims.clone(), &mut r);
    let h = set(vec![("h", uniform(&[n * batch, node_in], 1.0, &mut r))]);
    let weights_seed = r.gen();
    gradcheck(&[gn.params.clone(), h], |g, s| {
        let m = gn.clone().with_params(s[0].clone())?;
        let vars = m.bind(g);
        let hv = s[1].bind(g);
        let out = gn_forward(g, hv[0], &topo, &vars)?;
        let loss = weighted_sum(g, out, &mut rng(weights_seed))?;
        Ok((loss, vars.all.into_iter().chain(hv).collect()))
    })
}

/// Single layer whose input width equals its output width (identity skip).
pub fn gn_layer_case(seed: u64) -> Result<GradReport> {
    gn_case(seed, 1, 3)
}

/// Two layers; the first needs a learned adapter on its residual path.
pub fn gn_two_layer_case(seed: u64) -> Result<GradReport> {
    gn_case(seed, 2, 2)
}

pub struct SplitFixture {
    pub topo: BatchedTopology,
    pub gn: GnModel,
    pub nodes: Vec<NodeModel>,
    pub batches: Vec<(Tensor, Tensor)>,
}

pub fn split_fixture(seed: u64) -> Result<SplitFixture> {
    let mut r = rng(seed);
    let n = r.gen_range(2..=4);
    let edges = random_edges(n, 0.6, &mut r);
    let batch = 2;
    let dims = small_temporal();
    let topo = BatchedTopology::new(n, &edges, batch)?;
    let gn = GnModel::init(
        GnDims {
            node_in: dims.enc_hidden,
            mlp_hidden: vec![4],
            out: dims.graph_hidden,
            layers: 2,
        },
        &mut r,
    );
    let nodes = (0..n).map(|_| NodeModel::init(dims, &mut r)).collect();
    let batches = (0..n)
        .map(|_| {
            (
                uniform(&[batch, 4, dims.input_dim], 1.0, &mut r),
                uniform(&[batch, dims.horizon, dims.input_dim], 1.0, &mut r),
            )
        })
        .collect();
    Ok(SplitFixture {
        topo,
        gn,
        nodes,
        batches,
    })
}

/// `sum_i l_i` over every node, with gradients reaching every node model
/// through its own decoder and, via the graph network, through every
/// encoder.
pub fn split_loss_case(seed: u64) -> Result<GradReport> {
    let fx = split_fixture(seed)?;
    let n = fx.nodes.len();
    let b = fx.topo.batch;
    let mut sets = vec![fx.gn.params.clone()];
    sets.extend(fx.nodes.iter().map(|m| m.params.clone()));
    gradcheck(&sets, |g, s| {
        let gn = fx.gn.clone().with_params(s[0].clone())?;
        let gv = gn.bind(g);
        let mut all = gv.all.clone();
        let mut node_vars = Vec::with_capacity(n);
        let mut encs = Vec::with_capacity(n);
        for i in 0..n {
            let m = NodeModel::from_params(fx.nodes[i].dims, s[i + 1].clone())?;
            let v = m.bind(g);
            encs.push(temporal::encode(g, &v, &fx.batches[i].0)?);
            all.extend(v.all.iter().copied());
            node_vars.push(v);
        }
        let mut h_all: Option<Var> = None;
        for (i, &e) in encs.iter().enumerate() {
            let rows: std::rc::Rc<[usize]> = (i * b..(i + 1) * b).collect();
            let placed = g.scatter_add_rows(e, rows, n * b)?;
            h_all = Some(match h_all {
                None => placed,
                Some(acc) => g.add(acc, placed)?,
            });
        }
        let h_all = h_all.expect("at least two nodes");
        let emb = gn_forward(g, h_all, &fx.topo, &gv)?;
        let mut loss: Option<Var> = None;
        for i in 0..n {
            let rows: std::rc::Rc<[usize]> = (i * b..(i + 1) * b).collect();
            let hg = g.gather_rows(emb, rows)?;
            let state = g.concat(&[encs[i], hg])?;
            let last = g.constant(temporal::last_frame(&fx.batches[i].0)?);
            let pred = temporal::decode(g, &node_vars[i], last, state, fx.nodes[i].dims.horizon)?;
            let t = g.constant(fx.batches[i].1.clone());
            let li = temporal::node_loss(g, pred, t)?;
            loss = Some(match loss {
                None => li,
                Some(acc) => g.add(acc, li)?,
            });
        }
        Ok((loss.expect("at least two nodes"), all))
    })
}

/// Graph network gradients assembled the way the protocol does it (each
/// node returns dl_i/dh_G, the server seeds one backward per node) against
/// central differences of `sum_i l_i` with the encodings held fixed.
pub fn split_protocol_case(seed: u64) -> Result<GradReport> {
    let fx = split_fixture(seed)?;
    let n = fx.nodes.len();
    let b = fx.topo.batch;
    let h_c: Vec<Tensor> = (0..n)
        .map(|i| client_encode(&fx.nodes[i], &fx.batches[i].0))
        .collect::<Result<_>>()?;
    let emb = fx.gn.embed(&Tensor::stack_rows(&h_c)?, &fx.topo)?;
    let node_grads: Vec<Tensor> = (0..n)
        .map(|i| {
            let hg = emb.row_slice(i * b, (i + 1) * b);
            client_backward(&fx.nodes[i], &h_c[i], &fx.batches[i].0, &fx.batches[i].1, &hg).map(|r| r.1)
        })
        .collect::<Result<_>>()?;
    let analytic: Vec<f64> = gn_grads_per_node(&fx.gn, &fx.topo, &h_c, &node_grads)?
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();

    let loss_at = |p: &ParamSet| -> Result<f64> {
        let gn = fx.gn.clone().with_params(p.clone())?;
        let emb = gn.embed(&Tensor::stack_rows(&h_c)?, &fx.topo)?;
        let mut total = 0.0;
        for i in 0..n {
            let hg = emb.row_slice(i * b, (i + 1) * b);
            total += client_backward(&fx.nodes[i], &h_c[i], &fx.batches[i].0, &fx.batches[i].1, &hg)?.0;
        }
        Ok(total)
    };
    let base = fx.gn.params.flatten();
    let mut work = fx.gn.params.clone();
    let mut report = GradReport::default();
    for j in 0..base.len() {
        judge(&mut report, analytic[j], |dx| {
            let mut p = base.clone();
            p[j] += dx;
            work.assign_flat(&p)?;
            loss_at(&work)
        })?;
    }
    Ok(report)
}

pub type GradCase = fn(u64) -> Result<GradReport>;

pub const GRADIENT_CASES: [(&str, GradCase); 7] = [
    ("gru cell", gru_cell_case),
    ("encoder", encoder_case),
    ("decoder", decoder_case),
    ("gn layer", gn_layer_case),
    ("two-layer gn with residual", gn_two_layer_case),
    ("split loss", split_loss_case),
    ("split protocol", split_protocol_case),
];

pub const GRADIENT_SEEDS: u64 = 20;

/// Small synthetic experiment: `nodes` sensors, `steps` readings, compact
/// models, `rounds` global rounds without early stopping.
pub fn tiny_config(
    nodes: usize,
    steps: usize,
    seed: u64,
    strategy: cnfgnn::federation::Strategy,
) -> cnfgnn::harness::ExperimentConfig {
    use cnfgnn::harness::{DatasetSource, ExperimentConfig, GraphSource};
    use cnfgnn::pipeline::SynthConfig;
    let mut cfg = ExperimentConfig {
        dataset: DatasetSource::Synthetic(SynthConfig {
            steps,
            ..SynthConfig::default()
        }),
        graph: GraphSource::RandomLayout {
            nodes,
            neighbours: nodes.saturating_sub(1).clamp(1, 8),
            kappa: cnfgnn::graphs::DEFAULT_KAPPA,
        },
        model: cnfgnn::federation::ModelDims::compact(4, 8),
        seed,
        ..ExperimentConfig::default()
    };
    cfg.training.strategy = strategy;
    cfg.training.seed = seed;
    cfg.training.global_rounds = 2;
    cfg.training.batch_size = 32;
    cfg.training.client_lr = 1e-2;
    cfg.training.server_lr = 1e-2;
    cfg.training.patience = None;
    cfg
}

/// One-sensor experiment cut out of a small synthetic graph.
pub fn single_node(
    seed: u64,
) -> (
    cnfgnn::harness::ExperimentConfig,
    cnfgnn::graphs::SensorGraph,
    cnfgnn::pipeline::WindowedDataset,
) {
    let cfg = tiny_config(3, 400, seed, cnfgnn::federation::Strategy::AtFedavg);
    let (graph, series, _) = cnfgnn::harness::load(&cfg).unwrap();
    let one = cnfgnn::graphs::induced(&graph, &[0]);
    let data = cnfgnn::pipeline::prepare(&series.select_nodes(&[0]), cfg.window, cfg.split).unwrap();
    (cfg, one, data)
}

/// The 20-sensor, 2000-step synthetic setup used for strategy comparisons;
/// the same as `configs/synthetic20.json`.
pub fn synthetic20(seed: u64, strategy: cnfgnn::federation::Strategy) -> cnfgnn::harness::ExperimentConfig {
    let mut cfg = tiny_config(20, 2000, seed, strategy);
    cfg.model = cnfgnn::federation::ModelDims::compact(8, 16);
    cfg.training.global_rounds = 8;
    cfg.training.batch_size = 64;
    cfg
}
