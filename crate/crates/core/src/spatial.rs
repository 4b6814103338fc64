//! Server-side graph network.
//!
//! Each layer updates edges, then nodes, then the global feature:
//!
//! ```text
//! e'_k = phi_e(e_k, v[r_k], v[s_k], u)
//! v'_i = phi_v(sum_{k: r_k = i} e'_k, v_i, u)
//! u'   = phi_u(sum_k e'_k, sum_i v'_i, u)
//! ```
//!
//! A batch of `B` samples is run as `B` disjoint copies of the sensor graph.
//! Node rows are node-major (`row = node * B + sample`) so that one node's
//! embeddings for the whole batch are a contiguous block. Edge rows follow
//! the same layout (`row = edge * B + sample`).

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::SensorGraph;
use crate::numerics::{uniform, Graph, ParamSet, Tensor, Var};

/// Index arrays describing `batch` disjoint copies of one graph.
#[derive(Clone, Debug)]
pub struct BatchedTopology {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub batch: usize,
    pub senders: Rc<[usize]>,
    pub receivers: Rc<[usize]>,
    /// Sample index of each edge row.
    pub edge_sample: Rc<[usize]>,
    /// Sample index of each node row.
    pub node_sample: Rc<[usize]>,
    /// Scalar edge features, `n_edges * batch x 1`.
    pub edge_features: Tensor,
}

impl BatchedTopology {
    /// `edges` are `(sender, receiver, feature)` triples over `n_nodes` nodes.
    pub fn new(n_nodes: usize, edges: &[(usize, usize, f64)], batch: usize) -> Result<Self> {
        if let Some(&(s, r, _)) = edges.iter().find(|(s, r, _)| *s >= n_nodes || *r >= n_nodes) {
            return Err(Error::GraphConsistency(format!(
                "edge {s}->{r} references a node outside 0..{n_nodes}"
            )));
        }
        let ne = edges.len();
        let mut senders = Vec::with_capacity(ne * batch);
        let mut receivers = Vec::with_capacity(ne * batch);
        let mut edge_sample = Vec::with_capacity(ne * batch);
        let mut feats = Vec::with_capacity(ne * batch);
        for &(s, r, w) in edges {
            for b in 0..batch {
                senders.push(s * batch + b);
                receivers.push(r * batch + b);
                edge_sample.push(b);
                feats.push(w);
            }
        }
        let node_sample: Vec<usize> = (0..n_nodes).flat_map(|_| 0..batch).collect();
        Ok(Self {
            n_nodes,
            n_edges: ne,
            batch,
            senders: senders.into(),
            receivers: receivers.into(),
            edge_sample: edge_sample.into(),
            node_sample: node_sample.into(),
            edge_features: Tensor::matrix(ne * batch, 1, feats)?,
        })
    }

    /// Edge feature `e_k = W[r_k][s_k]` for every edge of `graph`.
    pub fn from_graph(graph: &SensorGraph, batch: usize) -> Result<Self> {
        let edges: Vec<_> = graph.edges().iter().map(|e| (e.sender, e.receiver, e.weight)).collect();
        Self::new(graph.len(), &edges, batch)
    }

    pub fn node_rows(&self) -> usize {
        self.n_nodes * self.batch
    }

    pub fn edge_rows(&self) -> usize {
        self.n_edges * self.batch
    }
}

/// Edge, node and global features of a batched graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphFeatures {
    pub nodes: Var,
    pub edges: Var,
    pub globals: Var,
}

/// The three learned update functions of a layer. Each receives its
/// arguments already aligned row-by-row (the global feature has been
/// broadcast to each edge or node row).
pub trait UpdateFunctions {
    fn edge(&self, g: &mut Graph, layer: usize, e: Var, v_recv: Var, v_send: Var, u: Var) -> Result<Var>;
    fn node(&self, g: &mut Graph, layer: usize, e_agg: Var, v: Var, u: Var) -> Result<Var>;
    fn global(&self, g: &mut Graph, layer: usize, e_agg: Var, v_agg: Var, u: Var) -> Result<Var>;
}

/// One edge/node/global update with sum aggregation.
pub fn gn_layer(
    g: &mut Graph,
    f: GraphFeatures,
    topo: &BatchedTopology,
    upd: &impl UpdateFunctions,
    layer: usize,
) -> Result<GraphFeatures> {
    if g.value(f.nodes).rows() != topo.node_rows() {
        return Err(Error::GraphConsistency(format!(
            "{} node rows for a topology of {}",
            g.value(f.nodes).rows(),
            topo.node_rows()
        )));
    }
    if g.value(f.edges).rows() != topo.edge_rows() || g.value(f.globals).rows() != topo.batch {
        return Err(Error::GraphConsistency(
            "edge or global rows do not match the topology".into(),
        ));
    }
    // every edge update reads layer-input features only
    let v_recv = g.gather_rows(f.nodes, topo.receivers.clone())?;
    let v_send = g.gather_rows(f.nodes, topo.senders.clone())?;
    let u_edge = g.gather_rows(f.globals, topo.edge_sample.clone())?;
    let e_new = upd.edge(g, layer, f.edges, v_recv, v_send, u_edge)?;

    let e_agg = g.scatter_add_rows(e_new, topo.receivers.clone(), topo.node_rows())?;
    let u_node = g.gather_rows(f.globals, topo.node_sample.clone())?;
    let v_new = upd.node(g, layer, e_agg, f.nodes, u_node)?;

    let e_bar = g.scatter_add_rows(e_new, topo.edge_sample.clone(), topo.batch)?;
    let v_bar = g.scatter_add_rows(v_new, topo.node_sample.clone(), topo.batch)?;
    let u_new = upd.global(g, layer, e_bar, v_bar, f.globals)?;

    Ok(GraphFeatures {
        nodes: v_new,
        edges: e_new,
        globals: u_new,
    })
}

/// Shape of the server model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnDims {
    /// Width of the incoming temporal encodings.
    pub node_in: usize,
    /// Hidden layer sizes of every update MLP.
    pub mlp_hidden: Vec<usize>,
    /// Output width of every update function; also the embedding width.
    pub out: usize,
    pub layers: usize,
}

impl Default for GnDims {
    fn default() -> Self {
        Self {
            node_in: 64,
            mlp_hidden: vec![256, 256, 128],
            out: 64,
            layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerLayout {
    edge: Vec<(usize, usize)>,
    node: Vec<(usize, usize)>,
    global: Vec<(usize, usize)>,
    adapter: Option<(usize, usize)>,
}

/// Graph network parameters plus their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GnModel {
    pub dims: GnDims,
    pub params: ParamSet,
    layout: Vec<LayerLayout>,
}

/// Per-layer parameter handles on a graph.
#[derive(Clone, Debug)]
pub struct GnLayerVars {
    pub edge: Vec<(Var, Var)>,
    pub node: Vec<(Var, Var)>,
    pub global: Vec<(Var, Var)>,
    pub adapter: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct GnVars {
    pub all: Vec<Var>,
    pub layers: Vec<GnLayerVars>,
}

fn push_mlp<R: Rng + ?Sized>(
    p: &mut ParamSet,
    prefix: &str,
    input: usize,
    hidden: &[usize],
    out: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    widths.push(out);
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let k = 1.0 / (w[0].max(1) as f64).sqrt();
            let wi = p.push(format!("{prefix}.{i}.w"), uniform(&[w[0], w[1]], k, rng));
            let bi = p.push(format!("{prefix}.{i}.b"), uniform(&[w[1]], k, rng));
            (wi, bi)
        })
        .collect()
}

impl GnModel {
    pub fn init<R: Rng + ?Sized>(dims: GnDims, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut layout = Vec::with_capacity(dims.layers);
        let out = dims.out;
        for l in 0..dims.layers {
            let (e_in, v_in, u_in) = if l == 0 { (1, dims.node_in, 0) } else { (out, out, out) };
            let pre = format!("layer{l}");
            let edge = push_mlp(
                &mut params,
                &format!("{pre}.phi_e"),
                e_in + 2 * v_in + u_in,
                &dims.mlp_hidden,
                out,
                rng,
            );
            let node = push_mlp(
                &mut params,
                &format!("{pre}.phi_v"),
                out + v_in + u_in,
                &dims.mlp_hidden,
                out,
                rng,
            );
            let global = push_mlp(
                &mut params,
                &format!("{pre}.phi_u"),
                out + out + u_in,
                &dims.mlp_hidden,
                out,
                rng,
            );
            let adapter = (v_in != out).then(|| {
                let k = 1.0 / (v_in as f64).sqrt();
                let w = params.push(format!("{pre}.adapter.w"), uniform(&[v_in, out], k, rng));
                let b = params.push(format!("{pre}.adapter.b"), uniform(&[out], k, rng));
                (w, b)
            });
            layout.push(LayerLayout {
                edge,
                node,
                global,
                adapter,
            });
        }
        Self { dims, params, layout }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Replaces the parameter values, keeping the layout.
    pub fn with_params(mut self, params: ParamSet) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::Contract(
                "parameter layout does not match graph network dims".into(),
            ));
        }
        self.params = params;
        Ok(self)
    }

    fn vars_from(&self, all: Vec<Var>) -> GnVars {
        let map = |v: &[(usize, usize)]| v.iter().map(|&(w, b)| (all[w], all[b])).collect::<Vec<_>>();
        let layers = self
            .layout
            .iter()
            .map(|l| GnLayerVars {
                edge: map(&l.edge),
                node: map(&l.node),
                global: map(&l.global),
                adapter: l.adapter.map(|(w, b)| (all[w], all[b])),
            })
            .collect();
        GnVars { all, layers }
    }

    pub fn bind(&self, g: &mut Graph) -> GnVars {
        let all = self.params.bind(g);
        self.vars_from(all)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> GnVars {
        let all = self.params.bind_frozen(g);
        self.vars_from(all)
    }

    /// Forward pass on plain values; nothing is kept for backward.
    pub fn embed(&self, h_all: &Tensor, topo: &BatchedTopology) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let h = g.constant(h_all.clone());
        let out = gn_forward(&mut g, h, topo, &vars)?;
        Ok(g.value(out).clone())
    }
}

/// ReLU on hidden layers, linear output.
pub fn mlp(g: &mut Graph, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let p = g.matmul(h, w)?;
        h = g.add(p, b)?;
        if i + 1 < layers.len() {
            h = g.relu(h);
        }
    }
    Ok(h)
}

impl UpdateFunctions for GnVars {
    fn edge(&self, g: &mut Graph, layer: usize, e: Var, v_recv: Var, v_send: Var, u: Var) -> Result<Var> {
        let x = g.concat(&[e, v_recv, v_send, u])?;
        mlp(g, &self.layers[layer].edge, x)
    }

    fn node(&self, g: &mut Graph, layer: usize, e_agg: Var, v: Var, u: Var) -> Result<Var> {
        let x = g.concat(&[e_agg, v, u])?;
        mlp(g, &self.layers[layer].node, x)
    }

    fn global(&self, g: &mut Graph, layer: usize, e_agg: Var, v_agg: Var, u: Var) -> Result<Var> {
        let x = g.concat(&[e_agg, v_agg, u])?;
        mlp(g, &self.layers[layer].global, x)
    }
}

/// Stacked layers with a residual connection on node features. Input
/// `h_all` is `n_nodes * B x node_in` (node-major); the result is
/// `n_nodes * B x out`.
pub fn gn_forward(g: &mut Graph, h_all: Var, topo: &BatchedTopology, vars: &GnVars) -> Result<Var> {
    if g.value(h_all).rows() != topo.node_rows() {
        return Err(Error::GraphConsistency(format!(
            "{} encoding rows for {} nodes x batch {}",
            g.value(h_all).rows(),
            topo.n_nodes,
            topo.batch
        )));
    }
    let edges = g.constant(topo.edge_features.clone());
    let globals = g.constant(Tensor::zeros(&[topo.batch, 0]));
    let mut f = GraphFeatures {
        nodes: h_all,
        edges,
        globals,
    };
    for (l, lv) in vars.layers.iter().enumerate() {
        let out = gn_layer(g, f, topo, vars, l)?;
        let skip = match lv.adapter {
            Some((w, b)) => {
                let p = g.matmul(f.nodes, w)?;
                g.add(p, b)?
            }
            None => f.nodes,
        };
        let nodes = g.add(out.nodes, skip)?;
        f = GraphFeatures { nodes, ..out };
    }
    Ok(f.nodes)
}
