//! Server-side training of the graph network against frozen node models.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graphs::SensorGraph;
use crate::numerics::{Graph, Optimizer, ParamSet, Tensor};
use crate::spatial::{gn_forward, BatchedTopology, GnModel};
use crate::temporal::{self, NodeModel};

/// Batched topologies keyed by batch size.
#[derive(Debug)]
pub struct TopologyCache {
    graph: SensorGraph,
    cache: HashMap<usize, BatchedTopology>,
}

impl TopologyCache {
    pub fn new(graph: &SensorGraph) -> Self {
        Self {
            graph: graph.clone(),
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, batch: usize) -> Result<&BatchedTopology> {
        if !self.cache.contains_key(&batch) {
            let topo = BatchedTopology::from_graph(&self.graph, batch)?;
            self.cache.insert(batch, topo);
        }
        Ok(&self.cache[&batch])
    }

    pub fn graph(&self) -> &SensorGraph {
        &self.graph
    }
}

/// Result of one server step.
#[derive(Clone, Debug)]
pub struct ServerBatch {
    /// Sum of the node losses.
    pub loss: f64,
    /// Embeddings sent to each node, before the step.
    pub embeddings: Vec<Tensor>,
}

/// Node-major stack of per-node `B x H` blocks.
pub(crate) fn stack_nodes(blocks: &[Tensor]) -> Result<Tensor> {
    Tensor::stack_rows(blocks)
}

fn split_nodes(t: &Tensor, n_nodes: usize) -> Vec<Tensor> {
    let b = t.rows() / n_nodes;
    (0..n_nodes).map(|i| t.row_slice(i * b, (i + 1) * b)).collect()
}

/// One forward of the graph network on `h_c` (one `B x H_enc` block per
/// node), one embedding/gradient exchange with every node through
/// `client`, and one optimizer step on the accumulated gradient.
pub fn server_batch(
    gn: &mut GnModel,
    opt: &mut Optimizer,
    topo: &BatchedTopology,
    h_c: &[Tensor],
    mut client: impl FnMut(usize, &Tensor) -> Result<(f64, Tensor)>,
) -> Result<ServerBatch> {
    if h_c.len() != topo.n_nodes {
        return Err(Error::Protocol(format!(
            "server step needs encodings from {} nodes, has {}",
            topo.n_nodes,
            h_c.len()
        )));
    }
    let mut g = Graph::new();
    let vars = gn.bind(&mut g);
    let h = g.constant(stack_nodes(h_c)?);
    let out = gn_forward(&mut g, h, topo, &vars)?;
    let embeddings = split_nodes(g.value(out), topo.n_nodes);
    let mut loss = 0.0;
    let mut node_grads = Vec::with_capacity(topo.n_nodes);
    for (i, e) in embeddings.iter().enumerate() {
        let (l, grad) = client(i, e)?;
        loss += l;
        node_grads.push(grad);
    }
    // Seeding every node's block at once equals the sum of the per-node
    // backward passes by linearity.
    let grads = g.backward_seeded(&[(out, stack_nodes(&node_grads)?)])?;
    let pg = ParamSet::collect_grads(&g, &grads, &vars.all);
    opt.step(&mut gn.params, &pg)?;
    Ok(ServerBatch { loss, embeddings })
}

/// `sum_i d l_i / d theta_GN`, one seeded backward per node, accumulated in
/// ascending node order.
pub fn gn_grads_per_node(
    gn: &GnModel,
    topo: &BatchedTopology,
    h_c: &[Tensor],
    node_grads: &[Tensor],
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars = gn.bind(&mut g);
    let h = g.constant(stack_nodes(h_c)?);
    let out = gn_forward(&mut g, h, topo, &vars)?;
    let b = topo.batch;
    let width = g.value(out).cols();
    let mut total: Vec<Tensor> = gn.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (i, ng) in node_grads.iter().enumerate() {
        let mut seed = Tensor::zeros(g.value(out).shape());
        seed.data_mut()[i * b * width..(i + 1) * b * width].copy_from_slice(ng.data());
        let grads = g.backward_seeded(&[(out, seed)])?;
        for (acc, gi) in total.iter_mut().zip(ParamSet::collect_grads(&g, &grads, &vars.all)) {
            acc.add_assign(&gi)?;
        }
    }
    Ok(total)
}

/// Gradient of `sum_i l_i` with respect to the graph network, from one
/// tape spanning the graph network and every node's frozen decoder.
/// Returns the loss and the gradients.
pub fn gn_grads_combined(
    gn: &GnModel,
    topo: &BatchedTopology,
    h_c: &[Tensor],
    nodes: &[&NodeModel],
    batches: &[(Tensor, Tensor)],
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = gn.bind(&mut g);
    let h = g.constant(stack_nodes(h_c)?);
    let out = gn_forward(&mut g, h, topo, &vars)?;
    let b = topo.batch;
    let mut loss = None;
    for (i, (model, (x, y))) in nodes.iter().zip(batches).enumerate() {
        let nv = model.bind_frozen(&mut g);
        let rows: std::rc::Rc<[usize]> = (i * b..(i + 1) * b).collect();
        let hg = g.gather_rows(out, rows)?;
        let hc = g.constant(h_c[i].clone());
        let state = g.concat(&[hc, hg])?;
        let last = g.constant(temporal::last_frame(x)?);
        let pred = temporal::decode(&mut g, &nv, last, state, model.dims.horizon)?;
        let target = g.constant(y.clone());
        let li = temporal::node_loss(&mut g, pred, target)?;
        loss = Some(match loss {
            None => li,
            Some(acc) => g.add(acc, li)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::Contract("no nodes".into()))?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item()?, ParamSet::collect_grads(&g, &grads, &vars.all)))
}
