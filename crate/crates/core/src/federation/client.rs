//! Work done on a node: local updates, encoding, and the decoder-side
//! backward pass of split training.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Optimizer, ParamSet, Tensor};
use crate::pipeline::NodeWindows;
use crate::temporal::{self, NodeModel};

/// One optimizer step on a batch with the graph embedding held constant.
/// `extra` is added to the parameter gradients before the step.
pub fn client_step(
    model: &mut NodeModel,
    opt: &mut Optimizer,
    x: &Tensor,
    y: &Tensor,
    h_graph: &Tensor,
    extra: Option<&[Tensor]>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let hg = g.constant(h_graph.clone());
    let (_, pred) = temporal::forward(&mut g, &vars, &model.dims, x, hg)?;
    let target = g.constant(y.clone());
    let loss = temporal::node_loss(&mut g, pred, target)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    let mut pg = ParamSet::collect_grads(&g, &grads, &vars.all);
    if let Some(extra) = extra {
        for (a, b) in pg.iter_mut().zip(extra) {
            a.add_assign(b)?;
        }
    }
    opt.step(&mut model.params, &pg)?;
    Ok(value)
}

/// One pass over the given batches of a node's training windows.
/// `h_graph` holds one embedding row per training window; `extra` is
/// called with the current parameters before every step. Returns the mean
/// batch loss.
pub fn local_epoch(
    model: &mut NodeModel,
    opt: &mut Optimizer,
    data: &NodeWindows,
    batches: &[Vec<usize>],
    h_graph: &Tensor,
    mut extra: Option<&mut dyn FnMut(&ParamSet) -> Result<Vec<Tensor>>>,
) -> Result<f64> {
    if data.count == 0 || batches.is_empty() {
        return Err(Error::Degenerate("node has no training windows".into()));
    }
    let mut total = 0.0;
    for idx in batches {
        let (x, y) = data.batch(idx);
        let hg = h_graph.select_leading(idx);
        let add = match extra.as_mut() {
            Some(f) => Some(f(&model.params)?),
            None => None,
        };
        total += client_step(model, opt, &x, &y, &hg, add.as_deref())?;
    }
    Ok(total / batches.len() as f64)
}

/// Temporal encodings `B x H_enc` of a batch under the current encoder.
pub fn client_encode(model: &NodeModel, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = model.bind_frozen(&mut g);
    let h = temporal::encode(&mut g, &vars, x)?;
    Ok(g.value(h).clone())
}

/// Decoder loss and its gradient with respect to the graph embedding,
/// using the node's cached encodings. Parameters are not touched.
pub fn client_backward(
    model: &NodeModel,
    h_c: &Tensor,
    x: &Tensor,
    y: &Tensor,
    h_graph: &Tensor,
) -> Result<(f64, Tensor)> {
    if h_graph.cols() != model.dims.graph_hidden {
        return Err(Error::dim(
            "graph embedding",
            h_graph.shape(),
            &[model.dims.graph_hidden],
        ));
    }
    let mut g = Graph::new();
    let vars = model.bind_frozen(&mut g);
    let hc = g.constant(h_c.clone());
    let hg = g.leaf(h_graph.clone(), true);
    let state = g.concat(&[hc, hg])?;
    let last = g.constant(temporal::last_frame(x)?);
    let pred = temporal::decode(&mut g, &vars, last, state, model.dims.horizon)?;
    let target = g.constant(y.clone());
    let loss = temporal::node_loss(&mut g, pred, target)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    Ok((value, grads.wrt(&g, hg)))
}
