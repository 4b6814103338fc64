//! Round-by-round driver for every strategy.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::client::{client_backward, client_encode, local_epoch};
use super::server::{server_batch, stack_nodes, TopologyCache};
use super::{epoch_batches, fedavg, BatchStream, Strategy, TrainingConfig};
use crate::comms::{CommLedger, Endpoint, ObservedSizes, Payload, Phase};
use crate::error::{Error, Result};
use crate::graphs::SensorGraph;
use crate::numerics::{Graph, Optimizer, ParamSet, Tensor};
use crate::pipeline::{rmse, NodeWindows, NormStats, WindowedDataset};
use crate::spatial::{gn_forward, GnDims, GnModel};
use crate::temporal::{self, NodeModel, TemporalDims};

/// Node and server model shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub temporal: TemporalDims,
    pub gn: GnDims,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            temporal: TemporalDims::default(),
            gn: GnDims::default(),
        }
    }
}

impl ModelDims {
    /// Small widths for quick experiments.
    pub fn compact(hidden: usize, mlp: usize) -> Self {
        Self {
            temporal: TemporalDims {
                input_dim: 1,
                enc_hidden: hidden,
                graph_hidden: hidden,
                horizon: 12,
            },
            gn: GnDims {
                node_in: hidden,
                mlp_hidden: vec![mlp, mlp],
                out: hidden,
                layers: 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.temporal;
        if t.input_dim == 0 || t.enc_hidden == 0 || t.graph_hidden == 0 || t.horizon == 0 {
            return Err(Error::Config("temporal widths must be positive".into()));
        }
        if self.gn.node_in != t.enc_hidden {
            return Err(Error::Config(format!(
                "graph network input width {} differs from encoder width {}",
                self.gn.node_in, t.enc_hidden
            )));
        }
        if self.gn.out != t.graph_hidden {
            return Err(Error::Config(format!(
                "graph network output width {} differs from embedding width {}",
                self.gn.out, t.graph_hidden
            )));
        }
        if self.gn.layers == 0 || self.gn.out == 0 {
            return Err(Error::Config("graph network needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Models, optimizer state and cached tensors of every participant.
#[derive(Clone, Debug)]
pub struct FederationState {
    pub strategy: Strategy,
    /// One model per node; a single shared model under `centralized`.
    pub nodes: Vec<NodeModel>,
    pub node_opts: Vec<Optimizer>,
    pub gn: Option<GnModel>,
    pub gn_opt: Option<Optimizer>,
    /// Per node, one graph embedding row per training window.
    pub train_embeddings: Vec<Tensor>,
    /// Per node temporal encodings of the current round, if fresh.
    pub encodings: Option<Vec<Tensor>>,
    /// Training windows per node (`N_i`).
    pub sample_counts: Vec<usize>,
}

impl FederationState {
    pub fn init(cfg: &TrainingConfig, dims: &ModelDims, n_nodes: usize, n_train: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let theta0 = NodeModel::init(dims.temporal, &mut rng);
        let gn = cfg.strategy.uses_gn().then(|| GnModel::init(dims.gn.clone(), &mut rng));
        let copies = if cfg.strategy == Strategy::Centralized {
            1
        } else {
            n_nodes
        };
        Self {
            strategy: cfg.strategy,
            nodes: vec![theta0; copies],
            node_opts: vec![Optimizer::new(cfg.optimizer, cfg.client_lr); copies],
            gn_opt: gn.as_ref().map(|_| Optimizer::new(cfg.optimizer, cfg.server_lr)),
            gn,
            train_embeddings: vec![Tensor::zeros(&[n_train, dims.temporal.graph_hidden]); n_nodes],
            encodings: None,
            sample_counts: vec![n_train; n_nodes],
        }
    }

    pub fn node(&self, i: usize) -> &NodeModel {
        &self.nodes[if self.nodes.len() == 1 { 0 } else { i }]
    }

    /// The model to apply to nodes never seen in training: the shared or
    /// averaged model when there is one.
    pub fn shared_model(&self) -> Option<&NodeModel> {
        if self.nodes.len() == 1 || self.strategy.uses_fedavg() {
            Some(&self.nodes[0])
        } else {
            None
        }
    }
}

/// Per-round metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    /// Ledger bytes sent during this round, per phase.
    pub bytes_by_phase: BTreeMap<String, u64>,
    pub round_bytes: u64,
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub strategy: Strategy,
    pub state: FederationState,
    /// Models at the round with the lowest validation RMSE.
    pub best_nodes: Vec<NodeModel>,
    pub best_gn: Option<GnModel>,
    pub ledger: CommLedger,
    pub records: Vec<RoundRecord>,
    pub initial_val_rmse: f64,
    pub best_round: usize,
    pub best_val_rmse: f64,
    pub test_rmse: f64,
    pub rounds_executed: usize,
    pub observed: ObservedSizes,
}

fn check_finite(v: f64, round: usize, phase: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericFailure {
            round,
            phase: phase.to_string(),
        })
    }
}

fn numeric_context(e: Error, round: usize, phase: &str) -> Error {
    match e {
        Error::Contract(msg) if msg.contains("non-finite") => Error::NumericFailure {
            round,
            phase: phase.to_string(),
        },
        other => other,
    }
}

fn chunks(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Step-by-step driver. The phase methods can be called individually to
/// inspect state between phases; [`Trainer::run_round`] runs one full
/// global round of the configured strategy.
pub struct Trainer<'a> {
    pub cfg: TrainingConfig,
    pub dims: ModelDims,
    pub data: &'a WindowedDataset,
    pub state: FederationState,
    pub ledger: CommLedger,
    topo: TopologyCache,
    graph: &'a SensorGraph,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &TrainingConfig,
        dims: &ModelDims,
        data: &'a WindowedDataset,
        graph: &'a SensorGraph,
    ) -> Result<Self> {
        cfg.validate()?;
        dims.validate()?;
        if data.node_ids != graph.node_ids() {
            return Err(Error::Config("dataset nodes do not match graph nodes".into()));
        }
        if data.dim != dims.temporal.input_dim || data.spec.output_steps() != dims.temporal.horizon {
            return Err(Error::Config(format!(
                "model expects D={} and horizon {}, data has D={} and {} output steps",
                dims.temporal.input_dim,
                dims.temporal.horizon,
                data.dim,
                data.spec.output_steps()
            )));
        }
        if data.counts.train == 0 {
            return Err(Error::Degenerate("no training windows".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            dims: dims.clone(),
            data,
            state: FederationState::init(cfg, dims, graph.len(), data.counts.train),
            ledger: CommLedger::new(),
            topo: TopologyCache::new(graph),
            graph,
        })
    }

    fn n_nodes(&self) -> usize {
        self.data.n_nodes()
    }

    fn n_train(&self) -> usize {
        self.data.counts.train
    }

    /// Batches of phase-1 epoch `epoch` (0-based, counted across rounds).
    pub fn client_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        epoch_batches(
            self.n_train(),
            self.cfg.batch_size,
            self.cfg.seed,
            BatchStream::Client,
            epoch,
        )
    }

    pub fn server_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        epoch_batches(
            self.n_train(),
            self.cfg.batch_size,
            self.cfg.seed,
            BatchStream::Server,
            epoch,
        )
    }

    /// Phase 1: `R_c` local epochs per node with the graph embedding held
    /// fixed, then (for averaging strategies) upload, average, download.
    pub fn client_phase(&mut self, round: usize) -> Result<f64> {
        let strategy = self.cfg.strategy;
        let n = self.n_nodes();
        let averaging = strategy.uses_fedavg();
        if averaging {
            // every node starts the round from the averaged model
            for o in &mut self.state.node_opts {
                o.reset();
            }
        }
        let pull = if strategy == Strategy::Fmtl {
            Some(self.fmtl_exchange(round)?)
        } else {
            None
        };
        let rc = self.cfg.client_rounds;
        let mut total = 0.0;
        for e in 0..rc {
            let batches = self.client_batches(((round - 1) * rc + e) as u64);
            for i in 0..n {
                let st = &mut self.state;
                let mut extra = pull.as_ref().map(|(deg, pulls)| {
                    let lambda = self.cfg.fmtl_lambda;
                    let (deg, pull) = (deg[i], &pulls[i]);
                    move |p: &ParamSet| -> Result<Vec<Tensor>> {
                        let w = p.flatten();
                        let g: Vec<f64> = w
                            .iter()
                            .zip(pull)
                            .map(|(wk, c)| lambda * (2.0 * deg * wk - c))
                            .collect();
                        super::unflatten(p, &g)
                    }
                });
                let extra_ref = extra
                    .as_mut()
                    .map(|f| f as &mut dyn FnMut(&ParamSet) -> Result<Vec<Tensor>>);
                let loss = local_epoch(
                    &mut st.nodes[i],
                    &mut st.node_opts[i],
                    &self.data.train[i],
                    &batches,
                    &st.train_embeddings[i],
                    extra_ref,
                )
                .map_err(|e| numeric_context(e, round, "client_update"))?;
                total += check_finite(loss, round, "client_update")?;
            }
        }
        if averaging {
            self.average(round)?;
        }
        self.state.encodings = None;
        Ok(total / (rc * n) as f64)
    }

    /// Upload every node model, average, and send the average back.
    fn average(&mut self, round: usize) -> Result<()> {
        let n = self.n_nodes();
        let w = self.state.nodes[0].params.numel();
        for i in 0..n {
            self.ledger.send(
                round,
                Endpoint::Node(i),
                Endpoint::Server,
                Phase::FedavgUp,
                Payload::ModelWeights,
                w,
            )?;
        }
        let refs: Vec<&ParamSet> = self.state.nodes.iter().map(|m| &m.params).collect();
        let avg = fedavg(&refs, &self.state.sample_counts)?;
        for i in 0..n {
            self.ledger.send(
                round,
                Endpoint::Server,
                Endpoint::Node(i),
                Phase::FedavgDown,
                Payload::ModelWeights,
                w,
            )?;
            self.state.nodes[i].params = avg.clone();
        }
        Ok(())
    }

    /// Sends each node's weights along every non-self edge and returns,
    /// per node `k`, the out-degree `sum_j a_kj` and the pull vector
    /// `sum_j (a_kj + a_jk) w_j` of the regularizer gradient.
    fn fmtl_exchange(&mut self, round: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let n = self.n_nodes();
        let w = self.state.nodes[0].params.numel();
        for e in self.graph.edges().iter().filter(|e| e.sender != e.receiver) {
            self.ledger.send(
                round,
                Endpoint::Node(e.sender),
                Endpoint::Node(e.receiver),
                Phase::FmtlExchange,
                Payload::ModelWeights,
                w,
            )?;
        }
        let flats: Vec<Vec<f64>> = self.state.nodes.iter().map(|m| m.params.flatten()).collect();
        let a = self.graph.adjacency();
        let mut deg = vec![0.0; n];
        let mut pulls = vec![vec![0.0; w]; n];
        for k in 0..n {
            for j in (0..n).filter(|&j| j != k) {
                let c = a[k * n + j] + a[j * n + k];
                deg[k] += a[k * n + j];
                if c != 0.0 {
                    for (p, v) in pulls[k].iter_mut().zip(&flats[j]) {
                        *p += c * v;
                    }
                }
            }
        }
        Ok((deg, pulls))
    }

    /// Phase 2: every node encodes its training windows and uploads them.
    pub fn encode_phase(&mut self, round: usize) -> Result<()> {
        let n = self.n_nodes();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut blocks = Vec::new();
            for idx in chunks(self.n_train(), self.cfg.batch_size) {
                let (x, _) = self.data.train[i].batch(&idx);
                let h = client_encode(self.state.node(i), &x).map_err(|e| numeric_context(e, round, "encode"))?;
                self.ledger.send(
                    round,
                    Endpoint::Node(i),
                    Endpoint::Server,
                    Phase::EncodeUp,
                    Payload::TemporalEncoding,
                    h.numel(),
                )?;
                blocks.push(h);
            }
            out.push(Tensor::stack_rows(&blocks)?);
        }
        self.state.encodings = Some(out);
        Ok(())
    }

    /// Phase 3: `R_s` passes of split training of the graph network with
    /// node models frozen.
    pub fn server_phase(&mut self, round: usize) -> Result<f64> {
        let encodings = self
            .state
            .encodings
            .as_ref()
            .ok_or_else(|| Error::Protocol("server training needs fresh encodings from phase 2".into()))?;
        let rs = self.cfg.server_rounds;
        let n = self.n_nodes();
        let mut total = 0.0;
        let mut count = 0usize;
        for e in 0..rs {
            let batches = self.server_batches(((round - 1) * rs + e) as u64);
            for idx in &batches {
                let topo = self.topo.get(idx.len())?;
                let h_c: Vec<Tensor> = encodings.iter().map(|h| h.select_leading(idx)).collect();
                let nodes = &self.state.nodes;
                let data = self.data;
                let ledger = &mut self.ledger;
                let gn = self
                    .state
                    .gn
                    .as_mut()
                    .ok_or_else(|| Error::Contract("no graph network".into()))?;
                let opt = self.state.gn_opt.as_mut().expect("server optimizer");
                let res = server_batch(gn, opt, topo, &h_c, |i, emb| {
                    ledger.send(
                        round,
                        Endpoint::Server,
                        Endpoint::Node(i),
                        Phase::EmbedDown,
                        Payload::GraphEmbedding,
                        emb.numel(),
                    )?;
                    let (x, y) = data.train[i].batch(idx);
                    let model = &nodes[if nodes.len() == 1 { 0 } else { i }];
                    let (loss, grad) = client_backward(model, &h_c[i], &x, &y, emb)?;
                    ledger.send(
                        round,
                        Endpoint::Node(i),
                        Endpoint::Server,
                        Phase::GradUp,
                        Payload::EmbeddingGradient,
                        grad.numel(),
                    )?;
                    Ok((loss, grad))
                })
                .map_err(|e| numeric_context(e, round, "server_train_gn"))?;
                total += check_finite(res.loss, round, "server_train_gn")? / n as f64;
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    /// Phase 4: fresh embeddings from the updated graph network are sent to
    /// every node for the next round's local training.
    pub fn embed_phase(&mut self, round: usize) -> Result<()> {
        let encodings = self
            .state
            .encodings
            .as_ref()
            .ok_or_else(|| Error::Protocol("embedding update needs fresh encodings from phase 2".into()))?;
        let gn = self
            .state
            .gn
            .as_ref()
            .ok_or_else(|| Error::Contract("no graph network".into()))?;
        let n = self.n_nodes();
        let mut blocks: Vec<Vec<Tensor>> = vec![Vec::new(); n];
        for idx in chunks(self.n_train(), self.cfg.batch_size) {
            let topo = self.topo.get(idx.len())?;
            let h_c: Vec<Tensor> = encodings.iter().map(|h| h.select_leading(&idx)).collect();
            let emb = gn.embed(&stack_nodes(&h_c)?, topo)?;
            let b = idx.len();
            for (i, blk) in blocks.iter_mut().enumerate() {
                let e = emb.row_slice(i * b, (i + 1) * b);
                if !e.is_finite() {
                    return Err(Error::NumericFailure {
                        round,
                        phase: "embed".into(),
                    });
                }
                self.ledger.send(
                    round,
                    Endpoint::Server,
                    Endpoint::Node(i),
                    Phase::EmbedDown,
                    Payload::GraphEmbedding,
                    e.numel(),
                )?;
                blk.push(e);
            }
        }
        for (i, blk) in blocks.iter().enumerate() {
            self.state.train_embeddings[i] = Tensor::stack_rows(blk)?;
        }
        Ok(())
    }

    /// One epoch of end-to-end split learning: node encoders, graph
    /// network and node decoders are updated together every batch.
    pub fn split_epoch(&mut self, round: usize) -> Result<f64> {
        let n = self.n_nodes();
        let batches = self.client_batches((round - 1) as u64);
        let mut total = 0.0;
        for idx in &batches {
            let b = idx.len();
            let xy: Vec<(Tensor, Tensor)> = (0..n).map(|i| self.data.train[i].batch(idx)).collect();
            // node side: encoders
            let mut tapes = Vec::with_capacity(n);
            let mut enc_vals = Vec::with_capacity(n);
            for (i, (x, _)) in xy.iter().enumerate() {
                let mut g = Graph::new();
                let vars = self.state.nodes[i].bind(&mut g);
                let hc = temporal::encode(&mut g, &vars, x).map_err(|e| numeric_context(e, round, "split_learning"))?;
                self.ledger.send(
                    round,
                    Endpoint::Node(i),
                    Endpoint::Server,
                    Phase::SlForward,
                    Payload::TemporalEncoding,
                    g.value(hc).numel(),
                )?;
                enc_vals.push(g.value(hc).clone());
                tapes.push((g, vars, hc));
            }
            // server side: graph network
            let topo = self.topo.get(b)?;
            let gn = self
                .state
                .gn
                .as_mut()
                .ok_or_else(|| Error::Contract("no graph network".into()))?;
            let mut gs = Graph::new();
            let gv = gn.bind(&mut gs);
            let h_in = gs.leaf(stack_nodes(&enc_vals)?, true);
            let out = gn_forward(&mut gs, h_in, topo, &gv)?;
            let hg_all = gs.value(out).clone();
            // node side: decoders
            let mut node_grads: Vec<Vec<Tensor>> = Vec::with_capacity(n);
            let mut hg_grads = Vec::with_capacity(n);
            for (i, (g, vars, hc)) in tapes.iter_mut().enumerate() {
                let emb = hg_all.row_slice(i * b, (i + 1) * b);
                self.ledger.send(
                    round,
                    Endpoint::Server,
                    Endpoint::Node(i),
                    Phase::SlForward,
                    Payload::GraphEmbedding,
                    emb.numel(),
                )?;
                let hg = g.leaf(emb, true);
                let state = g.concat(&[*hc, hg])?;
                let (x, y) = &xy[i];
                let last = g.constant(temporal::last_frame(x)?);
                let pred = temporal::decode(g, vars, last, state, self.dims.temporal.horizon)?;
                let target = g.constant(y.clone());
                let loss = temporal::node_loss(g, pred, target)?;
                total += check_finite(g.value(loss).item()?, round, "split_learning")? / n as f64;
                let grads = g.backward(loss)?;
                let gh = grads.wrt(g, hg);
                self.ledger.send(
                    round,
                    Endpoint::Node(i),
                    Endpoint::Server,
                    Phase::SlBackward,
                    Payload::EmbeddingGradient,
                    gh.numel(),
                )?;
                node_grads.push(ParamSet::collect_grads(g, &grads, &vars.all));
                hg_grads.push(gh);
            }
            // server side: backward through the graph network
            let sg = gs.backward_seeded(&[(out, stack_nodes(&hg_grads)?)])?;
            let gn_grads = ParamSet::collect_grads(&gs, &sg, &gv.all);
            let h_grad = sg.wrt(&gs, h_in);
            // node side: encoder contribution through the graph network
            for (i, (g, vars, hc)) in tapes.iter().enumerate() {
                let gc = h_grad.row_slice(i * b, (i + 1) * b);
                self.ledger.send(
                    round,
                    Endpoint::Server,
                    Endpoint::Node(i),
                    Phase::SlBackward,
                    Payload::EncodingGradient,
                    gc.numel(),
                )?;
                let eg = g.backward_seeded(&[(*hc, gc)])?;
                for (acc, e) in node_grads[i].iter_mut().zip(ParamSet::collect_grads(g, &eg, &vars.all)) {
                    acc.add_assign(&e)?;
                }
                self.state.node_opts[i].step(&mut self.state.nodes[i].params, &node_grads[i])?;
            }
            let gn = self.state.gn.as_mut().expect("graph network");
            self.state
                .gn_opt
                .as_mut()
                .expect("server optimizer")
                .step(&mut gn.params, &gn_grads)?;
        }
        Ok(total / batches.len() as f64)
    }

    /// One epoch of joint training of the shared node model and the graph
    /// network on pooled data.
    pub fn centralized_epoch(&mut self, round: usize) -> Result<f64> {
        let n = self.n_nodes();
        let batches = self.client_batches((round - 1) as u64);
        let mut total = 0.0;
        for idx in &batches {
            let b = idx.len();
            let (xs, ys): (Vec<Tensor>, Vec<Tensor>) = (0..n).map(|i| self.data.train[i].batch(idx)).unzip();
            let x = Tensor::stack_rows(&xs)?;
            let y = Tensor::stack_rows(&ys)?;
            let topo = self.topo.get(b)?;
            let st = &mut self.state;
            let gn = st
                .gn
                .as_mut()
                .ok_or_else(|| Error::Contract("no graph network".into()))?;
            let mut g = Graph::new();
            let nv = st.nodes[0].bind(&mut g);
            let gv = gn.bind(&mut g);
            let hc = temporal::encode(&mut g, &nv, &x).map_err(|e| numeric_context(e, round, "centralized"))?;
            let hg = gn_forward(&mut g, hc, topo, &gv)?;
            let state = g.concat(&[hc, hg])?;
            let last = g.constant(temporal::last_frame(&x)?);
            let pred = temporal::decode(&mut g, &nv, last, state, self.dims.temporal.horizon)?;
            let target = g.constant(y);
            let loss = temporal::node_loss(&mut g, pred, target)?;
            total += check_finite(g.value(loss).item()?, round, "centralized")?;
            let grads = g.backward(loss)?;
            st.node_opts[0].step(&mut st.nodes[0].params, &ParamSet::collect_grads(&g, &grads, &nv.all))?;
            st.gn_opt
                .as_mut()
                .expect("server optimizer")
                .step(&mut gn.params, &ParamSet::collect_grads(&g, &grads, &gv.all))?;
        }
        Ok(total / batches.len() as f64)
    }

    /// One global round of the configured strategy; returns the mean
    /// training loss of the round's node-side work.
    pub fn train_round(&mut self, round: usize) -> Result<f64> {
        match self.cfg.strategy {
            Strategy::Centralized => self.centralized_epoch(round),
            Strategy::Local | Strategy::FedavgOnly | Strategy::Fmtl => self.client_phase(round),
            Strategy::AtFedavg | Strategy::AtNoFedavg => {
                let loss = self.client_phase(round)?;
                self.encode_phase(round)?;
                self.server_phase(round)?;
                self.embed_phase(round)?;
                Ok(loss)
            }
            Strategy::Sl => self.split_epoch(round),
            Strategy::SlFedavg => {
                let loss = self.split_epoch(round)?;
                for o in &mut self.state.node_opts {
                    o.reset();
                }
                self.average(round)?;
                Ok(loss)
            }
        }
    }

    /// RMSE in raw units on one split under the current models.
    pub fn evaluate(&self, windows: &[NodeWindows]) -> Result<f64> {
        let nodes: Vec<&NodeModel> = (0..self.n_nodes()).map(|i| self.state.node(i)).collect();
        evaluate(
            &nodes,
            self.state.gn.as_ref(),
            self.graph,
            windows,
            self.data.stats,
            self.cfg.eval_batch_size,
        )
    }

    pub fn observed_sizes(&self, rounds: usize) -> ObservedSizes {
        let t = &self.dims.temporal;
        ObservedSizes {
            rounds: rounds as u64,
            num_nodes: self.n_nodes() as u64,
            server_rounds: self.cfg.server_rounds as u64,
            nonself_directed_edges: self.graph.nonself_edge_count() as u64,
            weights_bytes: self.state.nodes[0].params.byte_size(),
            encoding_bytes: (self.n_train() * t.enc_hidden * 8) as u64,
            embedding_bytes: (self.n_train() * t.graph_hidden * 8) as u64,
        }
    }
}

/// RMSE in raw units over every node, window and horizon step. `nodes[i]`
/// is node `i`'s model; without a graph network the embedding is zero.
pub fn evaluate(
    nodes: &[&NodeModel],
    gn: Option<&GnModel>,
    graph: &SensorGraph,
    windows: &[NodeWindows],
    stats: NormStats,
    chunk: usize,
) -> Result<f64> {
    let n = graph.len();
    if nodes.len() != n || windows.len() != n {
        return Err(Error::GraphConsistency(format!(
            "{} models and {} window sets for {} nodes",
            nodes.len(),
            windows.len(),
            n
        )));
    }
    let count = windows[0].count;
    if count == 0 {
        return Err(Error::Degenerate("no windows to evaluate".into()));
    }
    let mut topo = TopologyCache::new(graph);
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for idx in chunks(count, chunk) {
        let b = idx.len();
        let xy: Vec<(Tensor, Tensor)> = windows.iter().map(|w| w.batch(&idx)).collect();
        let enc: Vec<Tensor> = nodes
            .iter()
            .zip(&xy)
            .map(|(m, (x, _))| client_encode(m, x))
            .collect::<Result<_>>()?;
        let emb = match gn {
            Some(gn) => Some(gn.embed(&stack_nodes(&enc)?, topo.get(b)?)?),
            None => None,
        };
        for (i, m) in nodes.iter().enumerate() {
            let hg = match &emb {
                Some(e) => e.row_slice(i * b, (i + 1) * b),
                None => Tensor::zeros(&[b, m.dims.graph_hidden]),
            };
            let mut g = Graph::new();
            let vars = m.bind_frozen(&mut g);
            let hc = g.constant(enc[i].clone());
            let hgv = g.constant(hg);
            let state = g.concat(&[hc, hgv])?;
            let last = g.constant(temporal::last_frame(&xy[i].0)?);
            let pred = temporal::decode(&mut g, &vars, last, state, m.dims.horizon)?;
            preds.extend_from_slice(g.value(pred).data());
            targets.extend_from_slice(xy[i].1.data());
        }
    }
    rmse(&preds, &targets, stats)
}

/// Trains `cfg.strategy` with early stopping on validation RMSE and
/// reports test RMSE at the best round.
pub fn run_strategy(
    cfg: &TrainingConfig,
    dims: &ModelDims,
    data: &WindowedDataset,
    graph: &SensorGraph,
) -> Result<RunOutcome> {
    let mut t = Trainer::new(cfg, dims, data, graph)?;
    let initial_val_rmse = t.evaluate(&data.val)?;
    let mut best_val = initial_val_rmse;
    let mut best_round = 0;
    let mut best_nodes = t.state.nodes.clone();
    let mut best_gn = t.state.gn.clone();
    let mut records = Vec::new();
    let mut executed = 0;
    for round in 1..=cfg.global_rounds {
        let before = t.ledger.messages().len();
        let train_loss = t.train_round(round)?;
        let val = check_finite(t.evaluate(&data.val)?, round, "evaluation")?;
        let mut bytes_by_phase = BTreeMap::new();
        for m in &t.ledger.messages()[before..] {
            *bytes_by_phase.entry(m.phase.as_str().to_string()).or_insert(0u64) += m.bytes;
        }
        executed = round;
        records.push(RoundRecord {
            round,
            train_loss,
            val_rmse: val,
            round_bytes: bytes_by_phase.values().sum(),
            bytes_by_phase,
        });
        if val < best_val || best_round == 0 {
            best_val = val;
            best_round = round;
            best_nodes = t.state.nodes.clone();
            best_gn = t.state.gn.clone();
        }
        if let Some(p) = cfg.patience {
            if round - best_round >= p {
                break;
            }
        }
    }
    let refs: Vec<&NodeModel> = (0..graph.len())
        .map(|i| &best_nodes[if best_nodes.len() == 1 { 0 } else { i }])
        .collect();
    let test_rmse = evaluate(
        &refs,
        best_gn.as_ref(),
        graph,
        &data.test,
        data.stats,
        cfg.eval_batch_size,
    )?;
    t.ledger.close();
    let observed = t.observed_sizes(executed);
    Ok(RunOutcome {
        strategy: cfg.strategy,
        state: t.state,
        best_nodes,
        best_gn,
        ledger: t.ledger,
        records,
        initial_val_rmse,
        best_round,
        best_val_rmse: best_val,
        test_rmse,
        rounds_executed: executed,
        observed,
    })
}
