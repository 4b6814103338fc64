//! Message ledger and analytic communication-cost formulas.
//!
//! Every simulated transfer between the server and a node (or between two
//! nodes) is appended to a [`CommLedger`] with its exact payload size:
//! element count times 8 bytes, no framing. Totals are integer sums.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::Strategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Server,
    Node(usize),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Server => write!(f, "server"),
            Endpoint::Node(i) => write!(f, "node{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FedavgDown,
    FedavgUp,
    EncodeUp,
    EmbedDown,
    GradUp,
    SlForward,
    SlBackward,
    FmtlExchange,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::FedavgDown,
        Phase::FedavgUp,
        Phase::EncodeUp,
        Phase::EmbedDown,
        Phase::GradUp,
        Phase::SlForward,
        Phase::SlBackward,
        Phase::FmtlExchange,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::FedavgDown => "fedavg_down",
            Phase::FedavgUp => "fedavg_up",
            Phase::EncodeUp => "encode_up",
            Phase::EmbedDown => "embed_down",
            Phase::GradUp => "grad_up",
            Phase::SlForward => "sl_forward",
            Phase::SlBackward => "sl_backward",
            Phase::FmtlExchange => "fmtl_exchange",
        }
    }

    fn direction_ok(self, src: Endpoint, dst: Endpoint) -> bool {
        use Endpoint::*;
        match self {
            Phase::FedavgDown | Phase::EmbedDown => matches!((src, dst), (Server, Node(_))),
            Phase::FedavgUp | Phase::EncodeUp | Phase::GradUp => matches!((src, dst), (Node(_), Server)),
            Phase::SlForward | Phase::SlBackward => {
                matches!((src, dst), (Server, Node(_)) | (Node(_), Server))
            }
            Phase::FmtlExchange => matches!((src, dst), (Node(a), Node(b)) if a != b),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a payload is derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    ModelWeights,
    TemporalEncoding,
    GraphEmbedding,
    EmbeddingGradient,
    EncodingGradient,
    /// Raw readings, targets or predictions of a node. Never legal under
    /// the cross-node constraint.
    RawNodeData,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub round: usize,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub phase: Phase,
    pub payload: Payload,
    pub bytes: u64,
}

/// Append-only message record.
#[derive(Clone, Debug, Default)]
pub struct CommLedger {
    messages: Vec<Message>,
    closed: bool,
}

/// Per-phase byte totals.
pub type PhaseTotals = BTreeMap<Phase, u64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub messages: usize,
    pub total_bytes: u64,
    pub by_phase: BTreeMap<String, u64>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, msg: Message) -> Result<()> {
        if self.closed {
            return Err(Error::Contract("ledger is closed".into()));
        }
        if msg.bytes == 0 {
            return Err(Error::Contract(format!("empty {} message", msg.phase)));
        }
        if !msg.phase.direction_ok(msg.src, msg.dst) {
            return Err(Error::Contract(format!(
                "{} message cannot go from {} to {}",
                msg.phase, msg.src, msg.dst
            )));
        }
        self.messages.push(msg);
        Ok(())
    }

    /// Records a transfer of `elements` 64-bit floats.
    pub fn send(
        &mut self,
        round: usize,
        src: Endpoint,
        dst: Endpoint,
        phase: Phase,
        payload: Payload,
        elements: usize,
    ) -> Result<()> {
        self.record(Message {
            round,
            src,
            dst,
            phase,
            payload,
            bytes: elements as u64 * 8,
        })
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn total(&self) -> u64 {
        self.messages.iter().map(|m| m.bytes).sum()
    }

    pub fn total_for(&self, phase: Phase) -> u64 {
        self.messages.iter().filter(|m| m.phase == phase).map(|m| m.bytes).sum()
    }

    pub fn by_phase(&self) -> PhaseTotals {
        let mut out = PhaseTotals::new();
        for m in &self.messages {
            *out.entry(m.phase).or_default() += m.bytes;
        }
        out
    }

    /// Per-phase totals restricted to one round.
    pub fn round_totals(&self, round: usize) -> PhaseTotals {
        let mut out = PhaseTotals::new();
        for m in self.messages.iter().filter(|m| m.round == round) {
            *out.entry(m.phase).or_default() += m.bytes;
        }
        out
    }

    /// Messages whose payload is raw node data.
    pub fn raw_data_messages(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.payload == Payload::RawNodeData)
            .count()
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            messages: self.messages.len(),
            total_bytes: self.total(),
            by_phase: self
                .by_phase()
                .into_iter()
                .map(|(p, b)| (p.as_str().to_string(), b))
                .collect(),
        }
    }

    /// CSV with columns `round, phase, src, dst, bytes`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "phase", "src", "dst", "bytes"])?;
        for m in &self.messages {
            w.write_record([
                m.round.to_string(),
                m.phase.to_string(),
                m.src.to_string(),
                m.dst.to_string(),
                m.bytes.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// How the server model is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnTrainingMode {
    /// End-to-end split learning every batch.
    SplitLearning,
    /// Alternating training with node models frozen during server rounds.
    Alternating,
}

/// Per-round traffic of one server-model training round, in units of `S`:
/// `4|V|S` for split learning, `(2 + 2 R_s) / R_s * |V| S` averaged over
/// `R_s` alternating server rounds.
pub fn per_round_gn_cost(mode: GnTrainingMode, num_nodes: f64, hidden_state_size: f64, server_rounds: f64) -> f64 {
    match mode {
        GnTrainingMode::SplitLearning => 4.0 * num_nodes * hidden_state_size,
        GnTrainingMode::Alternating => (2.0 + 2.0 * server_rounds) / server_rounds * num_nodes * hidden_state_size,
    }
}

/// Inputs to the closed-form totals. Sizes may be in any unit (bytes, GB);
/// the result is in the same unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub num_nodes: f64,
    pub node_weights_size: f64,
    pub hidden_state_size: f64,
    pub server_rounds: f64,
    pub rounds: f64,
    pub nonself_directed_edges: f64,
}

/// Closed-form training traffic of a strategy.
pub fn analytic_total(strategy: Strategy, p: &CostParams) -> Result<f64> {
    let (r, v, w, s, rs) = (
        p.rounds,
        p.num_nodes,
        p.node_weights_size,
        p.hidden_state_size,
        p.server_rounds,
    );
    Ok(match strategy {
        Strategy::Fmtl => r * p.nonself_directed_edges * w,
        Strategy::AtFedavg => r * (v * w * 2.0 + (1.0 + 2.0 * rs + 1.0) * v * s),
        Strategy::Sl => r * 2.0 * 2.0 * v * s,
        Strategy::SlFedavg => r * (v * w * 2.0 + 2.0 * 2.0 * v * s),
        Strategy::AtNoFedavg => r * (1.0 + 2.0 * rs + 1.0) * v * s,
        Strategy::Centralized | Strategy::Local | Strategy::FedavgOnly => {
            return Err(Error::NoFormula(strategy.as_str().into()))
        }
    })
}

/// Exact byte sizes observed in a simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedSizes {
    pub rounds: u64,
    pub num_nodes: u64,
    pub server_rounds: u64,
    pub nonself_directed_edges: u64,
    /// Node model parameters, bytes.
    pub weights_bytes: u64,
    /// One node's temporal encodings for one pass over its data, bytes.
    pub encoding_bytes: u64,
    /// One node's graph embeddings (or their gradients) for one pass, bytes.
    pub embedding_bytes: u64,
}

/// Per-phase totals implied by the message schedule of each strategy.
pub fn expected_phase_totals(strategy: Strategy, o: &ObservedSizes) -> PhaseTotals {
    let mut t = PhaseTotals::new();
    let (r, v) = (o.rounds, o.num_nodes);
    let fedavg = |t: &mut PhaseTotals| {
        t.insert(Phase::FedavgUp, r * v * o.weights_bytes);
        t.insert(Phase::FedavgDown, r * v * o.weights_bytes);
    };
    let alternating = |t: &mut PhaseTotals| {
        t.insert(Phase::EncodeUp, r * v * o.encoding_bytes);
        t.insert(Phase::EmbedDown, r * (o.server_rounds + 1) * v * o.embedding_bytes);
        t.insert(Phase::GradUp, r * o.server_rounds * v * o.embedding_bytes);
    };
    let split = |t: &mut PhaseTotals| {
        t.insert(Phase::SlForward, r * v * (o.encoding_bytes + o.embedding_bytes));
        t.insert(Phase::SlBackward, r * v * (o.embedding_bytes + o.encoding_bytes));
    };
    match strategy {
        Strategy::AtFedavg => {
            fedavg(&mut t);
            alternating(&mut t);
        }
        Strategy::AtNoFedavg => alternating(&mut t),
        Strategy::Sl => split(&mut t),
        Strategy::SlFedavg => {
            fedavg(&mut t);
            split(&mut t);
        }
        Strategy::FedavgOnly => fedavg(&mut t),
        Strategy::Fmtl => {
            t.insert(Phase::FmtlExchange, r * o.nonself_directed_edges * o.weights_bytes);
        }
        Strategy::Centralized | Strategy::Local => {}
    }
    t.retain(|_, b| *b > 0);
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseComparison {
    pub phase: Phase,
    pub ledger_bytes: u64,
    pub expected_bytes: u64,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconcileReport {
    pub strategy: Strategy,
    pub ledger_total: u64,
    pub expected_total: u64,
    /// Closed-form total evaluated with the observed sizes, if the strategy
    /// has one. Only meaningful as an exact check when encoding and
    /// embedding widths coincide (the formulas use one size `S`).
    pub formula_total: Option<f64>,
    pub formula_matches_ledger: Option<bool>,
    pub phases: Vec<PhaseComparison>,
    pub all_phases_exact: bool,
}

/// Compares ledger totals against the schedule-derived and closed-form totals.
pub fn reconcile(ledger: &CommLedger, strategy: Strategy, o: &ObservedSizes) -> ReconcileReport {
    let actual = ledger.by_phase();
    let expected = expected_phase_totals(strategy, o);
    let phases: Vec<PhaseComparison> = Phase::ALL
        .iter()
        .filter(|p| actual.contains_key(p) || expected.contains_key(p))
        .map(|&phase| {
            let ledger_bytes = actual.get(&phase).copied().unwrap_or(0);
            let expected_bytes = expected.get(&phase).copied().unwrap_or(0);
            PhaseComparison {
                phase,
                ledger_bytes,
                expected_bytes,
                exact: ledger_bytes == expected_bytes,
            }
        })
        .collect();
    let params = CostParams {
        num_nodes: o.num_nodes as f64,
        node_weights_size: o.weights_bytes as f64,
        hidden_state_size: o.encoding_bytes as f64,
        server_rounds: o.server_rounds as f64,
        rounds: o.rounds as f64,
        nonself_directed_edges: o.nonself_directed_edges as f64,
    };
    let formula_total = analytic_total(strategy, &params).ok();
    let ledger_total = ledger.total();
    let formula_matches_ledger = formula_total.map(|f| f == ledger_total as f64);
    ReconcileReport {
        strategy,
        ledger_total,
        expected_total: expected.values().sum(),
        formula_total,
        formula_matches_ledger,
        all_phases_exact: phases.iter().all(|p| p.exact),
        phases,
    }
}
