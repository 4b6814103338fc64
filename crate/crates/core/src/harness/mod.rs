//! Experiment runner: builds data and graph from a config, trains, and
//! writes metrics, checkpoints, the message ledger and a summary.
//!
//! Output directory layout of one run:
//!
//! ```text
//! config.json     resolved configuration
//! metrics.jsonl   one record per round plus a final test record
//! ledger.csv      every simulated message
//! summary.json    final RMSEs, ledger totals, formula comparison
//! timings.json    wall-clock per round (kept apart so metrics are reproducible)
//! checkpoints/    node and graph network parameters at the best round
//! ```

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{DatasetSource, ExperimentConfig, GraphSource, Overrides, SweepGrid};

use crate::comms::{reconcile, LedgerSummary, ReconcileReport};
use crate::error::{Error, Result};
use crate::federation::{evaluate, run_strategy, RunOutcome, Strategy};
use crate::graphs::{build_adjacency, random_layout, subgraph_by_longitude, DistanceMatrix, SensorGraph};
use crate::pipeline::{prepare, prepare_with_stats, synthesize, SeriesDataset, WindowedDataset};
use crate::temporal::NodeModel;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub strategy: Strategy,
    pub round: usize,
    pub split: String,
    pub rmse: f64,
    pub train_loss: Option<f64>,
    /// Bytes sent during this round, per phase.
    pub bytes_by_phase: BTreeMap<String, u64>,
    pub round_bytes: u64,
    pub cumulative_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub strategy: Strategy,
    /// False for centralized training, which pools raw data.
    pub federated: bool,
    pub nodes: usize,
    pub rounds_executed: usize,
    pub best_round: usize,
    pub initial_val_rmse: f64,
    pub best_val_rmse: f64,
    pub test_rmse: f64,
    pub ledger: LedgerSummary,
    pub reconcile: ReconcileReport,
}

/// Sensor graph from the configured source.
pub fn load_graph(cfg: &ExperimentConfig) -> Result<SensorGraph> {
    match &cfg.graph {
        GraphSource::Distances {
            distances,
            coords,
            kappa,
        } => {
            let d = DistanceMatrix::read_csv(distances)?;
            let g = build_adjacency(&d, *kappa)?;
            match coords {
                Some(c) => g.read_coords_csv(c),
                None => Ok(g),
            }
        }
        GraphSource::RandomLayout {
            nodes,
            neighbours,
            kappa,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (d, coords) = random_layout(*nodes, *neighbours, &mut rng);
            build_adjacency(&d, *kappa)?.with_coords(coords)
        }
    }
}

/// Raw readings from the configured source, in graph node order.
pub fn load_series(cfg: &ExperimentConfig, graph: &SensorGraph) -> Result<SeriesDataset> {
    let ds = match &cfg.dataset {
        DatasetSource::Csv { readings } => SeriesDataset::read_csv(readings)?,
        DatasetSource::Synthetic(s) => synthesize(graph, s, cfg.seed)?,
    };
    ds.check_nodes(graph)?;
    Ok(ds)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-seed{}", cfg.training.strategy, cfg.seed)
}

/// Per-round validation records followed by one test record.
pub fn metrics_records(run_id: &str, out: &RunOutcome) -> Vec<MetricsRecord> {
    let mut cumulative = 0;
    let mut recs: Vec<MetricsRecord> = out
        .records
        .iter()
        .map(|r| {
            cumulative += r.round_bytes;
            MetricsRecord {
                run_id: run_id.to_string(),
                strategy: out.strategy,
                round: r.round,
                split: "val".into(),
                rmse: r.val_rmse,
                train_loss: Some(r.train_loss),
                bytes_by_phase: r.bytes_by_phase.clone(),
                round_bytes: r.round_bytes,
                cumulative_bytes: cumulative,
            }
        })
        .collect();
    recs.push(MetricsRecord {
        run_id: run_id.to_string(),
        strategy: out.strategy,
        round: out.rounds_executed,
        split: "test".into(),
        rmse: out.test_rmse,
        train_loss: None,
        bytes_by_phase: BTreeMap::new(),
        round_bytes: 0,
        cumulative_bytes: cumulative,
    });
    recs
}

fn write_metrics(path: &Path, recs: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in recs {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_checkpoints(dir: &Path, out: &RunOutcome) -> Result<()> {
    create_dir(dir)?;
    if out.best_nodes.len() == 1 {
        out.best_nodes[0].params.save(dir, "node_shared")?;
    } else {
        for (i, m) in out.best_nodes.iter().enumerate() {
            m.params.save(dir, &format!("node{i}"))?;
        }
    }
    if let Some(gn) = &out.best_gn {
        gn.params.save(dir, "gn")?;
    }
    Ok(())
}

pub fn summarize(cfg: &ExperimentConfig, out: &RunOutcome) -> RunSummary {
    RunSummary {
        run_id: run_id(cfg),
        strategy: out.strategy,
        federated: out.strategy.is_federated(),
        nodes: out.observed.num_nodes as usize,
        rounds_executed: out.rounds_executed,
        best_round: out.best_round,
        initial_val_rmse: out.initial_val_rmse,
        best_val_rmse: out.best_val_rmse,
        test_rmse: out.test_rmse,
        ledger: out.ledger.summary(),
        reconcile: reconcile(&out.ledger, out.strategy, &out.observed),
    }
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, out: &RunOutcome) -> Result<RunSummary> {
    create_dir(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_metrics(&dir.join("metrics.jsonl"), &metrics_records(&run_id(cfg), out))?;
    out.ledger.write_csv(&dir.join("ledger.csv"))?;
    write_checkpoints(&dir.join("checkpoints"), out)?;
    let summary = summarize(cfg, out);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Prepared data and graph for a config.
pub fn load(cfg: &ExperimentConfig) -> Result<(SensorGraph, SeriesDataset, WindowedDataset)> {
    let graph = load_graph(cfg)?;
    let series = load_series(cfg, &graph)?;
    let data = prepare(&series, cfg.window, cfg.split)?;
    Ok((graph, series, data))
}

/// Trains one strategy and writes its artifacts to `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let (graph, _, data) = load(cfg)?;
    let start = Instant::now();
    let out = run_strategy(&cfg.training, &cfg.model, &data, &graph)?;
    let summary = write_artifacts(&cfg.output_dir, cfg, &out)?;
    write_json(
        &cfg.output_dir.join("timings.json"),
        &serde_json::json!({ "run_id": summary.run_id, "seconds": start.elapsed().as_secs_f64() }),
    )?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductiveSummary {
    pub run_id: String,
    pub strategy: Strategy,
    pub eta: f64,
    /// Original indices of the nodes seen in training.
    pub train_nodes: Vec<usize>,
    pub eval_nodes: usize,
    /// Test RMSE on the training subgraph.
    pub subgraph_test_rmse: f64,
    /// Test RMSE on the full graph with frozen parameters.
    pub full_graph_test_rmse: f64,
}

/// Trains on the westernmost `eta` fraction of the nodes and evaluates the
/// frozen models on the whole graph.
pub fn inductive_outcome(cfg: &ExperimentConfig) -> Result<(InductiveSummary, RunOutcome)> {
    cfg.validate()?;
    let eta = cfg.eta.ok_or_else(|| Error::Config("inductive runs need eta".into()))?;
    let strategy = cfg.training.strategy;
    if !(strategy == Strategy::Centralized || strategy.uses_fedavg()) {
        return Err(Error::Config(format!(
            "strategy {strategy} has no shared node model to apply to unseen nodes"
        )));
    }
    let graph = load_graph(cfg)?;
    let series = load_series(cfg, &graph)?;
    let (sub, kept) = subgraph_by_longitude(&graph, eta)?;
    if kept.len() < 2 {
        return Err(Error::Degenerate(format!(
            "eta {eta} keeps {} node(s); at least 2 are needed",
            kept.len()
        )));
    }
    let sub_data = prepare(&series.select_nodes(&kept), cfg.window, cfg.split)?;
    let out = run_strategy(&cfg.training, &cfg.model, &sub_data, &sub)?;
    let full = prepare_with_stats(&series, cfg.window, sub_data.counts, sub_data.stats)?;
    let shared: &NodeModel = &out.best_nodes[0];
    let nodes = vec![shared; graph.len()];
    let full_rmse = evaluate(
        &nodes,
        out.best_gn.as_ref(),
        &graph,
        &full.test,
        full.stats,
        cfg.training.eval_batch_size,
    )?;
    let summary = InductiveSummary {
        run_id: run_id(cfg),
        strategy: out.strategy,
        eta,
        train_nodes: kept,
        eval_nodes: graph.len(),
        subgraph_test_rmse: out.test_rmse,
        full_graph_test_rmse: full_rmse,
    };
    Ok((summary, out))
}

/// [`inductive_outcome`] plus artifacts; writes `inductive.json` next to the
/// usual run outputs.
pub fn run_inductive(cfg: &ExperimentConfig) -> Result<InductiveSummary> {
    let (summary, out) = inductive_outcome(cfg)?;
    write_artifacts(&cfg.output_dir, cfg, &out)?;
    write_json(&cfg.output_dir.join("inductive.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub client_rounds: usize,
    pub server_rounds: usize,
    pub output_dir: PathBuf,
    pub rounds_executed: usize,
    pub test_rmse: f64,
    pub total_bytes: u64,
}

/// One run per `(R_c, R_s)` cell, each in its own subdirectory, all with
/// the same seed.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep runs need a grid".into()))?;
    let mut cells = Vec::new();
    for (rc, rs) in grid.cells() {
        let mut c = cfg.clone();
        c.training.client_rounds = rc;
        c.training.server_rounds = rs;
        c.sweep = None;
        c.output_dir = cfg.output_dir.join(format!("rc{rc}_rs{rs}"));
        let s = run(&c)?;
        cells.push(SweepCell {
            client_rounds: rc,
            server_rounds: rs,
            output_dir: c.output_dir,
            rounds_executed: s.rounds_executed,
            test_rmse: s.test_rmse,
            total_bytes: s.ledger.total_bytes,
        });
    }
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("sweep.json"), &cells)?;
    Ok(cells)
}

/// Writes a synthetic dataset as CSV files (`readings.csv`,
/// `distances.csv`, `coords.csv`, `edges.csv`) plus a config that reads
/// them back.
pub fn write_synthetic(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    let (nodes, neighbours, kappa) = match &cfg.graph {
        GraphSource::RandomLayout {
            nodes,
            neighbours,
            kappa,
        } => (*nodes, *neighbours, *kappa),
        GraphSource::Distances { .. } => {
            return Err(Error::Config("synthetic export needs a random_layout graph".into()))
        }
    };
    let DatasetSource::Synthetic(spec) = &cfg.dataset else {
        return Err(Error::Config("synthetic export needs a synthetic dataset".into()));
    };
    create_dir(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, coords) = random_layout(nodes, neighbours, &mut rng);
    let graph = build_adjacency(&d, kappa)?.with_coords(coords)?;
    let series = synthesize(&graph, spec, cfg.seed)?;
    d.write_csv(&dir.join("distances.csv"))?;
    graph.write_coords_csv(&dir.join("coords.csv"))?;
    graph.write_edges_csv(&dir.join("edges.csv"))?;
    series.write_csv(&dir.join("readings.csv"))?;
    let mut csv_cfg = cfg.clone();
    csv_cfg.dataset = DatasetSource::Csv {
        readings: "readings.csv".into(),
    };
    csv_cfg.graph = GraphSource::Distances {
        distances: "distances.csv".into(),
        coords: Some("coords.csv".into()),
        kappa,
    };
    let path = dir.join("config.json");
    write_json(&path, &csv_cfg)?;
    Ok(path)
}
