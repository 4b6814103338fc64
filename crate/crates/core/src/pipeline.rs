//! Readings ingestion, windowing, normalization, splitting, synthetic data
//! and RMSE.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::SensorGraph;
use crate::numerics::Tensor;

/// Minutes between consecutive readings.
pub const STEP_MINUTES: i64 = 5;

/// Z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: 0.0, std: 1.0 };

    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let (mut n, mut sum) = (0usize, 0.0);
        let vals: Vec<f64> = values.into_iter().copied().collect();
        for v in &vals {
            n += 1;
            sum += v;
        }
        if n == 0 {
            return Err(Error::Degenerate("no values to compute statistics from".into()));
        }
        let mean = sum / n as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if !(std > 0.0) {
            return Err(Error::Degenerate("constant series has zero standard deviation".into()));
        }
        Ok(Self { mean, std })
    }
}

pub fn normalize(data: &[f64], stats: NormStats) -> Result<Vec<f64>> {
    if !(stats.std > 0.0) {
        return Err(Error::Degenerate("zero standard deviation".into()));
    }
    Ok(data.iter().map(|v| (v - stats.mean) / stats.std).collect())
}

pub fn denormalize(data: &[f64], stats: NormStats) -> Vec<f64> {
    data.iter().map(|v| v * stats.std + stats.mean).collect()
}

/// Raw readings, `node x time x feature`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub node_ids: Vec<String>,
    pub steps: usize,
    pub dim: usize,
    pub readings: Vec<f64>,
    /// Minutes since the first reading.
    pub timestamps: Vec<i64>,
}

impl SeriesDataset {
    pub fn new(node_ids: Vec<String>, steps: usize, dim: usize, readings: Vec<f64>) -> Result<Self> {
        if readings.len() != node_ids.len() * steps * dim {
            return Err(Error::dim("readings", &[node_ids.len(), steps, dim], &[readings.len()]));
        }
        let timestamps = (0..steps as i64).map(|t| t * STEP_MINUTES).collect();
        Ok(Self {
            node_ids,
            steps,
            dim,
            readings,
            timestamps,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// One node's `T x D` series.
    pub fn node_series(&self, node: usize) -> &[f64] {
        let per = self.steps * self.dim;
        &self.readings[node * per..(node + 1) * per]
    }

    pub fn select_nodes(&self, nodes: &[usize]) -> Self {
        let mut readings = Vec::with_capacity(nodes.len() * self.steps * self.dim);
        for &n in nodes {
            readings.extend_from_slice(self.node_series(n));
        }
        Self {
            node_ids: nodes.iter().map(|&n| self.node_ids[n].clone()).collect(),
            steps: self.steps,
            dim: self.dim,
            readings,
            timestamps: self.timestamps.clone(),
        }
    }

    /// Node order must match a graph's node order.
    pub fn check_nodes(&self, graph: &SensorGraph) -> Result<()> {
        if self.node_ids != graph.node_ids() {
            return Err(Error::Config("dataset columns do not match graph node order".into()));
        }
        Ok(())
    }

    /// CSV with a header of node ids and one row per timestep (`D = 1`).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let ids: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let n = ids.len();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != n {
                return Err(Error::dim("readings csv row", &[n], &[rec.len()]));
            }
            rows.push(
                rec.iter()
                    .map(|c| {
                        c.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad reading `{c}` in {}", path.display())))
                    })
                    .collect::<Result<_>>()?,
            );
        }
        let steps = rows.len();
        let mut readings = vec![0.0; n * steps];
        for (t, row) in rows.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                readings[i * steps + t] = *v;
            }
        }
        Self::new(ids, steps, 1, readings)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.dim != 1 {
            return Err(Error::Contract("csv export supports one feature per node".into()));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.node_ids)?;
        for t in 0..self.steps {
            w.write_record((0..self.n_nodes()).map(|i| format!("{}", self.readings[i * self.steps + t])))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowSpec {
    pub window: usize,
    pub input_steps: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window: 24,
            input_steps: 12,
            stride: 1,
        }
    }
}

impl WindowSpec {
    pub fn output_steps(&self) -> usize {
        self.window - self.input_steps
    }

    pub fn count(&self, steps: usize) -> usize {
        if steps < self.window {
            0
        } else {
            (steps - self.window) / self.stride + 1
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.input_steps == 0 || self.input_steps >= self.window {
            return Err(Error::Config(format!("invalid window spec {self:?}")));
        }
        Ok(())
    }
}

/// Sliding windows over a `T x D` series: the first `input_steps` frames of
/// each window are the input, the rest the target.
pub fn window(series: &[f64], dim: usize, spec: WindowSpec) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    spec.validate()?;
    let steps = series.len() / dim;
    if steps < spec.window {
        return Err(Error::Degenerate(format!(
            "series of {steps} steps is shorter than the window {}",
            spec.window
        )));
    }
    Ok((0..spec.count(steps))
        .map(|k| {
            let start = k * spec.stride;
            let mid = start + spec.input_steps;
            let end = start + spec.window;
            (
                series[start * dim..mid * dim].to_vec(),
                series[mid * dim..end * dim].to_vec(),
            )
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Chronological split; train and val are floored, the remainder is test.
pub fn split(n_windows: usize, ratios: (f64, f64, f64)) -> Result<SplitCounts> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let train = (a * n_windows as f64 + 1e-9).floor() as usize;
    let val = (b * n_windows as f64 + 1e-9).floor() as usize;
    let counts = SplitCounts {
        train,
        val,
        test: n_windows - train - val,
    };
    for (name, n) in [("train", counts.train), ("val", counts.val), ("test", counts.test)] {
        if n == 0 {
            return Err(Error::Degenerate(format!(
                "{name} split of {n_windows} windows is empty"
            )));
        }
    }
    Ok(counts)
}

/// One node's windows for one split, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeWindows {
    pub count: usize,
    pub input_steps: usize,
    pub output_steps: usize,
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl NodeWindows {
    /// `(x: B x m x D, y: B x n x D)` for the given window indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let (xs, ys) = (self.input_steps * self.dim, self.output_steps * self.dim);
        let mut x = Vec::with_capacity(idx.len() * xs);
        let mut y = Vec::with_capacity(idx.len() * ys);
        for &i in idx {
            x.extend_from_slice(&self.x[i * xs..(i + 1) * xs]);
            y.extend_from_slice(&self.y[i * ys..(i + 1) * ys]);
        }
        (
            Tensor::new(vec![idx.len(), self.input_steps, self.dim], x).expect("window shape"),
            Tensor::new(vec![idx.len(), self.output_steps, self.dim], y).expect("window shape"),
        )
    }
}

/// Normalized windows for every node, split chronologically.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub node_ids: Vec<String>,
    pub spec: WindowSpec,
    pub dim: usize,
    pub stats: NormStats,
    pub counts: SplitCounts,
    pub train: Vec<NodeWindows>,
    pub val: Vec<NodeWindows>,
    pub test: Vec<NodeWindows>,
}

impl WindowedDataset {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn split(&self, which: Split) -> &[NodeWindows] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Statistics from the readings covered by training windows only.
pub fn training_stats(ds: &SeriesDataset, spec: WindowSpec, counts: SplitCounts) -> Result<NormStats> {
    let end = (counts.train - 1) * spec.stride + spec.window;
    let d = ds.dim;
    NormStats::from_values((0..ds.n_nodes()).flat_map(|i| ds.node_series(i)[..end * d].iter()))
}

/// Window, split and normalize a dataset.
pub fn prepare(ds: &SeriesDataset, spec: WindowSpec, ratios: (f64, f64, f64)) -> Result<WindowedDataset> {
    spec.validate()?;
    let total = spec.count(ds.steps);
    if total == 0 {
        return Err(Error::Degenerate(format!(
            "series of {} steps is shorter than the window {}",
            ds.steps, spec.window
        )));
    }
    let counts = split(total, ratios)?;
    let stats = training_stats(ds, spec, counts)?;
    prepare_with_stats(ds, spec, counts, stats)
}

/// Window and normalize with externally fixed statistics and split sizes.
pub fn prepare_with_stats(
    ds: &SeriesDataset,
    spec: WindowSpec,
    counts: SplitCounts,
    stats: NormStats,
) -> Result<WindowedDataset> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for i in 0..ds.n_nodes() {
        let norm = normalize(ds.node_series(i), stats)?;
        let wins = window(&norm, ds.dim, spec)?;
        if wins.len() != counts.train + counts.val + counts.test {
            return Err(Error::Contract("split counts do not cover all windows".into()));
        }
        let pack = |slice: &[(Vec<f64>, Vec<f64>)]| NodeWindows {
            count: slice.len(),
            input_steps: spec.input_steps,
            output_steps: spec.output_steps(),
            dim: ds.dim,
            x: slice.iter().flat_map(|w| w.0.iter().copied()).collect(),
            y: slice.iter().flat_map(|w| w.1.iter().copied()).collect(),
        };
        let (a, rest) = wins.split_at(counts.train);
        let (b, c) = rest.split_at(counts.val);
        train.push(pack(a));
        val.push(pack(b));
        test.push(pack(c));
    }
    Ok(WindowedDataset {
        node_ids: ds.node_ids.clone(),
        spec,
        dim: ds.dim,
        stats,
        counts,
        train,
        val,
        test,
    })
}

/// RMSE after mapping both sides back to raw units.
pub fn rmse(pred: &[f64], target: &[f64], stats: NormStats) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("rmse", &[pred.len()], &[target.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Degenerate("rmse of nothing".into()));
    }
    let p = denormalize(pred, stats);
    let t = denormalize(target, stats);
    let mse = p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    Ok(mse.sqrt())
}

/// Parameters of the synthetic graph-diffusion process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub steps: usize,
    /// Innovation standard deviation.
    pub noise: f64,
    /// Amplitude of the shared daily sinusoid.
    pub daily_amplitude: f64,
    /// Period of the sinusoid in steps (288 five-minute steps per day).
    pub daily_period: f64,
    /// Constant offset added to every reading.
    pub level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            noise: 0.5,
            daily_amplitude: 1.0,
            daily_period: 288.0,
            level: 0.0,
        }
    }
}

/// Row-normalized adjacency; all-zero rows stay zero.
pub fn row_normalized(graph: &SensorGraph) -> Vec<f64> {
    let n = graph.len();
    let mut a = graph.adjacency().to_vec();
    for r in 0..n {
        let s: f64 = a[r * n..(r + 1) * n].iter().sum();
        if s > 0.0 {
            for v in &mut a[r * n..(r + 1) * n] {
                *v /= s;
            }
        }
    }
    a
}

/// The linear map `0.5 I + 0.4 A_hat` driving the synthetic process.
pub fn diffusion_matrix(graph: &SensorGraph) -> Vec<f64> {
    let n = graph.len();
    let mut m: Vec<f64> = row_normalized(graph).iter().map(|v| 0.4 * v).collect();
    for i in 0..n {
        m[i * n + i] += 0.5;
    }
    m
}

/// Graph-diffusion autoregressive series:
/// `s[t+1] = 0.5 s[t] + 0.4 A_hat s[t] + eps`, observed as
/// `level + s[t] + amplitude * sin(2 pi t / period)`.
pub fn synthesize(graph: &SensorGraph, cfg: &SynthConfig, seed: u64) -> Result<SeriesDataset> {
    if cfg.noise < 0.0 || !cfg.noise.is_finite() {
        return Err(Error::Config(format!(
            "noise {} must be finite and nonnegative",
            cfg.noise
        )));
    }
    if cfg.daily_period <= 0.0 {
        return Err(Error::Config("daily period must be positive".into()));
    }
    let n = graph.len();
    let m = diffusion_matrix(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut s: Vec<f64> = (0..n).map(|_| unit.sample(&mut rng)).collect();
    let mut readings = vec![0.0; n * cfg.steps];
    for t in 0..cfg.steps {
        let daily = cfg.daily_amplitude * (2.0 * std::f64::consts::PI * t as f64 / cfg.daily_period).sin();
        for i in 0..n {
            readings[i * cfg.steps + t] = cfg.level + s[i] + daily;
        }
        let mut next = vec![0.0; n];
        for (i, nv) in next.iter_mut().enumerate() {
            let drift: f64 = (0..n).map(|j| m[i * n + j] * s[j]).sum();
            *nv = drift + cfg.noise * unit.sample(&mut rng);
        }
        s = next;
    }
    SeriesDataset::new(graph.node_ids().to_vec(), cfg.steps, 1, readings)
}
