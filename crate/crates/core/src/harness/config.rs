//! Experiment configuration: JSON file, defaults, and flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{ModelDims, Strategy, TrainingConfig};
use crate::graphs::DEFAULT_KAPPA;
use crate::pipeline::{SynthConfig, WindowSpec};

/// Where readings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// One column per node, one row per 5-minute step.
    Csv { readings: PathBuf },
    /// Graph-diffusion process generated on the configured graph.
    Synthetic(SynthConfig),
}

/// Where the sensor graph comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSource {
    /// Pairwise distance CSV plus optional coordinates CSV.
    Distances {
        distances: PathBuf,
        #[serde(default)]
        coords: Option<PathBuf>,
        #[serde(default = "default_kappa")]
        kappa: f64,
    },
    /// Random sensor positions with k-nearest-neighbour road distances.
    RandomLayout {
        nodes: usize,
        neighbours: usize,
        #[serde(default = "default_kappa")]
        kappa: f64,
    },
}

fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

/// Grid of client and server round counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub client_rounds: Vec<usize>,
    pub server_rounds: Vec<usize>,
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &rc in &self.client_rounds {
            for &rs in &self.server_rounds {
                out.push((rc, rs));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub graph: GraphSource,
    pub training: TrainingConfig,
    pub model: ModelDims,
    pub window: WindowSpec,
    /// Train, validation and test fractions of the windows.
    pub split: (f64, f64, f64),
    /// Fraction of westernmost nodes used for training in inductive runs.
    pub eta: Option<f64>,
    pub sweep: Option<SweepGrid>,
    pub output_dir: PathBuf,
    /// Seeds the graph layout, the synthetic data and training.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SynthConfig::default()),
            graph: GraphSource::RandomLayout {
                nodes: 20,
                neighbours: 8,
                kappa: DEFAULT_KAPPA,
            },
            training: TrainingConfig::default(),
            model: ModelDims::default(),
            window: WindowSpec::default(),
            split: (0.7, 0.1, 0.2),
            eta: None,
            sweep: None,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub strategy: Option<Strategy>,
    pub eta: Option<f64>,
    pub client_rounds: Option<usize>,
    pub server_rounds: Option<usize>,
}

impl ExperimentConfig {
    /// Reads a JSON config. Relative data paths are taken relative to the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::Csv { readings } = &mut cfg.dataset {
            rebase(readings);
        }
        if let GraphSource::Distances { distances, coords, .. } = &mut cfg.graph {
            rebase(distances);
            if let Some(c) = coords {
                rebase(c);
            }
        }
        Ok(cfg)
    }

    /// File (or defaults) plus overrides; the top-level seed is copied into
    /// the training config.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.output_dir {
            self.output_dir = p.clone();
        }
        if let Some(s) = o.strategy {
            self.training.strategy = s;
        }
        if let Some(e) = o.eta {
            self.eta = Some(e);
        }
        if let Some(r) = o.client_rounds {
            self.training.client_rounds = r;
        }
        if let Some(r) = o.server_rounds {
            self.training.server_rounds = r;
        }
        self.training.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.model.validate()?;
        if self.window.stride == 0 || self.window.input_steps == 0 || self.window.input_steps >= self.window.window {
            return Err(Error::Config(format!("invalid window {:?}", self.window)));
        }
        if self.window.output_steps() != self.model.temporal.horizon {
            return Err(Error::Config(format!(
                "window predicts {} steps but the model horizon is {}",
                self.window.output_steps(),
                self.model.temporal.horizon
            )));
        }
        if let Some(e) = self.eta {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::Config(format!("eta {e} must be in (0, 1]")));
            }
        }
        if let Some(g) = &self.sweep {
            if g.cells().is_empty() {
                return Err(Error::Config("sweep grid is empty".into()));
            }
            if g.client_rounds.iter().chain(&g.server_rounds).any(|&r| r == 0) {
                return Err(Error::Config("sweep round counts must be at least 1".into()));
            }
        }
        match &self.graph {
            GraphSource::RandomLayout { nodes, .. } if *nodes == 0 => {
                return Err(Error::Config("graph needs at least one node".into()))
            }
            GraphSource::Distances { kappa, .. } | GraphSource::RandomLayout { kappa, .. }
                if !(*kappa > 0.0 && *kappa <= 1.0) =>
            {
                return Err(Error::Config(format!("kappa {kappa} must be in (0, 1]")))
            }
            _ => {}
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.steps < self.window.window {
                return Err(Error::Config("synthetic series is shorter than one window".into()));
            }
        }
        let (a, b, c) = self.split;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split {:?} must be positive and sum to 1",
                self.split
            )));
        }
        Ok(())
    }
}
