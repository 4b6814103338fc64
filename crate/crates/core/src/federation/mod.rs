//! Training strategies: federated averaging of node models, alternating
//! and split training of the server graph network, and the baselines.

mod client;
mod runner;
mod server;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{OptimizerKind, ParamSet, Tensor};

pub use client::{client_backward, client_encode, client_step, local_epoch};
pub use runner::{evaluate, run_strategy, FederationState, ModelDims, RoundRecord, RunOutcome, Trainer};
pub use server::{gn_grads_combined, gn_grads_per_node, server_batch, ServerBatch, TopologyCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Centralized,
    Local,
    FedavgOnly,
    Sl,
    SlFedavg,
    AtNoFedavg,
    AtFedavg,
    Fmtl,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Centralized,
        Strategy::Local,
        Strategy::FedavgOnly,
        Strategy::Sl,
        Strategy::SlFedavg,
        Strategy::AtNoFedavg,
        Strategy::AtFedavg,
        Strategy::Fmtl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Centralized => "centralized",
            Strategy::Local => "local",
            Strategy::FedavgOnly => "fedavg_only",
            Strategy::Sl => "sl",
            Strategy::SlFedavg => "sl_fedavg",
            Strategy::AtNoFedavg => "at_no_fedavg",
            Strategy::AtFedavg => "at_fedavg",
            Strategy::Fmtl => "fmtl",
        }
    }

    /// Centralized training pools raw data and is not federated.
    pub fn is_federated(self) -> bool {
        self != Strategy::Centralized
    }

    /// Whether the strategy trains a server-side graph network.
    pub fn uses_gn(self) -> bool {
        matches!(
            self,
            Strategy::Centralized | Strategy::Sl | Strategy::SlFedavg | Strategy::AtNoFedavg | Strategy::AtFedavg
        )
    }

    pub fn uses_fedavg(self) -> bool {
        matches!(self, Strategy::FedavgOnly | Strategy::SlFedavg | Strategy::AtFedavg)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub strategy: Strategy,
    pub global_rounds: usize,
    pub client_rounds: usize,
    pub server_rounds: usize,
    pub server_lr: f64,
    pub client_lr: f64,
    pub fmtl_lambda: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Stop after this many rounds without a new best validation RMSE.
    /// `None` always runs `global_rounds`.
    pub patience: Option<usize>,
    /// Window batch size used for evaluation only.
    pub eval_batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::AtFedavg,
            global_rounds: 100,
            client_rounds: 1,
            server_rounds: 1,
            server_lr: 1e-3,
            client_lr: 1e-3,
            fmtl_lambda: 0.1,
            seed: 0,
            batch_size: 128,
            optimizer: OptimizerKind::Adam,
            patience: Some(10),
            eval_batch_size: 512,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("global_rounds", self.global_rounds),
            ("client_rounds", self.client_rounds),
            ("server_rounds", self.server_rounds),
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("server_lr", self.server_lr), ("client_lr", self.client_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.fmtl_lambda >= 0.0 && self.fmtl_lambda.is_finite()) {
            return Err(Error::Config(format!(
                "fmtl_lambda must be nonnegative, got {}",
                self.fmtl_lambda
            )));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1 when set".into()));
        }
        Ok(())
    }
}

/// Weighted mean of parameter sets, `sum_i (N_i / N) theta_i`, reduced in
/// ascending index order.
pub fn fedavg(models: &[&ParamSet], counts: &[usize]) -> Result<ParamSet> {
    let first = *models
        .first()
        .ok_or_else(|| Error::Contract("fedavg of no models".into()))?;
    if models.len() != counts.len() {
        return Err(Error::dim("fedavg counts", &[models.len()], &[counts.len()]));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Contract("fedavg sample counts must be positive".into()));
    }
    for m in models {
        if !m.same_layout(first) {
            return Err(Error::dim("fedavg", &[first.numel()], &[m.numel()]));
        }
    }
    let total: usize = counts.iter().sum();
    let mut out = first.clone();
    for (k, t) in out.tensors_mut().iter_mut().enumerate() {
        let data = t.data_mut();
        data.fill(0.0);
        for (m, &c) in models.iter().zip(counts) {
            let w = c as f64 / total as f64;
            for (o, v) in data.iter_mut().zip(m.get(k).data()) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

fn check_adjacency(weights: &[Vec<f64>], adjacency: &[f64]) -> Result<usize> {
    let n = weights.len();
    if adjacency.len() != n * n {
        return Err(Error::dim("fmtl adjacency", &[n, n], &[adjacency.len()]));
    }
    if let Some(w) = weights.iter().find(|w| w.len() != weights[0].len()) {
        return Err(Error::dim("fmtl weights", &[weights[0].len()], &[w.len()]));
    }
    Ok(n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cluster regularizer `lambda * sum_i sum_{j != i} a_ij <w_i, w_i - w_j>`
/// over flattened node weights and a row-major adjacency.
pub fn fmtl_regularizer(weights: &[Vec<f64>], adjacency: &[f64], lambda: f64) -> Result<f64> {
    let n = check_adjacency(weights, adjacency)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = adjacency[i * n + j];
            if i != j && a != 0.0 {
                total += a * (dot(&weights[i], &weights[i]) - dot(&weights[i], &weights[j]));
            }
        }
    }
    Ok(lambda * total)
}

/// Gradient of [`fmtl_regularizer`] with respect to node `k`'s weights:
/// `lambda * (sum_j a_kj (2 w_k - w_j) - sum_i a_ik w_i)`.
pub fn fmtl_gradient(weights: &[Vec<f64>], adjacency: &[f64], lambda: f64, k: usize) -> Result<Vec<f64>> {
    let n = check_adjacency(weights, adjacency)?;
    let mut g = vec![0.0; weights[k].len()];
    for j in (0..n).filter(|&j| j != k) {
        let out = adjacency[k * n + j];
        let inc = adjacency[j * n + k];
        for (d, gv) in g.iter_mut().enumerate() {
            *gv += out * (2.0 * weights[k][d] - weights[j][d]) - inc * weights[j][d];
        }
    }
    for v in &mut g {
        *v *= lambda;
    }
    Ok(g)
}

/// Splits a flat vector into tensors shaped like `like`.
pub(crate) fn unflatten(like: &ParamSet, flat: &[f64]) -> Result<Vec<Tensor>> {
    let mut p = like.clone();
    p.assign_flat(flat)?;
    Ok(p.tensors().to_vec())
}

/// Independent random streams of the batch schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchStream {
    Client = 1,
    Server = 2,
}

/// Shuffled batches of `0..n` for one epoch, a pure function of
/// `(seed, stream, epoch)` so any run's schedule can be replayed.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, stream: BatchStream, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos(u128::from(epoch) << 20);
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::*;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn fedavg_examples() {
        let a = scalar_set(1.0);
        let b = scalar_set(3.0);
        let m = fedavg(&[&a, &b], &[1, 3]).unwrap();
        assert_eq!(m.get(0).data(), &[2.5]);
        assert_eq!(fedavg(&[&a], &[7]).unwrap(), a);
        assert_eq!(fedavg(&[&b, &b, &b], &[1, 2, 5]).unwrap().get(0).data(), &[3.0]);
        assert!(matches!(fedavg(&[], &[]), Err(Error::Contract(_))));
        let mut wide = ParamSet::new();
        wide.push("w", Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(fedavg(&[&a, &wide], &[1, 1]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn fmtl_examples() {
        let w = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let adj = [0.0, 1.0, 1.0, 0.0];
        assert!((fmtl_regularizer(&w, &adj, 0.1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(fmtl_regularizer(&w, &adj, 0.0).unwrap(), 0.0);
        let same = vec![vec![0.3, -2.0]; 2];
        assert_eq!(fmtl_regularizer(&same, &adj, 0.1).unwrap(), 0.0);
        assert!(matches!(
            fmtl_regularizer(&w, &[0.0; 9], 0.1),
            Err(Error::Dimension { .. })
        ));
    }

    proptest! {
        #[test]
        fn fmtl_gradient_matches_finite_differences(
            vals in prop::collection::vec(-2.0f64..2.0, 12),
            adj in prop::collection::vec(0.0f64..1.0, 9),
            k in 0usize..3,
            d in 0usize..4,
        ) {
            let w: Vec<Vec<f64>> = vals.chunks(4).map(|c| c.to_vec()).collect();
            let g = fmtl_gradient(&w, &adj, 0.1, k).unwrap();
            let eps = 1e-6;
            let mut up = w.clone();
            up[k][d] += eps;
            let mut dn = w.clone();
            dn[k][d] -= eps;
            let fd = (fmtl_regularizer(&up, &adj, 0.1).unwrap() - fmtl_regularizer(&dn, &adj, 0.1).unwrap()) / (2.0 * eps);
            prop_assert!((fd - g[d]).abs() < 1e-7, "{} vs {}", fd, g[d]);
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.as_str()));
        }
        assert!(matches!("gossip".parse::<Strategy>(), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        TrainingConfig::default().validate().unwrap();
        let bad = TrainingConfig {
            server_rounds: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainingConfig {
            client_lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batches_cover_each_index_once_and_replay() {
        let a = epoch_batches(103, 10, 7, BatchStream::Client, 3);
        assert_eq!(a.len(), 11);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(a, epoch_batches(103, 10, 7, BatchStream::Client, 3));
        assert_ne!(a, epoch_batches(103, 10, 7, BatchStream::Client, 4));
        assert_ne!(a, epoch_batches(103, 10, 7, BatchStream::Server, 3));
    }
}
