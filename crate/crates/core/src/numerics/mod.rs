//! Dense tensors, a recording computation graph, and optimizers.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, Optimizer, OptimizerKind};
pub use params::{Manifest, ManifestEntry, ParamSet};
pub use tensor::Tensor;

use rand::Rng;

/// Tensor with entries drawn uniformly from `[-bound, bound]`.
pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
