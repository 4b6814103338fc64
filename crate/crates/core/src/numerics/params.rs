use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered, named collection of trainable tensors.
///
/// The order is the checkpoint order and the order in which optimizers and
/// federated averaging walk the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// One entry of a checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the flat buffer, in elements.
    pub offset: usize,
}

/// JSON sidecar describing a flat little-endian `f64` checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub endianness: String,
    pub total_elements: usize,
    pub tensors: Vec<ManifestEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its position.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Payload size when shipped as 64-bit floats.
    pub fn byte_size(&self) -> u64 {
        self.numel() as u64 * 8
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Records every tensor as a constant (frozen) leaf.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Collects gradients for vars produced by [`ParamSet::bind`].
    pub fn collect_grads(g: &Graph, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| grads.wrt(g, v)).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites all values from a flat buffer in parameter order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::dim("assign_flat", &[self.numel()], &[flat.len()]));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        Manifest {
            dtype: "f64".into(),
            endianness: "little".into(),
            total_elements: offset,
            tensors,
        }
    }

    /// Writes `<stem>.bin` (flat little-endian f64) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let mut bytes = Vec::with_capacity(self.numel() * 8);
        for v in self.flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&json, manifest).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != manifest.total_elements * 8 {
            return Err(Error::Contract(format!(
                "checkpoint {} holds {} bytes, manifest expects {}",
                bin.display(),
                bytes.len(),
                manifest.total_elements * 8
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut set = ParamSet::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = flat
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Contract(format!("tensor {} overruns checkpoint", e.name)))?
                .to_vec();
            set.push(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(set)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}
