//! Named weight store with flat-binary checkpoints.
//!
//! Checkpoint layout: `manifest.json` (ordered list of name + shape) and
//! `weights.bin` (all values as little-endian f64, concatenated in
//! manifest order).

use std::collections::HashMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Default)]
pub struct Weights {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl Weights {
    pub fn new() -> Self {
        Weights::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate weight name {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown weight {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown weight {name}"))]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Load every weight onto a tape as a leaf; the returned map drives
    /// both forward passes and gradient reads after backward.
    pub fn stage(&self, tape: &mut Tape) -> StagedWeights {
        let mut vars = HashMap::with_capacity(self.names.len());
        for (name, tensor) in self.names.iter().zip(&self.tensors) {
            vars.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        StagedWeights { vars }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest: Vec<WeightEntry> = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| WeightEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect();
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        let mut bytes = Vec::with_capacity(self.param_count() * 8);
        for t in &self.tensors {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(dir.join("weights.bin"), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Vec<WeightEntry> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let bytes = std::fs::read(dir.join("weights.bin"))?;
        let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if bytes.len() != total * 8 {
            return Err(Error::data(format!(
                "weights.bin holds {} bytes, manifest wants {}",
                bytes.len(),
                total * 8
            )));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut weights = Weights::new();
        for entry in manifest {
            let numel: usize = entry.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(numel).collect();
            weights.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        Ok(weights)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
}

/// Tape handles for one staged copy of the weights.
pub struct StagedWeights {
    vars: HashMap<String, Var>,
}

impl StagedWeights {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("weight {name} not staged"))
    }

    /// Point a name at a different tape node; the gradient checks use this
    /// to differentiate with respect to one chosen weight.
    pub fn set_var(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}

/// Uniform(−1/√fan_in, +1/√fan_in) initialization, seeded.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn linear(&mut self, w: &mut Weights, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wdata: Vec<f64> =
            (0..fan_in * fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        w.insert(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, wdata).unwrap());
        let bdata: Vec<f64> = (0..fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        w.insert(format!("{prefix}.b"), Tensor::vector(bdata));
    }

    pub fn layer_norm(&mut self, w: &mut Weights, prefix: &str, d: usize) {
        w.insert(format!("{prefix}.g"), Tensor::vector(vec![1.0; d]));
        w.insert(format!("{prefix}.b"), Tensor::vector(vec![0.0; d]));
    }

    pub fn attention(&mut self, w: &mut Weights, prefix: &str, d: usize) {
        for part in ["wq", "wk", "wv", "wo"] {
            self.linear(w, &format!("{prefix}.{part}"), d, d);
        }
    }

    pub fn mlp(&mut self, w: &mut Weights, prefix: &str, d: usize) {
        self.linear(w, &format!("{prefix}.fc1"), d, 4 * d);
        self.linear(w, &format!("{prefix}.fc2"), 4 * d, d);
    }

    /// Pre-norm transformer block: ln1 + self-attention, ln2 + MLP.
    pub fn block(&mut self, w: &mut Weights, prefix: &str, d: usize) {
        self.layer_norm(w, &format!("{prefix}.ln1"), d);
        self.attention(w, &format!("{prefix}.attn"), d);
        self.layer_norm(w, &format!("{prefix}.ln2"), d);
        self.mlp(w, &format!("{prefix}.mlp"), d);
    }

    pub fn tensor(&mut self, w: &mut Weights, name: &str, shape: Vec<usize>, fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| self.rng.random_range(-bound..bound)).collect();
        w.insert(name, Tensor::new(shape, data).unwrap());
    }
}
