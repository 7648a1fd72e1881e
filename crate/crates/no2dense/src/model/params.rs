//! Ordered parameter store with explicit, seeded initialization.
//!
//! Parameters are created in construction order from a caller-supplied rng,
//! so two models built with the same config and seed are bit-identical.
//! Buffers (batch-norm running statistics) live alongside trainable
//! parameters and are checkpointed with them, but are never handed to the
//! optimizer.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub struct ParamStore {
    device: Device,
    trainable: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        ParamStore {
            device,
            trainable: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn check_fresh(&self, name: &str) -> Result<()> {
        if self.trainable.iter().any(|(n, _)| n == name)
            || self.buffers.iter().any(|(n, _)| n == name)
        {
            return Err(Error::Checkpoint(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    /// Registers a trainable tensor initialized from `values`.
    pub fn param(&mut self, name: &str, shape: &[usize], values: Vec<f32>) -> Result<Tensor> {
        self.check_fresh(name)?;
        let tensor = Tensor::from_vec(values, shape, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        let handle = var.as_tensor().clone();
        self.trainable.push((name.to_string(), var));
        Ok(handle)
    }

    /// Registers a non-trainable buffer (running statistics).
    pub fn buffer(&mut self, name: &str, shape: &[usize], fill: f32) -> Result<Var> {
        self.check_fresh(name)?;
        let tensor = Tensor::full(fill, shape, &self.device)?.to_dtype(DType::F32)?;
        let var = Var::from_tensor(&tensor)?;
        self.buffers.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }

    /// Total number of trainable scalar parameters.
    pub fn num_params(&self) -> usize {
        self.trainable
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.trainable
            .iter()
            .chain(self.buffers.iter())
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    fn all_tensors(&self) -> HashMap<String, Tensor> {
        self.trainable
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Serializes all parameters and buffers to a safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.all_tensors(), path)?;
        Ok(())
    }

    /// Loads parameter values in place. Every stored name must be present
    /// with a matching shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in self.trainable.iter().chain(self.buffers.iter()) {
            let tensor = loaded.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {name} missing from {}", path.display()))
            })?;
            if tensor.dims() != var.as_tensor().dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    tensor.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(tensor)?;
        }
        Ok(())
    }

    /// Sha256 of the serialized parameter file, hex-encoded.
    pub fn content_hash(path: &Path) -> Result<String> {
        let bytes = std::fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// He-normal initialization for a conv weight of the given shape.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
        .collect()
}

pub fn zeros(shape: &[usize]) -> Vec<f32> {
    vec![0f32; shape.iter().product()]
}

pub fn ones(shape: &[usize]) -> Vec<f32> {
    vec![1f32; shape.iter().product()]
}
