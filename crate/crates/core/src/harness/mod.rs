//! Training loops, the freezing policy, evaluation metrics and reports,
//! parameter/latency ledgers, system comparison, sweeps, and checkpoints.

pub mod adam;
pub mod bench;
pub mod checkpoint;
pub mod compare;
pub mod eval;
pub mod metrics;
pub mod sweep;
pub mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::ModelDims;
use crate::error::{Error, Result};
use crate::params::ParamArena;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn dims(self) -> ModelDims {
        match self {
            Preset::Desk => ModelDims {
                d: 128,
                heads: 4,
                enc_layers: 2,
                dec_layers: 2,
            },
            Preset::Paper => ModelDims {
                d: 512,
                heads: 8,
                enc_layers: 2,
                dec_layers: 2,
            },
        }
    }

    pub fn batch(self) -> usize {
        match self {
            Preset::Desk => 32,
            Preset::Paper => 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub dropout: f64,
    pub clip_norm: f64,
    pub lambda_cmc: f64,
    pub tau: f64,
    pub adapter_layers: usize,
    pub bottleneck_r: usize,
    /// Greedy-decode cap at evaluation time.
    pub max_len: usize,
}

impl TrainConfig {
    pub fn new(preset: Preset) -> Self {
        Self {
            preset,
            lr: 2e-3,
            steps: 1000,
            batch: preset.batch(),
            seed: 0,
            dropout: 0.1,
            clip_norm: 1.0,
            lambda_cmc: 0.4,
            tau: 0.1,
            adapter_layers: crate::bridge::DEFAULT_ADAPTER_LAYERS,
            bottleneck_r: crate::bridge::DEFAULT_BOTTLENECK_DIM,
            max_len: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.steps < 1 {
            return Err(Error::Config("step budget must be at least 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.lambda_cmc) {
            return Err(Error::Config(format!(
                "lambda_cmc {} outside [0, 1]",
                self.lambda_cmc
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if self.max_len < 1 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        self.preset.dims()
    }
}

/// Named parameter set excluded from optimizer updates during a training
/// phase.
#[derive(Debug, Clone, Default)]
pub struct FreezePolicy {
    pub frozen_prefixes: Vec<String>,
}

impl FreezePolicy {
    /// The bridge-training policy: every backbone tensor frozen, adapters
    /// trainable.
    pub fn bridge() -> Self {
        Self {
            frozen_prefixes: vec!["ocr.".into(), "mt.".into()],
        }
    }

    pub fn apply<T: Element>(&self, arena: &mut ParamArena<T>) {
        for prefix in &self.frozen_prefixes {
            arena.set_trainable_prefix(prefix, false);
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p))
    }
}

/// SHA-256 of each parameter whose name satisfies the predicate, in arena
/// order. Used to prove frozen tensors are byte-identical across training.
pub fn sha256_digests<T: Element>(
    arena: &ParamArena<T>,
    mut pred: impl FnMut(&str) -> bool,
) -> Vec<(String, String)> {
    arena
        .iter()
        .filter(|(_, e)| pred(&e.name))
        .map(|(_, e)| {
            let mut hasher = Sha256::new();
            let mut bytes = Vec::with_capacity(e.tensor.numel() * T::BYTES);
            for v in e.tensor.values() {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
            (e.name.clone(), format!("{:x}", hasher.finalize()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(Preset::Desk);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.batch, 32);
        assert_eq!(cfg.dims().d, 128);
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(Preset::Paper);
        assert_eq!(cfg.batch, 64);
        assert_eq!(cfg.dims().d, 512);
        cfg.lambda_cmc = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digests_change_with_values() {
        let mut arena = ParamArena::<f32>::new();
        let id = arena.insert("ocr.w", Tensor::zeros(vec![4]));
        arena.insert("adapter.w", Tensor::zeros(vec![2]));
        let before = sha256_digests(&arena, |n| n.starts_with("ocr."));
        assert_eq!(before.len(), 1);
        arena.tensor_mut(id).values_mut()[0] = 1.0;
        let after = sha256_digests(&arena, |n| n.starts_with("ocr."));
        assert_ne!(before, after);
    }

    #[test]
    fn freeze_policy_marks_backbones() {
        let mut arena = ParamArena::<f32>::new();
        arena.insert("ocr.w", Tensor::zeros(vec![4]));
        arena.insert("mt.w", Tensor::zeros(vec![4]));
        arena.insert("adapter.w", Tensor::zeros(vec![2]));
        FreezePolicy::bridge().apply(&mut arena);
        assert_eq!(arena.trainable_names(), vec!["adapter.w"]);
    }
}
