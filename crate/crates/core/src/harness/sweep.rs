//! Hyper-parameter and data-amount sweeps over bridge training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::{AdapterVariant, Placement};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::harness::eval::{evaluate, EvalOptions, EvalReport, System, SystemKind, SystemModel};
use crate::harness::train::BridgeTrainer;
use crate::harness::TrainConfig;

pub const SWEEP_SCHEMA: &str = "e2timt-sweep/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Contrastive weight grid; mirrors {0, 0.2, 0.4, 0.6, 0.8, 1.0}.
    LambdaCmc,
    /// Training-pairs grid; mirrors {500, 1k, 2k, 5k, 10k}.
    TimtN,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lambda-cmc" => Ok(SweepParam::LambdaCmc),
            "timt-n" => Ok(SweepParam::TimtN),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::LambdaCmc => "lambda-cmc",
            SweepParam::TimtN => "timt-n",
        }
    }

    pub fn default_grid(&self) -> Vec<f64> {
        match self {
            SweepParam::LambdaCmc => vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            SweepParam::TimtN => vec![500.0, 1000.0, 2000.0, 5000.0, 10000.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub param: String,
    pub placement: Placement,
    pub budget_steps: usize,
    pub entries: Vec<SweepEntry>,
}

/// Train one bridge per grid point (fresh adapter, same seed) and evaluate
/// it on the held-out corpus.
pub fn run_sweep(
    param: SweepParam,
    grid: &[f64],
    base: &TrainConfig,
    ocr_ckpt: &Path,
    mt_ckpt: &Path,
    timt: &Corpus,
    eval_corpus: &Corpus,
    placement: Placement,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let opts = EvalOptions {
        max_len: base.max_len,
        seed: base.seed,
        ..EvalOptions::default()
    };
    let mut entries = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut cfg = base.clone();
        let train_slice: Corpus;
        let train_ref: &Corpus = match param {
            SweepParam::LambdaCmc => {
                cfg.lambda_cmc = value;
                timt
            }
            SweepParam::TimtN => {
                let n = value as usize;
                if n == 0 || n > timt.len() {
                    return Err(Error::Config(format!(
                        "sweep point {n} exceeds the {} available training pairs",
                        timt.len()
                    )));
                }
                train_slice = Corpus {
                    split: timt.split.clone(),
                    seed: timt.seed,
                    noise: timt.noise,
                    examples: timt.examples[..n].to_vec(),
                };
                &train_slice
            }
        };
        let mut trainer = BridgeTrainer::new(
            cfg.clone(),
            ocr_ckpt,
            mt_ckpt,
            placement,
            AdapterVariant::SelfAttention,
        )?;
        trainer.run(train_ref, cfg.steps)?;
        let kind = match placement {
            Placement::Emb => SystemKind::BridgedEmb,
            Placement::Seq => SystemKind::BridgedSeq,
        };
        let system = System {
            kind,
            arena: trainer.arena,
            model: SystemModel::Bridged(trainer.model),
        };
        entries.push(SweepEntry {
            value,
            report: evaluate(&system, eval_corpus, &opts)?,
        });
    }
    Ok(SweepReport {
        schema: SWEEP_SCHEMA.to_string(),
        param: param.name().to_string(),
        placement,
        budget_steps: base.steps,
        entries,
    })
}
