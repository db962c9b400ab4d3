//! One-command comparison of every system under equal training budgets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::Result;
use crate::harness::eval::{
    evaluate, EvalOptions, EvalReport, System, SystemKind, SystemModel,
};
use crate::harness::train::{
    BridgeTrainer, EndToEndInit, EndToEndTrainer, VanillaTrainer,
};
use crate::harness::TrainConfig;
use crate::bridge::{AdapterVariant, Placement};

pub const COMPARE_SCHEMA: &str = "e2timt-compare/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareEntry {
    pub system: SystemKind,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema: String,
    pub budget_steps: usize,
    pub timt_sentences: usize,
    pub seeds: Vec<u64>,
    pub entries: Vec<CompareEntry>,
}

impl ComparisonReport {
    pub fn bleu_of(&self, kind: SystemKind, seed: u64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.system == kind && e.seed == seed)
            .map(|e| e.report.bleu)
    }
}

/// Train bridged (both placements), vanilla-adapter, fine-tune, and scratch
/// systems for `base.steps` steps per seed, evaluate them alongside the
/// cascade, and collect everything into one report.
pub fn run_comparison(
    base: &TrainConfig,
    ocr_ckpt: &Path,
    mt_ckpt: &Path,
    timt: &Corpus,
    eval_corpus: &Corpus,
    seeds: &[u64],
) -> Result<ComparisonReport> {
    let mut entries = Vec::new();
    let opts = EvalOptions {
        max_len: base.max_len,
        seed: base.seed,
        ..EvalOptions::default()
    };

    // The cascade needs no adapter training; evaluate it once.
    let cascade = crate::harness::eval::load_system(
        SystemKind::Cascade,
        None,
        Some(ocr_ckpt),
        Some(mt_ckpt),
    )?;
    entries.push(CompareEntry {
        system: SystemKind::Cascade,
        seed: seeds.first().copied().unwrap_or(0),
        report: evaluate(&cascade, eval_corpus, &opts)?,
    });

    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let per_seed_opts = EvalOptions { seed, ..opts };

        for (kind, placement) in [
            (SystemKind::BridgedEmb, Placement::Emb),
            (SystemKind::BridgedSeq, Placement::Seq),
        ] {
            let mut trainer = BridgeTrainer::new(
                cfg.clone(),
                ocr_ckpt,
                mt_ckpt,
                placement,
                AdapterVariant::SelfAttention,
            )?;
            trainer.run(timt, cfg.steps)?;
            let system = System {
                kind,
                arena: trainer.arena,
                model: SystemModel::Bridged(trainer.model),
            };
            entries.push(CompareEntry {
                system: kind,
                seed,
                report: evaluate(&system, eval_corpus, &per_seed_opts)?,
            });
        }

        let mut vanilla = VanillaTrainer::new(cfg.clone(), ocr_ckpt, mt_ckpt)?;
        vanilla.run(timt, cfg.steps)?;
        let system = System {
            kind: SystemKind::VanillaAdapter,
            arena: vanilla.arena,
            model: SystemModel::Vanilla(vanilla.model),
        };
        entries.push(CompareEntry {
            system: SystemKind::VanillaAdapter,
            seed,
            report: evaluate(&system, eval_corpus, &per_seed_opts)?,
        });

        for (kind, init) in [
            (SystemKind::Finetune, EndToEndInit::Finetune),
            (SystemKind::Scratch, EndToEndInit::Scratch),
        ] {
            let backbones = match init {
                EndToEndInit::Finetune => Some((ocr_ckpt, mt_ckpt)),
                EndToEndInit::Scratch => None,
            };
            let mut trainer = EndToEndTrainer::new(cfg.clone(), init, backbones)?;
            trainer.run(timt, cfg.steps)?;
            let system = System {
                kind,
                arena: trainer.arena,
                model: SystemModel::Bridged(trainer.model),
            };
            entries.push(CompareEntry {
                system: kind,
                seed,
                report: evaluate(&system, eval_corpus, &per_seed_opts)?,
            });
        }
    }

    Ok(ComparisonReport {
        schema: COMPARE_SCHEMA.to_string(),
        budget_steps: base.steps,
        timt_sentences: timt.len(),
        seeds: seeds.to_vec(),
        entries,
    })
}
