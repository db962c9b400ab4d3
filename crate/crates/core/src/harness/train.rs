//! Training loops: backbone pretraining (OCR, MT), modal-adapter bridge
//! training under the joint translation + contrastive objective, and the
//! fine-tune / scratch / vanilla-adapter baselines.
//!
//! Every loop is a pure function of (config, seed, corpus bytes): batch
//! indices, dropout masks, and initialization all come from named counter
//! streams keyed by the absolute step, so runs are bitwise reproducible and
//! chunked runs match single runs. Within a step, per-sample tapes run in
//! parallel and their gradients are reduced in slot order.
//!
//! The bridge step stitches two tape levels: per-sample tapes produce the
//! teacher-forced NLL and the pooled adapter vector; one small joint tape
//! computes the contrastive loss over the pooled batch; its cotangents seed
//! the per-sample backward passes together with the translation weight.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::backbones::{MtModel, OcrModel, Probes, EOS};
use crate::bridge::{AdapterVariant, BridgedModel, ModalAdapter, Placement, VanillaAdapterModel};
use crate::data::{self, Corpus};
use crate::error::{Error, Result};
use crate::harness::adam::{Adam, GradAccumulator};
use crate::harness::checkpoint::{
    apply_entries, load_checkpoint, save_checkpoint, CheckpointMeta,
};
use crate::harness::{FreezePolicy, TrainConfig};
use crate::nn::DropoutState;
use crate::objectives::{cmc_loss, combined_loss, pool_sequence, timt_loss_sum, LossReport, LossWeights};
use crate::params::ParamArena;
use crate::rng::RngStream;
use crate::tensor::tape::{Tape, TensorId};

fn batch_indices(seed: u64, step: usize, corpus_len: usize, batch: usize) -> Vec<usize> {
    let take = batch.min(corpus_len);
    RngStream::new(seed, &format!("batch.{step}")).sample_distinct(corpus_len, take)
}

fn dropout_for(cfg: &TrainConfig, step: usize, slot: usize) -> Option<DropoutState> {
    if cfg.dropout == 0.0 {
        return None;
    }
    Some(DropoutState::new(
        cfg.dropout,
        RngStream::new(cfg.seed, &format!("dropout.{step}.{slot}")),
    ))
}

/// One supervised step: per-sample forward/backward in parallel, gradients
/// reduced in slot order and scaled to the per-token mean. Returns the mean
/// NLL.
fn supervised_step<F>(
    arena: &ParamArena<f32>,
    cfg: &TrainConfig,
    step: usize,
    corpus_len: usize,
    forward: F,
) -> Result<(GradAccumulator<f32>, f64)>
where
    F: Fn(&mut Tape<f32>, usize, Option<&mut DropoutState>) -> Result<(TensorId, usize)> + Sync,
{
    let indices = batch_indices(cfg.seed, step, corpus_len, cfg.batch);
    let per_sample: Vec<Result<(Tape<f32>, f64, usize)>> = indices
        .par_iter()
        .enumerate()
        .map(|(slot, &idx)| {
            let mut tape = Tape::new();
            let mut dropout = dropout_for(cfg, step, slot);
            let (nll, count) = forward(&mut tape, idx, dropout.as_mut())?;
            let value = f64::from(tape.scalar_value(nll));
            tape.backward(nll)?;
            Ok((tape, value, count))
        })
        .collect();

    let mut grads = GradAccumulator::new(arena.len());
    let mut nll_total = 0.0;
    let mut tokens = 0usize;
    for r in per_sample {
        let (tape, value, count) = r?;
        grads.add_tape(&tape);
        nll_total += value;
        tokens += count;
    }
    grads.scale(1.0 / tokens as f64);
    Ok((grads, nll_total / tokens as f64))
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { step });
    }
    Ok(())
}

// ---- OCR ------------------------------------------------------------------------

pub struct OcrTrainer {
    pub arena: ParamArena<f32>,
    pub model: OcrModel,
    pub cfg: TrainConfig,
    pub step: usize,
    pub log: Vec<(usize, f64)>,
    adam: Adam<f32>,
}

impl OcrTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut arena = ParamArena::new();
        let init = RngStream::new(cfg.seed, "init.ocr");
        let model = OcrModel::build(&mut arena, "ocr", cfg.dims(), data::source_vocab(), &init)?;
        let adam = Adam::new(cfg.lr, arena.len());
        Ok(Self {
            arena,
            model,
            cfg,
            step: 0,
            log: Vec::new(),
            adam,
        })
    }

    /// Advance `steps` optimizer steps; resumable and chunk-invariant.
    pub fn run(&mut self, corpus: &Corpus, steps: usize) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::Input("OCR training corpus is empty".into()));
        }
        for _ in 0..steps {
            let (mut grads, loss) = supervised_step(
                &self.arena,
                &self.cfg,
                self.step,
                corpus.len(),
                |tape, idx, mut dropout| {
                    let ex = &corpus.examples[idx];
                    let mut probes = Probes::default();
                    let e = self.model.encode_image(tape, &self.arena, &ex.image, &mut probes)?;
                    let s = self.model.encode_image_sequence(
                        tape,
                        &self.arena,
                        e,
                        dropout.as_deref_mut(),
                        &mut probes,
                    )?;
                    let mut gold = ex.source.ids.clone();
                    gold.push(EOS);
                    let logits = self.model.dec.logits(
                        tape,
                        &self.arena,
                        s.id,
                        &gold,
                        dropout.as_deref_mut(),
                        &mut probes,
                    )?;
                    timt_loss_sum(tape, logits, &gold)
                },
            )?;
            check_finite(loss, self.step)?;
            self.adam.step(&mut self.arena, &mut grads, self.cfg.clip_norm)?;
            self.log.push((self.step, loss));
            self.step += 1;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta::new("ocr", self.cfg.dims(), self.cfg.seed);
        save_checkpoint(path, &self.arena, &["ocr."], &meta)
    }
}

// ---- MT -------------------------------------------------------------------------

pub struct MtTrainer {
    pub arena: ParamArena<f32>,
    pub model: MtModel,
    pub cfg: TrainConfig,
    pub step: usize,
    pub log: Vec<(usize, f64)>,
    adam: Adam<f32>,
}

impl MtTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut arena = ParamArena::new();
        let init = RngStream::new(cfg.seed, "init.mt");
        let model = MtModel::build(
            &mut arena,
            "mt",
            cfg.dims(),
            data::source_vocab(),
            data::target_vocab(),
            &init,
        )?;
        let adam = Adam::new(cfg.lr, arena.len());
        Ok(Self {
            arena,
            model,
            cfg,
            step: 0,
            log: Vec::new(),
            adam,
        })
    }

    pub fn run(&mut self, corpus: &Corpus, steps: usize) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::Input("MT training corpus is empty".into()));
        }
        for _ in 0..steps {
            let (mut grads, loss) = supervised_step(
                &self.arena,
                &self.cfg,
                self.step,
                corpus.len(),
                |tape, idx, mut dropout| {
                    let ex = &corpus.examples[idx];
                    let mut probes = Probes::default();
                    let e = self.model.embed_text(tape, &self.arena, &ex.source)?;
                    let s = self.model.encode_text(
                        tape,
                        &self.arena,
                        e,
                        dropout.as_deref_mut(),
                        &mut probes,
                    )?;
                    let mut gold = ex.target.ids.clone();
                    gold.push(EOS);
                    let logits = self.model.dec.logits(
                        tape,
                        &self.arena,
                        s.id,
                        &gold,
                        dropout.as_deref_mut(),
                        &mut probes,
                    )?;
                    timt_loss_sum(tape, logits, &gold)
                },
            )?;
            check_finite(loss, self.step)?;
            self.adam.step(&mut self.arena, &mut grads, self.cfg.clip_norm)?;
            self.log.push((self.step, loss));
            self.step += 1;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta::new("mt", self.cfg.dims(), self.cfg.seed);
        save_checkpoint(path, &self.arena, &["mt."], &meta)
    }
}

// ---- backbone loading -------------------------------------------------------------

/// Rebuild both backbones in one arena from their checkpoints and attach a
/// fresh adapter. Dims come from the OCR checkpoint metadata and must match
/// the MT one.
pub fn load_bridged(
    ocr_ckpt: &Path,
    mt_ckpt: &Path,
    cfg: &TrainConfig,
    placement: Placement,
    variant: AdapterVariant,
) -> Result<(ParamArena<f32>, BridgedModel)> {
    let ocr_loaded = load_checkpoint::<f32>(ocr_ckpt)?;
    let mt_loaded = load_checkpoint::<f32>(mt_ckpt)?;
    if ocr_loaded.meta.dims != mt_loaded.meta.dims {
        return Err(Error::Checkpoint(format!(
            "backbone dims differ: OCR {:?} vs MT {:?}",
            ocr_loaded.meta.dims, mt_loaded.meta.dims
        )));
    }
    let dims = ocr_loaded.meta.dims;
    let mut arena = ParamArena::new();
    let init = RngStream::new(cfg.seed, "init.bridge");
    let ocr = OcrModel::build(&mut arena, "ocr", dims, data::source_vocab(), &init)?;
    let mt = MtModel::build(
        &mut arena,
        "mt",
        dims,
        data::source_vocab(),
        data::target_vocab(),
        &init,
    )?;
    let adapter = ModalAdapter::build(
        &mut arena,
        "adapter",
        variant,
        cfg.adapter_layers,
        dims.d,
        dims.heads,
        cfg.bottleneck_r,
        &init,
    )?;
    apply_entries(&mut arena, &ocr_loaded.entries)?;
    apply_entries(&mut arena, &mt_loaded.entries)?;
    Ok((
        arena,
        BridgedModel {
            ocr,
            mt,
            adapter,
            placement,
        },
    ))
}

// ---- bridge ------------------------------------------------------------------------

struct BridgeSample {
    tape: Tape<f32>,
    nll_node: TensorId,
    nll_value: f64,
    tokens: usize,
    pooled_node: TensorId,
    pooled_values: Vec<f32>,
    target_values: Vec<f32>,
}

pub struct BridgeTrainer {
    pub arena: ParamArena<f32>,
    pub model: BridgedModel,
    pub cfg: TrainConfig,
    pub step: usize,
    pub log: Vec<(usize, LossReport)>,
    adam: Adam<f32>,
    refs: (PathBuf, PathBuf),
}

impl BridgeTrainer {
    pub fn new(
        cfg: TrainConfig,
        ocr_ckpt: &Path,
        mt_ckpt: &Path,
        placement: Placement,
        variant: AdapterVariant,
    ) -> Result<Self> {
        cfg.validate()?;
        let (mut arena, model) = load_bridged(ocr_ckpt, mt_ckpt, &cfg, placement, variant)?;
        FreezePolicy::bridge().apply(&mut arena);
        let adam = Adam::new(cfg.lr, arena.len());
        Ok(Self {
            arena,
            model,
            cfg,
            step: 0,
            log: Vec::new(),
            adam,
            refs: (ocr_ckpt.to_path_buf(), mt_ckpt.to_path_buf()),
        })
    }

    pub fn run(&mut self, corpus: &Corpus, steps: usize) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::Input("bridge training corpus is empty".into()));
        }
        let weights = LossWeights::new(self.cfg.lambda_cmc)?;
        for _ in 0..steps {
            let report = self.one_step(corpus, &weights)?;
            check_finite(report.l_all, self.step)?;
            self.log.push((self.step, report));
            self.step += 1;
        }
        Ok(())
    }

    fn one_step(&mut self, corpus: &Corpus, weights: &LossWeights) -> Result<LossReport> {
        let indices = batch_indices(self.cfg.seed, self.step, corpus.len(), self.cfg.batch);
        let step = self.step;

        // Stage A: per-sample forward passes (parallel).
        let samples: Vec<Result<BridgeSample>> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let mut tape = Tape::new();
                let mut dropout = dropout_for(&self.cfg, step, slot);
                let ex = &corpus.examples[idx];
                let (nll, tokens, pooled, target) =
                    self.forward_parts(&mut tape, ex, dropout.as_mut())?;
                Ok(BridgeSample {
                    nll_value: f64::from(tape.scalar_value(nll)),
                    pooled_values: tape.values(pooled).to_vec(),
                    target_values: tape.values(target).to_vec(),
                    tape,
                    nll_node: nll,
                    tokens,
                    pooled_node: pooled,
                })
            })
            .collect();
        let mut samples: Vec<BridgeSample> = samples.into_iter().collect::<Result<_>>()?;

        // Stage B: the contrastive loss couples the batch on one small tape.
        let mut joint = Tape::<f32>::new();
        let h_leaves: Vec<TensorId> = samples
            .iter()
            .map(|s| {
                let d = s.pooled_values.len();
                joint.leaf(vec![d], s.pooled_values.clone(), true)
            })
            .collect::<std::result::Result<_, _>>()?;
        let e_leaves: Vec<TensorId> = samples
            .iter()
            .map(|s| {
                let d = s.target_values.len();
                joint.leaf(vec![d], s.target_values.clone(), false)
            })
            .collect::<std::result::Result<_, _>>()?;
        let lcmc_node = cmc_loss(&mut joint, &h_leaves, &e_leaves, self.cfg.tau)?;
        let l_cmc = f64::from(joint.scalar_value(lcmc_node));
        joint.backward(lcmc_node)?;

        // Stage C: seed each sample tape with its share of the combined
        // gradient and backpropagate to the adapter (parallel).
        let total_tokens: usize = samples.iter().map(|s| s.tokens).sum();
        let lambda = weights.lambda_cmc();
        let timt_seed = ((1.0 - lambda) / total_tokens as f64) as f32;
        let h_grads: Vec<Vec<f32>> = h_leaves
            .iter()
            .map(|&h| {
                joint
                    .grad(h)
                    .map(|g| g.iter().map(|v| *v * lambda as f32).collect())
                    .unwrap_or_default()
            })
            .collect();

        samples
            .par_iter_mut()
            .zip(h_grads.par_iter())
            .try_for_each(|(sample, h_grad)| -> Result<()> {
                let nll_seed = [timt_seed];
                let mut seeds: Vec<(TensorId, &[f32])> =
                    vec![(sample.nll_node, nll_seed.as_slice())];
                if !h_grad.is_empty() {
                    seeds.push((sample.pooled_node, h_grad.as_slice()));
                }
                sample.tape.backward_seeded(&seeds)?;
                Ok(())
            })?;

        let mut grads = GradAccumulator::new(self.arena.len());
        let mut nll_total = 0.0;
        for s in &samples {
            grads.add_tape(&s.tape);
            nll_total += s.nll_value;
        }
        let l_timt = nll_total / total_tokens as f64;
        let report = combined_loss(l_timt, l_cmc, weights, samples.len())?;
        self.adam.step(&mut self.arena, &mut grads, self.cfg.clip_norm)?;
        Ok(report)
    }

    /// Per sample: teacher-forced NLL plus the pooled adapter-side vector
    /// and its frozen text-side contrastive target (pooled text embedding
    /// for the embedding placement, pooled text sequential features for the
    /// sequence placement).
    fn forward_parts(
        &self,
        tape: &mut Tape<f32>,
        ex: &data::TimtExample,
        dropout: Option<&mut DropoutState>,
    ) -> Result<(TensorId, usize, TensorId, TensorId)> {
        let mut probes = Probes::default();
        let arena = &self.arena;
        let mut dropout = dropout;
        let e = self.model.ocr.encode_image(tape, arena, &ex.image, &mut probes)?;

        let (memory, pooled) = match self.model.placement {
            Placement::Emb => {
                let h = self
                    .model
                    .adapter
                    .forward(tape, arena, e.id, dropout.as_deref_mut())?;
                let adapted = crate::backbones::FeatureSeq {
                    id: h,
                    len: e.len,
                    origin: crate::backbones::FeatureOrigin::TextEmb,
                };
                let pooled = pool_sequence(tape, &adapted, adapted.len)?;
                let memory = self.model.mt.encode_text(tape, arena, adapted, None, &mut probes)?;
                (memory, pooled)
            }
            Placement::Seq => {
                let s = self
                    .model
                    .ocr
                    .encode_image_sequence(tape, arena, e, None, &mut probes)?;
                let h = self
                    .model
                    .adapter
                    .forward(tape, arena, s.id, dropout.as_deref_mut())?;
                let adapted = crate::backbones::FeatureSeq {
                    id: h,
                    len: s.len,
                    origin: crate::backbones::FeatureOrigin::AdapterOut,
                };
                let pooled = pool_sequence(tape, &adapted, adapted.len)?;
                (adapted, pooled)
            }
        };

        let mut gold = ex.target.ids.clone();
        gold.push(EOS);
        let logits = self
            .model
            .mt
            .dec
            .logits(tape, arena, memory.id, &gold, None, &mut probes)?;
        let (nll, count) = timt_loss_sum(tape, logits, &gold)?;

        let e_t = self.model.mt.embed_text(tape, arena, &ex.source)?;
        let target_feats = match self.model.placement {
            Placement::Emb => e_t,
            Placement::Seq => self.model.mt.encode_text(tape, arena, e_t, None, &mut probes)?,
        };
        let target_pooled = pool_sequence(tape, &target_feats, target_feats.len)?;
        Ok((nll, count, pooled, target_pooled))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = CheckpointMeta::new("bridge", self.cfg.dims(), self.cfg.seed);
        meta.placement = Some(self.model.placement);
        meta.variant = Some(self.model.adapter.variant());
        meta.adapter_layers = Some(self.cfg.adapter_layers);
        meta.bottleneck_r = Some(self.cfg.bottleneck_r);
        meta.ocr_ckpt = Some(self.refs.0.display().to_string());
        meta.mt_ckpt = Some(self.refs.1.display().to_string());
        save_checkpoint(path, &self.arena, &["adapter."], &meta)
    }
}

// ---- fine-tune / scratch baselines ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndToEndInit {
    /// Pretrained backbones, everything unfrozen.
    Finetune,
    /// Xavier-fresh weights everywhere.
    Scratch,
}

/// End-to-end baseline over the same bridged graph (embedding placement),
/// all parameters trainable, translation loss only.
pub struct EndToEndTrainer {
    pub arena: ParamArena<f32>,
    pub model: BridgedModel,
    pub cfg: TrainConfig,
    pub kind: EndToEndInit,
    pub step: usize,
    pub log: Vec<(usize, f64)>,
    adam: Adam<f32>,
}

impl EndToEndTrainer {
    pub fn new(
        cfg: TrainConfig,
        kind: EndToEndInit,
        backbones: Option<(&Path, &Path)>,
    ) -> Result<Self> {
        cfg.validate()?;
        let (mut arena, model) = match (kind, backbones) {
            (EndToEndInit::Finetune, Some((ocr, mt))) => load_bridged(
                ocr,
                mt,
                &cfg,
                Placement::Emb,
                AdapterVariant::SelfAttention,
            )?,
            (EndToEndInit::Finetune, None) => {
                return Err(Error::Config(
                    "fine-tuning needs pretrained OCR and MT checkpoints".into(),
                ))
            }
            (EndToEndInit::Scratch, _) => {
                let mut arena = ParamArena::new();
                let init = RngStream::new(cfg.seed, "init.scratch");
                let dims = cfg.dims();
                let ocr = OcrModel::build(&mut arena, "ocr", dims, data::source_vocab(), &init)?;
                let mt = MtModel::build(
                    &mut arena,
                    "mt",
                    dims,
                    data::source_vocab(),
                    data::target_vocab(),
                    &init,
                )?;
                let adapter = ModalAdapter::build(
                    &mut arena,
                    "adapter",
                    AdapterVariant::SelfAttention,
                    cfg.adapter_layers,
                    dims.d,
                    dims.heads,
                    cfg.bottleneck_r,
                    &init,
                )?;
                (
                    arena,
                    BridgedModel {
                        ocr,
                        mt,
                        adapter,
                        placement: Placement::Emb,
                    },
                )
            }
        };
        arena.set_trainable_all(true);
        let adam = Adam::new(cfg.lr, arena.len());
        Ok(Self {
            arena,
            model,
            cfg,
            kind,
            step: 0,
            log: Vec::new(),
            adam,
        })
    }

    pub fn run(&mut self, corpus: &Corpus, steps: usize) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::Input("training corpus is empty".into()));
        }
        for _ in 0..steps {
            let (mut grads, loss) = supervised_step(
                &self.arena,
                &self.cfg,
                self.step,
                corpus.len(),
                |tape, idx, dropout| {
                    let ex = &corpus.examples[idx];
                    let mut gold = ex.target.ids.clone();
                    gold.push(EOS);
                    let logits = self.model.logits(
                        tape,
                        &self.arena,
                        &ex.image,
                        &gold,
                        dropout,
                        &mut Probes::default(),
                    )?;
                    timt_loss_sum(tape, logits, &gold)
                },
            )?;
            check_finite(loss, self.step)?;
            self.adam.step(&mut self.arena, &mut grads, self.cfg.clip_norm)?;
            self.log.push((self.step, loss));
            self.step += 1;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let kind = match self.kind {
            EndToEndInit::Finetune => "finetune",
            EndToEndInit::Scratch => "scratch",
        };
        let mut meta = CheckpointMeta::new(kind, self.cfg.dims(), self.cfg.seed);
        meta.placement = Some(Placement::Emb);
        meta.variant = Some(AdapterVariant::SelfAttention);
        meta.adapter_layers = Some(self.cfg.adapter_layers);
        save_checkpoint(
            path,
            &self.arena,
            &["ocr.conv.", "adapter.", "mt.seq.", "mt.dec."],
            &meta,
        )
    }
}

// ---- vanilla adapter baseline ----------------------------------------------------------

pub struct VanillaTrainer {
    pub arena: ParamArena<f32>,
    pub model: VanillaAdapterModel,
    pub cfg: TrainConfig,
    pub step: usize,
    pub log: Vec<(usize, f64)>,
    adam: Adam<f32>,
    refs: (PathBuf, PathBuf),
}

impl VanillaTrainer {
    pub fn new(cfg: TrainConfig, ocr_ckpt: &Path, mt_ckpt: &Path) -> Result<Self> {
        cfg.validate()?;
        let ocr_loaded = load_checkpoint::<f32>(ocr_ckpt)?;
        let mt_loaded = load_checkpoint::<f32>(mt_ckpt)?;
        let dims = ocr_loaded.meta.dims;
        let mut arena = ParamArena::new();
        let init = RngStream::new(cfg.seed, "init.vanilla");
        let ocr = OcrModel::build(&mut arena, "ocr", dims, data::source_vocab(), &init)?;
        let mt = MtModel::build(
            &mut arena,
            "mt",
            dims,
            data::source_vocab(),
            data::target_vocab(),
            &init,
        )?;
        apply_entries(&mut arena, &ocr_loaded.entries)?;
        apply_entries(&mut arena, &mt_loaded.entries)?;
        let model = VanillaAdapterModel::build(&mut arena, ocr, mt, cfg.bottleneck_r, &init)?;
        VanillaAdapterModel::apply_freeze_policy(&mut arena);
        let adam = Adam::new(cfg.lr, arena.len());
        Ok(Self {
            arena,
            model,
            cfg,
            step: 0,
            log: Vec::new(),
            adam,
            refs: (ocr_ckpt.to_path_buf(), mt_ckpt.to_path_buf()),
        })
    }

    pub fn run(&mut self, corpus: &Corpus, steps: usize) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::Input("training corpus is empty".into()));
        }
        for _ in 0..steps {
            let (mut grads, loss) = supervised_step(
                &self.arena,
                &self.cfg,
                self.step,
                corpus.len(),
                |tape, idx, dropout| {
                    let ex = &corpus.examples[idx];
                    let mut gold = ex.target.ids.clone();
                    gold.push(EOS);
                    let logits = self.model.logits(
                        tape,
                        &self.arena,
                        &ex.image,
                        &gold,
                        dropout,
                        &mut Probes::default(),
                    )?;
                    timt_loss_sum(tape, logits, &gold)
                },
            )?;
            check_finite(loss, self.step)?;
            self.adam.step(&mut self.arena, &mut grads, self.cfg.clip_norm)?;
            self.log.push((self.step, loss));
            self.step += 1;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = CheckpointMeta::new("vanilla", self.cfg.dims(), self.cfg.seed);
        meta.bottleneck_r = Some(self.cfg.bottleneck_r);
        meta.ocr_ckpt = Some(self.refs.0.display().to_string());
        meta.mt_ckpt = Some(self.refs.1.display().to_string());
        save_checkpoint(path, &self.arena, &["vanilla."], &meta)
    }
}
