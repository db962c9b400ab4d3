//! Loaded systems, the cascade baseline, parameter ledgers, and evaluation
//! reports.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{MtModel, OcrModel, Probes, TextImage, TokenSeq, VocabSide, UNK};
use crate::bridge::{AdapterVariant, BridgedModel, ModalAdapter, Placement, VanillaAdapterModel};
use crate::data::{self, add_noise, Corpus};
use crate::error::{Error, Result};
use crate::harness::bench::{benchmark_latency, LatencyStats};
use crate::harness::checkpoint::{apply_entries, load_checkpoint};
use crate::harness::metrics::{char_accuracy, corpus_bleu, exact_match_rate, BLEU_METHOD};
use crate::params::ParamArena;
use crate::rng::RngStream;

pub const REPORT_SCHEMA: &str = "e2timt-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Cascade,
    BridgedEmb,
    BridgedSeq,
    VanillaAdapter,
    Finetune,
    Scratch,
}

impl SystemKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cascade" => Ok(SystemKind::Cascade),
            "bridged-emb" => Ok(SystemKind::BridgedEmb),
            "bridged-seq" => Ok(SystemKind::BridgedSeq),
            "vanilla-adapter" => Ok(SystemKind::VanillaAdapter),
            "finetune" => Ok(SystemKind::Finetune),
            "scratch" => Ok(SystemKind::Scratch),
            other => Err(Error::Config(format!("unknown system {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::Cascade => "cascade",
            SystemKind::BridgedEmb => "bridged-emb",
            SystemKind::BridgedSeq => "bridged-seq",
            SystemKind::VanillaAdapter => "vanilla-adapter",
            SystemKind::Finetune => "finetune",
            SystemKind::Scratch => "scratch",
        }
    }
}

pub enum SystemModel {
    Cascade { ocr: OcrModel, mt: MtModel },
    Bridged(BridgedModel),
    Vanilla(VanillaAdapterModel),
}

/// A runnable translation system: one arena plus the forward graph over it.
pub struct System {
    pub kind: SystemKind,
    pub arena: ParamArena<f32>,
    pub model: SystemModel,
}

/// Two-stage baseline: recognize, then translate the recognized text.
/// Exactly two autoregressive loops per image. Recognized ids outside the
/// MT source vocabulary degrade to UNK.
pub fn cascade_translate(
    arena: &ParamArena<f32>,
    ocr: &OcrModel,
    mt: &MtModel,
    img: &TextImage,
    max_len: usize,
    probes: &mut Probes,
) -> Result<TokenSeq> {
    let recognized = ocr.recognize(arena, img, max_len, probes)?;
    if recognized.is_empty() {
        return Ok(TokenSeq::new(VocabSide::Target, Vec::new()));
    }
    let ids = recognized
        .ids
        .iter()
        .map(|&id| if id < mt.src_vocab.size() { id } else { UNK })
        .collect();
    let source = TokenSeq::new(VocabSide::Source, ids);
    mt.translate(arena, &source, max_len, probes)
}

impl System {
    pub fn translate(
        &self,
        img: &TextImage,
        max_len: usize,
        probes: &mut Probes,
    ) -> Result<TokenSeq> {
        match &self.model {
            SystemModel::Cascade { ocr, mt } => {
                cascade_translate(&self.arena, ocr, mt, img, max_len, probes)
            }
            SystemModel::Bridged(bm) => bm.greedy_decode(&self.arena, img, max_len, probes),
            SystemModel::Vanilla(vam) => vam.greedy_decode(&self.arena, img, max_len, probes),
        }
    }

    /// Parameter prefixes of the inference graph, per system.
    pub fn graph_prefixes(&self) -> Vec<&'static str> {
        match (&self.model, self.kind) {
            (SystemModel::Cascade { .. }, _) => vec!["ocr.", "mt."],
            (SystemModel::Bridged(bm), _) => match bm.placement {
                Placement::Emb => vec!["ocr.conv.", "adapter.", "mt.seq.", "mt.dec."],
                Placement::Seq => vec!["ocr.conv.", "ocr.seq.", "adapter.", "mt.dec."],
            },
            (SystemModel::Vanilla(_), _) => {
                vec!["ocr.conv.", "ocr.seq.", "vanilla.", "mt.dec."]
            }
        }
    }

    pub fn ledger(&self) -> ParamLedger {
        let prefixes = self.graph_prefixes();
        param_ledger(&self.arena, &prefixes)
    }
}

/// Per-component parameter counts over an inference graph.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamLedger {
    pub total: usize,
    pub trainable: usize,
    pub components: Vec<(String, usize)>,
}

pub fn param_ledger(arena: &ParamArena<f32>, prefixes: &[&str]) -> ParamLedger {
    let in_graph = |name: &str| prefixes.iter().any(|p| name.starts_with(p));
    let total = arena.count_values(|e| in_graph(&e.name));
    let trainable = arena.count_values(|e| in_graph(&e.name) && e.trainable);
    let components = prefixes
        .iter()
        .map(|p| {
            (
                p.trim_end_matches('.').to_string(),
                arena.count_values(|e| e.name.starts_with(p)),
            )
        })
        .collect();
    ParamLedger {
        total,
        trainable,
        components,
    }
}

// ---- system loading -----------------------------------------------------------------

/// Rebuild a system from checkpoint files. Bridged and vanilla checkpoints
/// carry references to their backbone checkpoints; explicit paths override
/// the stored references.
pub fn load_system(
    kind: SystemKind,
    ckpt: Option<&Path>,
    ocr_ckpt: Option<&Path>,
    mt_ckpt: Option<&Path>,
) -> Result<System> {
    let need = |opt: Option<&Path>, what: &str| -> Result<std::path::PathBuf> {
        opt.map(Path::to_path_buf)
            .ok_or_else(|| Error::Config(format!("{} requires {what}", kind.name())))
    };
    match kind {
        SystemKind::Cascade => {
            let ocr_path = need(ocr_ckpt, "--ocr-ckpt")?;
            let mt_path = need(mt_ckpt, "--mt-ckpt")?;
            let ocr_loaded = load_checkpoint::<f32>(&ocr_path)?;
            let mt_loaded = load_checkpoint::<f32>(&mt_path)?;
            let dims = ocr_loaded.meta.dims;
            let mut arena = ParamArena::new();
            let init = RngStream::new(0, "init.load");
            let ocr = OcrModel::build(&mut arena, "ocr", dims, data::source_vocab(), &init)?;
            let mt = MtModel::build(
                &mut arena,
                "mt",
                mt_loaded.meta.dims,
                data::source_vocab(),
                data::target_vocab(),
                &init,
            )?;
            apply_entries(&mut arena, &ocr_loaded.entries)?;
            apply_entries(&mut arena, &mt_loaded.entries)?;
            arena.set_trainable_all(false);
            Ok(System {
                kind,
                arena,
                model: SystemModel::Cascade { ocr, mt },
            })
        }
        SystemKind::BridgedEmb | SystemKind::BridgedSeq => {
            let path = need(ckpt, "--ckpt")?;
            let loaded = load_checkpoint::<f32>(&path)?;
            let placement = loaded.meta.placement.ok_or_else(|| {
                Error::Checkpoint(format!("{}: missing placement", path.display()))
            })?;
            let expected = if kind == SystemKind::BridgedEmb {
                Placement::Emb
            } else {
                Placement::Seq
            };
            if placement != expected {
                return Err(Error::Config(format!(
                    "checkpoint stores a {placement:?}-placement adapter, but --system asked for {expected:?}"
                )));
            }
            let variant = loaded.meta.variant.unwrap_or(AdapterVariant::SelfAttention);
            let resolve = |explicit: Option<&Path>, stored: &Option<String>, what: &str| {
                explicit
                    .map(Path::to_path_buf)
                    .or_else(|| stored.as_ref().map(std::path::PathBuf::from))
                    .ok_or_else(|| Error::Config(format!("no {what} available for {}", kind.name())))
            };
            let ocr_path = resolve(ocr_ckpt, &loaded.meta.ocr_ckpt, "OCR checkpoint")?;
            let mt_path = resolve(mt_ckpt, &loaded.meta.mt_ckpt, "MT checkpoint")?;

            let mut cfg = crate::harness::TrainConfig::new(crate::harness::Preset::Desk);
            cfg.seed = loaded.meta.seed;
            cfg.adapter_layers = loaded.meta.adapter_layers.unwrap_or(cfg.adapter_layers);
            cfg.bottleneck_r = loaded.meta.bottleneck_r.unwrap_or(cfg.bottleneck_r);
            let (mut arena, model) = crate::harness::train::load_bridged(
                &ocr_path, &mt_path, &cfg, placement, variant,
            )?;
            apply_entries(&mut arena, &loaded.entries)?;
            BridgedModel::apply_freeze_policy(&mut arena);
            Ok(System {
                kind,
                arena,
                model: SystemModel::Bridged(model),
            })
        }
        SystemKind::VanillaAdapter => {
            let path = need(ckpt, "--ckpt")?;
            let loaded = load_checkpoint::<f32>(&path)?;
            let resolve = |explicit: Option<&Path>, stored: &Option<String>, what: &str| {
                explicit
                    .map(Path::to_path_buf)
                    .or_else(|| stored.as_ref().map(std::path::PathBuf::from))
                    .ok_or_else(|| Error::Config(format!("no {what} available for vanilla-adapter")))
            };
            let ocr_path = resolve(ocr_ckpt, &loaded.meta.ocr_ckpt, "OCR checkpoint")?;
            let mt_path = resolve(mt_ckpt, &loaded.meta.mt_ckpt, "MT checkpoint")?;
            let ocr_loaded = load_checkpoint::<f32>(&ocr_path)?;
            let mt_loaded = load_checkpoint::<f32>(&mt_path)?;
            let dims = ocr_loaded.meta.dims;
            let r = loaded
                .meta
                .bottleneck_r
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing bottleneck dim", path.display())))?;
            let mut arena = ParamArena::new();
            let init = RngStream::new(loaded.meta.seed, "init.vanilla");
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
            let model = VanillaAdapterModel::build(&mut arena, ocr, mt, r, &init)?;
            apply_entries(&mut arena, &loaded.entries)?;
            VanillaAdapterModel::apply_freeze_policy(&mut arena);
            Ok(System {
                kind,
                arena,
                model: SystemModel::Vanilla(model),
            })
        }
        SystemKind::Finetune | SystemKind::Scratch => {
            let path = need(ckpt, "--ckpt")?;
            let loaded = load_checkpoint::<f32>(&path)?;
            let dims = loaded.meta.dims;
            let mut arena = ParamArena::new();
            let init = RngStream::new(loaded.meta.seed, "init.load");
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
                loaded.meta.variant.unwrap_or(AdapterVariant::SelfAttention),
                loaded.meta.adapter_layers.unwrap_or(2),
                dims.d,
                dims.heads,
                loaded.meta.bottleneck_r.unwrap_or(64),
                &init,
            )?;
            apply_entries(&mut arena, &loaded.entries)?;
            Ok(System {
                kind,
                arena,
                model: SystemModel::Bridged(BridgedModel {
                    ocr,
                    mt,
                    adapter,
                    placement: Placement::Emb,
                }),
            })
        }
    }
}

// ---- evaluation ------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub schema: String,
    pub system: SystemKind,
    pub bleu: f64,
    pub exact_match: f64,
    pub char_accuracy: f64,
    pub total_params: usize,
    pub trainable_params: usize,
    pub components: Vec<(String, usize)>,
    pub latency_ms_mean: f64,
    pub latency_ms_sigma: f64,
    pub decode_loops_per_sentence: f64,
    pub decode_steps_per_sentence: f64,
    pub eval_sentences: usize,
    pub noise: f64,
    pub seed: u64,
    pub bleu_method: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub max_len: usize,
    pub noise: f64,
    /// Latency measurement repetitions (>= 3) over at most `bench_limit`
    /// sentences. 0 disables timing, leaving the latency fields at zero so
    /// reports stay byte-identical across runs.
    pub bench_reps: usize,
    pub bench_limit: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_len: 16,
            noise: 0.0,
            bench_reps: 3,
            bench_limit: 64,
            seed: 0,
        }
    }
}

/// Decode the eval corpus (sharded across workers), score it, and attach
/// the parameter ledger and a latency measurement.
pub fn evaluate(system: &System, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Input("evaluation corpus is empty".into()));
    }
    let images: Vec<TextImage> = corpus
        .examples
        .iter()
        .map(|ex| {
            if opts.noise > 0.0 {
                add_noise(&ex.image, opts.noise, corpus.seed ^ u64::from(ex.id) ^ 0x9e37)
            } else {
                Ok(ex.image.clone())
            }
        })
        .collect::<Result<_>>()?;

    let decoded: Vec<Result<(TokenSeq, Probes)>> = images
        .par_iter()
        .map(|img| {
            let mut probes = Probes::default();
            let out = system.translate(img, opts.max_len, &mut probes)?;
            Ok((out, probes))
        })
        .collect();

    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(corpus.len());
    let mut probes = Probes::default();
    for r in decoded {
        let (seq, p) = r?;
        candidates.push(seq.ids);
        probes.merge(&p);
    }
    let references: Vec<Vec<usize>> = corpus.examples.iter().map(|e| e.target.ids.clone()).collect();

    let vocab = data::target_vocab();
    let to_strings = |rows: &Vec<Vec<usize>>| -> Vec<Vec<String>> {
        rows.iter()
            .map(|ids| ids.iter().map(|&i| vocab.token(i).to_string()).collect())
            .collect()
    };
    let bleu = corpus_bleu(&to_strings(&candidates), &to_strings(&references))?;
    let exact = exact_match_rate(&candidates, &references);
    let char_acc = char_accuracy(&candidates, &references);

    let bench_count = corpus.len().min(opts.bench_limit).max(1);
    let latency: LatencyStats = if opts.bench_reps == 0 {
        LatencyStats {
            mean_ms: 0.0,
            sigma_ms: 0.0,
            reps: 0,
            sentences: 0,
            decode_loops_per_sentence: 0.0,
            decode_steps_per_sentence: 0.0,
        }
    } else {
        benchmark_latency(system, &images[..bench_count], opts.max_len, opts.bench_reps)?
    };

    let ledger = system.ledger();
    let n = corpus.len() as f64;
    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        system: system.kind,
        bleu,
        exact_match: exact,
        char_accuracy: char_acc,
        total_params: ledger.total,
        trainable_params: ledger.trainable,
        components: ledger.components,
        latency_ms_mean: latency.mean_ms,
        latency_ms_sigma: latency.sigma_ms,
        decode_loops_per_sentence: probes.decode_loops as f64 / n,
        decode_steps_per_sentence: probes.decode_steps as f64 / n,
        eval_sentences: corpus.len(),
        noise: opts.noise,
        seed: opts.seed,
        bleu_method: BLEU_METHOD.to_string(),
        config: serde_json::json!({
            "max_len": opts.max_len,
            "bench_reps": opts.bench_reps,
            "bench_limit": bench_count,
        }),
    })
}

pub fn write_report<S: Serialize>(path: &Path, report: &S) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
