//! Bridging a frozen OCR encoder to a frozen MT decoder through a small
//! trainable adapter.
//!
//! Two placements: the embedding adapter sits between the OCR image encoder
//! and the MT text sequential encoder; the sequential adapter sits between
//! the OCR sequential encoder and the MT decoder. Either way the OCR decoder
//! and the MT source embedding never appear in the bridged graph, which is
//! what buys the single decode loop at inference.
//!
//! Adapter layers follow the order `LN(Sublayer(x)) + x` (norm wraps the
//! sublayer output, residual added outside), unlike the post-norm backbones.

use serde::{Deserialize, Serialize};

use crate::backbones::{
    self, embed_ids, greedy_loop, FeatureOrigin, FeatureSeq, ImageEmbedding, MtModel, OcrModel,
    Probes, TextImage, TokenSeq, VocabSide,
};
use crate::error::{Error, Result};
use crate::nn::{
    self, DropoutState, FfnParams, LayerNormParams, LinearParams, MhaParams,
};
use crate::params::ParamArena;
use crate::rng::RngStream;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Element;

pub const DEFAULT_ADAPTER_LAYERS: usize = 2;
pub const DEFAULT_BOTTLENECK_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Between the OCR image encoder and the MT sequential encoder.
    Emb,
    /// Between the OCR sequential encoder and the MT decoder.
    Seq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterVariant {
    SelfAttention,
    Bottleneck,
}

#[derive(Debug, Clone)]
pub struct AdapterLayer {
    pub attn: MhaParams,
    pub ffn: FfnParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl AdapterLayer {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        init: &RngStream,
    ) -> Result<Self> {
        Ok(Self {
            attn: MhaParams::build(arena, &format!("{prefix}.attn"), d, heads, init)?,
            ffn: FfnParams::build(arena, &format!("{prefix}.ffn"), d, init),
            ln1: LayerNormParams::build(arena, &format!("{prefix}.ln1"), d),
            ln2: LayerNormParams::build(arena, &format!("{prefix}.ln2"), d),
        })
    }
}

/// Residual bottleneck: `x + up(relu(down(x)))`, up-projection zero-initialized
/// so a fresh adapter is the identity.
#[derive(Debug, Clone)]
pub struct BottleneckAdapter {
    pub down: LinearParams,
    pub up: LinearParams,
    pub r: usize,
}

impl BottleneckAdapter {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        d: usize,
        r: usize,
        init: &RngStream,
    ) -> Result<Self> {
        if r >= d {
            return Err(Error::Config(format!(
                "bottleneck dim {r} must be smaller than model dim {d}"
            )));
        }
        let down = LinearParams::build(arena, &format!("{prefix}.down"), d, r, init);
        let up = LinearParams::build(arena, &format!("{prefix}.up"), r, d, init);
        for v in arena.tensor_mut(up.w).values_mut() {
            *v = T::zero();
        }
        Ok(Self { down, up, r })
    }
}

pub fn bottleneck_forward<T: Element>(
    tape: &mut Tape<T>,
    arena: &ParamArena<T>,
    b: &BottleneckAdapter,
    x: TensorId,
) -> Result<TensorId> {
    let down = nn::linear(tape, arena, &b.down, x)?;
    let act = tape.relu(down)?;
    let up = nn::linear(tape, arena, &b.up, act)?;
    Ok(tape.add(x, up)?)
}

#[derive(Debug, Clone)]
pub enum ModalAdapter {
    SelfAttention { layers: Vec<AdapterLayer>, d: usize },
    Bottleneck { layers: Vec<BottleneckAdapter>, d: usize },
}

impl ModalAdapter {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        variant: AdapterVariant,
        n_layers: usize,
        d: usize,
        heads: usize,
        r: usize,
        init: &RngStream,
    ) -> Result<Self> {
        match variant {
            AdapterVariant::SelfAttention => {
                let layers = (0..n_layers)
                    .map(|i| AdapterLayer::build(arena, &format!("{prefix}.{i}"), d, heads, init))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ModalAdapter::SelfAttention { layers, d })
            }
            AdapterVariant::Bottleneck => {
                let layers = (0..n_layers)
                    .map(|i| BottleneckAdapter::build(arena, &format!("{prefix}.{i}"), d, r, init))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ModalAdapter::Bottleneck { layers, d })
            }
        }
    }

    pub fn variant(&self) -> AdapterVariant {
        match self {
            ModalAdapter::SelfAttention { .. } => AdapterVariant::SelfAttention,
            ModalAdapter::Bottleneck { .. } => AdapterVariant::Bottleneck,
        }
    }

    /// `[l, d] -> [l, d]` feature-space mapping.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        x: TensorId,
        mut dropout: Option<&mut DropoutState>,
    ) -> Result<TensorId> {
        match self {
            ModalAdapter::SelfAttention { layers, .. } => {
                let mut h = x;
                for layer in layers {
                    let a = nn::multi_head_attention(tape, arena, &layer.attn, h, h, h, None)?;
                    let a = nn::apply_dropout(tape, a, dropout.as_deref_mut())?;
                    let a_ln = nn::layer_norm(tape, arena, &layer.ln1, a)?;
                    let h_hat = tape.add(a_ln, h)?;
                    let f = nn::ffn_forward(tape, arena, &layer.ffn, h_hat)?;
                    let f = nn::apply_dropout(tape, f, dropout.as_deref_mut())?;
                    let f_ln = nn::layer_norm(tape, arena, &layer.ln2, f)?;
                    h = tape.add(f_ln, h_hat)?;
                }
                Ok(h)
            }
            ModalAdapter::Bottleneck { layers, .. } => {
                let mut h = x;
                for layer in layers {
                    h = bottleneck_forward(tape, arena, layer, h)?;
                }
                Ok(h)
            }
        }
    }
}

// ---- bridged model -------------------------------------------------------------

/// Frozen OCR pieces + trainable adapter + frozen MT pieces. Which backbone
/// pieces participate depends on the placement; the probe counters in tests
/// audit that the bypassed modules are never invoked.
#[derive(Debug, Clone)]
pub struct BridgedModel {
    pub ocr: OcrModel,
    pub mt: MtModel,
    pub adapter: ModalAdapter,
    pub placement: Placement,
}

impl BridgedModel {
    /// Mark only adapter parameters trainable.
    pub fn apply_freeze_policy<T: Element>(arena: &mut ParamArena<T>) {
        arena.set_trainable_all(false);
        arena.set_trainable_prefix("adapter.", true);
    }

    /// Bridged memory from a precomputed image embedding. Embedding
    /// placement: adapter output flows through the text sequential encoder
    /// exactly like a text embedding. Sequence placement: adapter output
    /// feeds the decoder directly.
    pub fn memory_from_embedding<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        e: ImageEmbedding,
        dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<FeatureSeq> {
        match self.placement {
            Placement::Emb => {
                let h = self.adapter.forward(tape, arena, e.id, dropout)?;
                let adapted = FeatureSeq {
                    id: h,
                    len: e.len,
                    origin: FeatureOrigin::TextEmb,
                };
                self.mt.encode_text(tape, arena, adapted, None, probes)
            }
            Placement::Seq => {
                let s = self.ocr.encode_image_sequence(tape, arena, e, None, probes)?;
                let h = self.adapter.forward(tape, arena, s.id, dropout)?;
                Ok(FeatureSeq {
                    id: h,
                    len: s.len,
                    origin: FeatureOrigin::AdapterOut,
                })
            }
        }
    }

    pub fn memory<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        img: &TextImage,
        dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<FeatureSeq> {
        let e = self.ocr.encode_image(tape, arena, img, probes)?;
        self.memory_from_embedding(tape, arena, e, dropout, probes)
    }

    /// Teacher-forced translation logits `[l_Y, |V_Y|]` for training.
    pub fn logits<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        img: &TextImage,
        gold: &[usize],
        mut dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<TensorId> {
        if gold.is_empty() {
            return Err(Error::Input("teacher forcing needs a nonempty gold".into()));
        }
        let memory = self.memory(tape, arena, img, dropout.as_deref_mut(), probes)?;
        self.mt
            .dec
            .logits(tape, arena, memory.id, gold, None, probes)
    }

    /// End-to-end inference: exactly one autoregressive decode loop.
    pub fn greedy_decode<T: Element>(
        &self,
        arena: &ParamArena<T>,
        img: &TextImage,
        max_len: usize,
        probes: &mut Probes,
    ) -> Result<TokenSeq> {
        let mut tape = Tape::new();
        let memory = self.memory(&mut tape, arena, img, None, probes)?;
        self.mt
            .greedy_decode(&mut tape, arena, memory, max_len, probes)
    }
}

// ---- vanilla adapter tuning baseline --------------------------------------------

/// Baseline that keeps the task gap unmodeled: the OCR sequential output
/// feeds the MT decoder directly, and zero-initialized bottlenecks are
/// inserted after every attention and FFN sublayer of those two stacks.
#[derive(Debug, Clone)]
pub struct VanillaAdapterModel {
    pub ocr: OcrModel,
    pub mt: MtModel,
    pub seq_hooks: Vec<(BottleneckAdapter, BottleneckAdapter)>,
    pub dec_hooks: Vec<(BottleneckAdapter, BottleneckAdapter, BottleneckAdapter)>,
    pub r: usize,
}

impl VanillaAdapterModel {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        ocr: OcrModel,
        mt: MtModel,
        r: usize,
        init: &RngStream,
    ) -> Result<Self> {
        let d = ocr.dims.d;
        if r >= d {
            return Err(Error::Config(format!(
                "bottleneck dim {r} must be smaller than model dim {d}"
            )));
        }
        let seq_hooks = (0..ocr.seq.layers.len())
            .map(|i| {
                Ok((
                    BottleneckAdapter::build(arena, &format!("vanilla.seq.{i}.attn"), d, r, init)?,
                    BottleneckAdapter::build(arena, &format!("vanilla.seq.{i}.ffn"), d, r, init)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_hooks = (0..mt.dec.layers.len())
            .map(|i| {
                Ok((
                    BottleneckAdapter::build(arena, &format!("vanilla.dec.{i}.self"), d, r, init)?,
                    BottleneckAdapter::build(arena, &format!("vanilla.dec.{i}.cross"), d, r, init)?,
                    BottleneckAdapter::build(arena, &format!("vanilla.dec.{i}.ffn"), d, r, init)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ocr,
            mt,
            seq_hooks,
            dec_hooks,
            r,
        })
    }

    pub fn apply_freeze_policy<T: Element>(arena: &mut ParamArena<T>) {
        arena.set_trainable_all(false);
        arena.set_trainable_prefix("vanilla.", true);
    }

    /// Closed-form trainable-parameter count:
    /// `points * (d*r + r + r*d + d)`.
    pub fn expected_trainable(&self) -> usize {
        let d = self.ocr.dims.d;
        let points = self.seq_hooks.len() * 2 + self.dec_hooks.len() * 3;
        points * (d * self.r + self.r + self.r * d + d)
    }

    fn encoder_layer_hooked<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        idx: usize,
        x: TensorId,
        mut dropout: Option<&mut DropoutState>,
    ) -> Result<TensorId> {
        let layer = &self.ocr.seq.layers[idx];
        let (after_attn, after_ffn) = &self.seq_hooks[idx];
        let a = nn::multi_head_attention(tape, arena, &layer.attn, x, x, x, None)?;
        let a = nn::apply_dropout(tape, a, dropout.as_deref_mut())?;
        let r1 = tape.add(x, a)?;
        let h = nn::layer_norm(tape, arena, &layer.ln1, r1)?;
        let h = bottleneck_forward(tape, arena, after_attn, h)?;
        let f = nn::ffn_forward(tape, arena, &layer.ffn, h)?;
        let f = nn::apply_dropout(tape, f, dropout)?;
        let r2 = tape.add(h, f)?;
        let y = nn::layer_norm(tape, arena, &layer.ln2, r2)?;
        bottleneck_forward(tape, arena, after_ffn, y)
    }

    fn decoder_stack_hooked<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        input_ids: &[usize],
        memory: TensorId,
        mut dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<TensorId> {
        probes.dec_t_calls += 1;
        let mask = nn::causal_mask::<T>(input_ids.len());
        let mut h = embed_ids(tape, arena, &self.mt.dec.embed, input_ids)?;
        for (idx, layer) in self.mt.dec.layers.iter().enumerate() {
            let (h_self, h_cross, h_ffn) = &self.dec_hooks[idx];
            let s = nn::multi_head_attention(tape, arena, &layer.self_attn, h, h, h, Some(&mask))?;
            let s = nn::apply_dropout(tape, s, dropout.as_deref_mut())?;
            let r1 = tape.add(h, s)?;
            let h1 = nn::layer_norm(tape, arena, &layer.ln1, r1)?;
            let h1 = bottleneck_forward(tape, arena, h_self, h1)?;
            let c =
                nn::multi_head_attention(tape, arena, &layer.cross_attn, h1, memory, memory, None)?;
            let c = nn::apply_dropout(tape, c, dropout.as_deref_mut())?;
            let r2 = tape.add(h1, c)?;
            let h2 = nn::layer_norm(tape, arena, &layer.ln2, r2)?;
            let h2 = bottleneck_forward(tape, arena, h_cross, h2)?;
            let f = nn::ffn_forward(tape, arena, &layer.ffn, h2)?;
            let f = nn::apply_dropout(tape, f, dropout.as_deref_mut())?;
            let r3 = tape.add(h2, f)?;
            let h3 = nn::layer_norm(tape, arena, &layer.ln3, r3)?;
            h = bottleneck_forward(tape, arena, h_ffn, h3)?;
        }
        Ok(h)
    }

    /// `conv -> hooked Seq_I -> memory`; the OCR decoder and MT encoder are
    /// absent, as in the bridged graph.
    pub fn memory<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        img: &TextImage,
        mut dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<TensorId> {
        let e = self.ocr.encode_image(tape, arena, img, probes)?;
        probes.seq_i_calls += 1;
        let mut h = e.id;
        for idx in 0..self.ocr.seq.layers.len() {
            h = self.encoder_layer_hooked(tape, arena, idx, h, dropout.as_deref_mut())?;
        }
        Ok(h)
    }

    pub fn logits<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        img: &TextImage,
        gold: &[usize],
        mut dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<TensorId> {
        if gold.is_empty() {
            return Err(Error::Input("teacher forcing needs a nonempty gold".into()));
        }
        let memory = self.memory(tape, arena, img, dropout.as_deref_mut(), probes)?;
        let mut input = Vec::with_capacity(gold.len());
        input.push(backbones::BOS);
        input.extend_from_slice(&gold[..gold.len() - 1]);
        let h = self.decoder_stack_hooked(tape, arena, &input, memory, dropout, probes)?;
        let proj = tape.param(arena, self.mt.dec.proj);
        Ok(tape.matmul(h, proj)?)
    }

    pub fn greedy_decode<T: Element>(
        &self,
        arena: &ParamArena<T>,
        img: &TextImage,
        max_len: usize,
        probes: &mut Probes,
    ) -> Result<TokenSeq> {
        let mut tape = Tape::new();
        let memory = self.memory(&mut tape, arena, img, None, probes)?;
        let vocab = self.mt.dec.vocab_size;
        let ids = greedy_loop(max_len, probes, |input, probes| {
            let h = self.decoder_stack_hooked(&mut tape, arena, input, memory, None, probes)?;
            let proj = tape.param(arena, self.mt.dec.proj);
            let logits = tape.matmul(h, proj)?;
            let values = tape.values(logits);
            Ok(values[(input.len() - 1) * vocab..input.len() * vocab].to_vec())
        })?;
        Ok(TokenSeq::new(VocabSide::Target, ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{ModelDims, Vocab, IMG_HEIGHT};
    use crate::tensor::gradcheck::grad_check_params;

    fn toy_vocab(side: VocabSide) -> Vocab {
        Vocab::new(side, (0..16).map(|i| format!("{}", (b'a' + i) as char)))
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            d: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
        }
    }

    fn build_bridged(
        arena: &mut ParamArena<f64>,
        placement: Placement,
        variant: AdapterVariant,
    ) -> BridgedModel {
        let init = RngStream::new(7, "init");
        let ocr = OcrModel::build(arena, "ocr", tiny_dims(), toy_vocab(VocabSide::Source), &init)
            .unwrap();
        let mt = MtModel::build(
            arena,
            "mt",
            tiny_dims(),
            toy_vocab(VocabSide::Source),
            toy_vocab(VocabSide::Target),
            &init,
        )
        .unwrap();
        let adapter =
            ModalAdapter::build(arena, "adapter", variant, 2, 8, 2, 4, &init).unwrap();
        BridgedModel {
            ocr,
            mt,
            adapter,
            placement,
        }
    }

    fn test_image(chars: usize, fill: f32) -> TextImage {
        TextImage::new(
            IMG_HEIGHT,
            8 * chars,
            vec![fill; IMG_HEIGHT * 8 * chars],
            "x".repeat(chars),
        )
        .unwrap()
    }

    fn zero_adapter(arena: &mut ParamArena<f64>) {
        // Zero every adapter weight except layer-norm gammas: with the
        // Eq-7 wiring LN(0) = 0, so each layer reduces to the identity.
        let ids: Vec<_> = arena
            .iter()
            .filter(|(_, e)| e.name.starts_with("adapter.") && !e.name.contains("gamma"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            for v in arena.tensor_mut(id).values_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn zeroed_adapter_is_exact_identity() {
        let mut arena = ParamArena::<f64>::new();
        let bm = build_bridged(&mut arena, Placement::Emb, AdapterVariant::SelfAttention);
        zero_adapter(&mut arena);
        let mut rng = RngStream::new(3, "x");
        let mut tape = Tape::new();
        let x = tape
            .leaf(vec![5, 8], (0..40).map(|_| rng.uniform(-2.0, 2.0)).collect(), false)
            .unwrap();
        let y = bm.adapter.forward(&mut tape, &arena, x, None).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn adapter_preserves_shape_for_any_length() {
        let mut arena = ParamArena::<f64>::new();
        let bm = build_bridged(&mut arena, Placement::Emb, AdapterVariant::SelfAttention);
        for l in [1usize, 3, 17] {
            let mut tape = Tape::new();
            let x = tape.leaf(vec![l, 8], vec![0.1; l * 8], false).unwrap();
            let y = bm.adapter.forward(&mut tape, &arena, x, None).unwrap();
            assert_eq!(tape.shape(y), &[l, 8]);
        }
    }

    #[test]
    fn adapter_gradient_two_layers() {
        let mut arena = ParamArena::<f64>::new();
        let bm = build_bridged(&mut arena, Placement::Emb, AdapterVariant::SelfAttention);
        let mut rng = RngStream::new(5, "gc");
        let x: Vec<f64> = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let readout: Vec<f64> = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let pids = arena.ids_with_prefix("adapter.");
        let err = grad_check_params(&mut arena, &pids, 1e-5, |tape, arena| {
            let xi = tape.leaf(vec![3, 8], x.clone(), false)?;
            let y = bm.adapter.forward(tape, arena, xi, None)?;
            let r = tape.leaf(vec![3, 8], readout.clone(), false)?;
            let w = tape.mul_elem(y, r)?;
            Ok(tape.sum_all(w)?)
        })
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn fresh_bottleneck_is_identity_bitwise() {
        let mut arena = ParamArena::<f64>::new();
        let init = RngStream::new(1, "init");
        let b = BottleneckAdapter::build(&mut arena, "adapter.0", 8, 4, &init).unwrap();
        let mut rng = RngStream::new(2, "x");
        let mut tape = Tape::new();
        let x = tape
            .leaf(vec![4, 8], (0..32).map(|_| rng.uniform(-3.0, 3.0)).collect(), false)
            .unwrap();
        let y = bottleneck_forward(&mut tape, &arena, &b, x).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn bottleneck_rank_one_and_rejection() {
        let mut arena = ParamArena::<f64>::new();
        let init = RngStream::new(1, "init");
        let b = BottleneckAdapter::build(&mut arena, "adapter.0", 8, 1, &init).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3, 8], vec![0.5; 24], false).unwrap();
        let y = bottleneck_forward(&mut tape, &arena, &b, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 8]);
        assert!(BottleneckAdapter::build(&mut arena, "adapter.1", 8, 8, &init).is_err());
    }

    #[test]
    fn bottleneck_gradient() {
        let mut arena = ParamArena::<f64>::new();
        let init = RngStream::new(9, "init");
        let b = BottleneckAdapter::build(&mut arena, "adapter.0", 8, 4, &init).unwrap();
        // Perturb the zero-initialized up projection so the check is not at
        // a stationary point.
        let mut rng = RngStream::new(10, "nudge");
        for v in arena.tensor_mut(b.up.w).values_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
        let x: Vec<f64> = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let pids = arena.ids_with_prefix("adapter.");
        let err = grad_check_params(&mut arena, &pids, 1e-5, |tape, arena| {
            let xi = tape.leaf(vec![3, 8], x.clone(), false)?;
            let y = bottleneck_forward(tape, arena, &b, xi)?;
            let sq = tape.mul_elem(y, y)?;
            Ok(tape.sum_all(sq)?)
        })
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn emb_placement_substitution_property() {
        // With an identity adapter, feeding a text embedding through the
        // bridged path reproduces encode_text(embed_text(t)) bitwise.
        let mut arena = ParamArena::<f64>::new();
        let bm = build_bridged(&mut arena, Placement::Emb, AdapterVariant::SelfAttention);
        zero_adapter(&mut arena);
        let t = TokenSeq::new(VocabSide::Source, vec![4, 7, 11]);
        let mut probes = Probes::default();

        let mut tape = Tape::new();
        let e = bm.mt.embed_text(&mut tape, &arena, &t).unwrap();
        let s = bm
            .mt
            .encode_text(&mut tape, &arena, e, None, &mut probes)
            .unwrap();
        let direct = tape.values(s.id).to_vec();

        let mut tape2 = Tape::new();
        let e2 = bm.mt.embed_text(&mut tape2, &arena, &t).unwrap();
        let fake = ImageEmbedding {
            id: e2.id,
            len: e2.len,
        };
        let bridged = bm
            .memory_from_embedding(&mut tape2, &arena, fake, None, &mut probes)
            .unwrap();
        assert_eq!(bridged.origin, FeatureOrigin::TextSeq);
        assert_eq!(tape2.values(bridged.id), direct.as_slice());
    }

    #[test]
    fn seq_placement_shape_chain() {
        let mut arena = ParamArena::<f64>::new();
        let bm = build_bridged(&mut arena, Placement::Seq, AdapterVariant::SelfAttention);
        let img = test_image(3, 0.5);
        let mut tape = Tape::new();
        let mut probes = Probes::default();
        let mem = bm
            .memory(&mut tape, &arena, &img, None, &mut probes)
            .unwrap();
        assert_eq!(tape.shape(mem.id), &[12, 8]);
        assert_eq!(mem.origin, FeatureOrigin::AdapterOut);
    }

    #[test]
    fn placement_bypass_audit() {
        let img = test_image(2, 0.4);
        for (placement, check) in [
            (
                Placement::Emb,
                (|p: &Probes| p.seq_i_calls == 0 && p.dec_i_calls == 0 && p.seq_t_calls == 1)
                    as fn(&Probes) -> bool,
            ),
            (Placement::Seq, |p: &Probes| {
                p.seq_t_calls == 0 && p.dec_i_calls == 0 && p.seq_i_calls == 1
            }),
        ] {
            let mut arena = ParamArena::<f64>::new();
            let bm = build_bridged(&mut arena, placement, AdapterVariant::SelfAttention);
            let mut probes = Probes::default();
            let out = bm.greedy_decode(&arena, &img, 6, &mut probes).unwrap();
            assert!(check(&probes), "{placement:?}: {probes:?}");
            assert_eq!(probes.decode_loops, 1);
            assert!(out.len() <= 6);
        }
    }

    #[test]
    fn bridged_logits_shape_and_adapter_gradient() {
        let mut arena = ParamArena::<f64>::new();
        let bm = build_bridged(&mut arena, Placement::Emb, AdapterVariant::SelfAttention);
        // Random pixels: a constant image makes the first attention uniform
        // and its q/k gradients too small to resolve by finite differences.
        let mut prng = RngStream::new(31, "pixels");
        let pixels: Vec<f32> = (0..128).map(|_| prng.next_f64() as f32).collect();
        let img = TextImage::new(IMG_HEIGHT, 16, pixels, "xx".into()).unwrap();
        let gold = [5usize, 9, EOSISH];
        const EOSISH: usize = 2;
        let mut tape = Tape::new();
        let mut probes = Probes::default();
        let logits = bm
            .logits(&mut tape, &arena, &img, &gold, None, &mut probes)
            .unwrap();
        assert_eq!(tape.shape(logits), &[3, bm.mt.tgt_vocab.size()]);

        let pids = arena.ids_with_prefix("adapter.");
        let err = grad_check_params(&mut arena, &pids, 1e-5, |tape, arena| {
            let l = bm.logits(tape, arena, &img, &gold, None, &mut Probes::default())?;
            let sm = tape.log_softmax(l)?;
            Ok(tape.sum_all(sm)?)
        })
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn bridged_decode_is_deterministic() {
        let mut arena = ParamArena::<f64>::new();
        let bm = build_bridged(&mut arena, Placement::Emb, AdapterVariant::SelfAttention);
        let img = test_image(3, 0.7);
        let a = bm
            .greedy_decode(&arena, &img, 8, &mut Probes::default())
            .unwrap();
        let b = bm
            .greedy_decode(&arena, &img, 8, &mut Probes::default())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vanilla_adapter_initializes_to_plain_connection() {
        let mut arena = ParamArena::<f64>::new();
        let init = RngStream::new(7, "init");
        let ocr = OcrModel::build(
            &mut arena,
            "ocr",
            tiny_dims(),
            toy_vocab(VocabSide::Source),
            &init,
        )
        .unwrap();
        let mt = MtModel::build(
            &mut arena,
            "mt",
            tiny_dims(),
            toy_vocab(VocabSide::Source),
            toy_vocab(VocabSide::Target),
            &init,
        )
        .unwrap();
        let vam = VanillaAdapterModel::build(&mut arena, ocr, mt, 4, &init).unwrap();
        let img = test_image(2, 0.3);
        let gold = [6usize, 8];
        let mut probes = Probes::default();

        let mut tape = Tape::new();
        let hooked = vam
            .logits(&mut tape, &arena, &img, &gold, None, &mut probes)
            .unwrap();

        // Plain conv -> Seq_I -> Dec_T with no adapters anywhere.
        let mut tape2 = Tape::new();
        let e = vam
            .ocr
            .encode_image(&mut tape2, &arena, &img, &mut probes)
            .unwrap();
        let s = vam
            .ocr
            .encode_image_sequence(&mut tape2, &arena, e, None, &mut probes)
            .unwrap();
        let plain = vam
            .mt
            .dec
            .logits(&mut tape2, &arena, s.id, &gold, None, &mut probes)
            .unwrap();
        assert_eq!(tape.values(hooked), tape2.values(plain));
    }

    #[test]
    fn vanilla_adapter_trainable_ledger() {
        let mut arena = ParamArena::<f64>::new();
        let init = RngStream::new(7, "init");
        let dims = ModelDims {
            d: 8,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
        };
        let ocr =
            OcrModel::build(&mut arena, "ocr", dims, toy_vocab(VocabSide::Source), &init).unwrap();
        let mt = MtModel::build(
            &mut arena,
            "mt",
            dims,
            toy_vocab(VocabSide::Source),
            toy_vocab(VocabSide::Target),
            &init,
        )
        .unwrap();
        let vam = VanillaAdapterModel::build(&mut arena, ocr, mt, 4, &init).unwrap();
        VanillaAdapterModel::apply_freeze_policy(&mut arena);
        // 2 encoder layers x 2 points + 2 decoder layers x 3 points = 10.
        let d = 8;
        let r = 4;
        assert_eq!(vam.expected_trainable(), 10 * (d * r + r + r * d + d));
        assert_eq!(arena.trainable_params(), vam.expected_trainable());
        assert!(VanillaAdapterModel::build(
            &mut arena,
            vam.ocr.clone(),
            vam.mt.clone(),
            8,
            &init
        )
        .is_err());
    }

    #[test]
    fn trainable_set_is_exactly_the_adapter() {
        let mut arena = ParamArena::<f64>::new();
        let _bm = build_bridged(&mut arena, Placement::Emb, AdapterVariant::SelfAttention);
        BridgedModel::apply_freeze_policy(&mut arena);
        let trainable: Vec<_> = arena.trainable_names();
        assert!(!trainable.is_empty());
        assert!(trainable.iter().all(|n| n.starts_with("adapter.")));
        let adapter_ids = arena.ids_with_prefix("adapter.");
        assert_eq!(trainable.len(), adapter_ids.len());
    }
}
