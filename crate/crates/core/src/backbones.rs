//! The OCR and MT backbones: a conv + transformer recognition stack and a
//! transformer translation stack, each decomposed into an embedding-level
//! encoder, a sequential encoder, and an autoregressive decoder head.
//!
//! Desk image contract: glyphs are 8x8, images are `8 x (8 * chars) x 1`,
//! and the conv stack collapses height 8 -> 1 while halving width once, so
//! the image embedding has 4 positions per glyph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, DecoderLayer, DropoutState, EmbeddingTable, EncoderLayer};
use crate::params::{ParamArena, ParamId};
use crate::rng::RngStream;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{Element, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

pub const IMG_HEIGHT: usize = 8;
pub const GLYPH_WIDTH: usize = 8;

// ---- vocabulary and sequences ------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VocabSide {
    Source,
    Target,
}

/// Ordered token list; ids 0..4 are PAD, BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub side: VocabSide,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(side: VocabSide, content: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(content);
        Self { side, tokens }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn is_content(&self, id: usize) -> bool {
        (NUM_SPECIALS..self.size()).contains(&id)
    }
}

/// Token ids (content only, no BOS/EOS framing), tagged with the vocabulary
/// side they index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub side: VocabSide,
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(side: VocabSide, ids: Vec<usize>) -> Self {
        Self { side, ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A rasterized source sentence: grayscale intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub source_text: String,
}

impl TextImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, source_text: String) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Input(format!(
                "image buffer {} does not match {height}x{width}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("pixel intensity outside [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
            source_text,
        })
    }
}

// ---- tape-resident feature sequences -----------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureOrigin {
    ImageSeq,
    TextEmb,
    TextSeq,
    AdapterOut,
}

/// A `len x d` activation matrix on a tape, tagged with its role.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSeq {
    pub id: TensorId,
    pub len: usize,
    pub origin: FeatureOrigin,
}

/// Conv-stack output before the sequential encoder.
#[derive(Debug, Clone, Copy)]
pub struct ImageEmbedding {
    pub id: TensorId,
    pub len: usize,
}

// ---- instrumentation ----------------------------------------------------------

/// Forward-graph counters used to audit which modules each system touches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Probes {
    pub conv_calls: u64,
    pub seq_i_calls: u64,
    pub seq_t_calls: u64,
    pub dec_i_calls: u64,
    pub dec_t_calls: u64,
    pub decode_loops: u64,
    pub decode_steps: u64,
}

impl Probes {
    pub fn merge(&mut self, other: &Probes) {
        self.conv_calls += other.conv_calls;
        self.seq_i_calls += other.seq_i_calls;
        self.seq_t_calls += other.seq_t_calls;
        self.dec_i_calls += other.dec_i_calls;
        self.dec_t_calls += other.dec_t_calls;
        self.decode_loops += other.decode_loops;
        self.decode_steps += other.decode_steps;
    }
}

// ---- configuration -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

// ---- building blocks -----------------------------------------------------------

fn xavier_conv<T: Element>(
    arena: &mut ParamArena<T>,
    name: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    init: &RngStream,
) -> ParamId {
    let fan_in = kh * kw * cin;
    let fan_out = kh * kw * cout;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = init.substream(name);
    let values: Vec<T> = (0..kh * kw * cin * cout)
        .map(|_| T::lit(rng.uniform(-bound, bound)))
        .collect();
    arena.insert(
        name,
        Tensor::new(vec![kh, kw, cin, cout], values).expect("sized"),
    )
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: (usize, usize),
}

/// Three 3x3 conv layers, channels `1 -> d/4 -> d/2 -> d`, strides
/// `(2,2), (2,1), (2,1)`, padding 1, relu after each.
#[derive(Debug, Clone)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
    pub d: usize,
}

impl ConvStack {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        d: usize,
        init: &RngStream,
    ) -> Result<Self> {
        if d % 4 != 0 {
            return Err(Error::Config(format!("conv stack needs d % 4 == 0, got {d}")));
        }
        let plan = [(1, d / 4, (2, 2)), (d / 4, d / 2, (2, 1)), (d / 2, d, (2, 1))];
        let mut layers = Vec::with_capacity(plan.len());
        for (i, (cin, cout, stride)) in plan.into_iter().enumerate() {
            layers.push(ConvLayer {
                w: xavier_conv(arena, &format!("{prefix}.{i}.w"), 3, 3, cin, cout, init),
                b: nn::const_param(arena, &format!("{prefix}.{i}.b"), vec![cout], 0.0),
                stride,
            });
        }
        Ok(Self { layers, d })
    }

    /// Run the stack on an `[h, w, 1]` image node; returns `[w_out, d]`.
    /// Rows are normalized at the end: stacked relu layers leave the raw
    /// features more than an order of magnitude smaller than the positional
    /// encodings added on top, which starves the sequential encoder of
    /// content signal.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        image: TensorId,
    ) -> Result<TensorId> {
        let mut x = image;
        for layer in &self.layers {
            let w = tape.param(arena, layer.w);
            let conv = tape.conv2d(x, w, layer.stride, 1)?;
            let [h, w, c] = tape.shape(conv)[..] else {
                unreachable!("conv2d yields rank 3")
            };
            let flat = tape.reshape(conv, vec![h * w, c])?;
            let b = tape.param(arena, layer.b);
            let biased = tape.add_bias(flat, b)?;
            let act = tape.relu(biased)?;
            x = tape.reshape(act, vec![h, w, c])?;
        }
        let [h, w, c] = tape.shape(x)[..] else {
            unreachable!()
        };
        debug_assert_eq!(h, 1, "conv stack collapses height to 1");
        let flat = tape.reshape(x, vec![h * w, c])?;
        Ok(tape.row_norm(flat, crate::nn::LAYER_NORM_EPS)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackKind {
    ImageSeq,
    TextSeq,
    OcrDecoder,
    MtDecoder,
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub kind: StackKind,
}

impl EncoderStack {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        kind: StackKind,
        n_layers: usize,
        d: usize,
        heads: usize,
        init: &RngStream,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::build(arena, &format!("{prefix}.{i}"), d, heads, init))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, kind })
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        x: TensorId,
        mut dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<TensorId> {
        match self.kind {
            StackKind::ImageSeq => probes.seq_i_calls += 1,
            StackKind::TextSeq => probes.seq_t_calls += 1,
            _ => {}
        }
        let mut h = x;
        for layer in &self.layers {
            h = nn::encoder_layer_forward(tape, arena, layer, h, None, dropout.as_deref_mut())?;
        }
        Ok(h)
    }
}

/// Autoregressive decoder: target embedding, stacked decoder layers, and a
/// bias-free output projection to vocabulary logits.
#[derive(Debug, Clone)]
pub struct DecoderHead {
    pub layers: Vec<DecoderLayer>,
    pub embed: EmbeddingTable,
    pub proj: ParamId,
    pub kind: StackKind,
    pub d: usize,
    pub vocab_size: usize,
}

impl DecoderHead {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        kind: StackKind,
        n_layers: usize,
        d: usize,
        heads: usize,
        vocab_size: usize,
        init: &RngStream,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::build(arena, &format!("{prefix}.{i}"), d, heads, init))
            .collect::<Result<Vec<_>>>()?;
        let embed = EmbeddingTable::build(arena, &format!("{prefix}.embed"), vocab_size, d, init);
        let proj = nn::xavier_param(arena, &format!("{prefix}.proj"), d, vocab_size, init);
        Ok(Self {
            layers,
            embed,
            proj,
            kind,
            d,
            vocab_size,
        })
    }

    fn stack_forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        input_ids: &[usize],
        memory: TensorId,
        mut dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<TensorId> {
        match self.kind {
            StackKind::OcrDecoder => probes.dec_i_calls += 1,
            StackKind::MtDecoder => probes.dec_t_calls += 1,
            _ => {}
        }
        let mask = nn::causal_mask::<T>(input_ids.len());
        let mut h = embed_ids(tape, arena, &self.embed, input_ids)?;
        for layer in &self.layers {
            h = nn::decoder_layer_forward(
                tape,
                arena,
                layer,
                h,
                memory,
                &mask,
                dropout.as_deref_mut(),
            )?;
        }
        Ok(h)
    }

    /// Teacher-forced pre-softmax logits: input is BOS-prefixed `gold`
    /// shifted right, so row `t` scores gold position `t`.
    pub fn logits<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        memory: TensorId,
        gold: &[usize],
        dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<TensorId> {
        if gold.is_empty() {
            return Err(Error::Input("teacher forcing needs a nonempty gold".into()));
        }
        let mut input = Vec::with_capacity(gold.len());
        input.push(BOS);
        input.extend_from_slice(&gold[..gold.len() - 1]);
        let h = self.stack_forward(tape, arena, &input, memory, dropout, probes)?;
        let proj = tape.param(arena, self.proj);
        Ok(tape.matmul(h, proj)?)
    }

    /// Greedy decode: argmax per step, stop at EOS or `max_len`. Returns
    /// content tokens without BOS/EOS. The prefix is re-encoded each step.
    pub fn greedy_decode<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        memory: TensorId,
        max_len: usize,
        probes: &mut Probes,
    ) -> Result<Vec<usize>> {
        let vocab = self.vocab_size;
        greedy_loop(max_len, probes, |input, probes| {
            let h = self.stack_forward(tape, arena, input, memory, None, probes)?;
            let proj = tape.param(arena, self.proj);
            let logits = tape.matmul(h, proj)?;
            let values = tape.values(logits);
            Ok(values[(input.len() - 1) * vocab..input.len() * vocab].to_vec())
        })
    }
}

/// One decode loop: BOS-prefixed prefix per step, argmax emission, stop at
/// EOS or `max_len`. `step_logits` returns the last position's logits.
pub(crate) fn greedy_loop<T: Element>(
    max_len: usize,
    probes: &mut Probes,
    mut step_logits: impl FnMut(&[usize], &mut Probes) -> Result<Vec<T>>,
) -> Result<Vec<usize>> {
    if max_len < 1 {
        return Err(Error::Input(format!("max_len {max_len} must be >= 1")));
    }
    probes.decode_loops += 1;
    let mut out: Vec<usize> = Vec::new();
    for _ in 0..max_len {
        probes.decode_steps += 1;
        let mut input = Vec::with_capacity(out.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&out);
        let row = step_logits(&input, probes)?;
        let tok = argmax(&row);
        if tok == EOS {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Token embedding scaled by sqrt(d) plus sinusoidal positions.
pub(crate) fn embed_ids<T: Element>(
    tape: &mut Tape<T>,
    arena: &ParamArena<T>,
    table: &EmbeddingTable,
    ids: &[usize],
) -> Result<TensorId> {
    let t = tape.param(arena, table.table);
    let g = tape.gather(t, ids)?;
    let scaled = tape.mul_scalar(g, T::lit((table.d as f64).sqrt()))?;
    let pe = nn::positional_encoding::<T>(ids.len(), table.d)?;
    let pec = tape.constant(&pe);
    Ok(tape.add(scaled, pec)?)
}

// ---- OCR model -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OcrModel {
    pub conv: ConvStack,
    pub seq: EncoderStack,
    pub dec: DecoderHead,
    pub dims: ModelDims,
    pub vocab: Vocab,
}

impl OcrModel {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        dims: ModelDims,
        vocab: Vocab,
        init: &RngStream,
    ) -> Result<Self> {
        Ok(Self {
            conv: ConvStack::build(arena, &format!("{prefix}.conv"), dims.d, init)?,
            seq: EncoderStack::build(
                arena,
                &format!("{prefix}.seq"),
                StackKind::ImageSeq,
                dims.enc_layers,
                dims.d,
                dims.heads,
                init,
            )?,
            dec: DecoderHead::build(
                arena,
                &format!("{prefix}.dec"),
                StackKind::OcrDecoder,
                dims.dec_layers,
                dims.d,
                dims.heads,
                vocab.size(),
                init,
            )?,
            dims,
            vocab,
        })
    }

    /// Conv features plus positional encodings, reshaped to `[W/2, d]`.
    pub fn encode_image<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        img: &TextImage,
        probes: &mut Probes,
    ) -> Result<ImageEmbedding> {
        if img.height != IMG_HEIGHT {
            return Err(Error::Input(format!(
                "image height {} unsupported; this preset fixes height {IMG_HEIGHT}",
                img.height
            )));
        }
        probes.conv_calls += 1;
        let pixels: Vec<T> = img.pixels.iter().map(|p| T::lit(f64::from(*p))).collect();
        let leaf = tape.leaf(vec![img.height, img.width, 1], pixels, false)?;
        let feats = self.conv.forward(tape, arena, leaf)?;
        let len = tape.shape(feats)[0];
        let pe = nn::positional_encoding::<T>(len, self.dims.d)?;
        let pec = tape.constant(&pe);
        let id = tape.add(feats, pec)?;
        Ok(ImageEmbedding { id, len })
    }

    pub fn encode_image_sequence<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        e: ImageEmbedding,
        dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<FeatureSeq> {
        let id = self.seq.forward(tape, arena, e.id, dropout, probes)?;
        Ok(FeatureSeq {
            id,
            len: e.len,
            origin: FeatureOrigin::ImageSeq,
        })
    }

    pub fn greedy_decode<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        s: FeatureSeq,
        max_len: usize,
        probes: &mut Probes,
    ) -> Result<TokenSeq> {
        if s.origin != FeatureOrigin::ImageSeq {
            return Err(Error::Input(format!(
                "OCR decoder expects image sequential features, got {:?}",
                s.origin
            )));
        }
        let ids = self.dec.greedy_decode(tape, arena, s.id, max_len, probes)?;
        Ok(TokenSeq::new(VocabSide::Source, ids))
    }

    /// Full recognition pass on a fresh tape.
    pub fn recognize<T: Element>(
        &self,
        arena: &ParamArena<T>,
        img: &TextImage,
        max_len: usize,
        probes: &mut Probes,
    ) -> Result<TokenSeq> {
        let mut tape = Tape::new();
        let e = self.encode_image(&mut tape, arena, img, probes)?;
        let s = self.encode_image_sequence(&mut tape, arena, e, None, probes)?;
        self.greedy_decode(&mut tape, arena, s, max_len, probes)
    }
}

// ---- MT model ------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MtModel {
    pub src_embed: EmbeddingTable,
    pub seq: EncoderStack,
    pub dec: DecoderHead,
    pub dims: ModelDims,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

impl MtModel {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        dims: ModelDims,
        src_vocab: Vocab,
        tgt_vocab: Vocab,
        init: &RngStream,
    ) -> Result<Self> {
        Ok(Self {
            src_embed: EmbeddingTable::build(
                arena,
                &format!("{prefix}.src_embed"),
                src_vocab.size(),
                dims.d,
                init,
            ),
            seq: EncoderStack::build(
                arena,
                &format!("{prefix}.seq"),
                StackKind::TextSeq,
                dims.enc_layers,
                dims.d,
                dims.heads,
                init,
            )?,
            dec: DecoderHead::build(
                arena,
                &format!("{prefix}.dec"),
                StackKind::MtDecoder,
                dims.dec_layers,
                dims.d,
                dims.heads,
                tgt_vocab.size(),
                init,
            )?,
            dims,
            src_vocab,
            tgt_vocab,
        })
    }

    /// Word embeddings scaled by sqrt(d) plus positions; the contrastive
    /// target for the embedding-level adapter placement.
    pub fn embed_text<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        t: &TokenSeq,
    ) -> Result<FeatureSeq> {
        if t.is_empty() {
            return Err(Error::Input("cannot embed an empty token sequence".into()));
        }
        if let Some(&bad) = t.ids.iter().find(|&&id| id >= self.src_vocab.size()) {
            return Err(Error::Input(format!(
                "token id {bad} outside source vocabulary of {}",
                self.src_vocab.size()
            )));
        }
        let id = embed_ids(tape, arena, &self.src_embed, &t.ids)?;
        Ok(FeatureSeq {
            id,
            len: t.len(),
            origin: FeatureOrigin::TextEmb,
        })
    }

    pub fn encode_text<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        e: FeatureSeq,
        dropout: Option<&mut DropoutState>,
        probes: &mut Probes,
    ) -> Result<FeatureSeq> {
        if e.origin != FeatureOrigin::TextEmb {
            return Err(Error::Input(format!(
                "text sequential encoder expects text embeddings, got {:?}",
                e.origin
            )));
        }
        let id = self.seq.forward(tape, arena, e.id, dropout, probes)?;
        Ok(FeatureSeq {
            id,
            len: e.len,
            origin: FeatureOrigin::TextSeq,
        })
    }

    /// Greedy decode over text sequential features or adapter output (the
    /// sequence-level placement feeds the decoder directly).
    pub fn greedy_decode<T: Element>(
        &self,
        tape: &mut Tape<T>,
        arena: &ParamArena<T>,
        s: FeatureSeq,
        max_len: usize,
        probes: &mut Probes,
    ) -> Result<TokenSeq> {
        if !matches!(s.origin, FeatureOrigin::TextSeq | FeatureOrigin::AdapterOut) {
            return Err(Error::Input(format!(
                "MT decoder expects text sequential or adapter features, got {:?}",
                s.origin
            )));
        }
        let ids = self.dec.greedy_decode(tape, arena, s.id, max_len, probes)?;
        Ok(TokenSeq::new(VocabSide::Target, ids))
    }

    /// Pure-text translation on a fresh tape; the memory construction here
    /// is the same code path teacher forcing and the cascade use.
    pub fn translate<T: Element>(
        &self,
        arena: &ParamArena<T>,
        t: &TokenSeq,
        max_len: usize,
        probes: &mut Probes,
    ) -> Result<TokenSeq> {
        let mut tape = Tape::new();
        let e = self.embed_text(&mut tape, arena, t)?;
        let s = self.encode_text(&mut tape, arena, e, None, probes)?;
        self.greedy_decode(&mut tape, arena, s, max_len, probes)
    }
}

/// Teacher-forced logits for any decoder head over any memory.
pub fn decoder_logits<T: Element>(
    tape: &mut Tape<T>,
    arena: &ParamArena<T>,
    head: &DecoderHead,
    memory: TensorId,
    gold: &[usize],
    dropout: Option<&mut DropoutState>,
    probes: &mut Probes,
) -> Result<TensorId> {
    head.logits(tape, arena, memory, gold, dropout, probes)
}
