//! Transformer building blocks: linear layers, layer norm, multi-head
//! attention, feed-forward nets, embeddings, sinusoidal positions, masks,
//! and dropout state.
//!
//! Backbone layers use the standard post-norm residual order
//! `LN(x + Sublayer(x))`. The adapter stack in [`crate::bridge`] wires the
//! same sublayers in its own order.

use crate::error::{Error, Result};
use crate::params::{ParamArena, ParamId};
use crate::rng::RngStream;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const FFN_MULT: usize = 4;

// ---- parameter construction ------------------------------------------------

/// Xavier-uniform matrix parameter; the stream is derived from the parameter
/// name so initialization is independent of construction order.
pub fn xavier_param<T: Element>(
    arena: &mut ParamArena<T>,
    name: &str,
    rows: usize,
    cols: usize,
    init: &RngStream,
) -> ParamId {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = init.substream(name);
    let values: Vec<T> = (0..rows * cols)
        .map(|_| T::lit(rng.uniform(-bound, bound)))
        .collect();
    arena.insert(name, Tensor::new(vec![rows, cols], values).expect("sized"))
}

pub fn const_param<T: Element>(
    arena: &mut ParamArena<T>,
    name: &str,
    shape: Vec<usize>,
    value: f64,
) -> ParamId {
    arena.insert(name, Tensor::full(shape, T::lit(value)))
}

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        init: &RngStream,
    ) -> Self {
        Self {
            w: xavier_param(arena, &format!("{prefix}.w"), d_in, d_out, init),
            b: const_param(arena, &format!("{prefix}.b"), vec![d_out], 0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn build<T: Element>(arena: &mut ParamArena<T>, prefix: &str, d: usize) -> Self {
        Self {
            gamma: const_param(arena, &format!("{prefix}.gamma"), vec![d], 1.0),
            beta: const_param(arena, &format!("{prefix}.beta"), vec![d], 0.0),
            eps: LAYER_NORM_EPS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhaParams {
    pub d: usize,
    pub n_heads: usize,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
}

impl MhaParams {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        d: usize,
        n_heads: usize,
        init: &RngStream,
    ) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            d,
            n_heads,
            q: LinearParams::build(arena, &format!("{prefix}.q"), d, d, init),
            k: LinearParams::build(arena, &format!("{prefix}.k"), d, d, init),
            v: LinearParams::build(arena, &format!("{prefix}.v"), d, d, init),
            o: LinearParams::build(arena, &format!("{prefix}.o"), d, d, init),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

impl FfnParams {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        d: usize,
        init: &RngStream,
    ) -> Self {
        Self {
            lin1: LinearParams::build(arena, &format!("{prefix}.lin1"), d, FFN_MULT * d, init),
            lin2: LinearParams::build(arena, &format!("{prefix}.lin2"), FFN_MULT * d, d, init),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MhaParams,
    pub ffn: FfnParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl EncoderLayer {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        d: usize,
        n_heads: usize,
        init: &RngStream,
    ) -> Result<Self> {
        Ok(Self {
            attn: MhaParams::build(arena, &format!("{prefix}.attn"), d, n_heads, init)?,
            ffn: FfnParams::build(arena, &format!("{prefix}.ffn"), d, init),
            ln1: LayerNormParams::build(arena, &format!("{prefix}.ln1"), d),
            ln2: LayerNormParams::build(arena, &format!("{prefix}.ln2"), d),
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MhaParams,
    pub cross_attn: MhaParams,
    pub ffn: FfnParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ln3: LayerNormParams,
}

impl DecoderLayer {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        prefix: &str,
        d: usize,
        n_heads: usize,
        init: &RngStream,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MhaParams::build(arena, &format!("{prefix}.self"), d, n_heads, init)?,
            cross_attn: MhaParams::build(arena, &format!("{prefix}.cross"), d, n_heads, init)?,
            ffn: FfnParams::build(arena, &format!("{prefix}.ffn"), d, init),
            ln1: LayerNormParams::build(arena, &format!("{prefix}.ln1"), d),
            ln2: LayerNormParams::build(arena, &format!("{prefix}.ln2"), d),
            ln3: LayerNormParams::build(arena, &format!("{prefix}.ln3"), d),
        })
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub d: usize,
}

impl EmbeddingTable {
    pub fn build<T: Element>(
        arena: &mut ParamArena<T>,
        name: &str,
        vocab_size: usize,
        d: usize,
        init: &RngStream,
    ) -> Self {
        Self {
            table: xavier_param(arena, name, vocab_size, d, init),
            vocab_size,
            d,
        }
    }
}

// ---- dropout ----------------------------------------------------------------

/// Training-time dropout state; absent entirely during evaluation.
#[derive(Debug)]
pub struct DropoutState {
    pub rate: f64,
    pub stream: RngStream,
}

impl DropoutState {
    pub fn new(rate: f64, stream: RngStream) -> Self {
        Self { rate, stream }
    }
}

pub fn apply_dropout<T: Element>(
    tape: &mut Tape<T>,
    x: TensorId,
    dropout: Option<&mut DropoutState>,
) -> Result<TensorId> {
    match dropout {
        Some(state) => Ok(tape.dropout(x, state.rate, &mut state.stream)?),
        None => Ok(x),
    }
}

// ---- forward passes ----------------------------------------------------------

pub fn linear<T: Element>(
    tape: &mut Tape<T>,
    arena: &ParamArena<T>,
    p: &LinearParams,
    x: TensorId,
) -> Result<TensorId> {
    let w = tape.param(arena, p.w);
    let y = tape.matmul(x, w)?;
    let b = tape.param(arena, p.b);
    Ok(tape.add_bias(y, b)?)
}

/// Per row: `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layer_norm<T: Element>(
    tape: &mut Tape<T>,
    arena: &ParamArena<T>,
    p: &LayerNormParams,
    x: TensorId,
) -> Result<TensorId> {
    let normed = tape.row_norm(x, p.eps)?;
    let gamma = tape.param(arena, p.gamma);
    let scaled = tape.mul_bias(normed, gamma)?;
    let beta = tape.param(arena, p.beta);
    Ok(tape.add_bias(scaled, beta)?)
}

pub fn ffn_forward<T: Element>(
    tape: &mut Tape<T>,
    arena: &ParamArena<T>,
    p: &FfnParams,
    x: TensorId,
) -> Result<TensorId> {
    let h = linear(tape, arena, &p.lin1, x)?;
    let a = tape.relu(h)?;
    linear(tape, arena, &p.lin2, a)
}

/// Scaled dot-product attention over `n_heads` column blocks. Masked
/// positions receive -1e9 additively before the softmax.
pub fn multi_head_attention<T: Element>(
    tape: &mut Tape<T>,
    arena: &ParamArena<T>,
    p: &MhaParams,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    mask: Option<&Tensor<T>>,
) -> Result<TensorId> {
    let dh = p.d / p.n_heads;
    let qp = linear(tape, arena, &p.q, q)?;
    let kp = linear(tape, arena, &p.k, k)?;
    let vp = linear(tape, arena, &p.v, v)?;
    let sizes = vec![dh; p.n_heads];
    let qh = tape.split(qp, 1, &sizes)?;
    let kh = tape.split(kp, 1, &sizes)?;
    let vh = tape.split(vp, 1, &sizes)?;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let kt = tape.transpose(kh[h])?;
        let scores = tape.matmul(qh[h], kt)?;
        let scaled = tape.mul_scalar(scores, scale)?;
        let masked = match mask {
            Some(m) => tape.mask_add(scaled, m)?,
            None => scaled,
        };
        let attn = tape.softmax(masked, 1)?;
        heads.push(tape.matmul(attn, vh[h])?);
    }
    let cat = tape.concat(&heads, 1)?;
    linear(tape, arena, &p.o, cat)
}

/// Post-norm encoder layer: `LN(x + MSA(x))` then `LN(. + FFN(.))`.
pub fn encoder_layer_forward<T: Element>(
    tape: &mut Tape<T>,
    arena: &ParamArena<T>,
    layer: &EncoderLayer,
    x: TensorId,
    mask: Option<&Tensor<T>>,
    mut dropout: Option<&mut DropoutState>,
) -> Result<TensorId> {
    let a = multi_head_attention(tape, arena, &layer.attn, x, x, x, mask)?;
    let a = apply_dropout(tape, a, dropout.as_deref_mut())?;
    let res = tape.add(x, a)?;
    let h = layer_norm(tape, arena, &layer.ln1, res)?;
    let f = ffn_forward(tape, arena, &layer.ffn, h)?;
    let f = apply_dropout(tape, f, dropout)?;
    let res2 = tape.add(h, f)?;
    layer_norm(tape, arena, &layer.ln2, res2)
}

/// Post-norm decoder layer: masked self-attention, cross-attention over the
/// memory, then the feed-forward net.
pub fn decoder_layer_forward<T: Element>(
    tape: &mut Tape<T>,
    arena: &ParamArena<T>,
    layer: &DecoderLayer,
    x: TensorId,
    memory: TensorId,
    self_mask: &Tensor<T>,
    mut dropout: Option<&mut DropoutState>,
) -> Result<TensorId> {
    let s = multi_head_attention(tape, arena, &layer.self_attn, x, x, x, Some(self_mask))?;
    let s = apply_dropout(tape, s, dropout.as_deref_mut())?;
    let r1 = tape.add(x, s)?;
    let h1 = layer_norm(tape, arena, &layer.ln1, r1)?;
    let c = multi_head_attention(tape, arena, &layer.cross_attn, h1, memory, memory, None)?;
    let c = apply_dropout(tape, c, dropout.as_deref_mut())?;
    let r2 = tape.add(h1, c)?;
    let h2 = layer_norm(tape, arena, &layer.ln2, r2)?;
    let f = ffn_forward(tape, arena, &layer.ffn, h2)?;
    let f = apply_dropout(tape, f, dropout)?;
    let r3 = tape.add(h2, f)?;
    layer_norm(tape, arena, &layer.ln3, r3)
}

/// Sinusoidal position table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(...)`. `d` must be even.
pub fn positional_encoding<T: Element>(len: usize, d: usize) -> Result<Tensor<T>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even dim, got {d}"
        )));
    }
    let mut values = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            values[pos * d + i] = T::lit(angle.sin());
            values[pos * d + i + 1] = T::lit(angle.cos());
        }
    }
    Ok(Tensor::new(vec![len, d], values).expect("sized"))
}

/// Additive causal mask: 0 where `j <= i`, -1e9 above the diagonal.
pub fn causal_mask<T: Element>(n: usize) -> Tensor<T> {
    assert!(n >= 1, "causal mask needs n >= 1");
    let mut values = vec![T::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            values[i * n + j] = T::lit(-1e9);
        }
    }
    Tensor::new(vec![n, n], values).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;

    fn init() -> RngStream {
        RngStream::new(42, "init")
    }

    fn rand_mat(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor<f64> {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut arena = ParamArena::<f64>::new();
        let p = LayerNormParams::build(&mut arena, "ln", 4);
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1, 4], vec![5.0; 4], false).unwrap();
        let y = layer_norm(&mut tape, &arena, &p, x).unwrap();
        assert_eq!(tape.values(y), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut arena = ParamArena::<f64>::new();
        let p = LayerNormParams::build(&mut arena, "ln", 2);
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1, 2], vec![1.0, -1.0], false).unwrap();
        let y = layer_norm(&mut tape, &arena, &p, x).unwrap();
        let expect = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((tape.values(y)[0] - expect).abs() < 1e-12);
        assert!((tape.values(y)[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_dim_mismatch() {
        let mut arena = ParamArena::<f64>::new();
        let p = LayerNormParams::build(&mut arena, "ln", 4);
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2, 3], vec![0.0; 6], false).unwrap();
        assert!(layer_norm(&mut tape, &arena, &p, x).is_err());
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = RngStream::new(9, "ln-grad");
        let mut arena = ParamArena::<f64>::new();
        let p = LayerNormParams::build(&mut arena, "ln", 8);
        // Nudge gamma/beta off their init so the check is not at a special point.
        for v in arena.tensor_mut(p.gamma).values_mut() {
            *v = 1.3;
        }
        let x = rand_mat(4, 8, &mut rng);
        let readout = rand_mat(4, 8, &mut rng);
        let err = grad_check(
            |tape, x| {
                let y = layer_norm(tape, &arena, &p, x)?;
                let r = tape.constant(&readout);
                let w = tape.mul_elem(y, r)?;
                Ok(tape.sum_all(w)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn mha_single_key_returns_value_row() {
        let d = 4;
        let mut arena = ParamArena::<f64>::new();
        let p = MhaParams::build(&mut arena, "mha", d, 1, &init()).unwrap();
        // Identity projections.
        for lin in [&p.q, &p.k, &p.v, &p.o] {
            let w = arena.tensor_mut(lin.w).values_mut();
            for i in 0..d {
                for j in 0..d {
                    w[i * d + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        let mut tape = Tape::new();
        let q = tape
            .leaf(vec![2, d], vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.0, -0.5, 0.25], false)
            .unwrap();
        let kv = tape.leaf(vec![1, d], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let out = multi_head_attention(&mut tape, &arena, &p, q, kv, kv, None).unwrap();
        assert_eq!(tape.values(out), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn mha_shape_contract() {
        let mut arena = ParamArena::<f64>::new();
        let p = MhaParams::build(&mut arena, "mha", 8, 2, &init()).unwrap();
        let mut rng = RngStream::new(2, "mha");
        let mut tape = Tape::new();
        let q = tape.var(&rand_mat(3, 8, &mut rng));
        let kv = tape.var(&rand_mat(5, 8, &mut rng));
        let out = multi_head_attention(&mut tape, &arena, &p, q, kv, kv, None).unwrap();
        assert_eq!(tape.shape(out), &[3, 8]);
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let mut arena = ParamArena::<f64>::new();
        assert!(MhaParams::build(&mut arena, "mha", 10, 3, &init()).is_err());
    }

    #[test]
    fn mha_gradient() {
        let mut rng = RngStream::new(5, "mha-grad");
        let mut arena = ParamArena::<f64>::new();
        let p = MhaParams::build(&mut arena, "mha", 8, 2, &init()).unwrap();
        let x = rand_mat(3, 8, &mut rng);
        let readout = rand_mat(3, 8, &mut rng);
        let err = grad_check(
            |tape, x| {
                let y = multi_head_attention(tape, &arena, &p, x, x, x, None)?;
                let r = tape.constant(&readout);
                let w = tape.mul_elem(y, r)?;
                Ok(tape.sum_all(w)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn encoder_layer_zeroed_weights_is_double_layer_norm() {
        let d = 4;
        let mut arena = ParamArena::<f64>::new();
        let layer = EncoderLayer::build(&mut arena, "enc", d, 2, &init()).unwrap();
        for (_, e) in arena.iter() {
            assert!(e.tensor.all_finite());
        }
        // Zero every weight; LN gammas stay 1, betas 0.
        for (id, e) in arena
            .iter()
            .map(|(id, e)| (id, e.name.clone()))
            .collect::<Vec<_>>()
        {
            if !e.contains("ln") {
                for v in arena.tensor_mut(id).values_mut() {
                    *v = 0.0;
                }
            }
        }
        let x_vals = vec![0.5, -1.0, 2.0, 0.25, 1.0, 0.0, -0.5, 0.75];
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2, d], x_vals.clone(), false).unwrap();
        let y = encoder_layer_forward(&mut tape, &arena, &layer, x, None, None).unwrap();
        assert_eq!(tape.shape(y), &[2, d]);

        let ln = LayerNormParams::build(&mut ParamArena::<f64>::new(), "probe", d);
        let mut probe = Tape::new();
        let ln_arena = {
            let mut a = ParamArena::<f64>::new();
            let _ = LayerNormParams::build(&mut a, "probe", d);
            a
        };
        let px = probe.leaf(vec![2, d], x_vals, false).unwrap();
        let once = layer_norm(&mut probe, &ln_arena, &ln, px).unwrap();
        let twice = layer_norm(&mut probe, &ln_arena, &ln, once).unwrap();
        assert_eq!(tape.values(y), probe.values(twice));
    }

    #[test]
    fn encoder_layer_single_position_is_finite() {
        let mut arena = ParamArena::<f64>::new();
        let layer = EncoderLayer::build(&mut arena, "enc", 8, 2, &init()).unwrap();
        let mut rng = RngStream::new(3, "enc1");
        let mut tape = Tape::new();
        let x = tape.var(&rand_mat(1, 8, &mut rng));
        let y = encoder_layer_forward(&mut tape, &arena, &layer, x, None, None).unwrap();
        assert_eq!(tape.shape(y), &[1, 8]);
        assert!(tape.values(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_layer_gradient() {
        let mut rng = RngStream::new(8, "enc-grad");
        let mut arena = ParamArena::<f64>::new();
        let layer = EncoderLayer::build(&mut arena, "enc", 16, 4, &init()).unwrap();
        let x = rand_mat(6, 16, &mut rng);
        let readout = rand_mat(6, 16, &mut rng);
        let err = grad_check(
            |tape, x| {
                let y = encoder_layer_forward(tape, &arena, &layer, x, None, None)?;
                let r = tape.constant(&readout);
                let w = tape.mul_elem(y, r)?;
                Ok(tape.sum_all(w)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn decoder_layer_shapes_and_gradient() {
        let mut rng = RngStream::new(13, "dec");
        let mut arena = ParamArena::<f64>::new();
        let layer = DecoderLayer::build(&mut arena, "dec", 8, 2, &init()).unwrap();

        // l_t = 1 attends only to itself.
        let mut tape = Tape::new();
        let x = tape.var(&rand_mat(1, 8, &mut rng));
        let mem = tape.var(&rand_mat(5, 8, &mut rng));
        let mask = causal_mask::<f64>(1);
        let y = decoder_layer_forward(&mut tape, &arena, &layer, x, mem, &mask, None).unwrap();
        assert_eq!(tape.shape(y), &[1, 8]);

        for l_s in [1usize, 4] {
            let mut tape = Tape::new();
            let x = tape.var(&rand_mat(3, 8, &mut rng));
            let mem = tape.var(&rand_mat(l_s, 8, &mut rng));
            let mask = causal_mask::<f64>(3);
            let y = decoder_layer_forward(&mut tape, &arena, &layer, x, mem, &mask, None).unwrap();
            assert_eq!(tape.shape(y), &[3, 8]);
        }

        let x = rand_mat(3, 8, &mut rng);
        let memory = rand_mat(4, 8, &mut rng);
        let readout = rand_mat(3, 8, &mut rng);
        let mask = causal_mask::<f64>(3);
        let err = grad_check(
            |tape, x| {
                let mem = tape.constant(&memory);
                let y = decoder_layer_forward(tape, &arena, &layer, x, mem, &mask, None)?;
                let r = tape.constant(&readout);
                let w = tape.mul_elem(y, r)?;
                Ok(tape.sum_all(w)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn decoder_causality_is_exact() {
        // Perturbing input position j > i leaves output rows <= i untouched.
        let mut rng = RngStream::new(17, "causal");
        let mut arena = ParamArena::<f64>::new();
        let layer = DecoderLayer::build(&mut arena, "dec", 8, 2, &init()).unwrap();
        let x = rand_mat(4, 8, &mut rng);
        let mem = rand_mat(3, 8, &mut rng);
        let mask = causal_mask::<f64>(4);

        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xi = tape.constant(x);
            let mi = tape.constant(&mem);
            let y = decoder_layer_forward(&mut tape, &arena, &layer, xi, mi, &mask, None).unwrap();
            tape.values(y).to_vec()
        };
        let base = run(&x);
        let mut perturbed = x.clone();
        perturbed.values_mut()[2 * 8 + 3] += 10.0; // position 2
        let out = run(&perturbed);
        assert_eq!(&base[..2 * 8], &out[..2 * 8]);
        assert_ne!(&base[2 * 8..], &out[2 * 8..]);
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding::<f64>(3, 4).unwrap();
        // Row 0 alternates sin(0)=0, cos(0)=1.
        assert_eq!(&pe.values()[..4], &[0.0, 1.0, 0.0, 1.0]);
        // PE[1, 0] = sin(1).
        assert!((pe.values()[4] - 0.841471).abs() < 1e-6);
        assert!(pe.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding::<f64>(3, 5).is_err());
    }

    #[test]
    fn causal_mask_structure() {
        let m1 = causal_mask::<f64>(1);
        assert_eq!(m1.values(), &[0.0]);
        let m3 = causal_mask::<f64>(3);
        for i in 0..3 {
            for j in 0..3 {
                let v = m3.values()[i * 3 + j];
                if j <= i {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, -1e9);
                }
            }
        }
    }

    #[test]
    fn masked_softmax_starves_future_positions() {
        let mut rng = RngStream::new(23, "mask");
        let mask = causal_mask::<f64>(5);
        let mut tape = Tape::<f64>::new();
        let logits = tape
            .leaf(vec![5, 5], (0..25).map(|_| rng.uniform(-3.0, 3.0)).collect(), false)
            .unwrap();
        let masked = tape.mask_add(logits, &mask).unwrap();
        let probs = tape.softmax(masked, 1).unwrap();
        for i in 0..5 {
            let masked_mass: f64 = (i + 1..5).map(|j| tape.values(probs)[i * 5 + j]).sum();
            assert!(masked_mass < 1e-30, "row {i}: {masked_mass}");
        }
    }

    #[test]
    fn blocks_are_deterministic_without_dropout() {
        let mut arena = ParamArena::<f64>::new();
        let layer = EncoderLayer::build(&mut arena, "enc", 8, 2, &init()).unwrap();
        let mut rng = RngStream::new(3, "det");
        let x = rand_mat(4, 8, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.constant(&x);
            let y = encoder_layer_forward(&mut tape, &arena, &layer, xi, None, None).unwrap();
            tape.values(y).to_vec()
        };
        assert_eq!(run(), run());
    }
}
