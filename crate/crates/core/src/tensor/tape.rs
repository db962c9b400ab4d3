//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is a Wengert list: every primitive application appends one
//! record holding the output values and enough saved state to run the
//! backward rule. Records are in execution order; [`Tape::backward`] visits
//! them strictly in reverse, accumulating gradients additively across
//! fan-out. Forward values can be recomputed from the records alone
//! ([`Tape::replay_matches`]), which tests use to pin determinism.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{Element, Result, Tensor, TensorError};
use crate::params::{ParamArena, ParamId};
use crate::rng::RngStream;

/// Handle to a value on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T: Element> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    MulElem(TensorId, TensorId),
    AddScalar(TensorId, T),
    MulScalar(TensorId, T),
    /// `[l, d] + [d]`, the only broadcast the tape admits (leading axis).
    AddBias(TensorId, TensorId),
    /// `[l, d] * [d]`.
    MulBias(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Exp(TensorId),
    Log(TensorId),
    Relu(TensorId),
    Tanh(TensorId),
    Reshape(TensorId),
    Transpose(TensorId),
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAxis {
        x: TensorId,
        axis: usize,
    },
    MeanAxis {
        x: TensorId,
        axis: usize,
    },
    SumAll(TensorId),
    /// Row lookup; non-differentiable w.r.t. the indices.
    Gather {
        table: TensorId,
        ids: Vec<usize>,
    },
    /// Additive mask (0 on open positions, -1e9 on closed ones).
    MaskAdd {
        x: TensorId,
        mask: Vec<T>,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: (usize, usize),
        pad: usize,
    },
    /// Saved mask already carries the inverted 1/keep scaling.
    Dropout {
        x: TensorId,
        mask: Vec<T>,
    },
    Softmax(TensorId),
    LogSoftmax(TensorId),
    RowNorm {
        x: TensorId,
        eps: f64,
    },
    /// Pairwise cosine similarity between the rows of two matrices, with
    /// denominators guarded at 1e-8 so zero vectors yield 0, never NaN.
    CosineSim(TensorId, TensorId),
}

#[derive(Debug)]
struct Node<T: Element> {
    shape: Vec<usize>,
    values: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_leases: HashMap<ParamId, TensorId>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Interpret a shape as rows x cols, treating rank-1 as a single row.
fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_leases: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].values
    }

    pub fn scalar_value(&self, id: TensorId) -> T {
        assert_eq!(self.nodes[id.0].values.len(), 1, "expected scalar node");
        self.nodes[id.0].values[0]
    }

    /// Gradient of the last `backward` call w.r.t. `id`, if one was produced.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn check_id(&self, id: TensorId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::NotOnTape {
                id: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, needs_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            needs_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push_op(&mut self, shape: Vec<usize>, needs_grad: bool, op: Op<T>) -> TensorId {
        let values = eval_op(&self.nodes, &op, &shape);
        self.push(shape, values, needs_grad, op)
    }

    // ---- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Result<TensorId> {
        let expected = shape.iter().product::<usize>();
        if expected != values.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    /// Leaf from a tensor, honoring its `requires_grad` flag.
    pub fn var(&mut self, t: &Tensor<T>) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor<T>) -> TensorId {
        self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf)
    }

    /// Lease a parameter onto the tape. Repeated leases of the same parameter
    /// return the same node so fan-out gradients accumulate in one place.
    /// Frozen parameters come on as non-differentiable leaves.
    pub fn param(&mut self, arena: &ParamArena<T>, pid: ParamId) -> TensorId {
        if let Some(&id) = self.param_leases.get(&pid) {
            return id;
        }
        let entry = arena.entry(pid);
        let id = self.push(
            entry.tensor.shape().to_vec(),
            entry.tensor.values().to_vec(),
            entry.trainable,
            Op::Leaf,
        );
        self.param_leases.insert(pid, id);
        id
    }

    /// Node ids of leased parameters, ascending by parameter id.
    pub fn leased_params(&self) -> Vec<(ParamId, TensorId)> {
        let mut v: Vec<_> = self.param_leases.iter().map(|(p, t)| (*p, *t)).collect();
        v.sort_by_key(|(p, _)| *p);
        v
    }

    /// Gradients for leased trainable parameters, ascending by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        self.leased_params()
            .into_iter()
            .filter_map(|(pid, id)| self.grad(id).map(|g| (pid, g)))
            .collect()
    }

    // ---- elementwise ------------------------------------------------------

    fn binary_same_shape(&mut self, op_name: &'static str, a: TensorId, b: TensorId) -> Result<Vec<usize>> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_same_shape("add", a, b)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push_op(shape, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_same_shape("sub", a, b)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push_op(shape, ng, Op::Sub(a, b)))
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_same_shape("mul_elem", a, b)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push_op(shape, ng, Op::MulElem(a, b)))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        self.check_id(a)?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        Ok(self.push_op(shape, ng, Op::AddScalar(a, c)))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        self.check_id(a)?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        Ok(self.push_op(shape, ng, Op::MulScalar(a, c)))
    }

    fn bias_like(&mut self, op_name: &'static str, x: TensorId, b: TensorId) -> Result<Vec<usize>> {
        self.check_id(x)?;
        self.check_id(b)?;
        let sx = self.nodes[x.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let ok = matches!(
            (rows_cols(&sx), sb.as_slice()),
            (Some((_, d)), [bd]) if *bd == d
        );
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sx,
                rhs: sb,
            });
        }
        Ok(sx)
    }

    /// Broadcast-add a `[d]` vector across the rows of `[l, d]`.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.bias_like("add_bias", x, b)?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push_op(shape, ng, Op::AddBias(x, b)))
    }

    /// Broadcast-multiply a `[d]` vector across the rows of `[l, d]`.
    pub fn mul_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.bias_like("mul_bias", x, b)?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push_op(shape, ng, Op::MulBias(x, b)))
    }

    // ---- matmul -----------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let ([m, k], [k2, n]) = (&sa[..], &sb[..]) else {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push_op(vec![*m, *n], ng, Op::Matmul(a, b)))
    }

    // ---- unary maps -------------------------------------------------------

    fn unary(&mut self, a: TensorId, op: impl FnOnce(TensorId) -> Op<T>) -> Result<TensorId> {
        self.check_id(a)?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        Ok(self.push_op(shape, ng, op(a)))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, Op::Exp)
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, Op::Log)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, Op::Relu)
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, Op::Tanh)
    }

    // ---- structure --------------------------------------------------------

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.check_id(a)?;
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let ng = self.needs(a);
        Ok(self.push_op(shape, ng, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let s = &self.nodes[a.0].shape;
        let [m, n] = s[..] else {
            return Err(TensorError::BadRank {
                op: "transpose",
                expected: 2,
                shape: s.clone(),
            });
        };
        let ng = self.needs(a);
        Ok(self.push_op(vec![n, m], ng, Op::Transpose(a)))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no parts".into(),
            });
        }
        for &p in parts {
            self.check_id(p)?;
        }
        if axis > 1 {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                shape: self.nodes[parts[0].0].shape.clone(),
            });
        }
        let mut rc: Vec<(usize, usize)> = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            let Some(pair) = rows_cols(s) else {
                return Err(TensorError::BadRank {
                    op: "concat",
                    expected: 2,
                    shape: s.clone(),
                });
            };
            rc.push(pair);
        }
        let (r0, c0) = rc[0];
        let shape = if axis == 0 {
            if rc.iter().any(|&(_, c)| c != c0) {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: "column counts differ".into(),
                });
            }
            vec![rc.iter().map(|&(r, _)| r).sum(), c0]
        } else {
            if rc.iter().any(|&(r, _)| r != r0) {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: "row counts differ".into(),
                });
            }
            vec![r0, rc.iter().map(|&(_, c)| c).sum()]
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push_op(
            shape,
            ng,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        self.check_id(x)?;
        let s = self.nodes[x.0].shape.clone();
        let Some((r, c)) = rows_cols(&s) else {
            return Err(TensorError::BadRank {
                op: "slice",
                expected: 2,
                shape: s,
            });
        };
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        let shape = if s.len() == 1 {
            vec![len]
        } else if axis == 0 {
            vec![len, c]
        } else {
            vec![r, len]
        };
        let ng = self.needs(x);
        Ok(self.push_op(shape, ng, Op::Slice { x, axis, start, len }))
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: TensorId, axis: usize, sizes: &[usize]) -> Result<Vec<TensorId>> {
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    // ---- reductions -------------------------------------------------------

    fn axis_reduce(&mut self, name: &'static str, x: TensorId, axis: usize) -> Result<(Vec<usize>, bool)> {
        self.check_id(x)?;
        let s = self.nodes[x.0].shape.clone();
        let [m, n] = s[..] else {
            return Err(TensorError::BadRank {
                op: name,
                expected: 2,
                shape: s,
            });
        };
        if axis > 1 {
            return Err(TensorError::BadAxis {
                op: name,
                axis,
                shape: s,
            });
        }
        let shape = if axis == 0 { vec![n] } else { vec![m] };
        Ok((shape, self.needs(x)))
    }

    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (shape, ng) = self.axis_reduce("sum_axis", x, axis)?;
        Ok(self.push_op(shape, ng, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (shape, ng) = self.axis_reduce("mean_axis", x, axis)?;
        Ok(self.push_op(shape, ng, Op::MeanAxis { x, axis }))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x)?;
        let ng = self.needs(x);
        Ok(self.push_op(vec![1], ng, Op::SumAll(x)))
    }

    // ---- lookup and masking ------------------------------------------------

    pub fn gather(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        self.check_id(table)?;
        let s = self.nodes[table.0].shape.clone();
        let [rows, d] = s[..] else {
            return Err(TensorError::BadRank {
                op: "gather",
                expected: 2,
                shape: s,
            });
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { index: bad, rows });
        }
        let ng = self.needs(table);
        Ok(self.push_op(
            vec![ids.len(), d],
            ng,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Add a constant mask (conventionally 0 / -1e9) elementwise.
    pub fn mask_add(&mut self, x: TensorId, mask: &Tensor<T>) -> Result<TensorId> {
        self.check_id(x)?;
        let sx = self.nodes[x.0].shape.clone();
        if rows_cols(&sx) != rows_cols(mask.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: "mask_add",
                lhs: sx,
                rhs: mask.shape().to_vec(),
            });
        }
        let ng = self.needs(x);
        Ok(self.push_op(
            sx,
            ng,
            Op::MaskAdd {
                x,
                mask: mask.values().to_vec(),
            },
        ))
    }

    // ---- convolution ------------------------------------------------------

    /// 2-D convolution: `x` is `[h, w, c_in]`, `w` is `[kh, kw, c_in, c_out]`,
    /// output `[h_out, w_out, c_out]`. Symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: (usize, usize),
        pad: usize,
    ) -> Result<TensorId> {
        self.check_id(x)?;
        self.check_id(w)?;
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let ([h, wd, cin], [kh, kw, kcin, cout]) = (&sx[..], &sw[..]) else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        };
        if kcin != cin || stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        let (Some(ho), Some(wo)) = (
            conv_out_extent(*h, *kh, stride.0, pad),
            conv_out_extent(*wd, *kw, stride.1, pad),
        ) else {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {sw:?} larger than padded input {sx:?}"),
            });
        };
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push_op(vec![ho, wo, *cout], ng, Op::Conv2d { x, w, stride, pad }))
    }

    // ---- stochastic -------------------------------------------------------

    /// Inverted-scaling dropout; only meaningful during training. `p == 0`
    /// is the identity and appends nothing.
    pub fn dropout(&mut self, x: TensorId, p: f64, rng: &mut RngStream) -> Result<TensorId> {
        self.check_id(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.nodes[x.0].values.len())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push_op(shape, ng, Op::Dropout { x, mask }))
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax along `axis`. Rank-1 inputs use axis 0. Max subtraction is
    /// built in. Column-wise softmax on matrices composes transposes.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.check_id(x)?;
        let s = self.nodes[x.0].shape.clone();
        match (s.len(), axis) {
            (1, 0) | (2, 1) => {
                let ng = self.needs(x);
                Ok(self.push_op(s, ng, Op::Softmax(x)))
            }
            (2, 0) => {
                let t = self.transpose(x)?;
                let sm = self.softmax(t, 1)?;
                self.transpose(sm)
            }
            _ => Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                shape: s,
            }),
        }
    }

    /// Numerically stable `log(softmax(x))` along rows.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x)?;
        let s = self.nodes[x.0].shape.clone();
        if rows_cols(&s).is_none() {
            return Err(TensorError::BadRank {
                op: "log_softmax",
                expected: 2,
                shape: s,
            });
        }
        let ng = self.needs(x);
        Ok(self.push_op(s, ng, Op::LogSoftmax(x)))
    }

    /// Per-row `(x - mean) / sqrt(var + eps)` with 1/d variance
    /// normalization; the core of layer norm before gain and shift.
    pub fn row_norm(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        self.check_id(x)?;
        let s = self.nodes[x.0].shape.clone();
        if rows_cols(&s).is_none() {
            return Err(TensorError::BadRank {
                op: "row_norm",
                expected: 2,
                shape: s,
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "row_norm",
                msg: format!("eps {eps} must be positive"),
            });
        }
        let ng = self.needs(x);
        Ok(self.push_op(s, ng, Op::RowNorm { x, eps }))
    }

    /// Cosine similarity between every row of `a` `[k, d]` and every row of
    /// `b` `[m, d]`, as `[k, m]`. Row norms are guarded at 1e-8.
    pub fn cosine_sim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let ([k, d], [m, d2]) = (&sa[..], &sb[..]) else {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_sim",
                lhs: sa,
                rhs: sb,
            });
        };
        if d != d2 {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_sim",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push_op(vec![*k, *m], ng, Op::CosineSim(a, b)))
    }

    // ---- backward ---------------------------------------------------------

    /// Backpropagate from a scalar loss; the loss gradient seeds at 1.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check_id(loss)?;
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let one = [T::one()];
        self.backward_seeded(&[(loss, &one)])
    }

    /// Backpropagate from externally supplied cotangents. Used to stitch
    /// per-sample tapes to a shared batch-level loss tape.
    pub fn backward_seeded(&mut self, seeds: &[(TensorId, &[T])]) -> Result<()> {
        self.grads = vec![None; self.nodes.len()];
        for &(id, seed) in seeds {
            self.check_id(id)?;
            if seed.len() != self.nodes[id.0].values.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward_seeded",
                    lhs: self.nodes[id.0].shape.clone(),
                    rhs: vec![seed.len()],
                });
            }
            accumulate(
                self.grads[id.0].get_or_insert_with(|| vec![T::zero(); seed.len()]),
                seed,
            );
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            backprop_node(&self.nodes, &mut self.grads, i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    /// Recompute every non-leaf record from its inputs and compare bitwise.
    pub fn replay_matches(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, node)| {
            matches!(node.op, Op::Leaf)
                || eval_op(&self.nodes[..i], &node.op, &node.shape) == node.values
        })
    }
}

fn accumulate<T: Element>(acc: &mut [T], delta: &[T]) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += *d;
    }
}

fn matmul_into<T: Element>(
    a: &[T],
    (am, ak): (usize, usize),
    ta: bool,
    b: &[T],
    (bm, bk): (usize, usize),
    tb: bool,
    beta: T,
    out: &mut [T],
) {
    let av = ArrayView2::from_shape((am, ak), a).expect("lhs view");
    let bv = ArrayView2::from_shape((bm, bk), b).expect("rhs view");
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    let (m, n) = (av.nrows(), bv.ncols());
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("out view");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

/// Gather the im2col patch matrix `[ho*wo, kh*kw*cin]` for `conv2d`.
fn im2col<T: Element>(
    x: &[T],
    (h, w, cin): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let cols = kh * kw * cin;
    let mut patches = vec![T::zero(); ho * wo * cols];
    for oi in 0..ho {
        for oj in 0..wo {
            let row = (oi * wo + oj) * cols;
            for ki in 0..kh {
                let si = (oi * sh + ki) as isize - pad as isize;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kj in 0..kw {
                    let sj = (oj * sw + kj) as isize - pad as isize;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * cin;
                    let dst = row + (ki * kw + kj) * cin;
                    patches[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    patches
}

/// Scatter the patch-space gradient back onto the input image.
fn col2im_accumulate<T: Element>(
    dpatches: &[T],
    dx: &mut [T],
    (h, w, cin): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    pad: usize,
    (ho, wo): (usize, usize),
) {
    let cols = kh * kw * cin;
    for oi in 0..ho {
        for oj in 0..wo {
            let row = (oi * wo + oj) * cols;
            for ki in 0..kh {
                let si = (oi * sh + ki) as isize - pad as isize;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kj in 0..kw {
                    let sj = (oj * sw + kj) as isize - pad as isize;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let dst = (si as usize * w + sj as usize) * cin;
                    let src = row + (ki * kw + kj) * cin;
                    for c in 0..cin {
                        dx[dst + c] += dpatches[src + c];
                    }
                }
            }
        }
    }
}

/// Forward evaluation of one record. Shared by op construction and replay so
/// both paths are bitwise identical.
fn eval_op<T: Element>(nodes: &[Node<T>], op: &Op<T>, out_shape: &[usize]) -> Vec<T> {
    let val = |id: &TensorId| -> &[T] { &nodes[id.0].values };
    let shp = |id: &TensorId| -> &[usize] { &nodes[id.0].shape };
    match op {
        Op::Leaf => unreachable!("leaves are never re-evaluated"),
        Op::Add(a, b) => val(a).iter().zip(val(b)).map(|(x, y)| *x + *y).collect(),
        Op::Sub(a, b) => val(a).iter().zip(val(b)).map(|(x, y)| *x - *y).collect(),
        Op::MulElem(a, b) => val(a).iter().zip(val(b)).map(|(x, y)| *x * *y).collect(),
        Op::AddScalar(a, c) => val(a).iter().map(|x| *x + *c).collect(),
        Op::MulScalar(a, c) => val(a).iter().map(|x| *x * *c).collect(),
        Op::AddBias(x, b) => {
            let (_, d) = rows_cols(shp(x)).expect("validated");
            let bias = val(b);
            val(x)
                .iter()
                .enumerate()
                .map(|(i, v)| *v + bias[i % d])
                .collect()
        }
        Op::MulBias(x, b) => {
            let (_, d) = rows_cols(shp(x)).expect("validated");
            let scale = val(b);
            val(x)
                .iter()
                .enumerate()
                .map(|(i, v)| *v * scale[i % d])
                .collect()
        }
        Op::Matmul(a, b) => {
            let [m, k] = shp(a)[..] else { unreachable!() };
            let n = shp(b)[1];
            let mut out = vec![T::zero(); m * n];
            matmul_into(val(a), (m, k), false, val(b), (k, n), false, T::zero(), &mut out);
            out
        }
        Op::Exp(a) => val(a).iter().map(|x| x.exp()).collect(),
        Op::Log(a) => val(a).iter().map(|x| x.ln()).collect(),
        Op::Relu(a) => val(a)
            .iter()
            .map(|x| if *x > T::zero() { *x } else { T::zero() })
            .collect(),
        Op::Tanh(a) => val(a).iter().map(|x| x.tanh()).collect(),
        Op::Reshape(a) => val(a).to_vec(),
        Op::Transpose(a) => {
            let [m, n] = shp(a)[..] else { unreachable!() };
            let x = val(a);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x[i * n + j];
                }
            }
            out
        }
        Op::Concat { parts, axis } => {
            if *axis == 0 {
                let mut out = Vec::with_capacity(out_shape.iter().product());
                for p in parts {
                    out.extend_from_slice(val(p));
                }
                out
            } else {
                let (rows, _) = rows_cols(out_shape).expect("validated");
                let mut out = Vec::with_capacity(out_shape.iter().product());
                for r in 0..rows {
                    for p in parts {
                        let (_, c) = rows_cols(shp(p)).expect("validated");
                        out.extend_from_slice(&val(p)[r * c..(r + 1) * c]);
                    }
                }
                out
            }
        }
        Op::Slice { x, axis, start, len } => {
            let (_, c) = rows_cols(shp(x)).expect("validated");
            let v = val(x);
            if *axis == 0 {
                v[start * c..(start + len) * c].to_vec()
            } else {
                let (r, _) = rows_cols(shp(x)).expect("validated");
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&v[i * c + start..i * c + start + len]);
                }
                out
            }
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            let (m, n) = rows_cols(shp(x)).expect("validated");
            let v = val(x);
            let mut out;
            if *axis == 0 {
                out = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += v[i * n + j];
                    }
                }
            } else {
                out = vec![T::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        out[i] += v[i * n + j];
                    }
                }
            }
            if matches!(op, Op::MeanAxis { .. }) {
                let count = T::lit(if *axis == 0 { m as f64 } else { n as f64 });
                for o in &mut out {
                    *o /= count;
                }
            }
            out
        }
        Op::SumAll(x) => vec![val(x).iter().copied().sum()],
        Op::Gather { table, ids } => {
            let d = shp(table)[1];
            let t = val(table);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
            out
        }
        Op::MaskAdd { x, mask } => val(x).iter().zip(mask).map(|(v, m)| *v + *m).collect(),
        Op::Conv2d { x, w, stride, pad } => {
            let [h, wd, cin] = shp(x)[..] else { unreachable!() };
            let [kh, kw, _, cout] = shp(w)[..] else { unreachable!() };
            let [ho, wo, _] = out_shape[..] else { unreachable!() };
            let patches = im2col(val(x), (h, wd, cin), (kh, kw), *stride, *pad, (ho, wo));
            let mut out = vec![T::zero(); ho * wo * cout];
            matmul_into(
                &patches,
                (ho * wo, kh * kw * cin),
                false,
                val(w),
                (kh * kw * cin, cout),
                false,
                T::zero(),
                &mut out,
            );
            out
        }
        Op::Dropout { x, mask } => val(x).iter().zip(mask).map(|(v, m)| *v * *m).collect(),
        Op::Softmax(x) => {
            let (m, n) = rows_cols(shp(x)).expect("validated");
            let v = val(x);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let row = &v[i * n..(i + 1) * n];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[i * n + j] /= sum;
                }
            }
            out
        }
        Op::LogSoftmax(x) => {
            let (m, n) = rows_cols(shp(x)).expect("validated");
            let v = val(x);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let row = &v[i * n..(i + 1) * n];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..n {
                    sum += (row[j] - max).exp();
                }
                let lse = max + sum.ln();
                for j in 0..n {
                    out[i * n + j] = row[j] - lse;
                }
            }
            out
        }
        Op::RowNorm { x, eps } => {
            let (m, n) = rows_cols(shp(x)).expect("validated");
            let v = val(x);
            let dn = T::lit(n as f64);
            let eps = T::lit(*eps);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let row = &v[i * n..(i + 1) * n];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row
                    .iter()
                    .map(|x| (*x - mean) * (*x - mean))
                    .sum::<T>()
                    / dn;
                let inv = (var + eps).sqrt().recip();
                for j in 0..n {
                    out[i * n + j] = (row[j] - mean) * inv;
                }
            }
            out
        }
        Op::CosineSim(a, b) => {
            let [k, d] = shp(a)[..] else { unreachable!() };
            let m = shp(b)[0];
            let (av, bv) = (val(a), val(b));
            let ga: Vec<T> = (0..k).map(|i| guarded_norm(&av[i * d..(i + 1) * d])).collect();
            let gb: Vec<T> = (0..m).map(|j| guarded_norm(&bv[j * d..(j + 1) * d])).collect();
            let mut out = vec![T::zero(); k * m];
            for i in 0..k {
                for j in 0..m {
                    let dot = dot_rows(&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]);
                    out[i * m + j] = dot / (ga[i] * gb[j]);
                }
            }
            out
        }
    }
}

const NORM_GUARD: f64 = 1e-8;

fn dot_rows<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

fn guarded_norm<T: Element>(row: &[T]) -> T {
    let n = dot_rows(row, row).sqrt();
    n.max(T::lit(NORM_GUARD))
}

/// Apply the backward rule of record `i`, accumulating into input gradients.
fn backprop_node<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, gy: &[T]) {
    let val = |id: &TensorId| -> &[T] { &nodes[id.0].values };
    let shp = |id: &TensorId| -> &[usize] { &nodes[id.0].shape };
    let needs = |id: &TensorId| nodes[id.0].needs_grad;
    macro_rules! buf {
        ($id:expr) => {
            grads[$id.0].get_or_insert_with(|| vec![T::zero(); nodes[$id.0].values.len()])
        };
    }
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(a) {
                accumulate(buf!(a), gy);
            }
            if needs(b) {
                accumulate(buf!(b), gy);
            }
        }
        Op::Sub(a, b) => {
            if needs(a) {
                accumulate(buf!(a), gy);
            }
            if needs(b) {
                for (g, d) in buf!(b).iter_mut().zip(gy) {
                    *g -= *d;
                }
            }
        }
        Op::MulElem(a, b) => {
            if needs(a) {
                let bv = val(b).to_vec();
                for ((g, d), y) in buf!(a).iter_mut().zip(gy).zip(&bv) {
                    *g += *d * *y;
                }
            }
            if needs(b) {
                let av = val(a).to_vec();
                for ((g, d), y) in buf!(b).iter_mut().zip(gy).zip(&av) {
                    *g += *d * *y;
                }
            }
        }
        Op::AddScalar(a, _) => {
            if needs(a) {
                accumulate(buf!(a), gy);
            }
        }
        Op::MulScalar(a, c) => {
            if needs(a) {
                let c = *c;
                for (g, d) in buf!(a).iter_mut().zip(gy) {
                    *g += *d * c;
                }
            }
        }
        Op::AddBias(x, b) => {
            let (_, d) = rows_cols(shp(x)).expect("validated");
            if needs(x) {
                accumulate(buf!(x), gy);
            }
            if needs(b) {
                let gb = buf!(b);
                for (i, g) in gy.iter().enumerate() {
                    gb[i % d] += *g;
                }
            }
        }
        Op::MulBias(x, b) => {
            let (_, d) = rows_cols(shp(x)).expect("validated");
            if needs(x) {
                let scale = val(b).to_vec();
                let gx = buf!(x);
                for (i, g) in gy.iter().enumerate() {
                    gx[i] += *g * scale[i % d];
                }
            }
            if needs(b) {
                let xv = val(x).to_vec();
                let gb = buf!(b);
                for (i, g) in gy.iter().enumerate() {
                    gb[i % d] += *g * xv[i];
                }
            }
        }
        Op::Matmul(a, b) => {
            let [m, k] = shp(a)[..] else { unreachable!() };
            let n = shp(b)[1];
            if needs(a) {
                let bv = val(b).to_vec();
                matmul_into(gy, (m, n), false, &bv, (k, n), true, T::one(), buf!(a));
            }
            if needs(b) {
                let av = val(a).to_vec();
                matmul_into(&av, (m, k), true, gy, (m, n), false, T::one(), buf!(b));
            }
        }
        Op::Exp(a) => {
            if needs(a) {
                let y = nodes[i].values.clone();
                for ((g, d), y) in buf!(a).iter_mut().zip(gy).zip(&y) {
                    *g += *d * *y;
                }
            }
        }
        Op::Log(a) => {
            if needs(a) {
                let x = val(a).to_vec();
                for ((g, d), x) in buf!(a).iter_mut().zip(gy).zip(&x) {
                    *g += *d / *x;
                }
            }
        }
        Op::Relu(a) => {
            if needs(a) {
                let x = val(a).to_vec();
                for ((g, d), x) in buf!(a).iter_mut().zip(gy).zip(&x) {
                    if *x > T::zero() {
                        *g += *d;
                    }
                }
            }
        }
        Op::Tanh(a) => {
            if needs(a) {
                let y = nodes[i].values.clone();
                for ((g, d), y) in buf!(a).iter_mut().zip(gy).zip(&y) {
                    *g += *d * (T::one() - *y * *y);
                }
            }
        }
        Op::Reshape(a) => {
            if needs(a) {
                accumulate(buf!(a), gy);
            }
        }
        Op::Transpose(a) => {
            if needs(a) {
                let [m, n] = shp(a)[..] else { unreachable!() };
                let ga = buf!(a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += gy[j * m + i];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            if *axis == 0 {
                let mut offset = 0;
                for p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        accumulate(buf!(p), &gy[offset..offset + len]);
                    }
                    offset += len;
                }
            } else {
                let (rows, total_c) = rows_cols(&nodes[i].shape).expect("validated");
                let mut offset = 0;
                for p in parts {
                    let (_, c) = rows_cols(shp(p)).expect("validated");
                    if needs(p) {
                        let gp = buf!(p);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += gy[r * total_c + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
        }
        Op::Slice { x, axis, start, len } => {
            if needs(x) {
                let (r, c) = rows_cols(shp(x)).expect("validated");
                let gx = buf!(x);
                if *axis == 0 {
                    accumulate(&mut gx[start * c..(start + len) * c], gy);
                } else {
                    for i in 0..r {
                        for j in 0..*len {
                            gx[i * c + start + j] += gy[i * len + j];
                        }
                    }
                }
            }
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            if needs(x) {
                let (m, n) = rows_cols(shp(x)).expect("validated");
                let is_mean = matches!(&nodes[i].op, Op::MeanAxis { .. });
                let scale = if is_mean {
                    T::one() / T::lit(if *axis == 0 { m as f64 } else { n as f64 })
                } else {
                    T::one()
                };
                let gx = buf!(x);
                for r in 0..m {
                    for c in 0..n {
                        let g = if *axis == 0 { gy[c] } else { gy[r] };
                        gx[r * n + c] += g * scale;
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if needs(x) {
                let g = gy[0];
                for gx in buf!(x).iter_mut() {
                    *gx += g;
                }
            }
        }
        Op::Gather { table, ids } => {
            if needs(table) {
                let d = shp(table)[1];
                let gt = buf!(table);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gy[row * d + j];
                    }
                }
            }
        }
        Op::MaskAdd { x, .. } => {
            if needs(x) {
                accumulate(buf!(x), gy);
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let [h, wd, cin] = shp(x)[..] else { unreachable!() };
            let [kh, kw, _, cout] = shp(w)[..] else { unreachable!() };
            let [ho, wo, _] = nodes[i].shape[..] else { unreachable!() };
            let cols = kh * kw * cin;
            if needs(w) {
                let patches = im2col(val(x), (h, wd, cin), (kh, kw), *stride, *pad, (ho, wo));
                matmul_into(
                    &patches,
                    (ho * wo, cols),
                    true,
                    gy,
                    (ho * wo, cout),
                    false,
                    T::one(),
                    buf!(w),
                );
            }
            if needs(x) {
                let wv = val(w).to_vec();
                let mut dpatches = vec![T::zero(); ho * wo * cols];
                matmul_into(
                    gy,
                    (ho * wo, cout),
                    false,
                    &wv,
                    (cols, cout),
                    true,
                    T::zero(),
                    &mut dpatches,
                );
                col2im_accumulate(
                    &dpatches,
                    buf!(x),
                    (h, wd, cin),
                    (kh, kw),
                    *stride,
                    *pad,
                    (ho, wo),
                );
            }
        }
        Op::Dropout { x, mask } => {
            if needs(x) {
                for ((g, d), m) in buf!(x).iter_mut().zip(gy).zip(mask) {
                    *g += *d * *m;
                }
            }
        }
        Op::Softmax(x) => {
            if needs(x) {
                let (m, n) = rows_cols(shp(x)).expect("validated");
                let y = nodes[i].values.clone();
                let gx = buf!(x);
                for r in 0..m {
                    let mut s = T::zero();
                    for c in 0..n {
                        s += gy[r * n + c] * y[r * n + c];
                    }
                    for c in 0..n {
                        gx[r * n + c] += y[r * n + c] * (gy[r * n + c] - s);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if needs(x) {
                let (m, n) = rows_cols(shp(x)).expect("validated");
                let y = nodes[i].values.clone();
                let gx = buf!(x);
                for r in 0..m {
                    let mut s = T::zero();
                    for c in 0..n {
                        s += gy[r * n + c];
                    }
                    for c in 0..n {
                        gx[r * n + c] += gy[r * n + c] - y[r * n + c].exp() * s;
                    }
                }
            }
        }
        Op::RowNorm { x, eps } => {
            if needs(x) {
                let (m, n) = rows_cols(shp(x)).expect("validated");
                let xv = val(x).to_vec();
                let y = nodes[i].values.clone();
                let dn = T::lit(n as f64);
                let epsv = T::lit(*eps);
                let gx = buf!(x);
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let mean = row.iter().copied().sum::<T>() / dn;
                    let var = row
                        .iter()
                        .map(|x| (*x - mean) * (*x - mean))
                        .sum::<T>()
                        / dn;
                    let inv = (var + epsv).sqrt().recip();
                    let mut gmean = T::zero();
                    let mut gdot = T::zero();
                    for c in 0..n {
                        gmean += gy[r * n + c];
                        gdot += gy[r * n + c] * y[r * n + c];
                    }
                    gmean /= dn;
                    gdot /= dn;
                    for c in 0..n {
                        gx[r * n + c] += inv * (gy[r * n + c] - gmean - y[r * n + c] * gdot);
                    }
                }
            }
        }
        Op::CosineSim(a, b) => {
            let [k, d] = shp(a)[..] else { unreachable!() };
            let m = shp(b)[0];
            let (av, bv) = (val(a).to_vec(), val(b).to_vec());
            let c = nodes[i].values.clone();
            let guard = T::lit(NORM_GUARD);
            let na: Vec<T> = (0..k)
                .map(|r| dot_rows(&av[r * d..(r + 1) * d], &av[r * d..(r + 1) * d]).sqrt())
                .collect();
            let nb: Vec<T> = (0..m)
                .map(|r| dot_rows(&bv[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]).sqrt())
                .collect();
            let ga: Vec<T> = na.iter().map(|n| n.max(guard)).collect();
            let gb: Vec<T> = nb.iter().map(|n| n.max(guard)).collect();
            if needs(a) {
                let gx = buf!(a);
                for r in 0..k {
                    let mut cdot = T::zero(); // sum_j gy[r,j] * C[r,j]
                    for j in 0..m {
                        let g = gy[r * m + j];
                        let scale = (ga[r] * gb[j]).recip();
                        for t in 0..d {
                            gx[r * d + t] += g * bv[j * d + t] * scale;
                        }
                        cdot += g * c[r * m + j];
                    }
                    if na[r] > guard {
                        let corr = cdot / (ga[r] * na[r]);
                        for t in 0..d {
                            gx[r * d + t] -= corr * av[r * d + t];
                        }
                    }
                }
            }
            if needs(b) {
                let gx = buf!(b);
                for j in 0..m {
                    let mut cdot = T::zero();
                    for r in 0..k {
                        let g = gy[r * m + j];
                        let scale = (ga[r] * gb[j]).recip();
                        for t in 0..d {
                            gx[j * d + t] += g * av[r * d + t] * scale;
                        }
                        cdot += g * c[r * m + j];
                    }
                    if nb[j] > guard {
                        let corr = cdot / (gb[j] * nb[j]);
                        for t in 0..d {
                            gx[j * d + t] -= corr * bv[j * d + t];
                        }
                    }
                }
            }
        }
    }
}
