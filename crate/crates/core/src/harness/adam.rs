//! Adam with global-norm gradient clipping over a parameter arena.

use crate::error::{Error, Result};
use crate::params::{ParamArena, ParamId};
use crate::tensor::tape::Tape;
use crate::tensor::Element;

/// Per-parameter gradient buffers accumulated across per-sample tapes, in
/// ascending parameter order for determinism.
#[derive(Debug)]
pub struct GradAccumulator<T: Element> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> GradAccumulator<T> {
    pub fn new(arena_len: usize) -> Self {
        Self {
            grads: vec![None; arena_len],
        }
    }

    /// Fold one backpropagated tape in.
    pub fn add_tape(&mut self, tape: &Tape<T>) {
        for (pid, grad) in tape.param_grads() {
            let buf = self.grads[pid.0].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for (b, g) in buf.iter_mut().zip(grad) {
                *b += *g;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let f = T::lit(factor);
        for buf in self.grads.iter_mut().flatten() {
            for g in buf.iter_mut() {
                *g *= f;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|buf| buf.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }
}

#[derive(Debug)]
struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) updating only trainable entries;
/// frozen tensors stay byte-identical.
#[derive(Debug)]
pub struct Adam<T: Element> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    slots: Vec<Option<Slot<T>>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64, arena_len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: (0..arena_len).map(|_| None).collect(),
        }
    }

    /// One optimizer step over the accumulated gradients. Gradients are
    /// clipped to `clip_norm` (global L2) before the moment updates.
    pub fn step(
        &mut self,
        arena: &mut ParamArena<T>,
        grads: &mut GradAccumulator<T>,
        clip_norm: f64,
    ) -> Result<()> {
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Input(format!("gradient norm {norm} is not finite")));
        }
        if clip_norm > 0.0 && norm > clip_norm {
            grads.scale(clip_norm / norm);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (nb1, nb2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let lr1 = T::lit(self.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);

        for (pid, grad) in grads.iter() {
            if !arena.entry(pid).trainable {
                continue;
            }
            let slot = self.slots[pid.0].get_or_insert_with(|| Slot {
                m: vec![T::zero(); grad.len()],
                v: vec![T::zero(); grad.len()],
            });
            let values = arena.tensor_mut(pid).values_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + nb1 * g;
                slot.v[i] = b2 * slot.v[i] + nb2 * g * g;
                let vhat = slot.v[i] * inv_bc2;
                values[i] = values[i] - lr1 * slot.m[i] / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }
}
