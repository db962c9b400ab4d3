//! Central finite-difference gradient oracle.
//!
//! The oracle is the independent reference every differentiable code path is
//! judged against; it never calls `backward` for the numeric side.

use super::tape::{Tape, TensorId};
use super::{Tensor, TensorError};
use crate::error::Result;
use crate::params::{ParamArena, ParamId};

/// Relative error between an analytic and a numeric derivative, guarded per
/// the `|a - n| / max(1e-8, |a| + |n|)` convention.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

enum FdEstimate {
    Value {
        numeric: f64,
        /// Cancellation floor of this central difference: one ulp of the
        /// loss magnitude divided by the step.
        noise: f64,
    },
    /// Nondifferentiable point (e.g. a relu sampled exactly at zero);
    /// excluded from the max.
    Kink,
}

/// Largest relative FD noise a kept coordinate may carry. Coordinates whose
/// true derivative sits below this floor cannot be certified by a central
/// difference in f64 and are excluded rather than reported as spurious
/// disagreement.
const RESOLVABLE: f64 = 3e-6;

/// Central difference with a one-sided consistency check. When the forward
/// and backward slopes disagree, the step likely straddles a relu boundary:
/// retry at eps/8, which resolves near-misses; a genuine kink disagrees at
/// every scale and is excluded.
fn central_estimate(
    mut eval_at: impl FnMut(f64) -> crate::error::Result<(f64, f64)>,
    base: f64,
    eps: f64,
) -> crate::error::Result<FdEstimate> {
    const SMOOTH: f64 = 1e-4;
    for h in [eps, eps / 8.0] {
        let (plus, minus) = eval_at(h)?;
        let fwd = (plus - base) / h;
        let bwd = (base - minus) / h;
        if rel_err(fwd, bwd) <= SMOOTH {
            return Ok(FdEstimate::Value {
                numeric: (plus - minus) / (2.0 * h),
                noise: base.abs() * (f64::EPSILON / 2.0) / h,
            });
        }
    }
    Ok(FdEstimate::Kink)
}

fn resolvable(analytic: f64, numeric: f64, noise: f64) -> bool {
    (analytic.abs() + numeric.abs()) * RESOLVABLE >= noise
}

/// Compare the tape gradient of the scalar function `f` at `x` against
/// central finite differences with step `eps`. Returns the max relative
/// error over the non-excluded coordinates. `f` must be pure.
///
/// Two kinds of coordinates are excluded from the max: nondifferentiable
/// points (one-sided slopes that disagree at every step size, e.g. a relu
/// sampled exactly at zero), and derivatives smaller than the cancellation
/// floor of the central difference itself, which f64 cannot certify.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, TensorId) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps {eps} must be positive"),
        }
        .into());
    }
    let eval = |values: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.shape().to_vec(), values.to_vec(), true)?;
        let out = f(&mut tape, leaf)?;
        if tape.values(out).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: tape.shape(out).to_vec(),
            }
            .into());
        }
        Ok(tape.values(out)[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.shape().to_vec(), x.values().to_vec(), true)?;
    let out = f(&mut tape, leaf)?;
    if tape.values(out).len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.shape(out).to_vec(),
        }
        .into());
    }
    tape.backward(out)?;
    let analytic = tape.grad(leaf).map(<[f64]>::to_vec).unwrap_or_default();

    let base = eval(x.values())?;
    let mut work = x.values().to_vec();
    let mut max_err = 0.0f64;
    for i in 0..work.len() {
        let orig = work[i];
        let estimate = central_estimate(
            |h| {
                work[i] = orig + h;
                let plus = eval(&work)?;
                work[i] = orig - h;
                let minus = eval(&work)?;
                work[i] = orig;
                Ok((plus, minus))
            },
            base,
            eps,
        )?;
        if let FdEstimate::Value { numeric, noise } = estimate {
            let a = analytic.get(i).copied().unwrap_or(0.0);
            if resolvable(a, numeric, noise) {
                max_err = max_err.max(rel_err(a, numeric));
            }
        }
    }
    Ok(max_err)
}

/// Finite-difference check of a loss defined over arena parameters: the
/// analytic gradient of each listed parameter (from one backward pass) is
/// compared coordinate by coordinate against central differences obtained by
/// perturbing the arena values. Returns the max relative error.
pub fn grad_check_params<F>(
    arena: &mut ParamArena<f64>,
    pids: &[ParamId],
    eps: f64,
    loss_fn: F,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamArena<f64>) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "grad_check_params",
            msg: format!("eps {eps} must be positive"),
        }
        .into());
    }
    let eval = |arena: &ParamArena<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss_fn(&mut tape, arena)?;
        Ok(tape.values(out)[0])
    };

    let mut tape = Tape::new();
    let out = loss_fn(&mut tape, arena)?;
    if tape.values(out).len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.shape(out).to_vec(),
        }
        .into());
    }
    tape.backward(out)?;
    let analytic: std::collections::HashMap<ParamId, Vec<f64>> = tape
        .param_grads()
        .into_iter()
        .map(|(pid, g)| (pid, g.to_vec()))
        .collect();
    let base = tape.values(out)[0];
    drop(tape);

    let mut max_err = 0.0f64;
    for &pid in pids {
        let n = arena.tensor(pid).numel();
        let zeros = vec![0.0; n];
        let grad = analytic.get(&pid).unwrap_or(&zeros);
        for i in 0..n {
            let orig = arena.tensor(pid).values()[i];
            let estimate = central_estimate(
                |h| {
                    arena.tensor_mut(pid).values_mut()[i] = orig + h;
                    let plus = eval(arena)?;
                    arena.tensor_mut(pid).values_mut()[i] = orig - h;
                    let minus = eval(arena)?;
                    arena.tensor_mut(pid).values_mut()[i] = orig;
                    Ok((plus, minus))
                },
                base,
                eps,
            )?;
            if let FdEstimate::Value { numeric, noise } = estimate {
                if resolvable(grad[i], numeric, noise) {
                    max_err = max_err.max(rel_err(grad[i], numeric));
                }
            }
        }
    }
    Ok(max_err)
}
