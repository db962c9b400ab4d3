//! Loss functions: teacher-forced translation cross-entropy, the
//! cross-modal contrastive loss, and their weighted combination.
//!
//! The contrastive loss is one-directional (image-side anchors): each pooled
//! adapter vector is pulled toward the text-side vector of the same sentence
//! and pushed from the other text-side vectors in the batch, summed (not
//! averaged) over the batch. The translation loss is a per-token mean over
//! non-PAD targets. Both raw values are carried in [`LossReport`] so the
//! scale asymmetry stays visible in logs and sweeps.

use crate::backbones::{FeatureSeq, PAD};
use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{Element, Tensor};

/// Contrastive-head settings. Pooling is fixed: arithmetic mean over the
/// valid (non-PAD) positions.
#[derive(Debug, Clone, Copy)]
pub struct CmcConfig {
    pub tau: f64,
}

impl Default for CmcConfig {
    fn default() -> Self {
        Self { tau: 0.1 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    lambda_cmc: f64,
}

impl LossWeights {
    pub fn new(lambda_cmc: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_cmc) {
            return Err(Error::Config(format!(
                "lambda_cmc {lambda_cmc} outside [0, 1]"
            )));
        }
        Ok(Self { lambda_cmc })
    }

    pub fn lambda_cmc(&self) -> f64 {
        self.lambda_cmc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_timt: f64,
    pub l_cmc: f64,
    pub l_all: f64,
    pub batch_size: usize,
}

/// Cosine similarity with guarded denominators: two zero vectors give 0,
/// never NaN.
pub fn cosine_similarity<T: Element>(q: &[T], k: &[T]) -> T {
    assert_eq!(q.len(), k.len(), "cosine inputs must share a dimension");
    let dot: T = q.iter().zip(k).map(|(a, b)| *a * *b).sum();
    let nq = q.iter().map(|a| *a * *a).sum::<T>().sqrt();
    let nk = k.iter().map(|a| *a * *a).sum::<T>().sqrt();
    let guard = T::lit(1e-8);
    dot / (nq.max(guard) * nk.max(guard))
}

/// Mean over the first `valid_len` rows of a feature sequence; PAD rows
/// beyond `valid_len` never contribute.
pub fn pool_sequence<T: Element>(
    tape: &mut Tape<T>,
    f: &FeatureSeq,
    valid_len: usize,
) -> Result<TensorId> {
    if valid_len == 0 || valid_len > f.len {
        return Err(Error::Input(format!(
            "valid_len {valid_len} outside 1..={}",
            f.len
        )));
    }
    let head = tape.slice(f.id, 0, 0, valid_len)?;
    Ok(tape.mean_axis(head, 0)?)
}

/// InfoNCE over pooled pairs: `-sum_i log softmax_j(cos(h_i, e_j)/tau)[i]`,
/// computed with log-sum-exp stabilization. `h` and `e` are `[d]` nodes.
pub fn cmc_loss<T: Element>(
    tape: &mut Tape<T>,
    h: &[TensorId],
    e: &[TensorId],
    tau: f64,
) -> Result<TensorId> {
    if h.is_empty() || h.len() != e.len() {
        return Err(Error::Input(format!(
            "contrastive batch needs matched nonempty sides, got {} and {}",
            h.len(),
            e.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let k = h.len();
    let stack = |tape: &mut Tape<T>, rows: &[TensorId]| -> Result<TensorId> {
        let mut parts = Vec::with_capacity(rows.len());
        for &r in rows {
            let d = tape.values(r).len();
            parts.push(tape.reshape(r, vec![1, d])?);
        }
        Ok(tape.concat(&parts, 0)?)
    };
    let hm = stack(tape, h)?;
    let em = stack(tape, e)?;
    let sims = tape.cosine_sim(hm, em)?;
    let logits = tape.mul_scalar(sims, T::lit(1.0 / tau))?;
    let lsm = tape.log_softmax(logits)?;
    let mut eye = Tensor::zeros(vec![k, k]);
    for i in 0..k {
        eye.values_mut()[i * k + i] = T::one();
    }
    let eye = tape.constant(&eye);
    let diag = tape.mul_elem(lsm, eye)?;
    let total = tape.sum_all(diag)?;
    Ok(tape.mul_scalar(total, -T::one())?)
}

/// Token-level negative log-likelihood of one teacher-forced sample,
/// returned as (sum over non-PAD gold tokens, token count).
pub fn timt_loss_sum<T: Element>(
    tape: &mut Tape<T>,
    logits: TensorId,
    gold: &[usize],
) -> Result<(TensorId, usize)> {
    if gold.is_empty() {
        return Err(Error::Input("translation loss needs a nonempty gold".into()));
    }
    let [rows, vocab] = tape.shape(logits)[..] else {
        return Err(Error::Input("logits must be [len, vocab]".into()));
    };
    if rows != gold.len() {
        return Err(Error::Input(format!(
            "gold length {} does not match {rows} logit rows",
            gold.len()
        )));
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= vocab) {
        return Err(Error::Input(format!(
            "gold token {bad} outside vocabulary of {vocab}"
        )));
    }
    let mut onehot = Tensor::zeros(vec![rows, vocab]);
    let mut count = 0;
    for (t, &g) in gold.iter().enumerate() {
        if g != PAD {
            onehot.values_mut()[t * vocab + g] = T::one();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("all-PAD target has no trainable tokens".into()));
    }
    let lsm = tape.log_softmax(logits)?;
    let mask = tape.constant(&onehot);
    let picked = tape.mul_elem(lsm, mask)?;
    let total = tape.sum_all(picked)?;
    Ok((tape.mul_scalar(total, -T::one())?, count))
}

/// Batch translation loss: mean NLL over the non-PAD target tokens of all
/// samples.
pub fn timt_loss<T: Element>(
    tape: &mut Tape<T>,
    items: &[(TensorId, &[usize])],
) -> Result<TensorId> {
    if items.is_empty() {
        return Err(Error::Input("translation loss needs at least one sample".into()));
    }
    let mut total: Option<TensorId> = None;
    let mut tokens = 0usize;
    for &(logits, gold) in items {
        let (s, n) = timt_loss_sum(tape, logits, gold)?;
        tokens += n;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(tape.mul_scalar(total, T::lit(1.0 / tokens as f64))?)
}

/// `l_all = (1 - lambda) * l_timt + lambda * l_cmc`.
pub fn combined_loss(l_timt: f64, l_cmc: f64, weights: &LossWeights, batch_size: usize) -> Result<LossReport> {
    if !l_timt.is_finite() || !l_cmc.is_finite() {
        return Err(Error::Input(format!(
            "loss terms must be finite, got {l_timt} and {l_cmc}"
        )));
    }
    let lambda = weights.lambda_cmc;
    Ok(LossReport {
        l_timt,
        l_cmc,
        l_all: (1.0 - lambda) * l_timt + lambda * l_cmc,
        batch_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::FeatureOrigin;
    use crate::rng::RngStream;
    use crate::tensor::gradcheck::grad_check;

    fn vec_leaf(tape: &mut Tape<f64>, v: Vec<f64>) -> TensorId {
        let n = v.len();
        tape.leaf(vec![n], v, false).unwrap()
    }

    #[test]
    fn cosine_unit_cases() {
        let v = [0.3f64, -1.2, 0.5];
        assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &neg) + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        // Guarded: both zero -> 0, never NaN.
        assert_eq!(cosine_similarity::<f64>(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn pooling_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(vec![3, 2], vec![1.0, 1.0, 3.0, 3.0, 99.0, 99.0], false)
            .unwrap();
        let f = FeatureSeq {
            id: x,
            len: 3,
            origin: FeatureOrigin::TextEmb,
        };
        let single = pool_sequence(&mut tape, &f, 1).unwrap();
        assert_eq!(tape.values(single), &[1.0, 1.0]);
        let two = pool_sequence(&mut tape, &f, 2).unwrap();
        assert_eq!(tape.values(two), &[2.0, 2.0]);
        assert!(pool_sequence(&mut tape, &f, 0).is_err());
        assert!(pool_sequence(&mut tape, &f, 4).is_err());
    }

    #[test]
    fn cmc_single_pair_is_exactly_zero() {
        let mut tape = Tape::<f64>::new();
        let h = vec_leaf(&mut tape, vec![0.3, 0.7, -1.0]);
        let e = vec_leaf(&mut tape, vec![-2.0, 0.1, 0.4]);
        let loss = cmc_loss(&mut tape, &[h], &[e], 0.1).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn cmc_orthogonal_pair_hand_value() {
        // cos(h_i, e_i) = 1, cos(h_i, e_j) = 0 for i != j, tau = 1:
        // loss = 2 * ln(1 + exp(-1)).
        let mut tape = Tape::<f64>::new();
        let h1 = vec_leaf(&mut tape, vec![1.0, 0.0]);
        let h2 = vec_leaf(&mut tape, vec![0.0, 1.0]);
        let e1 = vec_leaf(&mut tape, vec![1.0, 0.0]);
        let e2 = vec_leaf(&mut tape, vec![0.0, 1.0]);
        let loss = cmc_loss(&mut tape, &[h1, h2], &[e1, e2], 1.0).unwrap();
        assert!((tape.scalar_value(loss) - 0.626524).abs() < 1e-6);
    }

    #[test]
    fn cmc_rejects_bad_inputs() {
        let mut tape = Tape::<f64>::new();
        let h = vec_leaf(&mut tape, vec![1.0, 0.0]);
        let e = vec_leaf(&mut tape, vec![0.0, 1.0]);
        assert!(cmc_loss(&mut tape, &[], &[], 0.1).is_err());
        assert!(cmc_loss(&mut tape, &[h], &[e], 0.0).is_err());
        assert!(cmc_loss(&mut tape, &[h], &[e], -0.5).is_err());
        assert!(cmc_loss(&mut tape, &[h, e], &[e], 0.1).is_err());
    }

    fn rand_rows(rng: &mut RngStream, k: usize, d: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .collect()
    }

    fn cmc_of(h: &[Vec<f64>], e: &[Vec<f64>], tau: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let hs: Vec<_> = h.iter().map(|r| vec_leaf(&mut tape, r.clone())).collect();
        let es: Vec<_> = e.iter().map(|r| vec_leaf(&mut tape, r.clone())).collect();
        let loss = cmc_loss(&mut tape, &hs, &es, tau).unwrap();
        tape.scalar_value(loss)
    }

    #[test]
    fn cmc_joint_permutation_invariance() {
        let mut rng = RngStream::new(5, "perm");
        let h = rand_rows(&mut rng, 2, 4);
        let e = rand_rows(&mut rng, 2, 4);
        // Swapping both sides of a K=2 batch is exact (addition commutes).
        let base = cmc_of(&h, &e, 0.1);
        let swapped = cmc_of(
            &[h[1].clone(), h[0].clone()],
            &[e[1].clone(), e[0].clone()],
            0.1,
        );
        assert_eq!(base, swapped);

        // Larger batches are invariant up to summation order.
        let h = rand_rows(&mut rng, 5, 4);
        let e = rand_rows(&mut rng, 5, 4);
        let base = cmc_of(&h, &e, 0.1);
        let perm = [3usize, 0, 4, 1, 2];
        let hp: Vec<_> = perm.iter().map(|&i| h[i].clone()).collect();
        let ep: Vec<_> = perm.iter().map(|&i| e[i].clone()).collect();
        assert!((base - cmc_of(&hp, &ep, 0.1)).abs() < 1e-12);

        // Permuting only one side changes the loss.
        let he_mismatched = cmc_of(&h, &ep, 0.1);
        assert!((base - he_mismatched).abs() > 1e-6);
    }

    #[test]
    fn cmc_scale_invariance() {
        let mut rng = RngStream::new(9, "scale");
        let h = rand_rows(&mut rng, 3, 4);
        let e = rand_rows(&mut rng, 3, 4);
        let base = cmc_of(&h, &e, 0.1);
        // Power-of-two scaling is bitwise exact.
        for scale in [0.25f64, 4.0] {
            let hs: Vec<Vec<f64>> = h
                .iter()
                .map(|r| r.iter().map(|x| x * scale).collect())
                .collect();
            assert_eq!(base, cmc_of(&hs, &e, 0.1), "scale {scale}");
            let es: Vec<Vec<f64>> = e
                .iter()
                .map(|r| r.iter().map(|x| x * scale).collect())
                .collect();
            assert_eq!(base, cmc_of(&h, &es, 0.1), "scale {scale}");
        }
        // Arbitrary positive scaling agrees to rounding.
        let hs: Vec<Vec<f64>> = h
            .iter()
            .map(|r| r.iter().map(|x| x * 1.7).collect())
            .collect();
        assert!((base - cmc_of(&hs, &e, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn cmc_is_nonnegative() {
        let mut rng = RngStream::new(11, "nonneg");
        for _ in 0..20 {
            let k = 1 + rng.below(5);
            let h = rand_rows(&mut rng, k, 6);
            let e = rand_rows(&mut rng, k, 6);
            assert!(cmc_of(&h, &e, 0.1) >= 0.0);
        }
    }

    #[test]
    fn cmc_gradient_through_pooling_and_cosine() {
        let mut rng = RngStream::new(13, "cmc-grad");
        let e_rows = rand_rows(&mut rng, 2, 4);
        let x = crate::tensor::Tensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let err = grad_check(
            |tape, x| {
                let f = FeatureSeq {
                    id: x,
                    len: 3,
                    origin: FeatureOrigin::TextEmb,
                };
                let h0 = pool_sequence(tape, &f, 2)?;
                let h1 = pool_sequence(tape, &f, 3)?;
                let e0 = tape.leaf(vec![4], e_rows[0].clone(), false)?;
                let e1 = tape.leaf(vec![4], e_rows[1].clone(), false)?;
                cmc_loss(tape, &[h0, h1], &[e0, e1], 0.1)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    fn uniform_logits(tape: &mut Tape<f64>, rows: usize, vocab: usize) -> TensorId {
        tape.leaf(vec![rows, vocab], vec![0.25; rows * vocab], false)
            .unwrap()
    }

    #[test]
    fn timt_uniform_logits_give_log_vocab() {
        let mut tape = Tape::<f64>::new();
        let vocab = 20;
        let logits = uniform_logits(&mut tape, 3, vocab);
        let loss = timt_loss(&mut tape, &[(logits, &[5, 6, 7])]).unwrap();
        assert!((tape.scalar_value(loss) - (vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn timt_certain_logits_give_zero() {
        let mut tape = Tape::<f64>::new();
        let vocab = 6;
        let gold = [4usize, 5];
        let mut vals = vec![0.0; 2 * vocab];
        for (t, &g) in gold.iter().enumerate() {
            vals[t * vocab + g] = 1e4; // probability 1 after softmax underflow
        }
        let logits = tape.leaf(vec![2, vocab], vals, false).unwrap();
        let loss = timt_loss(&mut tape, &[(logits, &gold)]).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn timt_two_class_hand_value() {
        // |V| = 2, a single token whose logit is ln 3 against 0 -> -ln(3/4).
        // Index 0 is PAD here, so the favored class sits at index 1.
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(vec![1, 2], vec![0.0, 3f64.ln()], false).unwrap();
        let loss = timt_loss(&mut tape, &[(logits, &[1])]).unwrap();
        assert!((tape.scalar_value(loss) - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn timt_pad_positions_are_excluded() {
        let mut tape = Tape::<f64>::new();
        let vocab = 5;
        let mut vals = vec![0.0; 2 * vocab];
        vals[1 * vocab + 4] = 1e4;
        let logits = tape.leaf(vec![2, vocab], vals, false).unwrap();
        // First position PAD: only the second position counts, and it is
        // certain, so the mean NLL is 0.
        let loss = timt_loss(&mut tape, &[(logits, &[PAD, 4])]).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
        let all_pad = timt_loss(&mut tape, &[(logits, &[PAD, PAD])]);
        assert!(all_pad.is_err());
    }

    #[test]
    fn timt_rejects_empty_gold() {
        let mut tape = Tape::<f64>::new();
        let logits = uniform_logits(&mut tape, 1, 4);
        assert!(timt_loss_sum(&mut tape, logits, &[]).is_err());
        assert!(timt_loss(&mut tape, &[]).is_err());
    }

    #[test]
    fn combined_loss_reductions() {
        let w0 = LossWeights::new(0.0).unwrap();
        assert_eq!(combined_loss(1.25, 9.0, &w0, 4).unwrap().l_all, 1.25);
        let w1 = LossWeights::new(1.0).unwrap();
        assert_eq!(combined_loss(1.25, 9.0, &w1, 4).unwrap().l_all, 9.0);
        let w = LossWeights::new(0.4).unwrap();
        let report = combined_loss(1.0, 0.5, &w, 4).unwrap();
        assert_eq!(report.l_all, 0.8);
        assert!(LossWeights::new(-0.1).is_err());
        assert!(LossWeights::new(1.1).is_err());
        assert!(combined_loss(f64::NAN, 0.0, &w, 1).is_err());
    }

    #[test]
    fn combined_loss_is_linear() {
        let w = LossWeights::new(0.3).unwrap();
        let a = combined_loss(2.0, 4.0, &w, 1).unwrap().l_all;
        let b = combined_loss(6.0, 8.0, &w, 1).unwrap().l_all;
        let mid = combined_loss(0.5 * (2.0 + 6.0), 0.5 * (4.0 + 8.0), &w, 1)
            .unwrap()
            .l_all;
        assert!((mid - 0.5 * (a + b)).abs() < 1e-12);
        let report = combined_loss(1.7, 0.9, &w, 1).unwrap();
        assert!(
            (report.l_all - ((1.0 - 0.3) * report.l_timt + 0.3 * report.l_cmc)).abs() < 1e-12
        );
    }
}
