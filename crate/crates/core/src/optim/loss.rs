use crate::patch::{MaskPlan, PatchError};
use crate::tensor::{Graph, Result as TResult, Scalar, Tensor, TensorError, Var};

/// `MSE_masked + alpha * MSE_visible` over `[B, n, D]` patch predictions.
///
/// Each term is the mean squared error over all elements of its patch group
/// in the batch; an empty group contributes zero. A trailing dummy row in
/// `pred` (`n + 1` rows) is ignored.
pub fn mae_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    plan: &MaskPlan,
    alpha: f64,
) -> Result<Var, PatchError> {
    plan.validate()?;
    let ts = target.shape();
    let n = plan.n_patches;
    if ts.len() != 3 || ts[0] != plan.batch_size() || ts[1] != n {
        return Err(PatchError::InconsistentPlan(format!(
            "target {ts:?} vs plan for {} samples of {n} patches",
            plan.batch_size()
        )));
    }
    let (b, d) = (ts[0], ts[2]);
    let mut pred = pred;
    let ps = g.shape(pred).to_vec();
    if ps.len() == 3 && ps[1] == n + 1 {
        pred = g.narrow(pred, 1, 0, n)?;
    }
    let weights = mae_weights::<T>(plan, d, alpha);
    let target = g.constant(ts, target.data().to_vec())?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    debug_assert_eq!(weights.len(), b * n * d);
    Ok(g.weighted_sum(sq, weights)?)
}

fn mae_weights<T: Scalar>(plan: &MaskPlan, d: usize, alpha: f64) -> Vec<T> {
    let b = plan.batch_size() as f64;
    let n_masked = plan.masked.first().map_or(0, Vec::len);
    let n_visible = plan.n_patches - n_masked;
    let per = |count: usize, scale: f64| {
        if count == 0 {
            0.0
        } else {
            scale / (b * count as f64 * d as f64)
        }
    };
    let (wm, wv) = (T::of(per(n_masked, 1.0)), T::of(per(n_visible, alpha)));
    let mut w = Vec::with_capacity(plan.batch_size() * plan.n_patches * d);
    for s in 0..plan.batch_size() {
        for m in plan.masked_flags(s) {
            w.extend(std::iter::repeat_n(if m { wm } else { wv }, d));
        }
    }
    w
}

/// Plain `(masked, visible)` mean squared errors; an empty group yields 0.
pub fn patch_mse<T: Scalar>(pred: &[T], target: &[T], plan: &MaskPlan, d: usize) -> (f64, f64) {
    let n = plan.n_patches;
    let (mut sm, mut cm, mut sv, mut cv) = (0.0, 0usize, 0.0, 0usize);
    for s in 0..plan.batch_size() {
        for (p, m) in plan.masked_flags(s).into_iter().enumerate() {
            let at = (s * n + p) * d;
            let e: f64 = (0..d)
                .map(|i| (pred[at + i] - target[at + i]).to_f64_lossless().powi(2))
                .sum();
            if m {
                sm += e;
                cm += d;
            } else {
                sv += e;
                cv += d;
            }
        }
    }
    let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
    (mean(sm, cm), mean(sv, cv))
}

/// Mean softmax cross-entropy of `[B, C]` logits.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> TResult<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    g.cross_entropy(logits, labels)
}
