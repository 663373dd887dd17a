use crate::tensor::{Float, Tensor};

/// `log softmax` of one row, written into `out`.
pub fn log_softmax_row<T: Float>(z: &[T], out: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = z.iter().map(|&v| (v - max).exp()).sum::<T>();
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

pub(super) fn cross_entropy_forward<T: Float>(
    logits: &Tensor<T>,
    targets: &[Option<usize>],
) -> (T, Vec<T>, usize) {
    let c = logits.last_dim();
    let n = logits.rows();
    assert_eq!(targets.len(), n, "one target slot per logit row");
    let mut probs = vec![T::zero(); n * c];
    let mut logp = vec![T::zero(); c];
    let mut total = T::zero();
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        assert!(t < c, "target {t} out of range {c}");
        log_softmax_row(logits.row(r), &mut logp);
        total -= logp[t];
        count += 1;
        for (p, &lp) in probs[r * c..(r + 1) * c].iter_mut().zip(&logp) {
            *p = lp.exp();
        }
    }
    let loss = if count == 0 { T::zero() } else { total / T::of(count as f64) };
    (loss, probs, count)
}

pub(super) fn cross_entropy_backward<T: Float>(
    shape: &[usize],
    targets: &[Option<usize>],
    probs: &[T],
    count: usize,
    g: T,
) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    if count == 0 {
        return out;
    }
    let c = out.last_dim();
    let f = g / T::of(count as f64);
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        for (o, &p) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
            *o = p * f;
        }
        row[t] -= f;
    }
    out
}

pub(super) fn soft_cross_entropy_forward<T: Float>(logits: &Tensor<T>, targets: &Tensor<T>) -> (T, Vec<T>) {
    assert_eq!(logits.shape(), targets.shape(), "soft targets must match logits");
    let c = logits.last_dim();
    let n = logits.rows();
    let mut probs = vec![T::zero(); n * c];
    let mut logp = vec![T::zero(); c];
    let mut total = T::zero();
    for r in 0..n {
        log_softmax_row(logits.row(r), &mut logp);
        let mut row_loss = T::zero();
        for (&th, &lp) in targets.row(r).iter().zip(&logp) {
            // 0 · log p contributes nothing, even when p underflows
            if th != T::zero() {
                row_loss -= th * lp;
            }
        }
        total += row_loss;
        for (p, &lp) in probs[r * c..(r + 1) * c].iter_mut().zip(&logp) {
            *p = lp.exp();
        }
    }
    let loss = if n == 0 { T::zero() } else { total / T::of(n as f64) };
    (loss, probs)
}

pub(super) fn soft_cross_entropy_backward<T: Float>(
    shape: &[usize],
    targets: &Tensor<T>,
    probs: &[T],
    g: T,
) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let c = out.last_dim();
    let n = out.rows();
    if n == 0 {
        return out;
    }
    let f = g / T::of(n as f64);
    for r in 0..n {
        let trow = targets.row(r);
        let mass = trow.iter().copied().sum::<T>();
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        for ((o, &p), &th) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]).zip(trow) {
            *o = (p * mass - th) * f;
        }
    }
    out
}
