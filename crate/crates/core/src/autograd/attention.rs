//! Sparse multi-head attention kernel driven by a precomputed slot pattern.
//!
//! Each query row owns a contiguous run of score slots. A slot names one key
//! row or [`INVALID_KEY`]; invalid slots keep a zero probability. The
//! probability buffer (heads × slots) is the only score storage, so its size
//! is what the linear-memory claim is measured against.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const INVALID_KEY: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct AttentionPattern {
    heads: usize,
    row_ptr: Vec<usize>,
    keys: Vec<u32>,
    active: Vec<bool>,
}

impl AttentionPattern {
    /// Builds the sliding-window + global pattern.
    ///
    /// `segments` are `(start, len)` row ranges (one per document); attention
    /// never crosses a segment boundary. Non-global rows see keys within
    /// `±window/2` plus every global row of their segment; global rows see
    /// every unmasked row. When the window already spans a whole segment the
    /// segment is laid out densely.
    pub fn sliding_window(
        heads: usize,
        segments: &[(usize, usize)],
        attention_mask: &[bool],
        global_mask: &[bool],
        window: usize,
    ) -> Result<Self> {
        let n = attention_mask.len();
        if global_mask.len() != n {
            return Err(Error::Shape("attention and global masks differ in length".into()));
        }
        if heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        let half = window / 2;
        let mut row_ptr = vec![0usize; n + 1];
        let mut keys = Vec::new();
        let mut covered = vec![false; n];
        let mut seg_sorted = segments.to_vec();
        seg_sorted.sort_unstable();
        for &(start, len) in &seg_sorted {
            if start + len > n {
                return Err(Error::Shape(format!("segment {start}+{len} exceeds {n} rows")));
            }
            let globals: Vec<usize> = (start..start + len).filter(|&j| global_mask[j]).collect();
            if let Some(&g) = globals.iter().find(|&&g| !attention_mask[g]) {
                return Err(Error::Shape(format!("global token at padded position {}", g - start)));
            }
            let dense = len == 0 || half >= len - 1;
            for i in start..start + len {
                if covered[i] {
                    return Err(Error::Shape(format!("row {i} belongs to two segments")));
                }
                covered[i] = true;
                if dense || global_mask[i] {
                    keys.extend((start..start + len).map(|j| if attention_mask[j] { j as u32 } else { INVALID_KEY }));
                } else {
                    let local = i - start;
                    for o in 0..=2 * half {
                        let j = local as isize - half as isize + o as isize;
                        let ok = j >= 0 && (j as usize) < len && {
                            let r = start + j as usize;
                            attention_mask[r] && !global_mask[r]
                        };
                        keys.push(if ok { (start + j as usize) as u32 } else { INVALID_KEY });
                    }
                    keys.extend(globals.iter().map(|&g| g as u32));
                }
                row_ptr[i + 1] = keys.len();
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(Error::Shape(format!("row {i} is not covered by any segment")));
        }
        Ok(Self { heads, row_ptr, keys, active: attention_mask.to_vec() })
    }

    /// Every active row attends to every active row of its segment.
    pub fn dense(heads: usize, segments: &[(usize, usize)], attention_mask: &[bool]) -> Result<Self> {
        let no_global = vec![false; attention_mask.len()];
        Self::sliding_window(heads, segments, attention_mask, &no_global, usize::MAX - 1)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn rows(&self) -> usize {
        self.active.len()
    }

    /// Score slots per head (valid and invalid).
    pub fn slots_per_head(&self) -> usize {
        self.keys.len()
    }

    /// Total score-buffer entries across heads.
    pub fn score_buffer_len(&self) -> usize {
        self.keys.len() * self.heads
    }

    pub fn keys_of(&self, row: usize) -> &[u32] {
        &self.keys[self.row_ptr[row]..self.row_ptr[row + 1]]
    }
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(super) fn forward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pat: &AttentionPattern,
) -> (Tensor<T>, Vec<T>) {
    let n = q.rows();
    let d = q.last_dim();
    assert_eq!(n, pat.rows(), "attention pattern rows mismatch");
    assert_eq!(k.shape(), q.shape());
    assert_eq!(v.shape(), q.shape());
    let h = pat.heads;
    assert_eq!(d % h, 0, "hidden size not divisible by heads");
    let dh = d / h;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let slots = pat.keys.len();
    let mut probs = vec![T::zero(); slots * h];
    let mut out = Tensor::zeros(q.shape());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for head in 0..h {
        let hoff = head * dh;
        let pbuf = &mut probs[head * slots..(head + 1) * slots];
        for i in 0..n {
            if !pat.active[i] {
                continue;
            }
            let (lo, hi) = (pat.row_ptr[i], pat.row_ptr[i + 1]);
            let qi = &qd[i * d + hoff..i * d + hoff + dh];
            let mut max = T::neg_infinity();
            for s in lo..hi {
                let key = pat.keys[s];
                if key == INVALID_KEY {
                    continue;
                }
                let kj = key as usize;
                let sc = dot(qi, &kd[kj * d + hoff..kj * d + hoff + dh]) * scale;
                pbuf[s] = sc;
                if sc > max {
                    max = sc;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for s in lo..hi {
                if pat.keys[s] == INVALID_KEY {
                    continue;
                }
                let e = (pbuf[s] - max).exp();
                pbuf[s] = e;
                sum += e;
            }
            let orow = &mut out.data_mut()[i * d + hoff..i * d + hoff + dh];
            for s in lo..hi {
                let key = pat.keys[s];
                if key == INVALID_KEY {
                    continue;
                }
                let p = pbuf[s] / sum;
                pbuf[s] = p;
                let vj = &vd[key as usize * d + hoff..key as usize * d + hoff + dh];
                for (o, &x) in orow.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
    }
    (out, probs)
}

pub(super) fn backward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pat: &AttentionPattern,
    probs: &[T],
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = q.rows();
    let d = q.last_dim();
    let h = pat.heads;
    let dh = d / h;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let slots = pat.keys.len();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), dout.data());
    let mut dp = Vec::new();
    for head in 0..h {
        let hoff = head * dh;
        let pbuf = &probs[head * slots..(head + 1) * slots];
        for i in 0..n {
            if !pat.active[i] {
                continue;
            }
            let (lo, hi) = (pat.row_ptr[i], pat.row_ptr[i + 1]);
            let gi = &gd[i * d + hoff..i * d + hoff + dh];
            dp.clear();
            dp.resize(hi - lo, T::zero());
            let mut sum_pd = T::zero();
            for s in lo..hi {
                let key = pat.keys[s];
                if key == INVALID_KEY {
                    continue;
                }
                let kj = key as usize;
                let p = pbuf[s];
                let val = dot(gi, &vd[kj * d + hoff..kj * d + hoff + dh]);
                dp[s - lo] = val;
                sum_pd += p * val;
                let dvj = &mut dv.data_mut()[kj * d + hoff..kj * d + hoff + dh];
                for (o, &g) in dvj.iter_mut().zip(gi) {
                    *o += p * g;
                }
            }
            for s in lo..hi {
                let key = pat.keys[s];
                if key == INVALID_KEY {
                    continue;
                }
                let kj = key as usize;
                let ds = pbuf[s] * (dp[s - lo] - sum_pd) * scale;
                {
                    let dqi = &mut dq.data_mut()[i * d + hoff..i * d + hoff + dh];
                    for (o, &x) in dqi.iter_mut().zip(&kd[kj * d + hoff..kj * d + hoff + dh]) {
                        *o += ds * x;
                    }
                }
                let dkj = &mut dk.data_mut()[kj * d + hoff..kj * d + hoff + dh];
                for (o, &x) in dkj.iter_mut().zip(&qd[i * d + hoff..i * d + hoff + dh]) {
                    *o += ds * x;
                }
            }
        }
    }
    (dq, dk, dv)
}
