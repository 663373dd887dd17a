//! Pre-LN transformer stack over sliding-window + global attention.

use std::rc::Rc;

use crate::autograd::{AttentionPattern, Graph, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::tensor::Float;

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    heads: usize,
    window: usize,
}

impl Encoder {
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Self {
        let (d, std, eps) = (cfg.hidden, cfg.init_std, cfg.ln_eps);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let group = format!("encoder.layer{l}");
                let name = |s: &str| format!("{group}.{s}");
                Block {
                    ln1: LayerNorm::new(store, &name("ln1"), &group, d, eps),
                    q: Linear::new(store, init, &name("q"), &group, (d, d), std),
                    k: Linear::new(store, init, &name("k"), &group, (d, d), std),
                    v: Linear::new(store, init, &name("v"), &group, (d, d), std),
                    o: Linear::new(store, init, &name("o"), &group, (d, d), std),
                    ln2: LayerNorm::new(store, &name("ln2"), &group, d, eps),
                    ff1: Linear::new(store, init, &name("ff1"), &group, (d, cfg.ff), std),
                    ff2: Linear::new(store, init, &name("ff2"), &group, (cfg.ff, d), std),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, "encoder.final_ln", "encoder.final", d, eps);
        Self { blocks, final_ln, heads: cfg.heads, window: cfg.window }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Attention pattern for stacked segments.
    pub fn pattern(&self, segments: &[(usize, usize)], attention_mask: &[bool], global_mask: &[bool]) -> Result<AttentionPattern> {
        AttentionPattern::sliding_window(self.heads, segments, attention_mask, global_mask, self.window)
    }

    /// `(rows, d)` hidden states; masked rows come out as zeros.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, pattern: Rc<AttentionPattern>, mask: Vec<T>) -> Var {
        let mut h = x;
        for b in &self.blocks {
            let n = b.ln1.apply(g, h);
            let q = b.q.apply(g, n);
            let k = b.k.apply(g, n);
            let v = b.v.apply(g, n);
            let a = g.attention(q, k, v, Rc::clone(&pattern));
            let a = b.o.apply(g, a);
            h = g.add(h, a);
            let n = b.ln2.apply(g, h);
            let f = b.ff1.apply(g, n);
            let f = g.gelu(f);
            let f = b.ff2.apply(g, f);
            h = g.add(h, f);
        }
        let out = self.final_ln.apply(g, h);
        g.scale_rows(out, mask)
    }

    /// Convenience: builds the pattern from masks and runs the stack.
    pub fn encode<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        segments: &[(usize, usize)],
        attention_mask: &[bool],
        global_mask: &[bool],
    ) -> Result<Var> {
        let pattern = Rc::new(self.pattern(segments, attention_mask, global_mask)?);
        let mask = attention_mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        Ok(self.forward(g, x, pattern, mask))
    }
}

/// Attention-score entries held for one sequence of each length in `lengths`
/// (CLS global, everything else local) under window `window`.
pub fn memory_probe(lengths: &[usize], window: usize, heads: usize) -> Result<Vec<usize>> {
    lengths
        .iter()
        .map(|&s| {
            let mask = vec![true; s];
            let mut global = vec![false; s];
            if s > 0 {
                global[0] = true;
            }
            Ok(AttentionPattern::sliding_window(heads, &[(0, s)], &mask, &global, window)?.score_buffer_len())
        })
        .collect()
}
