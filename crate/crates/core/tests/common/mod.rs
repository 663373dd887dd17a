//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use mpdoc_core::config::{BackboneConfig, ModelConfig, FIRST_REGULAR_ID};
use mpdoc_core::params::ParamStore;
use mpdoc_core::{BBox, Document, Float, PageRecord, Raster, TokenRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear<T: Float>(store: &ParamStore<T>, name: &str, x: &[f64], rows: usize) -> Vec<f64> {
    let w = store.value(store.find(&format!("{name}.weight")).expect("weight")).to_f64_vec();
    let b = store.value(store.find(&format!("{name}.bias")).expect("bias")).to_f64_vec();
    let dout = b.len();
    let din = w.len() / dout;
    let mut y = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b[o];
            for i in 0..din {
                acc += x[r * din + i] * w[i * dout + o];
            }
            y[r * dout + o] = acc;
        }
    }
    y
}

fn layer_norm<T: Float>(store: &ParamStore<T>, name: &str, x: &[f64], rows: usize, eps: f64) -> Vec<f64> {
    let g = store.value(store.find(&format!("{name}.gamma")).expect("gamma")).to_f64_vec();
    let b = store.value(store.find(&format!("{name}.beta")).expect("beta")).to_f64_vec();
    let d = g.len();
    let mut y = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            y[r * d + j] = (row[j] - mean) / (var + eps).sqrt() * g[j] + b[j];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Which keys query `i` may see, written out from the attention rule
/// rather than taken from the kernel's slot layout. `window: None` means
/// full attention over unmasked tokens.
pub fn allowed(i: usize, j: usize, mask: &[bool], global: &[bool], window: Option<usize>) -> bool {
    if !mask[j] {
        return false;
    }
    match window {
        None => true,
        Some(w) => global[i] || global[j] || i.abs_diff(j) <= w / 2,
    }
}

/// Plain-loop pre-LN transformer reading the encoder's weights from `store`.
/// Masked rows come out as zeros.
pub fn reference_encoder<T: Float>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    x: &[f64],
    mask: &[bool],
    global: &[bool],
    window: Option<usize>,
) -> Vec<f64> {
    let (s, d, h) = (mask.len(), cfg.hidden, cfg.heads);
    let dh = d / h;
    let mut hid = x.to_vec();
    for l in 0..cfg.layers {
        let p = |n: &str| format!("encoder.layer{l}.{n}");
        let n = layer_norm(store, &p("ln1"), &hid, s, cfg.ln_eps);
        let q = linear(store, &p("q"), &n, s);
        let k = linear(store, &p("k"), &n, s);
        let v = linear(store, &p("v"), &n, s);
        let mut att = vec![0.0; s * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..s {
                let keys: Vec<usize> = (0..s).filter(|&j| allowed(i, j, mask, global, window)).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| (0..dh).map(|c| q[i * d + off + c] * k[j * d + off + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|sc| (sc - m).exp()).sum();
                for (&j, sc) in keys.iter().zip(&scores) {
                    let pr = (sc - m).exp() / z;
                    for c in 0..dh {
                        att[i * d + off + c] += pr * v[j * d + off + c];
                    }
                }
            }
        }
        let o = linear(store, &p("o"), &att, s);
        for (a, b) in hid.iter_mut().zip(&o) {
            *a += b;
        }
        let n = layer_norm(store, &p("ln2"), &hid, s, cfg.ln_eps);
        let f: Vec<f64> = linear(store, &p("ff1"), &n, s).into_iter().map(gelu).collect();
        let f = linear(store, &p("ff2"), &f, s);
        for (a, b) in hid.iter_mut().zip(&f) {
            *a += b;
        }
    }
    let mut out = layer_norm(store, "encoder.final_ln", &hid, s, cfg.ln_eps);
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            out[i * d..(i + 1) * d].fill(0.0);
        }
    }
    out
}

/// A model small enough for finite differences: d = 16, two layers, 64×80
/// pages through the tiny backbone.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        max_pages: 3,
        tokens_per_page: 4,
        max_seq_len: 16,
        page_width: 64,
        page_height: 80,
        hidden: 16,
        layers: 2,
        heads: 2,
        ff: 32,
        window: 4,
        num_classes: 3,
        num_topics: 4,
        num_token_labels: 2,
        backbone: BackboneConfig { d_img: 8, ..BackboneConfig::tiny() },
        ..ModelConfig::default()
    }
}

/// Random documents with noise rasters that fit `cfg`.
pub fn random_docs(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u, v) = (cfg.page_width, cfg.page_height);
    (0..n)
        .map(|d| {
            let pages = rng.gen_range(2..=cfg.max_pages);
            let pages: Vec<PageRecord> = (0..pages)
                .map(|p| {
                    let rgb = (0..u * v * 3).map(|_| rng.gen()).collect();
                    PageRecord::from_raster(p, Raster::from_rgb(u, v, rgb).expect("sized"))
                })
                .collect();
            let mut tokens = Vec::new();
            for p in 0..pages.len() {
                for _ in 0..rng.gen_range(1..=cfg.tokens_per_page) {
                    let x1 = rng.gen_range(0..u as u32 - 8);
                    let y1 = rng.gen_range(0..v as u32 - 8);
                    tokens.push(TokenRecord {
                        token_id: rng.gen_range(FIRST_REGULAR_ID..cfg.vocab_size as u32),
                        bbox: BBox::new(x1, y1, x1 + rng.gen_range(1..8), y1 + rng.gen_range(1..8)),
                        page_index: p,
                        label: Some(rng.gen_range(0..cfg.num_token_labels as u32)),
                    });
                }
            }
            Document { id: format!("doc-{d:03}"), pages, tokens, category: Some(d % cfg.num_classes) }
        })
        .collect()
}

/// Pre-training data for `docs` with topic vectors from a short LDA fit.
pub fn pretrain_data(cfg: &ModelConfig, docs: &[Document]) -> mpdoc_core::PretrainData {
    let toks: Vec<Vec<u32>> = docs.iter().map(|d| d.token_ids()).collect();
    let params = mpdoc_core::LdaParams { iterations: 20, ..mpdoc_core::LdaParams::with_topics(cfg.num_topics) };
    let (_, theta) = mpdoc_core::topics::fit_lda_with_theta(&toks, cfg.vocab_size, params, 1).expect("lda");
    let topics: std::collections::HashMap<String, Vec<f64>> = docs.iter().map(|d| d.id.clone()).zip(theta).collect();
    mpdoc_core::PretrainData::new(docs, cfg, Some(&topics)).expect("data")
}
