//! Fine-tuning heads, inference under modality ablations, retrieval.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::corpus::EncodedDocument;
use crate::embedder::{AblationMask, PackedBatch};
use crate::error::{Error, Result};
use crate::metrics::{map_ndcg, weighted_prf, Prf, RankingMetrics};
use crate::model::{ClsHead, Model};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Float;

/// Documents per inference forward pass.
const INFER_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneTask {
    Classify,
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub ablation: AblationMask,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 1e-3, batch_size: 8, weight_decay: 0.01, seed: 0, ablation: AblationMask::ALL }
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Positions that carry a prediction: real, non-special tokens.
pub fn token_positions(enc: &EncodedDocument) -> Vec<usize> {
    (0..enc.len()).filter(|&p| !enc.is_special(p)).collect()
}

/// Predicted class and class probabilities for each document.
pub fn classify_documents<T: Float>(
    model: &Model<T>,
    encs: &[&EncodedDocument],
    ablation: AblationMask,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::with_capacity(encs.len());
    for chunk in encs.chunks(INFER_CHUNK) {
        let packed = PackedBatch::new(chunk)?;
        let mut g = Graph::inference(&model.store);
        let h = model.hidden(&mut g, &packed, ablation)?;
        let logits = model.cls_logits(&mut g, h, &packed, ClsHead::Clf);
        let v = g.value(logits).to_f64_vec();
        let c = model.cfg.num_classes;
        for row in v.chunks(c) {
            let p = softmax(row);
            out.push((argmax(&p), p));
        }
    }
    Ok(out)
}

pub fn classify_document<T: Float>(model: &Model<T>, enc: &EncodedDocument, ablation: AblationMask) -> Result<(usize, Vec<f64>)> {
    Ok(classify_documents(model, &[enc], ablation)?.remove(0))
}

/// `(position, label)` for every real token of `enc`.
pub fn label_tokens<T: Float>(model: &Model<T>, enc: &EncodedDocument, ablation: AblationMask) -> Result<Vec<(usize, usize)>> {
    let positions = token_positions(enc);
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    let packed = PackedBatch::new(&[enc])?;
    let mut g = Graph::inference(&model.store);
    let h = model.hidden(&mut g, &packed, ablation)?;
    let logits = model.token_logits(&mut g, h);
    let v = g.value(logits).to_f64_vec();
    let n = model.cfg.num_token_labels;
    Ok(positions.into_iter().map(|p| (p, argmax(&v[p * n..(p + 1) * n]))).collect())
}

/// Final-layer CLS hidden state of each document.
pub fn extract_embeddings<T: Float>(model: &Model<T>, encs: &[&EncodedDocument], ablation: AblationMask) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(encs.len());
    for chunk in encs.chunks(INFER_CHUNK) {
        let packed = PackedBatch::new(chunk)?;
        let mut g = Graph::inference(&model.store);
        let h = model.hidden(&mut g, &packed, ablation)?;
        let v = g.value(h);
        out.extend(packed.cls_rows().into_iter().map(|r| v.row(r).iter().map(|x| x.as_f64()).collect()));
    }
    Ok(out)
}

pub fn extract_embedding<T: Float>(model: &Model<T>, enc: &EncodedDocument, ablation: AblationMask) -> Result<Vec<f64>> {
    Ok(extract_embeddings(model, &[enc], ablation)?.remove(0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 − cos(a, b)`. Zero vectors are rejected.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Retrieval(format!("vector lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Retrieval("zero vector has no cosine distance".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// The `k` nearest index entries by cosine distance, ties by ascending id.
pub fn retrieve(query: &[f64], index: &[(String, Vec<f64>)], k: usize) -> Result<Vec<(String, f64)>> {
    let mut scored = index
        .iter()
        .map(|(id, v)| Ok((id.clone(), cosine_distance(query, v)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

fn sample_batch(n: usize, bs: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rand::seq::index::sample(&mut rng, n, bs.min(n)).into_vec()
}

fn finetune_loop<T: Float>(
    model: &mut Model<T>,
    n: usize,
    cfg: &FinetuneConfig,
    mut loss_of: impl FnMut(&Model<T>, &mut Graph<'_, T>, &[usize]) -> Result<crate::autograd::Var>,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Batch("no fine-tuning examples".into()));
    }
    cfg.ablation.validate()?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, model.store.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sample_batch(n, cfg.batch_size, cfg.seed, step);
        let (grads, value): (Gradients<T>, f64) = {
            let mut g = Graph::new(&model.store);
            let loss = loss_of(model, &mut g, &idx)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { task: "finetune".into(), step: step + 1 });
            }
            (g.backward(loss), value)
        };
        opt.step(&mut model.store, &grads, cfg.lr);
        losses.push(value);
    }
    Ok(losses)
}

/// Trains the category head (and every unfrozen layer) with cross-entropy
/// at CLS. Returns per-step losses.
pub fn finetune_classifier<T: Float>(
    model: &mut Model<T>,
    docs: &[&EncodedDocument],
    categories: &[usize],
    cfg: &FinetuneConfig,
) -> Result<Vec<f64>> {
    if docs.len() != categories.len() {
        return Err(Error::Batch(format!("{} documents but {} categories", docs.len(), categories.len())));
    }
    if let Some(c) = categories.iter().find(|&&c| c >= model.cfg.num_classes) {
        return Err(Error::Batch(format!("category {c} outside [0, {})", model.cfg.num_classes)));
    }
    let ablation = cfg.ablation;
    finetune_loop(model, docs.len(), cfg, |m, g, idx| {
        let batch: Vec<&EncodedDocument> = idx.iter().map(|&i| docs[i]).collect();
        let packed = PackedBatch::new(&batch)?;
        let h = m.hidden(g, &packed, ablation)?;
        let logits = m.cls_logits(g, h, &packed, ClsHead::Clf);
        Ok(g.cross_entropy(logits, idx.iter().map(|&i| Some(categories[i])).collect()))
    })
}

/// Trains the token head with per-token cross-entropy over labeled real tokens.
pub fn finetune_token_labels<T: Float>(model: &mut Model<T>, docs: &[&EncodedDocument], cfg: &FinetuneConfig) -> Result<Vec<f64>> {
    if let Some(d) = docs.iter().find(|d| d.token_labels.is_none()) {
        return Err(Error::doc(&d.doc_id, "document has no token labels"));
    }
    let n_labels = model.cfg.num_token_labels;
    let ablation = cfg.ablation;
    finetune_loop(model, docs.len(), cfg, |m, g, idx| {
        let batch: Vec<&EncodedDocument> = idx.iter().map(|&i| docs[i]).collect();
        let packed = PackedBatch::new(&batch)?;
        let mut targets = Vec::with_capacity(packed.rows());
        for d in &batch {
            let labels = d.token_labels.as_ref().expect("checked");
            for p in 0..d.len() {
                let t = (!d.is_special(p) && labels[p] >= 0).then_some(labels[p] as usize);
                if let Some(t) = t.filter(|&t| t >= n_labels) {
                    return Err(Error::doc(&d.doc_id, format!("token label {t} outside [0, {n_labels})")));
                }
                targets.push(t);
            }
        }
        let h = m.hidden(g, &packed, ablation)?;
        let logits = m.token_logits(g, h);
        Ok(g.cross_entropy(logits, targets))
    })
}

pub fn evaluate_classification<T: Float>(
    model: &Model<T>,
    docs: &[&EncodedDocument],
    categories: &[usize],
    ablation: AblationMask,
) -> Result<Prf> {
    let preds: Vec<usize> = classify_documents(model, docs, ablation)?.into_iter().map(|(c, _)| c).collect();
    weighted_prf(categories, &preds)
}

/// Word-level metrics over real tokens that carry a label.
pub fn evaluate_token_labels<T: Float>(model: &Model<T>, docs: &[&EncodedDocument], ablation: AblationMask) -> Result<Prf> {
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for d in docs {
        let labels = d.token_labels.as_ref().ok_or_else(|| Error::doc(&d.doc_id, "document has no token labels"))?;
        for (p, l) in label_tokens(model, d, ablation)? {
            if labels[p] >= 0 {
                truth.push(labels[p] as usize);
                pred.push(l);
            }
        }
    }
    weighted_prf(&truth, &pred)
}

/// One query's ranked index ids with their distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query: String,
    pub ranked: Vec<(String, f64)>,
}

/// Ranks the whole index for each query and scores same-category relevance.
pub fn evaluate_retrieval(
    queries: &[(String, Vec<f64>, usize)],
    index: &[(String, Vec<f64>, usize)],
    ks: &[usize],
) -> Result<(RankingMetrics, Vec<Ranking>)> {
    let plain: Vec<(String, Vec<f64>)> = index.iter().map(|(id, v, _)| (id.clone(), v.clone())).collect();
    let category = |id: &str| index.iter().find(|(i, _, _)| i == id).map(|&(_, _, c)| c).expect("indexed id");
    let mut rels = Vec::with_capacity(queries.len());
    let mut rankings = Vec::with_capacity(queries.len());
    for (qid, q, qc) in queries {
        let ranked = retrieve(q, &plain, plain.len())?;
        rels.push(ranked.iter().map(|(id, _)| category(id) == *qc).collect());
        rankings.push(Ranking { query: qid.clone(), ranked });
    }
    Ok((map_ndcg(&rels, ks)?, rankings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let a = [0.3, -1.2, 4.0];
        assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-7);
        assert!(cosine_distance(&a, &[0.0; 3]).is_err());
        let scaled: Vec<f64> = a.iter().map(|x| x * 7.5).collect();
        assert!(cosine_distance(&a, &scaled).unwrap().abs() < 1e-12);
    }

    #[test]
    fn retrieval_ties_break_by_id() {
        let idx = vec![("b".to_string(), vec![1.0, 0.0]), ("a".to_string(), vec![2.0, 0.0]), ("c".to_string(), vec![0.0, 1.0])];
        let r = retrieve(&[1.0, 0.0], &idx, 3).unwrap();
        let ids: Vec<&str> = r.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(retrieve(&[1.0, 0.0], &idx, 1).unwrap().len(), 1);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -3.0, 2.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&p), 0);
    }
}
