//! Input builders and losses for the four pre-training objectives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{DtmMode, ModelConfig, TaskSet, CLS_ID, FIRST_REGULAR_ID, MASK_ID, SEP_ID};
use crate::corpus::{BBox, EncodedDocument, IGNORE_INDEX};
use crate::embedder::{AblationMask, PackedBatch};
use crate::error::{Error, Result};
use crate::model::{ClsHead, Model};
use crate::tensor::{Float, Tensor};

/// Tolerance on `Σθ = 1` for topic targets.
pub const THETA_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    MvlmClf,
    Dsp,
    Dtm,
}

impl Task {
    pub const ORDER: [Task; 3] = [Task::MvlmClf, Task::Dsp, Task::Dtm];

    pub fn name(self) -> &'static str {
        match self {
            Task::MvlmClf => "mvlm_clf",
            Task::Dsp => "dsp",
            Task::Dtm => "dtm",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskTargets {
    /// MVLM labels live in each document's `mvlm_labels`.
    MvlmClf { categories: Option<Vec<usize>> },
    Dsp { labels: Vec<usize>, permutations: Vec<Vec<usize>> },
    Dtm { theta: Vec<Vec<f64>> },
}

#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub task: Task,
    pub docs: Vec<EncodedDocument>,
    pub targets: TaskTargets,
}

impl TaskBatch {
    pub fn packed(&self) -> Result<PackedBatch> {
        PackedBatch::new(&self.docs.iter().collect::<Vec<_>>())
    }
}

/// What happened to a position selected for MVLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

/// Selects each regular token with probability `mask_prob` and applies the
/// 80/10/10 replacement. Boxes, page ids and page images are untouched.
pub fn mask_document<R: Rng>(
    doc: &EncodedDocument,
    mask_prob: f64,
    vocab_size: usize,
    rng: &mut R,
) -> (EncodedDocument, Vec<(usize, Replacement)>) {
    let mut out = doc.clone();
    let mut labels = vec![IGNORE_INDEX; doc.len()];
    let mut picks = Vec::new();
    for pos in 0..doc.len() {
        if doc.is_special(pos) || doc.input_ids[pos] == MASK_ID {
            continue;
        }
        if !rng.gen_bool(mask_prob) {
            continue;
        }
        labels[pos] = i64::from(doc.input_ids[pos]);
        let r: f64 = rng.gen();
        let action = if r < 0.8 {
            out.input_ids[pos] = MASK_ID;
            Replacement::Mask
        } else if r < 0.9 {
            out.input_ids[pos] = rng.gen_range(FIRST_REGULAR_ID..vocab_size as u32);
            Replacement::Random
        } else {
            Replacement::Keep
        };
        picks.push((pos, action));
    }
    out.mvlm_labels = Some(labels);
    (out, picks)
}

/// Category ids for CLF, validated against `num_classes`.
pub fn build_clf_targets(categories: &[Option<usize>], num_classes: usize) -> Result<Vec<usize>> {
    categories
        .iter()
        .enumerate()
        .map(|(i, c)| match c {
            Some(c) if *c < num_classes => Ok(*c),
            Some(c) => Err(Error::Batch(format!("document {i} has category {c}, expected < {num_classes}"))),
            None => Err(Error::Batch(format!("document {i} has no category; CLF needs one for every document"))),
        })
        .collect()
}

/// Masks every document and attaches CLF targets when `categories` is given.
pub fn build_mvlm_batch(
    docs: &[&EncodedDocument],
    categories: Option<&[Option<usize>]>,
    cfg: &ModelConfig,
    mask_prob: f64,
    seed: u64,
) -> Result<TaskBatch> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::Config(format!("mask_prob {mask_prob} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = docs.iter().map(|d| mask_document(d, mask_prob, cfg.vocab_size, &mut rng).0).collect();
    let categories = categories.map(|c| build_clf_targets(c, cfg.num_classes)).transpose()?;
    Ok(TaskBatch { task: Task::MvlmClf, docs, targets: TaskTargets::MvlmClf { categories } })
}

/// Uniformly random permutation of `0..n` other than the identity (`n ≥ 2`).
pub fn non_identity_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    assert!(n >= 2, "no non-identity permutation of {n} items");
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().any(|(i, &v)| i != v) {
            return p;
        }
    }
}

/// Applies `perm` to the page-image table: page id `j` now reads image `perm[j]`.
pub fn permute_pages(doc: &EncodedDocument, perm: &[usize]) -> EncodedDocument {
    let mut out = doc.clone();
    out.page_images = perm.iter().map(|&j| doc.page_images[j].clone()).collect();
    out
}

/// Shuffles the page images of each eligible document with probability
/// `shuffle_prob`. Single-page documents are skipped.
pub fn build_dsp_batch(docs: &[&EncodedDocument], shuffle_prob: f64, seed: u64) -> Result<TaskBatch> {
    if !(0.0..=1.0).contains(&shuffle_prob) {
        return Err(Error::Config(format!("shuffle_prob {shuffle_prob} outside [0, 1]")));
    }
    let eligible: Vec<&EncodedDocument> = docs.iter().copied().filter(|d| d.num_pages() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Batch(
            "shuffle prediction needs documents with at least 2 pages; the corpus has none in this batch".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(eligible.len());
    let mut labels = Vec::with_capacity(eligible.len());
    let mut permutations = Vec::with_capacity(eligible.len());
    for d in eligible {
        if rng.gen_bool(shuffle_prob) {
            let perm = non_identity_permutation(d.num_pages(), &mut rng);
            out.push(permute_pages(d, &perm));
            permutations.push(perm);
            labels.push(1);
        } else {
            out.push(d.clone());
            permutations.push((0..d.num_pages()).collect());
            labels.push(0);
        }
    }
    Ok(TaskBatch { task: Task::Dsp, docs: out, targets: TaskTargets::Dsp { labels, permutations } })
}

pub fn validate_theta(theta: &[f64], k: usize) -> Result<()> {
    if theta.len() != k {
        return Err(Error::Batch(format!("topic vector has {} entries, expected {k}", theta.len())));
    }
    if theta.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::Batch("topic vector has negative or non-finite entries".into()));
    }
    let s: f64 = theta.iter().sum();
    if (s - 1.0).abs() > THETA_SUM_TOL {
        return Err(Error::Batch(format!("topic vector sums to {s}, expected 1 within {THETA_SUM_TOL}")));
    }
    Ok(())
}

/// Image-only sequence for topic prediction. Per page: a MASK token with the
/// full-page box, then a SEP. In single mode only page 0 gets a MASK.
pub fn dtm_sequence(doc: &EncodedDocument, cfg: &ModelConfig, mode: DtmMode) -> EncodedDocument {
    let full = BBox::full_page(cfg.page_width, cfg.page_height);
    let mut out = EncodedDocument::empty(&doc.doc_id, doc.page_images.clone(), false);
    out.push(CLS_ID, full, 0, IGNORE_INDEX);
    for p in 0..doc.num_pages() {
        if mode == DtmMode::PerPage || p == 0 {
            out.push(MASK_ID, full, p as u32, IGNORE_INDEX);
        }
        out.push(SEP_ID, full, p as u32, IGNORE_INDEX);
    }
    out
}

pub fn build_dtm_batch(docs: &[&EncodedDocument], theta: &[&[f64]], cfg: &ModelConfig, mode: DtmMode) -> Result<TaskBatch> {
    if docs.len() != theta.len() {
        return Err(Error::Batch(format!("{} documents but {} topic vectors", docs.len(), theta.len())));
    }
    for (d, t) in docs.iter().zip(theta) {
        validate_theta(t, cfg.num_topics).map_err(|e| Error::doc(&d.doc_id, e.to_string()))?;
    }
    Ok(TaskBatch {
        task: Task::Dtm,
        docs: docs.iter().map(|d| dtm_sequence(d, cfg, mode)).collect(),
        targets: TaskTargets::Dtm { theta: theta.iter().map(|t| t.to_vec()).collect() },
    })
}

/// Hard-label targets from MVLM label values; every negative value is ignored.
pub fn mvlm_targets(labels: &[i64]) -> Vec<Option<usize>> {
    labels.iter().map(|&l| (l >= 0).then_some(l as usize)).collect()
}

/// Named loss terms of one batch, each a scalar in the graph.
pub fn batch_losses<T: Float>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    batch: &TaskBatch,
    tasks: TaskSet,
) -> Result<Vec<(&'static str, Var)>> {
    let packed = batch.packed()?;
    let hidden = model.hidden(g, &packed, AblationMask::ALL)?;
    let mut out = Vec::new();
    match &batch.targets {
        TaskTargets::MvlmClf { categories } => {
            if tasks.mvlm {
                let labels: Vec<i64> = batch
                    .docs
                    .iter()
                    .flat_map(|d| d.mvlm_labels.clone().unwrap_or_else(|| vec![IGNORE_INDEX; d.len()]))
                    .collect();
                let targets = mvlm_targets(&labels);
                let rows: Vec<usize> = (0..targets.len()).filter(|&r| targets[r].is_some()).collect();
                let loss = if rows.is_empty() {
                    g.input(Tensor::scalar(T::zero()))
                } else {
                    let tg = rows.iter().map(|&r| targets[r]).collect();
                    let logits = model.mvlm_logits(g, hidden, rows);
                    g.cross_entropy(logits, tg)
                };
                out.push(("mvlm", loss));
            }
            if tasks.clf {
                let cats = categories
                    .as_ref()
                    .ok_or_else(|| Error::Batch("CLF enabled but the batch carries no categories".into()))?;
                let logits = model.cls_logits(g, hidden, &packed, ClsHead::Clf);
                out.push(("clf", g.cross_entropy(logits, cats.iter().map(|&c| Some(c)).collect())));
            }
        }
        TaskTargets::Dsp { labels, .. } => {
            let logits = model.cls_logits(g, hidden, &packed, ClsHead::Dsp);
            out.push(("dsp", g.cross_entropy(logits, labels.iter().map(|&l| Some(l)).collect())));
        }
        TaskTargets::Dtm { theta } => {
            let k = model.cfg.num_topics;
            let flat: Vec<f64> = theta.iter().flatten().copied().collect();
            let target = Tensor::from_f64(&[theta.len(), k], &flat)?;
            let logits = model.cls_logits(g, hidden, &packed, ClsHead::Dtm);
            out.push(("dtm", g.soft_cross_entropy(logits, target)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_document, synthesize, SyntheticSpec};

    fn encoded(n: usize) -> (ModelConfig, Vec<EncodedDocument>) {
        let cfg = ModelConfig::desk();
        let spec = SyntheticSpec { num_docs: n, ..SyntheticSpec::default() };
        let docs = synthesize(&spec, 3).unwrap();
        (cfg.clone(), docs.iter().map(|d| encode_document(d, &cfg).unwrap()).collect())
    }

    #[test]
    fn zero_mask_prob_selects_nothing() {
        let (cfg, docs) = encoded(4);
        let refs: Vec<_> = docs.iter().collect();
        let b = build_mvlm_batch(&refs, None, &cfg, 0.0, 1).unwrap();
        for (d, o) in b.docs.iter().zip(&docs) {
            assert_eq!(d.input_ids, o.input_ids);
            assert!(d.mvlm_labels.as_ref().unwrap().iter().all(|&l| l == IGNORE_INDEX));
        }
    }

    #[test]
    fn full_mask_prob_labels_every_regular_token() {
        let (cfg, docs) = encoded(4);
        let refs: Vec<_> = docs.iter().collect();
        let b = build_mvlm_batch(&refs, None, &cfg, 1.0, 1).unwrap();
        for (d, o) in b.docs.iter().zip(&docs) {
            let labels = d.mvlm_labels.as_ref().unwrap();
            for pos in 0..o.len() {
                if o.is_special(pos) {
                    assert_eq!(labels[pos], IGNORE_INDEX);
                } else {
                    assert_eq!(labels[pos], i64::from(o.input_ids[pos]));
                }
                assert_eq!(d.box_at(pos), o.box_at(pos));
            }
            assert_eq!(d.page_ids, o.page_ids);
        }
    }

    #[test]
    fn dsp_control_branch_is_untouched() {
        let (_, docs) = encoded(6);
        let refs: Vec<_> = docs.iter().collect();
        let b = build_dsp_batch(&refs, 0.0, 9).unwrap();
        let TaskTargets::Dsp { labels, .. } = &b.targets else { panic!() };
        assert!(labels.iter().all(|&l| l == 0));
        for (d, o) in b.docs.iter().zip(docs.iter().filter(|d| d.num_pages() >= 2)) {
            assert_eq!(d.input_ids, o.input_ids);
            let keys = |e: &EncodedDocument| e.page_images.iter().map(|p| p.cache_key()).collect::<Vec<_>>();
            assert_eq!(keys(d), keys(o));
        }
    }

    #[test]
    fn dsp_two_page_swap() {
        let (_, docs) = encoded(20);
        let two = docs.iter().find(|d| d.num_pages() == 2).expect("a two-page doc");
        let b = build_dsp_batch(&[two], 1.0, 0).unwrap();
        let TaskTargets::Dsp { labels, permutations } = &b.targets else { panic!() };
        assert_eq!((labels[0], permutations[0].clone()), (1, vec![1, 0]));
        let d = &b.docs[0];
        assert_eq!(d.page_images[0].cache_key(), two.page_images[1].cache_key());
        assert_eq!(d.input_ids, two.input_ids);
        assert_eq!(d.page_ids, two.page_ids);
        assert_eq!(d.x1s, two.x1s);
    }

    #[test]
    fn dsp_rejects_single_page_batches() {
        let (_, docs) = encoded(2);
        let mut one = docs[0].clone();
        one.page_images.truncate(1);
        assert!(matches!(build_dsp_batch(&[&one], 0.5, 0), Err(Error::Batch(_))));
    }

    #[test]
    fn dtm_three_page_layout() {
        let (cfg, docs) = encoded(20);
        let d = docs.iter().find(|d| d.num_pages() == 3).expect("a three-page doc");
        let s = dtm_sequence(d, &cfg, DtmMode::PerPage);
        let m = MASK_ID;
        assert_eq!(s.input_ids, vec![CLS_ID, m, SEP_ID, m, SEP_ID, m, SEP_ID]);
        assert_eq!(s.page_ids, vec![0, 0, 0, 1, 1, 2, 2]);
        for pos in 0..s.len() {
            assert_eq!(s.box_at(pos), BBox::new(0, 0, 563, 750));
        }
        let single = dtm_sequence(d, &cfg, DtmMode::Single);
        assert_eq!(single.input_ids, vec![CLS_ID, m, SEP_ID, SEP_ID, SEP_ID]);
    }

    #[test]
    fn theta_validation() {
        assert!(validate_theta(&[0.5, 0.5], 2).is_ok());
        assert!(validate_theta(&[0.5, 0.5 + 2e-6], 2).is_err());
        assert!(validate_theta(&[0.5, 0.5], 3).is_err());
        assert!(validate_theta(&[1.5, -0.5], 2).is_err());
    }

    #[test]
    fn clf_targets_require_categories() {
        assert_eq!(build_clf_targets(&[Some(1), Some(0)], 2).unwrap(), vec![1, 0]);
        assert!(build_clf_targets(&[Some(1), None], 2).is_err());
        assert!(build_clf_targets(&[Some(2)], 2).is_err());
    }

    #[test]
    fn batches_are_deterministic() {
        let (cfg, docs) = encoded(6);
        let refs: Vec<_> = docs.iter().collect();
        let a = build_mvlm_batch(&refs, None, &cfg, 0.3, 5).unwrap();
        let b = build_mvlm_batch(&refs, None, &cfg, 0.3, 5).unwrap();
        for (x, y) in a.docs.iter().zip(&b.docs) {
            assert_eq!(x.input_ids, y.input_ids);
            assert_eq!(x.mvlm_labels, y.mvlm_labels);
        }
        let a = build_dsp_batch(&refs, 0.5, 5).unwrap();
        let b = build_dsp_batch(&refs, 0.5, 5).unwrap();
        assert_eq!(a.targets, b.targets);
    }
}
