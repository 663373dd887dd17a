//! Classification and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassRow>,
}

/// Support-weighted precision, recall and F1 over every class seen in
/// either sequence. A class never predicted has precision 0.
pub fn weighted_prf(y_true: &[usize], y_pred: &[usize]) -> Result<Prf> {
    if y_true.is_empty() {
        return Err(Error::Metrics("no labels to score".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Metrics(format!("{} true labels vs {} predictions", y_true.len(), y_pred.len())));
    }
    let n_classes = y_true.iter().chain(y_pred).max().map_or(0, |&m| m + 1);
    let mut tp = vec![0usize; n_classes];
    let mut pred = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        pred[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let total = y_true.len() as f64;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut per_class = Vec::new();
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..n_classes {
        if support[c] == 0 && pred[c] == 0 {
            continue;
        }
        let p = ratio(tp[c], pred[c]);
        let r = ratio(tp[c], support[c]);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = support[c] as f64 / total;
        wp += w * p;
        wr += w * r;
        wf += w * f;
        per_class.push(ClassRow { class: c, precision: p, recall: r, f1: f, support: support[c] });
    }
    let accuracy = tp.iter().sum::<usize>() as f64 / total;
    Ok(Prf { accuracy, precision: wp, recall: wr, f1: wf, per_class })
}

/// Mean precision at the ranks of relevant items. `None` without relevant items.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn dcg(relevance: impl Iterator<Item = bool>, k: usize) -> f64 {
    relevance
        .take(k)
        .enumerate()
        .filter(|(_, r)| *r)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum()
}

/// `DCG@k / ideal DCG@k` with gain `rel_i / log2(i + 1)` at 1-based rank `i`.
pub fn ndcg_at(relevance: &[bool], k: usize) -> Option<f64> {
    let relevant = relevance.iter().filter(|&&r| r).count();
    if relevant == 0 {
        return None;
    }
    let ideal = dcg((0..relevance.len()).map(|i| i < relevant), k);
    Some(dcg(relevance.iter().copied(), k) / ideal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub map: f64,
    /// `(k, NDCG@k)` pairs in the order requested.
    pub ndcg: Vec<(usize, f64)>,
    pub queries: usize,
    /// Queries dropped for having no relevant item.
    pub excluded: usize,
}

/// MAP and NDCG@k over per-query relevance lists in ranked order.
pub fn map_ndcg(rankings: &[Vec<bool>], ks: &[usize]) -> Result<RankingMetrics> {
    let scored: Vec<&Vec<bool>> = rankings.iter().filter(|r| r.iter().any(|&x| x)).collect();
    let excluded = rankings.len() - scored.len();
    if excluded > 0 {
        log::warn!("{excluded} queries have no relevant item and are excluded");
    }
    if scored.is_empty() {
        return Err(Error::Metrics("no query has a relevant item".into()));
    }
    let n = scored.len() as f64;
    let map = scored.iter().map(|r| average_precision(r).expect("has relevant")).sum::<f64>() / n;
    let ndcg = ks
        .iter()
        .map(|&k| (k, scored.iter().map(|r| ndcg_at(r, k).expect("has relevant")).sum::<f64>() / n))
        .collect();
    Ok(RankingMetrics { map, ndcg, queries: scored.len(), excluded })
}

/// Everything `evaluate` writes to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub ablation: crate::embedder::AblationMask,
    pub classification: Option<Prf>,
    pub ranking: Option<RankingMetrics>,
}

impl MetricsReport {
    /// Every reported value lies in `[0, 1]`.
    pub fn in_unit_range(&self) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let c = self.classification.as_ref().is_none_or(|p| {
            [p.accuracy, p.precision, p.recall, p.f1].into_iter().all(unit)
                && p.per_class.iter().all(|r| unit(r.precision) && unit(r.recall) && unit(r.f1))
        });
        let r = self.ranking.as_ref().is_none_or(|m| unit(m.map) && m.ndcg.iter().all(|&(_, v)| unit(v)));
        c && r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_example() {
        let m = weighted_prf(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let c0 = &m.per_class[0];
        let c1 = &m.per_class[1];
        assert_eq!((c0.precision, c0.recall), (1.0, 0.5));
        assert!((c0.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((c1.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c1.recall, 1.0);
        assert!((c1.f1 - 0.8).abs() < 1e-15);
        assert!((m.f1 - 0.733_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        let m = weighted_prf(&[2, 2, 2], &[2, 2, 2]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        assert!(weighted_prf(&[], &[]).is_err());
        let m = weighted_prf(&[0, 1], &[0, 0]).unwrap();
        assert_eq!(m.per_class[1].precision, 0.0);
    }

    #[test]
    fn ranking_examples() {
        assert!((average_precision(&[true, false, true, false]).unwrap() - 0.833_333_333_333_333_3).abs() < 1e-12);
        assert_eq!(ndcg_at(&[true, false, false], 1), Some(1.0));
        let all = [true; 4];
        assert_eq!(average_precision(&all), Some(1.0));
        for k in 1..=4 {
            assert_eq!(ndcg_at(&all, k), Some(1.0));
        }
        let m = map_ndcg(&[vec![false, false], vec![true]], &[1]).unwrap();
        assert_eq!((m.queries, m.excluded, m.map), (1, 1, 1.0));
    }
}
