//! Latent Dirichlet allocation fitted by collapsed Gibbs sampling.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdaParams {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
}

impl LdaParams {
    /// `alpha = 50/K`, `beta = 0.01`, 500 sweeps.
    pub fn with_topics(k: usize) -> Self {
        Self { k, alpha: 50.0 / k as f64, beta: 0.01, iterations: 500 }
    }
}

impl Default for LdaParams {
    fn default() -> Self {
        Self::with_topics(30)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub vocab_size: usize,
    /// `K × vocab_size`
    pub topic_word_counts: Vec<Vec<u32>>,
    pub topic_counts: Vec<u64>,
}

/// Draws an index with probability proportional to `weights`.
fn draw(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Sampler state, exposed so callers can observe individual sweeps.
pub struct LdaSampler {
    params: LdaParams,
    vocab_size: usize,
    docs: Vec<Vec<u32>>,
    z: Vec<Vec<u16>>,
    doc_topic: Vec<Vec<u32>>,
    topic_word: Vec<Vec<u32>>,
    topic_total: Vec<u64>,
    rng: ChaCha8Rng,
    weights: Vec<f64>,
}

impl LdaSampler {
    pub fn new(docs: &[Vec<u32>], vocab_size: usize, params: LdaParams, seed: u64) -> Result<Self> {
        let k = params.k;
        if k < 2 {
            return Err(Error::Topics(format!("need at least 2 topics, got {k}")));
        }
        if k > u16::MAX as usize {
            return Err(Error::Topics(format!("{k} topics exceeds the supported maximum")));
        }
        if params.iterations == 0 {
            return Err(Error::Topics("iterations must be ≥ 1".into()));
        }
        if !(params.alpha > 0.0 && params.beta > 0.0) {
            return Err(Error::Topics("alpha and beta must be positive".into()));
        }
        let total: usize = docs.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::Topics("empty corpus".into()));
        }
        if let Some(w) = docs.iter().flatten().find(|&&w| w as usize >= vocab_size) {
            return Err(Error::Topics(format!("token id {w} outside vocabulary of {vocab_size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut doc_topic = vec![vec![0u32; k]; docs.len()];
        let mut topic_word = vec![vec![0u32; vocab_size]; k];
        let mut topic_total = vec![0u64; k];
        let mut z = Vec::with_capacity(docs.len());
        for (d, doc) in docs.iter().enumerate() {
            let zd: Vec<u16> = doc
                .iter()
                .map(|&w| {
                    let t = rng.gen_range(0..k);
                    doc_topic[d][t] += 1;
                    topic_word[t][w as usize] += 1;
                    topic_total[t] += 1;
                    t as u16
                })
                .collect();
            z.push(zd);
        }
        Ok(Self {
            params,
            vocab_size,
            docs: docs.to_vec(),
            z,
            doc_topic,
            topic_word,
            topic_total,
            rng,
            weights: vec![0.0; k],
        })
    }

    /// One pass resampling every token's topic.
    pub fn sweep(&mut self) {
        let LdaParams { k, alpha, beta, .. } = self.params;
        let vbeta = self.vocab_size as f64 * beta;
        for d in 0..self.docs.len() {
            for i in 0..self.docs[d].len() {
                let w = self.docs[d][i] as usize;
                let old = self.z[d][i] as usize;
                self.doc_topic[d][old] -= 1;
                self.topic_word[old][w] -= 1;
                self.topic_total[old] -= 1;
                for t in 0..k {
                    self.weights[t] = (self.doc_topic[d][t] as f64 + alpha) * (self.topic_word[t][w] as f64 + beta)
                        / (self.topic_total[t] as f64 + vbeta);
                }
                let new = draw(&mut self.rng, &self.weights);
                self.z[d][i] = new as u16;
                self.doc_topic[d][new] += 1;
                self.topic_word[new][w] += 1;
                self.topic_total[new] += 1;
            }
        }
    }

    pub fn topic_counts(&self) -> &[u64] {
        &self.topic_total
    }

    pub fn topic_word_counts(&self) -> &[Vec<u32>] {
        &self.topic_word
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// `(n_dk + α) / (N_d + Kα)` for every training document.
    pub fn doc_theta(&self) -> Vec<Vec<f64>> {
        let LdaParams { k, alpha, .. } = self.params;
        self.doc_topic
            .iter()
            .zip(&self.docs)
            .map(|(counts, doc)| {
                let denom = doc.len() as f64 + k as f64 * alpha;
                counts.iter().map(|&c| (c as f64 + alpha) / denom).collect()
            })
            .collect()
    }

    pub fn into_model(self) -> TopicModel {
        TopicModel {
            k: self.params.k,
            alpha: self.params.alpha,
            beta: self.params.beta,
            vocab_size: self.vocab_size,
            topic_word_counts: self.topic_word,
            topic_counts: self.topic_total,
        }
    }
}

pub fn fit_lda(docs: &[Vec<u32>], vocab_size: usize, params: LdaParams, seed: u64) -> Result<TopicModel> {
    Ok(fit_lda_with_theta(docs, vocab_size, params, seed)?.0)
}

/// Fitted model plus the final-sweep topic proportions of each training document.
pub fn fit_lda_with_theta(
    docs: &[Vec<u32>],
    vocab_size: usize,
    params: LdaParams,
    seed: u64,
) -> Result<(TopicModel, Vec<Vec<f64>>)> {
    let mut s = LdaSampler::new(docs, vocab_size, params, seed)?;
    for _ in 0..params.iterations {
        s.sweep();
    }
    let theta = s.doc_theta();
    Ok((s.into_model(), theta))
}

impl TopicModel {
    fn word_seen(&self, w: u32) -> bool {
        (w as usize) < self.vocab_size && self.topic_word_counts.iter().any(|row| row[w as usize] > 0)
    }

    /// Topic proportions of a held-out document, with topic-word counts
    /// frozen. Words never seen in training are skipped.
    pub fn infer(&self, doc: &[u32], iterations: usize, seed: u64) -> Result<Vec<f64>> {
        let words: Vec<usize> = doc.iter().filter(|&&w| self.word_seen(w)).map(|&w| w as usize).collect();
        if words.is_empty() {
            return Err(Error::Topics("document has no in-vocabulary tokens".into()));
        }
        let (k, alpha, beta) = (self.k, self.alpha, self.beta);
        let vbeta = self.vocab_size as f64 * beta;
        // p(w | t) is fixed during inference
        let phi = |t: usize, w: usize| {
            (self.topic_word_counts[t][w] as f64 + beta) / (self.topic_counts[t] as f64 + vbeta)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0u32; k];
        let mut z: Vec<usize> = words
            .iter()
            .map(|_| {
                let t = rng.gen_range(0..k);
                counts[t] += 1;
                t
            })
            .collect();
        let mut weights = vec![0.0; k];
        for _ in 0..iterations {
            for (i, &w) in words.iter().enumerate() {
                counts[z[i]] -= 1;
                for t in 0..k {
                    weights[t] = (counts[t] as f64 + alpha) * phi(t, w);
                }
                z[i] = draw(&mut rng, &weights);
                counts[z[i]] += 1;
            }
        }
        let denom = words.len() as f64 + k as f64 * alpha;
        Ok(counts.iter().map(|&c| (c as f64 + alpha) / denom).collect())
    }

    /// The `n` highest-count words of topic `t`.
    pub fn top_words(&self, t: usize, n: usize) -> Vec<u32> {
        let row = &self.topic_word_counts[t];
        let mut ids: Vec<u32> = (0..row.len() as u32).filter(|&w| row[w as usize] > 0).collect();
        ids.sort_by(|&a, &b| row[b as usize].cmp(&row[a as usize]).then(a.cmp(&b)));
        ids.truncate(n);
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile { path: path.to_path_buf() });
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Seed for per-document inference that depends only on the document id.
pub fn doc_seed(seed: u64, doc_id: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in doc_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Serialize, Deserialize)]
struct DocTopicsLine {
    id: String,
    theta: Vec<f64>,
}

pub fn write_doc_topics(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (id, theta) in rows {
        serde_json::to_writer(&mut out, &DocTopicsLine { id: id.clone(), theta: theta.clone() })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_doc_topics(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "run `mine-topics` first or disable the dtm task".into(),
        });
    }
    let mut map = HashMap::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocTopicsLine =
            serde_json::from_str(&line).map_err(|e| Error::Topics(format!("{} line {}: {e}", path.display(), i + 1)))?;
        map.insert(rec.id, rec.theta);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_conserved() {
        let m = fit_lda(&[vec![0]], 1, LdaParams { k: 2, alpha: 0.1, beta: 0.1, iterations: 7 }, 3).unwrap();
        let mut c = m.topic_counts.clone();
        c.sort();
        assert_eq!(c, [0, 1]);
    }

    #[test]
    fn counts_conserved_every_sweep() {
        let docs: Vec<Vec<u32>> = (0..6).map(|d| (0..15).map(|i| ((d * 7 + i * 3) % 11) as u32).collect()).collect();
        let mut s = LdaSampler::new(&docs, 11, LdaParams::with_topics(4), 9).unwrap();
        for _ in 0..20 {
            s.sweep();
            assert_eq!(s.topic_counts().iter().sum::<u64>(), s.num_tokens() as u64);
            for (t, row) in s.topic_word_counts().iter().enumerate() {
                assert_eq!(row.iter().map(|&c| c as u64).sum::<u64>(), s.topic_counts()[t]);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let docs = vec![vec![0, 1, 2, 1], vec![2, 3, 3]];
        let p = LdaParams { iterations: 30, ..LdaParams::with_topics(3) };
        assert_eq!(fit_lda(&docs, 4, p, 5).unwrap(), fit_lda(&docs, 4, p, 5).unwrap());
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let p = LdaParams::with_topics(3);
        assert!(fit_lda(&[], 4, p, 0).is_err());
        assert!(fit_lda(&[vec![], vec![]], 4, p, 0).is_err());
        assert!(fit_lda(&[vec![9]], 4, LdaParams::with_topics(2), 0).is_err());
    }

    #[test]
    fn huge_alpha_is_uniform() {
        let docs = vec![vec![0; 10], vec![1; 10]];
        let m = fit_lda(&docs, 2, LdaParams { k: 3, alpha: 0.1, beta: 0.1, iterations: 20 }, 1).unwrap();
        let m = TopicModel { alpha: 1e6, ..m };
        let theta = m.infer(&[0, 0, 1], 20, 2).unwrap();
        for t in &theta {
            assert!((t - 1.0 / 3.0).abs() <= 0.01);
        }
    }

    #[test]
    fn unseen_only_document_is_error() {
        let m = fit_lda(&[vec![0, 0, 1]], 5, LdaParams { k: 2, alpha: 0.1, beta: 0.1, iterations: 5 }, 1).unwrap();
        assert!(m.infer(&[3, 4, 99], 5, 0).is_err());
        let theta = m.infer(&[0, 4, 99], 5, 0).unwrap();
        assert!((theta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_theta_is_normalised() {
        let docs = vec![vec![4, 5, 6, 4], vec![], vec![7, 7]];
        let (_, theta) = fit_lda_with_theta(&docs, 8, LdaParams { k: 3, alpha: 0.5, beta: 0.1, iterations: 4 }, 1).unwrap();
        assert_eq!(theta.len(), 3);
        for t in &theta {
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(theta[1].iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}
