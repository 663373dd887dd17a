//! The command pipeline: corpus generation, topic mining, pre-training,
//! fine-tuning, evaluation and retrieval, each writing into its own run
//! directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, load_model, save_checkpoint};
use crate::config::{ModelConfig, TaskSchedule, TrainConfig};
use crate::corpus::{generate_synthetic_corpus, load_manifest, Document, EncodedDocument, LoadOptions, SyntheticSpec};
use crate::embedder::AblationMask;
use crate::error::{Error, Result};
use crate::finetune::{
    evaluate_classification, evaluate_retrieval, evaluate_token_labels, extract_embeddings, finetune_classifier,
    finetune_token_labels, FinetuneConfig,
};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::tensor::{Float, Precision};
use crate::topics::{fit_lda_with_theta, read_doc_topics, write_doc_topics, LdaParams};
use crate::trainer::{PretrainData, Trainer};

pub const EFFECTIVE_CONFIG_FILE: &str = "config.toml";
pub const DOC_TOPICS_FILE: &str = "doc_topics.jsonl";
pub const TOPIC_MODEL_FILE: &str = "topic_model.json";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const RANKING_FILE: &str = "ranking.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalTask {
    Classify,
    Tokens,
    Retrieval,
}

impl std::str::FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Self::Classify),
            "tokens" => Ok(Self::Tokens),
            "retrieval" => Ok(Self::Retrieval),
            other => Err(Error::Config(format!("unknown task `{other}` (classify, tokens, retrieval)"))),
        }
    }
}

impl EvalTask {
    pub fn name(self) -> &'static str {
        match self {
            Self::Classify => "classify",
            Self::Tokens => "tokens",
            Self::Retrieval => "retrieval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    /// The first `queries` documents of the corpus are queries; the rest form the index.
    pub queries: usize,
    /// Ranked ids written per query.
    pub top_k: usize,
    pub ndcg_k: Vec<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { queries: 40, top_k: 10, ndcg_k: vec![1, 5, 10] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicsConfig {
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
}

impl Default for TopicsConfig {
    fn default() -> Self {
        let d = LdaParams::default();
        Self { alpha: None, beta: d.beta, iterations: d.iterations }
    }
}

/// Everything a command may read. Serialised as the effective config of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub device: String,
    pub precision: Precision,
    pub ablation: String,
    pub eager_images: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub corpus: SyntheticSpec,
    pub topics: TopicsConfig,
    pub retrieval: RetrievalConfig,
}

impl Default for RunConfig {
    /// Desk-scale settings: the tiny backbone model, short schedules and
    /// small per-task batches.
    fn default() -> Self {
        let train = TrainConfig {
            steps: 300,
            lr: 1e-3,
            mvlm_clf: TaskSchedule::new(8, 1),
            dsp: TaskSchedule::new(8, 1),
            dtm: TaskSchedule::new(8, 1),
            checkpoint_every: 100,
            ..TrainConfig::default()
        };
        Self {
            seed: 0,
            device: "cpu".into(),
            precision: Precision::Double,
            ablation: "all".into(),
            eager_images: false,
            model: ModelConfig::desk(),
            train,
            finetune: FinetuneConfig::default(),
            corpus: SyntheticSpec::default(),
            topics: TopicsConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies the master seed to every sub-config and checks consistency.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.train.seed = c.seed;
        c.finetune.seed = c.seed;
        c.finetune.ablation = AblationMask::ALL;
        if c.device != "cpu" {
            return Err(Error::Config(format!("device `{}` is not available; only `cpu` is supported", c.device)));
        }
        AblationMask::parse(&c.ablation)?;
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn ablation_mask(&self) -> Result<AblationMask> {
        AblationMask::parse(&self.ablation)
    }

    pub fn lda_params(&self) -> LdaParams {
        let k = self.model.num_topics;
        LdaParams { k, alpha: self.topics.alpha.unwrap_or(50.0 / k as f64), beta: self.topics.beta, iterations: self.topics.iterations }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { eager: self.eager_images, ..LoadOptions::new(self.model.page_width, self.model.page_height) }
    }

    pub fn load_docs(&self, manifest: &Path) -> Result<Vec<Document>> {
        load_manifest(manifest, self.load_options())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialisation: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Creates `dir` for a new run. An existing non-empty directory is refused.
pub fn create_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::Config(format!("run directory {} already exists and is not empty", dir.display())));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes the effective config into the run directory.
pub fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.join(EFFECTIVE_CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), hint: hint.into() })
    }
}

pub fn gen_corpus(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    if cfg.corpus.vocab_size() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "corpus needs {} vocabulary ids but model.vocab_size is {}",
            cfg.corpus.vocab_size(),
            cfg.model.vocab_size
        )));
    }
    generate_synthetic_corpus(&cfg.corpus, cfg.seed, &dir.join("corpus"))
}

/// Fits LDA on the corpus tokens; writes the topic model and per-document θ.
pub fn mine_topics(cfg: &RunConfig, manifest: &Path, dir: &Path) -> Result<PathBuf> {
    require(manifest, "run `gen-corpus` first or pass --corpus")?;
    let docs = load_manifest(manifest, LoadOptions { eager: false, ..cfg.load_options() })?;
    let tokens: Vec<Vec<u32>> = docs.iter().map(Document::token_ids).collect();
    let (model, theta) = fit_lda_with_theta(&tokens, cfg.model.vocab_size, cfg.lda_params(), cfg.seed)?;
    model.save(&dir.join(TOPIC_MODEL_FILE))?;
    let rows: Vec<(String, Vec<f64>)> = docs.iter().map(|d| d.id.clone()).zip(theta).collect();
    let out = dir.join(DOC_TOPICS_FILE);
    write_doc_topics(&out, &rows)?;
    Ok(out)
}

/// Latest `step-*.ckpt` in a previous run's checkpoint directory.
pub fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let dir = run.join(CHECKPOINT_DIR);
    require(&dir, "the resumed run has no checkpoints")?;
    let mut best: Option<(usize, PathBuf)> = None;
    for e in fs::read_dir(&dir)? {
        let p = e?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::MissingArtifact { path: dir, hint: "the resumed run has no checkpoints".into() })
}

pub fn step_checkpoint_name(step: usize) -> String {
    format!("step-{step:06}.ckpt")
}

/// Pre-trains and returns the final checkpoint path. Loss lines go to
/// `train.log` as `step=<n> task=<t> loss=<f>`.
pub fn pretrain<T: Float>(
    cfg: &RunConfig,
    manifest: &Path,
    topics: Option<&Path>,
    dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    require(manifest, "run `gen-corpus` first or pass --corpus")?;
    let theta = if cfg.train.tasks.dtm {
        let path = topics.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DOC_TOPICS_FILE));
        Some(read_doc_topics(&path)?)
    } else {
        None
    };
    let docs = cfg.load_docs(manifest)?;
    let data = PretrainData::new(&docs, &cfg.model, theta.as_ref())?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let mut t = load_checkpoint::<T>(ckpt, &cfg.model)?;
            if t.cfg != cfg.train {
                log::warn!("resuming with the checkpoint's training config; command-line training settings are ignored");
            }
            t.cfg.steps = t.cfg.steps.max(cfg.train.steps);
            t
        }
        None => Trainer::new(Model::<T>::new(&cfg.model, cfg.seed)?, cfg.train.clone())?,
    };
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    let mut log = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(dir.join(TRAIN_LOG_FILE))?);
    let remaining = trainer.cfg.steps.saturating_sub(trainer.step);
    let every = trainer.cfg.checkpoint_every;
    trainer.train(&data, remaining, |t, rec| {
        for (task, loss) in &rec.losses {
            let line = format!("step={} task={task} loss={loss}", rec.step);
            log::info!("{line}");
            writeln!(log, "{line}")?;
        }
        if every > 0 && rec.step % every == 0 {
            log.flush()?;
            save_checkpoint(t, &ckpt_dir.join(step_checkpoint_name(rec.step)))?;
        }
        Ok(())
    })?;
    log.flush()?;
    let out = dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&trainer, &out)?;
    Ok(out)
}

fn encode_all(docs: &[Document], cfg: &ModelConfig) -> Result<Vec<EncodedDocument>> {
    docs.iter().map(|d| crate::corpus::encode_document(d, cfg)).collect()
}

fn categories(docs: &[Document]) -> Result<Vec<usize>> {
    docs.iter()
        .map(|d| d.category.ok_or_else(|| Error::doc(&d.id, "document has no category")))
        .collect()
}

/// Fine-tunes a pre-trained checkpoint on `task` and saves it as `model.ckpt`.
pub fn finetune<T: Float>(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, task: EvalTask, dir: &Path) -> Result<PathBuf> {
    require(checkpoint, "run `pretrain` first or pass --checkpoint")?;
    require(manifest, "run `gen-corpus` first or pass --corpus")?;
    let mut trainer = load_checkpoint::<T>(checkpoint, &cfg.model)?;
    let docs = cfg.load_docs(manifest)?;
    let enc = encode_all(&docs, &cfg.model)?;
    let refs: Vec<&EncodedDocument> = enc.iter().collect();
    let losses = match task {
        EvalTask::Classify | EvalTask::Retrieval => {
            finetune_classifier(&mut trainer.model, &refs, &categories(&docs)?, &cfg.finetune)?
        }
        EvalTask::Tokens => finetune_token_labels(&mut trainer.model, &refs, &cfg.finetune)?,
    };
    let mut log = BufWriter::new(fs::File::create(dir.join(TRAIN_LOG_FILE))?);
    for (i, l) in losses.iter().enumerate() {
        writeln!(log, "step={} task=finetune-{} loss={l}", i + 1, task.name())?;
    }
    log.flush()?;
    let out = dir.join(MODEL_CHECKPOINT);
    save_checkpoint(&trainer, &out)?;
    Ok(out)
}

fn split_queries<'a>(cfg: &RunConfig, docs: &'a [Document]) -> Result<(&'a [Document], &'a [Document])> {
    let q = cfg.retrieval.queries;
    if q == 0 || q >= docs.len() {
        return Err(Error::Config(format!("retrieval.queries = {q} must be in [1, {})", docs.len())));
    }
    Ok(docs.split_at(q))
}

fn embedded<T: Float>(
    model: &Model<T>,
    docs: &[Document],
    cfg: &RunConfig,
    ablation: AblationMask,
) -> Result<Vec<(String, Vec<f64>, usize)>> {
    let enc = encode_all(docs, &cfg.model)?;
    let vecs = extract_embeddings(model, &enc.iter().collect::<Vec<_>>(), ablation)?;
    let cats = categories(docs)?;
    Ok(docs.iter().zip(vecs).zip(cats).map(|((d, v), c)| (d.id.clone(), v, c)).collect())
}

/// Scores a checkpoint on `task` and writes `metrics.json`.
pub fn evaluate<T: Float>(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, task: EvalTask, dir: &Path) -> Result<MetricsReport> {
    require(checkpoint, "run `finetune` first or pass --checkpoint")?;
    require(manifest, "run `gen-corpus` first or pass --corpus")?;
    let ablation = cfg.ablation_mask()?;
    let model = load_model::<T>(checkpoint, &cfg.model)?;
    let docs = cfg.load_docs(manifest)?;
    let mut report = MetricsReport { task: task.name().into(), ablation, classification: None, ranking: None };
    match task {
        EvalTask::Classify => {
            let enc = encode_all(&docs, &cfg.model)?;
            let refs: Vec<_> = enc.iter().collect();
            report.classification = Some(evaluate_classification(&model, &refs, &categories(&docs)?, ablation)?);
        }
        EvalTask::Tokens => {
            let enc = encode_all(&docs, &cfg.model)?;
            let refs: Vec<_> = enc.iter().collect();
            report.classification = Some(evaluate_token_labels(&model, &refs, ablation)?);
        }
        EvalTask::Retrieval => {
            let (q, idx) = split_queries(cfg, &docs)?;
            let queries = embedded(&model, q, cfg, ablation)?;
            let index = embedded(&model, idx, cfg, ablation)?;
            report.ranking = Some(evaluate_retrieval(&queries, &index, &cfg.retrieval.ndcg_k)?.0);
        }
    }
    fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct RankingLine<'a> {
    query: &'a str,
    ranked: Vec<RankedId<'a>>,
}

#[derive(Debug, Serialize)]
struct RankedId<'a> {
    id: &'a str,
    distance: f64,
}

/// Ranks the index for every query and writes `ranking.jsonl`.
pub fn retrieve<T: Float>(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, dir: &Path) -> Result<PathBuf> {
    require(checkpoint, "run `finetune` first or pass --checkpoint")?;
    require(manifest, "run `gen-corpus` first or pass --corpus")?;
    let ablation = cfg.ablation_mask()?;
    let model = load_model::<T>(checkpoint, &cfg.model)?;
    let docs = cfg.load_docs(manifest)?;
    let (q, idx) = split_queries(cfg, &docs)?;
    let queries = embedded(&model, q, cfg, ablation)?;
    let index: Vec<(String, Vec<f64>)> = embedded(&model, idx, cfg, ablation)?.into_iter().map(|(i, v, _)| (i, v)).collect();
    let out = dir.join(RANKING_FILE);
    let mut w = BufWriter::new(fs::File::create(&out)?);
    for (qid, qv, _) in &queries {
        let ranked = crate::finetune::retrieve(qv, &index, cfg.retrieval.top_k)?;
        let line = RankingLine {
            query: qid,
            ranked: ranked.iter().map(|(id, d)| RankedId { id, distance: *d }).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(out)
}

/// Every command in order with a fixed master seed: corpus, topics,
/// pre-training, classification fine-tuning and evaluation. Returns the
/// path of `metrics.json`.
pub fn run_full_pipeline<T: Float>(cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    let cfg = cfg.resolved()?;
    let stage = |name: &str| -> Result<PathBuf> {
        let d = root.join(name);
        create_run_dir(&d)?;
        echo_config(&d, &cfg)?;
        Ok(d)
    };
    let corpus_dir = stage("gen-corpus")?;
    let manifest = gen_corpus(&cfg, &corpus_dir)?;
    let topics_dir = stage("mine-topics")?;
    let topics = mine_topics(&cfg, &manifest, &topics_dir)?;
    let pre_dir = stage("pretrain")?;
    let ckpt = pretrain::<T>(&cfg, &manifest, Some(&topics), &pre_dir, None)?;
    let ft_dir = stage("finetune")?;
    let tuned = finetune::<T>(&cfg, &ckpt, &manifest, EvalTask::Classify, &ft_dir)?;
    let eval_dir = stage("evaluate")?;
    evaluate::<T>(&cfg, &tuned, &manifest, EvalTask::Classify, &eval_dir)?;
    Ok(eval_dir.join(METRICS_FILE))
}
