//! Multi-task pre-training loop: per-task micro-batches with gradient
//! accumulation, summed across tasks, then a single AdamW update.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::config::{ModelConfig, TaskSchedule, TrainConfig};
use crate::corpus::{encode_document, Document, EncodedDocument};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::{batch_losses, build_dsp_batch, build_dtm_batch, build_mvlm_batch, Task, TaskBatch};
use crate::tensor::Float;

/// Encoded documents with their optional category and topic vector.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub docs: Vec<EncodedDocument>,
    pub categories: Vec<Option<usize>>,
    pub theta: Vec<Option<Vec<f64>>>,
}

impl PretrainData {
    /// Encodes `docs` and attaches topic vectors by document id.
    pub fn new(docs: &[Document], cfg: &ModelConfig, topics: Option<&HashMap<String, Vec<f64>>>) -> Result<Self> {
        let encoded = docs.iter().map(|d| encode_document(d, cfg)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            docs: encoded,
            categories: docs.iter().map(|d| d.category).collect(),
            theta: docs.iter().map(|d| topics.and_then(|t| t.get(&d.id).cloned())).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Indices a task may sample from.
    pub fn pool(&self, task: Task) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| match task {
                Task::MvlmClf => true,
                Task::Dsp => self.docs[i].num_pages() >= 2,
                Task::Dtm => self.theta[i].is_some(),
            })
            .collect()
    }
}

/// Loss values of one step, keyed by loss name (`mvlm`, `clf`, `dsp`, `dtm`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub losses: Vec<(String, f64)>,
}

impl StepLosses {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.losses.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Stream id for the batch drawn at `(step, task, micro)`.
fn batch_stream(step: usize, task: Task, micro: usize) -> u64 {
    ((step as u64) << 24) | (task.index() << 16) | micro as u64
}

pub struct Trainer<T: Float> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    /// Completed steps.
    pub step: usize,
}

impl<T: Float> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(
            AdamWConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay },
            model.store.len(),
        );
        Ok(Self { model, opt, cfg, step: 0 })
    }

    pub fn schedule(&self, task: Task) -> TaskSchedule {
        match task {
            Task::MvlmClf => self.cfg.mvlm_clf,
            Task::Dsp => self.cfg.dsp,
            Task::Dtm => self.cfg.dtm,
        }
    }

    pub fn task_enabled(&self, task: Task) -> bool {
        let t = self.cfg.tasks;
        match task {
            Task::MvlmClf => t.mvlm || t.clf,
            Task::Dsp => t.dsp,
            Task::Dtm => t.dtm,
        }
    }

    /// Learning rate for the update that completes step `step + 1`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cfg.warmup_steps == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * ((step + 1) as f64 / self.cfg.warmup_steps as f64).min(1.0)
        }
    }

    /// Checks that every enabled task has data to draw from.
    pub fn check_data(&self, data: &PretrainData) -> Result<()> {
        for task in Task::ORDER {
            if self.task_enabled(task) && data.pool(task).is_empty() {
                return Err(match task {
                    Task::Dtm => Error::Batch("topic modelling is enabled but no document has a topic vector".into()),
                    Task::Dsp => Error::Batch("shuffle prediction is enabled but no document has 2 or more pages".into()),
                    Task::MvlmClf => Error::Batch("the pre-training corpus is empty".into()),
                });
            }
        }
        Ok(())
    }

    /// The micro-batch drawn at `(step, task, micro)`. Depends only on the
    /// seed and those indices, so resumed runs see the same batches.
    pub fn task_batch(&self, data: &PretrainData, task: Task, micro: usize, step: usize) -> Result<TaskBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(batch_stream(step, task, micro));
        let pool = data.pool(task);
        let n = self.schedule(task).batch_size.min(pool.len());
        let picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
        let docs: Vec<&EncodedDocument> = picked.iter().map(|&i| &data.docs[i]).collect();
        let seed: u64 = rng.gen();
        let mcfg = &self.model.cfg;
        match task {
            Task::MvlmClf => {
                let cats: Vec<Option<usize>> = picked.iter().map(|&i| data.categories[i]).collect();
                let mask_prob = if self.cfg.tasks.mvlm { mcfg.mask_prob } else { 0.0 };
                build_mvlm_batch(&docs, self.cfg.tasks.clf.then_some(&cats[..]), mcfg, mask_prob, seed)
            }
            Task::Dsp => build_dsp_batch(&docs, self.cfg.shuffle_prob, seed),
            Task::Dtm => {
                let theta: Vec<&[f64]> = picked.iter().map(|&i| data.theta[i].as_deref().expect("pooled")).collect();
                build_dtm_batch(&docs, &theta, mcfg, self.cfg.dtm_mode)
            }
        }
    }

    /// Gradients of `weight / accumulation · loss` for one micro-batch, plus
    /// the unscaled loss values.
    pub fn micro_gradients(&self, batch: &TaskBatch, scale: f64) -> Result<(Gradients<T>, Vec<(&'static str, f64)>)> {
        let mut g = Graph::new(&self.model.store);
        let terms = batch_losses(&self.model, &mut g, batch, self.cfg.tasks)?;
        let values: Vec<(&'static str, f64)> = terms.iter().map(|&(n, v)| (n, g.value(v).item().as_f64())).collect();
        for &(name, v) in &values {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { task: name.to_string(), step: self.step + 1 });
            }
        }
        let scaled: Vec<_> = terms.iter().map(|&(_, v)| g.scale(v, T::of(scale))).collect();
        let total = g.sum(&scaled);
        Ok((g.backward(total), values))
    }

    /// One optimisation step over all enabled tasks.
    pub fn multitask_step(&mut self, data: &PretrainData) -> Result<StepLosses> {
        let mut grads = Gradients::empty(self.model.store.len());
        let mut record: Vec<(String, f64)> = Vec::new();
        for task in Task::ORDER {
            if !self.task_enabled(task) {
                continue;
            }
            let sched = self.schedule(task);
            let ga = sched.accumulation;
            let mut sums: Vec<(&'static str, f64)> = Vec::new();
            for micro in 0..ga {
                let batch = self.task_batch(data, task, micro, self.step)?;
                let (gr, values) = self.micro_gradients(&batch, sched.weight / ga as f64)?;
                grads.accumulate(gr);
                for (name, v) in values {
                    match sums.iter_mut().find(|(n, _)| *n == name) {
                        Some(slot) => slot.1 += v,
                        None => sums.push((name, v)),
                    }
                }
            }
            record.extend(sums.into_iter().map(|(n, v)| (n.to_string(), v / ga as f64)));
        }
        if let Some(max) = self.cfg.max_grad_norm {
            let norm = grads.global_norm();
            if norm > max {
                let s = T::of(max / norm);
                for (_, g) in grads.iter_mut() {
                    g.scale_in_place(s);
                }
            }
        }
        let lr = self.lr_at(self.step);
        self.opt.step(&mut self.model.store, &grads, lr);
        self.step += 1;
        Ok(StepLosses { step: self.step, losses: record })
    }

    /// Runs `steps` more steps, reporting each through `on_step`.
    pub fn train(
        &mut self,
        data: &PretrainData,
        steps: usize,
        mut on_step: impl FnMut(&Self, &StepLosses) -> Result<()>,
    ) -> Result<Vec<StepLosses>> {
        self.check_data(data)?;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let rec = self.multitask_step(data)?;
            on_step(self, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }
}
