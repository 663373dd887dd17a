//! The full network: backbone, embedding fusion, encoder and task heads.

use std::cell::RefCell;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::corpus::Raster;
use crate::embedder::{AblationMask, Embedder, PackedBatch};
use crate::encoder::Encoder;
use crate::error::Result;
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::tensor::Float;
use crate::vision::{Backbone, FeatureCache};

#[derive(Debug, Clone)]
pub struct Heads {
    pub mvlm_dense: Linear,
    pub mvlm_ln: LayerNorm,
    pub mvlm_out: Linear,
    /// Category head, shared by pre-training and fine-tuning.
    pub clf: Linear,
    pub dsp: Linear,
    pub dtm: Linear,
    pub token: Linear,
}

impl Heads {
    fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Self {
        let (d, std) = (cfg.hidden, cfg.init_std);
        Self {
            mvlm_dense: Linear::new(store, init, "head.mvlm.dense", "head.mvlm", (d, d), std),
            mvlm_ln: LayerNorm::new(store, "head.mvlm.ln", "head.mvlm", d, cfg.ln_eps),
            mvlm_out: Linear::new(store, init, "head.mvlm.out", "head.mvlm", (d, cfg.vocab_size), std),
            clf: Linear::new(store, init, "head.clf", "head.clf", (d, cfg.num_classes), std),
            dsp: Linear::new(store, init, "head.dsp", "head.dsp", (d, 2), std),
            dtm: Linear::new(store, init, "head.dtm", "head.dtm", (d, cfg.num_topics), std),
            token: Linear::new(store, init, "head.token", "head.token", (d, cfg.num_token_labels), std),
        }
    }
}

/// Heads that read the CLS hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsHead {
    Clf,
    Dsp,
    Dtm,
}

pub struct Model<T: Float> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub embedder: Embedder,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub heads: Heads,
    cache: RefCell<FeatureCache<T>>,
}

impl<T: Float> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let mut store = ParamStore::new();
        let embedder = Embedder::new(cfg, &mut store, &mut init)?;
        let backbone = Backbone::new(&cfg.backbone, (cfg.page_width, cfg.page_height), &mut store, &mut init)?;
        let encoder = Encoder::new(cfg, &mut store, &mut init);
        let heads = Heads::new(cfg, &mut store, &mut init);
        Ok(Self { cfg: cfg.clone(), store, embedder, backbone, encoder, heads, cache: RefCell::default() })
    }

    /// Drops cached frozen-backbone features. Needed after the frozen
    /// parameters are overwritten, e.g. by a checkpoint load.
    pub fn clear_feature_cache(&self) {
        self.cache.borrow_mut().clear();
    }

    pub fn cached_pages(&self) -> usize {
        self.cache.borrow().len()
    }

    /// `(pages, d_img, v', u')` maps for every page of the batch.
    pub fn page_maps(&self, g: &mut Graph<'_, T>, batch: &PackedBatch) -> Result<Var> {
        let loaders: Vec<_> = batch.pages.iter().map(|(_, p)| move || p.image()).collect();
        let pages: Vec<(String, &dyn Fn() -> Result<Arc<Raster>>)> = batch
            .pages
            .iter()
            .zip(&loaders)
            .map(|((key, _), f)| (key.clone(), f as &dyn Fn() -> Result<Arc<Raster>>))
            .collect();
        self.backbone.forward_cached(g, &mut self.cache.borrow_mut(), &pages)
    }

    /// Fused embeddings for the batch. The backbone only runs when image
    /// embeddings are enabled.
    pub fn embed(&self, g: &mut Graph<'_, T>, batch: &PackedBatch, ablation: AblationMask) -> Result<Var> {
        ablation.validate()?;
        let maps = if ablation.use_image { Some(self.page_maps(g, batch)?) } else { None };
        self.embedder.embed(g, batch, maps, ablation)
    }

    /// Final-layer hidden states, `(rows, d)`.
    pub fn hidden(&self, g: &mut Graph<'_, T>, batch: &PackedBatch, ablation: AblationMask) -> Result<Var> {
        let x = self.embed(g, batch, ablation)?;
        self.encoder.encode(g, x, &batch.segments, &batch.attention_mask, &batch.global_mask)
    }

    /// Vocabulary logits at the given rows.
    pub fn mvlm_logits(&self, g: &mut Graph<'_, T>, hidden: Var, rows: Vec<usize>) -> Var {
        let h = g.gather_rows(hidden, rows);
        let h = self.heads.mvlm_dense.apply(g, h);
        let h = g.gelu(h);
        let h = self.heads.mvlm_ln.apply(g, h);
        self.heads.mvlm_out.apply(g, h)
    }

    /// Logits of a document-level head, one row per segment.
    pub fn cls_logits(&self, g: &mut Graph<'_, T>, hidden: Var, batch: &PackedBatch, head: ClsHead) -> Var {
        let cls = g.gather_rows(hidden, batch.cls_rows());
        let lin = match head {
            ClsHead::Clf => &self.heads.clf,
            ClsHead::Dsp => &self.heads.dsp,
            ClsHead::Dtm => &self.heads.dtm,
        };
        lin.apply(g, cls)
    }

    /// Per-row token-label logits.
    pub fn token_logits(&self, g: &mut Graph<'_, T>, hidden: Var) -> Var {
        self.heads.token.apply(g, hidden)
    }
}
