//! Model and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids. Regular vocabulary ids start at [`FIRST_REGULAR_ID`].
pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const FIRST_REGULAR_ID: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackbonePreset {
    Tiny,
    Small,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub preset: BackbonePreset,
    /// Patchify stem: kernel = stride.
    pub stem_stride: usize,
    /// Output channels of each residual stage. Stage 1 keeps the stem
    /// resolution; every later stage halves it.
    pub channels: Vec<usize>,
    pub d_img: usize,
    /// Leading parameter groups (stem, stage1, stage2, ..., fpn) excluded
    /// from updates.
    pub frozen_stages: usize,
}

impl BackboneConfig {
    pub fn preset(preset: BackbonePreset) -> Self {
        let (stem_stride, channels, d_img) = match preset {
            BackbonePreset::Tiny => (8, vec![8, 16], 32),
            BackbonePreset::Small => (4, vec![16, 32, 64], 64),
            BackbonePreset::Full => (4, vec![64, 128, 256, 512], 256),
        };
        let frozen_stages = channels.len(); // stem + all but the last stage
        Self { preset, stem_stride, channels, d_img, frozen_stages }
    }

    pub fn tiny() -> Self {
        Self::preset(BackbonePreset::Tiny)
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    /// Strides of the pyramid levels, finest first. The last one is the output level.
    pub fn levels(&self) -> Vec<usize> {
        (0..self.channels.len()).map(|i| self.stem_stride << i).collect()
    }

    pub fn output_stride(&self) -> usize {
        self.stem_stride << (self.channels.len() - 1)
    }

    /// Parameter group names in freezing order.
    pub fn group_names(&self) -> Vec<String> {
        let mut g = vec!["vision.stem".to_string()];
        g.extend((1..=self.channels.len()).map(|i| format!("vision.stage{i}")));
        g.push("vision.fpn".to_string());
        g
    }

    /// `(width, height)` of the output feature map for a `u × v` page.
    pub fn map_size(&self, u: usize, v: usize) -> (usize, usize) {
        let s = self.output_stride();
        (u.div_ceil(s), v.div_ceil(s))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stem_stride == 0 || self.d_img == 0 || self.channels.contains(&0) {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.frozen_stages > self.channels.len() + 2 {
            return Err(Error::Config(format!(
                "frozen_stages {} exceeds the {} backbone parameter groups",
                self.frozen_stages,
                self.channels.len() + 2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// n_v, including the four reserved ids.
    pub vocab_size: usize,
    /// n_p
    pub max_pages: usize,
    /// T_page
    pub tokens_per_page: usize,
    /// S_max
    pub max_seq_len: usize,
    /// u
    pub page_width: usize,
    /// v
    pub page_height: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// Two-sided attention span W.
    pub window: usize,
    pub num_classes: usize,
    pub num_topics: usize,
    pub num_token_labels: usize,
    pub mask_prob: f64,
    pub page_embeddings_trainable: bool,
    pub init_std: f64,
    pub ln_eps: f64,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 30_522,
            max_pages: 5,
            tokens_per_page: 500,
            max_seq_len: 4096,
            page_width: 563,
            page_height: 750,
            hidden: 512,
            layers: 12,
            heads: 8,
            ff: 2048,
            window: 512,
            num_classes: 16,
            num_topics: 30,
            num_token_labels: 2,
            mask_prob: 0.15,
            page_embeddings_trainable: true,
            init_std: 0.02,
            ln_eps: 1e-5,
            backbone: BackboneConfig::preset(BackbonePreset::Full),
        }
    }
}

impl ModelConfig {
    /// A desk-scale model over the tiny backbone.
    pub fn desk() -> Self {
        Self {
            vocab_size: 256,
            max_pages: 5,
            tokens_per_page: 64,
            max_seq_len: 512,
            hidden: 32,
            layers: 2,
            heads: 2,
            ff: 64,
            window: 32,
            num_classes: 4,
            num_topics: 8,
            backbone: BackboneConfig::tiny(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= FIRST_REGULAR_ID as usize {
            return fail(format!("vocab_size {} leaves no room past the reserved ids", self.vocab_size));
        }
        if self.max_pages == 0 || self.tokens_per_page == 0 {
            return fail("max_pages and tokens_per_page must be positive".into());
        }
        let needed = 1 + self.max_pages * (self.tokens_per_page + 1);
        if self.max_seq_len < needed {
            return fail(format!(
                "max_seq_len {} is below 1 + max_pages·(tokens_per_page + 1) = {needed}",
                self.max_seq_len
            ));
        }
        if self.page_width == 0 || self.page_height == 0 {
            return fail("page size must be positive".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.hidden % 2 != 0 {
            return fail("hidden must be even for sinusoidal page embeddings".into());
        }
        if self.window % 2 != 0 {
            return fail(format!("window {} must be even", self.window));
        }
        if self.num_classes < 2 || self.num_topics < 2 || self.num_token_labels < 2 {
            return fail("heads need at least two outputs".into());
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return fail(format!("mask_prob {} outside [0, 1]", self.mask_prob));
        }
        self.backbone.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DtmMode {
    /// One MASK token per page, each followed by a SEP.
    #[default]
    PerPage,
    /// One MASK token for the whole document, pooled from page 0.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSchedule {
    pub batch_size: usize,
    pub accumulation: usize,
    pub weight: f64,
}

impl TaskSchedule {
    pub fn new(batch_size: usize, accumulation: usize) -> Self {
        Self { batch_size, accumulation, weight: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSet {
    pub mvlm: bool,
    pub clf: bool,
    pub dsp: bool,
    pub dtm: bool,
}

impl TaskSet {
    pub const ALL: Self = Self { mvlm: true, clf: true, dsp: true, dtm: true };

    pub fn parse(list: &str) -> Result<Self> {
        let mut t = Self { mvlm: false, clf: false, dsp: false, dtm: false };
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "mvlm" => t.mvlm = true,
                "clf" => t.clf = true,
                "dsp" => t.dsp = true,
                "dtm" => t.dtm = true,
                other => return Err(Error::Config(format!("unknown task `{other}`"))),
            }
        }
        if !(t.mvlm || t.clf || t.dsp || t.dtm) {
            return Err(Error::Config("no pre-training task enabled".into()));
        }
        Ok(t)
    }
}

impl Default for TaskSet {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub max_grad_norm: Option<f64>,
    pub mvlm_clf: TaskSchedule,
    pub dsp: TaskSchedule,
    pub dtm: TaskSchedule,
    pub tasks: TaskSet,
    pub shuffle_prob: f64,
    pub dtm_mode: DtmMode,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 15_000,
            lr: 3e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            max_grad_norm: None,
            mvlm_clf: TaskSchedule::new(32, 2),
            dsp: TaskSchedule::new(16, 1),
            dtm: TaskSchedule::new(16, 1),
            tasks: TaskSet::ALL,
            shuffle_prob: 0.5,
            dtm_mode: DtmMode::PerPage,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("mvlm_clf", self.mvlm_clf), ("dsp", self.dsp), ("dtm", self.dtm)] {
            if s.batch_size == 0 || s.accumulation == 0 {
                return Err(Error::Config(format!("{name}: batch_size and accumulation must be ≥ 1")));
            }
            if !s.weight.is_finite() || s.weight < 0.0 {
                return Err(Error::Config(format!("{name}: weight must be finite and ≥ 0")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.shuffle_prob) {
            return Err(Error::Config(format!("shuffle_prob {} outside [0, 1]", self.shuffle_prob)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_backbone_map_size() {
        let b = BackboneConfig::tiny();
        assert_eq!(b.output_stride(), 16);
        assert_eq!(b.map_size(563, 750), (36, 47));
        assert_eq!(b.group_names(), ["vision.stem", "vision.stage1", "vision.stage2", "vision.fpn"]);
    }

    #[test]
    fn full_backbone_levels() {
        let b = BackboneConfig::preset(BackbonePreset::Full);
        assert_eq!(b.levels(), [4, 8, 16, 32]);
        assert_eq!(b.map_size(563, 750), (18, 24));
    }

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_short_sequence_budget() {
        let cfg = ModelConfig { max_seq_len: 100, ..ModelConfig::desk() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn task_list_parsing() {
        let t = TaskSet::parse("mvlm, dtm").unwrap();
        assert!(t.mvlm && t.dtm && !t.clf && !t.dsp);
        assert!(TaskSet::parse("nsp").is_err());
        assert!(TaskSet::parse("").is_err());
    }
}
