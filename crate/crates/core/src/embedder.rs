//! Additive fusion of word, position, layout, image and page embeddings.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RoiRegion, Var};
use crate::config::ModelConfig;
use crate::corpus::{EncodedDocument, PageRecord};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::vision::scale_bbox;

/// Which embedding families enter the fused input. Position embeddings are
/// always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    pub use_text: bool,
    pub use_layout: bool,
    pub use_image: bool,
    pub use_page: bool,
}

impl AblationMask {
    pub const ALL: Self = Self { use_text: true, use_layout: true, use_image: true, use_page: true };
    pub const TEXT_ONLY: Self = Self { use_text: true, use_layout: false, use_image: false, use_page: false };
    pub const IMAGE_ONLY: Self = Self { use_text: false, use_layout: false, use_image: true, use_page: false };

    pub fn validate(&self) -> Result<()> {
        if self.use_text || self.use_layout || self.use_image || self.use_page {
            Ok(())
        } else {
            Err(Error::Config("ablation disables every embedding family".into()))
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "all" => Ok(Self::ALL),
            "text-only" => Ok(Self::TEXT_ONLY),
            "image-only" => Ok(Self::IMAGE_ONLY),
            other => Err(Error::Config(format!("unknown ablation `{other}` (all, text-only, image-only)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match *self {
            Self::ALL => "all",
            Self::TEXT_ONLY => "text-only",
            Self::IMAGE_ONLY => "image-only",
            _ => "custom",
        }
    }
}

impl Default for AblationMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Row `p`, column `2i` = `sin(p / 10000^(2i/d))`; column `2i+1` the cosine.
pub fn sinusoidal_init(n: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal table width {d} must be even")));
    }
    let mut out = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[p * d + 2 * i] = angle.sin();
            out[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(out)
}

/// Documents stacked row-wise; each document is one attention segment.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub segments: Vec<(usize, usize)>,
    pub input_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub x1s: Vec<usize>,
    pub y1s: Vec<usize>,
    pub x2s: Vec<usize>,
    pub y2s: Vec<usize>,
    pub hs: Vec<usize>,
    pub ws: Vec<usize>,
    pub page_ids: Vec<usize>,
    /// Row of the stacked page list whose map this position reads.
    pub map_index: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub global_mask: Vec<bool>,
    /// `(cache key, page)` for every stacked page.
    pub pages: Vec<(String, PageRecord)>,
}

impl PackedBatch {
    pub fn new(docs: &[&EncodedDocument]) -> Result<Self> {
        let mut b = Self {
            segments: Vec::with_capacity(docs.len()),
            input_ids: Vec::new(),
            positions: Vec::new(),
            x1s: Vec::new(),
            y1s: Vec::new(),
            x2s: Vec::new(),
            y2s: Vec::new(),
            hs: Vec::new(),
            ws: Vec::new(),
            page_ids: Vec::new(),
            map_index: Vec::new(),
            attention_mask: Vec::new(),
            global_mask: Vec::new(),
            pages: Vec::new(),
        };
        for doc in docs {
            let offset = b.pages.len();
            for page in &doc.page_images {
                b.pages.push((page.cache_key(), page.clone()));
            }
            b.segments.push((b.input_ids.len(), doc.len()));
            for s in 0..doc.len() {
                let page = doc.page_ids[s] as usize;
                if page >= doc.page_images.len() {
                    return Err(Error::doc(
                        &doc.doc_id,
                        format!("position {s} references page {page} but only {} page maps exist", doc.page_images.len()),
                    ));
                }
                b.input_ids.push(doc.input_ids[s] as usize);
                b.positions.push(s);
                b.x1s.push(doc.x1s[s] as usize);
                b.y1s.push(doc.y1s[s] as usize);
                b.x2s.push(doc.x2s[s] as usize);
                b.y2s.push(doc.y2s[s] as usize);
                b.hs.push(doc.hs[s] as usize);
                b.ws.push(doc.ws[s] as usize);
                b.page_ids.push(page);
                b.map_index.push(offset + page);
                b.attention_mask.push(doc.attention_mask[s]);
                b.global_mask.push(doc.global_mask[s]);
            }
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.input_ids.len()
    }

    /// First row of every segment (the CLS position).
    pub fn cls_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|&(start, _)| start).collect()
    }

    pub fn mask_weights<T: Float>(&self) -> Vec<T> {
        self.attention_mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Embedder {
    word: ParamId,
    position: ParamId,
    x: ParamId,
    y: ParamId,
    h: ParamId,
    w: ParamId,
    page: ParamId,
    image_proj: Linear,
    page_size: (usize, usize),
}

impl Embedder {
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, init: &mut Init<'_>) -> Result<Self> {
        let d = cfg.hidden;
        let (u, v) = (cfg.page_width, cfg.page_height);
        let std = cfg.init_std;
        let mut table = |name: &str, rows: usize, init: &mut Init<'_>| {
            store.add(format!("embed.{name}"), "embed", init.normal::<T>(&[rows, d], std), false)
        };
        let word = table("word", cfg.vocab_size, init);
        let position = table("position", cfg.max_seq_len, init);
        let x = table("x", u + 1, init);
        let y = table("y", v + 1, init);
        let h = table("h", v + 1, init);
        let w = table("w", u + 1, init);
        let sin = sinusoidal_init(cfg.max_pages, d)?;
        let page = store.add("embed.page", "embed.page", Tensor::from_f64(&[cfg.max_pages, d], &sin)?, false);
        store.get_mut(page).trainable = cfg.page_embeddings_trainable;
        let image_proj = Linear::new(store, init, "embed.image_proj", "embed", (cfg.backbone.d_img, d), std);
        Ok(Self { word, position, x, y, h, w, page, image_proj, page_size: (u, v) })
    }

    pub fn page_table(&self) -> ParamId {
        self.page
    }

    /// Table parameters by family name: word, position, x, y, h, w, page.
    pub fn tables(&self) -> [(&'static str, ParamId); 7] {
        [
            ("word", self.word),
            ("position", self.position),
            ("x", self.x),
            ("y", self.y),
            ("h", self.h),
            ("w", self.w),
            ("page", self.page),
        ]
    }

    fn lookup<T: Float>(&self, g: &mut Graph<'_, T>, table: ParamId, idx: &[usize]) -> Var {
        let t = g.param(table);
        g.gather_rows(t, idx.to_vec())
    }

    /// Fused `(rows, d)` input. `maps` is the `(pages, d_img, v', u')` stack
    /// for `batch.pages`, required when images are enabled. Padding rows are zero.
    pub fn embed<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &PackedBatch,
        maps: Option<Var>,
        ablation: AblationMask,
    ) -> Result<Var> {
        let mut terms = vec![self.lookup(g, self.position, &batch.positions)];
        if ablation.use_text {
            terms.push(self.lookup(g, self.word, &batch.input_ids));
        }
        if ablation.use_layout {
            terms.push(self.lookup(g, self.x, &batch.x1s));
            terms.push(self.lookup(g, self.x, &batch.x2s));
            terms.push(self.lookup(g, self.y, &batch.y1s));
            terms.push(self.lookup(g, self.y, &batch.y2s));
            terms.push(self.lookup(g, self.h, &batch.hs));
            terms.push(self.lookup(g, self.w, &batch.ws));
        }
        if ablation.use_image {
            let maps = maps.ok_or_else(|| Error::Batch("image embeddings enabled but no feature maps given".into()))?;
            terms.push(self.image_term(g, batch, maps)?);
        }
        if ablation.use_page {
            terms.push(self.lookup(g, self.page, &batch.page_ids));
        }
        let sum = g.sum(&terms);
        Ok(g.scale_rows(sum, batch.mask_weights()))
    }

    fn image_term<T: Float>(&self, g: &mut Graph<'_, T>, batch: &PackedBatch, maps: Var) -> Result<Var> {
        let s = g.shape(maps).to_vec();
        if s.len() != 4 || s[0] != batch.pages.len() {
            return Err(Error::Shape(format!("expected a map stack for {} pages, got {:?}", batch.pages.len(), s)));
        }
        let to = (s[3], s[2]);
        let regions: Vec<RoiRegion> = (0..batch.rows())
            .map(|r| {
                let b = crate::corpus::BBox::new(
                    batch.x1s[r] as u32,
                    batch.y1s[r] as u32,
                    batch.x2s[r] as u32,
                    batch.y2s[r] as u32,
                );
                scale_bbox(b, self.page_size, to).on_page(batch.map_index[r])
            })
            .collect();
        let pooled = g.roi_max_pool(maps, &regions);
        Ok(self.image_proj.apply(g, pooled))
    }
}
