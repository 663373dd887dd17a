//! Residual convolutional backbone with a feature pyramid, plus the
//! box-to-cell scaling and max RoI pooling used to read token features.
//!
//! The pyramid runs top-down (coarse to fine) through 1×1 laterals and
//! nearest upsampling. The returned map sits at the coarsest level; finer
//! fused levels are average-pooled back onto it before a 3×3 smoothing conv,
//! so every level contributes to the output.

use std::collections::HashMap;
use std::rc::Rc;

use crate::autograd::{roi_max_forward, Graph, RoiRegion, Var};
use crate::config::BackboneConfig;
use crate::corpus::{BBox, Raster};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Per-page feature map of shape `(d_img, v', u')`.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub stride: usize,
}

impl<T: Float> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Cell rectangle `[left, right) × [top, bottom)` on a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRegion {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

fn scale_axis(lo: u32, hi: u32, from: usize, to: usize) -> (usize, usize) {
    let start = (lo as usize * to / from).min(to - 1);
    let end = (hi as usize * to).div_ceil(from).clamp(start + 1, to);
    (start, end)
}

/// Maps a box in the `from = (u, v)` page frame onto the cells of a
/// `to = (u', v')` map. The region is never empty.
pub fn scale_bbox(b: BBox, from: (usize, usize), to: (usize, usize)) -> CellRegion {
    let (left, right) = scale_axis(b.x1, b.x2, from.0, to.0);
    let (top, bottom) = scale_axis(b.y1, b.y2, from.1, to.1);
    CellRegion { left, top, right, bottom }
}

impl CellRegion {
    pub fn on_page(self, page: usize) -> RoiRegion {
        RoiRegion { page, top: self.top, bottom: self.bottom, left: self.left, right: self.right }
    }
}

/// Per-channel max over `region` of `map`.
pub fn roi_pool<T: Float>(map: &FeatureMap<T>, region: CellRegion) -> Vec<T> {
    let s = map.values.shape();
    let stacked = map.values.clone().reshape(&[1, s[0], s[1], s[2]]).expect("same numel");
    roi_max_forward(&stacked, &[region.on_page(0)]).0.into_data()
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        group: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), group, init.normal(&[cout, cin, k, k], std), true);
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout]), false);
        Self { w, b, stride, pad }
    }

    fn apply<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl Stage {
    fn apply<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.conv1.apply(g, x);
        let h = g.gelu(h);
        let h = self.conv2.apply(g, h);
        let s = match &self.shortcut {
            Some(c) => c.apply(g, x),
            None => x,
        };
        let y = g.add(h, s);
        g.gelu(y)
    }
}

/// Outputs of the frozen leading part of the backbone for one page.
#[derive(Debug, Clone)]
pub struct FrozenFeatures<T> {
    /// Stem output, kept only when no stage is frozen.
    stem: Option<Tensor<T>>,
    /// Outputs of the frozen stages, in order.
    stages: Vec<Tensor<T>>,
    /// Final map, when the pyramid itself is frozen.
    output: Option<Tensor<T>>,
}

/// Memo of [`FrozenFeatures`] keyed by page identity.
#[derive(Debug)]
pub struct FeatureCache<T> {
    entries: HashMap<String, Rc<FrozenFeatures<T>>>,
}

impl<T> Default for FeatureCache<T> {
    fn default() -> Self {
        Self { entries: HashMap::new() }
    }
}

impl<T> FeatureCache<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    page: (usize, usize),
    stem: Conv,
    stages: Vec<Stage>,
    laterals: Vec<Conv>,
    smooth: Conv,
}

impl Backbone {
    /// Registers parameters under groups `vision.stem`, `vision.stage<i>`,
    /// `vision.fpn` and freezes the leading `frozen_stages` groups.
    pub fn new<T: Float>(
        cfg: &BackboneConfig,
        page: (usize, usize),
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let s0 = cfg.stem_stride;
        let stem = Conv::new(store, init, "vision.stem", "vision.stem", (3, ch[0], s0), s0, 0);
        let mut stages = Vec::with_capacity(ch.len());
        for (i, &c) in ch.iter().enumerate() {
            let group = format!("vision.stage{}", i + 1);
            let (cin, stride) = if i == 0 { (ch[0], 1) } else { (ch[i - 1], 2) };
            let conv1 = Conv::new(store, init, &format!("{group}.conv1"), &group, (cin, c, 3), stride, 1);
            let conv2 = Conv::new(store, init, &format!("{group}.conv2"), &group, (c, c, 3), 1, 1);
            let shortcut = (stride != 1 || cin != c)
                .then(|| Conv::new(store, init, &format!("{group}.shortcut"), &group, (cin, c, 1), stride, 0));
            stages.push(Stage { conv1, conv2, shortcut });
        }
        let laterals = ch
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv::new(store, init, &format!("vision.fpn.lateral{}", i + 1), "vision.fpn", (c, cfg.d_img, 1), 1, 0))
            .collect();
        let smooth = Conv::new(store, init, "vision.fpn.smooth", "vision.fpn", (cfg.d_img, cfg.d_img, 3), 1, 1);
        for group in cfg.group_names().iter().take(cfg.frozen_stages) {
            store.set_group_trainable(group, false);
        }
        Ok(Self { cfg: cfg.clone(), page, stem, stages, laterals, smooth })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `(u', v')` of the output map.
    pub fn map_size(&self) -> (usize, usize) {
        self.cfg.map_size(self.page.0, self.page.1)
    }

    fn frozen_stage_count(&self) -> usize {
        self.cfg.frozen_stages.saturating_sub(1).min(self.stages.len())
    }

    fn fpn_frozen(&self) -> bool {
        self.cfg.frozen_stages >= self.stages.len() + 2
    }

    /// True when some leading computation can be cached.
    pub fn has_frozen_prefix(&self) -> bool {
        self.cfg.frozen_stages > 0
    }

    fn image_tensor<T: Float>(&self, raster: &Raster) -> Result<Tensor<T>> {
        if (raster.width(), raster.height()) != self.page {
            return Err(Error::Shape(format!(
                "page image is {}×{}, expected {}×{}",
                raster.width(),
                raster.height(),
                self.page.0,
                self.page.1
            )));
        }
        Ok(raster.to_chw_padded(self.cfg.stem_stride))
    }

    /// Runs from image to output map. When `frozen` is given, the frozen
    /// prefix is read from it instead of being recomputed.
    fn run<T: Float>(&self, g: &mut Graph<'_, T>, images: Option<Var>, frozen: Option<FrozenVars>) -> Var {
        if let Some(FrozenVars { output: Some(out), .. }) = frozen {
            return out;
        }
        let n_frozen = if frozen.is_some() { self.frozen_stage_count() } else { 0 };
        let mut outs: Vec<Var> = Vec::with_capacity(self.stages.len());
        let mut x = match &frozen {
            Some(f) if n_frozen > 0 => {
                outs.extend_from_slice(&f.stages);
                *outs.last().expect("frozen stage")
            }
            Some(f) => f.stem.expect("stem features"),
            None => self.stem.apply(g, images.expect("images or cached features")),
        };
        for stage in &self.stages[n_frozen..] {
            x = stage.apply(g, x);
            outs.push(x);
        }
        self.pyramid(g, &outs)
    }

    fn pyramid<T: Float>(&self, g: &mut Graph<'_, T>, outs: &[Var]) -> Var {
        let top = outs.len() - 1;
        let mut fused: Vec<Var> = Vec::with_capacity(outs.len());
        let mut prev = self.laterals[top].apply(g, outs[top]);
        fused.push(prev);
        for l in (0..top).rev() {
            let lat = self.laterals[l].apply(g, outs[l]);
            let (h, w) = {
                let s = g.shape(lat);
                (s[2], s[3])
            };
            let up = g.upsample_nearest(prev, 2, h, w);
            prev = g.add(lat, up);
            fused.push(prev);
        }
        // fused[j] sits 2^j levels below the top
        let mut acc = fused[0];
        for (j, &f) in fused.iter().enumerate().skip(1) {
            let pooled = g.avg_pool(f, 1 << j);
            acc = g.add(acc, pooled);
        }
        self.smooth.apply(g, acc)
    }

    /// Full forward from raw page images. Returns `(pages, d_img, v', u')`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, pages: &[&Raster]) -> Result<Var> {
        let imgs = pages.iter().map(|r| self.image_tensor(r)).collect::<Result<Vec<Tensor<T>>>>()?;
        let x = g.input(Tensor::stack(&imgs.iter().collect::<Vec<_>>())?);
        Ok(self.run(g, Some(x), None))
    }

    /// Frozen-prefix outputs for one page, computed without gradient tracking.
    pub fn frozen_features<T: Float>(&self, store: &ParamStore<T>, raster: &Raster) -> Result<FrozenFeatures<T>> {
        let mut g = Graph::inference(store);
        let x = g.input(self.image_tensor(raster)?.reshape_leading(1));
        let mut x = self.stem.apply(&mut g, x);
        let n_frozen = self.frozen_stage_count();
        let mut stage_vars = Vec::new();
        for stage in &self.stages[..n_frozen] {
            x = stage.apply(&mut g, x);
            stage_vars.push(x);
        }
        let first = |v: Var, g: &Graph<'_, T>| g.value(v).index_first(0);
        let output = if self.fpn_frozen() {
            let out = self.pyramid(&mut g, &stage_vars);
            Some(first(out, &g))
        } else {
            None
        };
        Ok(FrozenFeatures {
            stem: (n_frozen == 0).then(|| first(x, &g)),
            stages: stage_vars.iter().map(|&v| first(v, &g)).collect(),
            output,
        })
    }

    /// Forward for a batch of pages, using (and filling) `cache` for the
    /// frozen prefix. `pages` pairs a cache key with its raster loader.
    pub fn forward_cached<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        cache: &mut FeatureCache<T>,
        pages: &[(String, &dyn Fn() -> Result<std::sync::Arc<Raster>>)],
    ) -> Result<Var> {
        if !self.has_frozen_prefix() {
            let rasters = pages.iter().map(|(_, load)| load()).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Raster> = rasters.iter().map(|r| r.as_ref()).collect();
            return self.forward(g, &refs);
        }
        let mut feats = Vec::with_capacity(pages.len());
        for (key, load) in pages {
            let entry = match cache.entries.get(key) {
                Some(e) => Rc::clone(e),
                None => {
                    let f = Rc::new(self.frozen_features(g.store(), &*load()?)?);
                    cache.entries.insert(key.clone(), Rc::clone(&f));
                    f
                }
            };
            feats.push(entry);
        }
        let stack = |pick: &dyn Fn(&FrozenFeatures<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            Tensor::stack(&feats.iter().map(|f| pick(f)).collect::<Vec<_>>())
        };
        let frozen = if self.fpn_frozen() {
            FrozenVars { stem: None, stages: Vec::new(), output: Some(g.input(stack(&|f| f.output.as_ref().unwrap())?)) }
        } else if self.frozen_stage_count() == 0 {
            FrozenVars { stem: Some(g.input(stack(&|f| f.stem.as_ref().unwrap())?)), stages: Vec::new(), output: None }
        } else {
            let stages = (0..self.frozen_stage_count())
                .map(|i| Ok(g.input(stack(&|f| &f.stages[i])?)))
                .collect::<Result<Vec<_>>>()?;
            FrozenVars { stem: None, stages, output: None }
        };
        Ok(self.run(g, None, Some(frozen)))
    }

    /// Evaluation-mode feature map of a single page.
    pub fn extract_feature_map<T: Float>(&self, store: &ParamStore<T>, raster: &Raster) -> Result<FeatureMap<T>> {
        let mut g = Graph::inference(store);
        let out = self.forward(&mut g, &[raster])?;
        Ok(FeatureMap { values: g.value(out).index_first(0), stride: self.cfg.output_stride() })
    }
}

struct FrozenVars {
    stem: Option<Var>,
    stages: Vec<Var>,
    output: Option<Var>,
}

impl<T: Float> Tensor<T> {
    fn reshape_leading(self, n: usize) -> Tensor<T> {
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape());
        self.reshape(&shape).expect("leading unit dimension")
    }
}
