use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn full_page(u: usize, v: usize) -> Self {
        Self::new(0, 0, u as u32, v as u32)
    }

    pub fn h(&self) -> u32 {
        self.y2.saturating_sub(self.y1)
    }

    pub fn w(&self) -> u32 {
        self.x2.saturating_sub(self.x1)
    }

    pub fn is_ordered(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// Clamps every coordinate into the `u × v` frame.
    pub fn clamped(&self, u: usize, v: usize) -> Self {
        let (u, v) = (u as u32, v as u32);
        Self::new(self.x1.min(u), self.y1.min(v), self.x2.min(u), self.y2.min(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: u32,
    pub bbox: BBox,
    pub page_index: usize,
    pub label: Option<u32>,
}

/// 8-bit RGB page raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Raster({}×{})", self.width, self.height)
    }
}

impl Raster {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&color);
        }
        Self { width, height, rgb }
    }

    pub fn from_rgb(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Shape(format!("{} bytes for a {width}×{height} RGB raster", rgb.len())));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Channel value in `[0, 1]`.
    pub fn value(&self, c: usize, y: usize, x: usize) -> f64 {
        self.rgb[(y * self.width + x) * 3 + c] as f64 / 255.0
    }

    /// Fills `[x1, x2) × [y1, y2)`, clipped to the raster.
    pub fn fill_rect(&mut self, x1: usize, y1: usize, x2: usize, y2: usize, color: [u8; 3]) {
        let (x2, y2) = (x2.min(self.width), y2.min(self.height));
        for y in y1..y2 {
            for x in x1..x2 {
                let i = (y * self.width + x) * 3;
                self.rgb[i..i + 3].copy_from_slice(&color);
            }
        }
    }

    /// `(3, H', W')` tensor in `[0, 1]`, zero-padded at the bottom/right so
    /// that both sides are multiples of `multiple`.
    pub fn to_chw_padded<T: Float>(&self, multiple: usize) -> Tensor<T> {
        let hp = self.height.div_ceil(multiple) * multiple;
        let wp = self.width.div_ceil(multiple) * multiple;
        let mut out = Tensor::zeros(&[3, hp, wp]);
        let lut: Vec<T> = (0..=255u32).map(|b| T::of(b as f64 / 255.0)).collect();
        let data = out.data_mut();
        for y in 0..self.height {
            for x in 0..self.width {
                let i = (y * self.width + x) * 3;
                for c in 0..3 {
                    data[(c * hp + y) * wp + x] = lut[self.rgb[i + c] as usize];
                }
            }
        }
        out
    }

    pub fn load(path: &Path, width: usize, height: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile { path: path.to_path_buf() });
        }
        let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })?;
        let mut rgb = img.to_rgb8();
        if rgb.width() as usize != width || rgb.height() as usize != height {
            rgb = image::imageops::resize(&rgb, width as u32, height as u32, image::imageops::FilterType::Triangle);
        }
        Self::from_rgb(width, height, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.rgb.clone())
            .ok_or_else(|| Error::Shape("raster buffer size".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
    }
}

#[derive(Debug, Clone)]
enum PageImage {
    /// Raster plus a content hash used as its feature-cache key.
    Loaded(Arc<Raster>, u64),
    /// Decoded on every access; nothing is retained.
    Lazy { path: PathBuf, width: usize, height: usize },
}

#[derive(Debug, Clone)]
pub struct PageRecord {
    pub page_index: usize,
    image: PageImage,
}

impl PageRecord {
    pub fn from_raster(page_index: usize, raster: Raster) -> Self {
        let mut h = DefaultHasher::new();
        (raster.width, raster.height, &raster.rgb).hash(&mut h);
        Self { page_index, image: PageImage::Loaded(Arc::new(raster), h.finish()) }
    }

    pub fn lazy(page_index: usize, path: PathBuf, width: usize, height: usize) -> Self {
        Self { page_index, image: PageImage::Lazy { path, width, height } }
    }

    pub fn image(&self) -> Result<Arc<Raster>> {
        match &self.image {
            PageImage::Loaded(r, _) => Ok(Arc::clone(r)),
            PageImage::Lazy { path, width, height } => Raster::load(path, *width, *height).map(Arc::new),
        }
    }

    pub fn source_path(&self) -> Option<&Path> {
        match &self.image {
            PageImage::Loaded(..) => None,
            PageImage::Lazy { path, .. } => Some(path),
        }
    }

    /// Identifies the pixels: a content hash for in-memory rasters, the
    /// file path for lazily decoded ones.
    pub fn cache_key(&self) -> String {
        match &self.image {
            PageImage::Loaded(_, h) => format!("px:{h:016x}"),
            PageImage::Lazy { path, width, height } => format!("file:{}@{width}x{height}", path.display()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Document {
    pub id: String,
    pub pages: Vec<PageRecord>,
    pub tokens: Vec<TokenRecord>,
    pub category: Option<usize>,
}

impl Document {
    /// Structural checks independent of any model configuration.
    pub fn validate(&self) -> Result<()> {
        if self.pages.is_empty() {
            return Err(Error::doc(&self.id, "document has no pages"));
        }
        for (i, p) in self.pages.iter().enumerate() {
            if p.page_index != i {
                return Err(Error::doc(&self.id, format!("page at position {i} has page_index {}", p.page_index)));
            }
        }
        let mut last = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.page_index >= self.pages.len() {
                return Err(Error::doc(
                    &self.id,
                    format!("token {i} references missing page {} ({} pages)", t.page_index, self.pages.len()),
                ));
            }
            if t.page_index < last {
                return Err(Error::doc(&self.id, format!("token {i} breaks ascending page order")));
            }
            last = t.page_index;
            if !t.bbox.is_ordered() {
                return Err(Error::doc(&self.id, format!("token {i} has an inverted box {:?}", t.bbox)));
            }
        }
        Ok(())
    }

    pub fn num_pages(&self) -> usize {
        self.pages.len()
    }

    /// Token ids of every page, in order.
    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.token_id).collect()
    }

    pub fn tokens_on(&self, page: usize) -> impl Iterator<Item = &TokenRecord> {
        self.tokens.iter().filter(move |t| t.page_index == page)
    }
}
