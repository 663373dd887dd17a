//! Deterministic multi-page document generator.
//!
//! Vocabulary layout: the reserved ids, then a shared pool, then one
//! contiguous partition per category. Tokens render as grey rectangles whose
//! intensity rises with the token id, so a page's intensity histogram reveals
//! its category. Every page carries a saturated colour square in its top-left
//! margin that identifies the page index. Optional table bands (tinted
//! background with grid lines) mark their tokens with label 1.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::FIRST_REGULAR_ID;
use crate::error::{Error, Result};

use super::manifest::write_corpus;
use super::types::{BBox, Document, PageRecord, Raster, TokenRecord};

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const TABLE_BACKGROUND: [u8; 3] = [205, 225, 250];
pub const TABLE_GRID: [u8; 3] = [120, 140, 170];

const GLYPH_COLORS: [[u8; 3]; 8] = [
    [230, 25, 25],
    [25, 170, 40],
    [30, 60, 235],
    [210, 30, 210],
    [0, 180, 180],
    [245, 150, 0],
    [130, 70, 20],
    [110, 0, 170],
];

/// Colour of the page-order mark for page `index`.
pub fn glyph_color(index: usize) -> [u8; 3] {
    let base = GLYPH_COLORS[index % GLYPH_COLORS.len()];
    // darken on each wrap so indices beyond the palette stay distinct
    let k = (index / GLYPH_COLORS.len()) as u32;
    base.map(|c| (c as u32 * 4 / (4 + k)) as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_docs: usize,
    pub num_categories: usize,
    pub min_pages: usize,
    pub max_pages: usize,
    pub min_tokens_per_page: usize,
    pub max_tokens_per_page: usize,
    /// Ids per category partition.
    pub partition_size: usize,
    /// Ids in the pool every category may draw from.
    pub shared_vocab: usize,
    /// Probability that a token comes from its category's partition.
    pub in_category_prob: f64,
    /// Probability that a page carries a table band.
    pub table_prob: f64,
    pub page_width: usize,
    pub page_height: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_docs: 200,
            num_categories: 4,
            min_pages: 2,
            max_pages: 4,
            min_tokens_per_page: 12,
            max_tokens_per_page: 24,
            partition_size: 48,
            shared_vocab: 32,
            in_category_prob: 0.9,
            table_prob: 0.5,
            page_width: 563,
            page_height: 750,
        }
    }
}

/// Geometry derived from the page size.
#[derive(Debug, Clone, Copy)]
pub struct PageGeometry {
    pub margin: usize,
    pub glyph_offset: usize,
    pub glyph_size: usize,
    pub line_height: usize,
    pub token_height: usize,
}

impl PageGeometry {
    pub fn for_page(u: usize, v: usize) -> Self {
        let margin = (u.min(v) / 12).max(8);
        let line_height = (v / 26).max(6);
        Self {
            margin,
            glyph_offset: margin / 8,
            glyph_size: (margin * 3 / 4).max(4),
            line_height,
            token_height: (line_height * 2 / 3).max(3),
        }
    }
}

impl SyntheticSpec {
    /// Total id space, reserved ids included.
    pub fn vocab_size(&self) -> usize {
        FIRST_REGULAR_ID as usize + self.shared_vocab + self.num_categories * self.partition_size
    }

    pub fn category_range(&self, c: usize) -> std::ops::Range<u32> {
        let start = FIRST_REGULAR_ID as usize + self.shared_vocab + c * self.partition_size;
        start as u32..(start + self.partition_size) as u32
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_categories == 0 || self.num_docs == 0 {
            return fail("num_docs and num_categories must be positive".into());
        }
        if self.min_pages == 0 || self.min_pages > self.max_pages {
            return fail(format!("page range {}..={} is empty", self.min_pages, self.max_pages));
        }
        if self.min_tokens_per_page == 0 || self.min_tokens_per_page > self.max_tokens_per_page {
            return fail(format!(
                "tokens-per-page range {}..={} is empty",
                self.min_tokens_per_page, self.max_tokens_per_page
            ));
        }
        if self.partition_size < self.max_tokens_per_page {
            return fail(format!(
                "vocabulary partition of {} ids is smaller than the {} tokens requested per page",
                self.partition_size, self.max_tokens_per_page
            ));
        }
        if self.in_category_prob < 1.0 && self.shared_vocab == 0 {
            return fail("in_category_prob < 1 needs a shared vocabulary".into());
        }
        let g = PageGeometry::for_page(self.page_width, self.page_height);
        let lines = (self.page_height - 2 * g.margin) / g.line_height;
        let per_line = (self.page_width - 2 * g.margin) / (5 * g.token_height);
        if lines * per_line < self.max_tokens_per_page {
            return fail(format!("a {}×{} page cannot hold {} tokens", self.page_width, self.page_height, self.max_tokens_per_page));
        }
        Ok(())
    }

    /// Grey level of a token: rises with the id over the regular range.
    pub fn token_intensity(&self, id: u32) -> u8 {
        let span = (self.vocab_size() - FIRST_REGULAR_ID as usize).max(2) - 1;
        let k = (id - FIRST_REGULAR_ID) as usize;
        (20 + k * 180 / span) as u8
    }
}

/// Generates documents in memory; page rasters are held decoded.
pub fn synthesize(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Document>> {
    spec.validate()?;
    (0..spec.num_docs).map(|i| synthesize_one(spec, seed, i)).collect()
}

fn synthesize_one(spec: &SyntheticSpec, seed: u64, i: usize) -> Result<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let category = i % spec.num_categories;
    let n_pages = rng.gen_range(spec.min_pages..=spec.max_pages);
    let (u, v) = (spec.page_width, spec.page_height);
    let g = PageGeometry::for_page(u, v);
    let cat_ids = spec.category_range(category);
    let shared = FIRST_REGULAR_ID..FIRST_REGULAR_ID + spec.shared_vocab as u32;
    let mut pages = Vec::with_capacity(n_pages);
    let mut tokens = Vec::new();
    for p in 0..n_pages {
        let mut img = Raster::filled(u, v, BACKGROUND);
        let n_tok = rng.gen_range(spec.min_tokens_per_page..=spec.max_tokens_per_page);
        let boxes = layout_line_boxes(&mut rng, n_tok, u, v, &g);
        let n_lines = boxes.last().map_or(0, |b| b.0) + 1;
        let table = (rng.gen::<f64>() < spec.table_prob && n_lines >= 2).then(|| {
            let len = rng.gen_range(1..=n_lines.min(4));
            let start = rng.gen_range(0..=n_lines - len);
            start..start + len
        });
        if let Some(rows) = &table {
            let top = g.margin + rows.start * g.line_height;
            let bottom = g.margin + rows.end * g.line_height;
            img.fill_rect(g.margin / 2, top, u - g.margin / 2, bottom, TABLE_BACKGROUND);
            for r in rows.start..=rows.end {
                let y = g.margin + r * g.line_height;
                img.fill_rect(g.margin / 2, y.saturating_sub(1), u - g.margin / 2, y + 1, TABLE_GRID);
            }
            for k in 0..=4 {
                let x = g.margin / 2 + k * (u - g.margin) / 4;
                img.fill_rect(x.saturating_sub(1), top, x + 1, bottom, TABLE_GRID);
            }
        }
        for (line, b) in boxes {
            let id = if spec.in_category_prob >= 1.0 || rng.gen::<f64>() < spec.in_category_prob {
                rng.gen_range(cat_ids.clone())
            } else {
                rng.gen_range(shared.clone())
            };
            let gray = spec.token_intensity(id);
            img.fill_rect(b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize, [gray; 3]);
            let in_table = table.as_ref().is_some_and(|r| r.contains(&line));
            tokens.push(TokenRecord { token_id: id, bbox: b, page_index: p, label: Some(in_table as u32) });
        }
        let (go, gs) = (g.glyph_offset, g.glyph_size);
        img.fill_rect(go, go, go + gs, go + gs, glyph_color(p));
        pages.push(PageRecord::from_raster(p, img));
    }
    Ok(Document { id: format!("doc{i:05}"), pages, tokens, category: Some(category) })
}

/// Boxes flowing left-to-right, top-to-bottom inside the margins, tagged
/// with their line number.
fn layout_line_boxes(rng: &mut ChaCha8Rng, n: usize, u: usize, v: usize, g: &PageGeometry) -> Vec<(usize, BBox)> {
    let th = g.token_height;
    let right = u - g.margin;
    let (mut x, mut line) = (g.margin, 0usize);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = rng.gen_range(th..=3 * th).min(right - g.margin);
        if x + w > right {
            line += 1;
            x = g.margin;
        }
        let y = g.margin + line * g.line_height + (g.line_height - th) / 2;
        debug_assert!(y + th <= v - g.margin);
        out.push((line, BBox::new(x as u32, y as u32, (x + w) as u32, (y + th) as u32)));
        x += w + th / 2 + rng.gen_range(0..=th);
    }
    out
}

/// Generates and writes a corpus directory; returns the manifest path.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<PathBuf> {
    let docs = synthesize(spec, seed)?;
    write_corpus(dir, &docs)
}
