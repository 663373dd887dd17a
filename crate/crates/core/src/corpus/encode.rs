use crate::config::{ModelConfig, CLS_ID, FIRST_REGULAR_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};

use super::types::{BBox, Document, PageRecord};

/// Label value at positions that carry no target.
pub const IGNORE_INDEX: i64 = -100;

/// Model-ready parallel sequences for one document.
#[derive(Debug, Clone)]
pub struct EncodedDocument {
    pub doc_id: String,
    pub input_ids: Vec<u32>,
    pub x1s: Vec<u32>,
    pub y1s: Vec<u32>,
    pub x2s: Vec<u32>,
    pub y2s: Vec<u32>,
    pub hs: Vec<u32>,
    pub ws: Vec<u32>,
    pub page_ids: Vec<u32>,
    /// Image looked up for page id `p` is `page_images[p]`.
    pub page_images: Vec<PageRecord>,
    pub attention_mask: Vec<bool>,
    pub global_mask: Vec<bool>,
    pub mvlm_labels: Option<Vec<i64>>,
    pub token_labels: Option<Vec<i64>>,
}

impl EncodedDocument {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    pub fn num_pages(&self) -> usize {
        self.page_images.len()
    }

    /// CLS, SEP and padding positions.
    pub fn is_special(&self, pos: usize) -> bool {
        matches!(self.input_ids[pos], PAD_ID | CLS_ID | SEP_ID) || !self.attention_mask[pos]
    }

    pub fn box_at(&self, pos: usize) -> BBox {
        BBox::new(self.x1s[pos], self.y1s[pos], self.x2s[pos], self.y2s[pos])
    }

    pub(crate) fn push(&mut self, id: u32, b: BBox, page: u32, token_label: i64) {
        self.input_ids.push(id);
        self.x1s.push(b.x1);
        self.y1s.push(b.y1);
        self.x2s.push(b.x2);
        self.y2s.push(b.y2);
        self.hs.push(b.h());
        self.ws.push(b.w());
        self.page_ids.push(page);
        self.attention_mask.push(true);
        self.global_mask.push(id == CLS_ID);
        if let Some(l) = self.mvlm_labels.as_mut() {
            l.push(IGNORE_INDEX);
        }
        if let Some(l) = self.token_labels.as_mut() {
            l.push(token_label);
        }
    }

    pub(crate) fn empty(doc_id: &str, page_images: Vec<PageRecord>, with_token_labels: bool) -> Self {
        Self {
            doc_id: doc_id.to_string(),
            input_ids: Vec::new(),
            x1s: Vec::new(),
            y1s: Vec::new(),
            x2s: Vec::new(),
            y2s: Vec::new(),
            hs: Vec::new(),
            ws: Vec::new(),
            page_ids: Vec::new(),
            page_images,
            attention_mask: Vec::new(),
            global_mask: Vec::new(),
            mvlm_labels: None,
            token_labels: with_token_labels.then(Vec::new),
        }
    }

    /// Pads to `len` positions. Padding slots are masked out and carry no labels.
    pub fn pad_to(&mut self, len: usize) {
        while self.len() < len {
            self.input_ids.push(PAD_ID);
            for v in [&mut self.x1s, &mut self.y1s, &mut self.x2s, &mut self.y2s, &mut self.hs, &mut self.ws] {
                v.push(0);
            }
            self.page_ids.push(0);
            self.attention_mask.push(false);
            self.global_mask.push(false);
            if let Some(l) = self.mvlm_labels.as_mut() {
                l.push(IGNORE_INDEX);
            }
            if let Some(l) = self.token_labels.as_mut() {
                l.push(IGNORE_INDEX);
            }
        }
    }
}

/// Lays a document out as `CLS, page-0 tokens, SEP, page-1 tokens, SEP, ...`.
///
/// Pages beyond `max_pages` are dropped first, then tokens beyond
/// `tokens_per_page` on each kept page. The output is unpadded.
pub fn encode_document(doc: &Document, cfg: &ModelConfig) -> Result<EncodedDocument> {
    doc.validate()?;
    let (u, v) = (cfg.page_width, cfg.page_height);
    let kept = doc.pages.len().min(cfg.max_pages);
    let has_labels = doc.tokens.iter().any(|t| t.label.is_some());
    let mut enc = EncodedDocument::empty(&doc.id, doc.pages[..kept].to_vec(), has_labels);
    let full = BBox::full_page(u, v);
    enc.push(CLS_ID, full, 0, IGNORE_INDEX);
    let mut tokens = doc.tokens.iter().enumerate().peekable();
    for page in 0..kept {
        let mut on_page = 0;
        while let Some((i, t)) = tokens.next_if(|(_, t)| t.page_index == page) {
            if t.token_id < FIRST_REGULAR_ID || t.token_id as usize >= cfg.vocab_size {
                return Err(Error::doc(
                    &doc.id,
                    format!("token {i} has id {} outside the regular range [{FIRST_REGULAR_ID}, {})", t.token_id, cfg.vocab_size),
                ));
            }
            if on_page == cfg.tokens_per_page {
                continue;
            }
            on_page += 1;
            let label = t.label.map_or(IGNORE_INDEX, i64::from);
            enc.push(t.token_id, t.bbox.clamped(u, v), page as u32, label);
        }
        enc.push(SEP_ID, full, page as u32, IGNORE_INDEX);
    }
    if enc.len() > cfg.max_seq_len {
        return Err(Error::doc(&doc.id, format!("encoded length {} exceeds max_seq_len {}", enc.len(), cfg.max_seq_len)));
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::types::{Raster, TokenRecord};

    fn doc(pages: usize, tokens: &[(u32, usize)]) -> Document {
        Document {
            id: "d".into(),
            pages: (0..pages).map(|p| PageRecord::from_raster(p, Raster::filled(4, 4, [255; 3]))).collect(),
            tokens: tokens
                .iter()
                .map(|&(id, page)| TokenRecord { token_id: id, bbox: BBox::new(10, 20, 30, 60), page_index: page, label: None })
                .collect(),
            category: Some(0),
        }
    }

    #[test]
    fn two_page_layout() {
        let cfg = ModelConfig::desk();
        let e = encode_document(&doc(2, &[(10, 0), (11, 0), (12, 1)]), &cfg).unwrap();
        assert_eq!(e.input_ids, vec![CLS_ID, 10, 11, SEP_ID, 12, SEP_ID]);
        assert_eq!(e.page_ids, vec![0, 0, 0, 0, 1, 1]);
        for pos in [0, 3, 5] {
            assert_eq!(e.box_at(pos), BBox::new(0, 0, 563, 750));
        }
        assert_eq!((e.hs[1], e.ws[1]), (40, 20));
        assert_eq!(e.global_mask, vec![true, false, false, false, false, false]);
        assert!(e.token_labels.is_none());
    }

    #[test]
    fn drops_pages_then_tokens() {
        let cfg = ModelConfig { max_pages: 5, tokens_per_page: 2, ..ModelConfig::desk() };
        let toks: Vec<(u32, usize)> = (0..7).flat_map(|p| [(20, p), (21, p), (22, p)]).collect();
        let e = encode_document(&doc(7, &toks), &cfg).unwrap();
        assert_eq!(e.len(), 1 + 5 * 3);
        assert_eq!(e.num_pages(), 5);
        assert_eq!(e.input_ids.iter().filter(|&&t| t == SEP_ID).count(), 5);
        assert!(!e.input_ids.contains(&22));
    }

    #[test]
    fn clamps_out_of_frame_boxes() {
        let cfg = ModelConfig::desk();
        let mut d = doc(1, &[(9, 0)]);
        d.tokens[0].bbox = BBox::new(500, 700, 900, 900);
        let e = encode_document(&d, &cfg).unwrap();
        assert_eq!(e.box_at(1), BBox::new(500, 700, 563, 750));
        assert_eq!((e.hs[1], e.ws[1]), (50, 63));
    }

    #[test]
    fn rejects_structural_errors() {
        let cfg = ModelConfig::desk();
        assert!(encode_document(&doc(0, &[]), &cfg).is_err());
        assert!(encode_document(&doc(1, &[(9, 1)]), &cfg).is_err());
        assert!(encode_document(&doc(1, &[(CLS_ID, 0)]), &cfg).is_err());
    }

    #[test]
    fn padding_is_masked() {
        let cfg = ModelConfig::desk();
        let mut e = encode_document(&doc(1, &[(9, 0)]), &cfg).unwrap();
        e.pad_to(6);
        assert_eq!(e.len(), 6);
        assert_eq!(e.real_len(), 3);
        assert_eq!(&e.attention_mask[3..], &[false; 3]);
    }
}
