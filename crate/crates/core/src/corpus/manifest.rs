//! JSON-Lines corpus manifest: `manifest.jsonl` beside a `pages/` directory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::types::{BBox, Document, PageRecord, Raster, TokenRecord};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    version: u32,
    id: String,
    #[serde(default)]
    category: Option<usize>,
    pages: Vec<String>,
    tokens: Vec<Vec<i64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub width: usize,
    pub height: usize,
    /// Decode every page up front instead of on access.
    pub eager: bool,
}

impl LoadOptions {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, eager: false }
    }
}

fn parse_token(v: &[i64], n: usize) -> std::result::Result<TokenRecord, String> {
    if v.len() != 6 && v.len() != 7 {
        return Err(format!("token {n} has {} fields, expected 6 or 7", v.len()));
    }
    if let Some(bad) = v.iter().find(|&&x| x < 0 || x > u32::MAX as i64) {
        return Err(format!("token {n} has out-of-range field {bad}"));
    }
    let u = |i: usize| v[i] as u32;
    Ok(TokenRecord {
        token_id: u(0),
        bbox: BBox::new(u(1), u(2), u(3), u(4)),
        page_index: v[5] as usize,
        label: v.get(6).map(|&l| l as u32),
    })
}

/// Reads a manifest; page paths resolve relative to the manifest's directory.
pub fn load_manifest(path: &Path, opts: LoadOptions) -> Result<Vec<Document>> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Manifest { line: line_no, reason };
        let rec: Line = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.version != MANIFEST_VERSION {
            return Err(bad(format!("schema version {} (supported: {MANIFEST_VERSION})", rec.version)));
        }
        let tokens = rec
            .tokens
            .iter()
            .enumerate()
            .map(|(n, t)| parse_token(t, n))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        let mut pages = Vec::with_capacity(rec.pages.len());
        for (p, rel) in rec.pages.iter().enumerate() {
            let full = root.join(rel);
            if !full.exists() {
                return Err(Error::MissingFile { path: full });
            }
            pages.push(if opts.eager {
                PageRecord::from_raster(p, Raster::load(&full, opts.width, opts.height)?)
            } else {
                PageRecord::lazy(p, full, opts.width, opts.height)
            });
        }
        let doc = Document { id: rec.id, pages, tokens, category: rec.category };
        doc.validate().map_err(|e| bad(e.to_string()))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn page_file_name(doc_id: &str, page: usize) -> String {
    format!("{doc_id}_{page}.png")
}

/// Writes `manifest.jsonl` and `pages/<id>_<page>.png` under `dir`.
pub fn write_corpus(dir: &Path, docs: &[Document]) -> Result<PathBuf> {
    let pages_dir = dir.join("pages");
    fs::create_dir_all(&pages_dir)?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut out = BufWriter::new(fs::File::create(&manifest)?);
    for doc in docs {
        doc.validate()?;
        let mut pages = Vec::with_capacity(doc.pages.len());
        for page in &doc.pages {
            let name = page_file_name(&doc.id, page.page_index);
            page.image()?.save_png(&pages_dir.join(&name))?;
            pages.push(format!("pages/{name}"));
        }
        let tokens = doc
            .tokens
            .iter()
            .map(|t| {
                let b = t.bbox;
                let mut v = vec![t.token_id as i64, b.x1 as i64, b.y1 as i64, b.x2 as i64, b.y2 as i64, t.page_index as i64];
                if let Some(l) = t.label {
                    v.push(l as i64);
                }
                v
            })
            .collect();
        let line = Line { version: MANIFEST_VERSION, id: doc.id.clone(), category: doc.category, pages, tokens };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "");
        assert!(load_manifest(&p, LoadOptions::new(8, 8)).unwrap().is_empty());
    }

    #[test]
    fn missing_pages_key_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        Raster::filled(8, 8, [0; 3]).save_png(&dir.path().join("a.png")).unwrap();
        let ok = r#"{"version":1,"id":"a","pages":["a.png"],"tokens":[]}"#;
        let bad = r#"{"version":1,"id":"b","tokens":[]}"#;
        let p = write(dir.path(), &format!("{ok}\n{bad}\n"));
        let err = load_manifest(&p, LoadOptions::new(8, 8)).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("pages"), "{err}");
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"version":1,"id":"a","pages":["nope.png"],"tokens":[]}"#);
        let err = load_manifest(&p, LoadOptions::new(8, 8)).unwrap_err();
        assert!(err.to_string().contains("nope.png"), "{err}");
    }

    #[test]
    fn resizes_to_target() {
        let dir = tempfile::tempdir().unwrap();
        Raster::filled(20, 10, [10, 20, 30]).save_png(&dir.path().join("a.png")).unwrap();
        let p = write(dir.path(), r#"{"version":1,"id":"a","pages":["a.png"],"tokens":[[5,0,0,1,1,0]]}"#);
        let opts = LoadOptions { width: 8, height: 6, eager: true };
        let docs = load_manifest(&p, opts).unwrap();
        let img = docs[0].pages[0].image().unwrap();
        assert_eq!((img.width(), img.height()), (8, 6));
        assert_eq!(img.pixel(3, 3), [10, 20, 30]);
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"version":9,"id":"a","pages":[],"tokens":[]}"#);
        assert!(matches!(load_manifest(&p, LoadOptions::new(8, 8)), Err(Error::Manifest { line: 1, .. })));
    }
}
