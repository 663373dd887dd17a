//! Document data model, manifest I/O, encoding, and the synthetic generator.

mod encode;
mod manifest;
mod synthetic;
mod types;

pub use encode::{encode_document, EncodedDocument, IGNORE_INDEX};
pub use manifest::{load_manifest, page_file_name, write_corpus, LoadOptions, MANIFEST_FILE, MANIFEST_VERSION};
pub use synthetic::{generate_synthetic_corpus, glyph_color, synthesize, PageGeometry, SyntheticSpec};
pub use types::{BBox, Document, PageRecord, Raster, TokenRecord};
