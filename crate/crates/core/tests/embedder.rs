mod common;

use mpdoc_core::autograd::Graph;
use mpdoc_core::corpus::encode_document;
use mpdoc_core::embedder::PackedBatch;
use mpdoc_core::model::Model;
use mpdoc_core::{AblationMask, Tensor};

const NO_IMAGE: AblationMask = AblationMask { use_text: true, use_layout: true, use_image: false, use_page: true };

fn setup() -> (Model<f64>, PackedBatch) {
    let cfg = common::small_config();
    let docs = common::random_docs(&cfg, 3, 41);
    let encs: Vec<_> = docs.iter().map(|d| encode_document(d, &cfg).unwrap()).collect();
    let mut refs: Vec<_> = encs.iter().collect();
    // pad one document so the batch has masked rows
    let mut padded = encs[0].clone();
    padded.pad_to(cfg.max_seq_len);
    refs[0] = &padded;
    let batch = PackedBatch::new(&refs).unwrap();
    assert!(batch.attention_mask.iter().any(|&m| !m));
    (Model::new(&cfg, 41).unwrap(), batch)
}

fn embed(model: &Model<f64>, batch: &PackedBatch, ablation: AblationMask) -> Tensor<f64> {
    let mut g = Graph::inference(&model.store);
    let v = model.embed(&mut g, batch, ablation).unwrap();
    g.value(v).clone()
}

#[test]
fn only_the_word_table_left_gives_word_rows() {
    let (mut model, batch) = setup();
    let word = model.store.find("embed.word").unwrap();
    let ids: Vec<_> = model.store.iter().filter(|(id, p)| p.name.starts_with("embed.") && *id != word).map(|(id, _)| id).collect();
    for id in ids {
        model.store.get_mut(id).value.data_mut().fill(0.0);
    }
    let out = embed(&model, &batch, AblationMask::ALL);
    let table = model.store.value(word).clone();
    for r in 0..batch.rows() {
        if batch.attention_mask[r] {
            assert_eq!(out.row(r), table.row(batch.input_ids[r]), "row {r}");
        } else {
            assert!(out.row(r).iter().all(|&v| v == 0.0), "row {r}");
        }
    }
}

#[test]
fn swapping_x1_and_x2_changes_nothing() {
    let (model, batch) = setup();
    let mut swapped = batch.clone();
    std::mem::swap(&mut swapped.x1s, &mut swapped.x2s);
    let d = embed(&model, &batch, NO_IMAGE).max_abs_diff(&embed(&model, &swapped, NO_IMAGE));
    assert!(d < 1e-12, "{d}");
}

#[test]
fn page_change_adds_the_table_difference() {
    let (model, batch) = setup();
    let mut moved = batch.clone();
    let r = (0..batch.rows()).find(|&r| batch.attention_mask[r] && batch.page_ids[r] == 0).unwrap();
    moved.page_ids[r] = 2;
    let (a, b) = (embed(&model, &batch, NO_IMAGE), embed(&model, &moved, NO_IMAGE));
    let page = model.store.value(model.embedder.page_table());
    let d = a.row(0).len();
    for c in 0..d {
        let want = page.row(2)[c] - page.row(0)[c];
        assert!((b.row(r)[c] - a.row(r)[c] - want).abs() < 1e-12);
    }
    for other in (0..batch.rows()).filter(|&o| o != r) {
        assert_eq!(a.row(other), b.row(other));
    }
}

#[test]
fn disabled_families_do_not_contribute() {
    let (mut model, batch) = setup();
    let before = embed(&model, &batch, AblationMask::TEXT_ONLY);
    for name in ["embed.x", "embed.y", "embed.h", "embed.w", "embed.page"] {
        let id = model.store.find(name).unwrap();
        model.store.get_mut(id).value.data_mut().fill(7.0);
    }
    assert_eq!(before, embed(&model, &batch, AblationMask::TEXT_ONLY));
}
