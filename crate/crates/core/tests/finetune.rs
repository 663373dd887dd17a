mod common;

use mpdoc_core::autograd::Graph;
use mpdoc_core::corpus::{encode_document, EncodedDocument};
use mpdoc_core::embedder::PackedBatch;
use mpdoc_core::finetune::{classify_document, extract_embedding, label_tokens, retrieve, token_positions};
use mpdoc_core::model::Model;
use mpdoc_core::{AblationMask, Document};
use proptest::prelude::*;

fn setup(seed: u64) -> (Model<f64>, Vec<EncodedDocument>) {
    let cfg = common::small_config();
    let docs = common::random_docs(&cfg, 4, seed);
    let enc = docs.iter().map(|d| encode_document(d, &cfg).unwrap()).collect();
    (Model::new(&cfg, seed).unwrap(), enc)
}

#[test]
fn ablation_all_is_the_plain_forward_pass() {
    let (model, encs) = setup(1);
    for enc in &encs {
        let packed = PackedBatch::new(&[enc]).unwrap();
        let mut g = Graph::inference(&model.store);
        let h = model.hidden(&mut g, &packed, AblationMask::default()).unwrap();
        let logits = model.token_logits(&mut g, h);
        let v = g.value(logits).to_f64_vec();
        let n = model.cfg.num_token_labels;
        let want: Vec<(usize, usize)> = token_positions(enc)
            .into_iter()
            .map(|p| {
                let row = &v[p * n..(p + 1) * n];
                (p, (0..n).fold(0, |b, i| if row[i] > row[b] { i } else { b }))
            })
            .collect();
        assert_eq!(label_tokens(&model, enc, AblationMask::ALL).unwrap(), want);
        let cls = g.value(h).row(packed.cls_rows()[0]).to_vec();
        assert_eq!(extract_embedding(&model, enc, AblationMask::ALL).unwrap(), cls);
    }
}

#[test]
fn image_only_ignores_token_ids() {
    let (model, encs) = setup(2);
    let vocab = model.cfg.vocab_size as u32;
    for enc in &encs {
        let mut other = enc.clone();
        for p in token_positions(enc) {
            other.input_ids[p] = 4 + (other.input_ids[p] + 7) % (vocab - 4);
        }
        assert_ne!(other.input_ids, enc.input_ids);
        let a = extract_embedding(&model, enc, AblationMask::IMAGE_ONLY).unwrap();
        let b = extract_embedding(&model, &other, AblationMask::IMAGE_ONLY).unwrap();
        assert_eq!(a, b);
        let t = extract_embedding(&model, &other, AblationMask::TEXT_ONLY).unwrap();
        assert_ne!(t, extract_embedding(&model, enc, AblationMask::TEXT_ONLY).unwrap());
    }
}

#[test]
fn class_probabilities_sum_to_one() {
    let (model, encs) = setup(3);
    for enc in &encs {
        let (c, p) = classify_document(&model, enc, AblationMask::ALL).unwrap();
        assert_eq!(p.len(), model.cfg.num_classes);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x <= p[c]));
    }
}

#[test]
fn document_without_tokens_has_nothing_to_label() {
    let (model, encs) = setup(4);
    let cfg = &model.cfg;
    let doc = Document { id: "empty".into(), pages: encs[0].page_images.clone(), tokens: vec![], category: Some(0) };
    let enc = encode_document(&doc, cfg).unwrap();
    assert!(token_positions(&enc).is_empty());
    assert!(label_tokens(&model, &enc, AblationMask::ALL).unwrap().is_empty());
}

#[test]
fn saturated_head_labels_every_token() {
    let (mut model, encs) = setup(5);
    let bias = model.store.find("head.token.bias").unwrap();
    model.store.get_mut(bias).value.data_mut()[1] = 1e4;
    for enc in &encs {
        let labels = label_tokens(&model, enc, AblationMask::ALL).unwrap();
        assert_eq!(labels.len(), token_positions(enc).len());
        assert!(labels.iter().all(|&(_, l)| l == 1));
    }
}

fn oracle_order(q: &[f64], index: &[(String, Vec<f64>)]) -> Vec<String> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut ids: Vec<(f64, String)> = index.iter().map(|(id, v)| (cos(q, v), id.clone())).collect();
    // highest similarity first, then ascending id
    ids.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    ids.into_iter().map(|(_, id)| id).collect()
}

fn vectors() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 5)
        .prop_filter("non-zero", |vs| vs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)))
}

proptest! {
    #[test]
    fn retrieval_matches_brute_force(vs in vectors(), q in prop::collection::vec(-1.0f64..1.0, 6), scale in 0.01f64..100.0) {
        prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
        let index: Vec<(String, Vec<f64>)> = vs.iter().enumerate().map(|(i, v)| (format!("d{i}"), v.clone())).collect();
        let got: Vec<String> = retrieve(&q, &index, 5).unwrap().into_iter().map(|(id, _)| id).collect();
        prop_assert_eq!(&got, &oracle_order(&q, &index));
        let scaled: Vec<f64> = q.iter().map(|x| x * scale).collect();
        let again: Vec<String> = retrieve(&scaled, &index, 5).unwrap().into_iter().map(|(id, _)| id).collect();
        prop_assert_eq!(got, again);
    }

    #[test]
    fn query_in_index_ranks_first(vs in vectors(), pick in 0usize..5) {
        let index: Vec<(String, Vec<f64>)> = vs.iter().enumerate().map(|(i, v)| (format!("d{i}"), v.clone())).collect();
        let r = retrieve(&vs[pick], &index, 5).unwrap();
        prop_assert!(r[0].1.abs() < 1e-12);
        let own = format!("d{}", pick);
        prop_assert!(r[0].0 == own || r[1].1.abs() < 1e-12);
    }
}
