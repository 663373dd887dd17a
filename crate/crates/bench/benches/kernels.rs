use std::rc::Rc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mpdoc_bench::{dense_pattern, random_tensor, windowed_pattern};
use mpdoc_core::autograd::Graph;
use mpdoc_core::corpus::{synthesize, SyntheticSpec};
use mpdoc_core::params::ParamStore;
use mpdoc_core::topics::{LdaParams, LdaSampler};
use mpdoc_core::{Model, ModelConfig};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_forward");
    let (d, heads, window) = (64, 4, 64);
    let store = ParamStore::<f32>::new();
    for s in [256usize, 512, 1024] {
        let q = random_tensor(&[s, d], 1);
        let k = random_tensor(&[s, d], 2);
        let v = random_tensor(&[s, d], 3);
        let windowed = Rc::new(windowed_pattern(s, window, heads));
        let dense = Rc::new(dense_pattern(s, heads));
        for (name, pattern) in [("windowed", &windowed), ("dense", &dense)] {
            group.bench_with_input(BenchmarkId::new(name, s), &s, |b, _| {
                b.iter(|| {
                    let mut g = Graph::inference(&store);
                    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
                    let out = g.attention(qv, kv, vv, Rc::clone(pattern));
                    g.value(out).data()[0]
                })
            });
        }
    }
    group.finish();
}

fn backbone(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let model = Model::<f32>::new(&cfg, 0).expect("desk model");
    let doc = synthesize(&SyntheticSpec { num_docs: 1, ..SyntheticSpec::default() }, 0).expect("corpus").remove(0);
    let raster = doc.pages[0].image().expect("in-memory page");
    c.bench_function("backbone_page_forward", |b| {
        b.iter(|| model.backbone.extract_feature_map(&model.store, &raster).expect("forward").values.numel())
    });
}

fn lda(c: &mut Criterion) {
    let spec = SyntheticSpec { num_docs: 100, ..SyntheticSpec::default() };
    let docs: Vec<Vec<u32>> = synthesize(&spec, 0).expect("corpus").iter().map(|d| d.token_ids()).collect();
    c.bench_function("lda_sweep_100_docs_k30", |b| {
        let mut s = LdaSampler::new(&docs, spec.vocab_size(), LdaParams::default(), 0).expect("sampler");
        b.iter(|| s.sweep())
    });
}

criterion_group!(benches, attention, backbone, lda);
criterion_main!(benches);
