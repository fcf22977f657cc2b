//! End-to-end pipeline timings: one forward/loss step and one full
//! prediction per variant on a 128×128 five-instance scene.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use rspk_bench::{demo_model, demo_scene};
use rspk_core::model::ModelKind;

fn bench_loss(c: &mut Criterion) {
    let scene = demo_scene();
    let mut group = c.benchmark_group("loss_step");
    group.sample_size(10);
    for kind in [
        ModelKind::RsprompterAnchor,
        ModelKind::RsprompterQuery,
        ModelKind::SamSeg,
        ModelKind::SamCls,
        ModelKind::SamDet,
    ] {
        let model = demo_model(kind);
        let enc = model.embed(&scene.image).expect("embed");
        group.bench_function(kind.as_str(), |b| {
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let report = model.loss(&enc, &scene, &mut rng).expect("loss");
                black_box(report.total_value());
            });
        });
    }
    group.finish();
}

fn bench_predict(c: &mut Criterion) {
    let scene = demo_scene();
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    for kind in [
        ModelKind::RsprompterAnchor,
        ModelKind::RsprompterQuery,
        ModelKind::SamSeg,
        ModelKind::SamDet,
    ] {
        let model = demo_model(kind);
        let enc = model.embed(&scene.image).expect("embed");
        group.bench_function(kind.as_str(), |b| {
            b.iter(|| {
                let preds = model.predict_from(&enc, &scene.image).expect("predict");
                black_box(preds.len());
            });
        });
    }
    group.finish();
}

fn bench_encoder(c: &mut Criterion) {
    let scene = demo_scene();
    let model = demo_model(ModelKind::RsprompterQuery);
    c.bench_function("encoder_embed_128", |b| {
        b.iter(|| {
            let enc = model.embed(&scene.image).expect("embed");
            black_box(enc.f_img.len());
        });
    });
}

criterion_group!(benches, bench_encoder, bench_loss, bench_predict);
criterion_main!(benches);
