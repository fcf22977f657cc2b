//! Evaluation-side timings: COCO-style AP over a prediction set and the
//! exact assignment solver on random cost matrices.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use rspk_bench::demo_scenes;
use rspk_core::matching::assign_columns;
use rspk_core::metrics::{eval_from_predictions, gt_from_samples, ApReport};

fn bench_ap(c: &mut Criterion) {
    // score-perturbed copies of ground truth stand in for predictions
    let scenes = demo_scenes(20);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let preds: Vec<_> = scenes
        .iter()
        .flat_map(|s| {
            let per_image: Vec<_> = s
                .masks
                .iter()
                .zip(&s.boxes)
                .zip(&s.categories)
                .map(|((m, b), &cat)| rspk_core::data::InstancePrediction {
                    category_id: cat,
                    score: rng.gen_range(0.3..1.0),
                    bbox: *b,
                    mask: m.clone(),
                })
                .collect();
            eval_from_predictions(s.image_id, &per_image)
        })
        .collect();
    let gts = gt_from_samples(&scenes);
    c.bench_function("ap_20_images_100_instances", |b| {
        b.iter(|| {
            let report = ApReport::compute(&preds, &gts, true);
            black_box(report.ap_mask50);
        });
    });
}

fn bench_matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mats: Vec<Array2<f64>> = (0..100)
        .map(|_| Array2::from_shape_fn((20, 5), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    c.bench_function("hungarian_100x_20x5", |b| {
        b.iter(|| {
            for m in &mats {
                black_box(assign_columns(m).expect("solvable"));
            }
        });
    });
}

criterion_group!(benches, bench_ap, bench_matching);
criterion_main!(benches);
