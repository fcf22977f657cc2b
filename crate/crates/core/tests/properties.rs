//! Randomized invariants over the numeric building blocks: assignment
//! optimality, evaluator monotonicity, mask codecs, and the training
//! schedule.

use ndarray::Array2;
use proptest::prelude::*;

use rspk_core::geometry::{box_iou, BoxF};
use rspk_core::mask::{mask_iou, mask_to_tight_box, rle_decode, rle_encode, Mask};
use rspk_core::matching::{assign_columns, assignment_cost};
use rspk_core::metrics::{compute_ap, EvalInstance, GtInstance, IouType};
use rspk_core::optim::lr_at;
use rspk_core::tensor::dice_cost;

fn cost_matrix() -> impl Strategy<Value = Array2<f64>> {
    ((1..=7usize), (1..=5usize)).prop_flat_map(|(n, k)| {
        let k = k.min(n);
        proptest::collection::vec(-10.0..10.0f64, n * k)
            .prop_map(move |v| Array2::from_shape_vec((n, k), v).unwrap())
    })
}

fn small_mask() -> impl Strategy<Value = Mask> {
    ((2..8usize), (2..8usize), (0..12usize), (0..12usize)).prop_map(|(h, w, y, x)| {
        Mask::from_shape_fn((20, 20), |(yy, xx)| yy >= y && yy < y + h && xx >= x && xx < x + w)
    })
}

fn scene() -> impl Strategy<Value = (Vec<GtInstance>, Vec<EvalInstance>)> {
    let gt = proptest::collection::vec((small_mask(), 1..=2usize), 1..4);
    let pr = proptest::collection::vec((small_mask(), 1..=2usize, 0.0..1.0f64), 0..5);
    (gt, pr).prop_map(|(gts, prs)| {
        let gts = gts
            .into_iter()
            .map(|(mask, category_id)| GtInstance {
                image_id: 0,
                category_id,
                bbox: mask_to_tight_box(&mask).unwrap(),
                mask,
            })
            .collect();
        let prs = prs
            .into_iter()
            .map(|(mask, category_id, score)| EvalInstance {
                image_id: 0,
                category_id,
                // quantized so affine rescaling cannot collapse distinct
                // scores through rounding
                score: (score * 1e6).round() / 1e6,
                bbox: mask_to_tight_box(&mask).unwrap(),
                mask,
            })
            .collect();
        (gts, prs)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// The assignment returned by the solver never costs more than any
    /// sampled injective alternative.
    #[test]
    fn hungarian_beats_random_assignments(cost in cost_matrix(), seed in 0..u32::MAX) {
        let rows = assign_columns(&cost).unwrap();
        let best = assignment_cost(&cost, &rows);
        // a deterministic pseudo-random injective assignment
        let n = cost.nrows();
        let k = cost.ncols();
        let mut pool: Vec<usize> = (0..n).collect();
        let mut alt = Vec::with_capacity(k);
        let mut state = seed as u64 | 1;
        for _ in 0..k {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let i = (state >> 33) as usize % pool.len();
            alt.push(pool.swap_remove(i));
        }
        let alt_cost: f64 = alt.iter().enumerate().map(|(c, &r)| cost[[r, c]]).sum();
        prop_assert!(best <= alt_cost + 1e-9);
    }

    /// Shifting one column by a constant shifts the optimum by exactly
    /// that constant (every assignment uses each column once).
    #[test]
    fn hungarian_column_shift(cost in cost_matrix(), delta in -5.0..5.0f64) {
        let rows = assign_columns(&cost).unwrap();
        let base = assignment_cost(&cost, &rows);
        let mut shifted = cost.clone();
        for r in 0..shifted.nrows() {
            shifted[[r, 0]] += delta;
        }
        let rows2 = assign_columns(&shifted).unwrap();
        let moved = assignment_cost(&shifted, &rows2);
        prop_assert!((moved - (base + delta)).abs() < 1e-9);
    }

    /// AP stays in [0, 1] and is invariant under positive affine score
    /// transforms (only the ordering matters).
    #[test]
    fn ap_bounds_and_score_scale_invariance(
        (gts, preds) in scene(),
        a in 0.5..3.0f64,
        b in -1.0..1.0f64,
    ) {
        let ev = compute_ap(&preds, &gts, IouType::Mask);
        prop_assert!((0.0..=1.0).contains(&ev.mean.ap));
        prop_assert!((0.0..=1.0).contains(&ev.mean.ap50));
        let rescored: Vec<EvalInstance> = preds
            .iter()
            .cloned()
            .map(|mut p| { p.score = a * p.score + b; p })
            .collect();
        let ev2 = compute_ap(&rescored, &gts, IouType::Mask);
        prop_assert!((ev.mean.ap - ev2.mean.ap).abs() < 1e-12);
        prop_assert!((ev.mean.ap50 - ev2.mean.ap50).abs() < 1e-12);
    }

    /// Appending a lowest-score false positive never raises AP.
    #[test]
    fn ap_monotone_under_trailing_false_positive((gts, preds) in scene()) {
        let before = compute_ap(&preds, &gts, IouType::Mask).mean.ap;
        let mut worse = preds.clone();
        let empty_overlap = Mask::from_shape_fn((20, 20), |(y, x)| y == 19 && x == 19);
        worse.push(EvalInstance {
            image_id: 0,
            category_id: 1,
            score: -1.0,
            bbox: mask_to_tight_box(&empty_overlap).unwrap(),
            mask: empty_overlap,
        });
        let after = compute_ap(&worse, &gts, IouType::Mask).mean.ap;
        prop_assert!(after <= before + 1e-12);
    }

    /// Run-length encoding round-trips arbitrary masks and always sums
    /// to the pixel count.
    #[test]
    fn rle_roundtrip(bits in proptest::collection::vec(any::<bool>(), 48)) {
        let mask = Mask::from_shape_vec((6, 8), bits).unwrap();
        let rle = rle_encode(&mask);
        prop_assert_eq!(rle.counts.iter().sum::<usize>(), 48);
        let back = rle_decode(&rle).unwrap();
        prop_assert_eq!(mask, back);
    }

    /// Dice dissimilarity is symmetric, bounded, and zero on identity.
    #[test]
    fn dice_cost_axioms(m1 in small_mask(), m2 in small_mask()) {
        let a = m1.map(|&v| v as u8 as f64).into_dyn();
        let b = m2.map(|&v| v as u8 as f64).into_dyn();
        prop_assert_eq!(dice_cost(&a, &a), 0.0);
        let d_ab = dice_cost(&a, &b);
        let d_ba = dice_cost(&b, &a);
        prop_assert!((d_ab - d_ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&d_ab));
    }

    /// Box and mask IoU agree on axis-aligned rectangles.
    #[test]
    fn rect_mask_iou_matches_box_iou(m1 in small_mask(), m2 in small_mask()) {
        let b1: BoxF = mask_to_tight_box(&m1).unwrap();
        let b2: BoxF = mask_to_tight_box(&m2).unwrap();
        let from_masks = mask_iou(&m1, &m2);
        let from_boxes = box_iou(&b1, &b2);
        prop_assert!((from_masks - from_boxes).abs() < 1e-12);
        prop_assert!((box_iou(&b1, &b1) - 1.0).abs() < 1e-12);
    }

    /// Warmup ends exactly at the base learning rate, after which the
    /// cosine decay never increases and never goes negative.
    #[test]
    fn lr_schedule_shape(
        warmup in 1..50usize,
        extra in 2..200usize,
        base in 1e-6..1e-2f64,
    ) {
        let total = warmup + extra;
        let eps = base * 1e-12;
        prop_assert!((lr_at(warmup - 1, total, warmup, base) - base).abs() <= eps);
        let mut prev = f64::INFINITY;
        for step in warmup..total {
            let lr = lr_at(step, total, warmup, base);
            prop_assert!(lr >= 0.0 && lr <= base + eps);
            prop_assert!(lr <= prev + eps);
            prev = lr;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Average-pool downsampling preserves the global mean when the
    /// output grid divides the input evenly.
    #[test]
    fn downsample_preserves_mean(
        bits in proptest::collection::vec(any::<bool>(), 64),
        factor in 1..4usize,
    ) {
        let mask = Mask::from_shape_vec((8, 8), bits).unwrap();
        let oh = 8 / (1 << (factor - 1));
        let soft = rspk_core::mask::downsample_mask_avg(&mask, oh, oh);
        let in_mean = mask.iter().filter(|&&v| v).count() as f64 / 64.0;
        let out_mean = soft.iter().sum::<f64>() / (oh * oh) as f64;
        prop_assert!((in_mean - out_mean).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Raising the foreground IoU threshold never grows the positive set
    /// on a fixed proposal list.
    #[test]
    fn positive_set_monotone_in_iou_threshold(
        seed in 0..1000u64,
        t_lo in 0.30..0.55f64,
        gap in 0.05..0.35f64,
    ) {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let t_hi = (t_lo + gap).min(0.95);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<BoxF> = (0..3)
            .map(|_| {
                let x = r.gen_range(0.0..90.0);
                let y = r.gen_range(0.0..90.0);
                [x, y, x + r.gen_range(10.0..30.0), y + r.gen_range(10.0..30.0)]
            })
            .collect();
        let classes = vec![0usize; gt.len()];
        let props: Vec<rspk_core::anchor::Proposal> = (0..40)
            .map(|_| {
                let x = r.gen_range(0.0..100.0);
                let y = r.gen_range(0.0..100.0);
                rspk_core::anchor::Proposal {
                    bbox: [x, y, x + r.gen_range(5.0..35.0), y + r.gen_range(5.0..35.0)],
                    score: r.gen_range(0.0..1.0),
                }
            })
            .collect();
        let mut counts = Vec::new();
        for t in [t_lo, t_hi] {
            let cfg = rspk_core::anchor::AnchorPrompterConfig {
                head_pos_iou: t,
                ..Default::default()
            };
            let mut init = rand_chacha::ChaCha8Rng::seed_from_u64(1);
            let p = rspk_core::anchor::AnchorPrompter::new(cfg, 8, 3, &mut init).unwrap();
            let mut sample_rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
            let hs = p.head_targets(&props, &gt, &classes, &mut sample_rng);
            counts.push(hs.pos.len());
        }
        prop_assert!(counts[1] <= counts[0], "positives grew: {:?}", counts);
    }
}

/// A checkpoint written to disk restores every parameter bit for bit.
#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    use rand_chacha::rand_core::SeedableRng;
    use rspk_core::ckpt::Checkpoint;
    use rspk_core::config::RunConfig;
    use rspk_core::model::{Model, ModelKind};
    use rspk_core::nn::Module;

    let cfg = RunConfig::with_kind(ModelKind::RsprompterQuery);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let source = Model::new(cfg.model.clone(), 3, &mut rng).unwrap();

    let dir = std::env::temp_dir().join("rspk-prop-ckpt");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("roundtrip.ckpt");
    Checkpoint::from_model(&source, None, 7, 1).save(&path).unwrap();

    let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(999);
    let mut target = Model::new(cfg.model.clone(), 3, &mut rng2).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    loaded.apply_to(&mut target).unwrap();

    let src_params = source.named_params();
    let dst_params = target.named_params();
    assert_eq!(src_params.len(), dst_params.len());
    for ((name_a, a), (name_b, b)) in src_params.iter().zip(dst_params.iter()) {
        assert_eq!(name_a, name_b);
        let av = a.value();
        let bv = b.value();
        assert_eq!(av.shape(), bv.shape());
        for (x, y) in av.iter().zip(bv.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{name_a} differs after reload");
        }
    }
    std::fs::remove_file(&path).ok();
}
