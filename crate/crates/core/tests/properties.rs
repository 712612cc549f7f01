use patchattack::applier::{apply_patch, patch_gradient, ApplyOptions};
use patchattack::attack::{attack_step, tv_loss, AttackMethod, AttackParams, AttackState, SchedulerParams, SchedulerState};
use patchattack::detection::{nms, BoundingBox, Detection, DetectionSet, StageKind};
use patchattack::eval::{average_precision, map_score, ScoredBox};
use patchattack::image::{Image, CHANNELS};
use patchattack::patch::{AdversarialPatch, InitMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hwc(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, h * w * CHANNELS)
}

fn sized_image() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..7, 1usize..7).prop_flat_map(|(h, w)| (Just(h), Just(w), hwc(h, w)))
}

fn transpose(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                out[(x * h + y) * CHANNELS + c] = data[(y * w + x) * CHANNELS + c];
            }
        }
    }
    out
}

fn unit_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.05..0.5f64, 0.05..0.5f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
}

fn det_set(index: usize, boxes: &[(BoundingBox, usize, f64)]) -> DetectionSet {
    DetectionSet {
        image_index: index,
        stage: StageKind::Final,
        detections: boxes
            .iter()
            .map(|&(bbox, class_id, s)| Detection {
                bbox,
                objectness: s,
                class_id,
                class_score: 1.0,
            })
            .collect(),
    }
}

proptest! {
    #[test]
    fn tv_is_transpose_invariant((h, w, data) in sized_image()) {
        let a = tv_loss(&data, h, w).unwrap();
        let b = tv_loss(&transpose(&data, h, w), w, h).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn tv_is_nonnegative_and_scales_linearly((h, w, data) in sized_image(), k in 0.1..4.0f64) {
        let a = tv_loss(&data, h, w).unwrap();
        let scaled: Vec<f64> = data.iter().map(|v| v * k).collect();
        let b = tv_loss(&scaled, h, w).unwrap();
        prop_assert!(a >= 0.0);
        // The 1e-12 smoothing term under the root bounds the deviation by k·1e-6.
        prop_assert!((b - k * a).abs() <= 1e-6 * (1.0 + k), "{b} vs {}", k * a);
    }

    #[test]
    fn tv_of_constant_is_smoothing_floor(h in 1usize..6, w in 1usize..6, v in 0.0..1.0f64) {
        let t = tv_loss(&vec![v; h * w * CHANNELS], h, w).unwrap();
        prop_assert!((t - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn ap_is_a_probability_and_exact_hits_score_one(
        gt in prop::collection::vec(prop::collection::vec(unit_box(), 0..4), 1..4),
        scores in prop::collection::vec(0.01..1.0f64, 16),
        noise in prop::collection::vec((0usize..4, unit_box(), 0.0..1.0f64), 0..6),
    ) {
        let mut preds: Vec<ScoredBox> = gt
            .iter()
            .enumerate()
            .flat_map(|(i, boxes)| boxes.iter().map(move |b| (i, *b)))
            .zip(&scores)
            .map(|((image, bbox), &score)| ScoredBox { image, bbox, score })
            .collect();
        prop_assert_eq!(average_precision(&preds, &gt, 0.5), 1.0);
        preds.extend(noise.iter().map(|&(i, bbox, score)| ScoredBox { image: i % gt.len(), bbox, score }));
        let ap = average_precision(&preds, &gt, 0.5);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn trailing_false_positive_does_not_change_ap(
        gt in prop::collection::vec(unit_box(), 1..5),
        hits in prop::collection::vec((0usize..5, 0.1..1.0f64, any::<bool>()), 1..8),
    ) {
        // Predictions are either exact copies of a ground truth box or far misses.
        let miss = BoundingBox::new(0.95, 0.95, 1.0, 1.0).unwrap();
        let preds: Vec<ScoredBox> = hits
            .iter()
            .map(|&(k, score, hit)| ScoredBox {
                image: 0,
                bbox: if hit { gt[k % gt.len()] } else { miss },
                score,
            })
            .collect();
        let gts = vec![gt.clone()];
        let before = average_precision(&preds, &gts, 0.5);
        let mut more = preds.clone();
        more.push(ScoredBox { image: 0, bbox: miss, score: 0.01 });
        prop_assert_eq!(before, average_precision(&more, &gts, 0.5));
    }

    #[test]
    fn clean_against_itself_scores_100(
        sets in prop::collection::vec(prop::collection::vec((unit_box(), 0usize..3, 0.3..1.0f64), 0..5), 1..5),
    ) {
        let dets: Vec<DetectionSet> = sets.iter().enumerate().map(|(i, s)| det_set(i, s)).collect();
        prop_assert_eq!(map_score(&dets, &dets, None, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn nms_keeps_separated_boxes_in_score_order(
        boxes in prop::collection::vec((unit_box(), 0usize..2, 0.0..1.0f64), 0..12),
        thr in 0.1..0.9f64,
    ) {
        let set = det_set(0, &boxes);
        let keep = nms(&set.detections, thr);
        for pair in keep.windows(2) {
            prop_assert!(set.detections[pair[0]].score() >= set.detections[pair[1]].score());
        }
        for (i, &a) in keep.iter().enumerate() {
            for &b in &keep[i + 1..] {
                let (da, db) = (&set.detections[a], &set.detections[b]);
                if da.class_id == db.class_id {
                    prop_assert!(da.bbox.iou(&db.bbox) <= thr);
                }
            }
        }
    }

    #[test]
    fn scheduler_lr_never_increases_nor_drops_below_floor(
        losses in prop::collection::vec(0.0..2.0f64, 1..40),
        lr in 1e-5..1.0f64,
    ) {
        let mut s = SchedulerState::new(lr, SchedulerParams::default());
        let mut prev = s.lr;
        for l in losses {
            s.update(l);
            prop_assert!(s.lr <= prev);
            prop_assert!(s.lr >= 1e-6);
            prev = s.lr;
        }
    }

    #[test]
    fn attack_steps_keep_patch_in_unit_range(
        method in 0usize..5,
        grads in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 4 * 4 * CHANNELS), 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut patch = AdversarialPatch::init(4, 4, InitMode::Random, None, &mut rng).unwrap();
        let params = AttackParams { method: AttackMethod::ALL[method], lr: 0.3, ..AttackParams::default() };
        let mut state = AttackState::new(params, seed);
        for g in &grads {
            attack_step(&mut patch, g, &mut state).unwrap();
            prop_assert!(patch.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn applier_touches_only_placement_squares(
        boxes in prop::collection::vec(unit_box(), 1..4),
        scale in 0.1..0.9f64,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Image::from_vec(32, 32, (0..32 * 32 * CHANNELS).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let patch = AdversarialPatch::init(5, 5, InitMode::Random, None, &mut rng).unwrap().to_image();
        let dets = vec![det_set(0, &boxes.iter().map(|&b| (b, 0, 0.9)).collect::<Vec<_>>())];
        let batch = apply_patch(std::slice::from_ref(&base), &dets, &patch, &ApplyOptions::plain(scale, 0), &mut rng).unwrap();
        prop_assert_eq!(batch.placements() + batch.skipped, boxes.len());
        let inside = |y: usize, x: usize| {
            batch.records.iter().any(|r| {
                let (l, t) = r.placement.origin();
                let s = r.placement.side as isize;
                let (y, x) = (y as isize, x as isize);
                y >= t && y < t + s && x >= l && x < l + s
            })
        };
        let out = &batch.images[0];
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..CHANNELS {
                    let v = out.get(y, x, c);
                    prop_assert!((0.0..=1.0).contains(&v));
                    if !inside(y, x) {
                        prop_assert_eq!(v, base.get(y, x, c));
                    }
                }
            }
        }

        // The patch gradient is linear in the image gradient.
        let g1: Vec<Vec<f64>> = vec![(0..32 * 32 * CHANNELS).map(|i| ((i * 31) % 11) as f64 - 5.0).collect()];
        let g2: Vec<Vec<f64>> = vec![g1[0].iter().map(|v| 2.0 * v).collect()];
        let p1 = patch_gradient(&batch, &patch, &g1).unwrap();
        let p2 = patch_gradient(&batch, &patch, &g2).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            prop_assert!((2.0 * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn patch_files_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AdversarialPatch::init(h, w, InitMode::Random, None, &mut rng).unwrap();
        let [png, sidecar, _] = p.save(&dir.path().join("p")).unwrap();
        let exact = AdversarialPatch::load(&sidecar).unwrap();
        prop_assert_eq!(exact.pixels(), p.pixels());
        std::fs::remove_file(&sidecar).unwrap();
        let lossy = AdversarialPatch::load(&png).unwrap();
        for (a, b) in lossy.pixels().iter().zip(p.pixels()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }
}
