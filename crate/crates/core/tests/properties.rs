//! Property tests for the invariants of metrics, loss, quality scoring,
//! selection and augmentation.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qunetpp::data::{normalize_slice, SliceId, SliceRecord, Split};
use qunetpp::evaluation::{confusion, seg_metrics};
use qunetpp::imageops::{Image, Mask};
use qunetpp::quality::{blurriness, dedup_epsilon, select_initial, DedupCandidate, QualityScores, ScoredSlice};
use qunetpp::selection::{jaccard, QualityVerdict, SelectionReport};
use qunetpp::training::{augment, dice_loss, AugmentConfig};

fn mask_pair(max: usize) -> impl Strategy<Value = (Mask, Mask)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(0u8..=1, h * w),
            proptest::collection::vec(0u8..=1, h * w),
        )
            .prop_map(move |(a, b)| {
                (
                    Array2::from_shape_vec((h, w), a).unwrap(),
                    Array2::from_shape_vec((h, w), b).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_consistent((p, y) in mask_pair(12)) {
        let m = seg_metrics(&p, &y).unwrap();
        let c = confusion(&p, &y).unwrap();
        for v in [m.precision, m.recall, m.jaccard, m.dice, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.jaccard <= m.dice);
        let total = c.total() as f64;
        prop_assert!((m.accuracy - (1.0 - (c.fp + c.fn_) as f64 / total)).abs() < 1e-12);
        prop_assert!((m.dice - 2.0 * m.jaccard / (1.0 + m.jaccard)).abs() < 1e-12);
        prop_assert_eq!(m.jaccard, jaccard(&p, &y).unwrap());
    }

    #[test]
    fn jaccard_symmetry_identity_monotonicity((a, b) in mask_pair(10), extra in 0usize..100) {
        let j = jaccard(&a, &b).unwrap();
        prop_assert_eq!(j, jaccard(&b, &a).unwrap());
        prop_assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        // mark one more pixel as foreground in both maps
        let k = extra % a.len();
        let (mut a2, mut b2) = (a.clone(), b.clone());
        let idx = (k / a.ncols(), k % a.ncols());
        a2[idx] = 1;
        b2[idx] = 1;
        prop_assert!(jaccard(&a2, &b2).unwrap() >= j);
    }

    #[test]
    fn dice_loss_range_and_symmetry(
        p in proptest::collection::vec(0.0f64..=1.0, 1..40),
        seed in any::<u64>(),
    ) {
        let y: Vec<f64> = p.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) & 1) as f64).collect();
        let l = dice_loss(&p, &y).unwrap();
        prop_assert!(l > -1.0 && l <= 0.0);
        let pb: Vec<f64> = p.iter().map(|v| v.round()).collect();
        prop_assert_eq!(dice_loss(&pb, &y).unwrap(), dice_loss(&y, &pb).unwrap());
    }

    #[test]
    fn blurriness_ignores_constant_offsets(
        values in proptest::collection::vec(0.0f64..1.0, 64),
        offset in -5.0f64..5.0,
    ) {
        let img = Array2::from_shape_vec((8, 8), values).unwrap();
        let shifted = img.mapv(|v| v + offset);
        let (a, b) = (blurriness(&img).unwrap(), blurriness(&shifted).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn initial_selection_is_a_subset(
        scores in proptest::collection::vec((0.01f64..5.0, 0.0f64..1.0, 0usize..3), 1..30),
    ) {
        let table: Vec<ScoredSlice> = scores
            .iter()
            .enumerate()
            .map(|(i, &(b, p, s))| ScoredSlice {
                id: SliceId::new(format!("s{s}"), i),
                scores: QualityScores { blurriness: b, psnr_inv: p, roi_cov: None, roi_mean: None },
            })
            .collect();
        let (selected, thresholds) = select_initial(&table);
        for id in &selected {
            let s = table.iter().find(|s| &s.id == id).unwrap();
            let t = &thresholds[&id.stack_id];
            prop_assert!(s.scores.blurriness < t.mean_blurriness && s.scores.psnr_inv < t.mean_psnr_inv);
        }
    }

    #[test]
    fn dedup_keeps_far_apart_points(
        feats in proptest::collection::vec((0.0f64..10.0, 0.0f64..1.0, 0.0f64..1.0), 1..25),
        eps0 in 0.0f64..2.0,
        cap in 1usize..12,
    ) {
        let cands: Vec<DedupCandidate> = feats
            .iter()
            .enumerate()
            .map(|(i, &(b, c, m))| DedupCandidate { id: SliceId::new("s", i), blurriness: b, cov: c, mean: m })
            .collect();
        let out = dedup_epsilon(&cands, eps0, cap);
        prop_assert!(out.kept.len() <= cap);
        prop_assert_eq!(out.kept.len() + out.eliminated.len(), cands.len());
        // recompute the normalized features to check pairwise distances
        let z = |v: Vec<f64>| {
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
            v.iter().map(|x| if sd > 0.0 { (x - mu) / sd } else { 0.0 }).collect::<Vec<_>>()
        };
        let zc = z(cands.iter().map(|c| c.cov).collect());
        let zm = z(cands.iter().map(|c| c.mean).collect());
        let idx: Vec<usize> = out.kept.iter().map(|id| id.slice_index).collect();
        for (k, &i) in idx.iter().enumerate() {
            for &j in &idx[k + 1..] {
                let d = ((zc[i] - zc[j]).powi(2) + (zm[i] - zm[j]).powi(2)).sqrt();
                prop_assert!(d > eps0);
            }
        }
    }

    #[test]
    fn verdicts_follow_the_threshold(q in 0.0f64..=1.0, q0 in 0.0f64..=1.01) {
        let v = QualityVerdict::new(&SliceId::new("s", 0), q, q0);
        prop_assert_eq!(v.selected, q < q0);
    }

    #[test]
    fn report_fraction_counts_both_sets(qs in proptest::collection::vec(0.0f64..=1.0, 1..30), s0 in 1usize..10) {
        let s0_ids: Vec<SliceId> = (0..s0).map(|i| SliceId::new("a", i)).collect();
        let verdicts: Vec<QualityVerdict> =
            qs.iter().enumerate().map(|(i, &q)| QualityVerdict::new(&SliceId::new("b", i), q, 0.9)).collect();
        let chosen = verdicts.iter().filter(|v| v.selected).count();
        let pool = s0 + qs.len();
        let r = SelectionReport::new(0.9, s0_ids, verdicts, pool).unwrap();
        prop_assert_eq!(r.s_m.len(), chosen);
        prop_assert!((r.fraction_selected - (s0 + chosen) as f64 / pool as f64).abs() < 1e-12);
    }

    #[test]
    fn augmented_masks_stay_binary(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::from_shape_fn((24, 24), |(r, c)| ((r * 7 + c * 3) % 11) as f32 / 10.0);
        let mask = Mask::from_shape_fn((24, 24), |(r, c)| u8::from(r > 6 && r < 15 && c > 3 && c < 20));
        let (ai, am) = augment(&img, &mask, &AugmentConfig::default(), &mut rng).unwrap();
        prop_assert!(am.iter().all(|&v| v <= 1));
        prop_assert!(ai.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normalization_keeps_annotations_inside_roi(side in 16usize..48, target in 16usize..40, cut in 0usize..8) {
        let roi = Mask::from_shape_fn((side, side), |(r, c)| u8::from(r >= cut && c + cut < side));
        let ann = Mask::from_shape_fn((side, side), |(r, c)| u8::from(r >= cut + 2 && r < side / 2 + cut && c + cut < side));
        let rec = SliceRecord {
            stack_id: "s".into(),
            slice_index: 0,
            image: Image::from_elem((side, side), 0.4),
            roi_mask: Some(roi),
            annotation: Some(ann),
            split: Split::Pool,
        };
        let n = normalize_slice(&rec, target).unwrap();
        prop_assert!(n.validate().is_ok());
        prop_assert_eq!(n.dim(), (target, target));
    }
}
