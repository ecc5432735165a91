use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use filter_core::dataset::{assign_labels, image_label, iou, BBox, Dataset};
use filter_core::encoder::{encoder_forward, EncoderParams};
use filter_core::eval::{accuracy, roc_auc};
use filter_core::global::{aggregate, GlobalParams, Pooling};
use filter_core::losses::{bce, pull_loss, push_loss, total_loss, LossWeights};
use filter_core::numeric::{softmax_masked, stable_sum, Tensor};
use filter_core::simmat::similarity_matrix;
use filter_core::synth::{gen_synthetic, SynthConfig};

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// Scores on a coarse grid (to force ties) with both classes present.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..20).prop_map(|k| k as f64 / 20.0), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = 0;
                l[1] = 1;
                (s, l)
            })
    })
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
}

/// `(features n×d, mask)` with at least one live slot.
fn group(max_n: usize, max_d: usize) -> impl Strategy<Value = (Tensor, Vec<bool>)> {
    (2usize..max_n, 2usize..max_d).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-1.0..1.0f64, n * d),
            prop::collection::vec(prop::bool::weighted(0.8), n),
        )
            .prop_map(move |(x, mut m)| {
                m[0] = true;
                (Tensor::from_vec(&[n, d], x).unwrap(), m)
            })
    })
}

fn shuffled<T: Clone>(v: &[T], seed: u64) -> (Vec<T>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..v.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (perm.iter().map(|&k| v[k].clone()).collect(), perm)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_matches_pair_count((s, l) in scored_labels()) {
        prop_assert_eq!(roc_auc(&s, &l).unwrap(), brute_auc(&s, &l));
    }

    #[test]
    fn auc_ignores_monotone_transforms((s, l) in scored_labels(), a in 0.1..5.0f64, b in -3.0..3.0f64) {
        let t: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
        prop_assert_eq!(roc_auc(&s, &l).unwrap(), roc_auc(&t, &l).unwrap());
    }

    #[test]
    fn auc_complement((s, l) in scored_labels()) {
        let flipped: Vec<u8> = l.iter().map(|v| 1 - v).collect();
        let sum = roc_auc(&s, &l).unwrap() + roc_auc(&s, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_ignores_order((s, l) in scored_labels(), seed in any::<u64>()) {
        let (ps, perm) = shuffled(&s, seed);
        let pl: Vec<u8> = perm.iter().map(|&k| l[k]).collect();
        prop_assert_eq!(accuracy(&s, &l, 0.5).unwrap(), accuracy(&ps, &pl, 0.5).unwrap());
    }

    #[test]
    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn assignment_ignores_gt_order(det in prop::collection::vec(bbox(), 1..6), gt in prop::collection::vec((bbox(), 0u8..2), 1..6), seed in any::<u64>()) {
        let (pg, _) = shuffled(&gt, seed);
        let a: Vec<_> = assign_labels(&det, &gt, 0.5).unwrap().iter().map(|x| x.label()).collect();
        let b: Vec<_> = assign_labels(&det, &pg, 0.5).unwrap().iter().map(|x| x.label()).collect();
        // Equal-IoU ties between different labels may resolve differently.
        let tie_free = det.iter().all(|d| {
            let mut v: Vec<f64> = gt.iter().map(|(g, _)| iou(d, g)).collect();
            v.sort_by(f64::total_cmp);
            v.windows(2).all(|w| w[0] != w[1] || w[0] == 0.0)
        });
        if tie_free {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn image_label_monotone(labels in prop::collection::vec(0u8..2, 1..12)) {
        let y = image_label(&labels).unwrap();
        let mut more = labels.clone();
        more.push(1);
        prop_assert!(image_label(&more).unwrap() >= y);
        prop_assert_eq!(image_label(&more).unwrap(), 1);
        prop_assert_eq!(y, u8::from(labels.contains(&1)));
    }

    #[test]
    fn similarity_matrix_structure((x, mask) in group(20, 10)) {
        let s = similarity_matrix(&x, &mask).unwrap();
        let n = mask.len();
        for i in 0..n {
            for j in 0..n {
                let v = s.row(i)[j];
                if !(mask[i] && mask[j]) {
                    prop_assert_eq!(v, 0.0);
                } else if i == j {
                    prop_assert_eq!(v, 1.0);
                } else {
                    prop_assert_eq!(v, s.row(j)[i]);
                    prop_assert!((-1.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn encoder_permutation_equivariant((x, mask) in group(12, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = mask.len();
        let p = EncoderParams::init(4, 2, 6, &mut rng).unwrap();
        let tokens = Tensor::from_vec(&[n, 4], (0..n * 4).map(|k| x.data()[k % x.len()] * (1 + k % 3) as f64).collect()).unwrap();
        let (out, _) = encoder_forward(&tokens, &mask, &p).unwrap();
        let (_, perm) = shuffled(&mask, seed ^ 1);
        let pt: Vec<f64> = perm.iter().flat_map(|&k| tokens.row(k).to_vec()).collect();
        let pm: Vec<bool> = perm.iter().map(|&k| mask[k]).collect();
        let (pout, _) = encoder_forward(&Tensor::from_vec(&[n, 4], pt).unwrap(), &pm, &p).unwrap();
        for (i, &k) in perm.iter().enumerate() {
            let a: Vec<u64> = pout.row(i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = out.row(k).iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn encoder_masked_slots_are_isolated((x, mask) in group(12, 4), junk in -50.0..50.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = mask.len();
        let p = EncoderParams::init(4, 2, 6, &mut rng).unwrap();
        let tokens = Tensor::from_vec(&[n, 4], (0..n * 4).map(|k| x.data()[k % x.len()]).collect()).unwrap();
        let mut noisy = tokens.clone();
        for i in (0..n).filter(|&i| !mask[i]) {
            noisy.row_mut(i).fill(junk);
        }
        let (a, _) = encoder_forward(&tokens, &mask, &p).unwrap();
        let (b, _) = encoder_forward(&noisy, &mask, &p).unwrap();
        for i in 0..n {
            let ra: Vec<u64> = a.row(i).iter().map(|v| v.to_bits()).collect();
            let rb: Vec<u64> = b.row(i).iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ra, rb);
        }
    }

    #[test]
    fn aggregate_is_order_free((x, _) in group(10, 6), seed in any::<u64>()) {
        let p = GlobalParams::init(x.cols(), 4, &mut ChaCha8Rng::seed_from_u64(seed));
        let faces: Vec<&[f64]> = (0..x.rows()).map(|i| x.row(i)).collect();
        let (shuf, _) = shuffled(&faces, seed);
        for pooling in [Pooling::Mean, Pooling::Max] {
            let a: Vec<u64> = aggregate(&faces, &p, pooling).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = aggregate(&shuf, &p, pooling).unwrap().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn stable_sum_order_free(v in prop::collection::vec(-1e6..1e6f64, 0..40), seed in any::<u64>()) {
        let (mut shuf, _) = shuffled(&v, seed);
        let mut v = v;
        prop_assert_eq!(stable_sum(&mut v).to_bits(), stable_sum(&mut shuf).to_bits());
    }

    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-30.0..30.0f64, 1..20), mask_bits in any::<u32>()) {
        let mut mask: Vec<bool> = (0..logits.len()).map(|i| mask_bits >> (i % 32) & 1 == 1).collect();
        mask[0] = true;
        let p = softmax_masked(&logits, &mask).unwrap();
        let live: f64 = p.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        prop_assert!((live - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().zip(&mask).all(|(v, &m)| m || *v == 0.0));
    }

    #[test]
    fn metric_losses_bounded((x, mask) in group(16, 8), labels in prop::collection::vec(0u8..2, 16)) {
        let n = mask.len();
        let mut labels = labels[..n].to_vec();
        let mut mask = mask;
        labels[0] = 0;
        labels[1] = 1;
        mask[1] = true;
        prop_assert!(pull_loss(&x, &labels, &mask).unwrap().value >= 0.0);
        let q = push_loss(&x, &labels, &mask).unwrap().value;
        prop_assert!(q > 0.0 && q <= 2.0);
    }

    #[test]
    fn total_loss_is_weighted_sum(g in 0.0..10.0f64, l in 0.0..10.0f64, p in 0.0..100.0f64, q in 0.0..2.0f64,
                                  w1 in 0.0..5.0f64, w2 in 0.0..5.0f64, w3 in 0.0..5.0f64) {
        let w = LossWeights { local: w1, pull: w2, push: w3 };
        let b = total_loss(g, l, p, q, w).unwrap();
        prop_assert_eq!(b.total.to_bits(), (g + w1 * l + w2 * p + w3 * q).to_bits());
    }

    #[test]
    fn bce_non_negative_and_finite(y_hat in 0.0..=1.0f64, y in 0u8..2) {
        let v = bce(y_hat, y);
        prop_assert!(v.is_finite() && v >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_round_trips(seed in any::<u64>(), images in 1usize..12, tracks in 1usize..4) {
        let cfg = SynthConfig { num_images: images, feature_dim: 5, track_len: tracks, ..SynthConfig::default() };
        let ds = gen_synthetic(&cfg, seed).unwrap();
        let back = Dataset::from_jsonl(&ds.to_jsonl().unwrap()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
