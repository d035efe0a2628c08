//! Property tests for the numeric substrate and the evaluation protocol.

use proptest::prelude::*;

use bdl_core::channels::{gradient_channels, normalize_channel};
use bdl_core::detect::{nms, BBox, Detection};
use bdl_core::eval::{match_detections, GroundTruth};
use bdl_core::ops::{conv2d, meanpool2d, resize_bilinear, Padding};
use bdl_core::tensor::Tensor;
use bdl_core::Rng;

fn tensor_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, c * h * w)
        .prop_map(move |data| Tensor::new(vec![c, h, w], data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_the_input(
        seed in 0u64..1000,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut rng = Rng::new(seed);
        let mk = |rng: &mut Rng, n: usize| (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>();
        let x = Tensor::new(vec![2, 6, 5], mk(&mut rng, 60)).unwrap();
        let y = Tensor::new(vec![2, 6, 5], mk(&mut rng, 60)).unwrap();
        let kernels = Tensor::new(vec![2, 2, 3, 3], mk(&mut rng, 36)).unwrap();
        let bias = Tensor::zeros(vec![2]);
        let mixed = Tensor::new(
            vec![2, 6, 5],
            x.data().iter().zip(y.data()).map(|(&xv, &yv)| a * xv + b * yv).collect(),
        ).unwrap();
        let lhs = conv2d(&mixed, &kernels, &bias, Padding::Same).unwrap();
        let cx = conv2d(&x, &kernels, &bias, Padding::Same).unwrap();
        let cy = conv2d(&y, &kernels, &bias, Padding::Same).unwrap();
        for ((&m, &xv), &yv) in lhs.iter().zip(cx.iter()).zip(cy.iter()) {
            prop_assert!((m - (a * xv + b * yv)).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_kernel_conv_is_identity(
        c in 1usize..3,
        h in 3usize..8,
        w in 3usize..8,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let len = c * h * w;
        let input = Tensor::new(vec![c, h, w], (0..len).map(|_| rng.uniform(-5.0, 5.0)).collect()).unwrap();
        let mut kernels = Tensor::zeros(vec![c, c, 3, 3]);
        for k in 0..c {
            // center tap of the (k,k) slice
            kernels.data_mut()[((k * c + k) * 3 + 1) * 3 + 1] = 1.0;
        }
        let out = conv2d(&input, &kernels, &Tensor::zeros(vec![c]), Padding::Same).unwrap();
        prop_assert_eq!(out.data(), input.data());
    }

    #[test]
    fn meanpool_preserves_global_mean(
        c in 1usize..3,
        bh in 1usize..4,
        bw in 1usize..4,
        m in 1usize..4,
        seed in 0u64..1000,
    ) {
        // integer-valued input keeps every partial sum exact in f64
        let (h, w) = (bh * m, bw * m);
        let mut rng = Rng::new(seed);
        let input = Tensor::new(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.below(201) as f64 - 100.0).collect(),
        ).unwrap();
        let pooled = meanpool2d(&input, m).unwrap();
        let total_in: f64 = input.iter().sum();
        let total_out: f64 = pooled.iter().sum();
        let mean_in = total_in / input.len() as f64;
        let mean_out = total_out / (m * m) as f64 / pooled.len() as f64;
        prop_assert_eq!(mean_in, mean_out);
    }

    #[test]
    fn resize_stays_within_input_range(
        oh in 1usize..12,
        ow in 1usize..12,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let input = Tensor::new(vec![1, 5, 5], (0..25).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let out = resize_bilinear(&input, oh, ow).unwrap();
        let lo = input.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &v in out.iter() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn orientation_bins_partition_magnitude(t in tensor_strategy(1, 6, 7)) {
        let gray = Tensor::new(vec![6, 7], t.data().to_vec()).unwrap();
        let (mag, orient) = gradient_channels(&gray, 6).unwrap();
        let n = 6 * 7;
        for i in 0..n {
            let sum: f64 = (0..6).map(|b| orient.data()[b * n + i]).sum();
            prop_assert_eq!(sum, mag.data()[i]);
        }
    }

    #[test]
    fn normalization_is_shift_invariant(t in tensor_strategy(1, 4, 5), shift in -50.0f64..50.0) {
        let base = Tensor::new(vec![4, 5], t.data().to_vec()).unwrap();
        let shifted = Tensor::new(vec![4, 5], base.iter().map(|v| v + shift).collect()).unwrap();
        let a = normalize_channel(&base);
        let b = normalize_channel(&shifted);
        for (&x, &y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn nms_output_is_mutually_separated_subset(seed in 0u64..2000, thresh in 0.2f64..0.8) {
        let mut rng = Rng::new(seed);
        let dets: Vec<Detection> = (0..40)
            .map(|_| Detection {
                bbox: BBox::new(
                    rng.uniform(0.0, 50.0),
                    rng.uniform(0.0, 50.0),
                    rng.uniform(4.0, 25.0),
                    rng.uniform(4.0, 25.0),
                ),
                score: rng.next_f64(),
            })
            .collect();
        let kept = nms(dets.clone(), thresh);
        prop_assert!(kept.len() <= dets.len());
        for k in &kept {
            prop_assert!(dets.iter().any(|d| d == k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.bbox.iou(&b.bbox) < thresh);
            }
        }
    }

    #[test]
    fn iou_is_symmetric_bounded_and_identity(
        ax in 0.0f64..40.0, ay in 0.0f64..40.0, aw in 1.0f64..20.0, ah in 1.0f64..20.0,
        bx in 0.0f64..40.0, by in 0.0f64..40.0, bw in 1.0f64..20.0, bh in 1.0f64..20.0,
    ) {
        let a = BBox::new(ax, ay, aw, ah);
        let b = BBox::new(bx, by, bw, bh);
        prop_assert_eq!(a.iou(&b), b.iou(&a));
        prop_assert!((0.0..=1.0).contains(&a.iou(&b)));
        prop_assert_eq!(a.iou(&a), 1.0);
        if a.iou(&b) == 1.0 {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn matching_counts_are_conserved(seed in 0u64..2000) {
        let mut rng = Rng::new(seed);
        let n_det = rng.below(6);
        let n_gt = rng.below(5);
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| Detection {
                bbox: BBox::new(rng.uniform(0.0, 30.0), rng.uniform(0.0, 30.0), 10.0, 20.0),
                score: rng.next_f64(),
            })
            .collect();
        let gts: Vec<GroundTruth> = (0..n_gt)
            .map(|_| GroundTruth {
                bbox: BBox::new(rng.uniform(0.0, 30.0), rng.uniform(0.0, 30.0), 10.0, 20.0),
                occlusion: 0.0,
            })
            .collect();
        let c = match_detections(&dets, &gts, 0.5);
        prop_assert_eq!(c.tp + c.missed, gts.len());
        prop_assert_eq!(c.tp + c.fp, dets.len());
    }
}
