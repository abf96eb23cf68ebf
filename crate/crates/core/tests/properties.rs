use ndarray::{Array2, Array3};
use proptest::prelude::*;

use cryodiff::baselines;
use cryodiff::diffusion::NoiseSchedule;
use cryodiff::metrics::{self, FscCurve};
use cryodiff::mrc::{self, MrcData};
use cryodiff::simulate::{self, Orientation};
use cryodiff::{DensityMap, ImageStack};

fn image(h: usize, w: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(-1e3f32..1e3, h * w)
        .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn volume(n: usize) -> impl Strategy<Value = DensityMap> {
    prop::collection::vec(-1.0f32..1.0, n * n * n).prop_map(move |v| {
        DensityMap::new(Array3::from_shape_vec((n, n, n), v).unwrap(), 1.5).unwrap()
    })
}

fn quaternion() -> impl Strategy<Value = Orientation> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |q| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
        .prop_map(|q| {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            Orientation::from_quaternion(q.map(|v| v / n)).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mrc_stack_roundtrip_is_bit_exact(
        images in (1usize..4, 1usize..9, 1usize..9)
            .prop_flat_map(|(n, h, w)| prop::collection::vec(image(h, w), n)),
        pixel in 0.1f64..10.0,
    ) {
        let stack = ImageStack::new(images, pixel).unwrap();
        let bytes = mrc::encode(&MrcData::Stack(stack.clone())).unwrap();
        let MrcData::Stack(back) = mrc::decode(&bytes).unwrap() else {
            panic!("stack decoded as a volume");
        };
        prop_assert_eq!(back.images.len(), stack.images.len());
        for (a, b) in back.images.iter().zip(&stack.images) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert!((back.pixel_size - pixel).abs() < 1e-5 * pixel);
        // Cell lengths (bytes 40..52) are f32 products of the pixel size and may
        // move by one ulp on re-encoding; everything else is reproduced.
        let again = mrc::encode(&MrcData::Stack(back)).unwrap();
        prop_assert_eq!(again.len(), bytes.len());
        prop_assert_eq!(&again[..40], &bytes[..40]);
        prop_assert_eq!(&again[52..], &bytes[52..]);
    }

    #[test]
    fn fsc_is_symmetric_and_scale_invariant(a in volume(8), b in volume(8), s in 0.01f32..100.0) {
        let ab = metrics::fsc(&a, &b).unwrap();
        let ba = metrics::fsc(&b, &a).unwrap();
        for (x, y) in ab.correlation.iter().zip(&ba.correlation) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!(x.abs() <= 1.0 + 1e-12);
        }
        let scaled = DensityMap::new(a.voxels.mapv(|v| v * s), a.voxel_size).unwrap();
        let sb = metrics::fsc(&scaled, &b).unwrap();
        for (x, y) in ab.correlation.iter().zip(&sb.correlation) {
            // Only the f32 rounding of the scaled voxels separates the two.
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn raising_the_curve_never_worsens_resolution(
        curve in prop::collection::vec((-0.2f64..1.0, 0.0f64..0.5), 2..20),
    ) {
        let freqs: Vec<f64> = (1..=curve.len()).map(|i| i as f64 * 0.01).collect();
        let base = FscCurve {
            shell_freq: freqs.clone(),
            correlation: curve.iter().map(|c| c.0).collect(),
            shell_counts: vec![1; curve.len()],
        };
        let raised = FscCurve {
            correlation: curve.iter().map(|c| c.0 + c.1).collect(),
            ..base.clone()
        };
        let r0 = metrics::resolution_at(&base, metrics::FSC_THRESHOLD);
        let r1 = metrics::resolution_at(&raised, metrics::FSC_THRESHOLD);
        prop_assert!(r1.frequency >= r0.frequency - 1e-12);
        prop_assert!(r1.angstrom <= r0.angstrom + 1e-9);
    }

    #[test]
    fn projection_is_linear(a in volume(8), b in volume(8), alpha in -3.0f32..3.0, beta in -3.0f32..3.0, pose in quaternion()) {
        let mix = DensityMap::new(&a.voxels * alpha + &b.voxels * beta, 1.5).unwrap();
        let pa = simulate::project(&a, &pose, 8).unwrap();
        let pb = simulate::project(&b, &pose, 8).unwrap();
        let pm = simulate::project(&mix, &pose, 8).unwrap();
        for ((m, x), y) in pm.iter().zip(&pa).zip(&pb) {
            let expected = alpha * x + beta * y;
            prop_assert!((m - expected).abs() < 1e-4 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn rotation_matrices_are_proper(pose in quaternion()) {
        let m = pose.matrix();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                let expected = f64::from(u8::from(i == j));
                prop_assert!((dot - expected).abs() < 1e-12);
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        prop_assert!((det - 1.0).abs() < 1e-12);
        let v = [0.3, -1.2, 2.0];
        let back = pose.rotate_inverse(pose.rotate(v));
        prop_assert!(v.iter().zip(back).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn schedules_are_consistent(betas in prop::collection::vec(1e-5f64..0.5, 1..60), n in 1usize..60) {
        let s = NoiseSchedule::from_betas(betas.clone()).unwrap();
        let mut prod = 1.0;
        for i in 0..s.steps() {
            prod *= 1.0 - betas[i];
            prop_assert!((s.gamma[i] - prod).abs() <= 1e-12 * prod);
            prop_assert!(s.gamma_prev(i) >= s.gamma[i]);
            prop_assert!(s.sigma[i].is_finite() && s.sigma[i] >= 0.0);
        }
        let n = n.min(s.steps());
        let r = s.respaced(n).unwrap();
        prop_assert_eq!(r.steps(), n);
        prop_assert!((r.gamma[n - 1] - s.gamma[s.steps() - 1]).abs() < 1e-15);
        prop_assert!(r.gamma.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn child_seeds_separate_indices(seed in any::<u64>(), i in 0u64..1000, j in 0u64..1000) {
        prop_assume!(i != j);
        prop_assert_ne!(simulate::child_seed(seed, i), simulate::child_seed(seed, j));
    }

    #[test]
    fn lowpass_preserves_the_mean(img in image(12, 12), sigma in 0.1f64..4.0) {
        let out = baselines::lowpass(&img, sigma).unwrap();
        let mean = |a: &Array2<f32>| a.iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64;
        prop_assert!((mean(&out) - mean(&img)).abs() < 1e-3);
    }
}
