//! Property tests for the invariants that hold for every input.

use kurtlab::linalg::{haar_orthogonal, polar_factor, Matrix, RngStream, POLAR_MAX_ITER, POLAR_TOL};
use kurtlab::model::{norm_forward, ActivationTensor, NormKind};
use kurtlab::optim::{sign_gd_step, spectral_gd_step, OptimKind, OptimSpec};
use kurtlab::par::Exec;
use kurtlab::quant::{calibrate, fake_quant, normalized_mse, sqnr, QuantSpec};
use kurtlab::stats::{excess_kurtosis, gram_drift, Moments};
use proptest::prelude::*;

fn signed_values(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    // both signs present so zero lies inside the calibrated range
    prop::collection::vec(-50.0f64..50.0, len).prop_map(|mut v| {
        v.push(-1.0);
        v.push(1.0);
        v
    })
}

fn gaussian(seed: u64, rows: usize, cols: usize) -> Matrix {
    Matrix::gaussian(&mut RngStream::new(seed, 0), rows, cols, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_error_is_at_most_half_a_step(v in signed_values(1..200), bits in 2u32..=16) {
        let x = Matrix::from_vec(1, v.len(), v).unwrap();
        let spec = QuantSpec::activations(bits);
        let c = calibrate(&x, &spec).unwrap();
        let q = fake_quant(&x, &spec, &c).unwrap();
        let s = c.channels[0].scale;
        for (a, b) in x.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= s / 2.0 + 1e-9 * a.abs().max(1.0), "{a} -> {b}, s {s}");
        }
    }

    #[test]
    fn fake_quant_is_idempotent(v in signed_values(1..100), bits in 2u32..=12) {
        let x = Matrix::from_vec(1, v.len(), v).unwrap();
        let spec = QuantSpec::activations(bits);
        let c = calibrate(&x, &spec).unwrap();
        let once = fake_quant(&x, &spec, &c).unwrap();
        let twice = fake_quant(&once, &spec, &c).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn step_size_follows_the_level_count(v in signed_values(2..50), bits in 2u32..16) {
        let x = Matrix::from_vec(1, v.len(), v).unwrap();
        let lo = calibrate(&x, &QuantSpec::weights(bits)).unwrap().channels[0].scale;
        let hi = calibrate(&x, &QuantSpec::weights(bits + 1)).unwrap().channels[0].scale;
        let expected = ((1u64 << bits) - 1) as f64 / ((1u64 << (bits + 1)) - 1) as f64;
        prop_assert!((hi / lo - expected).abs() <= 1e-12);
    }

    #[test]
    fn sqnr_is_minus_ten_log_nmse(seed in any::<u64>(), bits in 2u32..=10) {
        let x = gaussian(seed, 4, 64);
        let spec = QuantSpec::weights(bits);
        let q = fake_quant(&x, &spec, &calibrate(&x, &spec).unwrap()).unwrap();
        let s = sqnr(x.data(), q.data()).unwrap();
        let e = normalized_mse(x.data(), q.data()).unwrap();
        prop_assert!((s + 10.0 * e.log10()).abs() <= 1e-9);
    }

    #[test]
    fn merged_moments_match_a_single_pass(v in prop::collection::vec(-10.0f64..10.0, 8..300), cut in 0usize..300) {
        let cut = cut.min(v.len());
        let mut whole = Moments::default();
        whole.extend(&v);
        let (mut a, mut b) = (Moments::default(), Moments::default());
        a.extend(&v[..cut]);
        b.extend(&v[cut..]);
        let merged = a.merge(&b);
        prop_assert!((merged.mean - whole.mean).abs() <= 1e-9);
        prop_assert!((merged.variance() - whole.variance()).abs() <= 1e-9 * whole.variance().max(1.0));
        prop_assert!((merged.central4() - whole.central4()).abs() <= 1e-8 * whole.central4().max(1.0));
    }

    #[test]
    fn kurtosis_is_affine_invariant(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0, flip in any::<bool>()) {
        let mut r = RngStream::new(seed, 1);
        let x: Vec<f64> = (0..500).map(|_| r.laplace(1.0)).collect();
        let a = if flip { -a } else { a };
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (gx, gy) = (excess_kurtosis(&x).unwrap(), excess_kurtosis(&y).unwrap());
        prop_assert!((gx - gy).abs() <= 1e-8 * gx.abs().max(1.0));
    }

    #[test]
    fn haar_columns_are_orthonormal(seed in any::<u64>(), n in 1usize..12, extra in 0usize..6) {
        let q = haar_orthogonal(&mut RngStream::new(seed, 2), n + extra, n).unwrap();
        let gram = q.transpose().matmul(&q).unwrap().sub_scaled_identity(1.0).unwrap();
        prop_assert!(gram.max_abs() <= 1e-10);
    }

    #[test]
    fn polar_factor_is_orthogonal(seed in any::<u64>(), n in 2usize..10) {
        let p = polar_factor(&gaussian(seed, n, n), POLAR_TOL, POLAR_MAX_ITER).unwrap();
        prop_assert!(gram_drift(&p).unwrap() <= 1e-8);
    }

    #[test]
    fn spectral_step_drift_is_bounded(seed in any::<u64>(), n in 2usize..10, eta in 1e-4f64..0.1) {
        let mut r = RngStream::new(seed, 3);
        let w = haar_orthogonal(&mut r, n, n).unwrap();
        let g = Matrix::gaussian(&mut r, n, n, 1.0);
        let step = spectral_gd_step(&w, &g, &OptimSpec::new(OptimKind::SpectralGd, eta, 0.0)).unwrap();
        prop_assert!(gram_drift(&step.w).unwrap() <= 2.0 * eta + eta * eta + 1e-8);
    }

    #[test]
    fn sign_step_moves_every_entry_by_eta(seed in any::<u64>(), eta in 1e-4f64..0.1) {
        let mut r = RngStream::new(seed, 4);
        let w = Matrix::gaussian(&mut r, 5, 7, 1.0);
        let g = Matrix::gaussian(&mut r, 5, 7, 1.0);
        let out = sign_gd_step(&w, &g, &OptimSpec::new(OptimKind::SignGd, eta, 0.0)).unwrap();
        for (a, b) in w.data().iter().zip(out.data()) {
            prop_assert!(((a - b).abs() - eta).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(seed in any::<u64>(), dim in 8usize..64, shift in -20.0f64..20.0, scale in 0.5f64..20.0) {
        let mut r = RngStream::new(seed, 5);
        let data: Vec<f64> = (0..3 * dim).map(|_| shift + scale * r.gaussian()).collect();
        let x = ActivationTensor::from_vec(1, 3, dim, data).unwrap();
        let y = norm_forward(&x, NormKind::LayerNorm, &vec![1.0; dim]);
        for t in 0..3 {
            let row = y.token(0, t);
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            prop_assert!(mean.abs() <= 1e-9 && (var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn streams_replay_and_split_apart(seed in any::<u64>(), stream in any::<u64>(), child in 0u64..1000) {
        let mut a = RngStream::new(seed, stream);
        let mut b = RngStream::new(seed, stream);
        let xa: Vec<f64> = (0..16).map(|_| a.gaussian()).collect();
        let xb: Vec<f64> = (0..16).map(|_| b.gaussian()).collect();
        prop_assert_eq!(&xa, &xb);
        let mut c = RngStream::new(seed, stream).split(child);
        let xc: Vec<f64> = (0..16).map(|_| c.gaussian()).collect();
        prop_assert_ne!(&xa, &xc);
    }

    #[test]
    fn exec_modes_agree(n in 0usize..200, salt in any::<u64>()) {
        let f = |i: usize| (i as u64).wrapping_mul(salt).rotate_left(7);
        prop_assert_eq!(Exec::Sequential.map(n, f), Exec::Parallel.map(n, f));
    }
}
