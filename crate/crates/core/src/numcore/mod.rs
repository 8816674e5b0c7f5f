//! Minimal dense-tensor arithmetic with reverse-mode gradients and a
//! finite-difference checker. Float64 throughout.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, CoordFailure, Evaluation, GradCheckReport, KINK_TOL, REL_FLOOR};
pub use tape::{GradMap, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape error: {0}")]
    BadShape(String),
    #[error("non-finite value {0} rejected at construction")]
    NonFinite(f64),
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn vec_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} beyond {tol}");
        }
    }

    #[test]
    fn affine_identity_passes_through() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = tape.affine(w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_bias_only() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = tape.affine(w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn affine_hand_product() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let x = tape.constant(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let y = tape.affine(w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn affine_shape_mismatch_is_dim_error() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(tape.affine(w, b, x), Err(NumError::Dim(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let shift = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());

        let x = tape.constant(Tensor::vector(vec![1.0, -1.0]).unwrap());
        let y = tape.layer_norm(x, gain, shift, 1e-5).unwrap();
        vec_close(tape.value(y).data(), &[1.0, -1.0], 1e-4);

        let x = tape.constant(Tensor::vector(vec![2.0, 2.0]).unwrap());
        let y = tape.layer_norm(x, gain, shift, 1e-5).unwrap();
        vec_close(tape.value(y).data(), &[0.0, 0.0], 1e-12);

        let x = tape.constant(Tensor::vector(vec![0.0, 2.0]).unwrap());
        let y = tape.layer_norm(x, gain, shift, 1e-5).unwrap();
        vec_close(tape.value(y).data(), &[-1.0, 1.0], 1e-4);
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::vector(vec![1.0]).unwrap());
        let shift = tape.constant(Tensor::vector(vec![0.0]).unwrap());
        let x = tape.constant(Tensor::vector(vec![5.0]).unwrap());
        assert!(matches!(tape.layer_norm(x, gain, shift, 1e-5), Err(NumError::Dim(_))));
    }

    #[test]
    fn scale_norm_examples() {
        let mut tape = Tape::new();
        let g1 = tape.constant(Tensor::scalar(1.0).unwrap());
        let g2 = tape.constant(Tensor::scalar(2.0).unwrap());

        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = tape.scale_norm(x, g1, 1e-8).unwrap();
        vec_close(tape.value(y).data(), &[0.6, 0.8], 1e-12);

        let y = tape.scale_norm(x, g2, 1e-8).unwrap();
        vec_close(tape.value(y).data(), &[1.2, 1.6], 1e-12);

        let zero = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = tape.scale_norm(zero, g1, 1e-8).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_square_at_three() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(3.0).unwrap()).unwrap();
        let loss = tape.sum_squares(x);
        assert_eq!(tape.value(loss).item().unwrap(), 9.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn backward_constant_loss_gives_zero_grads() {
        let mut tape = Tape::new();
        let _x = tape.param("x", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let c = tape.constant(Tensor::scalar(5.0).unwrap());
        let loss = tape.sum_squares(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(tape.backward(x), Err(NumError::Contract(_))));
    }

    /// Builds ‖W·x − y‖² on a tape from the given parameter map.
    fn wx_minus_y_loss(params: &GradMap, want_grads: bool) -> Result<Evaluation, NumError> {
        let mut tape = Tape::new();
        let w = tape.param("w", params["w"].clone())?;
        let x = tape.param("x", params["x"].clone())?;
        let b = tape.constant(Tensor::vector(vec![0.0; 3]).unwrap());
        let y = tape.constant(Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap());
        let wx = tape.affine(w, b, x)?;
        let diff = tape.sub(wx, y)?;
        let loss = tape.sum_squares(diff);
        let grads = if want_grads { Some(tape.backward(loss)?) } else { None };
        Ok(Evaluation {
            loss: tape.value(loss).item()?,
            grads,
            relu_preacts: tape.relu_preacts(),
        })
    }

    #[test]
    fn backward_matches_finite_differences_for_random_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = BTreeMap::new();
        let wdata: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xdata: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        params.insert("w".to_string(), Tensor::matrix(3, 3, wdata).unwrap());
        params.insert("x".to_string(), Tensor::vector(xdata).unwrap());
        let report = grad_check(&params, wx_minus_y_loss, 1e-5, 1e-5, KINK_TOL).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures);
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err < 1e-5);
    }

    #[test]
    fn grad_check_cubic() {
        let f = |params: &GradMap, want_grads: bool| -> Result<Evaluation, NumError> {
            let mut tape = Tape::new();
            let x = tape.param("x", params["x"].clone())?;
            let x2 = tape.mul(x, x)?;
            let x3 = tape.mul(x2, x)?;
            let grads = if want_grads { Some(tape.backward(x3)?) } else { None };
            Ok(Evaluation { loss: tape.value(x3).item()?, grads, relu_preacts: vec![] })
        };
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::scalar(2.0).unwrap());
        let report = grad_check(&params, f, 1e-6, 1e-6, KINK_TOL).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures);
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn grad_check_skips_relu_kink_at_zero() {
        let f = |params: &GradMap, want_grads: bool| -> Result<Evaluation, NumError> {
            let mut tape = Tape::new();
            let x = tape.param("x", params["x"].clone())?;
            let r = tape.relu(x);
            let loss = tape.sum_squares(r);
            let grads = if want_grads { Some(tape.backward(loss)?) } else { None };
            Ok(Evaluation {
                loss: tape.value(loss).item()?,
                grads,
                relu_preacts: tape.relu_preacts(),
            })
        };
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::scalar(0.0).unwrap());
        let report = grad_check(&params, f, 1e-5, 1e-4, KINK_TOL).unwrap();
        assert_eq!(report.checked, 0);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.skipped_coords, vec![("x".to_string(), 0)]);
    }

    #[test]
    fn gather_scatter_roundtrip_gradients() {
        // Σ over a gather/scatter pipeline, checked against finite differences.
        let f = |params: &GradMap, want_grads: bool| -> Result<Evaluation, NumError> {
            let mut tape = Tape::new();
            let v = tape.param("v", params["v"].clone())?;
            let w = tape.param("w", params["w"].clone())?;
            let gathered = tape.gather_rows(v, &[0, 1, 1, 2])?;
            let scattered = tape.scatter_weighted_rows(gathered, w, &[2, 0, 1, 0], 3)?;
            let loss = tape.sum_squares(scattered);
            let grads = if want_grads { Some(tape.backward(loss)?) } else { None };
            Ok(Evaluation { loss: tape.value(loss).item()?, grads, relu_preacts: vec![] })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = BTreeMap::new();
        params.insert(
            "v".to_string(),
            Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        params.insert(
            "w".to_string(),
            Tensor::matrix(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let report = grad_check(&params, f, 1e-5, 1e-5, KINK_TOL).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures);
    }

    #[test]
    fn composed_normalisation_gradients_match_fd() {
        // layer_norm → sigmoid → scale_norm chain, all parameters checked.
        let f = |params: &GradMap, want_grads: bool| -> Result<Evaluation, NumError> {
            let mut tape = Tape::new();
            let x = tape.param("x", params["x"].clone())?;
            let gain = tape.param("gain", params["gain"].clone())?;
            let shift = tape.param("shift", params["shift"].clone())?;
            let sg = tape.param("sg", params["sg"].clone())?;
            let ln = tape.layer_norm(x, gain, shift, 1e-5)?;
            let sig = tape.sigmoid(ln);
            let sn = tape.scale_norm(sig, sg, 1e-8)?;
            let loss = tape.sum_squares(sn);
            let grads = if want_grads { Some(tape.backward(loss)?) } else { None };
            Ok(Evaluation { loss: tape.value(loss).item()?, grads, relu_preacts: vec![] })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = BTreeMap::new();
        params.insert(
            "x".to_string(),
            Tensor::matrix(2, 5, (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
        );
        params.insert(
            "gain".to_string(),
            Tensor::vector((0..5).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap(),
        );
        params.insert(
            "shift".to_string(),
            Tensor::vector((0..5).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap(),
        );
        params.insert("sg".to_string(), Tensor::scalar(1.3).unwrap());
        let report = grad_check(&params, f, 1e-5, 1e-4, KINK_TOL).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures);
    }

    proptest! {
        /// affine(W, b, αx + βy) == α·affine(W, 0, x) + β·affine(W, 0, y) + b.
        #[test]
        fn affine_is_exactly_linear(
            seed in 0u64..1000,
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 3;
            let n = 4;
            let w = Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let b = Tensor::vector((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let x = Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let y = Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

            let mut tape = Tape::new();
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let zero = tape.constant(Tensor::zeros(vec![m]));
            let combo = Tensor::vector(
                x.data().iter().zip(y.data()).map(|(a, c)| alpha * a + beta * c).collect(),
            ).unwrap();
            let cv = tape.constant(combo);
            let lhs = tape.affine(wv, bv, cv).unwrap();

            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let fx = tape.affine(wv, zero, xv).unwrap();
            let fy = tape.affine(wv, zero, yv).unwrap();
            let rhs: Vec<f64> = (0..m)
                .map(|i| alpha * tape.value(fx).data()[i] + beta * tape.value(fy).data()[i] + b.data()[i])
                .collect();
            for i in 0..m {
                let l = tape.value(lhs).data()[i];
                prop_assert!((l - rhs[i]).abs() <= 1e-12 * (1.0 + l.abs()));
            }
        }

        /// Pre gain/shift, layer_norm output has mean 0 and variance 1.
        #[test]
        fn layer_norm_standardises(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8;
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            // Skip near-constant rows; their variance is dominated by eps.
            let spread = data.iter().cloned().fold(f64::MIN, f64::max)
                - data.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-2);
            let mut tape = Tape::new();
            let gain = tape.constant(Tensor::full(vec![n], 1.0).unwrap());
            let shift = tape.constant(Tensor::zeros(vec![n]));
            let x = tape.constant(Tensor::vector(data).unwrap());
            let y = tape.layer_norm(x, gain, shift, 1e-5).unwrap();
            let out = tape.value(y).data();
            let mean = out.iter().sum::<f64>() / n as f64;
            let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }

        /// scale_norm output norm equals |gain| when the input norm clears eps.
        #[test]
        fn scale_norm_sets_norm_to_gain(seed in 0u64..1000, gain in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            prop_assume!(data.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6);
            let mut tape = Tape::new();
            let g = tape.constant(Tensor::scalar(gain).unwrap());
            let x = tape.constant(Tensor::vector(data).unwrap());
            let y = tape.scale_norm(x, g, 1e-8).unwrap();
            prop_assert!((tape.value(y).norm() - gain.abs()).abs() < 1e-9);
        }
    }
}
