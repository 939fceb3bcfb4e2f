//! Dense `f64` tensors and a define-by-run reverse-mode tape.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::HfatError;
    use crate::testutil::{central_difference, max_rel_error, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let tape = Tape::new();
        let i2 = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(mat(&[&[3.0, 1.0], &[4.0, 2.0]]));
        assert_eq!(i2.matmul(&b).unwrap().value().data(), &[3.0, 1.0, 4.0, 2.0]);

        let a = tape.constant(mat(&[&[1.0, 2.0]]));
        let z = tape.constant(mat(&[&[0.0], &[0.0]]));
        let out = a.matmul(&z).unwrap();
        assert_eq!(out.shape(), vec![1, 1]);
        assert_eq!(out.value().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(&b) {
            Err(HfatError::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = random_tensor(&mut rng, &[3, 4], 1.0);
        let b0 = random_tensor(&mut rng, &[4, 2], 1.0);
        let w = random_tensor(&mut rng, &[3, 2], 1.0);
        let f = |a: &Tensor, b: &Tensor| {
            let tape = Tape::new();
            let (a, b, w) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.constant(w.clone()));
            let loss = a.matmul(&b).unwrap().mul(&w).unwrap().sum().unwrap();
            let v = loss.value().item();
            let mut g = loss.backward().unwrap();
            (v, g.take(&a).unwrap(), g.take(&b).unwrap())
        };
        let (_, ga, gb) = f(&a0, &b0);
        let fd_a = central_difference(&a0, 1e-5, |a| f(a, &b0).0);
        let fd_b = central_difference(&b0, 1e-5, |b| f(&a0, b).0);
        assert!(max_rel_error(&ga, &fd_a) < 1e-6);
        assert!(max_rel_error(&gb, &fd_b) < 1e-6);
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = x.relu().unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-3.0, -0.5, -1e-9]));
        let y = x.relu().unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let g = y.sum().unwrap().backward().unwrap();
        assert!(g.get(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x0 = random_tensor(&mut rng, &[12], 1.0);
        for v in x0.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1f64.copysign(*v);
            }
        }
        let w = random_tensor(&mut rng, &[12], 1.0);
        let f = |x: &Tensor| {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let loss = xv.relu().unwrap().mul(&tape.constant(w.clone())).unwrap().sum().unwrap();
            let v = loss.value().item();
            (v, loss.backward().unwrap().take(&xv).unwrap())
        };
        let fd = central_difference(&x0, 1e-5, |x| f(x).0);
        assert!(max_rel_error(&f(&x0).1, &fd) < 1e-6);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 10]));
        let loss = z.cross_entropy(&[0, 4, 9]).unwrap();
        assert!((loss.value().item() - 10f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::zeros(&[1, 3]);
        logits.data_mut()[2] = 1e6;
        let z = tape.constant(logits);
        let loss = z.cross_entropy(&[2]).unwrap();
        assert!(loss.value().item() <= 1e-9);
        assert!(loss.value().item() >= 0.0);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            z.cross_entropy(&[0, 3]),
            Err(HfatError::Index { index: 3, len: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z0 = random_tensor(&mut rng, &[4, 3], 2.0);
        let labels = [0, 2, 1, 2];
        let f = |z: &Tensor| {
            let tape = Tape::new();
            let zv = tape.leaf(z.clone());
            let loss = zv.cross_entropy(&labels).unwrap();
            let v = loss.value().item();
            (v, loss.backward().unwrap().take(&zv).unwrap())
        };
        let fd = central_difference(&z0, 1e-5, |z| f(z).0);
        assert!(max_rel_error(&f(&z0).1, &fd) < 1e-6);
    }

    #[test]
    fn kl_divergence_reference_values() {
        let tape = Tape::new();
        let p = tape.constant(mat(&[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.0]]));
        let same = p.kl_divergence(&p).unwrap();
        assert!(same.value().item().abs() <= 1e-12);

        // uniform p against q = softmax([ln .9, ln .05, ln .05]) = (.9, .05, .05)
        let q_logits = [0.9f64.ln(), 0.05f64.ln(), 0.05f64.ln()];
        let p = tape.constant(Tensor::zeros(&[1, 3]));
        let q = tape.constant(mat(&[&q_logits]));
        let kl = p.kl_divergence(&q).unwrap().value().item();
        // direct summation: Σ (1/3)·ln((1/3)/q_c)
        let expected: f64 = [0.9, 0.05, 0.05]
            .iter()
            .map(|&qc: &f64| (1.0 / 3.0) * ((1.0 / 3.0) / qc).ln())
            .sum();
        assert!((kl - expected).abs() < 1e-12, "{kl} vs {expected}");
    }

    #[test]
    fn kl_divergence_shape_mismatch() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[2, 3]));
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(p.kl_divergence(&q), Err(HfatError::Dimension { .. })));
    }

    #[test]
    fn kl_divergence_gradients_in_both_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p0 = random_tensor(&mut rng, &[3, 4], 1.5);
        let q0 = random_tensor(&mut rng, &[3, 4], 1.5);
        let f = |p: &Tensor, q: &Tensor| {
            let tape = Tape::new();
            let (pv, qv) = (tape.leaf(p.clone()), tape.leaf(q.clone()));
            let loss = pv.kl_divergence(&qv).unwrap();
            let v = loss.value().item();
            let mut g = loss.backward().unwrap();
            (v, g.take(&pv).unwrap(), g.take(&qv).unwrap())
        };
        let (_, gp, gq) = f(&p0, &q0);
        let fd_p = central_difference(&p0, 1e-5, |p| f(p, &q0).0);
        let fd_q = central_difference(&q0, 1e-5, |q| f(&p0, q).0);
        assert!(max_rel_error(&gp, &fd_p) < 1e-6);
        assert!(max_rel_error(&gq, &fd_q) < 1e-6);
    }

    #[test]
    fn margin_loss_gradient_and_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z0 = random_tensor(&mut rng, &[5, 4], 2.0);
        let labels = [0, 1, 2, 3, 1];
        let f = |z: &Tensor| {
            let tape = Tape::new();
            let zv = tape.leaf(z.clone());
            let loss = zv.margin_loss(&labels, 0.5).unwrap();
            let v = loss.value().item();
            (v, loss.backward().unwrap().take(&zv).unwrap())
        };
        let fd = central_difference(&z0, 1e-6, |z| f(z).0);
        assert!(max_rel_error(&f(&z0).1, &fd) < 1e-6);

        // misclassified row with kappa = 0 sits on the floor: zero loss and gradient
        let tape = Tape::new();
        let z = tape.leaf(mat(&[&[0.0, 2.0, 1.0]]));
        let loss = z.margin_loss(&[0], 0.0).unwrap();
        assert_eq!(loss.value().item(), 0.0);
        let g = loss.backward().unwrap();
        assert!(g.get(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gives_all_ones() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.5, -2.0, 3.0, 1.0, 9.0]));
        let g = w.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn second_backward_is_a_lifecycle_error() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = w.sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(HfatError::Lifecycle(_))));

        tape.reset();
        assert!(matches!(loss.backward(), Err(HfatError::Lifecycle(_))));
        assert!(matches!(w.relu(), Err(HfatError::Lifecycle(_))));
        let w2 = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(w2.sum().unwrap().backward().is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(w.backward(), Err(HfatError::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates_each_path_once() {
        // f(x) = sum(x*x + 3x + x) → df/dx = 2x + 4
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = x.mul(&x).unwrap();
        let lin = x.scale(3.0).unwrap();
        let f = sq.add(&lin).unwrap().add(&x).unwrap().sum().unwrap();
        let g = f.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[6.0, 0.0, 5.0]);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![f64::MAX, 1.0]));
        assert!(matches!(a.scale(10.0), Err(HfatError::Numeric(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_tensor(&mut rng, &[20, 7], 30.0);
        let p = kernels::softmax_rows(z.data(), 7);
        for row in p.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
