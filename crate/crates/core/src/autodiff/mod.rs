//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod tape;

pub use gradcheck::{error_floor, grad_check, relative_error, GradCheckConfig, GradReport};
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;
use crate::tensor::Tensor;

/// Eager Euclidean (or squared) distance matrix between the rows of `a` and `b`.
pub fn pairwise_distance(a: &Tensor, b: &Tensor, squared: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let d = tape.pairwise_distance(va, vb, squared)?;
    Ok(tape.value(d).clone())
}

/// Eager row softmax.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let s = tape.softmax_rows(v)?;
    Ok(tape.value(s).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_from_seed;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn distance_examples() {
        let d = pairwise_distance(&t(&[1, 1], &[0.0]), &t(&[2, 1], &[0.0, 1.0]), false).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0]);
        let d = pairwise_distance(
            &t(&[1, 2], &[1.0, 0.0]),
            &t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]),
            false,
        )
        .unwrap();
        assert_eq!(d.data(), &[1.0, 1.0]);
        let mut rng = rng_from_seed(1);
        let a = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let d = pairwise_distance(&a, &a, false).unwrap();
        for i in 0..5 {
            assert_eq!(d.data()[i * 5 + i], 0.0);
        }
    }

    #[test]
    fn distance_dimension_mismatch() {
        let err = pairwise_distance(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 3], &[0.0; 3]), false);
        assert!(matches!(err, Err(crate::Error::Shape { .. })));
    }

    #[test]
    fn distance_symmetric_under_swap() {
        let mut rng = rng_from_seed(2);
        let a = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![6, 3], 1.0, &mut rng);
        let ab = pairwise_distance(&a, &b, false).unwrap();
        let ba = pairwise_distance(&b, &a, false).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(ab.data()[i * 6 + j], ba.data()[j * 4 + i]);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[1, 2], &[0.0, -1.0])).unwrap();
        assert!((s.data()[0] - 0.7311).abs() < 1e-4);
        assert!((s.data()[1] - 0.2689).abs() < 1e-4);
        let s = softmax_rows(&t(&[1, 2], &[1000.0, 0.0])).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax_rows(&t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(err, Err(crate::Error::Numeric { .. })));
        let err = softmax_rows(&t(&[1, 2], &[f64::INFINITY, 0.0]));
        assert!(matches!(err, Err(crate::Error::Numeric { .. })));
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.square(v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2.0, 4.0, 6.0]);

        let report = grad_check(
            "sum_of_squares",
            |tp, v| {
                let sq = tp.square(v[0])?;
                Ok(tp.sum(sq))
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-7, "{:?}", report);
        assert!(report.passed);
    }

    #[test]
    fn grad_check_softmax_with_cotangent() {
        let mut rng = rng_from_seed(3);
        let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let cfg = GradCheckConfig {
            tolerance: 1e-5,
            step: 1e-4,
            ..Default::default()
        };
        let report = grad_check("softmax_rows", |tp, v| tp.softmax_rows(v[0]), &[x], cfg).unwrap();
        assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn grad_check_flags_coincident_distance() {
        let a = t(&[1, 2], &[0.5, 0.5]);
        let b = t(&[2, 2], &[0.5, 0.5, 1.0, 0.0]);
        let res = grad_check(
            "pairwise_distance",
            |tp, v| tp.pairwise_distance(v[0], v[1], false),
            &[a, b],
            GradCheckConfig::default(),
        );
        assert!(matches!(res, Err(crate::Error::Singular { .. })));
    }

    #[test]
    fn coincident_distance_gradient_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[0.5, 0.5]));
        let b = tape.leaf(t(&[1, 2], &[0.5, 0.5]));
        let d = tape.pairwise_distance(a, b, false).unwrap();
        let s = tape.sum(d);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.get(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn bmm_transposes_agree_with_explicit_loops() {
        let mut rng = rng_from_seed(4);
        let a = Tensor::randn(vec![2, 4, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![2, 5, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let c = tape.bmm(va, vb, false, true).unwrap();
        let out = tape.value(c);
        assert_eq!(out.shape(), &[2, 4, 5]);
        for bi in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    let want: f64 = (0..3)
                        .map(|l| a.data()[bi * 12 + i * 3 + l] * b.data()[bi * 15 + j * 3 + l])
                        .sum();
                    assert!((out.data()[bi * 20 + i * 5 + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn row_entropy_zero_convention() {
        let mut tape = Tape::new();
        let q = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.5, 0.5]));
        let h = tape.row_entropy(q);
        assert_eq!(tape.value(h).data()[0], 0.0);
        assert!((tape.value(h).data()[1] - std::f64::consts::LN_2).abs() < 1e-15);
        let s = tape.sum(h);
        let g = tape.backward(s).unwrap();
        assert!(g.get(q).unwrap().iter().all(|v| v.is_finite()));
    }
}
