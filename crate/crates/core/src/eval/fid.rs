use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SHRINKAGE: f64 = 1e-6;

/// Mean and unbiased covariance (plus `1e-6 I`) of the rows of `feats: [M, F]`.
pub fn gaussian_stats(feats: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let op = "proxy_fid";
    if feats.ndim() != 2 || feats.shape()[0] < 2 {
        return Err(Error::shape(
            op,
            format!("need at least 2 rows of M x F, got {:?}", feats.shape()),
        ));
    }
    if !feats.is_finite() {
        return Err(Error::numeric(op, "non-finite features"));
    }
    let (m, f) = (feats.shape()[0], feats.shape()[1]);
    let x = DMatrix::from_row_slice(m, f, feats.data());
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(m, f, |i, j| x[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (m as f64 - 1.0);
    for i in 0..f {
        cov[(i, i)] += SHRINKAGE;
    }
    Ok((mu, cov))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// `Tr (A B)^{1/2}` is evaluated as `Tr (A^{1/2} B A^{1/2})^{1/2}`, which only
/// needs symmetric eigendecompositions.
pub fn proxy_fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape(
            "proxy_fid",
            format!("feature widths differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (mu_a, cov_a) = gaussian_stats(a)?;
    let (mu_b, cov_b) = gaussian_stats(b)?;
    let s = sym_sqrt(&cov_a);
    let inner = &s * &cov_b * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let dm = (mu_a - mu_b).norm_squared();
    let d = dm + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::numeric("proxy_fid", "non-finite distance"));
    }
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_from_seed;

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = rng_from_seed(1);
        let a = Tensor::randn(vec![50, 4], 1.0, &mut rng);
        assert!(proxy_fid(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn mean_shift_adds_squared_norm() {
        let mut rng = rng_from_seed(2);
        let a = Tensor::randn(vec![40, 3], 1.0, &mut rng);
        let delta = [0.5, -1.0, 2.0];
        let b = Tensor::from_vec(
            vec![40, 3],
            a.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + delta[i % 3])
                .collect(),
        );
        let want: f64 = delta.iter().map(|d| d * d).sum();
        assert!((proxy_fid(&a, &b).unwrap() - want).abs() < 1e-4);
    }

    #[test]
    fn isotropic_variances() {
        let mut rng = rng_from_seed(3);
        let a = Tensor::randn(vec![20000, 2], 1.0, &mut rng);
        let b = Tensor::randn(vec![20000, 2], 2.0, &mut rng);
        let d = proxy_fid(&a, &b).unwrap();
        assert!((d - 2.0).abs() < 0.2, "{d}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let mut rng = rng_from_seed(4);
        for _ in 0..10 {
            let a = Tensor::randn(vec![30, 5], 1.0, &mut rng);
            let b = Tensor::randn(vec![25, 5], 1.5, &mut rng);
            let ab = proxy_fid(&a, &b).unwrap();
            let ba = proxy_fid(&b, &a).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() < 1e-6);
        }
    }

    #[test]
    fn rank_deficient_sets_use_shrinkage() {
        let mut rng = rng_from_seed(5);
        let a = Tensor::randn(vec![3, 8], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        assert!(proxy_fid(&a, &b).unwrap().is_finite());
        let bad = Tensor::from_vec(vec![2, 1], vec![f64::NAN, 0.0]);
        assert!(matches!(proxy_fid(&bad, &bad), Err(Error::Numeric { .. })));
    }
}
