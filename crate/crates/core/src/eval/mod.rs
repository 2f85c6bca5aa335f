//! Reconstruction metrics, codebook usage, linear probing and the proxy
//! Fréchet distance.

mod fid;
mod probe;

pub use fid::{gaussian_stats, proxy_fid};
pub use probe::{linear_probe, ProbeResult, PROBE_RIDGE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported PSNR when the images are identical.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

/// Mean squared error and PSNR (peak 1) between two image batches.
pub fn mse_psnr(xhat: &Tensor, x: &Tensor) -> Result<(f64, f64)> {
    if xhat.shape() != x.shape() {
        return Err(Error::shape(
            "mse_psnr",
            format!("{:?} vs {:?}", xhat.shape(), x.shape()),
        ));
    }
    let n = x.numel().max(1) as f64;
    let mse = xhat
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let psnr = if mse == 0.0 {
        PSNR_IDENTICAL
    } else {
        -10.0 * mse.log10()
    };
    Ok((mse, psnr))
}

/// Mean of all rows of all `posteriors` (each `[.., K]`).
pub fn mean_posterior(posteriors: &[Tensor]) -> Result<Vec<f64>> {
    let op = "codebook_perplexity";
    let Some(first) = posteriors.first() else {
        return Err(Error::shape(op, "no posteriors"));
    };
    let k = first.last_dim();
    let mut acc = vec![0.0; k];
    let mut rows = 0usize;
    for p in posteriors {
        if p.last_dim() != k {
            return Err(Error::shape(op, "posteriors disagree on K"));
        }
        for (i, row) in p.rows().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-4 || row.iter().any(|&q| !(q >= 0.0)) {
                return Err(Error::contract(
                    op,
                    format!("row {i} is not a distribution (sum {s})"),
                ));
            }
            for (a, q) in acc.iter_mut().zip(row) {
                *a += q;
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::shape(op, "no posterior rows"));
    }
    Ok(acc.into_iter().map(|a| a / rows as f64).collect())
}

/// `exp(H(mean posterior))`, in `[1, K]`.
pub fn codebook_perplexity(posteriors: &[Tensor]) -> Result<f64> {
    let q = mean_posterior(posteriors)?;
    let h: f64 = -q
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>();
    Ok(h.exp().clamp(1.0, q.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_psnr_examples() {
        let x = Tensor::full(vec![2, 2], 0.3);
        assert_eq!(mse_psnr(&x, &x).unwrap(), (0.0, PSNR_IDENTICAL));
        let y = Tensor::full(vec![2, 2], 0.4);
        let (mse, psnr) = mse_psnr(&y, &x).unwrap();
        assert!((mse - 0.01).abs() < 1e-12);
        assert!((psnr - 20.0).abs() < 1e-9);
        let (mse, psnr) = mse_psnr(&Tensor::full(vec![3], 1.0), &Tensor::zeros(vec![3])).unwrap();
        assert_eq!((mse, psnr), (1.0, 0.0));
        assert!(mse_psnr(&Tensor::zeros(vec![3]), &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn perplexity_examples() {
        let k = 6;
        let u = Tensor::full(vec![4, k], 1.0 / k as f64);
        assert!((codebook_perplexity(&[u]).unwrap() - 6.0).abs() < 1e-12);
        let same = Tensor::from_vec(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(codebook_perplexity(&[same]).unwrap(), 1.0);
        let split = Tensor::from_vec(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((codebook_perplexity(&[split]).unwrap() - 2.0).abs() < 1e-12);
        let bad = Tensor::from_vec(vec![1, 2], vec![0.9, 0.9]);
        assert!(matches!(
            codebook_perplexity(&[bad]),
            Err(Error::Contract { .. })
        ));
    }

    proptest! {
        #[test]
        fn perplexity_invariant_under_relabeling(raw in prop::collection::vec(0.01f64..1.0, 15), shift in 1usize..5) {
            let mut rows = Vec::new();
            for r in raw.chunks(5) {
                let s: f64 = r.iter().sum();
                rows.extend(r.iter().map(|x| x / s));
            }
            let q = Tensor::from_vec(vec![3, 5], rows.clone());
            let permuted: Vec<f64> = rows
                .chunks(5)
                .flat_map(|r| (0..5).map(move |j| r[(j + shift) % 5]))
                .collect();
            let p = Tensor::from_vec(vec![3, 5], permuted);
            let a = codebook_perplexity(&[q]).unwrap();
            let b = codebook_perplexity(&[p]).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((1.0..=5.0).contains(&a));
        }
    }
}
