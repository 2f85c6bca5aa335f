//! Loss terms: pixel reconstruction, the codebook-usage KL term, the Gaussian
//! KL baseline, and representation alignment with latent replication.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::Binding;
use crate::tensor::Tensor;

/// Commitment weight for the hard-VQ baseline.
pub const COMMIT_BETA: f64 = 0.25;

const STOCHASTIC_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Perceptual weight. Carried for completeness, no perceptual term exists.
    pub perceptual: f64,
    /// Adversarial weight. Carried for completeness, no adversarial term exists.
    pub adversarial: f64,
    pub align: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            perceptual: 1.0,
            adversarial: 0.2,
            align: 0.1,
            kl: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("perceptual", self.perceptual),
            ("adversarial", self.adversarial),
            ("align", self.align),
            ("kl", self.kl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    "LossWeights",
                    format!("{name} weight must be finite and >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub align: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.6} (recon {:.6}, kl {:.6}, align {:.6}, codebook {:.6}, commit {:.6})",
            self.total, self.recon, self.kl, self.align, self.codebook, self.commit
        )
    }
}

/// Tape handles of the individual loss terms. Absent terms contribute zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub recon: Var,
    pub kl: Option<Var>,
    pub align: Option<Var>,
    pub codebook: Option<Var>,
    pub commit: Option<Var>,
}

pub fn recon_loss_var(tape: &mut Tape, xhat: Var, x: Var) -> Result<Var> {
    if tape.shape(xhat) != tape.shape(x) {
        return Err(Error::shape(
            "recon_loss",
            format!("{:?} vs {:?}", tape.shape(xhat), tape.shape(x)),
        ));
    }
    let d = tape.sub(xhat, x)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq))
}

/// `mean_rows H(q_row) - H(mean_rows q)` pooled over every leading axis.
pub fn softvq_kl_var(tape: &mut Tape, probs: Var) -> Result<Var> {
    let q = tape.value(probs);
    if q.numel() == 0 || q.ndim() == 0 {
        return Err(Error::shape("softvq_kl", "posterior has no rows"));
    }
    for (i, row) in q.rows().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&p| p < 0.0) {
            return Err(Error::contract(
                "softvq_kl",
                format!("row {i} is not a distribution (sum {s})"),
            ));
        }
    }
    let h = tape.row_entropy(probs);
    let mean_h = tape.mean(h);
    let qbar = tape.mean_rows(probs);
    let h_bar = tape.row_entropy(qbar);
    tape.sub(mean_h, h_bar)
}

pub fn gaussian_kl_var(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    if tape.shape(mu) != tape.shape(logvar) {
        return Err(Error::shape(
            "gaussian_kl",
            format!("{:?} vs {:?}", tape.shape(mu), tape.shape(logvar)),
        ));
    }
    // -0.5 (1 + lv - mu^2 - e^lv)
    let mu2 = tape.square(mu)?;
    let var = tape.exp(logvar);
    let t = tape.sub(logvar, mu2)?;
    let t = tape.sub(t, var)?;
    let t = tape.add_scalar(t, 1.0);
    let m = tape.mean(t);
    Ok(tape.scale(m, -0.5))
}

fn replicate_index(b: usize, l: usize, n: usize, d: usize) -> Result<Vec<usize>> {
    if l == 0 || n % l != 0 {
        return Err(Error::config(
            "replicate_latents",
            format!("L={l} does not divide N={n}"),
        ));
    }
    let r = n / l;
    let mut index = Vec::with_capacity(b * n * d);
    for bi in 0..b {
        for pos in 0..n {
            let src = (bi * l + pos / r) * d;
            index.extend(src..src + d);
        }
    }
    Ok(index)
}

/// `[B, L, D]` to `[B, N, D]`, token `l` repeated at positions `[l N/L, (l+1) N/L)`.
pub fn replicate_latents_var(tape: &mut Tape, z: Var, n: usize) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(
            "replicate_latents",
            format!("expected B x L x D, got {s:?}"),
        ));
    }
    let index = replicate_index(s[0], s[1], n, s[2])?;
    tape.gather(z, index, vec![s[0], n, s[2]])
}

/// Negative mean token-wise cosine between projected features and targets.
pub fn alignment_var(tape: &mut Tape, projected: Var, targets: Var) -> Result<Var> {
    let cos = tape.cosine_rows(projected, targets)?;
    let m = tape.mean(cos);
    Ok(tape.neg(m))
}

/// Alignment loss of latents `z: [B, L, D]` against targets `[B, N, F]`.
///
/// The projector acts token-wise, so it is applied to the L latents before
/// replication; this is the same function as projecting the replicated
/// sequence, at L/N of the cost.
pub fn align_loss_var(
    tape: &mut Tape,
    binding: &Binding,
    projector: &Mlp,
    z: Var,
    targets: &Tensor,
) -> Result<Var> {
    let ts = targets.shape();
    if ts.len() != 3 {
        return Err(Error::shape(
            "align_loss",
            format!("targets must be B x N x F, got {ts:?}"),
        ));
    }
    if !targets.is_finite() {
        return Err(Error::numeric("align_loss", "non-finite alignment targets"));
    }
    let p = projector.forward(tape, binding, z)?;
    let rep = replicate_latents_var(tape, p, ts[1])?;
    let t = tape.constant(targets.clone());
    alignment_var(tape, rep, t)
}

fn check_finite(tape: &Tape, name: &str, v: Option<Var>) -> Result<f64> {
    let Some(v) = v else { return Ok(0.0) };
    let x = tape.value(v).item();
    if x.is_nan() || x.is_infinite() {
        return Err(Error::numeric("total_loss", format!("{name} loss is {x}")));
    }
    Ok(x)
}

/// `recon + align_w align + kl_w kl + codebook + beta commit` on the tape.
pub fn total_loss_var(
    tape: &mut Tape,
    terms: LossTerms,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let mut b = LossBreakdown {
        recon: check_finite(tape, "recon", Some(terms.recon))?,
        kl: check_finite(tape, "kl", terms.kl)?,
        align: check_finite(tape, "align", terms.align)?,
        codebook: check_finite(tape, "codebook", terms.codebook)?,
        commit: check_finite(tape, "commit", terms.commit)?,
        total: 0.0,
    };
    let mut total = terms.recon;
    for (term, w) in [
        (terms.align, weights.align),
        (terms.kl, weights.kl),
        (terms.codebook, 1.0),
        (terms.commit, COMMIT_BETA),
    ] {
        if let Some(t) = term {
            if w != 0.0 {
                let scaled = tape.scale(t, w);
                total = tape.add(total, scaled)?;
            }
        }
    }
    b.total = tape.value(total).item();
    Ok((total, b))
}

pub fn recon_loss(xhat: &Tensor, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(xhat.clone());
    let b = tape.constant(x.clone());
    let l = recon_loss_var(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

/// Eager KL term for posteriors `[.., K]`.
pub fn softvq_kl(probs: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(probs.clone());
    let l = softvq_kl_var(&mut tape, q)?;
    Ok(tape.value(l).item())
}

pub fn gaussian_kl(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(mu.clone());
    let lv = tape.constant(logvar.clone());
    let l = gaussian_kl_var(&mut tape, m, lv)?;
    Ok(tape.value(l).item())
}

pub fn replicate_latents(z: &Tensor, n: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let r = replicate_latents_var(&mut tape, v, n)?;
    Ok(tape.value(r).clone())
}

/// Eager alignment loss given already projected features `[B, N, F]`.
pub fn alignment(projected: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(projected.clone());
    let t = tape.constant(targets.clone());
    let l = alignment_var(&mut tape, p, t)?;
    Ok(tape.value(l).item())
}

/// Scalar loss components as inputs to [`total_loss`].
#[derive(Clone, Copy, Debug, Default)]
pub struct LossValues {
    pub recon: f64,
    pub kl: Option<f64>,
    pub align: Option<f64>,
    pub codebook: Option<f64>,
    pub commit: Option<f64>,
}

pub fn total_loss(values: LossValues, weights: &LossWeights) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mut var = |x: Option<f64>| x.map(|x| tape.constant(Tensor::scalar(x)));
    let terms = LossTerms {
        recon: var(Some(values.recon)).expect("recon"),
        kl: var(values.kl),
        align: var(values.align),
        codebook: var(values.codebook),
        commit: var(values.commit),
    };
    Ok(total_loss_var(&mut tape, terms, weights)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};
    use crate::tensor::rng_from_seed;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn recon_examples() {
        let x = t(&[2], &[0.0, 1.0]);
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(recon_loss(&t(&[2], &[1.0, 2.0]), &x).unwrap(), 1.0);
        assert_eq!(recon_loss(&t(&[2], &[0.5, 0.5]), &x).unwrap(), 0.25);
        assert!(matches!(
            recon_loss(&t(&[3], &[0.0; 3]), &x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn softvq_kl_examples() {
        let k = 5;
        let uniform = Tensor::full(vec![3, k], 1.0 / k as f64);
        assert!(softvq_kl(&uniform).unwrap().abs() < 1e-15);

        let two = t(&[2, 4], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((softvq_kl(&two).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);

        let same = t(&[2, 4], &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(softvq_kl(&same).unwrap(), 0.0);

        let bad = t(&[1, 2], &[0.6, 0.6]);
        assert!(matches!(softvq_kl(&bad), Err(Error::Contract { .. })));
    }

    #[test]
    fn gaussian_kl_examples() {
        let z = t(&[2], &[0.0, 0.0]);
        assert_eq!(gaussian_kl(&z, &z).unwrap(), 0.0);
        assert_eq!(
            gaussian_kl(&t(&[1], &[1.0]), &t(&[1], &[0.0])).unwrap(),
            0.5
        );
        let v = gaussian_kl(&t(&[1], &[0.0]), &t(&[1], &[1.0])).unwrap();
        assert!((v - (std::f64::consts::E - 2.0) / 2.0).abs() < 1e-12);
        assert!((v - 0.3591).abs() < 1e-4);
    }

    #[test]
    fn replicate_examples() {
        let z = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = replicate_latents(&z, 4).unwrap();
        assert_eq!(r.shape(), &[1, 4, 2]);
        assert_eq!(r.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        assert_eq!(replicate_latents(&z, 2).unwrap(), z);
        let z3 = Tensor::zeros(vec![1, 3, 2]);
        assert!(matches!(
            replicate_latents(&z3, 4),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn alignment_examples() {
        let y = t(&[1, 2, 2], &[1.0, 0.0, 0.3, 0.4]);
        assert!((alignment(&y, &y).unwrap() + 1.0).abs() < 1e-12);
        let orth = t(&[1, 2, 2], &[0.0, 2.0, -0.4, 0.3]);
        assert!(alignment(&orth, &y).unwrap().abs() < 1e-12);
        let anti = t(&[1, 2, 2], &[-1.0, 0.0, -0.3, -0.4]);
        assert!((alignment(&anti, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let zero = total_loss(
            LossValues {
                recon: 0.0,
                kl: Some(0.0),
                align: Some(0.0),
                ..Default::default()
            },
            &w,
        )
        .unwrap();
        assert_eq!(zero.total, 0.0);

        let b = total_loss(
            LossValues {
                recon: 1.0,
                kl: Some(0.0),
                align: Some(-1.0),
                ..Default::default()
            },
            &w,
        )
        .unwrap();
        assert!((b.total - 0.9).abs() < 1e-15);

        let off = LossWeights {
            align: 0.0,
            kl: 0.0,
            ..w
        };
        let b = total_loss(
            LossValues {
                recon: 0.37,
                kl: Some(-0.5),
                align: Some(-0.8),
                ..Default::default()
            },
            &off,
        )
        .unwrap();
        assert_eq!(b.total, 0.37);

        let hard = total_loss(
            LossValues {
                recon: 1.0,
                codebook: Some(0.4),
                commit: Some(0.4),
                ..Default::default()
            },
            &w,
        )
        .unwrap();
        assert!((hard.total - 1.5).abs() < 1e-15);
    }

    #[test]
    fn total_rejects_nan_component_by_name() {
        let err = total_loss(
            LossValues {
                recon: 1.0,
                kl: Some(f64::NAN),
                ..Default::default()
            },
            &LossWeights::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert!(err.to_string().contains("kl"));
    }

    #[test]
    fn loss_gradients_pass_grad_check() {
        let mut rng = rng_from_seed(11);
        let cfg = GradCheckConfig::default();
        let a = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let r = grad_check(
            "recon",
            |tp, v| recon_loss_var(tp, v[0], v[1]),
            &[a.clone(), b.clone()],
            cfg,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = grad_check(
            "gaussian_kl",
            |tp, v| gaussian_kl_var(tp, v[0], v[1]),
            &[a.clone(), b.clone()],
            cfg,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = grad_check(
            "alignment",
            |tp, v| alignment_var(tp, v[0], v[1]),
            &[a, b],
            cfg,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        // the KL term through a softmax so perturbed inputs stay stochastic
        let logits = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let r = grad_check(
            "softvq_kl",
            |tp, v| {
                let q = tp.softmax_rows(v[0])?;
                softvq_kl_var(tp, q)
            },
            &[logits],
            cfg,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    fn stochastic_rows(rows: usize, k: usize, raw: &[f64]) -> Tensor {
        let mut data = Vec::with_capacity(rows * k);
        for r in raw.chunks(k) {
            let s: f64 = r.iter().sum();
            data.extend(r.iter().map(|x| x / s));
        }
        Tensor::from_vec(vec![rows, k], data)
    }

    proptest! {
        #[test]
        fn kl_bounds_and_row_permutation(raw in prop::collection::vec(0.01f64..1.0, 24), shift in 0usize..6) {
            let q = stochastic_rows(6, 4, &raw);
            let kl = softvq_kl(&q).unwrap();
            prop_assert!(kl <= 1e-12);
            prop_assert!(kl >= -(4f64).ln() - 1e-12);
            let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
            let kl2 = softvq_kl(&q.select_leading(&perm)).unwrap();
            prop_assert!((kl - kl2).abs() < 1e-12);
        }

        #[test]
        fn identical_rows_have_zero_kl(raw in prop::collection::vec(0.01f64..1.0, 4)) {
            let row = stochastic_rows(1, 4, &raw);
            let mut data = Vec::new();
            for _ in 0..3 { data.extend_from_slice(row.data()); }
            let kl = softvq_kl(&Tensor::from_vec(vec![3, 4], data)).unwrap();
            prop_assert!(kl.abs() < 1e-12);
        }

        #[test]
        fn gaussian_kl_nonnegative(mu in prop::collection::vec(-3f64..3.0, 6), lv in prop::collection::vec(-3f64..3.0, 6)) {
            let v = gaussian_kl(&Tensor::from_vec(vec![6], mu), &Tensor::from_vec(vec![6], lv)).unwrap();
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn alignment_bounded(p in prop::collection::vec(-2f64..2.0, 12), y in prop::collection::vec(-2f64..2.0, 12)) {
            let v = alignment(&Tensor::from_vec(vec![1, 4, 3], p), &Tensor::from_vec(vec![1, 4, 3], y)).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
        }

        #[test]
        fn replicate_then_pool_recovers_input(z in prop::collection::vec(-5f64..5.0, 2 * 4 * 3)) {
            let zt = Tensor::from_vec(vec![2, 4, 3], z);
            let r = replicate_latents(&zt, 16).unwrap();
            let mut pooled = vec![0.0; 2 * 4 * 3];
            for b in 0..2 {
                for n in 0..16 {
                    for d in 0..3 {
                        pooled[(b * 4 + n / 4) * 3 + d] += r.data()[(b * 16 + n) * 3 + d] / 4.0;
                    }
                }
            }
            for (a, b) in pooled.iter().zip(zt.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
