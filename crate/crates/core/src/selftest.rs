//! Worked examples for every module, runnable as one table of assertions.

use crate::autodiff::{grad_check, pairwise_distance, softmax_rows, GradCheckConfig};
use crate::datagen::{gen_shapes, Oracle};
use crate::error::Result;
use crate::eval::{codebook_perplexity, linear_probe, mse_psnr, proxy_fid};
use crate::flow::{euler_sample, interpolate, ConstantVelocity};
use crate::objectives::{
    alignment, gaussian_kl, recon_loss, replicate_latents, softvq_kl, total_loss, LossValues,
    LossWeights,
};
use crate::params::ParamStore;
use crate::quantizers::{
    gaussian_sample, gmmvq_posterior, hardvq_quantize, pq_quantize, rq_quantize, softvq_posterior,
    softvq_quantize, Codebook,
};
use crate::tensor::{rng_from_seed, Tensor};
use crate::trainer::{adamw_update, OptimState, Schedule};

type Check = fn() -> Result<std::result::Result<(), String>>;

fn close(name: &str, got: f64, want: f64, tol: f64) -> std::result::Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, expected {want} ± {tol}"))
    }
}

fn all(results: Vec<std::result::Result<(), String>>) -> std::result::Result<(), String> {
    results.into_iter().collect()
}

fn cb(vals: &[f64]) -> Codebook {
    Codebook::new(Tensor::from_vec(vec![vals.len(), 1], vals.to_vec())).expect("valid codebook")
}

fn z1(v: f64) -> Tensor {
    Tensor::from_vec(vec![1, 1, 1], vec![v])
}

fn distances() -> Result<std::result::Result<(), String>> {
    let a = Tensor::from_vec(vec![1, 1], vec![0.0]);
    let b = Tensor::from_vec(vec![2, 1], vec![0.0, 1.0]);
    let d1 = pairwise_distance(&a, &b, false)?;
    let a = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]);
    let b = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]);
    let d2 = pairwise_distance(&a, &b, false)?;
    Ok(all(vec![
        close("d([0],[1])", d1.data()[1], 1.0, 1e-12),
        close("d([1,0],[0,0])", d2.data()[0], 1.0, 1e-12),
        close("d([1,0],[1,1])", d2.data()[1], 1.0, 1e-12),
    ]))
}

fn softmax() -> Result<std::result::Result<(), String>> {
    let s = softmax_rows(&Tensor::from_vec(vec![1, 2], vec![0.0, -1.0]))?;
    let big = softmax_rows(&Tensor::from_vec(vec![1, 2], vec![1000.0, 0.0]))?;
    Ok(all(vec![
        close("softmax(0,-1)", s.data()[0], 0.7311, 1e-4),
        close("softmax(1000,0)", big.data()[0], 1.0, 1e-12),
    ]))
}

fn gradcheck_examples() -> Result<std::result::Result<(), String>> {
    let cfg = GradCheckConfig::default();
    let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]);
    let r = grad_check(
        "sum_sq",
        |tp, v| {
            let s = tp.square(v[0])?;
            Ok(tp.sum(s))
        },
        &[x],
        cfg,
    )?;
    let y = Tensor::from_vec(vec![2, 3], vec![0.1, -0.4, 0.3, 1.0, 0.2, -0.7]);
    let soft = grad_check("softmax_rows", |tp, v| tp.softmax_rows(v[0]), &[y], cfg)?;
    let a = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]);
    let singular = grad_check(
        "distance",
        |tp, v| tp.pairwise_distance(v[0], v[1], false),
        &[a.clone(), a],
        cfg,
    );
    Ok(all(vec![
        close("sum of squares", r.max_rel_error, 0.0, 1e-7),
        close("softmax", soft.max_rel_error, 0.0, 1e-5),
        if singular.is_err() {
            Ok(())
        } else {
            Err("coincident distance was not flagged".into())
        },
    ]))
}

fn softvq_examples() -> Result<std::result::Result<(), String>> {
    let c = cb(&[0.0, 1.0]);
    let q = softvq_posterior(&z1(0.0), &c, 1.0)?;
    let half = softvq_posterior(&z1(0.5), &c, 0.3)?;
    let sharp = softvq_posterior(&z1(0.0), &c, 0.07)?;
    let z = softvq_quantize(&q, &c)?;
    Ok(all(vec![
        close("q0 tau=1", q.probs.data()[0], 0.7311, 1e-4),
        close("equidistant", half.probs.data()[0], 0.5, 1e-15),
        close("tau=0.07", sharp.probs.data()[1], 6.2e-7, 1e-7),
        close("latent", z.data()[0], 0.2689, 1e-4),
    ]))
}

fn hardvq_examples() -> Result<std::result::Result<(), String>> {
    let c = cb(&[0.0, 1.0]);
    let (_, i4, _, _) = hardvq_quantize(&z1(0.4), &c)?;
    let (_, i5, _, _) = hardvq_quantize(&z1(0.5), &c)?;
    let (z7, i7, _, commit) = hardvq_quantize(&z1(0.7), &c)?;
    Ok(all(vec![
        close("index(0.4)", i4[0] as f64, 0.0, 0.0),
        close("tie to lowest", i5[0] as f64, 0.0, 0.0),
        close("index(0.7)", i7[0] as f64, 1.0, 0.0),
        close("z(0.7)", z7.data()[0], 1.0, 0.0),
        close("commit", commit, 0.09, 1e-12),
    ]))
}

fn gmmvq_examples() -> Result<std::result::Result<(), String>> {
    let c = cb(&[0.0, 1.0]);
    let q = gmmvq_posterior(&z1(0.0), &c, &Tensor::from_vec(vec![1, 1], vec![2.0]))?;
    let s = softvq_posterior(&z1(0.3), &c, 0.5)?;
    let g = gmmvq_posterior(&z1(0.3), &c, &Tensor::from_vec(vec![1, 1], vec![2.0]))?;
    Ok(all(vec![
        close("omega=2", q.probs.data()[0], 0.8808, 1e-4),
        close("omega=1/tau", g.probs.max_abs_diff(&s.probs), 0.0, 0.0),
    ]))
}

fn pq_rq_examples() -> Result<std::result::Result<(), String>> {
    let c = cb(&[0.0, 1.0]);
    let (z, _) = pq_quantize(
        &Tensor::from_vec(vec![1, 1, 2], vec![0.0, 1.0]),
        &[c.clone(), c.clone()],
        0.07,
    )?;
    let bad = pq_quantize(
        &Tensor::from_vec(vec![1, 1, 3], vec![0.0; 3]),
        &[c.clone(), c],
        0.07,
    );
    let c2 = cb(&[0.0, 0.6]);
    let (zr, _, r) = rq_quantize(&z1(1.0), &c2, 2, 1e-6)?;
    Ok(all(vec![
        close("pq z0", z.data()[0], 6.2e-7, 1e-7),
        close("pq z1", z.data()[1], 1.0 - 6.2e-7, 1e-7),
        if bad.is_err() {
            Ok(())
        } else {
            Err("D=3, G=2 accepted".into())
        },
        close("rq latent", zr.data()[0], 1.2, 1e-6),
        close("rq residual", r.data()[0], -0.2, 1e-6),
    ]))
}

fn gaussian_examples() -> Result<std::result::Result<(), String>> {
    let z = gaussian_sample(
        &Tensor::from_vec(vec![1], vec![2.0]),
        &Tensor::from_vec(vec![1], vec![(0.25f64).ln()]),
        &Tensor::from_vec(vec![1], vec![-1.0]),
    )?;
    let m1 = gaussian_kl(
        &Tensor::from_vec(vec![1], vec![1.0]),
        &Tensor::zeros(vec![1]),
    )?;
    let e = gaussian_kl(
        &Tensor::zeros(vec![1]),
        &Tensor::from_vec(vec![1], vec![1.0]),
    )?;
    Ok(all(vec![
        close("sample", z.data()[0], 1.5, 1e-12),
        close("kl mu=1", m1, 0.5, 1e-12),
        close("kl var=e", e, (std::f64::consts::E - 2.0) / 2.0, 1e-4),
    ]))
}

fn loss_examples() -> Result<std::result::Result<(), String>> {
    let x = Tensor::from_vec(vec![2], vec![0.0, 1.0]);
    let xh = Tensor::from_vec(vec![2], vec![0.5, 0.5]);
    let mut two = Tensor::zeros(vec![2, 1, 4]);
    two.data_mut()[1] = 1.0;
    two.data_mut()[6] = 1.0;
    let uniform = Tensor::full(vec![3, 4], 0.25);
    let rep = replicate_latents(&Tensor::from_vec(vec![1, 2, 1], vec![1.0, 2.0]), 4)?;
    let t = Tensor::from_vec(vec![1, 1, 2], vec![1.0, 0.0]);
    let neg = Tensor::from_vec(vec![1, 1, 2], vec![-1.0, 0.0]);
    let total = total_loss(
        LossValues {
            recon: 1.0,
            align: Some(-1.0),
            kl: Some(0.0),
            ..LossValues::default()
        },
        &LossWeights::default(),
    )?;
    Ok(all(vec![
        close("recon", recon_loss(&xh, &x)?, 0.25, 1e-15),
        close(
            "kl two one-hots",
            softvq_kl(&two)?,
            -std::f64::consts::LN_2,
            1e-6,
        ),
        close("kl uniform", softvq_kl(&uniform)?, 0.0, 1e-12),
        if rep.data() == [1.0, 1.0, 2.0, 2.0] {
            Ok(())
        } else {
            Err(format!("replicate: {:?}", rep.data()))
        },
        close("align equal", alignment(&t, &t)?, -1.0, 1e-12),
        close("align opposite", alignment(&neg, &t)?, 1.0, 1e-12),
        close("total", total.total, 0.9, 1e-12),
    ]))
}

fn datagen_examples() -> Result<std::result::Result<(), String>> {
    let a = gen_shapes(3, 100, 4, 16)?;
    let b = gen_shapes(3, 100, 4, 16)?;
    let (lo, hi) = a
        .images
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let oracle = Oracle::new(4, 4, 1, 16, 0.25, 1)?;
    let e = oracle.class_embeddings.data();
    let dot: f64 = (0..16).map(|i| e[i] * e[16 + i]).sum();
    Ok(all(vec![
        if a == b {
            Ok(())
        } else {
            Err("same seed gave different datasets".into())
        },
        if a.class_counts() == vec![25; 4] {
            Ok(())
        } else {
            Err(format!("class counts {:?}", a.class_counts()))
        },
        close("min pixel", lo.min(0.0), 0.0, 0.0),
        close("max pixel", hi.max(1.0), 1.0, 0.0),
        close("orthogonal classes", dot, 0.0, 1e-10),
    ]))
}

fn optim_examples() -> Result<std::result::Result<(), String>> {
    let mut params = ParamStore::new();
    let id = params.add("w", Tensor::from_vec(vec![1], vec![1.0]));
    let mut st = OptimState::new(&params, 0.9, 0.95, 1e-8, 0.1);
    adamw_update(&mut params, &[Tensor::zeros(vec![1])], &mut st, 1.0)?;
    let decayed = params.get(id).data()[0];
    let mut params = ParamStore::new();
    let id = params.add("w", Tensor::from_vec(vec![1], vec![0.0]));
    let mut st = OptimState::new(&params, 0.9, 0.95, 1e-8, 0.0);
    adamw_update(
        &mut params,
        &[Tensor::from_vec(vec![1], vec![1.0])],
        &mut st,
        1e-4,
    )?;
    let s = Schedule::new(1.0, 0.0, 10, 110)?;
    Ok(all(vec![
        close("pure decay", decayed, 0.9, 1e-15),
        close("first step", params.get(id).data()[0], -1e-4, 1e-9),
        close("lr(0)", s.lr_at(0)?, 0.0, 0.0),
        close("lr(warmup)", s.lr_at(10)?, 1.0, 1e-15),
        close("lr(mid)", s.lr_at(60)?, 0.5, 1e-12),
    ]))
}

fn eval_examples() -> Result<std::result::Result<(), String>> {
    let x = Tensor::full(vec![4], 0.5);
    let off = Tensor::full(vec![4], 0.6);
    let (mse, psnr) = mse_psnr(&off, &x)?;
    let mut split = Tensor::zeros(vec![2, 1, 3]);
    split.data_mut()[0] = 1.0;
    split.data_mut()[4] = 1.0;
    let mut rng = rng_from_seed(5);
    let a = Tensor::randn(vec![200, 3], 1.0, &mut rng);
    let shifted = Tensor::from_vec(vec![200, 3], a.data().iter().map(|v| v + 1.0).collect());
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let mut onehot = Tensor::zeros(vec![40, 4]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * 4 + l] = 1.0;
    }
    Ok(all(vec![
        close("mse", mse, 0.01, 1e-12),
        close("psnr", psnr, 20.0, 1e-9),
        close("perplexity 2", codebook_perplexity(&[split])?, 2.0, 1e-12),
        close("fid self", proxy_fid(&a, &a)?, 0.0, 1e-6),
        close("fid shift", proxy_fid(&shifted, &a)?, 3.0, 1e-4),
        close(
            "probe one-hot",
            linear_probe(&onehot, &labels, 0)?.val_accuracy,
            1.0,
            0.0,
        ),
    ]))
}

fn flow_examples() -> Result<std::result::Result<(), String>> {
    let z = Tensor::zeros(vec![1]);
    let e = Tensor::full(vec![1], 1.0);
    let field = ConstantVelocity(vec![0.3, -0.2]);
    let one = euler_sample(&field, 1, &[0], 4)?;
    let many = euler_sample(&field, 7, &[0], 4)?;
    let start = euler_sample(&ConstantVelocity(vec![0.0, 0.0]), 1, &[0], 4)?;
    Ok(all(vec![
        close("interpolate", interpolate(&z, &e, 0.5)?.data()[0], 0.5, 0.0),
        close(
            "constant field x",
            one.data()[0],
            start.data()[0] - 0.3,
            1e-12,
        ),
        close("any step count", one.max_abs_diff(&many), 0.0, 1e-12),
    ]))
}

/// Every worked example, by module.
pub fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("autodiff: pairwise distances", distances),
        ("autodiff: stable softmax", softmax),
        ("autodiff: finite-difference harness", gradcheck_examples),
        ("quantizers: softvq", softvq_examples),
        ("quantizers: hard vq", hardvq_examples),
        ("quantizers: gmmvq", gmmvq_examples),
        ("quantizers: product and residual", pq_rq_examples),
        ("quantizers: gaussian", gaussian_examples),
        ("objectives: losses", loss_examples),
        ("datagen: shapes and oracle", datagen_examples),
        ("trainer: optimizer and schedule", optim_examples),
        ("eval: metrics", eval_examples),
        ("flow: interpolant and sampler", flow_examples),
    ]
}

/// Runs every check; returns `(name, failure message)` for each one.
pub fn run() -> Vec<(&'static str, Option<String>)> {
    checks()
        .into_iter()
        .map(|(name, f)| {
            let outcome = match f() {
                Ok(Ok(())) => None,
                Ok(Err(msg)) => Some(msg),
                Err(e) => Some(format!("{}: {e}", e.code())),
            };
            (name, outcome)
        })
        .collect()
}
