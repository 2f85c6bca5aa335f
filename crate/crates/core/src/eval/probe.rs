use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::tensor::{rng_from_seed, Tensor};

pub const PROBE_RIDGE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub layer: String,
}

/// Standardizes with train-split statistics, fits one-vs-rest ridge least
/// squares with an unpenalized bias in closed form, and scores a seeded 80/20
/// split.
pub fn linear_probe(features: &Tensor, labels: &[usize], seed: u64) -> Result<ProbeResult> {
    let op = "linear_probe";
    if features.ndim() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::shape(
            op,
            format!("features {:?} vs {} labels", features.shape(), labels.len()),
        ));
    }
    if !features.is_finite() {
        return Err(Error::numeric(op, "non-finite features"));
    }
    let (m, d) = (features.shape()[0], features.shape()[1]);
    let k = labels.iter().max().map_or(0, |&l| l + 1);
    let distinct = {
        let mut seen = vec![false; k];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::contract(op, "labels contain a single class"));
    }
    if m < 2 * k {
        return Err(Error::contract(op, format!("{m} samples for {k} classes")));
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let n_train = (m * 4 / 5).clamp(1, m - 1);
    let (train, val) = order.split_at(n_train);

    let x = features.data();
    let mut mean = vec![0.0; d];
    for &i in train {
        for (mu, v) in mean.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *mu += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n_train as f64);
    let mut std = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            std[j] += (x[i * d + j] - mean[j]).powi(2);
        }
    }
    for s in &mut std {
        *s = (*s / n_train as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let design = |rows: &[usize]| {
        DMatrix::from_fn(rows.len(), d + 1, |r, j| {
            if j == d {
                1.0
            } else {
                (x[rows[r] * d + j] - mean[j]) / std[j]
            }
        })
    };
    let xt = design(train);
    let y = DMatrix::from_fn(
        n_train,
        k,
        |r, c| if labels[train[r]] == c { 1.0 } else { 0.0 },
    );
    let mut gram = xt.transpose() * &xt;
    for j in 0..d {
        gram[(j, j)] += PROBE_RIDGE;
    }
    let rhs = xt.transpose() * y;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Singular {
            op,
            msg: "normal equations are not positive definite".into(),
        })?
        .solve(&rhs);

    let accuracy = |rows: &[usize], xm: &DMatrix<f64>| {
        let scores = xm * &w;
        let hits = (0..rows.len())
            .filter(|&r| {
                let row = scores.row(r);
                let best = (0..k)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .expect("k > 0");
                best == labels[rows[r]]
            })
            .count();
        hits as f64 / rows.len() as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(train, &xt),
        val_accuracy: accuracy(val, &design(val)),
        layer: "latent".into(),
    })
}
