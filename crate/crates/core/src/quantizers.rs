//! Posterior and quantization mechanisms: soft (temperature) VQ, data-dependent
//! temperature (GMM) VQ, hard VQ with a straight-through estimator, Gaussian
//! reparameterization, and the product / residual combinators over soft VQ.
//!
//! The `*_var` functions record onto a [`Tape`] and are what training uses; the
//! plain functions are eager conveniences over [`Tensor`]s.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{SeededRng, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantizerKind {
    SoftVq,
    GmmVq,
    HardVq,
    GaussianKl,
    IdentityAe,
}

impl QuantizerKind {
    pub const ALL: [QuantizerKind; 5] = [
        QuantizerKind::SoftVq,
        QuantizerKind::GmmVq,
        QuantizerKind::HardVq,
        QuantizerKind::GaussianKl,
        QuantizerKind::IdentityAe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuantizerKind::SoftVq => "softvq",
            QuantizerKind::GmmVq => "gmmvq",
            QuantizerKind::HardVq => "hardvq",
            QuantizerKind::GaussianKl => "gaussian-kl",
            QuantizerKind::IdentityAe => "identity-ae",
        }
    }

    pub fn uses_codebook(self) -> bool {
        matches!(
            self,
            QuantizerKind::SoftVq | QuantizerKind::GmmVq | QuantizerKind::HardVq
        )
    }
}

impl fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        QuantizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown quantizer kind `{}` (expected one of softvq, gmmvq, hardvq, gaussian-kl, identity-ae)",
                    s
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerSpec {
    pub kind: QuantizerKind,
    /// Vocabulary size K.
    pub codebook_size: usize,
    /// Product-quantization group count G.
    pub groups: usize,
    /// Residual-quantization depth.
    pub layers: usize,
    pub temperature: f64,
    /// Separate codebook per residual layer instead of one shared table.
    pub per_layer_codebooks: bool,
    /// Use squared Euclidean distances in the posterior logits.
    pub squared_distance: bool,
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        QuantizerSpec {
            kind: QuantizerKind::SoftVq,
            codebook_size: 64,
            groups: 1,
            layers: 1,
            temperature: DEFAULT_TEMPERATURE,
            per_layer_codebooks: false,
            squared_distance: false,
        }
    }
}

impl QuantizerSpec {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.kind.uses_codebook() && self.codebook_size < 2 {
            return Err(Error::config(
                "QuantizerSpec",
                "codebook size K must be >= 2",
            ));
        }
        if self.groups == 0 || latent_dim % self.groups != 0 {
            return Err(Error::config(
                "QuantizerSpec",
                format!("groups G={} must divide D={}", self.groups, latent_dim),
            ));
        }
        if self.layers < 1 {
            return Err(Error::config("QuantizerSpec", "layers must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(
                "QuantizerSpec",
                format!("temperature must be > 0, got {}", self.temperature),
            ));
        }
        if self.kind == QuantizerKind::HardVq && (self.groups != 1 || self.layers != 1) {
            return Err(Error::config(
                "QuantizerSpec",
                "hard VQ baseline supports groups=1 and layers=1 only",
            ));
        }
        if self.kind == QuantizerKind::GmmVq && (self.groups != 1 || self.layers != 1) {
            return Err(Error::config(
                "QuantizerSpec",
                "GMMVQ supports groups=1 and layers=1 only",
            ));
        }
        Ok(())
    }
}

/// K x D table of learnable codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.ndim() != 2 {
            return Err(Error::shape(
                "Codebook::new",
                format!("expected K x D, got {:?}", entries.shape()),
            ));
        }
        if entries.shape()[0] < 2 {
            return Err(Error::config("Codebook::new", "K must be >= 2"));
        }
        if !entries.is_finite() {
            return Err(Error::numeric("Codebook::new", "non-finite codeword"));
        }
        Ok(Codebook { entries })
    }

    /// I.i.d. uniform on `[-1/K, 1/K]`, scaled by `1/sqrt(D)`.
    pub fn init(k: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        let bound = 1.0 / k as f64;
        let scale = 1.0 / (d as f64).sqrt();
        let mut t = Tensor::uniform(vec![k, d], -bound, bound, rng);
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
        Self::new(t)
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }
}

/// Row-stochastic B x L x K assignment over codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub probs: Tensor,
    pub temperature: f64,
}

impl Posterior {
    pub fn num_codes(&self) -> usize {
        self.probs.last_dim()
    }

    /// Largest deviation of any row sum from 1, or `None` if some entry is negative.
    pub fn max_row_deviation(&self) -> Option<f64> {
        let mut worst: f64 = 0.0;
        for row in self.probs.rows() {
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return None;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        Some(worst)
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .rows()
            .map(|row| {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn check_tokens(op: &'static str, tape: &Tape, zhat: Var, d: usize) -> Result<(usize, usize)> {
    let s = tape.shape(zhat);
    if s.len() != 3 || s[2] != d {
        return Err(Error::shape(
            op,
            format!("expected B x L x {} latents, got {:?}", d, s),
        ));
    }
    Ok((s[0], s[1]))
}

/// Distance matrix between every token of `zhat: [B, L, D]` and `codebook: [K, D]`,
/// shaped `[B, L, K]`.
fn token_distances(tape: &mut Tape, zhat: Var, codebook: Var, squared: bool) -> Result<Var> {
    let d = tape.shape(codebook)[1];
    let k = tape.shape(codebook)[0];
    let (b, l) = check_tokens("token_distances", tape, zhat, d)?;
    let flat = tape.reshape(zhat, vec![b * l, d])?;
    let dist = tape.pairwise_distance(flat, codebook, squared)?;
    tape.reshape(dist, vec![b, l, k])
}

/// `softmax(-||zhat - C|| / tau)` over codewords, per token.
pub fn softvq_posterior_var(
    tape: &mut Tape,
    zhat: Var,
    codebook: Var,
    tau: f64,
    squared: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(
            "softvq_posterior",
            format!("temperature must be > 0, got {}", tau),
        ));
    }
    let dist = token_distances(tape, zhat, codebook, squared)?;
    let logits = tape.scale(dist, -(1.0 / tau));
    tape.softmax_rows(logits)
}

/// `z = q C`: convex combination of codewords.
pub fn softvq_quantize_var(tape: &mut Tape, probs: Var, codebook: Var) -> Result<Var> {
    let k = tape.shape(codebook)[0];
    if tape.value(probs).last_dim() != k {
        return Err(Error::shape(
            "softvq_quantize",
            format!(
                "posterior has {} codes, codebook has {}",
                tape.value(probs).last_dim(),
                k
            ),
        ));
    }
    tape.matmul(probs, codebook)
}

/// `softmax(-omega * ||zhat - C||)` with a per-token positive weight `omega: [B, L]`.
pub fn gmmvq_posterior_var(
    tape: &mut Tape,
    zhat: Var,
    codebook: Var,
    omega: Var,
    squared: bool,
) -> Result<Var> {
    if tape.value(omega).data().iter().any(|&w| !(w > 0.0)) {
        return Err(Error::config(
            "gmmvq_posterior",
            "omega must be strictly positive",
        ));
    }
    let dist = token_distances(tape, zhat, codebook, squared)?;
    let weighted = tape.scale_rows(dist, omega)?;
    let logits = tape.neg(weighted);
    tape.softmax_rows(logits)
}

/// Output of the hard-VQ baseline.
pub struct HardVqOutput {
    /// Selected codewords in the forward pass; identity gradient to `zhat`.
    pub latent: Var,
    pub indices: Vec<usize>,
    /// `mean (sg[zhat] - c)^2` over all latent elements.
    pub codebook_loss: Var,
    /// `mean (zhat - sg[c])^2` over all latent elements.
    pub commit_loss: Var,
}

/// Nearest codeword per row, lowest index on ties.
pub fn nearest_codewords(rows: &Tensor, codebook: &Tensor) -> Vec<usize> {
    let d = codebook.shape()[1];
    rows.data()
        .chunks_exact(d)
        .map(|r| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in codebook.data().chunks_exact(d).enumerate() {
                let s: f64 = r.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
                if s < best_d {
                    best_d = s;
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn hardvq_quantize_var(tape: &mut Tape, zhat: Var, codebook: Var) -> Result<HardVqOutput> {
    let d = tape.shape(codebook)[1];
    let (b, l) = check_tokens("hardvq_quantize", tape, zhat, d)?;
    if !tape.value(zhat).is_finite() {
        return Err(Error::numeric(
            "hardvq_quantize",
            "non-finite encoder output",
        ));
    }
    let indices = nearest_codewords(tape.value(zhat), tape.value(codebook));
    let selected = tape.gather_rows(codebook, &indices)?;
    let chosen = tape.value(selected).clone().reshape(vec![b, l, d])?;
    let latent = tape.straight_through(zhat, chosen)?;

    let n = (b * l * d) as f64;
    let flat = tape.reshape(zhat, vec![b * l, d])?;
    let flat_sg = tape.detach(flat);
    let sel_sg = tape.detach(selected);

    let diff = tape.sub(selected, flat_sg)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq);
    let codebook_loss = tape.scale(s, 1.0 / n);

    let diff = tape.sub(flat, sel_sg)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq);
    let commit_loss = tape.scale(s, 1.0 / n);

    Ok(HardVqOutput {
        latent,
        indices,
        codebook_loss,
        commit_loss,
    })
}

/// Splits the latent dimension into `codebooks.len()` contiguous groups, each
/// soft-quantized against its own codebook. Returns the concatenated latent and
/// per-group posteriors.
pub fn pq_quantize_var(
    tape: &mut Tape,
    zhat: Var,
    codebooks: &[Var],
    tau: f64,
    squared: bool,
) -> Result<(Var, Vec<Var>)> {
    let g = codebooks.len();
    let s = tape.shape(zhat).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(
            "pq_quantize",
            format!("expected B x L x D, got {:?}", s),
        ));
    }
    let d = s[2];
    if g == 0 || d % g != 0 {
        return Err(Error::config(
            "pq_quantize",
            format!("G={} does not divide D={}", g, d),
        ));
    }
    let width = d / g;
    let mut parts = Vec::with_capacity(g);
    let mut posts = Vec::with_capacity(g);
    for (i, &cb) in codebooks.iter().enumerate() {
        let slice = tape.narrow(zhat, 2, i * width, width)?;
        let q = softvq_posterior_var(tape, slice, cb, tau, squared)?;
        parts.push(softvq_quantize_var(tape, q, cb)?);
        posts.push(q);
    }
    let latent = tape.concat(&parts, 2)?;
    Ok((latent, posts))
}

/// Output of residual soft quantization.
pub struct RqOutput {
    /// Sum of every layer's quantized contribution.
    pub latent: Var,
    pub posteriors: Vec<Var>,
    pub residual: Var,
}

/// `r_0 = zhat`; per layer `delta = SoftVQ(r)`, `r <- r - delta`; latent = sum of deltas.
/// `codebooks` holds either one shared table or one per layer.
pub fn rq_quantize_var(
    tape: &mut Tape,
    zhat: Var,
    codebooks: &[Var],
    layers: usize,
    tau: f64,
    squared: bool,
) -> Result<RqOutput> {
    if layers < 1 {
        return Err(Error::config("rq_quantize", "layers must be >= 1"));
    }
    if codebooks.len() != 1 && codebooks.len() != layers {
        return Err(Error::config(
            "rq_quantize",
            format!("{} codebooks for {} layers", codebooks.len(), layers),
        ));
    }
    let mut residual = zhat;
    let mut latent: Option<Var> = None;
    let mut posteriors = Vec::with_capacity(layers);
    for layer in 0..layers {
        let cb = codebooks[layer.min(codebooks.len() - 1)];
        let q = softvq_posterior_var(tape, residual, cb, tau, squared)?;
        let delta = softvq_quantize_var(tape, q, cb)?;
        residual = tape.sub(residual, delta)?;
        latent = Some(match latent {
            None => delta,
            Some(acc) => tape.add(acc, delta)?,
        });
        posteriors.push(q);
    }
    Ok(RqOutput {
        latent: latent.expect("layers >= 1"),
        posteriors,
        residual,
    })
}

/// `mu + exp(logvar / 2) * eps`.
pub fn gaussian_sample_var(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

// ---------------------------------------------------------------------------
// Eager wrappers

pub fn softvq_posterior(zhat: &Tensor, codebook: &Codebook, tau: f64) -> Result<Posterior> {
    let mut tape = Tape::new();
    let z = tape.constant(zhat.clone());
    let c = tape.constant(codebook.entries().clone());
    let q = softvq_posterior_var(&mut tape, z, c, tau, false)?;
    Ok(Posterior {
        probs: tape.value(q).clone(),
        temperature: tau,
    })
}

pub fn softvq_quantize(posterior: &Posterior, codebook: &Codebook) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(posterior.probs.clone());
    let c = tape.constant(codebook.entries().clone());
    let z = softvq_quantize_var(&mut tape, q, c)?;
    Ok(tape.value(z).clone())
}

pub fn gmmvq_posterior(zhat: &Tensor, codebook: &Codebook, omega: &Tensor) -> Result<Posterior> {
    let mut tape = Tape::new();
    let z = tape.constant(zhat.clone());
    let c = tape.constant(codebook.entries().clone());
    let w = tape.constant(omega.clone());
    let q = gmmvq_posterior_var(&mut tape, z, c, w, false)?;
    Ok(Posterior {
        probs: tape.value(q).clone(),
        temperature: f64::NAN,
    })
}

/// Eager hard VQ: `(latent, indices, codebook_loss, commit_loss)`.
pub fn hardvq_quantize(
    zhat: &Tensor,
    codebook: &Codebook,
) -> Result<(Tensor, Vec<usize>, f64, f64)> {
    let mut tape = Tape::new();
    let z = tape.constant(zhat.clone());
    let c = tape.constant(codebook.entries().clone());
    let out = hardvq_quantize_var(&mut tape, z, c)?;
    Ok((
        tape.value(out.latent).clone(),
        out.indices,
        tape.value(out.codebook_loss).item(),
        tape.value(out.commit_loss).item(),
    ))
}

pub fn pq_quantize(
    zhat: &Tensor,
    codebooks: &[Codebook],
    tau: f64,
) -> Result<(Tensor, Vec<Posterior>)> {
    let mut tape = Tape::new();
    let z = tape.constant(zhat.clone());
    let cbs: Vec<Var> = codebooks
        .iter()
        .map(|c| tape.constant(c.entries().clone()))
        .collect();
    let (lat, posts) = pq_quantize_var(&mut tape, z, &cbs, tau, false)?;
    Ok((
        tape.value(lat).clone(),
        posts
            .into_iter()
            .map(|q| Posterior {
                probs: tape.value(q).clone(),
                temperature: tau,
            })
            .collect(),
    ))
}

pub fn rq_quantize(
    zhat: &Tensor,
    codebook: &Codebook,
    layers: usize,
    tau: f64,
) -> Result<(Tensor, Vec<Posterior>, Tensor)> {
    let mut tape = Tape::new();
    let z = tape.constant(zhat.clone());
    let c = tape.constant(codebook.entries().clone());
    let out = rq_quantize_var(&mut tape, z, &[c], layers, tau, false)?;
    Ok((
        tape.value(out.latent).clone(),
        out.posteriors
            .into_iter()
            .map(|q| Posterior {
                probs: tape.value(q).clone(),
                temperature: tau,
            })
            .collect(),
        tape.value(out.residual).clone(),
    ))
}

pub fn gaussian_sample(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = tape.constant(mu.clone());
    let lv = tape.constant(logvar.clone());
    let e = tape.constant(eps.clone());
    let z = gaussian_sample_var(&mut tape, m, lv, e)?;
    Ok(tape.value(z).clone())
}

// ---------------------------------------------------------------------------
// Parameterized quantizer used by the tokenizer

/// Quantizer state: the spec plus the codebook parameters it owns.
#[derive(Clone, Debug)]
pub struct Quantizer {
    pub spec: QuantizerSpec,
    codebooks: Vec<ParamId>,
}

/// Everything the objectives need from one quantization pass.
pub struct QuantizeOutput {
    pub latent: Var,
    /// One `[B, L, K]` posterior per group or residual layer (empty for
    /// Gaussian / identity paths). Hard VQ reports one-hot rows.
    pub posteriors: Vec<Tensor>,
    pub posterior_vars: Vec<Var>,
    pub hard: Option<HardVqOutput>,
}

impl Quantizer {
    /// Registers codebooks in `params` (none for Gaussian / identity kinds).
    pub fn new(
        spec: QuantizerSpec,
        latent_dim: usize,
        params: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        spec.validate(latent_dim)?;
        let mut codebooks = Vec::new();
        if spec.kind.uses_codebook() {
            let width = latent_dim / spec.groups;
            let tables = if spec.groups > 1 {
                spec.groups
            } else if spec.per_layer_codebooks {
                spec.layers
            } else {
                1
            };
            for i in 0..tables {
                let cb = Codebook::init(spec.codebook_size, width, rng)?;
                let name = if tables == 1 {
                    "quantizer.codebook".to_string()
                } else {
                    format!("quantizer.codebook.{}", i)
                };
                codebooks.push(params.add(name, cb.entries().clone()));
            }
        }
        Ok(Quantizer { spec, codebooks })
    }

    pub fn codebook_ids(&self) -> &[ParamId] {
        &self.codebooks
    }

    pub fn codebooks(&self, params: &ParamStore) -> Vec<Codebook> {
        self.codebooks
            .iter()
            .map(|&id| Codebook::new(params.get(id).clone()).expect("valid codebook"))
            .collect()
    }

    /// Quantizes `zhat: [B, L, D]`. `omega` is required for GMMVQ.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        zhat: Var,
        omega: Option<Var>,
    ) -> Result<QuantizeOutput> {
        let spec = &self.spec;
        let cbs: Vec<Var> = self.codebooks.iter().map(|&id| binding.var(id)).collect();
        let sq = spec.squared_distance;
        let mut posterior_vars = Vec::new();
        let mut hard = None;
        let latent = match spec.kind {
            QuantizerKind::IdentityAe | QuantizerKind::GaussianKl => zhat,
            QuantizerKind::SoftVq if spec.groups > 1 => {
                let (lat, posts) = pq_quantize_var(tape, zhat, &cbs, spec.temperature, sq)?;
                posterior_vars = posts;
                lat
            }
            QuantizerKind::SoftVq if spec.layers > 1 => {
                let out = rq_quantize_var(tape, zhat, &cbs, spec.layers, spec.temperature, sq)?;
                posterior_vars = out.posteriors;
                out.latent
            }
            QuantizerKind::SoftVq => {
                let q = softvq_posterior_var(tape, zhat, cbs[0], spec.temperature, sq)?;
                posterior_vars.push(q);
                softvq_quantize_var(tape, q, cbs[0])?
            }
            QuantizerKind::GmmVq => {
                let omega = omega.ok_or_else(|| {
                    Error::config("Quantizer::forward", "GMMVQ requires an omega head")
                })?;
                let q = gmmvq_posterior_var(tape, zhat, cbs[0], omega, sq)?;
                posterior_vars.push(q);
                softvq_quantize_var(tape, q, cbs[0])?
            }
            QuantizerKind::HardVq => {
                let out = hardvq_quantize_var(tape, zhat, cbs[0])?;
                let lat = out.latent;
                hard = Some(out);
                lat
            }
        };
        let mut posteriors: Vec<Tensor> = posterior_vars
            .iter()
            .map(|&q| tape.value(q).clone())
            .collect();
        if let Some(h) = &hard {
            let s = tape.shape(zhat);
            let (b, l, k) = (s[0], s[1], spec.codebook_size);
            let mut onehot = Tensor::zeros(vec![b, l, k]);
            for (row, &idx) in h.indices.iter().enumerate() {
                onehot.data_mut()[row * k + idx] = 1.0;
            }
            posteriors.push(onehot);
        }
        Ok(QuantizeOutput {
            latent,
            posteriors,
            posterior_vars,
            hard,
        })
    }
}
