//! Registry of every differentiable operation, each checked against central
//! finite differences on seeded random instances.

use rand::Rng;

use crate::autodiff::{grad_check, GradCheckConfig, GradReport, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{fm_loss_var, FlowConfig, VelocityNet};
use crate::nn::{AttentionBlock, LayerNorm, Linear, Mlp};
use crate::objectives::{
    align_loss_var, alignment_var, gaussian_kl_var, recon_loss_var, replicate_latents_var,
    softvq_kl_var, LossWeights,
};
use crate::params::{Binding, ParamStore};
use crate::quantizers::{
    gaussian_sample_var, gmmvq_posterior_var, hardvq_quantize_var, pq_quantize_var,
    rq_quantize_var, softvq_posterior_var, softvq_quantize_var, QuantizerKind, QuantizerSpec,
};
use crate::tensor::{derive_seed, rng_from_seed, SeededRng, Tensor};
use crate::tokenizer::{ModelConfig, TokenizerModel};
use crate::trainer::Tokenizer;

/// Builds one instance from a seed: the inputs to perturb and the function.
type Instance = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

pub struct GradOp {
    pub name: &'static str,
    build: fn(&mut SeededRng) -> Instance,
}

impl GradOp {
    /// Checks `instances` seeded instances and returns the worst report.
    /// Instances that land next to a singular point are redrawn, up to
    /// `4 * instances` draws in total.
    pub fn check(&self, instances: usize, seed: u64, cfg: GradCheckConfig) -> Result<GradReport> {
        let mut worst: Option<GradReport> = None;
        let mut checked = 0;
        let mut draw = 0u64;
        while checked < instances {
            if draw >= 4 * instances as u64 {
                return Err(Error::Singular {
                    op: "grad_check",
                    msg: format!(
                        "{}: only {checked} of {instances} instances away from singular points",
                        self.name
                    ),
                });
            }
            let mut rng =
                rng_from_seed(derive_seed(derive_seed(seed, draw), self.name.len() as u64));
            let (inputs, f) = (self.build)(&mut rng);
            let cfg = GradCheckConfig {
                seed: derive_seed(cfg.seed, draw),
                ..cfg
            };
            draw += 1;
            let r = match grad_check(self.name, f, &inputs, cfg) {
                Err(Error::Singular { .. }) => continue,
                r => r?,
            };
            checked += 1;
            if worst
                .as_ref()
                .map_or(true, |w| r.max_rel_error > w.max_rel_error)
            {
                worst = Some(r);
            }
        }
        Ok(worst.expect("at least one instance"))
    }
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn dims(rng: &mut SeededRng) -> (usize, usize, usize, usize) {
    // B, L, D, K
    (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(2..=4),
        rng.random_range(2..=5),
    )
}

fn tau(rng: &mut SeededRng) -> f64 {
    rng.random_range(0.2..1.0)
}

fn row_stochastic(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let k = *shape.last().expect("non-scalar");
    let raw = Tensor::uniform(shape.to_vec(), 0.05, 1.0, rng);
    let data = raw
        .data()
        .chunks(k)
        .flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// Minimum token-to-codeword distance in generated instances. `||z - c||` has
/// curvature ~1/r near a codeword, so closer instances measure truncation
/// error of the finite difference instead of the gradient.
const MIN_SEPARATION: f64 = 0.15;

/// Sorted distances from `row` to every codeword.
fn distances(row: &[f64], codebook: &Tensor) -> Vec<f64> {
    let mut d: Vec<f64> = codebook
        .rows()
        .map(|c| {
            c.iter()
                .zip(row)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// Every row of `z` (width = codebook width) is at least `MIN_SEPARATION`
/// from every codeword.
fn separated(z: &Tensor, codebook: &Tensor) -> bool {
    let w = codebook.shape()[1];
    z.data()
        .chunks(w)
        .all(|row| distances(row, codebook)[0] >= MIN_SEPARATION)
}

/// Nearest codeword is unique by at least `MIN_SEPARATION` for every row.
fn unambiguous(z: &Tensor, codebook: &Tensor) -> bool {
    let w = codebook.shape()[1];
    z.data().chunks(w).all(|row| {
        let d = distances(row, codebook);
        d.len() < 2 || d[1] - d[0] >= MIN_SEPARATION
    })
}

/// Draws `[k, d]` codebooks until `ok` accepts one.
fn codebook_where(k: usize, d: usize, rng: &mut SeededRng, ok: impl Fn(&Tensor) -> bool) -> Tensor {
    loop {
        let c = randn(&[k, d], rng);
        if ok(&c) {
            return c;
        }
    }
}

/// Column block `g` of width `w` from every row of `z`.
fn group(z: &Tensor, g: usize, w: usize) -> Tensor {
    let d = z.last_dim();
    let data: Vec<f64> = z
        .data()
        .chunks(d)
        .flat_map(|r| r[g * w..(g + 1) * w].to_vec())
        .collect();
    Tensor::from_vec(vec![data.len() / w, w], data)
}

/// Residual inputs seen by each RQ layer, for the separation check.
fn rq_separated(z: &Tensor, codebooks: &[Tensor], layers: usize, tau: f64) -> bool {
    let mut r = z.clone();
    for l in 0..layers {
        let cb = &codebooks[l.min(codebooks.len() - 1)];
        if !separated(&r, cb) {
            return false;
        }
        let c = crate::quantizers::Codebook::new(cb.clone()).expect("finite codebook");
        let q = crate::quantizers::softvq_posterior(&r, &c, tau).expect("valid posterior");
        let delta = crate::quantizers::softvq_quantize(&q, &c).expect("valid quantize");
        r = Tensor::from_vec(
            r.shape().to_vec(),
            r.data()
                .iter()
                .zip(delta.data())
                .map(|(a, b)| a - b)
                .collect(),
        );
    }
    true
}

/// Inputs are `[extra..., params...]`; rebinds the parameter tail.
fn bind_tail(vars: &[Var], skip: usize) -> Binding {
    Binding::from_vars(vars[skip..].to_vec())
}

fn with_params(mut inputs: Vec<Tensor>, params: &ParamStore) -> Vec<Tensor> {
    inputs.extend(params.values().iter().cloned());
    inputs
}

/// Zero-initialized biases and unit gains would hide errors in their gradients.
fn jitter(params: &mut ParamStore, rng: &mut SeededRng) {
    for v in params.values_mut() {
        let noise = Tensor::randn(v.shape().to_vec(), 0.3, rng);
        for (a, b) in v.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
}

fn tiny_model(kind: QuantizerKind, align: bool) -> ModelConfig {
    ModelConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        latent_tokens: 2,
        latent_dim: 3,
        width: 4,
        enc_depth: 1,
        dec_depth: 1,
        mlp_ratio: 1,
        align_dim: align.then_some(3).filter(|_| kind != QuantizerKind::HardVq),
    }
}

fn op_softvq_posterior(rng: &mut SeededRng) -> Instance {
    let (b, l, d, k) = dims(rng);
    let (t, sq) = (tau(rng), rng.random_bool(0.5));
    let z = randn(&[b, l, d], rng);
    let c = codebook_where(k, d, rng, |c| separated(&z, c));
    (
        vec![z, c],
        Box::new(move |tp, v| softvq_posterior_var(tp, v[0], v[1], t, sq)),
    )
}

fn op_gmmvq_posterior(rng: &mut SeededRng) -> Instance {
    let (b, l, d, k) = dims(rng);
    let sq = rng.random_bool(0.5);
    let z = randn(&[b, l, d], rng);
    let c = codebook_where(k, d, rng, |c| separated(&z, c));
    (
        vec![z, c, Tensor::uniform(vec![b, l], 0.5, 3.0, rng)],
        Box::new(move |tp, v| gmmvq_posterior_var(tp, v[0], v[1], v[2], sq)),
    )
}

fn op_softvq_quantize(rng: &mut SeededRng) -> Instance {
    let (b, l, d, k) = dims(rng);
    let t = tau(rng);
    let z = randn(&[b, l, d], rng);
    let c = codebook_where(k, d, rng, |c| separated(&z, c));
    (
        vec![z, c],
        Box::new(move |tp, v| {
            let q = softvq_posterior_var(tp, v[0], v[1], t, false)?;
            softvq_quantize_var(tp, q, v[1])
        }),
    )
}

fn op_pq(rng: &mut SeededRng) -> Instance {
    let (b, l, _, k) = dims(rng);
    let g = rng.random_range(1..=3);
    let w = rng.random_range(1..=2);
    let t = tau(rng);
    let z = randn(&[b, l, g * w], rng);
    let mut inputs = vec![z.clone()];
    for i in 0..g {
        let part = group(&z, i, w);
        inputs.push(codebook_where(k, w, rng, |c| separated(&part, c)));
    }
    (
        inputs,
        Box::new(move |tp, v| Ok(pq_quantize_var(tp, v[0], &v[1..], t, false)?.0)),
    )
}

fn op_rq(rng: &mut SeededRng) -> Instance {
    let (b, l, d, k) = dims(rng);
    let layers = rng.random_range(1..=3);
    let shared = rng.random_bool(0.5);
    let t = tau(rng);
    let z = randn(&[b, l, d], rng);
    let tables = if shared { 1 } else { layers };
    let codebooks = loop {
        let cbs: Vec<Tensor> = (0..tables).map(|_| randn(&[k, d], rng)).collect();
        if rq_separated(&z, &cbs, layers, t) {
            break cbs;
        }
    };
    let mut inputs = vec![z];
    inputs.extend(codebooks);
    (
        inputs,
        Box::new(move |tp, v| Ok(rq_quantize_var(tp, v[0], &v[1..], layers, t, false)?.latent)),
    )
}

/// The stop-gradient side is captured as a constant so finite differences only
/// move the differentiated argument.
fn op_hardvq_codebook_loss(rng: &mut SeededRng) -> Instance {
    let (b, l, d, k) = dims(rng);
    let zhat = randn(&[b, l, d], rng);
    let c = codebook_where(k, d, rng, |c| unambiguous(&zhat, c));
    (
        vec![c],
        Box::new(move |tp, v| {
            let z = tp.constant(zhat.clone());
            Ok(hardvq_quantize_var(tp, z, v[0])?.codebook_loss)
        }),
    )
}

fn op_hardvq_commit_loss(rng: &mut SeededRng) -> Instance {
    let (b, l, d, k) = dims(rng);
    let z = randn(&[b, l, d], rng);
    let codebook = codebook_where(k, d, rng, |c| unambiguous(&z, c));
    (
        vec![z],
        Box::new(move |tp, v| {
            let c = tp.constant(codebook.clone());
            Ok(hardvq_quantize_var(tp, v[0], c)?.commit_loss)
        }),
    )
}

fn op_gaussian_sample(rng: &mut SeededRng) -> Instance {
    let (b, l, d, _) = dims(rng);
    (
        vec![
            randn(&[b, l, d], rng),
            randn(&[b, l, d], rng),
            randn(&[b, l, d], rng),
        ],
        Box::new(|tp, v| gaussian_sample_var(tp, v[0], v[1], v[2])),
    )
}

fn op_recon_loss(rng: &mut SeededRng) -> Instance {
    let (b, l, d, _) = dims(rng);
    (
        vec![randn(&[b, l, d], rng), randn(&[b, l, d], rng)],
        Box::new(|tp, v| recon_loss_var(tp, v[0], v[1])),
    )
}

fn op_softvq_kl(rng: &mut SeededRng) -> Instance {
    let (b, l, d, k) = dims(rng);
    let t = tau(rng);
    let z = randn(&[b, l, d], rng);
    let c = codebook_where(k, d, rng, |c| separated(&z, c));
    // through the posterior so inputs stay row-stochastic under perturbation
    (
        vec![z, c],
        Box::new(move |tp, v| {
            let q = softvq_posterior_var(tp, v[0], v[1], t, false)?;
            softvq_kl_var(tp, q)
        }),
    )
}

fn op_softvq_kl_rows(rng: &mut SeededRng) -> Instance {
    let (b, l, _, k) = dims(rng);
    let q = row_stochastic(&[b, l, k], rng);
    (
        vec![q],
        Box::new(|tp, v| {
            // renormalize so perturbed rows remain stochastic
            let s = tp.softmax_rows(v[0])?;
            softvq_kl_var(tp, s)
        }),
    )
}

fn op_gaussian_kl(rng: &mut SeededRng) -> Instance {
    let (b, l, d, _) = dims(rng);
    (
        vec![randn(&[b, l, d], rng), randn(&[b, l, d], rng)],
        Box::new(|tp, v| gaussian_kl_var(tp, v[0], v[1])),
    )
}

fn op_replicate(rng: &mut SeededRng) -> Instance {
    let (b, l, d, _) = dims(rng);
    let n = l * rng.random_range(1..=3);
    (
        vec![randn(&[b, l, d], rng)],
        Box::new(move |tp, v| replicate_latents_var(tp, v[0], n)),
    )
}

fn op_alignment(rng: &mut SeededRng) -> Instance {
    let (b, l, d, _) = dims(rng);
    (
        vec![randn(&[b, l, d], rng), randn(&[b, l, d], rng)],
        Box::new(|tp, v| alignment_var(tp, v[0], v[1])),
    )
}

fn op_align_loss(rng: &mut SeededRng) -> Instance {
    let (b, l, d, _) = dims(rng);
    let n = l * rng.random_range(1..=2);
    let f = rng.random_range(2..=4);
    let mut params = ParamStore::new();
    let proj = Mlp::new("proj", d, 3, f, &mut params, rng);
    jitter(&mut params, rng);
    let targets = randn(&[b, n, f], rng);
    (
        with_params(vec![randn(&[b, l, d], rng)], &params),
        Box::new(move |tp, v| align_loss_var(tp, &bind_tail(v, 1), &proj, v[0], &targets)),
    )
}

fn op_linear(rng: &mut SeededRng) -> Instance {
    let (b, l, d, k) = dims(rng);
    let mut params = ParamStore::new();
    let lin = Linear::new("lin", d, k, rng.random_bool(0.7), &mut params, rng);
    jitter(&mut params, rng);
    (
        with_params(vec![randn(&[b, l, d], rng)], &params),
        Box::new(move |tp, v| lin.forward(tp, &bind_tail(v, 1), v[0])),
    )
}

fn op_layer_norm(rng: &mut SeededRng) -> Instance {
    let (b, l, _, _) = dims(rng);
    let w = rng.random_range(2..=6);
    let mut params = ParamStore::new();
    let ln = LayerNorm::new("ln", w, &mut params);
    jitter(&mut params, rng);
    (
        with_params(vec![randn(&[b, l, w], rng)], &params),
        Box::new(move |tp, v| ln.forward(tp, &bind_tail(v, 1), v[0])),
    )
}

fn op_mlp(rng: &mut SeededRng) -> Instance {
    let (b, l, d, k) = dims(rng);
    let mut params = ParamStore::new();
    let mlp = Mlp::new("mlp", d, 4, k, &mut params, rng);
    jitter(&mut params, rng);
    (
        with_params(vec![randn(&[b, l, d], rng)], &params),
        Box::new(move |tp, v| mlp.forward(tp, &bind_tail(v, 1), v[0])),
    )
}

fn op_attention(rng: &mut SeededRng) -> Instance {
    let b = rng.random_range(1..=2);
    let t = rng.random_range(1..=4);
    let w = 4;
    let mut params = ParamStore::new();
    let block = AttentionBlock::new("attn", w, 4, &mut params, rng);
    jitter(&mut params, rng);
    (
        with_params(vec![randn(&[b, t, w], rng)], &params),
        Box::new(move |tp, v| block.forward(tp, &bind_tail(v, 1), v[0])),
    )
}

fn tiny_tokenizer_model(kind: QuantizerKind, rng: &mut SeededRng) -> (TokenizerModel, ParamStore) {
    let mut params = ParamStore::new();
    let model = TokenizerModel::new(tiny_model(kind, false), kind, 0.5, &mut params, rng)
        .expect("valid tiny model");
    jitter(&mut params, rng);
    (model, params)
}

fn op_encode(rng: &mut SeededRng) -> Instance {
    let kinds = [
        QuantizerKind::SoftVq,
        QuantizerKind::GmmVq,
        QuantizerKind::GaussianKl,
    ];
    let kind = kinds[rng.random_range(0..kinds.len())];
    let (model, params) = tiny_tokenizer_model(kind, rng);
    let b = rng.random_range(1..=2);
    let images = Tensor::uniform(vec![b, 4, 4, 1], 0.0, 1.0, rng);
    (
        with_params(vec![], &params),
        Box::new(move |tp, v| {
            let e = model.encode_var(tp, &bind_tail(v, 0), &images)?;
            let z = tp.sum(e.zhat);
            let extra = match (e.omega, e.logvar) {
                (Some(w), _) | (None, Some(w)) => tp.sum(w),
                _ => return Ok(z),
            };
            tp.add(z, extra)
        }),
    )
}

fn op_decode(rng: &mut SeededRng) -> Instance {
    let (model, params) = tiny_tokenizer_model(QuantizerKind::SoftVq, rng);
    let b = rng.random_range(1..=2);
    (
        with_params(vec![randn(&[b, 2, 3], rng)], &params),
        Box::new(move |tp, v| model.decode_var(tp, &bind_tail(v, 1), v[0])),
    )
}

fn op_tokenizer_loss(rng: &mut SeededRng) -> Instance {
    let kinds = [
        QuantizerKind::SoftVq,
        QuantizerKind::GmmVq,
        QuantizerKind::GaussianKl,
        QuantizerKind::IdentityAe,
    ];
    let kind = kinds[rng.random_range(0..kinds.len())];
    let align = rng.random_bool(0.5);
    let spec = QuantizerSpec {
        kind,
        codebook_size: 4,
        temperature: 0.5,
        ..QuantizerSpec::default()
    };
    let mut tok =
        Tokenizer::new(tiny_model(kind, align), spec, rng.random()).expect("valid tiny tokenizer");
    jitter(&mut tok.params, rng);
    let b = rng.random_range(1..=2);
    let images = Tensor::uniform(vec![b, 4, 4, 1], 0.0, 1.0, rng);
    let targets = align.then(|| randn(&[b, 4, 3], rng));
    let weights = LossWeights {
        align: if align { 0.1 } else { 0.0 },
        ..LossWeights::default()
    };
    let noise_seed = rng.random();
    let inputs = with_params(vec![], &tok.params);
    (
        inputs,
        Box::new(move |tp, v| {
            let f = tok.forward(
                tp,
                &bind_tail(v, 0),
                &images,
                targets.as_ref(),
                &weights,
                noise_seed,
            )?;
            Ok(f.loss)
        }),
    )
}

fn flow_net(rng: &mut SeededRng) -> (VelocityNet, ParamStore, usize) {
    let dim = rng.random_range(1..=4);
    let cfg = FlowConfig {
        hidden: 5,
        depth: 2,
        time_dim: 4,
        num_classes: 3,
        ..FlowConfig::default()
    };
    let mut params = ParamStore::new();
    let net = VelocityNet::new(dim, &cfg, &mut params, rng).expect("valid flow net");
    jitter(&mut params, rng);
    (net, params, dim)
}

fn op_velocity(rng: &mut SeededRng) -> Instance {
    let (net, params, dim) = flow_net(rng);
    let b = rng.random_range(1..=3);
    let t: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
    (
        with_params(vec![randn(&[b, dim], rng)], &params),
        Box::new(move |tp, v| net.forward_var(tp, &bind_tail(v, 1), v[0], &t, &labels)),
    )
}

fn op_fm_loss(rng: &mut SeededRng) -> Instance {
    let (net, params, dim) = flow_net(rng);
    let b = rng.random_range(1..=3);
    let t: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
    let z = randn(&[b, dim], rng);
    let eps = randn(&[b, dim], rng);
    (
        with_params(vec![], &params),
        Box::new(move |tp, v| fm_loss_var(tp, &bind_tail(v, 0), &net, &z, &eps, &t, &labels)),
    )
}

/// Every registered differentiable operation.
pub fn registry() -> Vec<GradOp> {
    macro_rules! ops {
        ($($name:literal => $f:ident),* $(,)?) => {
            vec![$(GradOp { name: $name, build: $f }),*]
        };
    }
    ops![
        "softvq_posterior" => op_softvq_posterior,
        "gmmvq_posterior" => op_gmmvq_posterior,
        "softvq_quantize" => op_softvq_quantize,
        "pq_quantize" => op_pq,
        "rq_quantize" => op_rq,
        "hardvq_codebook_loss" => op_hardvq_codebook_loss,
        "hardvq_commit_loss" => op_hardvq_commit_loss,
        "gaussian_sample" => op_gaussian_sample,
        "recon_loss" => op_recon_loss,
        "softvq_kl" => op_softvq_kl,
        "softvq_kl_rows" => op_softvq_kl_rows,
        "gaussian_kl" => op_gaussian_kl,
        "replicate_latents" => op_replicate,
        "alignment" => op_alignment,
        "align_loss" => op_align_loss,
        "linear" => op_linear,
        "layer_norm" => op_layer_norm,
        "mlp" => op_mlp,
        "attention_block" => op_attention,
        "encode" => op_encode,
        "decode" => op_decode,
        "tokenizer_loss" => op_tokenizer_loss,
        "velocity_net" => op_velocity,
        "fm_loss" => op_fm_loss,
    ]
}

/// Runs every registered op on `instances` seeded instances.
pub fn run_suite(
    instances: usize,
    seed: u64,
    cfg: GradCheckConfig,
) -> Vec<(String, Result<GradReport>)> {
    registry()
        .iter()
        .map(|op| (op.name.to_string(), op.check(instances, seed, cfg)))
        .collect()
}
