//! Deterministic tokenizer training: loss assembly, AdamW, warmup + cosine
//! schedule, metrics and checkpoints.

pub mod checkpoint;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use optim::{adamw_update, OptimState, Schedule};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::eval::codebook_perplexity;
use crate::objectives::{
    align_loss_var, gaussian_kl_var, recon_loss_var, softvq_kl_var, total_loss_var, LossBreakdown,
    LossTerms, LossWeights,
};
use crate::params::{Binding, ParamStore};
use crate::quantizers::{gaussian_sample_var, Quantizer, QuantizerKind, QuantizerSpec};
use crate::tensor::{derive_seed, rng_from_seed, Tensor};
use crate::tokenizer::{ModelConfig, TokenizerModel};

pub const METRICS_HEADER: &str = "step,recon,kl,align,total,lr,perplexity";

const TAG_INIT_MODEL: u64 = 0x1001;
const TAG_INIT_CODEBOOK: u64 = 0x1002;
const TAG_ORDER: u64 = 0x2001;
const TAG_NOISE: u64 = 0x2002;

/// Encoder, quantizer and decoder with their parameters.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub model: TokenizerModel,
    pub quantizer: Quantizer,
    pub params: ParamStore,
}

/// Tape handles and values of one forward pass.
pub struct Forward {
    pub loss: crate::autodiff::Var,
    pub breakdown: LossBreakdown,
    pub posteriors: Vec<Tensor>,
    pub reconstruction: crate::autodiff::Var,
}

/// Eager encoding of a batch.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// Encoder output `[B, L, D]` (the Gaussian mean for the KL baseline).
    pub zhat: Tensor,
    /// Decoder input `[B, L, D]`.
    pub latent: Tensor,
    pub posteriors: Vec<Tensor>,
}

impl Tokenizer {
    pub fn new(model: ModelConfig, spec: QuantizerSpec, seed: u64) -> Result<Self> {
        spec.validate(model.latent_dim)?;
        let mut params = ParamStore::new();
        let mut rng = rng_from_seed(derive_seed(seed, TAG_INIT_MODEL));
        let model = TokenizerModel::new(model, spec.kind, spec.temperature, &mut params, &mut rng)?;
        let mut rng = rng_from_seed(derive_seed(seed, TAG_INIT_CODEBOOK));
        let quantizer = Quantizer::new(spec, model.config.latent_dim, &mut params, &mut rng)?;
        Ok(Tokenizer {
            model,
            quantizer,
            params,
        })
    }

    pub fn kind(&self) -> QuantizerKind {
        self.quantizer.spec.kind
    }

    /// Replaces parameter values by name; names and shapes must match exactly.
    pub fn load_params(&mut self, stored: &ParamStore) -> Result<()> {
        if stored.len() != self.params.len() {
            return Err(Error::contract(
                "load_params",
                format!(
                    "{} stored parameters, model has {}",
                    stored.len(),
                    self.params.len()
                ),
            ));
        }
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let src = stored.id(&name).map(|s| stored.get(s)).ok_or_else(|| {
                Error::contract("load_params", format!("missing parameter {name}"))
            })?;
            if src.shape() != self.params.get(id).shape() {
                return Err(Error::contract(
                    "load_params",
                    format!("parameter {name} has shape {:?}", src.shape()),
                ));
            }
            *self.params.get_mut(id) = src.clone();
        }
        Ok(())
    }

    /// Builds the full training loss on `tape`. `targets` are alignment
    /// features `[B, N, F]`; `noise_seed` drives the Gaussian baseline's sampling.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        images: &Tensor,
        targets: Option<&Tensor>,
        weights: &LossWeights,
        noise_seed: u64,
    ) -> Result<Forward> {
        let enc = self.model.encode_var(tape, binding, images)?;
        let mut kl = None;
        let mut codebook = None;
        let mut commit = None;
        let mut posteriors = Vec::new();
        let latent = match self.kind() {
            QuantizerKind::GaussianKl => {
                let logvar = enc.logvar.expect("Gaussian head");
                let shape = tape.shape(enc.zhat).to_vec();
                let mut rng = rng_from_seed(noise_seed);
                let eps = tape.constant(Tensor::randn(shape, 1.0, &mut rng));
                kl = Some(gaussian_kl_var(tape, enc.zhat, logvar)?);
                gaussian_sample_var(tape, enc.zhat, logvar, eps)?
            }
            _ => {
                let q = self.quantizer.forward(tape, binding, enc.zhat, enc.omega)?;
                if !q.posterior_vars.is_empty() {
                    let mut acc = None;
                    for &p in &q.posterior_vars {
                        let k = softvq_kl_var(tape, p)?;
                        acc = Some(match acc {
                            None => k,
                            Some(a) => tape.add(a, k)?,
                        });
                    }
                    let n = q.posterior_vars.len() as f64;
                    kl = acc.map(|a| tape.scale(a, 1.0 / n));
                }
                if let Some(h) = &q.hard {
                    codebook = Some(h.codebook_loss);
                    commit = Some(h.commit_loss);
                }
                posteriors = q.posteriors;
                q.latent
            }
        };
        let xhat = self.model.decode_var(tape, binding, latent)?;
        let x = tape.constant(images.clone());
        let recon = recon_loss_var(tape, xhat, x)?;
        let align = match (targets, weights.align > 0.0) {
            (Some(t), true) => {
                let projector = self.model.projector.as_ref().ok_or_else(|| {
                    Error::config(
                        "train_step",
                        "alignment weight > 0 but the model has no projector",
                    )
                })?;
                Some(align_loss_var(tape, binding, projector, latent, t)?)
            }
            (None, true) => {
                return Err(Error::config(
                    "train_step",
                    "alignment weight > 0 but no alignment targets were given",
                ))
            }
            _ => None,
        };
        let (loss, breakdown) = total_loss_var(
            tape,
            LossTerms {
                recon,
                kl,
                align,
                codebook,
                commit,
            },
            weights,
        )?;
        Ok(Forward {
            loss,
            breakdown,
            posteriors,
            reconstruction: xhat,
        })
    }

    /// Inference-mode encoding (Gaussian baseline uses the mean).
    pub fn encode(&self, images: &Tensor) -> Result<Encoding> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape);
        let enc = self.model.encode_var(&mut tape, &binding, images)?;
        let zhat = tape.value(enc.zhat).clone();
        if matches!(self.kind(), QuantizerKind::GaussianKl) {
            return Ok(Encoding {
                latent: zhat.clone(),
                zhat,
                posteriors: Vec::new(),
            });
        }
        let q = self
            .quantizer
            .forward(&mut tape, &binding, enc.zhat, enc.omega)?;
        Ok(Encoding {
            zhat,
            latent: tape.value(q.latent).clone(),
            posteriors: q.posteriors,
        })
    }

    /// Encodes in chunks of `chunk` images and concatenates the results.
    pub fn encode_all(&self, images: &Tensor, chunk: usize) -> Result<Encoding> {
        let m = images.shape()[0];
        let mut zhat = Vec::new();
        let mut latent = Vec::new();
        let mut posteriors = Vec::new();
        let mut tail_shape = Vec::new();
        for start in (0..m).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(m)).collect();
            let e = self.encode(&images.select_leading(&idx))?;
            tail_shape = e.latent.shape()[1..].to_vec();
            zhat.extend_from_slice(e.zhat.data());
            latent.extend_from_slice(e.latent.data());
            posteriors.extend(e.posteriors);
        }
        let mut shape = vec![m];
        shape.extend(tail_shape);
        Ok(Encoding {
            zhat: Tensor::new(shape.clone(), zhat)?,
            latent: Tensor::new(shape, latent)?,
            posteriors,
        })
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        crate::tokenizer::decode(latents, &self.model, &self.params)
    }

    /// Decodes in chunks of `chunk` latents.
    pub fn decode_all(&self, latents: &Tensor, chunk: usize) -> Result<Tensor> {
        let m = latents.shape()[0];
        let mut out = Vec::new();
        let mut tail = Vec::new();
        for start in (0..m).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(m)).collect();
            let x = self.decode(&latents.select_leading(&idx))?;
            tail = x.shape()[1..].to_vec();
            out.extend(x.into_data());
        }
        let mut shape = vec![m];
        shape.extend(tail);
        Tensor::new(shape, out)
    }

    pub fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        let e = self.encode(images)?;
        self.decode(&e.latent)
    }
}

/// Result of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    /// `NaN` when the quantizer has no posterior.
    pub perplexity: f64,
    pub has_kl: bool,
    pub has_align: bool,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |present: bool, v: f64| if present { v.to_string() } else { "nan".into() };
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.breakdown.recon,
            opt(self.has_kl, self.breakdown.kl),
            opt(self.has_align, self.breakdown.align),
            self.breakdown.total,
            self.lr,
            opt(!self.perplexity.is_nan(), self.perplexity),
        )
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn write_metrics_csv(rows: &[StepMetrics], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io("write_metrics", path, e))
}

/// Hyperparameters of the optimization loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            lr_max: 1e-4,
            lr_min: 0.0,
            warmup_steps: 100,
            seed: 0,
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-4,
            grad_clip: None,
        }
    }
}

/// Dataset indices of the batch used at `step`: consecutive slices of a
/// stream of per-epoch permutations, each seeded by `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: u64, batch: usize, m: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for j in 0..batch as u64 {
        let pos = step * batch as u64 + j;
        let e = pos / m as u64;
        if e != epoch {
            epoch = e;
            perm = (0..m).collect();
            perm.shuffle(&mut rng_from_seed(derive_seed(
                derive_seed(seed, TAG_ORDER),
                e,
            )));
        }
        out.push(perm[(pos % m as u64) as usize]);
    }
    out
}

/// Forward, backward and one AdamW update. Returns the loss breakdown and the
/// batch codebook perplexity (`NaN` without posteriors).
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    tokenizer: &mut Tokenizer,
    images: &Tensor,
    targets: Option<&Tensor>,
    weights: &LossWeights,
    optim: &mut OptimState,
    lr: f64,
    noise_seed: u64,
    grad_clip: Option<f64>,
) -> Result<(LossBreakdown, f64)> {
    if images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::shape("train_step", "empty batch"));
    }
    let mut tape = Tape::new();
    let binding = tokenizer.params.bind(&mut tape);
    let fwd = tokenizer.forward(&mut tape, &binding, images, targets, weights, noise_seed)?;
    let grads = tape.backward(fwd.loss)?;
    let mut g = binding.collect_grads(&tape, &grads);
    if let Some(clip) = grad_clip {
        let norm = g.iter().map(|t| t.l2_norm().powi(2)).sum::<f64>().sqrt();
        if norm > clip {
            let s = clip / norm;
            for t in &mut g {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    adamw_update(&mut tokenizer.params, &g, optim, lr)?;
    let perplexity = if fwd.posteriors.is_empty() {
        f64::NAN
    } else {
        codebook_perplexity(&fwd.posteriors)?
    };
    Ok((fwd.breakdown, perplexity))
}

/// Owns a tokenizer and its optimizer state across steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub tokenizer: Tokenizer,
    pub optim: OptimState,
    pub schedule: Schedule,
    pub config: TrainConfig,
    /// Number of completed steps.
    pub step: u64,
    pub metrics: Vec<StepMetrics>,
}

impl Trainer {
    pub fn new(tokenizer: Tokenizer, config: TrainConfig) -> Result<Self> {
        config.weights.validate()?;
        if config.batch_size == 0 {
            return Err(Error::config("Trainer", "batch size must be positive"));
        }
        let schedule = Schedule::new(
            config.lr_max,
            config.lr_min,
            config.warmup_steps,
            config.steps,
        )?;
        let optim = OptimState::new(
            &tokenizer.params,
            config.beta1,
            config.beta2,
            1e-8,
            config.weight_decay,
        );
        Ok(Trainer {
            tokenizer,
            optim,
            schedule,
            config,
            step: 0,
            metrics: Vec::new(),
        })
    }

    /// Restores parameters, optimizer state and step from `ckpt`.
    pub fn resume(tokenizer: Tokenizer, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.seed != config.seed {
            return Err(Error::contract(
                "resume",
                format!(
                    "checkpoint seed {} differs from config seed {}",
                    ckpt.seed, config.seed
                ),
            ));
        }
        let mut t = Trainer::new(tokenizer, config)?;
        t.tokenizer.load_params(&ckpt.params)?;
        let shapes_match = ckpt.optim.m.len() == t.tokenizer.params.len()
            && ckpt
                .optim
                .m
                .iter()
                .zip(t.tokenizer.params.values())
                .all(|(m, p)| m.shape() == p.shape());
        if !shapes_match {
            return Err(Error::contract(
                "resume",
                "optimizer state does not match the model",
            ));
        }
        t.optim = ckpt.optim.clone();
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        Checkpoint {
            config: config_text.to_string(),
            step: self.step,
            seed: self.config.seed,
            params: self.tokenizer.params.clone(),
            optim: self.optim.clone(),
        }
    }

    /// Runs one step on the batch determined by `(seed, step)`.
    pub fn step(&mut self, data: &Dataset, targets: Option<&Tensor>) -> Result<StepMetrics> {
        if self.step >= self.config.steps {
            return Err(Error::contract("train_step", "training already finished"));
        }
        if data.is_empty() {
            return Err(Error::shape("train_step", "empty dataset"));
        }
        let idx = batch_indices(
            self.config.seed,
            self.step,
            self.config.batch_size,
            data.len(),
        );
        let images = data.images.select_leading(&idx);
        let batch_targets = targets.map(|t| t.select_leading(&idx));
        let lr = self.schedule.lr_at(self.step + 1)?;
        let noise_seed = derive_seed(derive_seed(self.config.seed, TAG_NOISE), self.step);
        let (breakdown, perplexity) = train_step(
            &mut self.tokenizer,
            &images,
            batch_targets.as_ref(),
            &self.config.weights,
            &mut self.optim,
            lr,
            noise_seed,
            self.config.grad_clip,
        )?;
        self.step += 1;
        let row = StepMetrics {
            step: self.step,
            breakdown,
            lr,
            perplexity,
            has_kl: self.tokenizer.kind() != QuantizerKind::IdentityAe
                && self.tokenizer.kind() != QuantizerKind::HardVq,
            has_align: self.config.weights.align > 0.0 && targets.is_some(),
        };
        self.metrics.push(row);
        Ok(row)
    }

    /// Steps until `until` steps are complete (capped at the configured total).
    pub fn run_until(
        &mut self,
        data: &Dataset,
        targets: Option<&Tensor>,
        until: u64,
    ) -> Result<()> {
        while self.step < until.min(self.config.steps) {
            self.step(data, targets)?;
        }
        Ok(())
    }

    pub fn run(&mut self, data: &Dataset, targets: Option<&Tensor>) -> Result<()> {
        self.run_until(data, targets, self.config.steps)
    }
}
