//! End-to-end pipelines shared by the CLI and the integration tests: data
//! loading, tokenizer training, evaluation, the rate-distortion sweep and the
//! latent flow experiment.

use std::path::Path;

use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig};
use crate::datagen::{gen_shapes, load_idx, Dataset, Oracle, Split};
use crate::error::{Error, Result};
use crate::eval::{codebook_perplexity, linear_probe, mse_psnr, proxy_fid, ProbeResult};
use crate::flow::{train_flow, FlowModel};
use crate::quantizers::QuantizerKind;
use crate::tensor::{derive_seed, Tensor};
use crate::trainer::{Checkpoint, StepMetrics, Tokenizer, Trainer};

const TAG_VAL: u64 = 0x7a1;
const CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

/// Builds the train/val splits described by the dataset block. IDX paths are
/// resolved against `base` when relative.
pub fn load_data(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<Splits> {
    let d = &cfg.dataset;
    let (train, val) = match d.source {
        DataSource::Shapes => {
            let train = gen_shapes(d.seed, d.train_count, d.classes, cfg.model.h)?;
            let val = gen_shapes(
                derive_seed(d.seed, TAG_VAL),
                d.val_count.max(1),
                d.classes,
                cfg.model.h,
            )?;
            (train, val)
        }
        DataSource::Idx => {
            let train = load_idx(
                &cfg.resolve(base, &d.train_images),
                &cfg.resolve(base, &d.train_labels),
            )?;
            if d.val_images.is_empty() {
                return Err(Error::config(
                    "load_data",
                    "dataset.val_images is required for idx data",
                ));
            }
            let val = load_idx(
                &cfg.resolve(base, &d.val_images),
                &cfg.resolve(base, &d.val_labels),
            )?;
            (train, val)
        }
    };
    for (name, ds) in [("train", &train), ("val", &val)] {
        if ds.image_size() != cfg.model.h || ds.channels() != 1 {
            return Err(Error::config(
                "load_data",
                format!(
                    "{name} images are {}x{}x{}, model expects {}x{}x1",
                    ds.image_size(),
                    ds.image_size(),
                    ds.channels(),
                    cfg.model.h,
                    cfg.model.h
                ),
            ));
        }
        if ds.labels.iter().any(|&l| l >= d.classes) {
            return Err(Error::config(
                "load_data",
                format!("{name} labels exceed dataset.classes = {}", d.classes),
            ));
        }
    }
    Ok(Splits {
        train: train.with_split(Split::Train),
        val: val.with_split(Split::Val),
    })
}

pub fn oracle(cfg: &ExperimentConfig) -> Result<Oracle> {
    Oracle::new(
        cfg.dataset.classes,
        cfg.model.p,
        1,
        cfg.loss.oracle_dim,
        cfg.loss.oracle_alpha,
        cfg.loss.oracle_seed,
    )
}

/// Alignment targets for the training split, or `None` when alignment is off.
pub fn alignment_targets(cfg: &ExperimentConfig, train: &Dataset) -> Result<Option<Tensor>> {
    if !cfg.aligned() {
        return Ok(None);
    }
    Ok(Some(oracle(cfg)?.features(&train.images, &train.labels)?))
}

pub fn new_trainer(cfg: &ExperimentConfig) -> Result<Trainer> {
    let tok = Tokenizer::new(cfg.model_config(), cfg.quantizer_spec(), cfg.trainer.seed)?;
    Trainer::new(tok, cfg.train_config())
}

/// Trains a tokenizer for the configured number of steps. `on_step` runs after
/// every step, e.g. to write periodic checkpoints.
pub fn train_tokenizer<F>(cfg: &ExperimentConfig, data: &Splits, mut on_step: F) -> Result<Trainer>
where
    F: FnMut(&Trainer) -> Result<()>,
{
    let targets = alignment_targets(cfg, &data.train)?;
    let mut trainer = new_trainer(cfg)?;
    while trainer.step < trainer.config.steps {
        trainer.step(&data.train, targets.as_ref())?;
        on_step(&trainer)?;
    }
    Ok(trainer)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub psnr: f64,
    /// `None` for quantizers without a codebook.
    pub perplexity: Option<f64>,
    pub probe: Option<ProbeResult>,
    /// Proxy-Frechet distance between oracle features of reconstructions and
    /// of the originals.
    pub recon_fid: f64,
}

/// Per-image oracle features, mean-pooled over patches: `[M, F]`.
pub fn pooled_oracle_features(
    oracle: &Oracle,
    images: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let f = oracle.features(images, labels)?;
    let s = f.shape().to_vec();
    let (m, n, d) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        for j in 0..n {
            for k in 0..d {
                out[i * d + k] += f.data()[(i * n + j) * d + k] / n as f64;
            }
        }
    }
    Ok(Tensor::from_vec(vec![m, d], out))
}

/// Flattens `[M, ...]` to `[M, rest]`.
pub fn flatten_rows(t: &Tensor) -> Tensor {
    let m = t.shape()[0];
    let rest = t.numel() / m.max(1);
    Tensor::from_vec(vec![m, rest], t.data().to_vec())
}

/// Reconstruction, codebook usage, linear probe and reconstruction FID on
/// the validation split.
pub fn evaluate(tok: &Tokenizer, cfg: &ExperimentConfig, val: &Dataset) -> Result<EvalReport> {
    let enc = tok.encode_all(&val.images, CHUNK)?;
    let recon = tok.decode_all(&enc.latent, CHUNK)?;
    let (mse, psnr) = mse_psnr(&recon, &val.images)?;
    let perplexity = if enc.posteriors.is_empty() {
        None
    } else {
        Some(codebook_perplexity(&enc.posteriors)?)
    };
    let probe = if cfg.eval.probe {
        Some(linear_probe(
            &flatten_rows(&enc.latent),
            &val.labels,
            cfg.eval.probe_seed,
        )?)
    } else {
        None
    };
    let oracle = oracle(cfg)?;
    let real = pooled_oracle_features(&oracle, &val.images, &val.labels)?;
    let fake = pooled_oracle_features(&oracle, &recon.clamp01(), &val.labels)?;
    Ok(EvalReport {
        mse,
        psnr,
        perplexity,
        probe,
        recon_fid: proxy_fid(&fake, &real)?,
    })
}

pub const SWEEP_HEADER: &str = "kind,L,K,D,tau,final_recon,perplexity,probe_acc,proxy_fid,error";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: QuantizerKind,
    pub l: usize,
    pub k: usize,
    pub d: usize,
    pub tau: f64,
    /// Validation MSE after training.
    pub final_recon: f64,
    pub perplexity: f64,
    pub probe_acc: f64,
    pub proxy_fid: f64,
    /// Set when this configuration failed; metric columns are then NaN.
    pub error: Option<String>,
}

impl SweepRow {
    fn csv(&self) -> String {
        let err = self
            .error
            .as_deref()
            .unwrap_or("")
            .replace([',', '\n'], ";");
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.kind,
            self.l,
            self.k,
            self.d,
            self.tau,
            self.final_recon,
            self.perplexity,
            self.probe_acc,
            self.proxy_fid,
            err
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn find(&self, kind: QuantizerKind, l: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.kind == kind && r.l == l)
    }
}

/// Expands the eval block's sweep axes around `base`. An empty axis keeps the
/// base value.
pub fn sweep_grid(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let e = &base.eval;
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let kinds = if e.sweep_kinds.is_empty() {
        vec![base.quantizer.kind]
    } else {
        e.sweep_kinds.clone()
    };
    let taus = if e.sweep_tau.is_empty() {
        vec![base.quantizer.tau]
    } else {
        e.sweep_tau.clone()
    };
    let mut out = Vec::new();
    for &kind in &kinds {
        for &l in &or(&e.sweep_l, base.model.l) {
            for &k in &or(&e.sweep_k, base.quantizer.k) {
                for &d in &or(&e.sweep_d, base.model.d) {
                    for &tau in &taus {
                        let mut c = base.clone();
                        c.quantizer.kind = kind;
                        c.model.l = l;
                        c.quantizer.k = k;
                        c.model.d = d;
                        c.quantizer.tau = tau;
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

/// One sweep configuration's row plus its per-step training metrics.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub row: SweepRow,
    pub metrics: Vec<StepMetrics>,
    /// Final trainer state, when training succeeded.
    pub checkpoint: Option<Checkpoint>,
}

/// Trains and evaluates one sweep configuration.
pub fn sweep_run(cfg: &ExperimentConfig, data: &Splits) -> SweepRun {
    let q = &cfg.quantizer;
    let mut row = SweepRow {
        kind: q.kind,
        l: cfg.model.l,
        k: q.k,
        d: cfg.model.d,
        tau: q.tau,
        final_recon: f64::NAN,
        perplexity: f64::NAN,
        probe_acc: f64::NAN,
        proxy_fid: f64::NAN,
        error: None,
    };
    let mut metrics = Vec::new();
    let mut checkpoint = None;
    let result = cfg
        .validate(&Default::default())
        .and_then(|_| train_tokenizer(cfg, data, |_| Ok(())))
        .and_then(|t| {
            metrics = t.metrics.clone();
            checkpoint = Some(t.checkpoint(&cfg.canonical()));
            evaluate(&t.tokenizer, cfg, &data.val)
        });
    match result {
        Ok(r) => {
            row.final_recon = r.mse;
            row.perplexity = r.perplexity.unwrap_or(f64::NAN);
            row.probe_acc = r.probe.map_or(f64::NAN, |p| p.val_accuracy);
            row.proxy_fid = r.recon_fid;
        }
        Err(e) => row.error = Some(format!("{}: {}", e.code(), e)),
    }
    SweepRun {
        row,
        metrics,
        checkpoint,
    }
}

/// Runs every configuration in parallel, results in input order.
pub fn run_sweep(configs: &[ExperimentConfig], data: &Splits) -> Vec<SweepRun> {
    configs.par_iter().map(|c| sweep_run(c, data)).collect()
}

/// Runs every configuration, in parallel, with rows in input order. A failing
/// configuration is recorded in its row and does not stop the sweep.
pub fn rate_distortion_sweep(configs: &[ExperimentConfig], data: &Splits) -> SweepReport {
    SweepReport {
        rows: run_sweep(configs, data)
            .into_iter()
            .map(|r| r.row)
            .collect(),
    }
}

/// Encoded latents `[M, L, D]` of a dataset.
pub fn encode_latents(tok: &Tokenizer, images: &Tensor) -> Result<Tensor> {
    Ok(tok.encode_all(images, CHUNK)?.latent)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationReport {
    /// Proxy-Frechet distance of samples against held-out latents, in the
    /// standardized latent space, at the configured number of Euler steps.
    pub latent_fid: f64,
    /// `(euler steps, latent fid)` for each evaluated step count.
    pub by_steps: Vec<(usize, f64)>,
    /// Oracle-feature proxy-Frechet distance of decoded samples against
    /// held-out images.
    pub image_fid: f64,
    pub final_loss: f64,
}

/// Labels for `n` samples cycling through the classes.
pub fn sample_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

/// Samples from `flow` and scores against held-out data.
pub fn score_flow(
    flow: &FlowModel,
    tok: &Tokenizer,
    cfg: &ExperimentConfig,
    val: &Dataset,
    val_latents: &Tensor,
    step_counts: &[usize],
) -> Result<(GenerationReport, Tensor)> {
    let f = &cfg.flow;
    let labels = sample_labels(f.samples, cfg.dataset.classes);
    let real = flatten_rows(&flow.stats.standardize(val_latents)?);
    let mut by_steps = Vec::new();
    let mut main = None;
    let mut counts: Vec<usize> = step_counts.to_vec();
    if !counts.contains(&f.sample_steps) {
        counts.push(f.sample_steps);
    }
    for &steps in &counts {
        let s = flow.sample(steps, &labels, f.seed)?;
        let fid = proxy_fid(&flatten_rows(&flow.stats.standardize(&s)?), &real)?;
        by_steps.push((steps, fid));
        if steps == f.sample_steps {
            main = Some((fid, s));
        }
    }
    let (latent_fid, samples) = main.expect("sample_steps evaluated");
    let oracle = oracle(cfg)?;
    let images = tok.decode_all(&samples, CHUNK)?.clamp01();
    let image_fid = proxy_fid(
        &pooled_oracle_features(&oracle, &images, &labels)?,
        &pooled_oracle_features(&oracle, &val.images, &val.labels)?,
    )?;
    let report = GenerationReport {
        latent_fid,
        by_steps,
        image_fid,
        final_loss: flow.losses.last().copied().unwrap_or(f64::NAN),
    };
    Ok((report, samples))
}

/// Encodes both splits with `tok`, trains a flow on the training latents and
/// scores samples against the validation latents.
pub fn flow_experiment(
    tok: &Tokenizer,
    cfg: &ExperimentConfig,
    data: &Splits,
) -> Result<(FlowModel, GenerationReport)> {
    let train = encode_latents(tok, &data.train.images)?;
    let val = encode_latents(tok, &data.val.images)?;
    let flow = train_flow(&train, &data.train.labels, &cfg.flow_config())?;
    let (report, _) = score_flow(&flow, tok, cfg, &data.val, &val, &[])?;
    Ok((flow, report))
}
