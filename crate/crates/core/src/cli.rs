//! Command-line front end: argument parsing, run directories, manifests and
//! the per-command pipelines.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::datagen::{write_idx, write_idx_f64, Dataset, Split};
use crate::error::{Error, Result};
use crate::experiment::{
    evaluate, flow_experiment, load_data, run_sweep, sample_labels, score_flow, sweep_grid,
    train_tokenizer, EvalReport, GenerationReport, Splits, SweepReport,
};
use crate::flow::FlowModel;
use crate::gradsuite;
use crate::selftest;
use crate::trainer::{metrics_csv, Checkpoint, Tokenizer};

pub const TOKENIZER_CKPT: &str = "tokenizer.ckpt";
pub const FLOW_CKPT: &str = "flow.ckpt";

#[derive(Debug, Parser)]
#[command(
    name = "softvq",
    version,
    about = "Soft vector-quantized image tokenizers at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config file (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root directory for run outputs.
    #[arg(long, global = true, env = "SOFTVQ_OUT", default_value = "runs")]
    pub out: PathBuf,

    /// Overrides `trainer.seed` and `flow.seed`; seeds the instances of `gradcheck`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a tokenizer; writes metrics.csv, tokenizer.ckpt and eval.json.
    TrainTokenizer,
    /// Evaluate a trained tokenizer on the validation split.
    Eval {
        /// Tokenizer checkpoint (default: the run directory's tokenizer.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every point of the eval.sweep_* grid.
    Sweep,
    /// Train a latent flow model on tokenizer latents.
    TrainFlow,
    /// Draw samples from a trained flow model and decode them.
    Sample {
        /// Flow checkpoint (default: the run directory's flow.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every registered differentiable operation.
    Gradcheck {
        /// Random instances per operation.
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
    /// Run the worked-example tables of every module.
    Selftest,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainTokenizer => "train-tokenizer",
            Command::Eval { .. } => "eval",
            Command::Sweep => "sweep",
            Command::TrainFlow => "train-flow",
            Command::Sample { .. } => "sample",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    version: &'a str,
    started_unix: f64,
    finished_unix: f64,
    files: Vec<String>,
    config: String,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Directory owned by one configuration, plus the files written so far.
pub struct RunDir {
    pub path: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let path = root.join(format!("{:016x}", cfg.hash()));
        fs::create_dir_all(&path).map_err(|e| Error::io("create_run_dir", &path, e))?;
        Ok(RunDir {
            path,
            files: Vec::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| Error::io("write", &p, e))?;
        self.record(name);
        Ok(())
    }

    pub fn save_checkpoint(&mut self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        ckpt.save(&self.file(name))?;
        self.record(name);
        Ok(())
    }

    fn manifest(mut self, command: &str, cfg: &ExperimentConfig, started: f64) -> Result<()> {
        let name = format!("manifest.{command}.json");
        self.files.sort();
        let m = Manifest {
            command,
            config_hash: format!("{:016x}", cfg.hash()),
            version: env!("CARGO_PKG_VERSION"),
            started_unix: started,
            finished_unix: now(),
            files: self.files.clone(),
            config: cfg.canonical(),
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        let p = self.file(&name);
        fs::write(&p, text + "\n").map_err(|e| Error::io("write_manifest", &p, e))
    }
}

fn eval_json(r: &EvalReport) -> String {
    let v = serde_json::json!({
        "mse": r.mse,
        "psnr": if r.psnr.is_finite() { serde_json::json!(r.psnr) } else { serde_json::json!("inf") },
        "perplexity": r.perplexity,
        "probe_train_accuracy": r.probe.as_ref().map(|p| p.train_accuracy),
        "probe_val_accuracy": r.probe.as_ref().map(|p| p.val_accuracy),
        "recon_proxy_fid": r.recon_fid,
    });
    serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
}

fn generation_csv(r: &GenerationReport) -> String {
    let mut s = String::from("euler_steps,latent_proxy_fid\n");
    for (steps, fid) in &r.by_steps {
        s.push_str(&format!("{steps},{fid}\n"));
    }
    s.push_str(&format!("# image_proxy_fid,{}\n", r.image_fid));
    if r.final_loss.is_finite() {
        s.push_str(&format!("# final_fm_loss,{}\n", r.final_loss));
    }
    s
}

fn flow_loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,fm_loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, l));
    }
    s
}

fn load_tokenizer(cfg: &ExperimentConfig, path: &Path) -> Result<Tokenizer> {
    let ckpt = Checkpoint::load(path)?;
    let mut tok = Tokenizer::new(cfg.model_config(), cfg.quantizer_spec(), cfg.trainer.seed)?;
    tok.load_params(&ckpt.params)?;
    Ok(tok)
}

/// Trains a tokenizer into `run`, writing metrics, checkpoints and evaluation.
fn train_into(run: &mut RunDir, cfg: &ExperimentConfig, data: &Splits) -> Result<Tokenizer> {
    let text = cfg.canonical();
    let every = cfg.trainer.checkpoint_every;
    let mut periodic = Vec::new();
    let trainer = train_tokenizer(cfg, data, |t| {
        if every > 0 && t.step % every == 0 && t.step < t.config.steps {
            let name = format!("tokenizer-step{:06}.ckpt", t.step);
            t.checkpoint(&text).save(&run.file(&name))?;
            periodic.push(name);
        }
        Ok(())
    })?;
    for name in periodic {
        run.record(&name);
    }
    run.write("metrics.csv", &metrics_csv(&trainer.metrics))?;
    run.save_checkpoint(TOKENIZER_CKPT, &trainer.checkpoint(&text))?;
    let report = evaluate(&trainer.tokenizer, cfg, &data.val)?;
    run.write("eval.json", &eval_json(&report))?;
    println!(
        "trained {} steps: val mse {:.5}, psnr {:.2} dB{}",
        trainer.step,
        report.mse,
        report.psnr,
        report
            .probe
            .as_ref()
            .map(|p| format!(", probe {:.3}", p.val_accuracy))
            .unwrap_or_default()
    );
    Ok(trainer.tokenizer)
}

/// Tokenizer for flow commands: `flow.tokenizer`, else the run directory's
/// checkpoint, else a fresh training run.
fn flow_tokenizer(
    run: &mut RunDir,
    cfg: &ExperimentConfig,
    base: Option<&Path>,
    data: &Splits,
) -> Result<Tokenizer> {
    if !cfg.flow.tokenizer.is_empty() {
        return load_tokenizer(cfg, &cfg.resolve(base, &cfg.flow.tokenizer));
    }
    let local = run.file(TOKENIZER_CKPT);
    if local.exists() {
        return load_tokenizer(cfg, &local);
    }
    train_into(run, cfg, data)
}

fn decoded_dataset(images: crate::tensor::Tensor, labels: Vec<usize>, classes: usize) -> Dataset {
    Dataset {
        images,
        labels,
        num_classes: classes,
        split: Split::Val,
    }
}

/// Executes one command. Returns the process exit status on success.
pub fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads", "must be >= 1"));
        }
        // fails only if a pool already exists, e.g. when called twice in-process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match &cli.command {
        Command::Gradcheck { instances } => {
            return Ok(gradcheck(*instances.max(&1), cli.seed.unwrap_or(0)))
        }
        Command::Selftest => return Ok(run_selftest()),
        _ => {}
    }
    let (mut cfg, base) = match &cli.config {
        Some(p) => (
            ExperimentConfig::parse_file(p)?.0,
            p.parent().map(Path::to_path_buf),
        ),
        None => (ExperimentConfig::default(), None),
    };
    if let Some(seed) = cli.seed {
        cfg.trainer.seed = seed;
        cfg.flow.seed = seed;
    }
    let base = base.as_deref();
    let started = now();
    let mut run = RunDir::create(&cli.out, &cfg)?;
    run.write("config.txt", &cfg.canonical())?;
    let data = load_data(&cfg, base)?;
    match &cli.command {
        Command::TrainTokenizer => {
            train_into(&mut run, &cfg, &data)?;
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| run.file(TOKENIZER_CKPT));
            let tok = load_tokenizer(&cfg, &path)?;
            let report = evaluate(&tok, &cfg, &data.val)?;
            run.write("eval.json", &eval_json(&report))?;
            print!("{}", eval_json(&report));
        }
        Command::Sweep => {
            let grid = sweep_grid(&cfg);
            let runs = run_sweep(&grid, &data);
            for (c, r) in grid.iter().zip(&runs) {
                let mut sub = RunDir::create(&cli.out, c)?;
                sub.write("config.txt", &c.canonical())?;
                if !r.metrics.is_empty() {
                    sub.write("metrics.csv", &metrics_csv(&r.metrics))?;
                }
                if let Some(ckpt) = &r.checkpoint {
                    sub.save_checkpoint(TOKENIZER_CKPT, ckpt)?;
                }
                sub.write(
                    "sweep_row.csv",
                    &SweepReport {
                        rows: vec![r.row.clone()],
                    }
                    .to_csv(),
                )?;
                sub.manifest("sweep-row", c, started)?;
            }
            let report = SweepReport {
                rows: runs.into_iter().map(|r| r.row).collect(),
            };
            run.write("sweep.csv", &report.to_csv())?;
            print!("{}", report.to_csv());
            let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                eprintln!(
                    "warning: {failed} of {} sweep rows failed",
                    report.rows.len()
                );
            }
        }
        Command::TrainFlow => {
            let tok = flow_tokenizer(&mut run, &cfg, base, &data)?;
            let (flow, report) = flow_experiment(&tok, &cfg, &data)?;
            run.write("flow_metrics.csv", &flow_loss_csv(&flow.losses))?;
            run.save_checkpoint(
                FLOW_CKPT,
                &flow.to_checkpoint(&cfg.canonical(), cfg.flow.seed),
            )?;
            run.write("generation.csv", &generation_csv(&report))?;
            println!(
                "flow trained {} steps: final loss {:.4}, latent proxy-FID {:.4}, image proxy-FID {:.5}",
                flow.losses.len(),
                report.final_loss,
                report.latent_fid,
                report.image_fid
            );
        }
        Command::Sample { checkpoint } => {
            let tok = flow_tokenizer(&mut run, &cfg, base, &data)?;
            let path = checkpoint.clone().unwrap_or_else(|| run.file(FLOW_CKPT));
            let flow = FlowModel::from_checkpoint(&Checkpoint::load(&path)?, &cfg.flow_config())?;
            let val_latents = crate::experiment::encode_latents(&tok, &data.val.images)?;
            let (report, samples) =
                score_flow(&flow, &tok, &cfg, &data.val, &val_latents, &[10, 100])?;
            let labels = sample_labels(cfg.flow.samples, cfg.dataset.classes);
            let images = tok.decode_all(&samples, 256)?.clamp01();
            write_idx_f64(&run.file("samples-latents.idx"), &samples)?;
            run.record("samples-latents.idx");
            write_idx(
                &decoded_dataset(images, labels, cfg.dataset.classes),
                &run.file("samples-images.idx"),
                &run.file("samples-labels.idx"),
            )?;
            run.record("samples-images.idx");
            run.record("samples-labels.idx");
            run.write("generation.csv", &generation_csv(&report))?;
            print!("{}", generation_csv(&report));
        }
        Command::Gradcheck { .. } | Command::Selftest => unreachable!("handled above"),
    }
    let dir = run.path.clone();
    run.manifest(cli.command.name(), &cfg, started)?;
    println!("run directory: {}", dir.display());
    Ok(0)
}

fn gradcheck(instances: usize, seed: u64) -> i32 {
    let mut failed = 0;
    for (name, r) in gradsuite::run_suite(instances, seed, Default::default()) {
        match r {
            Ok(r) if r.passed => println!("PASS {name:<22} max rel err {:.3e}", r.max_rel_error),
            Ok(r) => {
                failed += 1;
                println!("FAIL {name:<22} max rel err {:.3e}", r.max_rel_error);
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {name:<22} error[{}]: {e}", e.code());
            }
        }
    }
    if failed == 0 {
        0
    } else {
        eprintln!("error[E_GRADCHECK]: {failed} operation(s) failed");
        1
    }
}

fn run_selftest() -> i32 {
    let mut failed = 0;
    for (name, failure) in selftest::run() {
        match failure {
            None => println!("PASS {name}"),
            Some(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    if failed == 0 {
        0
    } else {
        eprintln!("error[E_SELFTEST]: {failed} example table(s) failed");
        1
    }
}
