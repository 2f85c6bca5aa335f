//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL`
//! line to the uncaptured stdout, then asserts.
//!
//! The training-heavy criteria (4, 5, 6) drive the `softvq` binary and read
//! the CSV files it writes; their runs are shared through `OnceLock`s.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use softvq::autodiff::GradCheckConfig;
use softvq::config::ExperimentConfig;
use softvq::datagen::gen_shapes;
use softvq::eval::codebook_perplexity;
use softvq::experiment::sweep_grid;
use softvq::flow::{euler_sample, train_flow, FlowConfig, GaussianVelocity};
use softvq::gradsuite;
use softvq::objectives::{softvq_kl, LossWeights};
use softvq::quantizers::{
    gmmvq_posterior, hardvq_quantize, pq_quantize, rq_quantize, softvq_posterior, softvq_quantize,
    Codebook, QuantizerKind, QuantizerSpec,
};
use softvq::tensor::{rng_from_seed, SeededRng};
use softvq::tokenizer::ModelConfig;
use softvq::trainer::{Checkpoint, Tokenizer, TrainConfig, Trainer};
use softvq::Tensor;

fn report(n: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2}: {verdict}  {detail}");
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_softvq")
}

fn softvq_cli(args: &[&str], config: &Path, out: &Path) {
    let status = Command::new(bin())
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("spawn softvq");
    assert!(status.success(), "softvq {args:?} failed: {status}");
}

fn scratch_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temp dir"))
        .path()
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn c01_gradient_suite() {
    let start = Instant::now();
    let results = gradsuite::run_suite(10, 2024, GradCheckConfig::default());
    let secs = start.elapsed().as_secs_f64();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (name, r) in &results {
        match r {
            Ok(r) if r.passed => worst = worst.max(r.max_rel_error),
            Ok(r) => failures.push(format!("{name} ({:.2e})", r.max_rel_error)),
            Err(e) => failures.push(format!("{name} ({e})")),
        }
    }
    let pass = failures.is_empty() && secs < 120.0;
    report(
        1,
        pass,
        &format!(
            "{} ops x 10 instances, worst rel err {worst:.2e}, {secs:.1}s{}",
            results.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failures.join(", "))
            }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

/// Nearest-neighbour margin: second-smallest minus smallest codeword distance.
fn margin(z: &[f64], cb: &Tensor) -> f64 {
    let mut d: Vec<f64> = cb
        .rows()
        .map(|c| {
            c.iter()
                .zip(z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[1] - d[0]
}

fn hard_limit_instance(rng: &mut SeededRng) -> (Tensor, Codebook) {
    loop {
        let k = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        let cb = Tensor::randn(vec![k, d], 1.0, rng);
        let z = Tensor::randn(vec![1, 1, d], 1.0, rng);
        if margin(z.data(), &cb) >= 0.1 {
            return (z, Codebook::new(cb).expect("finite codebook"));
        }
    }
}

#[test]
fn c02_hard_limit_equivalence() {
    let mut rng = rng_from_seed(2);
    let mut max_diff = 0.0f64;
    let mut argmax_agree = 0;
    let n = 1000;
    for _ in 0..n {
        let (z, cb) = hard_limit_instance(&mut rng);
        let q = softvq_posterior(&z, &cb, 1e-4).unwrap();
        let soft = softvq_quantize(&q, &cb).unwrap();
        let (hard, idx, _, _) = hardvq_quantize(&z, &cb).unwrap();
        max_diff = max_diff.max(soft.max_abs_diff(&hard));
        if q.argmax() == idx {
            argmax_agree += 1;
        }
    }
    let pass = max_diff <= 1e-3 && argmax_agree == n;
    report(
        2,
        pass,
        &format!("{n} instances at tau=1e-4: max |soft - hard| {max_diff:.2e}, argmax agreement {argmax_agree}/{n}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

fn random_rows(rng: &mut SeededRng, rows: usize, k: usize) -> Tensor {
    // mix of dense and near one-hot rows
    let sharp = rng.random_bool(0.3);
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..k)
            .map(|_| {
                let u: f64 = rng.random_range(0.0..1.0);
                if sharp {
                    u.powi(12)
                } else {
                    u
                }
            })
            .collect();
        let s: f64 = raw.iter().sum::<f64>().max(1e-300);
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::from_vec(vec![rows, k], data)
}

#[test]
fn c03_kl_bounds() {
    let mut rng = rng_from_seed(3);
    let mut violations = 0;
    let mut identical_max = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=32);
        let rows = rng.random_range(1..=24);
        let q = random_rows(&mut rng, rows, k);
        let kl = softvq_kl(&q).unwrap();
        if !(kl <= 1e-12 && kl >= -(k as f64).ln() - 1e-12) {
            violations += 1;
        }
        let row = random_rows(&mut rng, 1, k);
        let same = Tensor::from_vec(vec![rows, k], row.data().repeat(rows));
        identical_max = identical_max.max(softvq_kl(&same).unwrap().abs());
    }
    let mut two = Tensor::zeros(vec![2, 1, 4]);
    two.data_mut()[1] = 1.0;
    two.data_mut()[6] = 1.0;
    let two_kl = softvq_kl(&two).unwrap();
    let pass = violations == 0
        && identical_max <= 1e-12
        && (two_kl + std::f64::consts::LN_2).abs() <= 1e-6;
    report(
        3,
        pass,
        &format!(
            "1000 batches: {violations} outside [-ln K, 0]; identical rows |kl| <= {identical_max:.1e}; two one-hots {two_kl:.9}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------- criteria 4, 5, 6

/// Shared tokenizer settings for the trend criteria.
const TREND_BASE: &str = "\
[model]
W = 32
mlp_ratio = 2
D = 16
[quantizer]
K = 64
[trainer]
steps = 2000
batch = 16
lr = 0.003
warmup = 100
seed = 1
";

struct SweepOutcome {
    /// kind -> L -> (final_recon, perplexity, probe_acc)
    rows: HashMap<(String, usize), (f64, f64, f64)>,
    configs: Vec<ExperimentConfig>,
    out: PathBuf,
}

fn run_sweep_cli(name: &str, extra: &str) -> SweepOutcome {
    let dir = scratch_dir().join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("sweep.cfg");
    let text = format!("{TREND_BASE}{extra}");
    std::fs::write(&cfg_path, &text).unwrap();
    let out = dir.join("runs");
    softvq_cli(&["sweep"], &cfg_path, &out);
    let (base, _) = ExperimentConfig::parse_str(&text, "sweep.cfg").unwrap();
    let csv = std::fs::read_to_string(out.join(format!("{:016x}", base.hash())).join("sweep.csv"))
        .unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |n: &str| header.iter().position(|h| *h == n).unwrap();
    let mut rows = HashMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert!(f[col("error")].is_empty(), "sweep row failed: {line}");
        let num = |n: &str| f[col(n)].parse::<f64>().unwrap();
        rows.insert(
            (f[col("kind")].to_string(), f[col("L")].parse().unwrap()),
            (num("final_recon"), num("perplexity"), num("probe_acc")),
        );
    }
    SweepOutcome {
        rows,
        configs: sweep_grid(&base),
        out,
    }
}

/// SoftVQ and hard VQ at L in {4, 8, 16}, reconstruction only.
fn recon_sweep() -> &'static SweepOutcome {
    static S: OnceLock<SweepOutcome> = OnceLock::new();
    S.get_or_init(|| {
        run_sweep_cli(
            "recon",
            "[loss]\nalign = false\n[eval]\nsweep_kinds = softvq, hardvq\nsweep_L = 4, 8, 16\n",
        )
    })
}

/// Aligned SoftVQ at L = 8 with the same budget.
fn aligned_sweep() -> &'static SweepOutcome {
    static S: OnceLock<SweepOutcome> = OnceLock::new();
    S.get_or_init(|| {
        run_sweep_cli(
            "aligned",
            "[loss]\nalign = true\nlambda_align = 0.1\n[eval]\nsweep_kinds = softvq\nsweep_L = 8\n",
        )
    })
}

#[test]
fn c04_less_lossy_trend() {
    let s = recon_sweep();
    let mse = |kind: &str, l: usize| s.rows[&(kind.to_string(), l)].0;
    let ratio = |kind: &str| mse(kind, 4) / mse(kind, 16);
    let (soft_ratio, hard_ratio) = (ratio("softvq"), ratio("hardvq"));
    let per_l: Vec<String> = [4, 8, 16]
        .iter()
        .map(|&l| {
            format!(
                "L={l} soft {:.4} hard {:.4}",
                mse("softvq", l),
                mse("hardvq", l)
            )
        })
        .collect();
    let ratio_ok = soft_ratio < hard_ratio;
    let every_l_ok = [4, 8, 16]
        .iter()
        .all(|&l| mse("softvq", l) <= mse("hardvq", l));
    let pass = ratio_ok && every_l_ok;
    report(
        4,
        pass,
        &format!(
            "degradation ratio soft {soft_ratio:.3} vs hard {hard_ratio:.3} ({}); {} ({})",
            if ratio_ok { "ok" } else { "not smaller" },
            per_l.join(", "),
            if every_l_ok {
                "ok"
            } else {
                "softvq above hard vq"
            }
        ),
    );
    assert!(pass);
}

#[test]
fn c05_alignment_improves_probe() {
    let plain = recon_sweep().rows[&("softvq".to_string(), 8)].2;
    let aligned = aligned_sweep().rows[&("softvq".to_string(), 8)].2;
    let gain = 100.0 * (aligned - plain);
    let pass = gain >= 10.0;
    report(
        5,
        pass,
        &format!(
            "linear probe, SoftVQ L=8: lambda_align=0.1 {:.1}% vs 0 {:.1}% ({gain:+.1} points)",
            100.0 * aligned,
            100.0 * plain
        ),
    );
    assert!(pass);
}

/// Proxy-FID at the configured Euler step count from a `generation.csv`.
fn latent_fid(csv: &str, steps: usize) -> f64 {
    csv.lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_once(',').unwrap())
        .find(|(s, _)| s.parse::<usize>().unwrap() == steps)
        .map(|(_, v)| v.parse().unwrap())
        .expect("fid for requested step count")
}

fn flow_fids(label: &str, sweep: &SweepOutcome, kind: QuantizerKind) -> Vec<f64> {
    let tok_cfg = sweep
        .configs
        .iter()
        .find(|c| c.quantizer.kind == kind && c.model.l == 8)
        .expect("L=8 run in sweep");
    let ckpt = sweep
        .out
        .join(format!("{:016x}", tok_cfg.hash()))
        .join("tokenizer.ckpt");
    let dir = scratch_dir().join(format!("flow-{label}"));
    std::fs::create_dir_all(&dir).unwrap();
    (0..3)
        .map(|seed| {
            let mut cfg = tok_cfg.clone();
            cfg.flow.tokenizer = ckpt.display().to_string();
            cfg.flow.seed = seed;
            cfg.flow.steps = 2000;
            let path = dir.join(format!("seed{seed}.cfg"));
            std::fs::write(&path, cfg.canonical()).unwrap();
            let out = dir.join("runs");
            softvq_cli(&["train-flow"], &path, &out);
            let csv = std::fs::read_to_string(
                out.join(format!("{:016x}", cfg.hash()))
                    .join("generation.csv"),
            )
            .unwrap();
            latent_fid(&csv, cfg.flow.sample_steps)
        })
        .collect()
}

#[test]
fn c06_latent_quality_transfers_to_generation() {
    let soft = flow_fids("softvq", aligned_sweep(), QuantizerKind::SoftVq);
    let hard = flow_fids("hardvq", recon_sweep(), QuantizerKind::HardVq);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&soft), mean(&hard));
    let pass = a < b;
    report(
        6,
        pass,
        &format!("latent proxy-FID over 3 flow seeds: aligned SoftVQ {a:.3} {soft:.3?} vs hard VQ {b:.3} {hard:.3?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn c07_variant_reductions() {
    let mut rng = rng_from_seed(7);
    let (mut gmm_exact, mut pq_exact, mut rq_exact) = (0, 0, 0);
    let n = 200;
    for i in 0..n {
        let (b, l, d, k) = (
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=6),
            rng.random_range(2..=12),
        );
        let tau = rng.random_range(0.01..2.0);
        let z = Tensor::randn(vec![b, l, d], 1.0, &mut rng);
        let cb = Codebook::new(Tensor::randn(vec![k, d], 1.0, &mut rng)).unwrap();
        let soft = softvq_posterior(&z, &cb, tau).unwrap();
        let soft_latent = softvq_quantize(&soft, &cb).unwrap();
        let omega = Tensor::full(vec![b, l], 1.0 / tau);
        if gmmvq_posterior(&z, &cb, &omega).unwrap().probs == soft.probs {
            gmm_exact += 1;
        }
        let (pq, pq_post) = pq_quantize(&z, std::slice::from_ref(&cb), tau).unwrap();
        if pq == soft_latent && pq_post[0].probs == soft.probs {
            pq_exact += 1;
        }
        let (rq, rq_post, _) = rq_quantize(&z, &cb, 1, tau).unwrap();
        if rq == soft_latent && rq_post[0].probs == soft.probs {
            rq_exact += 1;
        }
        // the tokenizer path as well, on a shared seed
        if i < 5 {
            let model = ModelConfig {
                image_size: 16,
                latent_tokens: 4,
                latent_dim: 8,
                width: 16,
                enc_depth: 1,
                dec_depth: 1,
                align_dim: None,
                ..ModelConfig::default()
            };
            let images = gen_shapes(i, 4, 4, 16).unwrap().images;
            let plain = Tokenizer::new(model.clone(), QuantizerSpec::default(), i).unwrap();
            let base = plain.encode(&images).unwrap();
            for spec in [
                QuantizerSpec {
                    groups: 1,
                    ..QuantizerSpec::default()
                },
                QuantizerSpec {
                    layers: 1,
                    per_layer_codebooks: true,
                    ..QuantizerSpec::default()
                },
            ] {
                let enc = Tokenizer::new(model.clone(), spec, i)
                    .unwrap()
                    .encode(&images)
                    .unwrap();
                assert_eq!(enc.latent, base.latent);
            }
        }
    }
    let pass = gmm_exact == n && pq_exact == n && rq_exact == n;
    report(
        7,
        pass,
        &format!("{n} instances bitwise equal to SoftVQ: GMMVQ(omega=1/tau) {gmm_exact}, PQ(G=1) {pq_exact}, RQ(layers=1) {rq_exact}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

const DETERMINISM_CFG: &str = "\
[dataset]
train_count = 128
val_count = 64
[model]
W = 16
L = 4
[quantizer]
K = 16
[trainer]
steps = 12
batch = 8
warmup = 2
checkpoint_every = 6
[flow]
steps = 15
hidden = 16
warmup = 2
samples = 32
[eval]
sweep_kinds = softvq, hardvq
sweep_L = 4, 8
";

fn run_all_commands(out: &Path, cfg: &Path) {
    for cmd in ["train-tokenizer", "eval", "sweep", "train-flow", "sample"] {
        softvq_cli(&[cmd], cfg, out);
    }
}

fn csv_files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    for run in std::fs::read_dir(root).unwrap() {
        let run = run.unwrap().path();
        for f in std::fs::read_dir(&run).unwrap() {
            let f = f.unwrap().path();
            if f.extension().is_some_and(|e| e == "csv") {
                files.push((
                    f.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&f).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

fn resume_matches() -> bool {
    let data = gen_shapes(5, 64, 4, 16).unwrap();
    let model = ModelConfig {
        latent_tokens: 4,
        latent_dim: 8,
        width: 16,
        enc_depth: 1,
        dec_depth: 1,
        align_dim: None,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        steps: 10,
        batch_size: 8,
        warmup_steps: 2,
        seed: 9,
        weights: LossWeights {
            align: 0.0,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    let fresh = || Tokenizer::new(model.clone(), QuantizerSpec::default(), 9).unwrap();
    let mut straight = Trainer::new(fresh(), config.clone()).unwrap();
    straight.run(&data, None).unwrap();

    let mut first = Trainer::new(fresh(), config.clone()).unwrap();
    first.run_until(&data, None, 5).unwrap();
    let bytes = first.checkpoint("resume").to_bytes();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(fresh(), config, &ckpt).unwrap();
    resumed.run(&data, None).unwrap();

    let params_equal = straight
        .tokenizer
        .params
        .values()
        .iter()
        .zip(resumed.tokenizer.params.values())
        .all(|(a, b)| a == b);
    let tail_equal = straight.metrics[5..]
        .iter()
        .zip(&resumed.metrics)
        .all(|(a, b)| a.csv_row() == b.csv_row());
    params_equal && tail_equal && resumed.metrics.len() == 5
}

#[test]
fn c08_determinism_and_persistence() {
    let dir = scratch_dir().join("determinism");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, DETERMINISM_CFG).unwrap();
    let (a, b) = (dir.join("a"), dir.join("b"));
    run_all_commands(&a, &cfg);
    run_all_commands(&b, &cfg);
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    let identical = !fa.is_empty() && fa == fb;
    let resume = resume_matches();
    let pass = identical && resume;
    report(
        8,
        pass,
        &format!(
            "{} CSV files across 5 commands {}; resume after 5 of 10 steps {}",
            fa.len(),
            if identical {
                "byte-identical"
            } else {
                "differ"
            },
            if resume { "bitwise equal" } else { "diverged" }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn c09_flow_matching_gaussian() {
    let (mean, var) = (1.5, 0.5);
    let n = 10_000;
    let labels = vec![0; n];
    let moments = |x: &Tensor| {
        let m = x.data().iter().sum::<f64>() / n as f64;
        let v = x.data().iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64;
        (m, v)
    };
    let exact = GaussianVelocity {
        mean: vec![mean],
        var: vec![var],
    };
    let (em, ev) = moments(&euler_sample(&exact, 100, &labels, 9).unwrap());

    // learned field on 1-D data, sampled and mapped back to data space
    let mut rng = rng_from_seed(19);
    let data = Tensor::from_vec(
        vec![4096, 1, 1],
        (0..4096)
            .map(|_| mean + var.sqrt() * Tensor::randn(vec![1], 1.0, &mut rng).data()[0])
            .collect(),
    );
    let cfg = FlowConfig {
        steps: 1500,
        hidden: 32,
        depth: 2,
        batch_size: 256,
        num_classes: 1,
        ..FlowConfig::default()
    };
    let flow = train_flow(&data, &vec![0; 4096], &cfg).unwrap();
    let (lm, lv) = moments(&flow.sample(100, &labels, 10).unwrap());

    let ok = |m: f64, v: f64| (m - mean).abs() <= 0.05 && (v - var).abs() <= 0.1;
    let pass = ok(em, ev) && ok(lm, lv);
    report(
        9,
        pass,
        &format!(
            "target N({mean}, {var}), 10^4 samples, 100 Euler steps: exact field mean {em:.4} var {ev:.4}; trained field mean {lm:.4} var {lv:.4}"
        ),
    );
    assert!(pass);
}

// --------------------------------------------------------------- criterion 10

fn posterior_paths() -> Vec<(&'static str, QuantizerSpec)> {
    let base = QuantizerSpec {
        codebook_size: 12,
        ..QuantizerSpec::default()
    };
    vec![
        ("softvq", base.clone()),
        (
            "softvq squared",
            QuantizerSpec {
                squared_distance: true,
                ..base.clone()
            },
        ),
        (
            "gmmvq",
            QuantizerSpec {
                kind: QuantizerKind::GmmVq,
                ..base.clone()
            },
        ),
        (
            "hardvq",
            QuantizerSpec {
                kind: QuantizerKind::HardVq,
                ..base.clone()
            },
        ),
        (
            "pq G=4",
            QuantizerSpec {
                groups: 4,
                ..base.clone()
            },
        ),
        (
            "rq shared",
            QuantizerSpec {
                layers: 3,
                ..base.clone()
            },
        ),
        (
            "rq per-layer",
            QuantizerSpec {
                layers: 3,
                per_layer_codebooks: true,
                ..base.clone()
            },
        ),
        (
            "sharp tau",
            QuantizerSpec {
                temperature: 1e-4,
                ..base
            },
        ),
    ]
}

#[test]
fn c10_posterior_contracts() {
    let images = gen_shapes(10, 32, 4, 16).unwrap().images;
    let mut worst_sum = 0.0f64;
    let mut negative = 0;
    let mut bad_ppl = Vec::new();
    let mut checked = 0;
    for (name, spec) in posterior_paths() {
        let k = spec.codebook_size as f64;
        for seed in 0..3 {
            let model = ModelConfig {
                latent_tokens: 4,
                latent_dim: 8,
                width: 16,
                enc_depth: 1,
                dec_depth: 1,
                align_dim: None,
                ..ModelConfig::default()
            };
            let tok = Tokenizer::new(model, spec.clone(), seed).unwrap();
            let enc = tok.encode(&images).unwrap();
            assert!(!enc.posteriors.is_empty(), "{name} reported no posterior");
            for q in &enc.posteriors {
                for row in q.rows() {
                    worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                    negative += row.iter().filter(|&&p| p < 0.0).count();
                    checked += 1;
                }
            }
            let ppl = codebook_perplexity(&enc.posteriors).unwrap();
            if !(1.0 - 1e-9..=k + 1e-9).contains(&ppl) {
                bad_ppl.push(format!("{name}: {ppl}"));
            }
        }
    }
    // trained posteriors from the trend sweep
    for (&(ref kind, l), &(_, ppl, _)) in &recon_sweep().rows {
        if !(1.0 - 1e-9..=64.0 + 1e-9).contains(&ppl) {
            bad_ppl.push(format!("trained {kind} L={l}: {ppl}"));
        }
    }
    let pass = worst_sum <= 1e-6 && negative == 0 && bad_ppl.is_empty();
    report(
        10,
        pass,
        &format!(
            "{checked} posterior rows over {} quantizer paths: max |sum - 1| {worst_sum:.1e}, {negative} negative entries; perplexity out of [1, K]: {}",
            posterior_paths().len(),
            if bad_ppl.is_empty() { "none".to_string() } else { bad_ppl.join(", ") }
        ),
    );
    assert!(pass);
}
