//! End-to-end checks of the `softvq` binary: the trainer smoke run, run
//! directory layout, flag handling and error reporting.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use softvq::config::ExperimentConfig;

fn softvq(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_softvq"));
    cmd.args(args).env_remove("SOFTVQ_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn softvq")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_dir(out: &Path, text: &str) -> PathBuf {
    let (cfg, _) = ExperimentConfig::parse_str(text, "test").unwrap();
    out.join(format!("{:016x}", cfg.hash()))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMOKE: &str = "\
[dataset]
seed = 7
train_count = 256
classes = 4
[model]
H = 16
L = 8
D = 16
[quantizer]
kind = softvq
K = 64
[trainer]
steps = 200
lr = 0.001
warmup = 20
";

fn recon_column(csv: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "recon").unwrap();
    lines
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn smoke_training_reduces_smoothed_recon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke.cfg", SMOKE);
    let out = dir.path().join("runs");
    let o = softvq(
        &[
            "train-tokenizer",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir(&out, SMOKE);
    for f in [
        "metrics.csv",
        "tokenizer.ckpt",
        "eval.json",
        "config.txt",
        "manifest.train-tokenizer.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let recon = recon_column(&std::fs::read_to_string(run.join("metrics.csv")).unwrap());
    assert_eq!(recon.len(), 200);
    let smoothed = |end: usize| recon[end - 20..end].iter().sum::<f64>() / 20.0;
    assert!(
        smoothed(200) < smoothed(20),
        "{} vs {}",
        smoothed(200),
        smoothed(20)
    );
    assert!(recon[199] < smoothed(20));
}

const TINY: &str = "\
[dataset]
train_count = 64
val_count = 32
[model]
W = 16
L = 4
[quantizer]
K = 8
[trainer]
steps = 6
batch = 4
warmup = 1
";

#[test]
fn identical_configs_give_identical_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let mut contents = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = softvq(
            &[
                "train-tokenizer",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            &[],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let run = run_dir(&out, TINY);
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&run)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| {
                !p.file_name()
                    .unwrap()
                    .to_str()
                    .unwrap()
                    .starts_with("manifest.")
            })
            .map(|p| {
                (
                    p.file_name().unwrap().to_str().unwrap().to_string(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        contents.push(files);
    }
    assert_eq!(contents[0].len(), 4);
    assert_eq!(contents[0], contents[1]);
}

#[test]
fn manifest_lists_emitted_files_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let o = softvq(
        &["train-tokenizer", "--config", cfg.to_str().unwrap()],
        &[("SOFTVQ_OUT", dir.path())],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir(dir.path(), TINY);
    let m: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run.join("manifest.train-tokenizer.json")).unwrap(),
    )
    .unwrap();
    let (parsed, _) = ExperimentConfig::parse_str(TINY, "test").unwrap();
    assert_eq!(m["config_hash"], format!("{:016x}", parsed.hash()));
    assert_eq!(m["config"], parsed.canonical());
    let files: Vec<&str> = m["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f.as_str().unwrap())
        .collect();
    assert!(files.contains(&"metrics.csv") && files.contains(&"tokenizer.ckpt"));
    for f in files {
        assert!(run.join(f).exists(), "{f} listed but missing");
    }
    assert!(m["finished_unix"].as_f64().unwrap() >= m["started_unix"].as_f64().unwrap());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let o = softvq(
        &[
            "train-tokenizer",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "42",
            "--threads",
            "1",
        ],
        &[("SOFTVQ_OUT", dir.path())],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir(dir.path(), &format!("{TINY}seed = 42\n[flow]\nseed = 42\n"));
    assert!(run.join("metrics.csv").exists());
}

#[test]
fn config_errors_name_the_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (
            "[quantizer]\nkind = sotfvq\n",
            "tiny.cfg:2",
            "quantizer.kind",
        ),
        ("model.L = 3\n", "tiny.cfg:1", "model.L"),
        ("[model]\nwidth = 8\n", "tiny.cfg:2", "model.width"),
        ("trainer.steps = many\n", "tiny.cfg:1", "trainer.steps"),
    ];
    for (text, location, key) in cases {
        let cfg = write_config(dir.path(), "tiny.cfg", text);
        let o = softvq(
            &["train-tokenizer", "--config", cfg.to_str().unwrap()],
            &[("SOFTVQ_OUT", dir.path())],
        );
        assert_eq!(o.status.code(), Some(2), "{text}");
        let err = stderr(&o);
        assert!(err.starts_with("error[E_CONFIG]"), "{err}");
        assert!(err.contains(location) && err.contains(key), "{text}: {err}");
    }
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.cfg");
    let o = softvq(
        &["eval", "--config", missing.to_str().unwrap()],
        &[("SOFTVQ_OUT", dir.path())],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[E_IO]"));

    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let o = softvq(
        &["eval", "--config", cfg.to_str().unwrap()],
        &[("SOFTVQ_OUT", dir.path())],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("tokenizer.ckpt"));
}

#[test]
fn gradcheck_and_selftest_commands_pass() {
    for cmd in ["gradcheck", "selftest"] {
        let o = softvq(&[cmd], &[]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert!(!stdout.contains("FAIL"), "{stdout}");
        assert!(stdout.lines().count() >= 13);
    }
}

#[test]
fn sweep_subruns_get_sibling_directories() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}[eval]\nsweep_kinds = softvq, hardvq\nsweep_L = 2, 4\n");
    let cfg = write_config(dir.path(), "sweep.cfg", &text);
    let o = softvq(
        &["sweep", "--config", cfg.to_str().unwrap()],
        &[("SOFTVQ_OUT", dir.path())],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(run_dir(dir.path(), &text).join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let (base, _) = ExperimentConfig::parse_str(&text, "test").unwrap();
    for sub in softvq::experiment::sweep_grid(&base) {
        let d = dir.path().join(format!("{:016x}", sub.hash()));
        assert!(d.join("metrics.csv").exists() && d.join("tokenizer.ckpt").exists());
    }
}
