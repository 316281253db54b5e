use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{Array1, Array2};
use sparsealloc::checkpoint::{save_checkpoint, SaveRequest};
use sparsealloc::zipf::{fit_zipf, write_density_csv};
use sparsealloc::{
    AllocationPolicy, CheckpointMeta, EvalReport, RunConfig, SaeParams, StepRecord, TrainReport,
    ZipfFit,
};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparsealloc"));
    c.env("SPARSEALLOC_THREADS", "1");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    run(args, cwd).status.code().expect("exited normally")
}

fn gen_small(dir: &Path, name: &str, seed: &str) -> PathBuf {
    ok(
        &[
            "gen-data", "--out", name, "--tokens", "8192", "--seed", seed,
        ],
        dir,
    );
    dir.join(name)
}

const SMALL_RUN: &[&str] = &[
    "train",
    "--preset",
    "smoke",
    "--data",
    "d.bin",
    "--truth",
    "d.bin.truth.json",
    "--steps",
    "24",
    "--batch-size",
    "256",
    "--eval-tokens",
    "1024",
    "--shuffle-buffer-tokens",
    "2048",
    "--window-tokens",
    "1024",
    "--dead-threshold-tokens",
    "1024",
    "--refit-interval",
    "5",
];

fn small_run(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = SMALL_RUN.to_vec();
    args.extend_from_slice(&["--out", out]);
    args.extend_from_slice(extra);
    ok(&args, dir);
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_directory_has_every_artifact_with_its_schema() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gen_small(dir, "d.bin", "3");
    small_run(dir, "run", &["--recipe", "mc-fc", "--phase2-steps", "8"]);
    let run = dir.join("run");

    for f in [
        "config.json",
        "meta.json",
        "tensors.bin",
        "log.jsonl",
        "report.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let config: RunConfig = read(&run.join("config.json"));
    assert_eq!(config.steps, 16);
    assert_eq!(config.phase2.steps, 8);
    assert!(config.phase2.enabled);
    let raw: serde_json::Value = read(&run.join("config.json"));
    for key in [
        "weights",
        "zipf",
        "tracking",
        "optimizer",
        "criterion",
        "rectify",
    ] {
        assert!(raw.get(key).is_some(), "config.json lacks {key}");
    }

    let meta: CheckpointMeta = read(&run.join("meta.json"));
    assert_eq!((meta.d_model, meta.features), (64, 512));
    assert_eq!(meta.steps_completed, 24);
    assert_eq!(meta.dtype, "f32-le");
    let names: Vec<&str> = meta.tensors.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["W_enc", "b_enc", "W_dec", "b_pre"]);
    let floats = 512 * 64 * 2 + 512 + 64;
    assert_eq!(
        fs::metadata(run.join("tensors.bin")).unwrap().len(),
        4 * floats as u64
    );

    let log: Vec<StepRecord> = fs::read_to_string(run.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.len(), 24);
    assert!(log.iter().all(|r| r.dec_norm_max_dev < 1e-6));
    let phase2: Vec<&StepRecord> = log.iter().filter(|r| r.phase == 2).collect();
    assert_eq!(phase2.len(), 8);
    for r in phase2 {
        assert_eq!(r.policy, "feature_choice");
        assert_eq!(r.loss.aux_k, 0.0);
        assert_eq!(r.loss.aux_zipf, 0.0);
        assert_eq!(r.loss.weighted.aux_k, 0.0);
        assert_eq!(r.loss.weighted.aux_zipf, 0.0);
    }

    let report: TrainReport = read(&run.join("report.json"));
    assert_eq!(report.final_policy, "feature_choice");
    assert_eq!(report.reconstruction_metric, "fvu");
    let eval = report.eval.expect("eval tail was held out");
    assert_eq!(eval.tokens, 1024);
    assert!(eval.recovery_score.is_some());
    assert!(report.final_mse < report.initial_mse);
}

#[test]
fn same_config_and_seed_give_identical_artifacts() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gen_small(dir, "d.bin", "5");
    small_run(dir, "a", &["--save-optimizer", "true"]);
    small_run(dir, "b", &["--save-optimizer", "true"]);
    let mut names: Vec<_> = fs::read_dir(dir.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "densities")
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n == "optim.bin"));
    for name in names {
        let a = fs::read(dir.join("a").join(&name)).unwrap();
        let b = fs::read(dir.join("b").join(&name)).unwrap();
        if name == "meta.json" || name == "config.json" {
            let strip = |bytes: &[u8]| {
                let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
                let obj = v.as_object_mut().unwrap();
                obj.remove("created_at");
                obj.remove("out_dir");
                if let Some(c) = obj.get_mut("config") {
                    c.as_object_mut().unwrap().remove("out_dir");
                }
                v
            };
            assert_eq!(strip(&a), strip(&b), "{name:?} differs");
        } else {
            assert!(a == b, "{name:?} differs");
        }
    }
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let a = gen_small(tmp.path(), "a.bin", "7");
    let b = gen_small(tmp.path(), "b.bin", "7");
    let c = gen_small(tmp.path(), "c.bin", "8");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let bytes = fs::read(&a).unwrap();
    assert_eq!(&bytes[..8], b"SAEACT01");
    assert_eq!(bytes.len(), 32 + 8192 * 64 * 4);
    assert!(tmp.path().join("a.bin.truth.json").is_file());
}

#[test]
fn fit_zipf_recovers_beta_from_an_exact_curve() {
    let tmp = TempDir::new().unwrap();
    let d: Vec<f64> = (1..=100).map(|r| 1000.0 / (r as f64 + 6.8)).collect();
    write_density_csv(&tmp.path().join("d.csv"), &d).unwrap();
    let text = ok(
        &["fit-zipf", "--density", "d.csv", "--fix-alpha", "1.0"],
        tmp.path(),
    );
    let fit: ZipfFit = serde_json::from_str(&text).unwrap();
    assert!(
        (fit.params.beta - 6.8).abs() < 1e-3,
        "beta {}",
        fit.params.beta
    );
    assert_eq!(fit.params.alpha, 1.0);
    let direct = fit_zipf(&d, Some(1.0)).unwrap();
    assert_eq!(fit, direct);
}

/// Decoder rows `±e_i` with a ReLU gate reproduce any centered input exactly.
fn identity_checkpoint(dir: &Path, d_model: usize) {
    let f = 2 * d_model;
    let mut w = Array2::zeros((f, d_model));
    for i in 0..d_model {
        w[[2 * i, i]] = 1.0;
        w[[2 * i + 1, i]] = -1.0;
    }
    let params =
        SaeParams::from_parts(w.clone(), Array1::zeros(f), w, Array1::zeros(d_model)).unwrap();
    let config = RunConfig {
        width_multiple: 2,
        batch_size: 512,
        ..RunConfig::desk()
    };
    save_checkpoint(
        dir,
        &SaveRequest {
            params: &params,
            policy: &AllocationPolicy::relu(),
            budgets_clamped_to_one: 0,
            steps_completed: 0,
            optimizer: None,
            config: &config,
        },
    )
    .unwrap();
}

#[test]
fn identity_checkpoint_evaluates_to_zero_fvu() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gen_small(dir, "d.bin", "1");
    identity_checkpoint(&dir.join("ident"), 64);
    let text = ok(&["eval", "--checkpoint", "ident", "--data", "d.bin"], dir);
    let report: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.tokens, 8192);
    assert!(report.fvu.abs() < 1e-10, "fvu {}", report.fvu);
    assert!(report.mse.abs() < 1e-10);
}

#[test]
fn streaming_eval_calibrates_then_gates() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gen_small(dir, "d.bin", "2");
    small_run(dir, "run", &[]);
    ok(
        &[
            "eval",
            "--checkpoint",
            "run",
            "--data",
            "d.bin",
            "--streaming",
            "--calibration-batches",
            "4",
            "--out",
            "stream.json",
        ],
        dir,
    );
    let report: EvalReport = read(&dir.join("stream.json"));
    assert_eq!(report.tokens, 8192 - 4 * 256);
    assert!(report.fvu.is_finite() && report.fvu < 1.5);
    assert!(report.mean_l0 > 0.0);
}

#[test]
fn export_plots_writes_tables() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gen_small(dir, "d.bin", "4");
    small_run(dir, "run", &[]);
    let listed = ok(&["export-plots", "--run", "run", "--out", "plots"], dir);
    assert_eq!(listed.lines().count(), 3);
    let density = fs::read_to_string(dir.join("plots/density_vs_rank.csv")).unwrap();
    assert_eq!(density.lines().next(), Some("rank,density,zipf_fit"));
    assert_eq!(density.lines().count(), 513);
    let prog = fs::read_to_string(dir.join("plots/progressive_codes.csv")).unwrap();
    assert!(prog.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn exit_codes_separate_usage_io_and_numeric_failures() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&["train", "--no-such-flag"], dir), 1);
    assert_eq!(code(&["frobnicate"], dir), 1);
    assert_eq!(code(&["train", "--preset", "nope", "--dry-run"], dir), 1);
    assert_eq!(code(&["train", "--policy", "softmax", "--dry-run"], dir), 1);
    assert_eq!(code(&["fit-zipf", "--density", "missing.csv"], dir), 2);
    assert_eq!(code(&["train", "--data", "missing.bin"], dir), 2);
    assert_eq!(code(&["export-plots", "--out", "p"], dir), 1);

    fs::write(
        dir.join("junk.bin"),
        b"NOTMAGIC-and-more-bytes-than-a-header-holds",
    )
    .unwrap();
    assert_eq!(code(&["train", "--data", "junk.bin"], dir), 2);

    // Too few rows for one batch plus the held-out tail.
    gen_small(dir, "d.bin", "0");
    assert_eq!(
        code(&["train", "--data", "d.bin", "--eval-tokens", "7680"], dir),
        3
    );

    let flat = vec![0.5; 100];
    write_density_csv(&dir.join("flat.csv"), &flat).unwrap();
    assert_eq!(
        code(
            &["fit-zipf", "--density", "flat.csv", "--fix-alpha", "-1"],
            dir
        ),
        1
    );
}

#[test]
fn dry_run_prints_the_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let text = ok(
        &[
            "train",
            "--preset",
            "desk",
            "--recipe",
            "tc",
            "--expected-k",
            "12",
            "--dry-run",
        ],
        tmp.path(),
    );
    let c = RunConfig::from_json(&text).unwrap();
    assert_eq!(c.expected_k, 12.0);
    assert_eq!(c.weights.lambda_aux_zipf, 0.0);
    assert_eq!(c.preset, "desk");
    let cfg_path = tmp.path().join("c.json");
    fs::write(&cfg_path, &text).unwrap();
    let again = ok(&["train", "--config", "c.json", "--dry-run"], tmp.path());
    assert_eq!(RunConfig::from_json(&again).unwrap(), c);
}
