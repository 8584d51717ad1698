use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mipeaks::toy::{encode_weights, ToyConfig, ToyTransformer};
use mipeaks::trace_io::{write_trace_file, RepresentationTrace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn mipeaks(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mipeaks"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MIPEAKS_SEED")
        .output()
        .expect("spawn mipeaks")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every file below `root`, relative path to contents.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn noise(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Eight traces of 12 steps where step 5 is a copy of the gold vector and
/// every other step is low-amplitude noise.
fn crafted_batch(dir: &Path) -> Vec<String> {
    let (t, d) = (12, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..8)
        .map(|i| {
            let gold = noise(&mut rng, d, 1.0);
            let mut steps = noise(&mut rng, t * d, 0.05);
            steps[5 * d..6 * d].copy_from_slice(&gold);
            let trace = RepresentationTrace::new(steps, t, gold, 1, d).unwrap();
            let name = format!("trace_{i}.mitc");
            write_trace_file(&trace, &dir.join(&name)).unwrap();
            name
        })
        .collect()
}

fn peak_steps(csv: &str) -> Vec<usize> {
    csv.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[2] == "1").then(|| f[0].parse().unwrap())
        })
        .collect()
}

#[test]
fn analyze_flags_gold_copy_step() {
    let tmp = TempDir::new().unwrap();
    let mut args: Vec<String> = vec!["analyze".into()];
    args.extend(crafted_batch(tmp.path()));
    args.extend(["--out".into(), "out".into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = mipeaks(tmp.path(), &argv);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("out/mi.csv")).unwrap();
    assert_eq!(peak_steps(&csv), vec![5]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    for col in ["ratio", "max_int", "min_int", "avg_int", "mean", "std", "aom"] {
        assert!(stdout.contains(col), "missing column {col}");
    }
    assert!(tmp.path().join("out/summary.csv").exists());
    assert!(tmp.path().join("out/report.json").exists());
}

#[test]
fn analyze_constant_trace_has_no_peaks() {
    let tmp = TempDir::new().unwrap();
    let trace = RepresentationTrace::new(vec![0.25; 20 * 3], 20, vec![1.0, -1.0, 0.5], 1, 3).unwrap();
    write_trace_file(&trace, &tmp.path().join("flat.mitc")).unwrap();
    let o = mipeaks(
        tmp.path(),
        &["analyze", "--mode", "single", "flat.mitc", "--out", "out"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("out/mi_0000.csv")).unwrap();
    assert!(peak_steps(&csv).is_empty());
    for line in csv.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v.abs() <= 1e-12);
    }
}

#[test]
fn analyze_missing_file_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let names = crafted_batch(tmp.path());
    let o = mipeaks(tmp.path(), &["analyze", &names[0], "absent.mitc", "--out", "out"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("absent.mitc"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn analyze_corrupt_file_names_trace() {
    let tmp = TempDir::new().unwrap();
    let names = crafted_batch(tmp.path());
    let p = tmp.path().join(&names[3]);
    let mut bytes = fs::read(&p).unwrap();
    bytes[30] ^= 0xff;
    fs::write(&p, bytes).unwrap();
    let mut argv = vec!["analyze"];
    argv.extend(names.iter().map(String::as_str));
    argv.extend(["--out", "out"]);
    let o = mipeaks(tmp.path(), &argv);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(&names[3]));
}

#[test]
fn analyze_too_few_traces_is_insufficient() {
    let tmp = TempDir::new().unwrap();
    let names = crafted_batch(tmp.path());
    let o = mipeaks(tmp.path(), &["analyze", &names[0], &names[1], "--out", "out"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = mipeaks(tmp.path(), &["bounds", "verify", "--out", "o", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn bounds_zero_trials() {
    let tmp = TempDir::new().unwrap();
    let o = mipeaks(tmp.path(), &["bounds", "verify", "--trials", "0", "--out", "b"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("b/bounds_report.json")).unwrap()).unwrap();
    assert_eq!(report["trials"], 0);
    assert_eq!(report["violations"], 0);
    assert_eq!(report["fano"]["checks"], 0);
}

#[test]
fn bounds_default_run_passes() {
    let tmp = TempDir::new().unwrap();
    let o = mipeaks(
        tmp.path(),
        &["bounds", "verify", "--trials", "1000", "--seed", "42", "--out", "b"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("b/bounds_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn bounds_negative_control_fails_with_report() {
    let tmp = TempDir::new().unwrap();
    let o = mipeaks(
        tmp.path(),
        &["bounds", "verify", "--trials", "20", "--negative-control", "--out", "b"],
    );
    assert_eq!(code(&o), 4);
    assert!(tmp.path().join("b/bounds_report.json").exists());
}

#[test]
fn bounds_seed_from_environment() {
    let tmp = TempDir::new().unwrap();
    let run = |out: &str, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_mipeaks"));
        c.args(["bounds", "verify", "--trials", "5", "--out", out])
            .current_dir(tmp.path());
        match env {
            Some(s) => c.env("MIPEAKS_SEED", s),
            None => c.env_remove("MIPEAKS_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        fs::read(tmp.path().join(out).join("bounds_report.json")).unwrap()
    };
    let a = run("a", Some("7"));
    let b = run("b", None);
    let o = mipeaks(
        tmp.path(),
        &["bounds", "verify", "--trials", "5", "--seed", "7", "--out", "c"],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(a, fs::read(tmp.path().join("c/bounds_report.json")).unwrap());
    assert_ne!(a, b);
}

#[test]
fn train_zero_steps_writes_initialization() {
    let tmp = TempDir::new().unwrap();
    let o = mipeaks(
        tmp.path(),
        &[
            "toy",
            "train",
            "--steps",
            "0",
            "--seed",
            "3",
            "--eval-instances",
            "0",
            "--out",
            "m",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = ToyConfig {
        seed: 3,
        ..Default::default()
    };
    let want = encode_weights(&ToyTransformer::new(cfg).unwrap());
    assert_eq!(fs::read(tmp.path().join("m/weights.mitw")).unwrap(), want);
}

#[test]
fn train_divergence_exit_code() {
    let tmp = TempDir::new().unwrap();
    let o = mipeaks(
        tmp.path(),
        &[
            "toy",
            "train",
            "--steps",
            "30",
            "--lr",
            "1e200",
            "--grad-clip",
            "0",
            "--out",
            "m",
        ],
    );
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(!tmp.path().join("m/weights.mitw").exists());
}

#[test]
fn bad_weights_file_is_input_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("w.mitw"), b"MITW garbage").unwrap();
    let o = mipeaks(tmp.path(), &["toy", "ttts-exp", "--weights", "w.mitw", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("w.mitw"));
}

fn short_model(dir: &Path) {
    let o = mipeaks(
        dir,
        &["toy", "train", "--steps", "300", "--eval-instances", "20", "--out", "m"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn experiments_emit_both_arms() {
    let tmp = TempDir::new().unwrap();
    short_model(tmp.path());
    let w = "m/weights.mitw";

    let o = mipeaks(
        tmp.path(),
        &[
            "toy",
            "suppress-exp",
            "--weights",
            w,
            "--top-n",
            "3",
            "--instances",
            "40",
            "--out",
            "s",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&tmp.path().join("s/suppression.csv"));
    for n in 1..=3 {
        for arm in ["thinking", "random"] {
            assert!(rows.iter().any(|r| r[0] == n.to_string() && r[1] == arm), "N={n} {arm}");
        }
    }
    assert!(tmp.path().join("s/suppression.json").exists());

    let o = mipeaks(
        tmp.path(),
        &[
            "toy",
            "ttts-exp",
            "--weights",
            w,
            "--budgets",
            "8,16,32",
            "--instances",
            "40",
            "--out",
            "t",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&tmp.path().join("t/ttts.csv"));
    assert_eq!(rows.len(), 6);
    for arm in ["plain", "ttts"] {
        let budgets: Vec<&str> = rows.iter().filter(|r| r[1] == arm).map(|r| r[0].as_str()).collect();
        assert_eq!(budgets, ["8", "16", "32"]);
    }
    for r in &rows {
        let budget: usize = r[0].parse().unwrap();
        let longest: usize = r[4].parse().unwrap();
        assert!(longest <= budget);
    }

    let o = mipeaks(
        tmp.path(),
        &[
            "toy",
            "rr-exp",
            "--weights",
            w,
            "--layer",
            "1",
            "--instances",
            "40",
            "--out",
            "r",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&tmp.path().join("r/rr.csv"));
    assert_eq!(
        rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(),
        ["baseline", "recycled"]
    );

    let o = mipeaks(
        tmp.path(),
        &["toy", "rr-exp", "--weights", w, "--layer", "2", "--out", "r2"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn generated_traces_feed_analyze() {
    let tmp = TempDir::new().unwrap();
    short_model(tmp.path());
    let o = mipeaks(
        tmp.path(),
        &[
            "toy",
            "generate",
            "--weights",
            "m/weights.mitw",
            "--count",
            "10",
            "--suppress",
            "7",
            "--out",
            "g",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let gens: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("g/generations.json")).unwrap()).unwrap();
    for g in gens.as_array().unwrap() {
        assert!(g["session"]["generated"].as_array().unwrap().iter().all(|t| t != 7));
    }
    let mut argv = vec!["analyze".to_string()];
    for i in 0..10 {
        argv.push(format!("g/trace_{i:04}.mitc"));
    }
    argv.extend(["--out".into(), "a".into()]);
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    let o = mipeaks(tmp.path(), &argv);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("a/report.json")).unwrap()).unwrap();
    assert!(report["peak_tokens"].is_array());
}

#[test]
fn repeated_runs_are_byte_identical_and_stay_in_out() {
    let tmp = TempDir::new().unwrap();
    let names = crafted_batch(tmp.path());
    let inputs = snapshot(tmp.path());
    let runs: Vec<Vec<String>> = vec![
        [
            vec!["analyze".to_string()],
            names.clone(),
            vec!["--out".into(), "OUT".into()],
        ]
        .concat(),
        [
            vec![
                "analyze".to_string(),
                "--mode".into(),
                "single".into(),
                "--window".into(),
                "4".into(),
            ],
            names.clone(),
            vec!["--out".into(), "OUT".into()],
        ]
        .concat(),
        ["bounds", "verify", "--trials", "50", "--out", "OUT"]
            .map(String::from)
            .to_vec(),
        [
            "toy",
            "train",
            "--steps",
            "40",
            "--eval-instances",
            "10",
            "--out",
            "OUT",
        ]
        .map(String::from)
        .to_vec(),
    ];
    for (i, run) in runs.iter().enumerate() {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = format!("out_{i}_{rep}");
            let argv: Vec<&str> = run
                .iter()
                .map(|a| if a == "OUT" { out.as_str() } else { a.as_str() })
                .collect();
            let o = mipeaks(tmp.path(), &argv);
            assert_eq!(code(&o), 0, "{argv:?}: {}", stderr(&o));
            outputs.push((snapshot(&tmp.path().join(&out)), o.stdout));
        }
        assert_eq!(outputs[0], outputs[1], "run {i} differs");
        assert!(!outputs[0].0.is_empty());
        // everything outside the out directories is untouched
        let outside: BTreeMap<_, _> = snapshot(tmp.path())
            .into_iter()
            .filter(|(p, _)| !p.to_string_lossy().starts_with("out_"))
            .collect();
        assert_eq!(outside, inputs);
    }

    // generate and experiments on the trained weights
    let w = "out_3_0/weights.mitw";
    let runs: Vec<Vec<&str>> = vec![
        vec![
            "toy",
            "generate",
            "--weights",
            w,
            "--count",
            "4",
            "--rr-layer",
            "0",
            "--out",
            "OUT",
        ],
        vec![
            "toy",
            "suppress-exp",
            "--weights",
            w,
            "--instances",
            "10",
            "--trace-instances",
            "10",
            "--out",
            "OUT",
        ],
        vec!["toy", "ttts-exp", "--weights", w, "--instances", "10", "--out", "OUT"],
    ];
    for (i, run) in runs.iter().enumerate() {
        let dirs: Vec<PathBuf> = (0..2)
            .map(|rep| {
                let out = format!("gen_{i}_{rep}");
                let argv: Vec<&str> = run.iter().map(|&a| if a == "OUT" { out.as_str() } else { a }).collect();
                let o = mipeaks(tmp.path(), &argv);
                assert_eq!(code(&o), 0, "{argv:?}: {}", stderr(&o));
                tmp.path().join(out)
            })
            .collect();
        assert_eq!(snapshot(&dirs[0]), snapshot(&dirs[1]));
    }
}

#[test]
fn help_documents_every_flag() {
    let tmp = TempDir::new().unwrap();
    let cases: &[(&[&str], &[&str])] = &[
        (&[], &["analyze", "bounds", "toy"]),
        (
            &["analyze"],
            &["--mode", "--sigma", "--tau", "--n-min", "--window", "--top-k", "--out"],
        ),
        (&["bounds"], &["verify"]),
        (
            &["bounds", "verify"],
            &[
                "--trials",
                "--seed",
                "--y-card",
                "--t",
                "--h-card",
                "--predictors",
                "--negative-control",
                "--out",
            ],
        ),
        (&["toy"], &["train", "generate", "suppress-exp", "rr-exp", "ttts-exp"]),
        (
            &["toy", "train"],
            &[
                "--steps",
                "--lr",
                "--momentum",
                "--batch-size",
                "--grad-clip",
                "--model-dim",
                "--layers",
                "--heads",
                "--ff-dim",
                "--context",
                "--eval-instances",
                "--digits",
                "--seed",
                "--out",
            ],
        ),
        (
            &["toy", "generate"],
            &[
                "--weights",
                "--prompt",
                "--count",
                "--budget",
                "--suppress",
                "--rr-layer",
                "--rr-triggers",
                "--ttts",
                "--ttts-token",
                "--digits",
                "--seed",
                "--out",
            ],
        ),
        (
            &["toy", "suppress-exp"],
            &[
                "--top-n",
                "--draws",
                "--trace-instances",
                "--weights",
                "--instances",
                "--budget",
                "--seed",
                "--out",
            ],
        ),
        (
            &["toy", "rr-exp"],
            &[
                "--layer",
                "--triggers",
                "--weights",
                "--instances",
                "--budget",
                "--seed",
                "--out",
            ],
        ),
        (
            &["toy", "ttts-exp"],
            &[
                "--budgets",
                "--token",
                "--weights",
                "--instances",
                "--budget",
                "--seed",
                "--out",
            ],
        ),
    ];
    for (path, flags) in cases {
        let mut argv = path.to_vec();
        argv.push("--help");
        let o = mipeaks(tmp.path(), &argv);
        assert_eq!(code(&o), 0, "{argv:?}");
        let text = String::from_utf8(o.stdout).unwrap();
        for f in *flags {
            assert!(text.contains(f), "{path:?} help lacks {f}");
        }
    }
    assert!(fs::read_dir(tmp.path()).unwrap().next().is_none());
}
