use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use robust_sid::bench::{gibbs_rng, run_benchmark, BenchConfig};
use robust_sid::io::{read_matrix, read_signals};
use robust_sid::lti::{sample_size, true_decomposition, StateSpaceModel};
use robust_sid::pipeline::{identify, Method};
use robust_sid::sid::{assemble, WeightScheme};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robust-sid"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn matrix(path: &Path) -> DMatrix<f64> {
    read_matrix(BufReader::new(fs::File::open(path).unwrap()))
        .unwrap()
        .matrix
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["simulate", "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn simulate_writes_consistent_truth() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), "sim", &["--seed", "4"]);
    let model_file = json(&sim.join("model.json"));
    let model: StateSpaceModel = serde_json::from_value(model_file["model"].clone()).unwrap();
    let horizon = model_file["horizon"].as_u64().unwrap() as usize;
    let n = model_file["n_samples"].as_u64().unwrap() as usize;
    assert_eq!(n, (80.0 * (model.n_x() as f64).sqrt()).floor() as usize);
    assert_eq!(n, sample_size(model.n_x()));
    assert_eq!(horizon, n / 10);

    let truth = true_decomposition(&model, horizon, horizon);
    // the model goes through a JSON round trip, so allow round-off
    let written = matrix(&sim.join("h_fp_true.csv"));
    assert!((&written - &truth.h_fp).norm() <= 1e-12 * truth.h_fp.norm());

    let signals = read_signals(BufReader::new(
        fs::File::open(sim.join("data.csv")).unwrap(),
    ))
    .unwrap();
    assert_eq!(signals.len(), n + 2 * horizon - 1);
}

#[test]
fn round_trip_risk_matches_benchmark() {
    let tmp = TempDir::new().unwrap();
    let seed = 12;
    let sim = simulate(tmp.path(), "sim", &["--seed", "12"]);
    let h_true = matrix(&sim.join("h_fp_true.csv"));

    for scheme in [WeightScheme::Identity, WeightScheme::Cva] {
        let cfg = BenchConfig {
            runs: 1,
            seed,
            scheme,
            ..BenchConfig::default()
        };
        let report = run_benchmark(&cfg).unwrap();
        for method in [
            Method::Hard,
            Method::Soft,
            Method::Optimal,
            Method::Sure,
            Method::Bayes,
        ] {
            let out = tmp.path().join(format!("{scheme}-{method}"));
            ok(&[
                "identify",
                p(&sim.join("data.csv")),
                "--method",
                method.name(),
                "--scheme",
                scheme.name(),
                "--seed",
                "12",
                "--out",
                p(&out),
            ]);
            let est = matrix(&out.join("h_fp_estimate.csv"));
            let risk = match scheme {
                WeightScheme::Identity => (&h_true - &est).norm_squared(),
                _ => {
                    let signals = read_signals(BufReader::new(
                        fs::File::open(sim.join("data.csv")).unwrap(),
                    ))
                    .unwrap();
                    let f = h_true.nrows();
                    let data = assemble(&signals.u, &signals.y, f, f).unwrap();
                    let mut rng = gibbs_rng(seed, 0);
                    let id =
                        identify(&data, scheme, &[Method::Hard], &cfg.gibbs, &mut rng).unwrap();
                    id.weights.apply(&(&h_true - &est)).norm_squared()
                }
            };
            let expected = report
                .per_run
                .iter()
                .find(|r| r.method == method)
                .unwrap()
                .risk;
            assert!(
                (risk - expected).abs() <= 1e-10 * expected.abs().max(1e-300),
                "{scheme} {method}: {risk} vs {expected}"
            );
        }
    }
}

#[test]
fn commands_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = simulate(tmp.path(), "a", &["--seed", "9"]);
    let b = simulate(tmp.path(), "b", &["--seed", "9"]);
    for file in ["data.csv", "h_fp_true.csv", "model.json"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }

    let data = a.join("data.csv");
    for name in ["ia", "ib"] {
        ok(&[
            "identify",
            p(&data),
            "--method",
            "bayes",
            "--nf",
            "40",
            "--seed",
            "2",
            "--out",
            p(&tmp.path().join(name)),
        ]);
    }
    for file in [
        "h_fp_ls.csv",
        "h_fp_estimate.csv",
        "singular_values.csv",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(tmp.path().join("ia").join(file)).unwrap(),
            fs::read(tmp.path().join("ib").join(file)).unwrap(),
            "{file}"
        );
    }

    let bench = |name: &str, threads: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "benchmark",
            "--runs",
            "4",
            "--nf",
            "20",
            "--seed",
            "5",
            "--threads",
            threads,
            "--out",
            p(&out),
        ]);
        out
    };
    let serial = bench("serial", "1");
    let parallel = bench("parallel", "2");
    for file in ["per_run.csv", "summary.json"] {
        assert_eq!(
            fs::read(serial.join(file)).unwrap(),
            fs::read(parallel.join(file)).unwrap(),
            "{file}"
        );
    }
    let summary = json(&serial.join("summary.json"));
    assert_eq!(summary["methods"]["heuristic_neff"]["normalized_risk"], 1.0);
    assert!(
        json(&serial.join("timing.json"))["wall_time_s"]
            .as_f64()
            .unwrap()
            >= 0.0
    );
    let csv = fs::read_to_string(serial.join("per_run.csv")).unwrap();
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "run_id,nx,snr,scheme,method,risk,risk_ref");
    assert_eq!(
        csv.lines().filter(|l| !l.starts_with('#')).count(),
        1 + 4 * Method::ALL.len()
    );
}

#[test]
fn noiseless_least_squares_is_exact() {
    let tmp = TempDir::new().unwrap();
    for nx in ["1", "2", "4"] {
        let sim = simulate(
            tmp.path(),
            &format!("sim{nx}"),
            &["--seed", "1", "--nx", nx, "--noiseless"],
        );
        let out = tmp.path().join(format!("id{nx}"));
        ok(&[
            "identify",
            p(&sim.join("data.csv")),
            "--method",
            "hard",
            "--out",
            p(&out),
        ]);
        let ls = matrix(&out.join("h_fp_ls.csv"));
        let truth = matrix(&sim.join("h_fp_true.csv"));
        assert!((&ls - &truth).norm() <= 1e-6 * truth.norm(), "nx {nx}");
        assert_eq!(ls.nrows().to_string(), nx);
    }
}

#[test]
fn noiseless_hard_threshold_recovers_order() {
    let tmp = TempDir::new().unwrap();
    for nx in ["1", "4"] {
        let sim = simulate(
            tmp.path(),
            &format!("sim{nx}"),
            &["--seed", "1", "--nx", nx, "--noiseless"],
        );
        let out = tmp.path().join(format!("id{nx}"));
        ok(&[
            "identify",
            p(&sim.join("data.csv")),
            "--method",
            "hard",
            "--out",
            p(&out),
        ]);
        let summary = json(&out.join("summary.json"));
        assert_eq!(summary["rank"].as_u64().unwrap().to_string(), nx);
        let est = matrix(&out.join("h_fp_estimate.csv"));
        let truth = matrix(&sim.join("h_fp_true.csv"));
        assert!((&est - &truth).norm() <= 1e-6 * truth.norm());
    }
}

#[test]
fn bayes_on_mimo_data_is_unsupported() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("mimo.csv");
    let mut text = String::from("u1,y1,y2\n");
    let noise = |k: usize, c: f64| ((k as f64 * 12.9898 + c * 78.233).sin() * 43758.5453).fract();
    for k in 0..120 {
        text.push_str(&format!(
            "{},{},{}\n",
            noise(k, 1.0),
            noise(k, 2.0),
            noise(k, 3.0)
        ));
    }
    fs::write(&path, text).unwrap();
    let out = tmp.path().join("out");
    let args = [
        "identify",
        p(&path),
        "--method",
        "bayes",
        "--horizon",
        "4",
        "--out",
        p(&out),
    ];
    assert_eq!(code(&args), 7);
    ok(&[
        "identify",
        p(&path),
        "--method",
        "soft",
        "--horizon",
        "4",
        "--out",
        p(&out),
    ]);
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bench.toml");
    fs::write(
        &cfg,
        "runs = 50\nseed = 1\nscheme = \"cva\"\nmethods = [\"soft\", \"heuristic\"]\n\n[gibbs]\nn_total = 100\n",
    )
    .unwrap();
    let out = ok(&[
        "benchmark",
        "--config",
        p(&cfg),
        "--runs",
        "10",
        "--nf",
        "30",
        "--show-config",
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["runs"], 10);
    assert_eq!(v["seed"], 1);
    assert_eq!(v["scheme"], "cva");
    assert_eq!(v["gibbs"]["n_total"], 30);
    assert_eq!(v["gibbs"]["n_burn"], 1);
    assert_eq!(v["methods"], serde_json::json!(["soft", "heuristic_neff"]));

    let out = ok(&["benchmark", "--runs", "10", "--seed", "7", "--show-config"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        (v["runs"].as_u64(), v["seed"].as_u64()),
        (Some(10), Some(7))
    );
    assert_eq!(v["scheme"], "identity");
    assert_eq!(v["gibbs"]["n_total"], 250);
    assert_eq!(v["gibbs"]["gf_variant"], "independent");
    assert_eq!(v["gibbs"]["rao_blackwell"], true);

    let out = ok(&[
        "benchmark",
        "--scheme",
        "cva",
        "--gf-variant",
        "hankel",
        "--show-config",
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["scheme"], "cva");
    assert_eq!(v["gibbs"]["gf_variant"], "hankel_exact");
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(code(&["benchmark", "--bogus"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["benchmark", "--runs", "many"]), 5);
    assert_eq!(code(&["benchmark", "--scheme", "fancy"]), 5);
    assert_eq!(code(&["benchmark", "--runs", "0", "--out", p(&out)]), 5);
    assert_eq!(
        code(&["benchmark", "--config", p(&tmp.path().join("missing.toml"))]),
        6
    );

    let bad_key = tmp.path().join("bad_key.toml");
    fs::write(&bad_key, "runs = 3\ncolour = \"blue\"\n").unwrap();
    assert_eq!(
        code(&["benchmark", "--config", p(&bad_key), "--show-config"]),
        5
    );
    let bad_value = tmp.path().join("bad_value.toml");
    fs::write(&bad_value, "scheme = \"fancy\"\n").unwrap();
    assert_eq!(
        code(&["benchmark", "--config", p(&bad_value), "--show-config"]),
        5
    );

    let bad_data = tmp.path().join("bad.csv");
    fs::write(&bad_data, "u1,y1\n1,2\n3,oops\n").unwrap();
    let res = run(&["identify", p(&bad_data), "--horizon", "2", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 3"));
    assert_eq!(
        code(&[
            "identify",
            p(&tmp.path().join("none.csv")),
            "--out",
            p(&out)
        ]),
        3
    );
    assert_eq!(code(&["simulate"]), 2);
}
