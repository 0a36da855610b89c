//! End-to-end tests of the compiled binary: file contracts, exit codes,
//! determinism, and value agreement between composed subcommands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_measync"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_with_threads(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_measync"))
        .args(args)
        .env("MEASYNC_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

/// Non-header trace rows as (iteration, loss, wallclock).
fn trace_rows(path: &Path) -> Vec<(usize, f64, f64)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iteration,loss,wallclock_s"));
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 3, "row {line}");
            (cols[0].parse().unwrap(), cols[1].parse().unwrap(), cols[2].parse().unwrap())
        })
        .collect()
}

/// Metric table from eval stdout, in printed order.
fn eval_metrics(out: &Output) -> Vec<(String, f64)> {
    let text = stdout(out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value"));
    lines
        .map(|line| {
            let (name, value) = line.split_once(',').unwrap();
            (name.to_string(), value.parse().unwrap())
        })
        .collect()
}

#[test]
fn synth_counts_and_summary() {
    let dir = TempDir::new().unwrap();
    let out = synth(dir.path(), &["--n", "10", "--k", "3", "--seed", "7"]);
    assert_code(&out, 0);
    assert_eq!(stdout(&out).trim(), "synth: n=10 K=3 edges=45 atoms_per_edge=9");

    let graph = json(&dir.path().join("graph.json"));
    assert_eq!(graph["n_cameras"], 10);
    let edges = graph["edges"].as_array().unwrap();
    assert_eq!(edges.len(), 45);
    for e in edges {
        assert_eq!(e["atoms"].as_array().unwrap().len(), 9);
        let weights = e["weights"].as_array().unwrap();
        assert_eq!(weights.len(), 9);
        let sum: f64 = weights.iter().map(|w| w.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for atom in e["atoms"].as_array().unwrap() {
            let q: Vec<f64> = atom.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            let norm: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(q[0] >= 0.0, "atoms are sign-canonicalized");
        }
    }

    let truth = json(&dir.path().join("truth.json"));
    assert_eq!(truth["cameras"].as_array().unwrap().len(), 10);
    assert_eq!(truth["cameras"][0]["particles"].as_array().unwrap().len(), 3);
    assert_eq!(truth["iterations"], 0);
    assert_eq!(truth["converged_flags"].as_array().unwrap().len(), 0);
}

#[test]
fn synth_minimal_pair() {
    let dir = TempDir::new().unwrap();
    let out = synth(dir.path(), &["--n", "2", "--k", "1"]);
    assert_code(&out, 0);
    assert_eq!(stdout(&out).trim(), "synth: n=2 K=1 edges=1 atoms_per_edge=1");
}

#[test]
fn synth_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let flags = ["--n", "5", "--k", "2", "--sigma", "0.01", "--seed", "9"];
    assert_code(&synth(a.path(), &flags), 0);
    assert_code(&synth(b.path(), &flags), 0);
    for name in ["graph.json", "truth.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
}

#[test]
fn synth_usage_errors() {
    let dir = TempDir::new().unwrap();
    for flags in [
        &["--n", "1"][..],
        &["--n", "4", "--k", "0"],
        &["--n", "4", "--completeness", "0"],
        &["--n", "4", "--completeness", "1.5"],
        &["--n", "4", "--sigma", "-0.1"],
    ] {
        let out = synth(dir.path(), flags);
        assert_code(&out, 2);
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    }
}

#[test]
fn synth_unwritable_out_dir_is_io_error() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = synth(&blocker.join("sub"), &["--n", "3"]);
    assert_code(&out, 1);
}

#[test]
fn sync_trace_and_result_contract() {
    let dir = TempDir::new().unwrap();
    assert_code(&synth(dir.path(), &["--n", "4", "--k", "1", "--seed", "3"]), 0);
    let run_dir = dir.path().join("run");
    let out = run(&[
        "sync",
        "--graph",
        dir.path().join("graph.json").to_str().unwrap(),
        "--loss",
        "mmd",
        "--cost",
        "euc",
        "--max-iter",
        "300",
        "--trace-stride",
        "7",
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).starts_with("sync: iterations="));

    let result = json(&run_dir.join("result.json"));
    let iterations = result["iterations"].as_u64().unwrap() as usize;
    assert!(iterations > 0 && iterations <= 300);
    let cameras = result["cameras"].as_array().unwrap();
    assert_eq!(cameras.len(), 4);
    // single-particle runs pin camera 0 at the identity
    let pin: Vec<f64> = cameras[0]["particles"][0]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(pin, vec![1.0, 0.0, 0.0, 0.0]);
    // MMD edges are closed form, so every flag is true and the run exits 0
    let flags = result["converged_flags"].as_array().unwrap();
    assert_eq!(flags.len(), 6);
    assert!(flags.iter().all(|f| f.as_bool().unwrap()));
    for cam in cameras {
        let sum: f64 =
            cam["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9, "weights stay on the simplex");
    }

    let rows = trace_rows(&run_dir.join("trace.csv"));
    assert_eq!(rows.len(), 1 + iterations.div_ceil(7));
    assert_eq!(rows[0].0, 0);
    assert_eq!(rows.last().unwrap().0, iterations);
    assert!(rows.windows(2).all(|w| w[0].2 <= w[1].2), "wallclock is monotone");
    let final_loss = result["final_loss"].as_f64().unwrap();
    assert!((rows.last().unwrap().1 - final_loss).abs() <= 1e-12 * final_loss.abs().max(1.0));
}

#[test]
fn sync_trace_stride_edge_cases() {
    let dir = TempDir::new().unwrap();
    assert_code(&synth(dir.path(), &["--n", "3", "--k", "1", "--seed", "4"]), 0);
    let graph = dir.path().join("graph.json");
    let base = |extra: &[&str], out: &Path| {
        let mut args = vec![
            "sync",
            "--graph",
            graph.to_str().unwrap(),
            "--loss",
            "mmd",
            "--cost",
            "euc",
            "--max-iter",
            "5",
        ];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out-dir", out.to_str().unwrap()]);
        run(&args)
    };

    // stride far beyond max_iter: row 0 plus the mandatory terminal row
    let wide = dir.path().join("wide");
    assert_code(&base(&["--trace-stride", "1000"], &wide), 0);
    let rows = trace_rows(&wide.join("trace.csv"));
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 5]);

    // stride 1: every iteration traced
    let dense = dir.path().join("dense");
    assert_code(&base(&["--trace-stride", "1"], &dense), 0);
    let rows = trace_rows(&dense.join("trace.csv"));
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
}

#[test]
fn sync_is_deterministic_modulo_wallclock() {
    let dir = TempDir::new().unwrap();
    assert_code(&synth(dir.path(), &["--n", "3", "--k", "1", "--seed", "6"]), 0);
    let graph = dir.path().join("graph.json");
    let sync_into = |out: &Path| {
        assert_code(
            &run(&[
                "sync",
                "--graph",
                graph.to_str().unwrap(),
                "--max-iter",
                "60",
                "--seed",
                "12",
                "--out-dir",
                out.to_str().unwrap(),
            ]),
            0,
        );
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    sync_into(&a);
    sync_into(&b);
    assert_eq!(
        fs::read(a.join("result.json")).unwrap(),
        fs::read(b.join("result.json")).unwrap(),
        "result files must be byte-identical across reruns"
    );
    let ta = trace_rows(&a.join("trace.csv"));
    let tb = trace_rows(&b.join("trace.csv"));
    assert_eq!(ta.len(), tb.len());
    for (x, y) in ta.iter().zip(&tb) {
        assert_eq!(x.0, y.0);
        assert_eq!(x.1.to_bits(), y.1.to_bits(), "loss column must be bitwise stable");
    }
}

#[test]
fn sync_exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_code(&synth(dir.path(), &["--n", "3", "--k", "1"]), 0);
    let graph = dir.path().join("graph.json");
    let out_dir = dir.path().join("run");
    let sync_args = |extra: &[&str]| {
        let mut args =
            vec!["sync", "--graph", graph.to_str().unwrap(), "--max-iter", "5"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out-dir", out_dir.to_str().unwrap()]);
        args.iter().map(|s| s.to_string()).collect::<Vec<_>>()
    };

    // missing and malformed inputs are I/O failures
    let missing = run(&[
        "sync",
        "--graph",
        dir.path().join("nope.json").to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&missing, 1);
    let corrupt_path = dir.path().join("corrupt.json");
    fs::write(&corrupt_path, "{not json").unwrap();
    let corrupt = run(&[
        "sync",
        "--graph",
        corrupt_path.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&corrupt, 1);

    // incompatible or out-of-range flags are usage errors
    for extra in [
        &["--step-rule", "invw"][..],
        &["--loss", "sinkhorn", "--constrained", "false"],
        &["--k", "0"],
        &["--trace-stride", "0"],
        &["--p", "3"],
        &["--alpha", "0"],
    ] {
        let args = sync_args(extra);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = run(&refs);
        assert_code(&out, 2);
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{extra:?}");
    }

    let unknown = run(&["sync", "--bogus-flag"]);
    assert_code(&unknown, 2);
    let help = run(&["--help"]);
    assert_code(&help, 0);
}

#[test]
fn sync_gauge_particle_count_rules() {
    let dir = TempDir::new().unwrap();
    assert_code(&synth(dir.path(), &["--n", "3", "--k", "2", "--seed", "8"]), 0);
    let graph = dir.path().join("graph.json");
    let truth = dir.path().join("truth.json");

    // high-entropy couplings may hold more estimated particles than the
    // two-particle gauge carries: that is the overestimation protocol
    let over = run(&[
        "sync",
        "--graph",
        graph.to_str().unwrap(),
        "--loss",
        "mmd",
        "--cost",
        "euc",
        "--k",
        "3",
        "--gauge",
        truth.to_str().unwrap(),
        "--max-iter",
        "5",
        "--out-dir",
        dir.path().join("over").to_str().unwrap(),
    ]);
    assert_code(&over, 0);

    // low-entropy couplings are index-aligned, so the count must match
    let le = run(&[
        "sync",
        "--graph",
        graph.to_str().unwrap(),
        "--mode",
        "le",
        "--k",
        "1",
        "--gauge",
        truth.to_str().unwrap(),
        "--max-iter",
        "5",
        "--out-dir",
        dir.path().join("le").to_str().unwrap(),
    ]);
    assert_code(&le, 2);
}

#[test]
fn sync_gauge_pins_camera_zero() {
    let dir = TempDir::new().unwrap();
    assert_code(&synth(dir.path(), &["--n", "3", "--k", "2", "--seed", "8"]), 0);
    let run_dir = dir.path().join("run");
    let out = run(&[
        "sync",
        "--graph",
        dir.path().join("graph.json").to_str().unwrap(),
        "--loss",
        "mmd",
        "--cost",
        "euc",
        "--k",
        "2",
        "--gauge",
        dir.path().join("truth.json").to_str().unwrap(),
        "--max-iter",
        "40",
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let truth = json(&dir.path().join("truth.json"));
    let result = json(&run_dir.join("result.json"));
    assert_eq!(
        result["cameras"][0]["particles"], truth["cameras"][0]["particles"],
        "gauge camera must come back bitwise"
    );
}

#[test]
fn sync_unconverged_sinkhorn_edge_exits_three() {
    // Multimodal K = 2 instance whose wrong-basin optimum leaves pushforward
    // clusters near the separation where the final reference solve plateaus
    // just above tolerance; the run completes, writes files, and reports the
    // honest flag through the exit code.
    let dir = TempDir::new().unwrap();
    assert_code(&synth(dir.path(), &["--n", "3", "--k", "2", "--seed", "11"]), 0);
    let run_dir = dir.path().join("run");
    let out = run(&[
        "sync",
        "--graph",
        dir.path().join("graph.json").to_str().unwrap(),
        "--k",
        "2",
        "--gauge",
        dir.path().join("truth.json").to_str().unwrap(),
        "--max-iter",
        "500",
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(stdout(&out).trim_end().ends_with("converged=false"));
    let result = json(&run_dir.join("result.json"));
    let flags = result["converged_flags"].as_array().unwrap();
    assert_eq!(flags.len(), 3);
    assert!(flags.iter().any(|f| !f.as_bool().unwrap()));
}

#[test]
fn eval_truth_against_itself_is_zero() {
    let dir = TempDir::new().unwrap();
    assert_code(&synth(dir.path(), &["--n", "3", "--k", "2", "--seed", "5"]), 0);
    let truth = dir.path().join("truth.json");
    let args =
        ["eval", "--result", truth.to_str().unwrap(), "--truth", truth.to_str().unwrap()];
    let out = run(&args);
    assert_code(&out, 0);
    let metrics = eval_metrics(&out);
    let names: Vec<&str> = metrics.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["avg_min_geo_truth2est", "avg_min_geo_est2truth", "sinkhorn_error", "final_loss"]
    );
    assert_eq!(metrics[0].1, 0.0);
    assert_eq!(metrics[1].1, 0.0);
    assert!(metrics[2].1.abs() < 1e-6);
    assert_eq!(metrics[3].1, 0.0, "truth files carry a zero loss placeholder");

    // repeated invocations print the identical table
    assert_eq!(run(&args).stdout, out.stdout);
}

#[test]
fn eval_camera_count_mismatch_is_usage_error() {
    let small = TempDir::new().unwrap();
    let large = TempDir::new().unwrap();
    assert_code(&synth(small.path(), &["--n", "3"]), 0);
    assert_code(&synth(large.path(), &["--n", "4"]), 0);
    let out = run(&[
        "eval",
        "--result",
        small.path().join("truth.json").to_str().unwrap(),
        "--truth",
        large.path().join("truth.json").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn sweep_shape_markers_and_thread_independence() {
    let dir = TempDir::new().unwrap();
    // completeness 0.05 of a 5-camera graph cannot stay connected, so that
    // cell must degrade to failure markers without aborting the sweep
    let sweep_into = |out_dir: &Path, threads: &str| {
        run_with_threads(
            &[
                "sweep",
                "--axis",
                "sparsity",
                "--values",
                "0.05,1",
                "--repeats",
                "1",
                "--n",
                "5",
                "--truth-k",
                "1",
                "--k",
                "1",
                "--max-iter",
                "30",
                "--out-dir",
                out_dir.to_str().unwrap(),
            ],
            threads,
        )
    };
    let d1 = dir.path().join("t1");
    let out = sweep_into(&d1, "1");
    assert_code(&out, 0);
    assert!(stdout(&out).starts_with("sweep: axis=sparsity cells=2 rows=32"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep cell"));

    let text = fs::read_to_string(d1.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("axis_value,repeat,variant,metric,value"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 32);
    let variants = ["mmd:euc", "mmd:geo", "sinkhorn:euc", "sinkhorn:geo"];
    for value in ["0.05", "1"] {
        for variant in variants {
            let cell: Vec<&Vec<&str>> =
                rows.iter().filter(|r| r[0] == value && r[2] == variant).collect();
            assert_eq!(cell.len(), 4, "value {value} variant {variant}");
        }
    }
    for row in &rows {
        if row[0] == "0.05" {
            assert_eq!(row[4], "nan", "unsatisfiable cell must carry markers");
        } else {
            let v: f64 = row[4].parse().unwrap();
            assert!(v.is_finite(), "row {row:?}");
        }
    }

    let d2 = dir.path().join("t3");
    assert_code(&sweep_into(&d2, "3"), 0);
    assert_eq!(
        fs::read(d1.join("sweep.csv")).unwrap(),
        fs::read(d2.join("sweep.csv")).unwrap(),
        "worker count must not change the CSV"
    );
}

#[test]
fn sweep_single_cell_matches_sync_plus_eval() {
    let dir = TempDir::new().unwrap();
    let sweep_dir = dir.path().join("sweep");
    let out = run(&[
        "sweep",
        "--axis",
        "iters",
        "--values",
        "50",
        "--repeats",
        "1",
        "--n",
        "4",
        "--truth-k",
        "1",
        "--k",
        "1",
        "--seed",
        "2",
        "--out-dir",
        sweep_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let mmd_euc: Vec<(String, f64)> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|r| r[2] == "mmd:euc")
        .map(|r| (r[3].to_string(), r[4].parse().unwrap()))
        .collect();
    assert_eq!(mmd_euc.len(), 4);

    // same instance, same variant, by hand: synth, sync with the truth gauge,
    // then eval; values must agree with the sweep cell
    assert_code(&synth(dir.path(), &["--n", "4", "--k", "1", "--seed", "2"]), 0);
    let run_dir = dir.path().join("run");
    assert_code(
        &run(&[
            "sync",
            "--graph",
            dir.path().join("graph.json").to_str().unwrap(),
            "--loss",
            "mmd",
            "--cost",
            "euc",
            "--seed",
            "2",
            "--max-iter",
            "50",
            "--gauge",
            dir.path().join("truth.json").to_str().unwrap(),
            "--out-dir",
            run_dir.to_str().unwrap(),
        ]),
        0,
    );
    let eval_out = run(&[
        "eval",
        "--result",
        run_dir.join("result.json").to_str().unwrap(),
        "--truth",
        dir.path().join("truth.json").to_str().unwrap(),
    ]);
    assert_code(&eval_out, 0);
    let metrics = eval_metrics(&eval_out);
    for ((sweep_name, sweep_value), (eval_name, eval_value)) in mmd_euc.iter().zip(&metrics) {
        assert_eq!(sweep_name, eval_name);
        assert!(
            (sweep_value - eval_value).abs() <= 1e-12 * eval_value.abs().max(1.0),
            "{sweep_name}: sweep {sweep_value} vs composition {eval_value}"
        );
    }
}

#[test]
fn sweep_rejects_bad_axis_values() {
    let dir = TempDir::new().unwrap();
    for (axis, values) in [
        ("noise", "-0.1"),
        ("sparsity", "0"),
        ("sparsity", "1.5"),
        ("particles", "0"),
        ("particles", "2.5"),
        ("iters", "abc"),
        ("noise", ""),
    ] {
        let out = run(&[
            "sweep",
            "--axis",
            axis,
            "--values",
            values,
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]);
        assert_code(&out, 2);
    }
}
