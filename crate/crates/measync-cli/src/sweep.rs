//! Grid runner: for every axis value and repeat it synthesizes an instance,
//! runs all four loss/cost variants against it, scores them, and writes one
//! long-format CSV. Cells are independent, so they can run on worker threads;
//! rows are emitted in deterministic cell order regardless of scheduling.

use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use measync::{
    add_noise, avg_min_geodesic, generate_ground_truth, relative_measures_from_truth,
    run as run_optimizer, sinkhorn_error, total_loss, GroundCost, GroundTruth, LossKind,
    NoiseModel, RotationGraph, SyncConfig,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;
use crate::files::SWEEP_FILE;
use crate::{build_init, cost_from, step_rule_from, AxisArg, SweepArgs};

const VARIANTS: [(&str, LossKind, CostTag); 4] = [
    ("mmd:euc", LossKind::Mmd, CostTag::Euc),
    ("mmd:geo", LossKind::Mmd, CostTag::Geo),
    ("sinkhorn:euc", LossKind::Sinkhorn, CostTag::Euc),
    ("sinkhorn:geo", LossKind::Sinkhorn, CostTag::Geo),
];

const METRICS: [&str; 4] =
    ["avg_min_geo_truth2est", "avg_min_geo_est2truth", "sinkhorn_error", "final_loss"];

/// Marker written for metrics of a failed cell or variant.
const FAILURE_MARKER: &str = "nan";

#[derive(Debug, Copy, Clone)]
enum CostTag {
    Euc,
    Geo,
}

#[derive(Debug, Copy, Clone)]
enum AxisValue {
    Float(f64),
    Count(usize),
}

fn parse_axis_value(axis: AxisArg, token: &str) -> Result<AxisValue, CliError> {
    let bad = |msg: &str| CliError::Usage(format!("axis value {token:?}: {msg}"));
    match axis {
        AxisArg::Noise => {
            let v: f64 = token.parse().map_err(|_| bad("not a number"))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad("noise must be finite and nonnegative"));
            }
            Ok(AxisValue::Float(v))
        }
        AxisArg::Sparsity => {
            let v: f64 = token.parse().map_err(|_| bad("not a number"))?;
            if !(v > 0.0 && v <= 1.0) {
                return Err(bad("completeness must lie in (0, 1]"));
            }
            Ok(AxisValue::Float(v))
        }
        AxisArg::Particles | AxisArg::Iters => {
            let v: usize = token.parse().map_err(|_| bad("not a positive integer"))?;
            if v == 0 {
                return Err(bad("must be at least 1"));
            }
            Ok(AxisValue::Count(v))
        }
    }
}

fn worker_count(cells: usize) -> usize {
    let requested = std::env::var("MEASYNC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    requested.min(cells).max(1)
}

pub fn run(args: &SweepArgs) -> Result<u8, CliError> {
    let tokens: Vec<String> = args
        .values
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect();
    if tokens.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    if args.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let parsed = tokens
        .iter()
        .map(|t| parse_axis_value(args.axis, t))
        .collect::<Result<Vec<_>, _>>()?;
    // both costs are fixed across the grid; a bad exponent is a flag error
    let geo_cost = cost_from(crate::CostArg::Geo, args.p)?;
    let eval_cost = cost_from(args.cost, args.p)?;

    let cells: Vec<(usize, usize)> = (0..tokens.len())
        .flat_map(|v| (0..args.repeats).map(move |r| (v, r)))
        .collect();
    let results: Mutex<Vec<Option<Vec<[String; 5]>>>> =
        Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let workers = worker_count(cells.len());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= cells.len() {
                    break;
                }
                let (value_idx, repeat) = cells[idx];
                let rows = run_cell(
                    args,
                    &tokens[value_idx],
                    parsed[value_idx],
                    repeat,
                    geo_cost,
                    eval_cost,
                );
                results.lock().expect("sweep worker poisoned the results")[idx] = Some(rows);
            });
        }
    });

    fs::create_dir_all(&args.out_dir).map_err(|e| {
        CliError::Fatal(format!("cannot create {}: {e}", args.out_dir.display()))
    })?;
    let path = args.out_dir.join(SWEEP_FILE);
    let mut writer = csv::Writer::from_path(&path)
        .map_err(|e| CliError::Fatal(format!("cannot write {}: {e}", path.display())))?;
    let all = results.into_inner().expect("sweep worker poisoned the results");
    let mut rows_written = 0usize;
    writer
        .write_record(["axis_value", "repeat", "variant", "metric", "value"])
        .and_then(|()| {
            all.into_iter().try_for_each(|cell| {
                cell.expect("every cell was claimed by a worker").into_iter().try_for_each(
                    |row| {
                        rows_written += 1;
                        writer.write_record(&row)
                    },
                )
            })
        })
        .and_then(|()| writer.flush().map_err(csv::Error::from))
        .map_err(|e| CliError::Fatal(format!("cannot write {}: {e}", path.display())))?;

    println!(
        "sweep: axis={} cells={} rows={} file={}",
        args.axis.as_str(),
        cells.len(),
        rows_written,
        path.display()
    );
    Ok(0)
}

/// One grid cell: a synthetic instance at the axis value, scored under all
/// four variants. Failures mark their rows instead of aborting the sweep.
fn run_cell(
    args: &SweepArgs,
    token: &str,
    value: AxisValue,
    repeat: usize,
    geo_cost: GroundCost,
    eval_cost: GroundCost,
) -> Vec<[String; 5]> {
    let mut sigma = args.sigma;
    let mut completeness = args.completeness;
    let mut k_est = args.k;
    let mut max_iter = args.max_iter;
    match (args.axis, value) {
        (AxisArg::Noise, AxisValue::Float(v)) => sigma = v,
        (AxisArg::Sparsity, AxisValue::Float(v)) => completeness = v,
        (AxisArg::Particles, AxisValue::Count(v)) => k_est = v,
        (AxisArg::Iters, AxisValue::Count(v)) => max_iter = v,
        _ => unreachable!("axis value parsed under a different axis"),
    }
    let seed = args.seed.wrapping_add(repeat as u64);

    let instance = (|| -> Result<(RotationGraph, GroundTruth), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth =
            generate_ground_truth(args.n, args.truth_k, &mut rng).map_err(|e| e.to_string())?;
        let graph = relative_measures_from_truth(&truth, args.mode.into(), completeness, &mut rng)
            .map_err(|e| e.to_string())?;
        let graph =
            add_noise(graph, NoiseModel { sigma }, &mut rng).map_err(|e| e.to_string())?;
        Ok((graph, truth))
    })();
    let (graph, truth) = match instance {
        Ok(pair) => pair,
        Err(msg) => {
            eprintln!("sweep cell ({token}, repeat {repeat}): {msg}");
            return VARIANTS
                .iter()
                .flat_map(|(variant, _, _)| marker_rows(token, repeat, variant))
                .collect();
        }
    };

    let mut rows = Vec::with_capacity(VARIANTS.len() * METRICS.len());
    for (variant, loss_kind, cost_tag) in VARIANTS {
        let config = SyncConfig {
            loss_kind,
            mode: args.mode.into(),
            constrained: args.constrained,
            cost: match cost_tag {
                CostTag::Euc => GroundCost::SquaredEuclidean,
                CostTag::Geo => geo_cost,
            },
            alpha: args.alpha,
            lambda: args.lambda,
            eta_q: args.lr,
            eta_beta: args.lr_beta,
            step_rule: step_rule_from(args.step_rule, args.lr),
            max_iter,
            trace_stride: args.trace_stride,
            seed,
            particles: k_est,
        };
        let outcome = (|| -> Result<[f64; 4], String> {
            config.validate().map_err(|e| e.to_string())?;
            let init = build_init(graph.n_cameras(), &config, Some(truth.beliefs()[0].clone()))
                .map_err(|e| e.to_string())?;
            let state = run_optimizer(&graph, &config, Some(init)).map_err(|e| e.to_string())?;
            let report = total_loss(&state, &graph, &config).map_err(|e| e.to_string())?;
            let (truth2est, est2truth) =
                avg_min_geodesic(&state.coupling, &truth).map_err(|e| e.to_string())?;
            let (sink_err, _converged) =
                sinkhorn_error(&state.coupling, &truth, &eval_cost, args.alpha)
                    .map_err(|e| e.to_string())?;
            Ok([truth2est, est2truth, sink_err, report.value])
        })();
        match outcome {
            Ok(values) => {
                for (metric, value) in METRICS.iter().zip(values) {
                    rows.push([
                        token.to_string(),
                        repeat.to_string(),
                        variant.to_string(),
                        metric.to_string(),
                        value.to_string(),
                    ]);
                }
            }
            Err(msg) => {
                eprintln!("sweep cell ({token}, repeat {repeat}, {variant}): {msg}");
                rows.extend(marker_rows(token, repeat, variant));
            }
        }
    }
    rows
}

fn marker_rows(token: &str, repeat: usize, variant: &str) -> Vec<[String; 5]> {
    METRICS
        .iter()
        .map(|metric| {
            [
                token.to_string(),
                repeat.to_string(),
                variant.to_string(),
                metric.to_string(),
                FAILURE_MARKER.to_string(),
            ]
        })
        .collect()
}
