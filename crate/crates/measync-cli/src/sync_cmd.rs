use std::fs;
use std::time::Instant;

use measync::{run_observed, total_loss, LossKind, SyncConfig};
use serde_json::json;

use crate::error::{classify_sync, CliError};
use crate::files::{
    beliefs_from_cameras, cameras_from_beliefs, graph_from_file, load_json, save_json, GraphFile,
    ResultFile, RESULT_FILE, TRACE_FILE,
};
use crate::{build_init, cost_from, step_rule_from, SyncArgs};

pub fn config_from(args: &SyncArgs) -> Result<SyncConfig, CliError> {
    let config = SyncConfig {
        loss_kind: args.loss.into(),
        mode: args.mode.into(),
        constrained: args.constrained,
        cost: cost_from(args.cost, args.p)?,
        alpha: args.alpha,
        lambda: args.lambda,
        eta_q: args.lr,
        eta_beta: args.lr_beta,
        step_rule: step_rule_from(args.step_rule, args.lr),
        max_iter: args.max_iter,
        trace_stride: args.trace_stride,
        seed: args.seed,
        particles: args.k,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

pub fn run(args: &SyncArgs) -> Result<u8, CliError> {
    let config = config_from(args)?;
    let graph_file: GraphFile = load_json(&args.graph)?;
    let graph = graph_from_file(&graph_file)?;
    let gauge = match &args.gauge {
        Some(path) => {
            let truth: ResultFile = load_json(path)?;
            let beliefs = beliefs_from_cameras(&truth.cameras)?;
            Some(beliefs.into_iter().next().ok_or_else(|| {
                CliError::Fatal(format!("{}: no cameras in gauge file", path.display()))
            })?)
        }
        None => None,
    };
    let init = build_init(graph.n_cameras(), &config, gauge)?;

    fs::create_dir_all(&args.out_dir).map_err(|e| {
        CliError::Fatal(format!("cannot create {}: {e}", args.out_dir.display()))
    })?;
    let start = Instant::now();
    let mut trace: Vec<(usize, f64, f64)> = Vec::new();
    let state = run_observed(&graph, &config, Some(init), |iteration, loss| {
        trace.push((iteration, loss, start.elapsed().as_secs_f64()));
    })
    .map_err(classify_sync)?;
    let report = total_loss(&state, &graph, &config).map_err(classify_sync)?;

    let trace_path = args.out_dir.join(TRACE_FILE);
    let mut writer = csv::Writer::from_path(&trace_path)
        .map_err(|e| CliError::Fatal(format!("cannot write {}: {e}", trace_path.display())))?;
    writer
        .write_record(["iteration", "loss", "wallclock_s"])
        .and_then(|()| {
            trace.iter().try_for_each(|(iteration, loss, wall)| {
                writer.write_record([
                    iteration.to_string(),
                    loss.to_string(),
                    wall.to_string(),
                ])
            })
        })
        .and_then(|()| writer.flush().map_err(csv::Error::from))
        .map_err(|e| CliError::Fatal(format!("cannot write {}: {e}", trace_path.display())))?;

    let echo = json!({
        "command": "sync",
        "graph": args.graph.display().to_string(),
        "loss": args.loss.as_str(),
        "cost": args.cost.as_str(),
        "p": args.p,
        "alpha": args.alpha,
        "lambda": args.lambda,
        "lr": args.lr,
        "lr_beta": args.lr_beta,
        "step_rule": args.step_rule.as_str(),
        "mode": args.mode.as_str(),
        "constrained": args.constrained,
        "k": args.k,
        "max_iter": args.max_iter,
        "seed": args.seed,
        "gauge": args.gauge.as_ref().map(|p| p.display().to_string()),
        "trace_stride": args.trace_stride,
    });
    let result = ResultFile {
        config: echo,
        cameras: cameras_from_beliefs(state.coupling.beliefs()),
        final_loss: report.value,
        iterations: state.iteration,
        converged_flags: report.edge_converged.clone(),
    };
    save_json(&args.out_dir.join(RESULT_FILE), &result)?;

    println!(
        "sync: iterations={} final_loss={} converged={}",
        state.iteration, report.value, report.converged
    );
    let warn = config.loss_kind == LossKind::Sinkhorn
        && report.edge_converged.iter().any(|ok| !ok);
    Ok(if warn { 3 } else { 0 })
}
