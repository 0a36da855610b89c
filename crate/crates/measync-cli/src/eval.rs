use measync::{avg_min_geodesic, sinkhorn_error, GroundTruth};

use crate::error::{classify_datagen, CliError};
use crate::files::{beliefs_from_cameras, coupling_from_result, load_json, ResultFile};
use crate::{cost_from, EvalArgs};

pub fn run(args: &EvalArgs) -> Result<u8, CliError> {
    let estimate_file: ResultFile = load_json(&args.result)?;
    let truth_file: ResultFile = load_json(&args.truth)?;
    if estimate_file.cameras.len() != truth_file.cameras.len() {
        return Err(CliError::Usage(format!(
            "estimate has {} cameras, truth has {}",
            estimate_file.cameras.len(),
            truth_file.cameras.len()
        )));
    }
    let estimate = coupling_from_result(&estimate_file)?;
    let truth = GroundTruth::from_beliefs(beliefs_from_cameras(&truth_file.cameras)?)
        .map_err(classify_datagen)?;
    let cost = cost_from(args.cost, args.p)?;

    let (truth2est, est2truth) =
        avg_min_geodesic(&estimate, &truth).map_err(classify_datagen)?;
    let (sink_err, converged) =
        sinkhorn_error(&estimate, &truth, &cost, args.alpha).map_err(classify_datagen)?;
    if !converged {
        eprintln!("warning: a sinkhorn_error solve hit its sweep budget");
    }

    println!("metric,value");
    println!("avg_min_geo_truth2est,{truth2est}");
    println!("avg_min_geo_est2truth,{est2truth}");
    println!("sinkhorn_error,{sink_err}");
    println!("final_loss,{}", estimate_file.final_loss);
    Ok(0)
}
