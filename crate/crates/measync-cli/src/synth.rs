use std::fs;

use measync::{
    add_noise, generate_ground_truth, relative_measures_from_truth, NoiseModel,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{classify_datagen, CliError};
use crate::files::{
    cameras_from_beliefs, graph_to_file, save_json, GraphMetadata, ResultFile, GRAPH_FILE,
    TRUTH_FILE,
};
use crate::SynthArgs;

pub fn run(args: &SynthArgs) -> Result<u8, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let truth = generate_ground_truth(args.n, args.k, &mut rng).map_err(classify_datagen)?;
    let graph =
        relative_measures_from_truth(&truth, args.mode.into(), args.completeness, &mut rng)
            .map_err(classify_datagen)?;
    let graph = add_noise(graph, NoiseModel { sigma: args.sigma }, &mut rng)
        .map_err(classify_datagen)?;

    fs::create_dir_all(&args.out_dir).map_err(|e| {
        CliError::Fatal(format!("cannot create {}: {e}", args.out_dir.display()))
    })?;
    let metadata = GraphMetadata {
        generator: format!("measync synth {}", env!("CARGO_PKG_VERSION")),
        seed: args.seed,
        sigma: args.sigma,
        completeness: args.completeness,
    };
    save_json(&args.out_dir.join(GRAPH_FILE), &graph_to_file(&graph, metadata))?;

    let truth_file = ResultFile {
        config: json!({
            "command": "synth",
            "n": args.n,
            "k": args.k,
            "mode": args.mode.as_str(),
            "sigma": args.sigma,
            "completeness": args.completeness,
            "seed": args.seed,
        }),
        cameras: cameras_from_beliefs(truth.beliefs()),
        final_loss: 0.0,
        iterations: 0,
        converged_flags: Vec::new(),
    };
    save_json(&args.out_dir.join(TRUTH_FILE), &truth_file)?;

    let atoms_per_edge =
        graph.edges().first().map(|e| e.measure.support_size()).unwrap_or(0);
    println!(
        "synth: n={} K={} edges={} atoms_per_edge={}",
        args.n,
        args.k,
        graph.edges().len(),
        atoms_per_edge
    );
    Ok(0)
}
