//! Runs the full MiniLang experiment and prints the reports.
//!
//! Usage: `experiment [num_files] [key=value ...]`, where each `key=value`
//! overrides a top-level field of the experiment config (value as JSON).

use std::time::Instant;

use sketchgen::pipeline::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let mut cfg = serde_json::to_value(ExperimentConfig::default())?;
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            Some((key, value)) => cfg[key] = serde_json::from_str(value)?,
            None => cfg["corpus"]["num_files"] = arg.parse::<u64>()?.into(),
        }
    }
    let cfg: ExperimentConfig = serde_json::from_value(cfg)?;
    let start = Instant::now();
    let out = run_experiment(&cfg)?;
    println!("{}", out.metrics.summary());
    println!("{}", out.ablations.to_csv());
    println!("{}", out.buckets);
    println!(
        "validation reward: pretrained {:.4}, fine-tuned {:.4}",
        out.pretrained_valid_reward, out.finetuned_valid_reward
    );
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
