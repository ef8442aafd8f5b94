//! Runs one ablation axis end to end on a reduced synthetic set: gen-data,
//! then train and evaluate every variant with the same seed.
//!
//! cargo run --release --example ablation -- [dabn|attention|scales] [out_dir]

use std::path::PathBuf;

use clap::ValueEnum;
use tal::cli::{cmd_ablate, cmd_gen_data, Axis};
use tal::ExperimentConfig;

fn main() -> tal::Result<()> {
    let mut args = std::env::args().skip(1);
    let axis = args
        .next()
        .map(|a| Axis::from_str(&a, true).map_err(tal::Error::Config))
        .transpose()?
        .unwrap_or(Axis::Scales);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tal_ablation"));
    let cfg = ExperimentConfig {
        output_dir: out,
        syn_ids_per_domain: 20,
        syn_target_ids: 15,
        epochs: 3,
        lr_decay_epoch: 2,
        steps_per_epoch: 5,
        ..ExperimentConfig::tiny()
    };
    cmd_gen_data(&cfg, true)?;
    let rows = cmd_ablate(&cfg, axis)?;
    println!("{} variants written under {}", rows.len(), cfg.output_dir.display());
    Ok(())
}
