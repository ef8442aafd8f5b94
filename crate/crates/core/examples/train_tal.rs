//! Trains the tiny profile on in-memory synthetic domains, evaluates every
//! fusion mode on the held-out target and checks a checkpoint round trip.
//!
//! cargo run --release --example train_tal -- [epochs]

use tal::checkpoint::Checkpoint;
use tal::data::generate_synthetic;
use tal::evaluation::{evaluate_scores, stream_scores, FusionMode, LabelColumns};
use tal::training::{train, TrainData};
use tal::ExperimentConfig;

fn main() -> tal::Result<()> {
    env_logger::Builder::new().parse_filters("info").init();
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let cfg = ExperimentConfig {
        epochs,
        lr_decay_epoch: epochs * 2 / 3,
        ..ExperimentConfig::tiny()
    };
    let bundle = generate_synthetic(&cfg.synthetic_config())?;
    let data = TrainData::new(bundle.train)?;
    let trainer = train(&cfg, &data, None, None)?;

    let scores = stream_scores(&trainer.model, &bundle.query, &bundle.gallery, &cfg.pixel_norm())?;
    let labels = LabelColumns::new(&bundle.query, &bundle.gallery);
    for mode in [FusionMode::Ds, FusionMode::Di, FusionMode::Sum] {
        let (_, report) = evaluate_scores(&scores, &labels.view(), mode)?;
        println!("{:<4} mAP {:.4}  top-1 {:.4}", mode.name(), report.map, report.top1);
    }

    let bytes = trainer.checkpoint()?.to_bytes()?;
    let restored = Checkpoint::from_bytes(&bytes)?.model()?;
    let again = stream_scores(&restored, &bundle.query, &bundle.gallery, &cfg.pixel_norm())?;
    println!(
        "checkpoint: {} bytes, restored scores identical: {}",
        bytes.len(),
        again.ds == scores.ds && again.di == scores.di
    );
    Ok(())
}
