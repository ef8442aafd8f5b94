//! Class-graph batch sampling: identities are linked to their most similar
//! neighbours (scored on one prototype image each by the invariant stream)
//! and every batch is an anchor identity plus its closest neighbours.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tal::data::generate_synthetic;
use tal::sampling::{build_class_graph, next_batch};
use tal::training::invariant_prototype_scores;
use tal::{ExperimentConfig, TalModel};

fn main() -> tal::Result<()> {
    let cfg = ExperimentConfig::tiny();
    let bundle = generate_synthetic(&cfg.synthetic_config())?;
    let domain = &bundle.train[0];
    let model = TalModel::new(&cfg.model_config(), 3, cfg.seed, candle_core::DType::F32, &candle_core::Device::Cpu)?;
    let norm = cfg.pixel_norm();
    let sampler = cfg.sampler_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut scorer = |d: &tal::data::ReidDataset, p: &[usize]| invariant_prototype_scores(&model, &norm, d, p);
    let graph = build_class_graph(domain, &mut scorer, &sampler, &mut rng)?;
    for c in 0..3 {
        println!("identity {c:>2} neighbours {:?}", graph.neighbors[c]);
    }

    let members = domain.class_members();
    for b in 0..2 {
        let batch = next_batch(Some(&graph), domain, &members, &sampler, &mut rng)?;
        let ids: Vec<usize> = batch.chunks(sampler.instances).map(|c| c[0].identity).collect();
        println!("batch {b}: {} images, identities {ids:?}", batch.len());
    }
    Ok(())
}
