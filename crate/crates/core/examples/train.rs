//! Trains the full pipeline on one fold of a small synthetic dataset and
//! saves the checkpoint.

use dme::eval::{gen_synthetic, make_folds, SyntheticConfig};
use dme::features::FeatureSpec;
use dme::model::EmbeddingModel;
use dme::train::{constraint_satisfaction, train, FeatureCache, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dme::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let s = gen_synthetic(&SyntheticConfig {
        concepts: 4,
        tasks_per_concept: 10,
        ..Default::default()
    })?;
    let ds = &s.dataset;
    let cache = FeatureCache::build(ds, &FeatureSpec::default())?;
    let split = make_folds(ds, 0)?;
    let cfg = TrainConfig {
        metric_epochs: 30,
        finetune_epochs: 60,
        ..Default::default()
    };
    let out = train(ds, &cache, &split.train(0), split.validation(0), &cfg)?;
    println!("{:?}", out.summary);
    let sat = constraint_satisfaction(&out.model, &out.data, 5000, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("training constraints satisfied: {sat:.3}");

    let path = std::env::temp_dir().join("dme_example.model");
    out.model.save(&path)?;
    let back = EmbeddingModel::load(&path)?;
    println!("checkpoint {} ({} bytes)", path.display(), back.to_bytes().len());
    Ok(())
}
