//! Writes task and trajectory embeddings of a trained model as TSV, ready
//! for plotting.

use dme::eval::{embeddings_tsv, gen_synthetic, make_folds, SyntheticConfig};
use dme::features::FeatureSpec;
use dme::train::{train, FeatureCache, TrainConfig};

fn main() -> dme::Result<()> {
    let s = gen_synthetic(&SyntheticConfig {
        concepts: 3,
        tasks_per_concept: 8,
        ..Default::default()
    })?;
    let ds = &s.dataset;
    let cache = FeatureCache::build(ds, &FeatureSpec::default())?;
    let split = make_folds(ds, 0)?;
    let cfg = TrainConfig {
        metric_epochs: 20,
        finetune_epochs: 40,
        ..Default::default()
    };
    let model = train(ds, &cache, &split.train(0), split.validation(0), &cfg)?.model;
    let tsv = embeddings_tsv(&model, ds, &cache)?;
    let path = std::env::temp_dir().join("dme_embeddings.tsv");
    std::fs::write(&path, &tsv).map_err(|e| dme::Error::io(&path, e))?;
    for line in tsv.lines().take(3) {
        println!("{}", &line[..line.len().min(90)]);
    }
    println!("{} rows in {}", tsv.lines().count() - 1, path.display());
    Ok(())
}
