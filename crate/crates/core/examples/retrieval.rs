//! Pre-embeds a trajectory library, answers queries from it and times it
//! against embedding the library per query.

use dme::eval::{gen_synthetic, library_of, make_folds, task_inputs, SyntheticConfig};
use dme::features::FeatureSpec;
use dme::retrieval::{bench, build_index_from_vectors, Retriever};
use dme::train::{init_model, prepare, FeatureCache, TrainConfig};

fn main() -> dme::Result<()> {
    let s = gen_synthetic(&SyntheticConfig::default())?;
    let ds = &s.dataset;
    let cache = FeatureCache::build(ds, &FeatureSpec::default())?;
    let split = make_folds(ds, 0)?;
    let cfg = TrainConfig::default();
    // an untrained model is enough to show the mechanics
    let data = prepare(ds, &cache, &split.train(0), split.validation(0), &cfg)?;
    let model = init_model(&data, cache.spec, &cfg)?;

    let lib = library_of(ds, &split.training_portion(0));
    let ids: Vec<String> = lib.iter().map(|&i| ds.trajectories()[i].id.clone()).collect();
    let vectors: Vec<Vec<f64>> = lib.iter().map(|&i| cache.trajectories[i].clone()).collect();
    let index = build_index_from_vectors(&model, ids, &vectors)?;
    let r = Retriever::new(&index, &model)?;

    let queries = split
        .test(0)
        .iter()
        .map(|&t| task_inputs(&model, ds, &cache, t))
        .collect::<dme::Result<Vec<_>>>()?;
    for (&t, (pc, lang)) in split.test(0).iter().zip(&queries).take(3) {
        let (id, sim) = r.infer_id(pc, lang)?;
        println!("{} -> {id} ({sim:.3})", ds.tasks()[t].id);
    }
    let b = bench(&r, &vectors, &queries, 500)?;
    println!(
        "{} trajectories: indexed {:.4} ms, exhaustive {:.3} ms, {:.0}x",
        b.library,
        b.indexed.mean * 1e3,
        b.exhaustive.mean * 1e3,
        b.speedup
    );
    Ok(())
}
