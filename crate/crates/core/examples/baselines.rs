//! Trains and scores the full method against its ablations on one fold.

use dme::eval::{gen_synthetic, make_folds, run_variants, Baseline, SyntheticConfig};
use dme::features::FeatureSpec;
use dme::train::{FeatureCache, TrainConfig};

fn main() -> dme::Result<()> {
    let s = gen_synthetic(&SyntheticConfig::default())?;
    let cache = FeatureCache::build(&s.dataset, &FeatureSpec::default())?;
    let split = make_folds(&s.dataset, 0)?;
    let variants = [
        Baseline::Chance,
        Baseline::LmnnConstant,
        Baseline::NoPretrain,
        Baseline::SdaOnly,
        Baseline::Full,
    ];
    println!("{:<16}{:>10}{:>14}{:>12}", "method", "accuracy", "per instr.", "per manual");
    for v in run_variants(&s.dataset, &cache, &split, 0, &TrainConfig::default(), &variants)? {
        let r = &v.report;
        println!("{:<16}{:>10.3}{:>14.2}{:>12.2}", v.baseline.to_string(), r.accuracy, r.dtw_per_instruction, r.dtw_per_manual);
    }
    Ok(())
}
