//! Synthetic data, cross-validation, metrics and method comparison.

mod folds;
mod harness;
mod metrics;
pub mod synth;

pub use folds::{make_folds, make_folds_n, FoldSplit, FOLDS, VALIDATION_FRACTION};
pub use harness::{
    cross_validate, embeddings_tsv, evaluate_chance, evaluate_model, export_embeddings, library_of, run_variants, task_inputs, Baseline, VariantResult,
};
pub use metrics::{mean_std, summarize, CvReport, MetricsReport, Outcome, CURVE_THRESHOLDS};
pub use synth::{gen_synthetic, Concept, Motion, Shape, Synthetic, SyntheticConfig, CONCEPTS};
