use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::folds::FoldSplit;
use super::metrics::{summarize, CvReport, MetricsReport, Outcome};
use crate::data::Dataset;
use crate::dtw::trajectory_loss;
use crate::error::{Error, Result};
use crate::features::bag_of_words;
use crate::model::{EmbeddingModel, MarginMode};
use crate::retrieval::{build_index_from_vectors, Retriever};
use crate::train::{finetune_h3, init_model, pretrain_h2pl, pretrain_h2tau, pretrain_sda, prepare, FeatureCache, FinetuneSummary, TrainConfig, TrainLog};

/// Methods compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Baseline {
    /// uniform draw from the library
    Chance,
    /// constant margin of 1 and no loss term in mining
    LmnnConstant,
    /// fine-tuning from random initialization
    NoPretrain,
    /// autoencoder pre-training then fine-tuning
    SdaOnly,
    Full,
    /// full pipeline without extra segmentation views
    NoMultSeg,
}

impl Baseline {
    pub const ALL: [Baseline; 6] = [
        Baseline::Chance,
        Baseline::LmnnConstant,
        Baseline::NoPretrain,
        Baseline::SdaOnly,
        Baseline::Full,
        Baseline::NoMultSeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Chance => "chance",
            Baseline::LmnnConstant => "lmnn_constant",
            Baseline::NoPretrain => "no_pretrain",
            Baseline::SdaOnly => "sda_only",
            Baseline::Full => "full",
            Baseline::NoMultSeg => "no_mult_seg",
        }
    }

    /// Training settings of the method, derived from `base`; `None` for
    /// methods that do not train.
    pub fn config(self, base: &TrainConfig) -> Option<TrainConfig> {
        let mut c = base.clone();
        match self {
            Baseline::Chance => return None,
            Baseline::LmnnConstant => {
                c.margin = MarginMode::Constant1;
                c.alpha = 0.0;
            }
            Baseline::NoPretrain => {
                c.skip_sda = true;
                c.skip_metric = true;
            }
            Baseline::SdaOnly => c.skip_metric = true,
            Baseline::Full => {}
            Baseline::NoMultSeg => c.multi_seg = false,
        }
        Some(c)
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}`")))
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Dataset trajectory indices demonstrated in `tasks`, sorted by id.
pub fn library_of(ds: &Dataset, tasks: &[usize]) -> Vec<usize> {
    let ids: BTreeSet<&str> = tasks.iter().flat_map(|&t| ds.tasks()[t].demos.iter().map(String::as_str)).collect();
    ids.into_iter().map(|id| ds.trajectory_index(id).expect("validated")).collect()
}

fn manual_of(ds: &Dataset, task: usize) -> String {
    ds.instruction(&ds.tasks()[task].instruction_id).expect("validated").manual_id.clone()
}

/// Part vector and bag of words of a task, as fed to the model.
pub fn task_inputs(model: &EmbeddingModel, ds: &Dataset, cache: &FeatureCache, task: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let task = &ds.tasks()[task];
    let pi = ds
        .parts()
        .iter()
        .position(|p| p.id == task.part_id)
        .ok_or_else(|| Error::NotFound(task.part_id.clone()))?;
    let text = &ds.instruction(&task.instruction_id).ok_or_else(|| Error::NotFound(task.instruction_id.clone()))?.text;
    Ok((cache.parts[pi].clone(), bag_of_words(text, &model.vocab).counts))
}

/// Retrieves a library trajectory for every test task and scores it
/// against the task's expert demo.
pub fn evaluate_model(model: &EmbeddingModel, ds: &Dataset, cache: &FeatureCache, test: &[usize], library: &[usize], threshold: f64) -> Result<MetricsReport> {
    let ids: Vec<String> = library.iter().map(|&i| ds.trajectories()[i].id.clone()).collect();
    let vectors: Vec<Vec<f64>> = library.iter().map(|&i| cache.trajectories[i].clone()).collect();
    let index = build_index_from_vectors(model, ids, &vectors)?;
    let r = Retriever::new(&index, model)?;
    let part_pos: HashMap<&str, usize> = ds.parts().iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let outcomes = test
        .iter()
        .map(|&t| {
            let task = &ds.tasks()[t];
            let attempt = || -> Result<(String, f64)> {
                let pi = part_pos[task.part_id.as_str()];
                let text = &ds.instruction(&task.instruction_id).expect("validated").text;
                let (row, _) = r.infer(&cache.parts[pi], &bag_of_words(text, &model.vocab).counts)?;
                let chosen = &ds.trajectories()[library[row]];
                let expert = ds.trajectory(&task.optimal).expect("validated");
                Ok((chosen.id.clone(), trajectory_loss(expert, chosen, &ds.dtw_weights)?))
            };
            let res = attempt();
            if let Err(e) = &res {
                log::warn!("inference failed for task `{}`: {e}", task.id);
            }
            let res = res.ok();
            Outcome {
                task: task.id.clone(),
                manual: manual_of(ds, t),
                chosen: res.as_ref().map(|r| r.0.clone()),
                loss: res.map(|r| r.1),
            }
        })
        .collect();
    Ok(summarize(outcomes, threshold))
}

/// Scores a uniformly random library trajectory per test task.
pub fn evaluate_chance(ds: &Dataset, test: &[usize], library: &[usize], seed: u64, threshold: f64) -> Result<MetricsReport> {
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcomes = test
        .iter()
        .map(|&t| {
            let task = &ds.tasks()[t];
            let chosen = &ds.trajectories()[library[rng.gen_range(0..library.len())]];
            let expert = ds.trajectory(&task.optimal).expect("validated");
            Ok(Outcome {
                task: task.id.clone(),
                manual: manual_of(ds, t),
                chosen: Some(chosen.id.clone()),
                loss: Some(trajectory_loss(expert, chosen, &ds.dtw_weights)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(outcomes, threshold))
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub baseline: Baseline,
    pub report: MetricsReport,
    pub model: Option<EmbeddingModel>,
    pub summary: Option<FinetuneSummary>,
    pub log: TrainLog,
}

/// Trains and evaluates several methods on fold `k`. Stages that two
/// methods run with identical inputs and settings are computed once; since
/// each stage has its own random stream the results equal separate runs.
pub fn run_variants(ds: &Dataset, cache: &FeatureCache, split: &FoldSplit, k: usize, base: &TrainConfig, variants: &[Baseline]) -> Result<Vec<VariantResult>> {
    base.install(|| {
        let test = split.test(k);
        let library = library_of(ds, &split.training_portion(k));
        let train = split.train(k);
        let val = split.validation(k);
        let mut data_cache = HashMap::new();
        let mut sda_cache: HashMap<bool, (EmbeddingModel, TrainLog)> = HashMap::new();
        let mut metric_cache: Vec<((bool, u64, MarginMode), (EmbeddingModel, TrainLog))> = Vec::new();
        let mut out = Vec::new();
        for &b in variants {
            let Some(cfg) = b.config(base) else {
                let report = evaluate_chance(ds, test, &library, base.seed, base.accuracy_threshold)?;
                out.push(VariantResult {
                    baseline: b,
                    report,
                    model: None,
                    summary: None,
                    log: TrainLog::default(),
                });
                continue;
            };
            if !data_cache.contains_key(&cfg.multi_seg) {
                data_cache.insert(cfg.multi_seg, prepare(ds, cache, &train, val, &cfg)?);
            }
            let data = &data_cache[&cfg.multi_seg];
            let (mut model, mut log) = if cfg.skip_sda {
                (init_model(data, cache.spec, &cfg)?, TrainLog::default())
            } else {
                if !sda_cache.contains_key(&cfg.multi_seg) {
                    let mut m = init_model(data, cache.spec, &cfg)?;
                    let mut log = TrainLog::default();
                    pretrain_sda(&mut m, data, &cfg, &mut log)?;
                    sda_cache.insert(cfg.multi_seg, (m, log));
                }
                sda_cache[&cfg.multi_seg].clone()
            };
            if !cfg.skip_metric {
                let key = (cfg.multi_seg, cfg.alpha.to_bits(), cfg.margin);
                if let Some((_, hit)) = metric_cache.iter().find(|(k2, _)| *k2 == key && !cfg.skip_sda) {
                    (model, log) = hit.clone();
                } else {
                    pretrain_h2pl(&mut model, data, &cfg, &mut log)?;
                    pretrain_h2tau(&mut model, data, &cfg, &mut log)?;
                    if !cfg.skip_sda {
                        metric_cache.push((key, (model.clone(), log.clone())));
                    }
                }
            }
            let summary = finetune_h3(&mut model, data, &cfg, &mut log)?;
            let report = evaluate_model(&model, ds, cache, test, &library, cfg.accuracy_threshold)?;
            log::info!("fold {k} {b}: accuracy {:.3}", report.accuracy);
            out.push(VariantResult {
                baseline: b,
                report,
                model: Some(model),
                summary: Some(summary),
                log,
            });
        }
        Ok(out)
    })?
}

/// Runs [`run_variants`] on each listed fold and gathers one report per
/// method, ordered as `variants`.
pub fn cross_validate(ds: &Dataset, cache: &FeatureCache, split: &FoldSplit, folds: &[usize], base: &TrainConfig, variants: &[Baseline]) -> Result<Vec<CvReport>> {
    let mut reports: Vec<CvReport> = variants
        .iter()
        .map(|b| CvReport {
            label: b.name().to_owned(),
            folds: Vec::new(),
        })
        .collect();
    for &k in folds {
        for (i, v) in run_variants(ds, cache, split, k, base, variants)?.into_iter().enumerate() {
            reports[i].folds.push((k, v.report));
        }
    }
    Ok(reports)
}

/// TSV of task and trajectory embeddings: id, modality, coordinates.
pub fn embeddings_tsv(model: &EmbeddingModel, ds: &Dataset, cache: &FeatureCache) -> Result<String> {
    let part_pos: HashMap<&str, usize> = ds.parts().iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let mut s = String::from("id\tmodality");
    for d in 0..model.embed_dim() {
        let _ = write!(s, "\te{d}");
    }
    s.push('\n');
    let mut row = |id: &str, tag: &str, v: &[f64]| {
        s.push_str(id);
        s.push('\t');
        s.push_str(tag);
        for x in v {
            let _ = write!(s, "\t{x}");
        }
        s.push('\n');
    };
    for t in ds.tasks() {
        let text = &ds.instruction(&t.instruction_id).expect("validated").text;
        let u = model.embed_task(&cache.parts[part_pos[t.part_id.as_str()]], &bag_of_words(text, &model.vocab).counts)?;
        row(&t.id, "task", &u);
    }
    for (i, t) in ds.trajectories().iter().enumerate() {
        row(&t.id, "trajectory", &model.embed_traj(&cache.trajectories[i])?);
    }
    Ok(s)
}

pub fn export_embeddings(model: &EmbeddingModel, ds: &Dataset, cache: &FeatureCache, path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_tsv(model, ds, cache)?).map_err(|e| Error::io(path, e))
}
