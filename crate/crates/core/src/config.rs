//! Flat `key = value` run settings shared by every command.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::SyntheticConfig;
use crate::model::MarginMode;
use crate::segment::{RankWeights, SegmentationParams};
use crate::train::TrainConfig;

/// Settings merged from defaults, a config file and command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// seeds training, data generation and fold assignment
    pub seed: u64,
    /// fold whose test part is held out by training and scored by `eval`
    pub fold: usize,
    pub train: TrainConfig,
    pub synth: SyntheticConfig,
    pub segmentation: [SegmentationParams; 2],
    pub rank: RankWeights,
    /// fit the ranking feature weights on training scenes before selecting
    pub fit_rank_weights: bool,
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            fold: 0,
            train: TrainConfig::default(),
            synth: SyntheticConfig::default(),
            segmentation: [SegmentationParams::default(), SegmentationParams::coarse()],
            rank: RankWeights::default(),
            fit_rank_weights: false,
            bench_reps: 10_000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn margin_name(m: MarginMode) -> &'static str {
    match m {
        MarginMode::LossAugmented => "loss_augmented",
        MarginMode::Constant1 => "constant",
    }
}

impl RunConfig {
    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        let [fine, coarse] = &mut self.segmentation;
        let r = &mut self.rank;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "fold" => self.fold = parse(key, value)?,
            "deterministic" => t.deterministic = parse(key, value)?,
            "workers" => t.workers = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "t_s" => t.t_s = parse(key, value)?,
            "t_d" => t.t_d = parse(key, value)?,
            "accuracy_threshold" => t.accuracy_threshold = parse(key, value)?,
            "sda_layers" => t.sda_layers = parse(key, value)?,
            "sda_epochs" => t.sda.epochs = parse(key, value)?,
            "sda_noise_rate" => t.sda.noise_rate = parse(key, value)?,
            "sda_sparsity" => t.sda.sparsity = parse(key, value)?,
            "metric_epochs" => t.metric_epochs = parse(key, value)?,
            "finetune_epochs" => t.finetune_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "batch_size" => {
                t.batch_size = parse(key, value)?;
                t.sda.batch_size = t.batch_size;
            }
            "positives_per_task" => t.positives_per_task = parse(key, value)?,
            "margin" => {
                t.margin = match value.trim() {
                    "loss_augmented" => MarginMode::LossAugmented,
                    "constant" => MarginMode::Constant1,
                    _ => return Err(Error::Config(format!("margin must be loss_augmented or constant, got `{value}`"))),
                }
            }
            "rho" => {
                t.rho = parse(key, value)?;
                t.sda.rho = t.rho;
            }
            "eps" => {
                t.eps = parse(key, value)?;
                t.sda.eps = t.eps;
            }
            "skip_sda" => t.skip_sda = parse(key, value)?,
            "skip_metric" => t.skip_metric = parse(key, value)?,
            "multi_seg" => t.multi_seg = parse(key, value)?,
            "synth_concepts" => s.concepts = parse(key, value)?,
            "synth_tasks_per_concept" => s.tasks_per_concept = parse(key, value)?,
            "synth_demos_per_task" => s.demos_per_task = parse(key, value)?,
            "synth_cross_demo_fraction" => s.cross_demo_fraction = parse(key, value)?,
            "synth_geometry_noise" => s.geometry_noise = parse(key, value)?,
            "synth_token_dropout" => s.token_dropout = parse(key, value)?,
            "synth_position_noise" => s.position_noise = parse(key, value)?,
            "synth_rotation_noise" => s.rotation_noise = parse(key, value)?,
            "synth_candidate_variants" => s.candidate_variants = parse(key, value)?,
            "seg_radius_small" => fine.normal_neighborhood_small = parse(key, value)?,
            "seg_radius_large" => fine.normal_neighborhood_large = parse(key, value)?,
            "seg_coarse_radius_small" => coarse.normal_neighborhood_small = parse(key, value)?,
            "seg_coarse_radius_large" => coarse.normal_neighborhood_large = parse(key, value)?,
            "seg_don_threshold" => {
                fine.don_threshold = parse(key, value)?;
                coarse.don_threshold = fine.don_threshold;
            }
            "seg_cluster_distance" => {
                fine.cluster_distance = parse(key, value)?;
                coarse.cluster_distance = fine.cluster_distance;
            }
            "seg_max_extent" => fine.max_part_extent = parse(key, value)?,
            "seg_coarse_max_extent" => coarse.max_part_extent = parse(key, value)?,
            "seg_min_points" => {
                fine.min_cluster_points = parse(key, value)?;
                coarse.min_cluster_points = fine.min_cluster_points;
            }
            "rank_w_reach" => r.w[0] = parse(key, value)?,
            "rank_w_view" => r.w[1] = parse(key, value)?,
            "rank_w_pointing" => r.w[2] = parse(key, value)?,
            "rank_beta" => r.beta = parse(key, value)?,
            "rank_k_p" => r.k_p = parse(key, value)?,
            "rank_k_l" => r.k_l = parse(key, value)?,
            "rank_no_language_sim" => r.no_language_sim = parse(key, value)?,
            "fit_rank_weights" => self.fit_rank_weights = parse(key, value)?,
            "bench_reps" => self.bench_reps = parse(key, value)?,
            _ => return Err(Error::UnknownConfigKey(key.to_owned())),
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in a fixed order. Feeding these back
    /// through [`RunConfig::set`] reproduces the configuration.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let s = &self.synth;
        let [fine, coarse] = &self.segmentation;
        let r = &self.rank;
        vec![
            ("seed", self.seed.to_string()),
            ("fold", self.fold.to_string()),
            ("deterministic", t.deterministic.to_string()),
            ("workers", t.workers.to_string()),
            ("alpha", t.alpha.to_string()),
            ("t_s", t.t_s.to_string()),
            ("t_d", t.t_d.to_string()),
            ("accuracy_threshold", t.accuracy_threshold.to_string()),
            ("sda_layers", t.sda_layers.to_string()),
            ("sda_epochs", t.sda.epochs.to_string()),
            ("sda_noise_rate", t.sda.noise_rate.to_string()),
            ("sda_sparsity", t.sda.sparsity.to_string()),
            ("metric_epochs", t.metric_epochs.to_string()),
            ("finetune_epochs", t.finetune_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("positives_per_task", t.positives_per_task.to_string()),
            ("margin", margin_name(t.margin).to_string()),
            ("rho", t.rho.to_string()),
            ("eps", t.eps.to_string()),
            ("skip_sda", t.skip_sda.to_string()),
            ("skip_metric", t.skip_metric.to_string()),
            ("multi_seg", t.multi_seg.to_string()),
            ("synth_concepts", s.concepts.to_string()),
            ("synth_tasks_per_concept", s.tasks_per_concept.to_string()),
            ("synth_demos_per_task", s.demos_per_task.to_string()),
            ("synth_cross_demo_fraction", s.cross_demo_fraction.to_string()),
            ("synth_geometry_noise", s.geometry_noise.to_string()),
            ("synth_token_dropout", s.token_dropout.to_string()),
            ("synth_position_noise", s.position_noise.to_string()),
            ("synth_rotation_noise", s.rotation_noise.to_string()),
            ("synth_candidate_variants", s.candidate_variants.to_string()),
            ("seg_radius_small", fine.normal_neighborhood_small.to_string()),
            ("seg_radius_large", fine.normal_neighborhood_large.to_string()),
            ("seg_coarse_radius_small", coarse.normal_neighborhood_small.to_string()),
            ("seg_coarse_radius_large", coarse.normal_neighborhood_large.to_string()),
            ("seg_don_threshold", fine.don_threshold.to_string()),
            ("seg_cluster_distance", fine.cluster_distance.to_string()),
            ("seg_max_extent", fine.max_part_extent.to_string()),
            ("seg_coarse_max_extent", coarse.max_part_extent.to_string()),
            ("seg_min_points", fine.min_cluster_points.to_string()),
            ("rank_w_reach", r.w[0].to_string()),
            ("rank_w_view", r.w[1].to_string()),
            ("rank_w_pointing", r.w[2].to_string()),
            ("rank_beta", r.beta.to_string()),
            ("rank_k_p", r.k_p.to_string()),
            ("rank_k_l", r.k_l.to_string()),
            ("rank_no_language_sim", r.no_language_sim.to_string()),
            ("fit_rank_weights", self.fit_rank_weights.to_string()),
            ("bench_reps", self.bench_reps.to_string()),
        ]
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides such as those given with `--set`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let p = p.as_ref();
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{p}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Propagates the global seed and checks every component.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.train.check()?;
        self.synth.check()?;
        for p in &self.segmentation {
            p.check()?;
        }
        self.rank.check()?;
        if self.fold >= crate::eval::FOLDS {
            return Err(Error::Config(format!("fold must be below {}", crate::eval::FOLDS)));
        }
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
