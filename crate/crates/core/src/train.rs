//! Training pipeline: feature cache, per-split training data, and the SDA,
//! metric pre-training and fine-tuning stages.
//!
//! Every stage draws from its own seeded stream, so a stage yields the same
//! result whether the stages before it ran in this process or were loaded
//! from a checkpoint.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{iou, Dataset};
use crate::dtw::{trajectory_loss, LossMatrix};
use crate::error::{Error, Result};
use crate::features::{bag_of_words, part_vector, trajectory_vector, voxelize_indices, compact_grids, FeatureSpec, Vocabulary};
use crate::geometry::principal_frame;
use crate::model::{
    build_relevance_sets, embed_traj_h2, h2pl_loss, h2tau_loss, hinge, most_violating, EmbeddingModel, MarginMode, ModelDims, ModelGrads,
    RelevanceSets,
};
use crate::nn::{dot, reduce_chunks, AdaDeltaState, Activations};
use crate::sda::{pretrain_stack, SdaConfig};

/// Items per parallel reduction chunk when the determinism flag is set.
const DETERMINISTIC_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// scale of the loss term during mining
    pub alpha: f64,
    pub t_s: f64,
    pub t_d: f64,
    /// a retrieved trajectory counts as correct below this loss
    pub accuracy_threshold: f64,
    pub dims: ModelDims,
    pub sda: SdaConfig,
    /// layers of each branch pre-trained as autoencoders
    pub sda_layers: usize,
    pub metric_epochs: usize,
    pub finetune_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub positives_per_task: usize,
    pub margin: MarginMode,
    pub rho: f64,
    pub eps: f64,
    pub skip_sda: bool,
    pub skip_metric: bool,
    pub multi_seg: bool,
    pub deterministic: bool,
    /// 0 uses the ambient thread pool
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.2,
            t_s: 10.0,
            t_d: 20.0,
            accuracy_threshold: 10.0,
            dims: ModelDims::default(),
            sda: SdaConfig::default(),
            sda_layers: 2,
            metric_epochs: 100,
            finetune_epochs: 300,
            patience: 30,
            batch_size: 64,
            positives_per_task: 3,
            margin: MarginMode::LossAugmented,
            rho: 0.95,
            eps: 1e-6,
            skip_sda: false,
            skip_metric: false,
            multi_seg: true,
            deterministic: true,
            workers: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.t_s > self.t_d {
            return Err(Error::Config(format!("t_s ({}) must not exceed t_d ({})", self.t_s, self.t_d)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if self.batch_size == 0 || self.positives_per_task == 0 {
            return Err(Error::Config("batch size and positives per task must be positive".into()));
        }
        Ok(())
    }

    fn chunk(&self, n: usize) -> usize {
        if self.deterministic {
            DETERMINISTIC_CHUNK
        } else {
            n.div_ceil(rayon::current_num_threads()).max(1)
        }
    }

    /// Runs `f` on a pool with `workers` threads, or on the ambient pool.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        if self.workers == 0 {
            return Ok(f());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Sda,
    MetricPl,
    MetricTau,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Sda => "sda",
            Stage::MetricPl => "h2pl",
            Stage::MetricTau => "h2tau",
            Stage::Finetune => "h3",
        }
    }

    fn rng(self, seed: u64) -> ChaCha8Rng {
        let tag = self as u64 + 1;
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: String,
    pub loss: f64,
    pub violation_rate: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, epoch: usize, stage: impl Into<String>, loss: f64, violation_rate: Option<f64>, val_accuracy: Option<f64>) {
        let row = LogRow {
            epoch,
            stage: stage.into(),
            loss,
            violation_rate,
            val_accuracy,
        };
        log::info!(
            "{} epoch {}: loss {:.5} violations {} val@10 {}",
            row.stage,
            row.epoch,
            row.loss,
            opt(row.violation_rate),
            opt(row.val_accuracy)
        );
        self.rows.push(row);
    }

    pub fn stage_rows<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a LogRow> + 'a {
        self.rows.iter().filter(move |r| r.stage == stage)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tstage\tmean_loss\tviolation_rate\tval_accuracy_at_10\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.epoch, r.stage, r.loss, opt(r.violation_rate), opt(r.val_accuracy));
        }
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x}"))
}

/// A scene candidate segment featurized in a part frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFeature {
    pub scene: usize,
    pub candidate: usize,
    /// best-overlapping part (IoU at least 0.5), whose frame was used
    pub part: Option<usize>,
    pub vector: Vec<f64>,
}

/// Featurized parts, candidate segments and trajectories of a dataset, in
/// dataset order. Independent of any split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub spec: FeatureSpec,
    pub parts: Vec<Vec<f64>>,
    pub candidates: Vec<CandidateFeature>,
    pub trajectories: Vec<Vec<f64>>,
}

/// Overlap needed for a candidate to count as a view of a part.
pub const VIEW_IOU: f64 = 0.5;

impl FeatureCache {
    pub fn build(ds: &Dataset, spec: &FeatureSpec) -> Result<Self> {
        let scene_of: HashMap<&str, usize> = ds.scenes().iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let parts = ds
            .parts()
            .par_iter()
            .map(|p| part_vector(&ds.scenes()[scene_of[p.scene_id.as_str()]].cloud, p, spec))
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(usize, usize)> = ds
            .scenes()
            .iter()
            .enumerate()
            .flat_map(|(si, s)| (0..s.candidates.len()).map(move |ci| (si, ci)))
            .collect();
        let candidates: Vec<Option<CandidateFeature>> = jobs
            .par_iter()
            .map(|&(si, ci)| {
                let scene = &ds.scenes()[si];
                let idx = &scene.candidates[ci];
                let best = ds
                    .parts()
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.scene_id == scene.id)
                    .map(|(pi, p)| (pi, iou(idx, &p.point_indices)))
                    .filter(|&(_, o)| o >= VIEW_IOU)
                    .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                        Some(a) if a.1 >= x.1 => Some(a),
                        _ => Some(x),
                    });
                let frame = match best {
                    Some((pi, _)) => ds.parts()[pi].frame,
                    None => {
                        let pts: Vec<_> = idx.iter().map(|&i| scene.cloud.points[i]).collect();
                        match principal_frame(&pts, &scene.cloud.sensor_origin) {
                            Some(f) => f,
                            None => return Ok(None),
                        }
                    }
                };
                if idx.is_empty() {
                    return Ok(None);
                }
                let full = voxelize_indices(&scene.cloud, idx, &frame, &spec.grid)?;
                Ok(Some(CandidateFeature {
                    scene: si,
                    candidate: ci,
                    part: best.map(|b| b.0),
                    vector: compact_grids(&full, &spec.compact)?.flattened(),
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        let trajectories = ds
            .trajectories()
            .par_iter()
            .map(|t| trajectory_vector(t, &spec.trajectory))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureCache {
            spec: *spec,
            parts,
            candidates: candidates.into_iter().flatten().collect(),
            trajectories,
        })
    }
}

/// One training task: its point-cloud views, instruction, expert demo and
/// relevance sets (all as indices into [`TrainingData`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub task: usize,
    pub views: Vec<usize>,
    pub lang: usize,
    pub optimal: usize,
    pub sets: RelevanceSets,
}

/// A held-out task with the loss of its expert demo against every pool
/// trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub task: usize,
    pub pc: Vec<f64>,
    pub lang: Vec<f64>,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub vocab: Vocabulary,
    pub pc: Vec<Vec<f64>>,
    pub lang: Vec<Vec<f64>>,
    /// mining pool, sorted by trajectory id
    pub pool_ids: Vec<String>,
    pub pool: Vec<Vec<f64>>,
    pub delta: LossMatrix,
    pub items: Vec<TrainItem>,
    pub val: Vec<EvalItem>,
    /// point-cloud inputs used for autoencoder pre-training
    pub sda_pc: Vec<usize>,
    /// tasks dropped for lack of dissimilar trajectories
    pub skipped: Vec<usize>,
}

/// Builds the vocabulary, mining pool, loss matrix, relevance sets and
/// validation items of one split. `train` and `val` are dataset task
/// indices; nothing outside them is read except the feature cache rows
/// they reference.
pub fn prepare(ds: &Dataset, cache: &FeatureCache, train: &[usize], val: &[usize], cfg: &TrainConfig) -> Result<TrainingData> {
    cfg.check()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingPool);
    }
    let tasks = ds.tasks();
    let vocab = Vocabulary::build(
        train
            .iter()
            .chain(val)
            .map(|&t| ds.instruction(&tasks[t].instruction_id).expect("validated").text.as_str()),
    );
    let pool_set: BTreeSet<&str> = train.iter().flat_map(|&t| tasks[t].demos.iter().map(String::as_str)).collect();
    let pool_ids: Vec<String> = pool_set.into_iter().map(str::to_owned).collect();
    let pool_ds: Vec<usize> = pool_ids.iter().map(|id| ds.trajectory_index(id).expect("validated")).collect();
    let pool: Vec<Vec<f64>> = pool_ds.iter().map(|&i| cache.trajectories[i].clone()).collect();
    let pool_refs: Vec<_> = pool_ds.iter().map(|&i| &ds.trajectories()[i]).collect();
    let delta = LossMatrix::compute(&pool_refs, &ds.dtw_weights)?;
    let pool_pos: HashMap<&str, usize> = pool_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let part_pos: HashMap<&str, usize> = ds.parts().iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();

    let mut pc = Vec::new();
    let mut pc_slot: HashMap<(bool, usize), usize> = HashMap::new();
    let mut slot = |key: (bool, usize), v: &Vec<f64>, pc: &mut Vec<Vec<f64>>| -> usize {
        *pc_slot.entry(key).or_insert_with(|| {
            pc.push(v.clone());
            pc.len() - 1
        })
    };
    let mut views_of_part: HashMap<usize, Vec<usize>> = HashMap::new();
    for (ci, c) in cache.candidates.iter().enumerate() {
        if let Some(p) = c.part {
            views_of_part.entry(p).or_default().push(ci);
        }
    }
    let mut lang = Vec::new();
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    let mut scenes = BTreeSet::new();
    for &t in train {
        let task = &tasks[t];
        let pi = part_pos[task.part_id.as_str()];
        scenes.insert(ds.parts()[pi].scene_id.as_str());
        let optimal = pool_pos[task.optimal.as_str()];
        let sets = build_relevance_sets(delta.row(optimal), cfg.t_s, cfg.t_d)?;
        if sets.check().is_err() {
            log::warn!("task `{}` has an empty relevance set and is skipped", task.id);
            skipped.push(t);
            continue;
        }
        let mut views = vec![slot((false, pi), &cache.parts[pi], &mut pc)];
        if cfg.multi_seg {
            for &ci in views_of_part.get(&pi).map(Vec::as_slice).unwrap_or(&[]) {
                views.push(slot((true, ci), &cache.candidates[ci].vector, &mut pc));
            }
        }
        let text = &ds.instruction(&task.instruction_id).expect("validated").text;
        lang.push(bag_of_words(text, &vocab).counts);
        items.push(TrainItem {
            task: t,
            views,
            lang: lang.len() - 1,
            optimal,
            sets,
        });
    }
    if items.is_empty() {
        return Err(Error::EmptyTrainingPool);
    }
    let mut sda_pc: Vec<usize> = items.iter().map(|it| it.views[0]).collect();
    if cfg.multi_seg {
        for (ci, c) in cache.candidates.iter().enumerate() {
            if scenes.contains(ds.scenes()[c.scene].id.as_str()) {
                sda_pc.push(slot((true, ci), &c.vector, &mut pc));
            }
        }
    }
    sda_pc.sort_unstable();
    sda_pc.dedup();

    let val = val
        .par_iter()
        .map(|&t| {
            let task = &tasks[t];
            let pi = part_pos[task.part_id.as_str()];
            let expert = ds.trajectory(&task.optimal).expect("validated");
            let delta = pool_refs.iter().map(|p| trajectory_loss(expert, p, &ds.dtw_weights)).collect::<Result<Vec<_>>>()?;
            let text = &ds.instruction(&task.instruction_id).expect("validated").text;
            Ok(EvalItem {
                task: t,
                pc: cache.parts[pi].clone(),
                lang: bag_of_words(text, &vocab).counts,
                delta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingData {
        vocab,
        pc,
        lang,
        pool_ids,
        pool,
        delta,
        items,
        val,
        sda_pc,
        skipped,
    })
}

/// Glorot-initialized model sized for `data`.
pub fn init_model(data: &TrainingData, features: FeatureSpec, cfg: &TrainConfig) -> Result<EmbeddingModel> {
    let dims = ModelDims {
        pc_in: data.pc[0].len(),
        traj_in: data.pool[0].len(),
        ..cfg.dims
    };
    let mut model = EmbeddingModel::new(dims, data.vocab.clone(), features)?;
    model.init(&mut Stage::Init.rng(cfg.seed));
    Ok(model)
}

/// AdaDelta state for each of the four stacks.
struct Optimizer {
    states: Vec<AdaDeltaState>,
}

impl Optimizer {
    fn new(model: &EmbeddingModel, cfg: &TrainConfig) -> Result<Self> {
        Ok(Optimizer {
            states: model
                .stacks()
                .iter()
                .map(|s| AdaDeltaState::new(s.num_params(), cfg.rho, cfg.eps))
                .collect::<Result<_>>()?,
        })
    }

    /// Updates the stacks flagged in `which` (pc, lang, joint, traj).
    fn step(&mut self, model: &mut EmbeddingModel, grads: &ModelGrads, which: [bool; 4]) -> Result<()> {
        for (((stack, g), st), on) in model.stacks_mut().into_iter().zip(grads.parts()).zip(&mut self.states).zip(which) {
            if on {
                st.step(stack.params_mut(), g)?;
            }
        }
        Ok(())
    }
}

fn merge_grads(a: &mut ModelGrads, b: &ModelGrads) {
    a.add(b);
}

/// Greedy autoencoder pre-training of the lower layers of the pc, lang and
/// trajectory branches.
pub fn pretrain_sda(model: &mut EmbeddingModel, data: &TrainingData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    let mut rng = Stage::Sda.rng(cfg.seed);
    let pc: Vec<Vec<f64>> = data.sda_pc.iter().map(|&i| data.pc[i].clone()).collect();
    let branches: [(&str, &Vec<Vec<f64>>); 3] = [("pc", &pc), ("lang", &data.lang), ("traj", &data.pool)];
    for (k, (name, inputs)) in branches.into_iter().enumerate() {
        let stack = match k {
            0 => &mut model.pc,
            1 => &mut model.lang,
            _ => &mut model.traj,
        };
        let histories = pretrain_stack(stack, cfg.sda_layers, inputs, &cfg.sda, &mut rng)?;
        for (layer, h) in histories.iter().enumerate() {
            for (e, &l) in h.iter().enumerate() {
                log.push(e + 1, format!("sda-{name}-{layer}"), l, None, None);
            }
        }
    }
    Ok(())
}

/// Examples of a stage: (item, view) pairs.
fn examples(data: &TrainingData, all_views: bool) -> Vec<(usize, usize)> {
    data.items
        .iter()
        .enumerate()
        .flat_map(|(i, it)| {
            let n = if all_views { it.views.len() } else { 1 };
            (0..n).map(move |v| (i, v))
        })
        .collect()
}

/// Point-cloud/language metric pre-training. Each instruction in the pool
/// carries the expert demo of its task; the most violating instruction is
/// mined against the part and the margin is the loss between the two
/// expert demos. Returns the mean loss of each epoch.
pub fn pretrain_h2pl(model: &mut EmbeddingModel, data: &TrainingData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<Vec<f64>> {
    let mut rng = Stage::MetricPl.rng(cfg.seed);
    let mut opt = Optimizer::new(model, cfg)?;
    let mut ex = examples(data, true);
    let mut history = Vec::new();
    let n = data.items.len();
    for epoch in 1..=cfg.metric_epochs {
        ex.shuffle(&mut rng);
        let (mut total, mut count, mut violated) = (0.0, 0usize, 0usize);
        for batch in ex.chunks(cfg.batch_size) {
            let lang_emb = data.lang.iter().map(|l| model.lang.apply(l)).collect::<Result<Vec<_>>>()?;
            let mut triples = Vec::with_capacity(batch.len());
            for &(i, v) in batch {
                let it = &data.items[i];
                let row = data.delta.row(it.optimal);
                let deltas: Vec<f64> = data.items.iter().map(|o| row[o.optimal]).collect();
                let cands: Vec<usize> = (0..n).filter(|&j| deltas[j] >= cfg.t_s).collect();
                if cands.is_empty() {
                    continue;
                }
                let p = model.pc.apply(&data.pc[it.views[v]])?;
                let sims: Vec<f64> = lang_emb.iter().map(|l| dot(&p, l)).collect();
                let j = most_violating(&sims, &deltas, &cands, cfg.alpha)?;
                triples.push((it.views[v], it.lang, data.items[j].lang, cfg.margin.margin(deltas[j])));
            }
            if triples.is_empty() {
                continue;
            }
            let m: &EmbeddingModel = model;
            let (loss, (mut g, viol)) = reduce_chunks(
                &triples,
                cfg.chunk(triples.len()),
                || (m.zero_grads(), 0usize),
                |&(pc, lp, ln, margin), (g, viol)| {
                    let l = h2pl_loss(m, &data.pc[pc], &data.lang[lp], &data.lang[ln], margin, Some(g))?;
                    *viol += (l > 0.0) as usize;
                    Ok(l)
                },
                |a, b| {
                    merge_grads(&mut a.0, &b.0);
                    a.1 += b.1;
                },
            )?;
            g.scale(1.0 / triples.len() as f64);
            opt.step(model, &g, [true, true, false, false])?;
            total += loss;
            count += triples.len();
            violated += viol;
        }
        let mean = total / count.max(1) as f64;
        history.push(mean);
        log.push(epoch, Stage::MetricPl.name(), mean, Some(violated as f64 / count.max(1) as f64), None);
    }
    Ok(history)
}

fn pick_positive(it: &TrainItem, rng: &mut impl Rng) -> usize {
    let others: Vec<usize> = it.sets.similar.iter().copied().filter(|&k| k != it.optimal).collect();
    others.choose(rng).copied().unwrap_or(it.optimal)
}

/// Trajectory metric pre-training at the intermediate trajectory layer. The
/// anchor is the expert demo, the positive a random similar trajectory and
/// the negative the most violating dissimilar one. Returns the mean loss of
/// each epoch.
pub fn pretrain_h2tau(model: &mut EmbeddingModel, data: &TrainingData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<Vec<f64>> {
    let mut rng = Stage::MetricTau.rng(cfg.seed);
    let mut opt = Optimizer::new(model, cfg)?;
    let mut ex: Vec<usize> = (0..data.items.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=cfg.metric_epochs {
        ex.shuffle(&mut rng);
        let (mut total, mut count, mut violated) = (0.0, 0usize, 0usize);
        for batch in ex.chunks(cfg.batch_size) {
            let emb = data.pool.iter().map(|t| embed_traj_h2(model, t)).collect::<Result<Vec<_>>>()?;
            let mut triples = Vec::with_capacity(batch.len());
            for &i in batch {
                let it = &data.items[i];
                let pos = pick_positive(it, &mut rng);
                let sims: Vec<f64> = emb.iter().map(|e| dot(&emb[it.optimal], e)).collect();
                let neg = most_violating(&sims, data.delta.row(pos), &it.sets.dissimilar, cfg.alpha)?;
                triples.push((it.optimal, pos, neg, cfg.margin.margin(data.delta.get(pos, neg))));
            }
            let m: &EmbeddingModel = model;
            let (loss, (mut g, viol)) = reduce_chunks(
                &triples,
                cfg.chunk(triples.len()),
                || (m.zero_grads(), 0usize),
                |&(a, p, n, margin), (g, viol)| {
                    let l = h2tau_loss(m, &data.pool[a], &data.pool[p], &data.pool[n], margin, Some(g))?;
                    *viol += (l > 0.0) as usize;
                    Ok(l)
                },
                |a, b| {
                    merge_grads(&mut a.0, &b.0);
                    a.1 += b.1;
                },
            )?;
            g.scale(1.0 / triples.len() as f64);
            opt.step(model, &g, [false, false, false, true])?;
            total += loss;
            count += triples.len();
            violated += viol;
        }
        let mean = total / count.max(1) as f64;
        history.push(mean);
        log.push(epoch, Stage::MetricTau.name(), mean, Some(violated as f64 / count.max(1) as f64), None);
    }
    Ok(history)
}

/// Accuracy of retrieving from the mining pool for the validation items.
pub fn validation_accuracy(model: &EmbeddingModel, data: &TrainingData, threshold: f64) -> Result<Option<f64>> {
    if data.val.is_empty() {
        return Ok(None);
    }
    let lib = data.pool.iter().map(|t| model.embed_traj(t)).collect::<Result<Vec<_>>>()?;
    let mut hits = 0;
    for v in &data.val {
        let u = model.embed_task(&v.pc, &v.lang)?;
        let best = argmax_dot(&u, &lib).expect("non-empty pool");
        hits += (v.delta[best] < threshold) as usize;
    }
    Ok(Some(hits as f64 / data.val.len() as f64))
}

/// Row with the largest inner product; ties go to the smaller index.
pub fn argmax_dot(u: &[f64], rows: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (k, r) in rows.iter().enumerate() {
        let s = dot(u, r);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, k));
        }
    }
    best.map(|b| b.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub best_loss: f64,
    pub initial_violation_rate: f64,
    pub best_violation_rate: f64,
}

struct H3Grads {
    model: ModelGrads,
    /// gradient with respect to each pool embedding
    pool: Vec<Vec<f64>>,
    triples: usize,
    violated: usize,
}

/// One pass of loss-augmented hinge training over `ex`. Without `opt` the
/// model is left untouched and only the loss is measured.
fn h3_epoch(
    model: &mut EmbeddingModel,
    data: &TrainingData,
    cfg: &TrainConfig,
    ex: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
    mut opt: Option<&mut Optimizer>,
) -> Result<(f64, f64)> {
    let (mut total, mut count, mut violated) = (0.0, 0usize, 0usize);
    let embed = model.embed_dim();
    for batch in ex.chunks(cfg.batch_size) {
        let acts: Vec<Activations> = data.pool.iter().map(|t| model.traj.forward(t)).collect::<Result<_>>()?;
        let emb: Vec<&[f64]> = acts.iter().map(|a| a.last().expect("output").as_slice()).collect();
        let work: Vec<(usize, usize, Vec<usize>)> = batch
            .iter()
            .map(|&(i, v)| {
                let it = &data.items[i];
                let mut pos = it.sets.similar.clone();
                pos.shuffle(rng);
                pos.truncate(cfg.positives_per_task);
                pos.sort_unstable();
                (i, v, pos)
            })
            .collect();
        let m: &EmbeddingModel = model;
        let want_grads = opt.is_some();
        let (loss, mut g) = reduce_chunks(
            &work,
            cfg.chunk(work.len()),
            || H3Grads {
                model: if want_grads { m.zero_grads() } else { ModelGrads::default() },
                pool: if want_grads { vec![vec![0.0; embed]; data.pool.len()] } else { vec![] },
                triples: 0,
                violated: 0,
            },
            |(i, v, pos), g| {
                let it = &data.items[*i];
                let fw = m.forward_task(&data.pc[it.views[*v]], &data.lang[it.lang])?;
                let u = fw.output();
                let sims: Vec<f64> = emb.iter().map(|e| dot(u, e)).collect();
                let mut gu = vec![0.0; embed];
                let mut loss = 0.0;
                for &j in pos {
                    let neg = most_violating(&sims, data.delta.row(j), &it.sets.dissimilar, cfg.alpha)?;
                    let l = hinge(cfg.margin.margin(data.delta.get(j, neg)), sims[neg], sims[j]);
                    g.triples += 1;
                    if l > 0.0 {
                        g.violated += 1;
                        loss += l;
                        if want_grads {
                            for d in 0..embed {
                                gu[d] += emb[neg][d] - emb[j][d];
                                g.pool[neg][d] += u[d];
                                g.pool[j][d] -= u[d];
                            }
                        }
                    }
                }
                if want_grads && gu.iter().any(|&x| x != 0.0) {
                    m.backward_task(&fw, &gu, &mut g.model)?;
                }
                Ok(loss)
            },
            |a, b| {
                if want_grads {
                    a.model.add(&b.model);
                    for (x, y) in a.pool.iter_mut().zip(&b.pool) {
                        x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                    }
                }
                a.triples += b.triples;
                a.violated += b.violated;
            },
        )?;
        total += loss;
        count += g.triples;
        violated += g.violated;
        if let Some(opt) = opt.as_deref_mut() {
            for (k, up) in g.pool.iter().enumerate() {
                if up.iter().any(|&x| x != 0.0) {
                    model.traj.backward(&acts[k], up, &mut g.model.traj, false)?;
                }
            }
            g.model.scale(1.0 / g.triples.max(1) as f64);
            opt.step(model, &g.model, [true; 4])?;
        }
    }
    Ok((total / count.max(1) as f64, violated as f64 / count.max(1) as f64))
}

/// Fine-tunes every layer with the loss-augmented hinge and keeps the
/// snapshot with the best validation accuracy (lower training loss breaks
/// ties). Stops after `patience` epochs without improvement.
pub fn finetune_h3(model: &mut EmbeddingModel, data: &TrainingData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<FinetuneSummary> {
    let mut rng = Stage::Finetune.rng(cfg.seed);
    let mut opt = Optimizer::new(model, cfg)?;
    let mut ex = examples(data, true);
    let (loss0, viol0) = h3_epoch(model, data, cfg, &ex, &mut rng.clone(), None)?;
    let acc0 = validation_accuracy(model, data, cfg.accuracy_threshold)?;
    log.push(0, Stage::Finetune.name(), loss0, Some(viol0), acc0);
    let mut best = (model.clone(), acc0.unwrap_or(0.0), loss0, 0usize, viol0);
    let mut since = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.finetune_epochs {
        ex.shuffle(&mut rng);
        let (loss, viol) = h3_epoch(model, data, cfg, &ex, &mut rng, Some(&mut opt))?;
        let acc = validation_accuracy(model, data, cfg.accuracy_threshold)?;
        log.push(epoch, Stage::Finetune.name(), loss, Some(viol), acc);
        epochs_run = epoch;
        let a = acc.unwrap_or(0.0);
        if a > best.1 || (a == best.1 && loss < best.2 * (1.0 - 1e-3)) {
            best = (model.clone(), a, loss, epoch, viol);
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    *model = best.0;
    Ok(FinetuneSummary {
        epochs_run,
        best_epoch: best.3,
        best_val_accuracy: acc0.map(|_| best.1),
        best_loss: best.2,
        initial_violation_rate: viol0,
        best_violation_rate: best.4,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: EmbeddingModel,
    pub data: TrainingData,
    pub log: TrainLog,
    pub summary: FinetuneSummary,
}

/// Full pipeline on one split: SDA, metric pre-training, fine-tuning, each
/// skippable through the config.
pub fn train(ds: &Dataset, cache: &FeatureCache, train: &[usize], val: &[usize], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.install(|| {
        let data = prepare(ds, cache, train, val, cfg)?;
        let mut model = init_model(&data, cache.spec, cfg)?;
        let mut log = TrainLog::default();
        if !cfg.skip_sda {
            pretrain_sda(&mut model, &data, cfg, &mut log)?;
        }
        if !cfg.skip_metric {
            pretrain_h2pl(&mut model, &data, cfg, &mut log)?;
            pretrain_h2tau(&mut model, &data, cfg, &mut log)?;
        }
        let summary = finetune_h3(&mut model, &data, cfg, &mut log)?;
        Ok(TrainOutput { model, data, log, summary })
    })?
}

/// Fraction of sampled training constraints
/// `sim(task, pos) >= delta(pos, neg) + sim(task, neg)` that hold, with
/// `pos` similar and `neg` dissimilar to the task's expert.
pub fn constraint_satisfaction(model: &EmbeddingModel, data: &TrainingData, samples: usize, rng: &mut impl Rng) -> Result<f64> {
    let lib = data.pool.iter().map(|t| model.embed_traj(t)).collect::<Result<Vec<_>>>()?;
    let tasks = data
        .items
        .iter()
        .map(|it| model.embed_task(&data.pc[it.views[0]], &data.lang[it.lang]))
        .collect::<Result<Vec<_>>>()?;
    let mut ok = 0;
    for _ in 0..samples {
        let i = rng.gen_range(0..data.items.len());
        let it = &data.items[i];
        let j = *it.sets.similar.choose(rng).expect("checked");
        let k = *it.sets.dissimilar.choose(rng).expect("checked");
        ok += (dot(&tasks[i], &lib[j]) >= data.delta.get(j, k) + dot(&tasks[i], &lib[k])) as usize;
    }
    Ok(ok as f64 / samples.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{gen_synthetic, SyntheticConfig};

    fn tiny() -> (Dataset, FeatureCache) {
        let s = gen_synthetic(&SyntheticConfig {
            concepts: 3,
            tasks_per_concept: 6,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let cache = FeatureCache::build(&s.dataset, &FeatureSpec::default()).unwrap();
        (s.dataset, cache)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            dims: ModelDims {
                pc_hidden: [16, 8],
                lang_hidden: [12, 8],
                traj_hidden: [12, 10],
                embed: 6,
                ..Default::default()
            },
            sda: SdaConfig {
                epochs: 2,
                ..Default::default()
            },
            metric_epochs: 2,
            finetune_epochs: 3,
            batch_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn prepared_sets_are_disjoint_and_contain_the_expert() {
        let (ds, cache) = tiny();
        let train: Vec<usize> = (0..14).collect();
        let data = prepare(&ds, &cache, &train, &[14, 15], &small_cfg()).unwrap();
        assert!(data.pool_ids.windows(2).all(|w| w[0] < w[1]));
        for it in &data.items {
            assert!(it.sets.similar.contains(&it.optimal));
            assert!(it.sets.similar.iter().all(|k| !it.sets.dissimilar.contains(k)));
            assert!(it.views.len() >= 2, "multi-seg views are attached");
        }
        assert_eq!(data.val.len(), 2);
        assert_eq!(data.val[0].delta.len(), data.pool.len());
    }

    #[test]
    fn views_follow_the_flag() {
        let (ds, cache) = tiny();
        let train: Vec<usize> = (0..10).collect();
        let cfg = TrainConfig {
            multi_seg: false,
            ..small_cfg()
        };
        let data = prepare(&ds, &cache, &train, &[], &cfg).unwrap();
        assert!(data.items.iter().all(|it| it.views.len() == 1));
        assert_eq!(data.sda_pc.len(), data.items.len());
    }

    #[test]
    fn vocabulary_ignores_test_tasks() {
        let (ds, cache) = tiny();
        let train: Vec<usize> = (0..8).collect();
        let a = prepare(&ds, &cache, &train, &[8], &small_cfg()).unwrap();
        let corrupted = ds
            .with_instruction_texts(|l| {
                let task_of = ds.tasks().iter().position(|t| t.instruction_id == l.id).unwrap();
                if task_of >= 9 {
                    "zzz qqq".into()
                } else {
                    l.text.clone()
                }
            })
            .unwrap();
        let b = prepare(&corrupted, &cache, &train, &[8], &small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage_streams_are_independent() {
        let (ds, cache) = tiny();
        let cfg = small_cfg();
        let train: Vec<usize> = (0..14).collect();
        let data = prepare(&ds, &cache, &train, &[14], &cfg).unwrap();
        let mut a = init_model(&data, cache.spec, &cfg).unwrap();
        let mut log = TrainLog::default();
        pretrain_sda(&mut a, &data, &cfg, &mut log).unwrap();
        let snapshot = a.clone();
        finetune_h3(&mut a, &data, &cfg, &mut log).unwrap();
        let mut b = snapshot;
        finetune_h3(&mut b, &data, &cfg, &mut log).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_pipeline_is_reproducible() {
        let (ds, cache) = tiny();
        let cfg = small_cfg();
        let train: Vec<usize> = (0..14).collect();
        let a = train_fn(&ds, &cache, &train, &cfg);
        let b = train_fn(&ds, &cache, &train, &cfg);
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        assert_eq!(a.log, b.log);
        let tsv = a.log.to_tsv();
        assert!(tsv.starts_with("epoch\tstage\tmean_loss"));
        assert!(tsv.contains("\th2pl\t") && tsv.contains("\th2tau\t") && tsv.contains("\th3\t"));
    }

    fn train_fn(ds: &Dataset, cache: &FeatureCache, train_idx: &[usize], cfg: &TrainConfig) -> TrainOutput {
        train(ds, cache, train_idx, &[14, 15], cfg).unwrap()
    }

    #[test]
    fn constant_margin_with_unit_losses_matches_loss_augmented() {
        let (ds, cache) = tiny();
        let cfg = small_cfg();
        let train: Vec<usize> = (0..14).collect();
        let mut data = prepare(&ds, &cache, &train, &[], &cfg).unwrap();
        data.delta = LossMatrix::constant(data.pool.len(), 1.0);
        for it in &mut data.items {
            it.sets = RelevanceSets {
                similar: vec![it.optimal],
                dissimilar: (0..data.pool.len()).filter(|&k| k != it.optimal).collect(),
            };
        }
        let mut model = init_model(&data, cache.spec, &cfg).unwrap();
        let ex = examples(&data, true);
        let rng = ChaCha8Rng::seed_from_u64(1);
        let a = h3_epoch(&mut model, &data, &cfg, &ex, &mut rng.clone(), None).unwrap();
        let c = TrainConfig {
            margin: MarginMode::Constant1,
            ..cfg
        };
        let b = h3_epoch(&mut model, &data, &c, &ex, &mut rng.clone(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_prefers_the_first_of_ties() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(argmax_dot(&[0.9, 0.1], &rows), Some(0));
        assert_eq!(argmax_dot(&[0.1, 0.9], &rows), Some(1));
        assert_eq!(argmax_dot(&[0.1, 0.9], &[]), None);
    }
}
