//! Acceptance suite. Each criterion is its own test and prints one
//! `criterion N ... PASS|FAIL` line (visible with `--nocapture`). A shared
//! lock runs them one at a time so timings are not distorted.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dme::data::{iou, Gripper, Waypoint};
use dme::dtw::{dtw_mt, DtwWeights};
use dme::eval::{gen_synthetic, make_folds, run_variants, Baseline, CvReport, FoldSplit, SyntheticConfig, FOLDS};
use dme::features::{trajectory_vector, FeatureSpec, TrajectorySpec, Vocabulary};
use dme::geometry::{Quat, Vec3};
use dme::model::{flat_params, h2pl_loss, h2tau_loss, h3_loss, set_flat_params, EmbeddingModel, ModelDims, ModelGrads};
use dme::nn::{grad_check, Activation, LayerSpec, Stack};
use dme::retrieval::{bench, build_index_from_vectors, infer_exhaustive, Retriever};
use dme::sda::{autoencoder_loss, mask};
use dme::segment::{fit_rank_weights, ranking_grid, select_parts, RankWeights, RankingPool, SegmentationParams};
use dme::train::{constraint_satisfaction, init_model, prepare, FeatureCache, TrainConfig};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {n} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Full-size model over a small vocabulary, with biases lifted off zero so
/// most units are active.
fn full_model(rng: &mut impl Rng) -> EmbeddingModel {
    let vocab = Vocabulary::build(["turn the knob clockwise", "pull the handle", "push lever down", "press the button"]);
    let dims = ModelDims::default();
    let mut m = EmbeddingModel::new(dims, vocab, FeatureSpec::default()).unwrap();
    m.init(rng);
    for s in m.stacks_mut() {
        for k in 0..s.depth() {
            for b in s.bias_mut(k) {
                *b = rng.gen_range(0.0..0.2);
            }
        }
    }
    m
}

type LossFn = fn(&EmbeddingModel, &[f64], &[f64], &[f64], f64, Option<&mut ModelGrads>) -> dme::Result<f64>;

fn model_grad_error(f: LossFn, inputs: [usize; 3], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = full_model(&mut rng);
    let a = rand_vec(&mut rng, inputs[0]);
    let b = rand_vec(&mut rng, inputs[1]);
    let c = rand_vec(&mut rng, inputs[2]);
    // margin chosen so the active hinge is about 1, keeping roundoff small
    let margin = 51.0 - f(&m, &a, &b, &c, 50.0, None).unwrap();
    let mut g = m.zero_grads();
    let l = f(&m, &a, &b, &c, margin, Some(&mut g)).unwrap();
    assert!(l > 0.0, "hinge inactive");
    let mut probe = m.clone();
    grad_check(
        |p| {
            set_flat_params(&mut probe, p);
            f(&probe, &a, &b, &c, margin, None).unwrap()
        },
        &flat_params(&m),
        &g.flat(),
        200,
        1e-4,
        &mut rng,
    )
    .max_rel_error
}

fn sda_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = Stack::new(&[LayerSpec::new(2000, 250, Activation::RectifiedLinear)]).unwrap();
    let mut dec = Stack::new(&[LayerSpec::new(250, 2000, Activation::Identity)]).unwrap();
    enc.init(&mut rng);
    dec.init(&mut rng);
    for b in enc.bias_mut(0) {
        *b = rng.gen_range(0.0..0.2);
    }
    let clean = rand_vec(&mut rng, 2000);
    let noisy = mask(&clean, 0.2, &mut rng);
    let sparsity = 1e-3;
    let mut ge = enc.zero_grads();
    let mut gd = dec.zero_grads();
    autoencoder_loss(&enc, &dec, &clean, &noisy, sparsity, Some((&mut ge, &mut gd))).unwrap();
    let ne = enc.num_params();
    let mut params = enc.params().to_vec();
    params.extend_from_slice(dec.params());
    ge.extend(gd);
    let (mut pe, mut pd) = (enc.clone(), dec.clone());
    grad_check(
        |p| {
            pe.params_mut().copy_from_slice(&p[..ne]);
            pd.params_mut().copy_from_slice(&p[ne..]);
            autoencoder_loss(&pe, &pd, &clean, &noisy, sparsity, None).unwrap()
        },
        &params,
        &ge,
        200,
        1e-4,
        &mut rng,
    )
    .max_rel_error
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let _g = serial();
    let t = Instant::now();
    fn h3(m: &EmbeddingModel, pc: &[f64], pos: &[f64], neg: &[f64], margin: f64, g: Option<&mut ModelGrads>) -> dme::Result<f64> {
        let lang: Vec<f64> = (0..m.vocab.len()).map(|k| (k % 3) as f64).collect();
        h3_loss(m, pc, &lang, pos, neg, margin, g)
    }
    let lang_dim = full_model(&mut ChaCha8Rng::seed_from_u64(0)).vocab.len();
    let mut worst = [0.0f64; 4];
    for seed in 0..5 {
        worst[0] = worst[0].max(model_grad_error(h3, [2000, 150, 150], 100 + seed));
        worst[1] = worst[1].max(model_grad_error(h2pl_loss, [2000, lang_dim, lang_dim], 200 + seed));
        worst[2] = worst[2].max(model_grad_error(h2tau_loss, [150, 150, 150], 300 + seed));
        worst[3] = worst[3].max(sda_grad_error(400 + seed));
    }
    let elapsed = t.elapsed();
    let pass = worst.iter().all(|&e| e < 1e-4) && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient correctness",
        pass,
        format!("max rel error h3 {:.2e} h2pl {:.2e} h2tau {:.2e} sda {:.2e}, {elapsed:.1?}", worst[0], worst[1], worst[2], worst[3]),
    );
    assert!(pass);
}

fn random_waypoint(rng: &mut impl Rng) -> Waypoint {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Waypoint {
        position: Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(0.0..0.5)),
        orientation: Quat::from_axis_angle(&axis, rng.gen_range(0.0..std::f64::consts::PI)),
        gripper: Gripper::ALL[rng.gen_range(0..3)],
    }
}

fn random_trajectory(rng: &mut impl Rng, max_len: usize) -> Vec<Waypoint> {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| random_waypoint(rng)).collect()
}

/// Smallest mean local cost over every monotone warping path, by explicit
/// enumeration.
fn brute_force_dtw(a: &[Waypoint], b: &[Waypoint], w: &DtwWeights) -> f64 {
    fn cost(x: &Waypoint, y: &Waypoint, w: &DtwWeights) -> f64 {
        w.w_pos * (x.position - y.position).norm() + w.w_rot * x.orientation.angle_to(&y.orientation) + if x.gripper == y.gripper { 0.0 } else { w.w_grip }
    }
    fn walk(a: &[Waypoint], b: &[Waypoint], w: &DtwWeights, i: usize, j: usize, sum: f64, len: usize, best: &mut f64) {
        let sum = sum + cost(&a[i], &b[j], w);
        let len = len + 1;
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(sum / len as f64);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, w, i + 1, j, sum, len, best);
        }
        if j + 1 < b.len() {
            walk(a, b, w, i, j + 1, sum, len, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, w, i + 1, j + 1, sum, len, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, w, 0, 0, 0.0, 0, &mut best);
    best
}

#[test]
fn criterion_2_dtw_matches_enumeration() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = DtwWeights::default();
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let a = random_trajectory(&mut rng, 6);
        let b = random_trajectory(&mut rng, 6);
        worst = worst.max((dtw_mt(&a, &b, &w).unwrap() - brute_force_dtw(&a, &b, &w)).abs());
    }
    let mut violations = 0;
    for _ in 0..1000 {
        let a = random_trajectory(&mut rng, 20);
        let b = random_trajectory(&mut rng, 20);
        let ab = dtw_mt(&a, &b, &w).unwrap();
        let ba = dtw_mt(&b, &a, &w).unwrap();
        let aa = dtw_mt(&a, &a, &w).unwrap();
        if aa.abs() > 1e-9 || (ab - ba).abs() > 1e-9 || ab < 0.0 {
            violations += 1;
        }
    }
    let elapsed = t.elapsed();
    let pass = worst <= 1e-9 && violations == 0 && elapsed < Duration::from_secs(60);
    report(2, "DTW-MT oracle equivalence", pass, format!("max |dp - enumeration| {worst:.1e}, {violations} metric violations, {elapsed:.1?}"));
    assert!(pass);
}

const LIBRARY_SIZE: usize = 962;

/// A 962-trajectory synthetic library with a matching model.
fn library() -> (EmbeddingModel, Vec<String>, Vec<Vec<f64>>) {
    let s = gen_synthetic(&SyntheticConfig {
        tasks_per_concept: 31,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let ds = &s.dataset;
    assert!(ds.trajectories().len() >= LIBRARY_SIZE);
    let spec = TrajectorySpec::default();
    let trajs = &ds.trajectories()[..LIBRARY_SIZE];
    let vectors: Vec<Vec<f64>> = trajs.iter().map(|t| trajectory_vector(t, &spec).unwrap()).collect();
    let ids = trajs.iter().map(|t| t.id.clone()).collect();
    let vocab = Vocabulary::build(ds.instructions().iter().map(|i| i.text.as_str()));
    let mut m = EmbeddingModel::new(ModelDims::default(), vocab, FeatureSpec::default()).unwrap();
    m.init(&mut ChaCha8Rng::seed_from_u64(3));
    (m, ids, vectors)
}

fn random_queries(rng: &mut impl Rng, m: &EmbeddingModel, n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..n)
        .map(|_| {
            let pc = (0..2000).map(|_| if rng.gen_bool(0.2) { rng.gen_range(0.0..1.0) } else { 0.0 }).collect();
            let lang = (0..m.vocab.len()).map(|_| if rng.gen_bool(0.1) { 1.0 } else { 0.0 }).collect();
            (pc, lang)
        })
        .collect()
}

#[test]
fn criterion_3_indexed_retrieval_is_exact() {
    let _g = serial();
    let (m, ids, vectors) = library();
    let index = build_index_from_vectors(&m, ids.clone(), &vectors).unwrap();
    let r = Retriever::new(&index, &m).unwrap();
    let queries = random_queries(&mut ChaCha8Rng::seed_from_u64(30), &m, 1000);
    let same = queries
        .iter()
        .filter(|(pc, lang)| {
            let (fast, _) = r.infer_id(pc, lang).unwrap();
            let (slow, _) = infer_exhaustive(&m, &vectors, pc, lang).unwrap();
            fast == ids[slow]
        })
        .count();
    let pass = same == queries.len();
    report(3, "retrieval exactness", pass, format!("{same}/{} identical ids over {} trajectories", queries.len(), vectors.len()));
    assert!(pass);
}

#[test]
fn criterion_4_pre_embedding_speedup() {
    let _g = serial();
    let t = Instant::now();
    let (m, ids, vectors) = library();
    let index = build_index_from_vectors(&m, ids, &vectors).unwrap();
    let r = Retriever::new(&index, &m).unwrap();
    let queries = random_queries(&mut ChaCha8Rng::seed_from_u64(40), &m, 100);
    let b = bench(&r, &vectors, &queries, 10_000).unwrap();
    let elapsed = t.elapsed();
    let pass = b.speedup >= 20.0 && b.agreements == 10_000 && elapsed < Duration::from_secs(300);
    report(
        4,
        "efficiency",
        pass,
        format!(
            "speed-up {:.0}x (indexed {:.4} ms, exhaustive {:.3} ms per query), {elapsed:.1?}",
            b.speedup,
            b.indexed.mean * 1e3,
            b.exhaustive.mean * 1e3
        ),
    );
    assert!(pass);
}

struct EndToEnd {
    cfg: TrainConfig,
    cache: FeatureCache,
    dataset: dme::data::Dataset,
    split: FoldSplit,
    full: CvReport,
    chance: CvReport,
    checkpoints: Vec<Vec<u8>>,
    models: Vec<EmbeddingModel>,
    elapsed: Duration,
}

fn end_to_end() -> EndToEnd {
    let t = Instant::now();
    let cfg = TrainConfig {
        deterministic: true,
        seed: 0,
        ..Default::default()
    };
    let s = gen_synthetic(&SyntheticConfig::default()).unwrap();
    let dataset = s.dataset;
    let cache = FeatureCache::build(&dataset, &FeatureSpec::default()).unwrap();
    let split = make_folds(&dataset, cfg.seed).unwrap();
    let mut full = CvReport {
        label: "full".into(),
        folds: Vec::new(),
    };
    let mut chance = CvReport {
        label: "chance".into(),
        folds: Vec::new(),
    };
    let mut checkpoints = Vec::new();
    let mut models = Vec::new();
    for k in 0..FOLDS {
        let mut r = run_variants(&dataset, &cache, &split, k, &cfg, &[Baseline::Full, Baseline::Chance]).unwrap();
        chance.folds.push((k, r.pop().unwrap().report));
        let f = r.pop().unwrap();
        full.folds.push((k, f.report));
        let m = f.model.unwrap();
        checkpoints.push(m.to_bytes());
        models.push(m);
    }
    EndToEnd {
        cfg,
        cache,
        dataset,
        split,
        full,
        chance,
        checkpoints,
        models,
        elapsed: t.elapsed(),
    }
}

fn shared_run() -> &'static EndToEnd {
    static RUN: OnceLock<EndToEnd> = OnceLock::new();
    RUN.get_or_init(end_to_end)
}

fn mean_accuracy(r: &CvReport) -> f64 {
    r.folds.iter().map(|(_, m)| m.accuracy).sum::<f64>() / r.folds.len() as f64
}

#[test]
fn criterion_5_synthetic_end_to_end() {
    let _g = serial();
    let run = shared_run();
    let acc = mean_accuracy(&run.full);
    let chance = mean_accuracy(&run.chance);
    let pass = acc >= 0.85 && run.elapsed < Duration::from_secs(15 * 60);
    report(
        5,
        "synthetic end-to-end",
        pass,
        format!("accuracy@10 {acc:.3} over {FOLDS} folds, chance {chance:.3}, {:.1?}", run.elapsed),
    );
    assert!(pass);
}

#[test]
fn criterion_6_ablation_ordering() {
    let _g = serial();
    let t = Instant::now();
    let variants = [Baseline::Full, Baseline::SdaOnly, Baseline::NoPretrain, Baseline::LmnnConstant];
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    for seed in 0..5u64 {
        let s = gen_synthetic(&SyntheticConfig { seed, ..Default::default() }).unwrap();
        let cache = FeatureCache::build(&s.dataset, &FeatureSpec::default()).unwrap();
        let split = make_folds(&s.dataset, seed).unwrap();
        let cfg = TrainConfig { seed, ..Default::default() };
        // held-out accuracy as in criterion 5: mean over the five test folds
        let mut sum = [0.0; 4];
        for fold in 0..FOLDS {
            let r = run_variants(&s.dataset, &cache, &split, fold, &cfg, &variants).unwrap();
            for (k, v) in r.iter().enumerate() {
                sum[k] += v.report.accuracy / FOLDS as f64;
            }
        }
        println!("seed {seed}: {sum:.3?}");
        for k in 0..variants.len() {
            acc[k].push(sum[k]);
        }
    }
    let med: Vec<f64> = acc
        .iter()
        .map(|v| {
            let mut v = v.clone();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    let geq = |a: f64, b: f64| a >= b - 0.01;
    let pass = geq(med[0], med[1]) && geq(med[1], med[2]) && geq(med[0], med[3]);
    report(
        6,
        "ablation ordering",
        pass,
        format!(
            "median accuracy full {:.3} sda-only {:.3} no-pretrain {:.3} constant-margin {:.3}, {:.1?}",
            med[0],
            med[1],
            med[2],
            med[3],
            t.elapsed()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_hinge_constraints_hold_after_training() {
    let _g = serial();
    let run = shared_run();
    let data = prepare(&run.dataset, &run.cache, &run.split.train(0), run.split.validation(0), &run.cfg).unwrap();
    let init = init_model(&data, run.cache.spec, &run.cfg).unwrap();
    let before = constraint_satisfaction(&init, &data, 10_000, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let after = constraint_satisfaction(&run.models[0], &data, 10_000, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let pass = after >= 0.9 && after > before;
    report(7, "hinge semantics", pass, format!("satisfied constraints {after:.4} after training, {before:.4} at initialization"));
    assert!(pass);
}

#[test]
fn criterion_8_segmentation_ranking() {
    let _g = serial();
    let t = Instant::now();
    let s = gen_synthetic(&SyntheticConfig::default()).unwrap();
    let ds = &s.dataset;
    let test: Vec<&str> = ds.scenes().iter().take(20).map(|s| s.id.as_str()).collect();
    let train: Vec<usize> = (0..ds.tasks().len())
        .filter(|&k| !test.contains(&ds.part(&ds.tasks()[k].part_id).unwrap().scene_id.as_str()))
        .collect();
    let params = [SegmentationParams::default(), SegmentationParams::coarse()];
    let pool = RankingPool::build(ds, &train, &ranking_grid()).unwrap();
    let (rw, _) = fit_rank_weights(ds, &train, &pool, &params, &RankWeights::default(), 40).unwrap();
    let mut ok = 0;
    for sid in &test {
        let scene = ds.scene(sid).unwrap();
        let manual = ds.manuals().iter().find(|m| m.scene_id == *sid).unwrap();
        let steps = ds.manual_steps(&manual.id);
        let texts: Vec<&str> = steps.iter().map(|i| i.text.as_str()).collect();
        let sel = select_parts(scene, &texts, &pool, &params, &rw).unwrap();
        let all = steps.iter().zip(&sel.chosen).all(|(step, chosen)| {
            let task = ds.tasks().iter().find(|t| t.instruction_id == step.id).unwrap();
            let planted = &ds.part(&task.part_id).unwrap().point_indices;
            chosen.is_some_and(|c| iou(&sel.candidates[c], planted) >= 0.5)
        });
        ok += usize::from(all);
    }
    let elapsed = t.elapsed();
    let pass = ok >= 16 && elapsed < Duration::from_secs(300);
    report(8, "segmentation ranking", pass, format!("{ok}/20 scenes with every step on its planted part, weights {:?}, {elapsed:.1?}", rw.w));
    assert!(pass);
}

#[test]
fn criterion_9_end_to_end_run_is_deterministic() {
    let _g = serial();
    let first = shared_run();
    let second = end_to_end();
    let same_models = first.checkpoints == second.checkpoints;
    let same_reports = first.full.to_tsv() == second.full.to_tsv()
        && first.full.folds.iter().zip(&second.full.folds).all(|(a, b)| a.1.outcomes_tsv() == b.1.outcomes_tsv());
    let pass = same_models && same_reports;
    report(
        9,
        "determinism",
        pass,
        format!("checkpoints identical: {same_models}, reports identical: {same_reports}"),
    );
    assert!(pass);
}
