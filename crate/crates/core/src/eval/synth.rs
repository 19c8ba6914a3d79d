//! Procedural stand-in for a crowd-sourced manipulation dataset.
//!
//! Each concept pairs a part shape with a motion. Scenes are wall panels
//! carrying two parts; every part has one instruction and a pool of noisy
//! demonstrations. DTW weights are rescaled so same-concept demonstrations
//! score below the similarity threshold and cross-concept ones above the
//! dissimilarity threshold.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Gripper, Instruction, Manual, PointCloud, Scene, SegmentedPart, TaskExample, Trajectory, Waypoint};
use crate::dtw::{calibrate, Calibration, DtwWeights};
use crate::error::{Error, Result};
use crate::geometry::{Frame, Quat, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Knob,
    Handle,
    Lever,
    Button,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    RotateCw,
    RotateCcw,
    Pull,
    Slide,
    PushDown,
    LiftUp,
    Press,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Concept {
    pub shape: Shape,
    pub motion: Motion,
}

/// All concepts in generation order; configs use a prefix of this list.
pub const CONCEPTS: [Concept; 8] = [
    Concept { shape: Shape::Knob, motion: Motion::RotateCw },
    Concept { shape: Shape::Handle, motion: Motion::Pull },
    Concept { shape: Shape::Lever, motion: Motion::PushDown },
    Concept { shape: Shape::Button, motion: Motion::Press },
    Concept { shape: Shape::Knob, motion: Motion::Pull },
    Concept { shape: Shape::Handle, motion: Motion::Slide },
    Concept { shape: Shape::Lever, motion: Motion::LiftUp },
    Concept { shape: Shape::Button, motion: Motion::RotateCcw },
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub concepts: usize,
    pub tasks_per_concept: usize,
    pub demos_per_task: usize,
    /// fraction of each task's demos drawn from another concept
    pub cross_demo_fraction: f64,
    /// relative part size jitter
    pub geometry_noise: f64,
    /// probability of dropping each instruction token
    pub token_dropout: f64,
    /// standard deviation of waypoint positions, meters
    pub position_noise: f64,
    /// standard deviation of waypoint orientation, radians
    pub rotation_noise: f64,
    /// extra over/under-segmented views stored per part
    pub candidate_variants: usize,
    /// largest same-concept loss after calibration
    pub same_target: f64,
    /// every cross-concept loss must exceed this after calibration
    pub cross_floor: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            concepts: 8,
            tasks_per_concept: 25,
            demos_per_task: 4,
            cross_demo_fraction: 0.25,
            geometry_noise: 0.1,
            token_dropout: 0.1,
            position_noise: 0.002,
            rotation_noise: 0.02,
            candidate_variants: 2,
            same_target: 8.0,
            cross_floor: 21.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn check(&self) -> Result<()> {
        if self.concepts == 0 || self.concepts > CONCEPTS.len() {
            return Err(Error::Config(format!("concepts must be in 1..={}", CONCEPTS.len())));
        }
        if self.tasks_per_concept == 0 || self.demos_per_task == 0 {
            return Err(Error::Config("task and demo counts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.cross_demo_fraction) || !(0.0..1.0).contains(&self.token_dropout) {
            return Err(Error::Config("fractions must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Number of same-concept demos per task (always at least one).
    pub fn same_demos(&self) -> usize {
        if self.concepts == 1 {
            return self.demos_per_task;
        }
        let cross = (self.demos_per_task as f64 * self.cross_demo_fraction).round() as usize;
        (self.demos_per_task - cross.min(self.demos_per_task - 1)).max(1)
    }
}

/// Generator output: the dataset plus ground truth the dataset format does
/// not carry.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// concept index of every trajectory, by dataset trajectory order
    pub trajectory_concepts: Vec<usize>,
    /// concept index of every task, by dataset task order
    pub task_concepts: Vec<usize>,
    pub calibration: Calibration,
}

impl Synthetic {
    pub fn trajectory_concept(&self, id: &str) -> Option<usize> {
        self.dataset.trajectory_index(id).map(|i| self.trajectory_concepts[i])
    }
}

fn words(c: Concept) -> (&'static [&'static str], &'static [&'static str], &'static [&'static str]) {
    let verbs: &[&str] = match c.motion {
        Motion::RotateCw => &["turn", "rotate", "twist"],
        Motion::RotateCcw => &["turn", "rotate", "dial"],
        Motion::Pull => &["pull", "draw", "tug"],
        Motion::Slide => &["slide", "shift", "move"],
        Motion::PushDown => &["push", "press", "lower"],
        Motion::LiftUp => &["lift", "raise", "pull"],
        Motion::Press => &["press", "push", "hit"],
    };
    let nouns: &[&str] = match c.shape {
        Shape::Knob => &["knob", "dial"],
        Shape::Handle => &["handle", "grip", "bar"],
        Shape::Lever => &["lever", "arm"],
        Shape::Button => &["button", "switch"],
    };
    let tails: &[&str] = match c.motion {
        Motion::RotateCw => &["clockwise", "to the right"],
        Motion::RotateCcw => &["counterclockwise", "to the left"],
        Motion::Pull => &["toward you", "outward", "out"],
        Motion::Slide => &["sideways", "along the rail", "across"],
        Motion::PushDown => &["down", "downward"],
        Motion::LiftUp => &["up", "upward"],
        Motion::Press => &["in", "once", "firmly"],
    };
    (verbs, nouns, tails)
}

const FILLER: [&str; 10] = ["please", "then", "gently", "now", "carefully", "slowly", "next", "just", "a", "bit"];

fn instruction_text(c: Concept, dropout: f64, rng: &mut impl Rng) -> String {
    let (verbs, nouns, tails) = words(c);
    let mut tokens: Vec<&str> = Vec::new();
    if rng.gen_bool(0.5) {
        tokens.push(FILLER[rng.gen_range(0..FILLER.len())]);
    }
    tokens.push(verbs.choose(rng).expect("non-empty"));
    tokens.push("the");
    tokens.push(nouns.choose(rng).expect("non-empty"));
    tokens.extend(tails.choose(rng).expect("non-empty").split(' '));
    for _ in 0..rng.gen_range(0..3) {
        tokens.push(FILLER[rng.gen_range(0..FILLER.len())]);
    }
    let kept: Vec<&str> = tokens.iter().copied().filter(|_| !rng.gen_bool(dropout)).collect();
    if kept.is_empty() {
        tokens.join(" ")
    } else {
        kept.join(" ")
    }
}

fn sample_box(rng: &mut impl Rng, center: Vec3, half: Vec3, n: usize, out: &mut Vec<Vec3>) {
    // surface of an axis-aligned box, faces weighted by area
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    for _ in 0..n {
        let mut r = rng.gen_range(0.0..total) / 2.0;
        let mut axis = 0;
        while axis < 2 && r > areas[axis] {
            r -= areas[axis];
            axis += 1;
        }
        let mut p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        p[axis] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        out.push(center + p.component_mul(&half));
    }
}

fn sample_cylinder(rng: &mut impl Rng, center: Vec3, axis: usize, radius: f64, half_len: f64, n: usize, out: &mut Vec<Vec3>) {
    let side = 2.0 * PI * radius * 2.0 * half_len;
    let caps = 2.0 * PI * radius * radius;
    for _ in 0..n {
        let th = rng.gen_range(0.0..2.0 * PI);
        let (u, v, a) = if rng.gen_range(0.0..side + caps) < side {
            (radius * th.cos(), radius * th.sin(), rng.gen_range(-half_len..half_len))
        } else {
            let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
            (r * th.cos(), r * th.sin(), if rng.gen_bool(0.5) { half_len } else { -half_len })
        };
        let mut p = Vec3::zeros();
        p[axis] = a;
        p[(axis + 1) % 3] = u;
        p[(axis + 2) % 3] = v;
        out.push(center + p);
    }
}

fn sample_sphere(rng: &mut impl Rng, center: Vec3, radius: f64, n: usize, out: &mut Vec<Vec3>) {
    let normal = Normal::new(0.0, 1.0).expect("valid");
    for _ in 0..n {
        let v = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        out.push(center + v.normalize() * radius);
    }
}

/// Part surface points in the part frame (x right, y up, z out of the
/// mounting surface), scaled by `s`.
fn part_points(shape: Shape, s: f64, rng: &mut impl Rng) -> Vec<Vec3> {
    let mut pts = Vec::new();
    match shape {
        Shape::Knob => {
            sample_cylinder(rng, Vec3::new(0.0, 0.0, 0.008 * s), 2, 0.006 * s, 0.008 * s, 40, &mut pts);
            sample_sphere(rng, Vec3::new(0.0, 0.0, 0.035 * s), 0.02 * s, 260, &mut pts);
        }
        Shape::Handle => {
            sample_cylinder(rng, Vec3::new(0.0, 0.0, 0.04 * s), 0, 0.01 * s, 0.06 * s, 220, &mut pts);
            for x in [-0.05, 0.05] {
                sample_cylinder(rng, Vec3::new(x * s, 0.0, 0.02 * s), 2, 0.007 * s, 0.02 * s, 50, &mut pts);
            }
        }
        Shape::Lever => {
            sample_box(rng, Vec3::new(0.0, 0.0, 0.02 * s), Vec3::new(0.07 * s, 0.01 * s, 0.005 * s), 220, &mut pts);
            sample_cylinder(rng, Vec3::new(-0.06 * s, 0.0, 0.01 * s), 2, 0.015 * s, 0.01 * s, 90, &mut pts);
        }
        Shape::Button => {
            sample_cylinder(rng, Vec3::new(0.0, 0.0, 0.009 * s), 2, 0.02 * s, 0.009 * s, 300, &mut pts);
        }
    }
    pts
}

fn grasp_point(shape: Shape, s: f64) -> Vec3 {
    match shape {
        Shape::Knob => Vec3::new(0.0, 0.0, 0.035 * s),
        Shape::Handle => Vec3::new(0.0, 0.0, 0.04 * s),
        Shape::Lever => Vec3::new(0.06 * s, 0.0, 0.02 * s),
        Shape::Button => Vec3::new(0.0, 0.0, 0.018 * s),
    }
}

fn approach_direction(concept: usize) -> Vec3 {
    let phi = 2.0 * PI * concept as f64 / CONCEPTS.len() as f64;
    let theta = 60f64.to_radians();
    Vec3::new(phi.cos() * theta.sin(), phi.sin() * theta.sin(), theta.cos())
}

fn to_quat(q: &UnitQuaternion<f64>) -> Quat {
    Quat::new(q.w, q.i, q.j, q.k)
}

/// Gripper orientation looking along `-dir` (toward the part).
fn facing(dir: &Vec3) -> UnitQuaternion<f64> {
    let up = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    UnitQuaternion::from_rotation_matrix(&Rotation3::face_towards(&(-dir), &up))
}

/// Noise-free keyframes of a concept for a part of scale `s`.
fn keyframes(concept: usize, s: f64) -> Vec<Waypoint> {
    let c = CONCEPTS[concept];
    let d = approach_direction(concept);
    let g = grasp_point(c.shape, s);
    let q0 = facing(&d);
    let wp = |p: Vec3, q: &UnitQuaternion<f64>, gr: Gripper| Waypoint {
        position: p,
        orientation: to_quat(q),
        gripper: gr,
    };
    let mut out = vec![
        wp(g + d * 0.15, &q0, Gripper::Open),
        wp(g + d * 0.05, &q0, Gripper::Open),
        wp(g, &q0, Gripper::Closed),
    ];
    let spin = |deg: f64| UnitQuaternion::from_axis_angle(&Vec3::z_axis(), deg.to_radians()) * q0;
    let mut last = g;
    match c.motion {
        Motion::RotateCw | Motion::RotateCcw => {
            let sign = if c.motion == Motion::RotateCw { -1.0 } else { 1.0 };
            for k in 1..=3 {
                out.push(wp(g, &spin(sign * 30.0 * k as f64), Gripper::Holding));
            }
        }
        Motion::Pull => {
            for k in 1..=3 {
                last = g + Vec3::new(0.0, 0.0, 0.03 * k as f64);
                out.push(wp(last, &q0, Gripper::Holding));
            }
        }
        Motion::Slide => {
            for k in 1..=3 {
                last = g + Vec3::new(0.035 * k as f64, 0.0, 0.0);
                out.push(wp(last, &q0, Gripper::Holding));
            }
        }
        Motion::PushDown | Motion::LiftUp => {
            let pivot = Vec3::new(-0.06 * s, 0.0, g.z);
            let sign = if c.motion == Motion::PushDown { -1.0 } else { 1.0 };
            for k in 1..=3 {
                let a = (sign * 12.0 * k as f64).to_radians();
                let r = Rotation3::from_axis_angle(&Vec3::z_axis(), a);
                last = pivot + r * (g - pivot);
                out.push(wp(last, &(UnitQuaternion::from_rotation_matrix(&r) * q0), Gripper::Closed));
            }
        }
        Motion::Press => {
            for depth in [0.006, 0.012, 0.006] {
                last = g - Vec3::new(0.0, 0.0, depth);
                out.push(wp(last, &q0, Gripper::Closed));
            }
        }
    }
    let q_end = out.last().map(|w| w.orientation).expect("non-empty");
    out.push(Waypoint {
        position: last + d * 0.06,
        orientation: q_end,
        gripper: Gripper::Open,
    });
    out
}

/// A noisy, time-warped demonstration of a concept.
fn demonstration(concept: usize, s: f64, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Vec<Waypoint> {
    let keys = keyframes(concept, s);
    let mut dense = Vec::new();
    for (k, w) in keys.iter().enumerate() {
        dense.push(*w);
        if let Some(next) = keys.get(k + 1) {
            let extra = rng.gen_range(0..=2);
            for e in 1..=extra {
                let t = e as f64 / (extra + 1) as f64;
                dense.push(Waypoint {
                    position: w.position + (next.position - w.position) * t,
                    orientation: Quat::slerp(&w.orientation, &next.orientation, t),
                    gripper: if t <= 0.5 { w.gripper } else { next.gripper },
                });
            }
        }
    }
    let pn = Normal::new(0.0, cfg.position_noise.max(0.0)).expect("finite");
    let rn = Normal::new(0.0, cfg.rotation_noise.max(0.0)).expect("finite");
    for w in &mut dense {
        w.position += Vec3::new(pn.sample(rng), pn.sample(rng), pn.sample(rng));
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let jitter = Quat::from_axis_angle(&axis, rn.sample(rng));
        w.orientation = jitter.mul(&w.orientation).normalized().expect("unit");
    }
    dense
}

struct PartDraft {
    concept: usize,
    scale: f64,
    world: Vec<Vec3>,
    frame: Frame,
}

/// Over- and under-segmented variants of a planted part: a slab of the part
/// removed, or nearby panel points absorbed.
fn variants(part: &[usize], cloud: &[Vec3], panel: &[usize], count: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for v in 0..count {
        if v % 2 == 0 {
            let axis = rng.gen_range(0..3);
            let vals: Vec<f64> = part.iter().map(|&i| cloud[i][axis]).collect();
            let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let cut = lo + (hi - lo) * rng.gen_range(0.12..0.25);
            let keep: Vec<usize> = part.iter().copied().filter(|&i| cloud[i][axis] > cut).collect();
            out.push(keep);
        } else {
            let radius = rng.gen_range(0.01..0.02);
            let mut grown = part.to_vec();
            grown.extend(panel.iter().copied().filter(|&j| part.iter().any(|&i| (cloud[i] - cloud[j]).norm() < radius)));
            out.push(grown);
        }
    }
    out
}

const CALIBRATION_PAIRS: usize = 6000;

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Synthetic> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // concept instances, paired two per scene
    let mut instances: Vec<usize> = (0..cfg.concepts).flat_map(|c| std::iter::repeat_n(c, cfg.tasks_per_concept)).collect();
    instances.shuffle(&mut rng);
    let mut pairs: Vec<Vec<usize>> = Vec::new();
    let mut k = 0;
    while k < instances.len() {
        if k + 1 < instances.len() {
            // prefer two different shapes on one panel
            if CONCEPTS[instances[k]].shape == CONCEPTS[instances[k + 1]].shape {
                if let Some(j) = (k + 2..instances.len()).find(|&j| CONCEPTS[instances[j]].shape != CONCEPTS[instances[k]].shape) {
                    instances.swap(k + 1, j);
                }
            }
            pairs.push(vec![instances[k], instances[k + 1]]);
        } else {
            pairs.push(vec![instances[k]]);
        }
        k += 2;
    }

    let axes = Matrix3::from_columns(&[Vec3::x(), Vec3::z(), -Vec3::y()]);
    let mut scenes = Vec::new();
    let mut parts = Vec::new();
    let mut manuals = Vec::new();
    let mut instructions = Vec::new();
    let mut trajectories = Vec::new();
    let mut trajectory_concepts = Vec::new();
    let mut tasks = Vec::new();
    let mut task_concepts = Vec::new();
    let same = cfg.same_demos();

    for (si, pair) in pairs.iter().enumerate() {
        let scene_id = format!("s{si:03}");
        let manual_id = format!("m{si:03}");
        let mut cloud: Vec<Vec3> = Vec::new();
        let mut panel_idx = Vec::new();
        // panel 40 x 30 cm in the plane y = 0, facing -y
        for i in 0..54 {
            for j in 0..41 {
                let p = Vec3::new(-0.2 + i as f64 * 0.0075, rng.gen_range(-0.0005..0.0005), 0.8 + j as f64 * 0.0075);
                panel_idx.push(cloud.len());
                cloud.push(p);
            }
        }
        for i in 0..13 {
            for j in 0..13 {
                cloud.push(Vec3::new(-0.3 + i as f64 * 0.05, -0.6 + j as f64 * 0.05, 0.0));
            }
        }
        let slots = [-0.095, 0.095];
        let mut drafts = Vec::new();
        for (slot, &concept) in pair.iter().enumerate() {
            let scale = 1.0 + rng.gen_range(-cfg.geometry_noise..=cfg.geometry_noise);
            let origin = Vec3::new(slots[slot] + rng.gen_range(-0.01..0.01), 0.0, 0.95 + rng.gen_range(-0.01..0.01));
            let frame = Frame { origin, axes };
            let world = part_points(CONCEPTS[concept].shape, scale, &mut rng)
                .into_iter()
                .map(|p| origin + axes * p + Vec3::new(rng.gen_range(-0.0005..0.0005), 0.0, 0.0))
                .collect();
            drafts.push(PartDraft {
                concept,
                scale,
                world,
                frame,
            });
        }
        let sensor = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.9..-0.7), rng.gen_range(1.1..1.4));
        let mut part_indices = Vec::new();
        for d in &drafts {
            let start = cloud.len();
            cloud.extend(&d.world);
            part_indices.push((start..cloud.len()).collect::<Vec<usize>>());
        }
        let mut candidates = Vec::new();
        for idx in &part_indices {
            candidates.extend(variants(idx, &cloud, &panel_idx, cfg.candidate_variants, &mut rng));
        }
        scenes.push(Scene {
            id: scene_id.clone(),
            cloud: PointCloud {
                points: cloud,
                sensor_origin: sensor,
            },
            candidates,
            pointing_hint: None,
        });
        manuals.push(Manual {
            id: manual_id.clone(),
            scene_id: scene_id.clone(),
        });
        for (slot, d) in drafts.into_iter().enumerate() {
            let part_id = format!("{scene_id}/p{slot}");
            parts.push(SegmentedPart {
                id: part_id.clone(),
                scene_id: scene_id.clone(),
                point_indices: part_indices[slot].clone(),
                frame: d.frame,
            });
            let instr_id = format!("{manual_id}/{slot}");
            instructions.push(Instruction {
                id: instr_id.clone(),
                text: instruction_text(CONCEPTS[d.concept], cfg.token_dropout, &mut rng),
                manual_id: manual_id.clone(),
                step_index: slot,
            });
            let task_no = tasks.len();
            let mut demos = Vec::new();
            for j in 0..cfg.demos_per_task {
                let concept = if j < same {
                    d.concept
                } else {
                    let mut c = rng.gen_range(0..cfg.concepts - 1);
                    if c >= d.concept {
                        c += 1;
                    }
                    c
                };
                let id = format!("t{task_no:04}-{j}");
                let scale = if concept == d.concept { d.scale } else { 1.0 + rng.gen_range(-cfg.geometry_noise..=cfg.geometry_noise) };
                trajectories.push(Trajectory {
                    id: id.clone(),
                    waypoints: demonstration(concept, scale, cfg, &mut rng),
                });
                trajectory_concepts.push(concept);
                demos.push(id);
            }
            tasks.push(TaskExample {
                id: format!("k{task_no:04}"),
                part_id,
                instruction_id: instr_id,
                optimal: demos[0].clone(),
                demos,
            });
            task_concepts.push(d.concept);
        }
    }

    let calibration = calibrate_pool(&trajectories, &trajectory_concepts, cfg, &mut rng)?;
    let dataset = Dataset::new(calibration.weights, scenes, parts, manuals, instructions, trajectories, tasks)?;
    Ok(Synthetic {
        dataset,
        trajectory_concepts,
        task_concepts,
        calibration,
    })
}

fn calibrate_pool(trajs: &[Trajectory], concepts: &[usize], cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<Calibration> {
    let n = trajs.len();
    let mut same = Vec::new();
    let mut cross = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if concepts[i] == concepts[j] {
                same.push((i, j));
            } else {
                cross.push((i, j));
            }
        }
    }
    // all pairs are quadratic in the pool; large pools use a fixed-size sample
    for v in [&mut same, &mut cross] {
        if v.len() > CALIBRATION_PAIRS {
            v.shuffle(rng);
            v.truncate(CALIBRATION_PAIRS);
        }
    }
    let refs = |v: &[(usize, usize)]| -> Vec<(&Trajectory, &Trajectory)> { v.iter().map(|&(i, j)| (&trajs[i], &trajs[j])).collect() };
    calibrate(&DtwWeights::default(), &refs(&same), &refs(&cross), cfg.same_target, cfg.cross_floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtw::trajectory_loss;

    fn small(concepts: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            concepts,
            tasks_per_concept: 4,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = gen_synthetic(&small(3, 7)).unwrap();
        let b = gen_synthetic(&small(3, 7)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = gen_synthetic(&small(3, 8)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn single_concept_is_all_similar() {
        let s = gen_synthetic(&small(1, 1)).unwrap();
        let ds = &s.dataset;
        for t in ds.tasks() {
            let expert = ds.trajectory(&t.optimal).unwrap();
            for other in ds.trajectories() {
                assert!(trajectory_loss(expert, other, &ds.dtw_weights).unwrap() < 10.0);
            }
        }
    }

    #[test]
    fn calibration_separates_concepts() {
        let s = gen_synthetic(&small(8, 2)).unwrap();
        let ds = &s.dataset;
        assert_eq!(ds.tasks().len(), 32);
        assert_eq!(ds.trajectories().len(), 128);
        let t = ds.trajectories();
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                let d = trajectory_loss(&t[i], &t[j], &ds.dtw_weights).unwrap();
                if s.trajectory_concepts[i] == s.trajectory_concepts[j] {
                    assert!(d <= 8.0 + 1e-9, "{d}");
                } else {
                    assert!(d > 21.0, "{d}");
                }
            }
        }
    }
}
