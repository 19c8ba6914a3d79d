//! Domain records and the linked, validated [`Dataset`].

mod format;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dtw::DtwWeights;
use crate::error::{Error, Result};
use crate::geometry::{Frame, Quat, Vec3};

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, LoadOptions, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gripper {
    Open,
    Closed,
    Holding,
}

impl Gripper {
    pub const ALL: [Gripper; 3] = [Gripper::Open, Gripper::Closed, Gripper::Holding];

    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Gripper::Open => [1.0, 0.0, 0.0],
            Gripper::Closed => [0.0, 1.0, 0.0],
            Gripper::Holding => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub position: Vec3,
    pub orientation: Quat,
    pub gripper: Gripper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub waypoints: Vec<Waypoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub sensor_origin: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub cloud: PointCloud,
    /// Alternative segmentations of this scene, as index sets into `cloud`.
    pub candidates: Vec<Vec<usize>>,
    pub pointing_hint: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedPart {
    pub id: String,
    pub scene_id: String,
    pub point_indices: Vec<usize>,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manual {
    pub id: String,
    pub scene_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub id: String,
    pub text: String,
    pub manual_id: String,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub id: String,
    pub part_id: String,
    pub instruction_id: String,
    pub demos: Vec<String>,
    pub optimal: String,
}

/// Fully linked dataset. Construct through [`Dataset::new`] (or loading),
/// which checks referential integrity and record invariants.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dtw_weights: DtwWeights,
    scenes: Vec<Scene>,
    parts: Vec<SegmentedPart>,
    manuals: Vec<Manual>,
    instructions: Vec<Instruction>,
    trajectories: Vec<Trajectory>,
    tasks: Vec<TaskExample>,
    lookup: Lookup,
}

impl PartialEq for Dataset {
    fn eq(&self, o: &Self) -> bool {
        self.dtw_weights == o.dtw_weights
            && self.scenes == o.scenes
            && self.parts == o.parts
            && self.manuals == o.manuals
            && self.instructions == o.instructions
            && self.trajectories == o.trajectories
            && self.tasks == o.tasks
    }
}

#[derive(Debug, Clone, Default)]
struct Lookup {
    scenes: HashMap<String, usize>,
    parts: HashMap<String, usize>,
    manuals: HashMap<String, usize>,
    instructions: HashMap<String, usize>,
    trajectories: HashMap<String, usize>,
    tasks: HashMap<String, usize>,
}

fn index_ids<'a>(kind: &str, ids: impl Iterator<Item = &'a String>) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::new();
    for (i, id) in ids.enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::Invariant(format!("duplicate {kind} id `{id}`")));
        }
    }
    Ok(map)
}

fn require(map: &HashMap<String, usize>, kind: &str, id: &str, from: &str) -> Result<usize> {
    map.get(id)
        .copied()
        .ok_or_else(|| Error::Integrity(format!("{from} references missing {kind} `{id}`")))
}

fn finite(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}

impl Dataset {
    pub fn new(
        dtw_weights: DtwWeights,
        scenes: Vec<Scene>,
        parts: Vec<SegmentedPart>,
        manuals: Vec<Manual>,
        instructions: Vec<Instruction>,
        trajectories: Vec<Trajectory>,
        tasks: Vec<TaskExample>,
    ) -> Result<Self> {
        let lookup = Lookup {
            scenes: index_ids("scene", scenes.iter().map(|s| &s.id))?,
            parts: index_ids("part", parts.iter().map(|s| &s.id))?,
            manuals: index_ids("manual", manuals.iter().map(|s| &s.id))?,
            instructions: index_ids("instruction", instructions.iter().map(|s| &s.id))?,
            trajectories: index_ids("trajectory", trajectories.iter().map(|s| &s.id))?,
            tasks: index_ids("task", tasks.iter().map(|s| &s.id))?,
        };
        let ds = Dataset {
            dtw_weights,
            scenes,
            parts,
            manuals,
            instructions,
            trajectories,
            tasks,
            lookup,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty() -> Self {
        Dataset::new(DtwWeights::default(), vec![], vec![], vec![], vec![], vec![], vec![])
            .expect("empty dataset is valid")
    }

    fn validate(&self) -> Result<()> {
        if !self.dtw_weights.is_valid() {
            return Err(Error::Invariant("dtw weights must be finite and non-negative".into()));
        }
        for s in &self.scenes {
            if !finite(&s.cloud.sensor_origin) || !s.cloud.points.iter().all(finite) {
                return Err(Error::Invariant(format!("scene `{}` has non-finite coordinates", s.id)));
            }
            if s.pointing_hint.as_ref().is_some_and(|p| !finite(p)) {
                return Err(Error::Invariant(format!("scene `{}` pointing hint is not finite", s.id)));
            }
            let n = s.cloud.points.len();
            for c in &s.candidates {
                if let Some(bad) = c.iter().find(|&&i| i >= n) {
                    return Err(Error::Integrity(format!(
                        "scene `{}` candidate references point {bad} of {n}",
                        s.id
                    )));
                }
            }
        }
        for p in &self.parts {
            let si = require(&self.lookup.scenes, "scene", &p.scene_id, &format!("part `{}`", p.id))?;
            let n = self.scenes[si].cloud.points.len();
            if let Some(bad) = p.point_indices.iter().find(|&&i| i >= n) {
                return Err(Error::Integrity(format!("part `{}` references point {bad} of {n}", p.id)));
            }
            if !p.frame.is_orthonormal() || !finite(&p.frame.origin) {
                return Err(Error::Invariant(format!("part `{}` frame is not orthonormal", p.id)));
            }
        }
        for m in &self.manuals {
            require(&self.lookup.scenes, "scene", &m.scene_id, &format!("manual `{}`", m.id))?;
        }
        for l in &self.instructions {
            require(&self.lookup.manuals, "manual", &l.manual_id, &format!("instruction `{}`", l.id))?;
            if l.text.trim().is_empty() {
                return Err(Error::Invariant(format!("instruction `{}` has empty text", l.id)));
            }
        }
        for t in &self.trajectories {
            if t.waypoints.is_empty() {
                return Err(Error::Invariant(format!("trajectory `{}` has no waypoints", t.id)));
            }
            for (k, w) in t.waypoints.iter().enumerate() {
                if !finite(&w.position) || !w.orientation.is_finite() {
                    return Err(Error::Invariant(format!("trajectory `{}` waypoint {k} is not finite", t.id)));
                }
                if !w.orientation.is_unit() {
                    return Err(Error::Invariant(format!(
                        "trajectory `{}` waypoint {k} quaternion has norm {}",
                        t.id,
                        w.orientation.norm()
                    )));
                }
            }
        }
        for t in &self.tasks {
            let from = format!("task `{}`", t.id);
            require(&self.lookup.parts, "part", &t.part_id, &from)?;
            require(&self.lookup.instructions, "instruction", &t.instruction_id, &from)?;
            for d in &t.demos {
                require(&self.lookup.trajectories, "trajectory", d, &from)?;
            }
            require(&self.lookup.trajectories, "trajectory", &t.optimal, &from)?;
            if !t.demos.contains(&t.optimal) {
                return Err(Error::Invariant(format!("{from}: optimal demo `{}` is not among its demos", t.optimal)));
            }
        }
        Ok(())
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }
    pub fn parts(&self) -> &[SegmentedPart] {
        &self.parts
    }
    pub fn manuals(&self) -> &[Manual] {
        &self.manuals
    }
    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }
    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }
    pub fn tasks(&self) -> &[TaskExample] {
        &self.tasks
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.lookup.scenes.get(id).map(|&i| &self.scenes[i])
    }
    pub fn part(&self, id: &str) -> Option<&SegmentedPart> {
        self.lookup.parts.get(id).map(|&i| &self.parts[i])
    }
    pub fn manual(&self, id: &str) -> Option<&Manual> {
        self.lookup.manuals.get(id).map(|&i| &self.manuals[i])
    }
    pub fn instruction(&self, id: &str) -> Option<&Instruction> {
        self.lookup.instructions.get(id).map(|&i| &self.instructions[i])
    }
    pub fn trajectory(&self, id: &str) -> Option<&Trajectory> {
        self.lookup.trajectories.get(id).map(|&i| &self.trajectories[i])
    }
    pub fn task(&self, id: &str) -> Option<&TaskExample> {
        self.lookup.tasks.get(id).map(|&i| &self.tasks[i])
    }
    pub fn trajectory_index(&self, id: &str) -> Option<usize> {
        self.lookup.trajectories.get(id).copied()
    }

    /// Resolves the part, scene, instruction and optimal demo of a task.
    /// Panics only if called with a task that does not belong to this dataset.
    pub fn resolve<'a>(&'a self, task: &'a TaskExample) -> ResolvedTask<'a> {
        let part = self.part(&task.part_id).expect("validated part");
        ResolvedTask {
            task,
            part,
            scene: self.scene(&part.scene_id).expect("validated scene"),
            instruction: self.instruction(&task.instruction_id).expect("validated instruction"),
            optimal: self.trajectory(&task.optimal).expect("validated trajectory"),
        }
    }

    /// Instructions of a manual in step order.
    pub fn manual_steps(&self, manual_id: &str) -> Vec<&Instruction> {
        let mut steps: Vec<_> = self.instructions.iter().filter(|l| l.manual_id == manual_id).collect();
        steps.sort_by_key(|l| (l.step_index, l.id.clone()));
        steps
    }

    /// Copy of this dataset with a task-level transformation applied to every
    /// instruction text; used to probe for train/test leakage.
    pub fn with_instruction_texts(&self, f: impl Fn(&Instruction) -> String) -> Result<Dataset> {
        let instructions = self
            .instructions
            .iter()
            .map(|l| Instruction {
                text: f(l),
                ..l.clone()
            })
            .collect();
        Dataset::new(
            self.dtw_weights,
            self.scenes.clone(),
            self.parts.clone(),
            self.manuals.clone(),
            instructions,
            self.trajectories.clone(),
            self.tasks.clone(),
        )
    }
}

pub struct ResolvedTask<'a> {
    pub task: &'a TaskExample,
    pub part: &'a SegmentedPart,
    pub scene: &'a Scene,
    pub instruction: &'a Instruction,
    pub optimal: &'a Trajectory,
}

impl SegmentedPart {
    pub fn points<'a>(&'a self, cloud: &'a PointCloud) -> impl Iterator<Item = &'a Vec3> + Clone + 'a {
        self.point_indices.iter().map(move |&i| &cloud.points[i])
    }
}

/// Intersection over union of two index sets.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::HashSet;
    let sa: HashSet<_> = a.iter().collect();
    let sb: HashSet<_> = b.iter().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basic() {
        assert_eq!(iou(&[1, 2, 3], &[2, 3, 4]), 0.5);
        assert_eq!(iou(&[], &[]), 0.0);
        assert_eq!(iou(&[5], &[5]), 1.0);
    }
}
