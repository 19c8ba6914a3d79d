//! Three-branch embedding network, checkpoints, relevance sets, mining and
//! the margin losses used by every training stage.
//!
//! Task side: `joint(pc(p) + lang(l))`. Trajectory side: `traj(tau)`. Both
//! end in the same `M`-dimensional space and are compared by dot product.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{CompactSpec, FeatureSpec, GridSpec, Resample, TrajectorySpec, Vocabulary};
use crate::nn::{dot, read_f64, read_u32, Activation, Activations, LayerSpec, Stack};

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub pc_in: usize,
    pub pc_hidden: [usize; 2],
    pub lang_hidden: [usize; 2],
    pub traj_in: usize,
    pub traj_hidden: [usize; 2],
    pub embed: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            pc_in: 2000,
            pc_hidden: [250, 125],
            lang_hidden: [150, 125],
            traj_in: 150,
            traj_hidden: [100, 100],
            embed: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub pc: Stack,
    pub lang: Stack,
    pub joint: Stack,
    pub traj: Stack,
    pub vocab: Vocabulary,
    pub features: FeatureSpec,
}

use Activation::{Identity, RectifiedLinear as Relu};

impl EmbeddingModel {
    /// Zero-initialized model.
    pub fn new(dims: ModelDims, vocab: Vocabulary, features: FeatureSpec) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        if dims.pc_hidden[1] != dims.lang_hidden[1] {
            return Err(Error::DimensionMismatch {
                expected: dims.pc_hidden[1],
                got: dims.lang_hidden[1],
            });
        }
        let [p1, p2] = dims.pc_hidden;
        let [l1, l2] = dims.lang_hidden;
        let [t1, t2] = dims.traj_hidden;
        Ok(EmbeddingModel {
            pc: Stack::new(&[LayerSpec::new(dims.pc_in, p1, Relu), LayerSpec::new(p1, p2, Relu)])?,
            lang: Stack::new(&[LayerSpec::new(vocab.len(), l1, Relu), LayerSpec::new(l1, l2, Relu)])?,
            joint: Stack::new(&[LayerSpec::new(p2, dims.embed, Identity)])?,
            traj: Stack::new(&[
                LayerSpec::new(dims.traj_in, t1, Relu),
                LayerSpec::new(t1, t2, Relu),
                LayerSpec::new(t2, dims.embed, Identity),
            ])?,
            vocab,
            features,
        })
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.pc.init(rng);
        self.lang.init(rng);
        self.joint.init(rng);
        self.traj.init(rng);
    }

    pub fn embed_dim(&self) -> usize {
        self.joint.out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.stacks().iter().map(|s| s.num_params()).sum()
    }

    pub fn stacks(&self) -> [&Stack; 4] {
        [&self.pc, &self.lang, &self.joint, &self.traj]
    }

    pub fn stacks_mut(&mut self) -> [&mut Stack; 4] {
        [&mut self.pc, &mut self.lang, &mut self.joint, &mut self.traj]
    }

    fn check_structure(&self) -> Result<()> {
        let pairs = [
            (self.pc.out_dim(), self.joint.in_dim()),
            (self.lang.out_dim(), self.joint.in_dim()),
            (self.joint.out_dim(), self.traj.out_dim()),
            (self.vocab.len(), self.lang.in_dim()),
        ];
        for (expected, got) in pairs {
            if expected != got {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        Ok(())
    }

    pub fn forward_task(&self, pc: &[f64], lang: &[f64]) -> Result<TaskForward> {
        let pc_acts = self.pc.forward(pc)?;
        let lang_acts = self.lang.forward(lang)?;
        let sum: Vec<f64> = pc_acts
            .last()
            .expect("output")
            .iter()
            .zip(lang_acts.last().expect("output"))
            .map(|(a, b)| a + b)
            .collect();
        let joint_acts = self.joint.forward(&sum)?;
        Ok(TaskForward {
            pc: pc_acts,
            lang: lang_acts,
            joint: joint_acts,
        })
    }

    /// Task embedding `joint(pc(p) + lang(l))`.
    pub fn embed_task(&self, pc: &[f64], lang: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_task(pc, lang)?.output().to_vec())
    }

    pub fn embed_traj(&self, traj: &[f64]) -> Result<Vec<f64>> {
        self.traj.apply(traj)
    }

    /// Adds the parameter gradient of a loss with gradient `g` at the task
    /// embedding.
    pub fn backward_task(&self, fw: &TaskForward, g: &[f64], grads: &mut ModelGrads) -> Result<()> {
        let gsum = self.joint.backward(&fw.joint, g, &mut grads.joint, true)?.expect("input grad");
        self.pc.backward(&fw.pc, &gsum, &mut grads.pc, false)?;
        self.lang.backward(&fw.lang, &gsum, &mut grads.lang, false)?;
        Ok(())
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            pc: self.pc.zero_grads(),
            lang: self.lang.zero_grads(),
            joint: self.joint.zero_grads(),
            traj: self.traj.zero_grads(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab.len() as u32).to_le_bytes())?;
        for t in self.vocab.terms() {
            w.write_all(&(t.len() as u32).to_le_bytes())?;
            w.write_all(t.as_bytes())?;
        }
        let g = &self.features.grid;
        w.write_all(&(g.cells_per_side as u32).to_le_bytes())?;
        for v in [g.cell_size, g.smoothing_decay, g.context_value, g.context_radius] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[g.ray_fill as u8])?;
        let c = &self.features.compact;
        for v in [c.side, c.coarse_block, c.fine_block] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let t = &self.features.trajectory;
        w.write_all(&[match t.resample {
            Resample::Index => 0,
            Resample::PathLength => 1,
        }])?;
        w.write_all(&t.position_scale.to_le_bytes())?;
        for s in self.stacks() {
            s.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::Format(format!("not a checkpoint: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = read_u32(r)? as usize;
        let mut terms = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u32(r)? as usize;
            let mut b = vec![0u8; len];
            r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated vocabulary: {e}")))?;
            terms.push(String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))?);
        }
        let vocab = Vocabulary::from_terms(terms)?;
        let grid = GridSpec {
            cells_per_side: read_u32(r)? as usize,
            cell_size: read_f64(r)?,
            smoothing_decay: read_f64(r)?,
            context_value: read_f64(r)?,
            context_radius: read_f64(r)?,
            ray_fill: read_u8(r)? != 0,
        };
        let compact = CompactSpec {
            side: read_u32(r)? as usize,
            coarse_block: read_u32(r)? as usize,
            fine_block: read_u32(r)? as usize,
        };
        let resample = match read_u8(r)? {
            0 => Resample::Index,
            1 => Resample::PathLength,
            c => return Err(Error::Format(format!("unknown resample code {c}"))),
        };
        let trajectory = TrajectorySpec {
            resample,
            position_scale: read_f64(r)?,
        };
        let model = EmbeddingModel {
            pc: Stack::read_from(r)?,
            lang: Stack::read_from(r)?,
            joint: Stack::read_from(r)?,
            traj: Stack::read_from(r)?,
            vocab,
            features: FeatureSpec {
                grid,
                compact,
                trajectory,
            },
        };
        model.check_structure()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Content hash of the checkpoint bytes.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DMECKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b[0])
}

/// Cached activations of the task side.
#[derive(Debug, Clone)]
pub struct TaskForward {
    pub pc: Activations,
    pub lang: Activations,
    pub joint: Activations,
}

impl TaskForward {
    pub fn output(&self) -> &[f64] {
        self.joint.last().expect("output")
    }
}

/// Gradient buffers shaped like the model's stacks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelGrads {
    pub pc: Vec<f64>,
    pub lang: Vec<f64>,
    pub joint: Vec<f64>,
    pub traj: Vec<f64>,
}

impl ModelGrads {
    pub fn parts(&self) -> [&Vec<f64>; 4] {
        [&self.pc, &self.lang, &self.joint, &self.traj]
    }

    pub fn parts_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.pc, &mut self.lang, &mut self.joint, &mut self.traj]
    }

    pub fn zero(&mut self) {
        for p in self.parts_mut() {
            p.fill(0.0);
        }
    }

    pub fn add(&mut self, o: &ModelGrads) {
        for (a, b) in self.parts_mut().into_iter().zip(o.parts()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.parts_mut() {
            for x in p.iter_mut() {
                *x *= s;
            }
        }
    }

    /// All gradients concatenated in stack order (pc, lang, joint, traj).
    pub fn flat(&self) -> Vec<f64> {
        self.parts().iter().flat_map(|p| p.iter().copied()).collect()
    }
}

/// All model parameters concatenated in stack order.
pub fn flat_params(m: &EmbeddingModel) -> Vec<f64> {
    m.stacks().iter().flat_map(|s| s.params().iter().copied()).collect()
}

pub fn set_flat_params(m: &mut EmbeddingModel, p: &[f64]) {
    let mut off = 0;
    for s in m.stacks_mut() {
        let n = s.num_params();
        s.params_mut().copy_from_slice(&p[off..off + n]);
        off += n;
    }
}

/// Similar and dissimilar trajectories (pool indices) of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceSets {
    pub similar: Vec<usize>,
    pub dissimilar: Vec<usize>,
}

impl RelevanceSets {
    /// Errors if either set is empty; such tasks are skipped in training.
    pub fn check(&self) -> Result<()> {
        if self.similar.is_empty() {
            return Err(Error::EmptySimilarSet);
        }
        if self.dissimilar.is_empty() {
            return Err(Error::EmptyDissimilarSet);
        }
        Ok(())
    }
}

/// `similar = {k : row[k] < t_s}`, `dissimilar = {k : row[k] > t_d}`, where
/// `row` holds the losses of every pool member against the optimal demo.
pub fn build_relevance_sets(row: &[f64], t_s: f64, t_d: f64) -> Result<RelevanceSets> {
    if row.is_empty() {
        return Err(Error::EmptyTrainingPool);
    }
    if t_s > t_d {
        return Err(Error::Config(format!("t_S ({t_s}) must not exceed t_D ({t_d})")));
    }
    let sets = RelevanceSets {
        similar: (0..row.len()).filter(|&k| row[k] < t_s).collect(),
        dissimilar: (0..row.len()).filter(|&k| row[k] > t_d).collect(),
    };
    if sets.dissimilar.is_empty() {
        log::warn!("dissimilar set is empty; the task cannot be trained");
    }
    Ok(sets)
}

/// Index among `candidates` maximizing `sims[k] + alpha * delta[k]`.
/// Ties go to the smallest index.
pub fn most_violating(sims: &[f64], delta: &[f64], candidates: &[usize], alpha: f64) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for &k in candidates {
        let s = sims[k] + alpha * delta[k];
        best = match best {
            Some((bs, bk)) if bs > s || (bs == s && bk < k) => Some((bs, bk)),
            _ => Some((s, k)),
        };
    }
    best.map(|(_, k)| k).ok_or(Error::EmptyCandidates)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarginMode {
    /// margin equals the trajectory loss between positive and negative
    #[default]
    LossAugmented,
    /// margin fixed at 1
    Constant1,
}

impl MarginMode {
    pub fn margin(self, delta: f64) -> f64 {
        match self {
            MarginMode::LossAugmented => delta,
            MarginMode::Constant1 => 1.0,
        }
    }
}

/// `|margin + sim_neg - sim_pos|_+`. Zero at the kink.
#[inline]
pub fn hinge(margin: f64, sim_neg: f64, sim_pos: f64) -> f64 {
    (margin + sim_neg - sim_pos).max(0.0)
}

/// Fine-tuning loss of one `(p, l, tau_pos)` triple against a fixed negative
/// `tau_neg`; adds its gradient to `grads` when positive.
pub fn h3_loss(
    model: &EmbeddingModel,
    pc: &[f64],
    lang: &[f64],
    pos: &[f64],
    neg: &[f64],
    margin: f64,
    grads: Option<&mut ModelGrads>,
) -> Result<f64> {
    let task = model.forward_task(pc, lang)?;
    let pos_acts = model.traj.forward(pos)?;
    let neg_acts = model.traj.forward(neg)?;
    let u = task.output();
    let vp = pos_acts.last().expect("output");
    let vn = neg_acts.last().expect("output");
    let loss = hinge(margin, dot(u, vn), dot(u, vp));
    if let Some(g) = grads {
        if loss > 0.0 {
            let gu: Vec<f64> = vn.iter().zip(vp).map(|(a, b)| a - b).collect();
            let minus_u: Vec<f64> = u.iter().map(|v| -v).collect();
            model.backward_task(&task, &gu, g)?;
            model.traj.backward(&neg_acts, u, &mut g.traj, false)?;
            model.traj.backward(&pos_acts, &minus_u, &mut g.traj, false)?;
        }
    }
    Ok(loss)
}

/// Depth of the intermediate trajectory space inside the trajectory stack.
pub const H2_TAU_DEPTH: usize = 2;

/// Point-cloud/language pre-training loss for a part `pc` with its own
/// instruction `lang_pos` against a fixed negative instruction `lang_neg`.
/// Only the pc and lang gradients are touched.
pub fn h2pl_loss(
    model: &EmbeddingModel,
    pc: &[f64],
    lang_pos: &[f64],
    lang_neg: &[f64],
    margin: f64,
    grads: Option<&mut ModelGrads>,
) -> Result<f64> {
    let p_acts = model.pc.forward(pc)?;
    let lp_acts = model.lang.forward(lang_pos)?;
    let ln_acts = model.lang.forward(lang_neg)?;
    let p = p_acts.last().expect("output");
    let lp = lp_acts.last().expect("output");
    let ln = ln_acts.last().expect("output");
    let loss = hinge(margin, dot(p, ln), dot(p, lp));
    if let Some(g) = grads {
        if loss > 0.0 {
            let gp: Vec<f64> = ln.iter().zip(lp).map(|(a, b)| a - b).collect();
            let minus_p: Vec<f64> = p.iter().map(|v| -v).collect();
            model.pc.backward(&p_acts, &gp, &mut g.pc, false)?;
            model.lang.backward(&ln_acts, p, &mut g.lang, false)?;
            model.lang.backward(&lp_acts, &minus_p, &mut g.lang, false)?;
        }
    }
    Ok(loss)
}

/// Trajectory pre-training loss at the intermediate trajectory layer. The
/// anchor, positive and negative all run through the same (shared)
/// parameters, so their gradients are summed into `grads.traj`.
pub fn h2tau_loss(
    model: &EmbeddingModel,
    anchor: &[f64],
    pos: &[f64],
    neg: &[f64],
    margin: f64,
    grads: Option<&mut ModelGrads>,
) -> Result<f64> {
    let a_acts = model.traj.forward_to(anchor, H2_TAU_DEPTH)?;
    let p_acts = model.traj.forward_to(pos, H2_TAU_DEPTH)?;
    let n_acts = model.traj.forward_to(neg, H2_TAU_DEPTH)?;
    let a = a_acts.last().expect("output");
    let p = p_acts.last().expect("output");
    let n = n_acts.last().expect("output");
    let loss = hinge(margin, dot(a, n), dot(a, p));
    if let Some(g) = grads {
        if loss > 0.0 {
            let ga: Vec<f64> = n.iter().zip(p).map(|(x, y)| x - y).collect();
            let minus_a: Vec<f64> = a.iter().map(|v| -v).collect();
            model.traj.backward(&a_acts, &ga, &mut g.traj, false)?;
            model.traj.backward(&n_acts, a, &mut g.traj, false)?;
            model.traj.backward(&p_acts, &minus_a, &mut g.traj, false)?;
        }
    }
    Ok(loss)
}

/// Output of the intermediate trajectory layer.
pub fn embed_traj_h2(model: &EmbeddingModel, traj: &[f64]) -> Result<Vec<f64>> {
    Ok(model.traj.forward_to(traj, H2_TAU_DEPTH)?.pop().expect("output"))
}
