//! Dynamic time warping for manipulation trajectories (DTW-MT): the loss
//! between a demonstrated and a predicted trajectory.
//!
//! The local cost between waypoints is
//! `w_pos * |x_i - x_j| + w_rot * angle(q_i, q_j) + w_grip * [g_i != g_j]`,
//! averaged over the matched pairs of a monotone alignment; the loss is the
//! smallest such average over all alignments. Minimizing the average
//! (rather than dividing the cheapest total by its length) keeps the value
//! monotone in every weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Trajectory, Waypoint};
use crate::error::{Error, Result};

/// Default positional weight: one unit per 2.5 cm.
pub const DEFAULT_W_POS: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtwWeights {
    /// per meter
    pub w_pos: f64,
    /// per radian
    pub w_rot: f64,
    /// per gripper-state mismatch
    pub w_grip: f64,
}

impl Default for DtwWeights {
    fn default() -> Self {
        DtwWeights {
            w_pos: DEFAULT_W_POS,
            w_rot: 1.0,
            w_grip: 1.0,
        }
    }
}

impl DtwWeights {
    pub fn is_valid(&self) -> bool {
        [self.w_pos, self.w_rot, self.w_grip]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        DtwWeights {
            w_pos: self.w_pos * s,
            w_rot: self.w_rot * s,
            w_grip: self.w_grip * s,
        }
    }
}

#[inline]
pub fn local_cost(a: &Waypoint, b: &Waypoint, w: &DtwWeights) -> f64 {
    let mut d = w.w_pos * (a.position - b.position).norm() + w.w_rot * a.orientation.angle_to(&b.orientation);
    if a.gripper != b.gripper {
        d += w.w_grip;
    }
    d
}

/// DTW-MT between two waypoint sequences: the smallest mean local cost
/// over all monotone alignments of `a` and `b`.
///
/// Runs a dynamic program over `(i, j, path length)`, so the minimizing
/// alignment is found exactly even though the objective is a ratio.
pub fn dtw_mt(a: &[Waypoint], b: &[Waypoint], w: &DtwWeights) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let (n, m) = (a.len(), b.len());
    let stride = n + m;
    // cost[j * stride + len]: cheapest path to (i, j) with `len` matched pairs
    let mut prev = vec![f64::INFINITY; m * stride];
    let mut cur = vec![f64::INFINITY; m * stride];
    for (i, wa) in a.iter().enumerate() {
        // entries outside each cell's reachable length range must read as unreachable
        cur.fill(f64::INFINITY);
        for (j, wb) in b.iter().enumerate() {
            let d = local_cost(wa, wb, w);
            let lo = i.max(j) + 1;
            let hi = i + j + 1;
            let row = j * stride;
            if i == 0 && j == 0 {
                cur[row + 1] = d;
                continue;
            }
            for len in lo..=hi {
                let mut best = f64::INFINITY;
                if i > 0 && j > 0 {
                    best = best.min(prev[(j - 1) * stride + len - 1]);
                }
                if i > 0 {
                    best = best.min(prev[row + len - 1]);
                }
                if j > 0 {
                    best = best.min(cur[(j - 1) * stride + len - 1]);
                }
                cur[row + len] = best + d;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let row = (m - 1) * stride;
    let best = (n.max(m)..=n + m - 1)
        .map(|len| prev[row + len] / len as f64)
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

pub fn trajectory_loss(a: &Trajectory, b: &Trajectory, w: &DtwWeights) -> Result<f64> {
    dtw_mt(&a.waypoints, &b.waypoints, w)
}

/// Symmetric matrix of pairwise DTW-MT values over a trajectory pool.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    n: usize,
    values: Vec<f64>,
}

impl LossMatrix {
    pub fn compute(pool: &[&Trajectory], w: &DtwWeights) -> Result<Self> {
        let n = pool.len();
        if pool.iter().any(|t| t.waypoints.is_empty()) {
            return Err(Error::EmptyTrajectory);
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i + 1..n)
                    .map(|j| dtw_mt(&pool[i].waypoints, &pool[j].waypoints, w).expect("non-empty"))
                    .collect()
            })
            .collect();
        let mut values = vec![0.0; n * n];
        for (i, row) in rows.into_iter().enumerate() {
            for (k, v) in row.into_iter().enumerate() {
                let j = i + 1 + k;
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Ok(LossMatrix { n, values })
    }

    /// Constant matrix: every off-diagonal entry is `value`.
    pub fn constant(n: usize, value: f64) -> Self {
        let mut values = vec![value; n * n];
        for i in 0..n {
            values[i * n + i] = 0.0;
        }
        LossMatrix { n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Outcome of scaling DTW weights so that a threshold pair separates
/// same-concept from cross-concept trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub weights: DtwWeights,
    pub scale: f64,
    pub max_same: f64,
    pub min_cross: Option<f64>,
}

/// Uniformly rescales `base` so the largest same-concept loss maps to
/// `target_same` and verifies that the smallest cross-concept loss then
/// exceeds `min_cross_target`.
pub fn calibrate(
    base: &DtwWeights,
    same_pairs: &[(&Trajectory, &Trajectory)],
    cross_pairs: &[(&Trajectory, &Trajectory)],
    target_same: f64,
    min_cross_target: f64,
) -> Result<Calibration> {
    let eval = |pairs: &[(&Trajectory, &Trajectory)]| -> Result<Vec<f64>> {
        pairs.iter().map(|(a, b)| trajectory_loss(a, b, base)).collect()
    };
    let same = eval(same_pairs)?;
    let cross = eval(cross_pairs)?;
    let max_same = same.iter().copied().fold(0.0, f64::max);
    let min_cross = cross.iter().copied().reduce(f64::min);
    let scale = if max_same > 0.0 { target_same / max_same } else { 1.0 };
    if let Some(mc) = min_cross {
        if mc * scale <= min_cross_target {
            return Err(Error::Config(format!(
                "cannot calibrate: cross/same loss ratio {:.3} is too small (need > {:.3})",
                mc / max_same.max(f64::MIN_POSITIVE),
                min_cross_target / target_same
            )));
        }
    }
    Ok(Calibration {
        weights: base.scaled(scale),
        scale,
        max_same,
        min_cross,
    })
}
