//! Fixed-length trajectory resampling and encoding.

use crate::data::{Gripper, Waypoint};
use crate::error::{Error, Result};
use crate::geometry::Quat;

pub const TRAJ_WAYPOINTS: usize = 15;
/// 3 position + 4 quaternion + 3 gripper one-hot per waypoint.
pub const WAYPOINT_DIM: usize = 10;
pub const TRAJ_DIM: usize = TRAJ_WAYPOINTS * WAYPOINT_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resample {
    /// equally spaced along the waypoint index
    #[default]
    Index,
    /// equally spaced along cumulative Euclidean path length
    PathLength,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub resample: Resample,
    /// multiplier applied to positions (meters) in the flattened vector
    pub position_scale: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            resample: Resample::Index,
            position_scale: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTrajectory {
    pub waypoints: Vec<Waypoint>,
}

impl NormalizedTrajectory {
    pub fn flattened(&self, spec: &TrajectorySpec) -> Vec<f64> {
        let mut v = Vec::with_capacity(TRAJ_DIM);
        for w in &self.waypoints {
            v.extend(w.position.iter().map(|c| c * spec.position_scale));
            // q and -q are the same rotation; present one of them
            let q = w.orientation;
            let s = if q.w < 0.0 { -1.0 } else { 1.0 };
            v.extend([q.w * s, q.x * s, q.y * s, q.z * s]);
            v.extend(w.gripper.one_hot());
        }
        v
    }
}

fn interpolate(a: &Waypoint, b: &Waypoint, t: f64) -> Waypoint {
    if t == 0.0 {
        return *a;
    }
    if t == 1.0 {
        return *b;
    }
    let gripper: Gripper = if t <= 0.5 { a.gripper } else { b.gripper };
    Waypoint {
        position: a.position + (b.position - a.position) * t,
        orientation: Quat::slerp(&a.orientation, &b.orientation, t),
        gripper,
    }
}

/// Cumulative parameter of each input waypoint, scaled to [0, n - 1].
fn parameters(wps: &[Waypoint], mode: Resample) -> Vec<f64> {
    let n = wps.len();
    let index = || (0..n).map(|i| i as f64).collect();
    match mode {
        Resample::Index => index(),
        Resample::PathLength => {
            let mut acc = vec![0.0; n];
            for i in 1..n {
                acc[i] = acc[i - 1] + (wps[i].position - wps[i - 1].position).norm();
            }
            let total = acc[n - 1];
            if total <= 0.0 {
                return index();
            }
            acc.iter().map(|a| a / total * (n - 1) as f64).collect()
        }
    }
}

pub fn normalize_trajectory(wps: &[Waypoint], spec: &TrajectorySpec) -> Result<NormalizedTrajectory> {
    let n = wps.len();
    if n == 0 {
        return Err(Error::EmptyTrajectory);
    }
    if n == 1 {
        return Ok(NormalizedTrajectory {
            waypoints: vec![wps[0]; TRAJ_WAYPOINTS],
        });
    }
    let params = parameters(wps, spec.resample);
    let span = (n - 1) as f64;
    let mut out = Vec::with_capacity(TRAJ_WAYPOINTS);
    let mut seg = 0;
    for k in 0..TRAJ_WAYPOINTS {
        let s = k as f64 * span / (TRAJ_WAYPOINTS - 1) as f64;
        if k == TRAJ_WAYPOINTS - 1 {
            out.push(wps[n - 1]);
            continue;
        }
        while seg + 2 < n && params[seg + 1] <= s {
            seg += 1;
        }
        let (p0, p1) = (params[seg], params[seg + 1]);
        let t = if p1 > p0 { ((s - p0) / (p1 - p0)).clamp(0.0, 1.0) } else { 0.0 };
        out.push(interpolate(&wps[seg], &wps[seg + 1], t));
    }
    Ok(NormalizedTrajectory { waypoints: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wp(x: f64, q: Quat, g: Gripper) -> Waypoint {
        Waypoint {
            position: Vec3::new(x, 0.0, 0.0),
            orientation: q,
            gripper: g,
        }
    }

    #[test]
    fn fifteen_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wps: Vec<Waypoint> = (0..15)
            .map(|_| {
                let axis = Vec3::new(rng.gen(), rng.gen(), rng.gen());
                wp(rng.gen(), Quat::from_axis_angle(&axis, rng.gen_range(0.0..3.0)), Gripper::ALL[rng.gen_range(0..3)])
            })
            .collect();
        let n = normalize_trajectory(&wps, &TrajectorySpec::default()).unwrap();
        assert_eq!(n.waypoints, wps);
        let again = normalize_trajectory(&n.waypoints, &TrajectorySpec::default()).unwrap();
        assert_eq!(again, n);
    }

    #[test]
    fn two_waypoints_linear() {
        let wps = [wp(0.0, Quat::IDENTITY, Gripper::Open), wp(1.4, Quat::IDENTITY, Gripper::Closed)];
        let n = normalize_trajectory(&wps, &TrajectorySpec::default()).unwrap();
        for (k, w) in n.waypoints.iter().enumerate() {
            assert!((w.position.x - 1.4 * k as f64 / 14.0).abs() < 1e-12);
        }
        // k = 7 sits exactly halfway: the earlier waypoint wins
        assert_eq!(n.waypoints[7].gripper, Gripper::Open);
        assert_eq!(n.waypoints[8].gripper, Gripper::Closed);
    }

    #[test]
    fn single_waypoint_replicated() {
        let w = wp(0.3, Quat::IDENTITY, Gripper::Holding);
        let n = normalize_trajectory(&[w], &TrajectorySpec::default()).unwrap();
        assert_eq!(n.waypoints, vec![w; 15]);
        assert!(normalize_trajectory(&[], &TrajectorySpec::default()).is_err());
    }

    #[test]
    fn quarter_turn_matches_slerp_oracle() {
        let q0 = Quat::IDENTITY;
        let q1 = Quat::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_4);
        let q2 = Quat::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let wps = [wp(0.0, q0, Gripper::Open), wp(0.5, q1, Gripper::Open), wp(1.0, q2, Gripper::Open)];
        let n = normalize_trajectory(&wps, &TrajectorySpec::default()).unwrap();
        let mut last = -1.0;
        for (k, w) in n.waypoints.iter().enumerate() {
            let a = w.orientation.angle_to(&q0);
            assert!(a > last);
            last = a;
            // same-axis rotations: the angle grows linearly in the sample parameter
            let expected = std::f64::consts::FRAC_PI_2 * k as f64 / 14.0;
            assert!((a - expected).abs() < 1e-9, "{k}: {a} vs {expected}");
        }
    }

    #[test]
    fn flattened_dimension_and_one_hot() {
        let wps = [wp(0.0, Quat::new(-1.0, 0.0, 0.0, 0.0), Gripper::Holding)];
        let n = normalize_trajectory(&wps, &TrajectorySpec::default()).unwrap();
        let f = n.flattened(&TrajectorySpec::default());
        assert_eq!(f.len(), TRAJ_DIM);
        for chunk in f.chunks(WAYPOINT_DIM) {
            assert_eq!(chunk[3], 1.0);
            assert_eq!(chunk[7..].iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn path_length_mode_spaces_by_distance() {
        let wps = [
            wp(0.0, Quat::IDENTITY, Gripper::Open),
            wp(0.1, Quat::IDENTITY, Gripper::Open),
            wp(1.4, Quat::IDENTITY, Gripper::Open),
        ];
        let spec = TrajectorySpec {
            resample: Resample::PathLength,
            ..Default::default()
        };
        let n = normalize_trajectory(&wps, &spec).unwrap();
        for (k, w) in n.waypoints.iter().enumerate() {
            assert!((w.position.x - 1.4 * k as f64 / 14.0).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn always_fifteen_valid_waypoints(seed in proptest::prelude::any::<u64>(), n in 1usize..25, by_length in proptest::prelude::any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let wps: Vec<Waypoint> = (0..n)
                .map(|_| Waypoint {
                    position: Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    orientation: Quat::from_axis_angle(&Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0), rng.gen_range(-3.0..3.0)),
                    gripper: Gripper::ALL[rng.gen_range(0..3)],
                })
                .collect();
            let spec = TrajectorySpec {
                resample: if by_length { Resample::PathLength } else { Resample::Index },
                ..Default::default()
            };
            let t = normalize_trajectory(&wps, &spec).unwrap();
            proptest::prop_assert_eq!(t.waypoints.len(), TRAJ_WAYPOINTS);
            for w in &t.waypoints {
                proptest::prop_assert!((w.orientation.norm() - 1.0).abs() < 1e-6);
            }
            let flat = t.flattened(&spec);
            proptest::prop_assert_eq!(flat.len(), TRAJ_DIM);
            for k in 0..TRAJ_WAYPOINTS {
                let g = &flat[k * WAYPOINT_DIM + 7..(k + 1) * WAYPOINT_DIM];
                proptest::prop_assert_eq!(g.iter().sum::<f64>(), 1.0);
            }
        }
    }
}
