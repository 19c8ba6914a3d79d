//! Part candidates from difference-of-normals clustering, and ranking of
//! candidates against the steps of a manual.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::data::{iou, Dataset, PointCloud, Scene};
use crate::error::{Error, Result};
use crate::features::{bag_of_words, voxelize_indices, GridSpec, SparseGrid, Vocabulary, WordBag};
use crate::geometry::{centroid, covariance, principal_frame, sorted_eigen, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationParams {
    /// meters
    pub normal_neighborhood_small: f64,
    pub normal_neighborhood_large: f64,
    pub don_threshold: f64,
    pub cluster_distance: f64,
    pub max_part_extent: f64,
    /// smaller clusters are discarded as noise
    pub min_cluster_points: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            normal_neighborhood_small: 0.01,
            normal_neighborhood_large: 0.04,
            don_threshold: 0.2,
            cluster_distance: 0.01,
            max_part_extent: 0.25,
            min_cluster_points: 50,
        }
    }
}

impl SegmentationParams {
    /// Second default parameter set: radii and extent doubled.
    pub fn coarse() -> Self {
        let d = Self::default();
        SegmentationParams {
            normal_neighborhood_small: 2.0 * d.normal_neighborhood_small,
            normal_neighborhood_large: 2.0 * d.normal_neighborhood_large,
            max_part_extent: 2.0 * d.max_part_extent,
            ..d
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.normal_neighborhood_small > 0.0 && self.normal_neighborhood_small < self.normal_neighborhood_large) {
            return Err(Error::Config("need 0 < small normal radius < large normal radius".into()));
        }
        if !(self.don_threshold > 0.0 && self.don_threshold < 1.0 && self.cluster_distance > 0.0 && self.max_part_extent > 0.0) {
            return Err(Error::Config("segmentation thresholds must be positive (DoN threshold below 1)".into()));
        }
        Ok(())
    }
}

/// Uniform hash grid for radius queries.
struct HashGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> HashGrid<'a> {
    fn new(points: &'a [Vec3], cell: f64, subset: impl Iterator<Item = usize>) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for i in subset {
            cells.entry(Self::key(&points[i], cell)).or_default().push(i);
        }
        HashGrid { points, cell, cells }
    }

    fn key(p: &Vec3, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    /// Indices within `r` of `p`, in increasing order.
    fn within(&self, p: &Vec3, r: f64) -> Vec<usize> {
        let k = Self::key(p, self.cell);
        let reach = (r / self.cell).ceil() as i64;
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(v) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(v.iter().copied().filter(|&j| (self.points[j] - p).norm() <= r));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Unit normal from a plane fit over the neighbors within `r`, oriented
/// toward `sensor`. `None` with fewer than three neighbors.
fn normal_at(grid: &HashGrid<'_>, i: usize, r: f64, sensor: &Vec3) -> Option<Vec3> {
    let nb = grid.within(&grid.points[i], r);
    if nb.len() < 3 {
        return None;
    }
    let (_, cov) = covariance(nb.iter().map(|&j| &grid.points[j]))?;
    let n = sorted_eigen(&cov).1[2];
    Some(if n.dot(&(sensor - grid.points[i])) < 0.0 { -n } else { n })
}

/// Difference-of-normals magnitude `|n_small - n_large| / 2` per point;
/// `None` where either normal is undefined.
pub fn difference_of_normals(cloud: &PointCloud, params: &SegmentationParams) -> Vec<Option<f64>> {
    let pts = &cloud.points;
    let grid = HashGrid::new(pts, params.normal_neighborhood_large, 0..pts.len());
    (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let s = normal_at(&grid, i, params.normal_neighborhood_small, &cloud.sensor_origin)?;
            let l = normal_at(&grid, i, params.normal_neighborhood_large, &cloud.sensor_origin)?;
            Some((s - l).norm() / 2.0)
        })
        .collect()
}

/// Largest spread of the points along their principal axes.
fn principal_extent(points: &[Vec3]) -> f64 {
    let Some((_, cov)) = covariance(points.iter()) else { return 0.0 };
    let (_, axes) = sorted_eigen(&cov);
    axes.iter()
        .map(|a| {
            let (lo, hi) = points.iter().map(|p| p.dot(a)).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Candidates of one parameter set, each a sorted index list. Also returns
/// the number of points skipped for lack of neighbors.
pub fn segment_once(cloud: &PointCloud, params: &SegmentationParams) -> Result<(Vec<Vec<usize>>, usize)> {
    params.check()?;
    if cloud.points.is_empty() {
        return Err(Error::EmptyScene);
    }
    let don = difference_of_normals(cloud, params);
    let skipped = don.iter().filter(|d| d.is_none()).count();
    let keep: Vec<usize> = (0..don.len()).filter(|&i| don[i].is_some_and(|d| d > params.don_threshold)).collect();
    let grid = HashGrid::new(&cloud.points, params.cluster_distance, keep.iter().copied());
    let mut label = vec![usize::MAX; cloud.points.len()];
    let mut clusters = Vec::new();
    for &seed in &keep {
        if label[seed] != usize::MAX {
            continue;
        }
        let id = clusters.len();
        label[seed] = id;
        let mut members = vec![seed];
        let mut head = 0;
        while head < members.len() {
            let p = cloud.points[members[head]];
            head += 1;
            for j in grid.within(&p, params.cluster_distance) {
                if label[j] == usize::MAX {
                    label[j] = id;
                    members.push(j);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    let out = clusters
        .into_iter()
        .filter(|c| c.len() >= params.min_cluster_points)
        .filter(|c| {
            let pts: Vec<Vec3> = c.iter().map(|&i| cloud.points[i]).collect();
            principal_extent(&pts) <= params.max_part_extent
        })
        .collect();
    Ok((out, skipped))
}

/// Union of the candidates of every parameter set, dropping any candidate
/// whose IoU with an earlier one exceeds 0.9.
pub fn generate_candidates(cloud: &PointCloud, params: &[SegmentationParams]) -> Result<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for p in params {
        let (cands, skipped) = segment_once(cloud, p)?;
        if skipped > 0 {
            log::debug!("{skipped} points had too few neighbors for a normal");
        }
        for c in cands {
            if out.iter().all(|o| iou(o, &c) <= 0.9) {
                out.push(c);
            }
        }
    }
    Ok(out)
}

/// Where the scene is viewed from and pointed at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneContext {
    pub sensor_origin: Vec3,
    pub front_point: Vec3,
    pub front_normal: Vec3,
    pub person_head: Vec3,
    pub pointing_hint: Option<Vec3>,
}

/// Height of the imagined operator's head above the floor, meters.
pub const HEAD_HEIGHT: f64 = 1.7;
/// Horizontal distance of the operator from the front plane, meters.
pub const STANDING_DISTANCE: f64 = 0.6;

impl SceneContext {
    /// The front plane passes through the scene centroid; its normal is the
    /// principal axis closest to the centroid-to-sensor direction (or that
    /// direction itself when no axis is within 45 degrees). The operator
    /// stands in front of it on the lowest point of the scene.
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let pts = &scene.cloud.points;
        let (c, cov) = covariance(pts.iter()).ok_or(Error::EmptyScene)?;
        let view = (scene.cloud.sensor_origin - c).try_normalize(1e-12).unwrap_or(Vec3::z());
        let (_, axes) = sorted_eigen(&cov);
        let best = axes
            .iter()
            .map(|a| if a.dot(&view) < 0.0 { -a } else { *a })
            .max_by(|a, b| a.dot(&view).total_cmp(&b.dot(&view)))
            .expect("three axes");
        let normal = if best.dot(&view) >= std::f64::consts::FRAC_PI_4.cos() { best } else { view };
        let floor = pts.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
        let horizontal = Vec3::new(normal.x, normal.y, 0.0)
            .try_normalize(1e-9)
            .or_else(|| Vec3::new(view.x, view.y, 0.0).try_normalize(1e-9))
            .unwrap_or(Vec3::x());
        let foot = c + horizontal * STANDING_DISTANCE;
        Ok(SceneContext {
            sensor_origin: scene.cloud.sensor_origin,
            front_point: c,
            front_normal: normal,
            person_head: Vec3::new(foot.x, foot.y, floor + HEAD_HEIGHT),
            pointing_hint: scene.pointing_hint,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankWeights {
    /// weights of reach, view-ray and pointing distances (per meter)
    pub w: [f64; 3],
    pub beta: f64,
    pub k_p: usize,
    pub k_l: usize,
    /// language similarity used for a neighbor without an instruction
    pub no_language_sim: f64,
}

impl Default for RankWeights {
    fn default() -> Self {
        RankWeights {
            w: [1.0, 1.0, 5.0],
            beta: 0.5,
            k_p: 3,
            k_l: 3,
            no_language_sim: 0.2,
        }
    }
}

impl RankWeights {
    pub fn check(&self) -> Result<()> {
        if self.k_p == 0 || self.k_l == 0 {
            return Err(Error::Config("neighbor counts must be at least 1".into()));
        }
        if !self.w.iter().chain([&self.beta, &self.no_language_sim]).all(|v| v.is_finite()) {
            return Err(Error::Config("rank weights must be finite".into()));
        }
        Ok(())
    }
}

/// Training segments with their grids and instructions.
#[derive(Debug, Clone)]
pub struct RankingPool {
    pub spec: GridSpec,
    pub vocab: Vocabulary,
    pub ids: Vec<String>,
    /// scene of each segment
    pub scenes: Vec<String>,
    pub grids: Vec<SparseGrid>,
    /// instruction of each segment (first task using the part)
    pub bags: Vec<Option<WordBag>>,
}

/// Full grid of a point subset in its own principal frame.
pub fn segment_grid(cloud: &PointCloud, indices: &[usize], spec: &GridSpec) -> Result<SparseGrid> {
    let pts: Vec<Vec3> = indices.iter().map(|&i| cloud.points[i]).collect();
    let frame = principal_frame(&pts, &cloud.sensor_origin).ok_or(Error::EmptyPart)?;
    Ok(voxelize_indices(cloud, indices, &frame, spec)?.to_sparse())
}

/// Grid used for ranking: 100 cells per side at 5 mm holding only the
/// segment's own points, so neighbors are found by shape alone.
pub fn ranking_grid() -> GridSpec {
    GridSpec {
        cell_size: 0.005,
        smoothing_decay: 2.0 / 0.005,
        context_value: 0.0,
        context_radius: 0.0,
        ray_fill: false,
        ..GridSpec::default()
    }
}

impl RankingPool {
    /// Pool of the parts used by `tasks` (dataset task indices), sorted by
    /// part id.
    pub fn build(ds: &Dataset, tasks: &[usize], spec: &GridSpec) -> Result<Self> {
        let mut by_part: std::collections::BTreeMap<&str, &str> = std::collections::BTreeMap::new();
        for &t in tasks {
            let task = &ds.tasks()[t];
            by_part.entry(task.part_id.as_str()).or_insert(task.instruction_id.as_str());
        }
        if by_part.is_empty() {
            return Err(Error::EmptyTrainingPool);
        }
        let texts: Vec<&str> = by_part.values().map(|l| ds.instruction(l).expect("validated").text.as_str()).collect();
        let vocab = Vocabulary::build(texts.iter().copied());
        let entries: Vec<(&str, &str)> = by_part.into_iter().collect();
        let grids = entries
            .par_iter()
            .map(|(pid, _)| {
                let part = ds.part(pid).expect("validated");
                segment_grid(&ds.scene(&part.scene_id).expect("validated").cloud, &part.point_indices, spec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RankingPool {
            spec: *spec,
            ids: entries.iter().map(|e| e.0.to_owned()).collect(),
            scenes: entries.iter().map(|e| ds.part(e.0).expect("validated").scene_id.clone()).collect(),
            bags: texts.iter().map(|t| Some(bag_of_words(t, &vocab))).collect(),
            vocab,
            grids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Copy without the segments of one scene.
    pub fn without_scene(&self, scene: &str) -> RankingPool {
        let keep: Vec<usize> = (0..self.len()).filter(|&k| self.scenes[k] != scene).collect();
        RankingPool {
            spec: self.spec,
            vocab: self.vocab.clone(),
            ids: keep.iter().map(|&k| self.ids[k].clone()).collect(),
            scenes: keep.iter().map(|&k| self.scenes[k].clone()).collect(),
            grids: keep.iter().map(|&k| self.grids[k].clone()).collect(),
            bags: keep.iter().map(|&k| self.bags[k].clone()).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn point_line_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let d = b - a;
    let n = d.norm();
    if n == 0.0 {
        return (p - a).norm();
    }
    (p - a).cross(&d).norm() / n
}

/// Geometric features of a segment: reach distance from the operator's head
/// above the closest segment, distance to the line from the head through the
/// scene centroid, and distance to the pointing hint (0 without one).
pub fn segment_features(seg_centroid: &Vec3, min_reach: f64, ctx: &SceneContext) -> [f64; 3] {
    [
        (seg_centroid - ctx.person_head).norm() - min_reach,
        point_line_distance(seg_centroid, &ctx.person_head, &ctx.front_point),
        ctx.pointing_hint.map_or(0.0, |h| (seg_centroid - h).norm()),
    ]
}

/// A candidate prepared for scoring.
#[derive(Debug, Clone)]
pub struct ScoredSegment {
    pub grid: SparseGrid,
    pub features: [f64; 3],
}

/// Prepares every candidate of a scene for scoring.
pub fn prepare_candidates(cloud: &PointCloud, candidates: &[Vec<usize>], ctx: &SceneContext, spec: &GridSpec) -> Result<Vec<ScoredSegment>> {
    let cents: Vec<Vec3> = candidates
        .iter()
        .map(|c| centroid(c.iter().map(|&i| &cloud.points[i])).ok_or(Error::EmptyPart))
        .collect::<Result<_>>()?;
    let min_reach = cents.iter().map(|c| (c - ctx.person_head).norm()).fold(f64::INFINITY, f64::min);
    candidates
        .par_iter()
        .zip(&cents)
        .map(|(c, cent)| {
            Ok(ScoredSegment {
                grid: segment_grid(cloud, c, spec)?,
                features: segment_features(cent, min_reach, ctx),
            })
        })
        .collect()
}

/// Cosine similarity of a segment to every pool segment.
pub fn pc_similarities(seg: &ScoredSegment, pool: &RankingPool) -> Vec<f64> {
    pool.grids.iter().map(|g| seg.grid.cosine(g)).collect()
}

/// Bag-of-words cosine of an instruction to every pool instruction; `None`
/// for segments without one.
pub fn lang_similarities(lang: &WordBag, pool: &RankingPool) -> Vec<Option<f64>> {
    pool.bags.iter().map(|b| b.as_ref().map(|b| lang.cosine(b))).collect()
}

/// `psi = psi_feat * (psi_pc + psi_lang)` from precomputed similarities.
pub fn combine_score(pc: &[f64], lang: &[Option<f64>], features: &[f64; 3], rw: &RankWeights) -> f64 {
    let lang_rank: Vec<f64> = lang.iter().map(|l| l.unwrap_or(f64::NEG_INFINITY)).collect();
    let psi_pc: f64 = top_k(pc, rw.k_p).iter().map(|&k| pc[k] + rw.beta * lang[k].unwrap_or(rw.no_language_sim)).sum();
    let psi_lang: f64 = top_k(&lang_rank, rw.k_l)
        .iter()
        .filter_map(|&k| lang[k].map(|l| l + rw.beta * pc[k]))
        .sum();
    let psi_feat = (-rw.w.iter().zip(features).map(|(w, f)| w * f).sum::<f64>()).exp();
    psi_feat * (psi_pc + psi_lang)
}

/// Score of one segment for one instruction.
pub fn score_segment(seg: &ScoredSegment, lang: &WordBag, pool: &RankingPool, rw: &RankWeights) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::EmptyTrainingPool);
    }
    Ok(combine_score(&pc_similarities(seg, pool), &lang_similarities(lang, pool), &seg.features, rw))
}

/// Score matrix `psi[candidate][step]`, floored at zero.
pub fn score_matrix(segs: &[ScoredSegment], steps: &[WordBag], pool: &RankingPool, rw: &RankWeights) -> Result<Vec<Vec<f64>>> {
    if pool.is_empty() {
        return Err(Error::EmptyTrainingPool);
    }
    let lang: Vec<Vec<Option<f64>>> = steps.iter().map(|l| lang_similarities(l, pool)).collect();
    Ok(segs
        .par_iter()
        .map(|s| {
            let pc = pc_similarities(s, pool);
            lang.iter().map(|l| combine_score(&pc, l, &s.features, rw).max(0.0)).collect()
        })
        .collect())
}

/// For each step, the candidate maximizing `psi^2 / sum_k psi(candidate, k)`;
/// ties go to the lower candidate. `None` when every score is zero.
pub fn select_from_scores(psi: &[Vec<f64>]) -> Vec<Option<usize>> {
    let steps = psi.first().map_or(0, Vec::len);
    let adjusted: Vec<Vec<f64>> = psi
        .iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(|&v| if total > 0.0 { v * v / total } else { 0.0 }).collect()
        })
        .collect();
    (0..steps)
        .map(|j| {
            let mut best: Option<(usize, f64)> = None;
            for (i, row) in adjusted.iter().enumerate() {
                if row[j] > 0.0 && best.is_none_or(|b| row[j] > b.1) {
                    best = Some((i, row[j]));
                }
            }
            if best.is_none() {
                log::warn!("step {j}: every candidate scored zero");
            }
            best.map(|b| b.0)
        })
        .collect()
}

/// Selected candidate per manual step plus the adjusted scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub candidates: Vec<Vec<usize>>,
    pub psi: Vec<Vec<f64>>,
    pub chosen: Vec<Option<usize>>,
}

/// Generates candidates for `scene` and picks one per step of `steps`.
pub fn select_parts(scene: &Scene, steps: &[&str], pool: &RankingPool, params: &[SegmentationParams], rw: &RankWeights) -> Result<Selection> {
    let candidates = generate_candidates(&scene.cloud, params)?;
    let ctx = SceneContext::from_scene(scene)?;
    let segs = prepare_candidates(&scene.cloud, &candidates, &ctx, &pool.spec)?;
    let bags: Vec<WordBag> = steps.iter().map(|t| bag_of_words(t, &pool.vocab)).collect();
    let psi = score_matrix(&segs, &bags, pool, rw)?;
    let chosen = select_from_scores(&psi);
    Ok(Selection { candidates, psi, chosen })
}

/// Manual steps of a scene paired with the planted part of each step,
/// restricted to the given tasks.
pub fn planted_steps<'a>(ds: &'a Dataset, scene: &str, tasks: &[usize]) -> Vec<(&'a str, &'a [usize])> {
    let mut steps: Vec<(usize, &str, &str, &[usize])> = tasks
        .iter()
        .map(|&t| &ds.tasks()[t])
        .filter_map(|t| {
            let part = ds.part(&t.part_id)?;
            let ins = ds.instruction(&t.instruction_id)?;
            (part.scene_id == scene).then_some((ins.step_index, ins.id.as_str(), ins.text.as_str(), part.point_indices.as_slice()))
        })
        .collect();
    steps.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    steps.into_iter().map(|s| (s.2, s.3)).collect()
}

/// Candidate weight vectors tried by [`fit_rank_weights`].
pub const WEIGHT_GRID: [f64; 4] = [0.0, 1.0, 2.0, 5.0];

/// Grid search of the feature weights `w` on training scenes. Each scene is
/// ranked against a pool without its own segments; the score is the share of
/// steps whose selected candidate overlaps the planted part with IoU at
/// least 0.5. Ties keep the earlier grid point, starting from `base.w`.
pub fn fit_rank_weights(
    ds: &Dataset,
    tasks: &[usize],
    pool: &RankingPool,
    params: &[SegmentationParams],
    base: &RankWeights,
    max_scenes: usize,
) -> Result<(RankWeights, f64)> {
    let mut scenes: Vec<&str> = pool.scenes.iter().map(String::as_str).collect();
    scenes.sort_unstable();
    scenes.dedup();
    scenes.truncate(max_scenes);
    struct Prepared {
        features: Vec<[f64; 3]>,
        pc: Vec<Vec<f64>>,
        lang: Vec<Vec<Option<f64>>>,
        truth: Vec<Vec<bool>>,
    }
    let prepared = scenes
        .iter()
        .map(|sid| {
            let scene = ds.scene(sid).ok_or_else(|| Error::NotFound((*sid).into()))?;
            let steps = planted_steps(ds, sid, tasks);
            let candidates = generate_candidates(&scene.cloud, params)?;
            let ctx = SceneContext::from_scene(scene)?;
            let segs = prepare_candidates(&scene.cloud, &candidates, &ctx, &pool.spec)?;
            let others = pool.without_scene(sid);
            if others.is_empty() {
                return Err(Error::EmptyTrainingPool);
            }
            Ok(Prepared {
                features: segs.iter().map(|s| s.features).collect(),
                pc: segs.par_iter().map(|s| pc_similarities(s, &others)).collect(),
                lang: steps.iter().map(|(t, _)| lang_similarities(&bag_of_words(t, &others.vocab), &others)).collect(),
                truth: steps.iter().map(|(_, part)| candidates.iter().map(|c| iou(c, part) >= 0.5).collect()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grid = vec![base.w];
    for a in WEIGHT_GRID {
        for b in WEIGHT_GRID {
            for c in WEIGHT_GRID {
                if [a, b, c] != base.w {
                    grid.push([a, b, c]);
                }
            }
        }
    }
    let mut best: Option<(RankWeights, f64)> = None;
    for w in grid {
        let rw = RankWeights { w, ..base.clone() };
        let (mut hits, mut total) = (0usize, 0usize);
        for p in &prepared {
            let psi: Vec<Vec<f64>> = (0..p.pc.len())
                .map(|i| p.lang.iter().map(|l| combine_score(&p.pc[i], l, &p.features[i], &rw).max(0.0)).collect())
                .collect();
            for (j, c) in select_from_scores(&psi).into_iter().enumerate() {
                total += 1;
                hits += usize::from(c.is_some_and(|c| p.truth[j][c]));
            }
        }
        let rate = hits as f64 / total.max(1) as f64;
        if best.as_ref().is_none_or(|b| rate > b.1) {
            best = Some((rw, rate));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(rng: &mut impl Rng, half: f64, step: f64) -> Vec<Vec3> {
        let n = (2.0 * half / step) as i32;
        let mut v = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                v.push(Vec3::new(-half + i as f64 * step, -half + j as f64 * step, rng.gen_range(-1e-4..1e-4)));
            }
        }
        v
    }

    fn blob(rng: &mut impl Rng, c: Vec3, r: f64, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
                c + d * r
            })
            .collect()
    }

    fn two_blob_scene(rng: &mut impl Rng) -> (PointCloud, usize) {
        let mut pts = plane(rng, 0.3, 0.006);
        let n_plane = pts.len();
        pts.extend(blob(rng, Vec3::new(-0.12, 0.0, 0.03), 0.02, 400));
        pts.extend(blob(rng, Vec3::new(0.12, 0.05, 0.03), 0.02, 400));
        (
            PointCloud {
                points: pts,
                sensor_origin: Vec3::new(0.0, -0.3, 1.0),
            },
            n_plane,
        )
    }

    #[test]
    fn plane_alone_has_no_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = PointCloud {
            points: plane(&mut rng, 0.2, 0.006),
            sensor_origin: Vec3::new(0.0, 0.0, 1.0),
        };
        assert!(generate_candidates(&cloud, &[SegmentationParams::default()]).unwrap().is_empty());
    }

    #[test]
    fn two_blobs_on_a_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cloud, n_plane) = two_blob_scene(&mut rng);
        let c = generate_candidates(&cloud, &[SegmentationParams::default()]).unwrap();
        assert_eq!(c.len(), 2, "{:?}", c.iter().map(Vec::len).collect::<Vec<_>>());
        let first: Vec<usize> = (n_plane..n_plane + 400).collect();
        let second: Vec<usize> = (n_plane + 400..n_plane + 800).collect();
        assert!(c.iter().any(|x| iou(x, &first) >= 0.5));
        assert!(c.iter().any(|x| iou(x, &second) >= 0.5));
    }

    #[test]
    fn candidates_follow_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cloud, _) = two_blob_scene(&mut rng);
        let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.7);
        let shift = Vec3::new(0.4, -1.0, 2.0);
        let moved = PointCloud {
            points: cloud.points.iter().map(|p| rot * p + shift).collect(),
            sensor_origin: rot * cloud.sensor_origin + shift,
        };
        let params = [SegmentationParams::default(), SegmentationParams::coarse()];
        assert_eq!(generate_candidates(&cloud, &params).unwrap(), generate_candidates(&moved, &params).unwrap());
    }

    #[test]
    fn empty_scene_is_an_error() {
        let cloud = PointCloud {
            points: vec![],
            sensor_origin: Vec3::zeros(),
        };
        assert!(matches!(generate_candidates(&cloud, &[SegmentationParams::default()]), Err(Error::EmptyScene)));
    }

    #[test]
    fn ratio_selection_example() {
        assert_eq!(select_from_scores(&[vec![4.0, 1.0], vec![2.0, 2.0]]), vec![Some(0), Some(1)]);
        assert_eq!(select_from_scores(&[vec![3.0, 0.5]]), vec![Some(0), Some(0)]);
        assert_eq!(select_from_scores(&[vec![0.0], vec![0.0]]), vec![None]);
    }

    #[test]
    fn selection_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let psi: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(0.0..5.0)).collect()).collect();
            let s = rng.gen_range(0.01..100.0);
            let scaled: Vec<Vec<f64>> = psi.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
            assert_eq!(select_from_scores(&psi), select_from_scores(&scaled));
        }
    }

    fn bag(v: &[f64]) -> WordBag {
        WordBag { counts: v.to_vec() }
    }

    fn grid_with(values: &[(u32, f32)]) -> SparseGrid {
        SparseGrid::from_pairs(values.to_vec())
    }

    #[test]
    fn single_neighbor_substitution() {
        // cos(p) = 0.8 with beta = 1 and cos(l) = 0.5 gives 1.3
        let pool = RankingPool {
            spec: GridSpec::default(),
            vocab: Vocabulary::build(["a b"]),
            ids: vec!["x".into()],
            scenes: vec!["s".into()],
            grids: vec![grid_with(&[(0, 0.8), (1, 0.6)])],
            bags: vec![None],
        };
        let seg = ScoredSegment {
            grid: grid_with(&[(0, 1.0)]),
            features: [0.0; 3],
        };
        let rw = RankWeights {
            beta: 1.0,
            k_p: 1,
            k_l: 1,
            no_language_sim: 0.5,
            ..Default::default()
        };
        let psi = score_segment(&seg, &bag(&[1.0, 0.0]), &pool, &rw).unwrap();
        assert!((psi - 1.3).abs() < 1e-6, "{psi}");
    }

    /// Exhaustive recomputation of the score without neighbor shortcuts.
    fn naive_score(seg: &ScoredSegment, lang: &WordBag, pool: &RankingPool, rw: &RankWeights) -> f64 {
        let n = pool.len();
        let cos_p: Vec<f64> = (0..n).map(|k| seg.grid.cosine(&pool.grids[k])).collect();
        let cos_l: Vec<Option<f64>> = (0..n).map(|k| pool.bags[k].as_ref().map(|b| lang.cosine(b))).collect();
        let mut by_p: Vec<usize> = (0..n).collect();
        by_p.sort_by(|&a, &b| cos_p[b].partial_cmp(&cos_p[a]).unwrap().then(a.cmp(&b)));
        let mut psi_pc = 0.0;
        for &k in by_p.iter().take(rw.k_p) {
            psi_pc += cos_p[k] + rw.beta * cos_l[k].unwrap_or(rw.no_language_sim);
        }
        let mut by_l: Vec<usize> = (0..n).filter(|&k| cos_l[k].is_some()).collect();
        by_l.sort_by(|&a, &b| cos_l[b].unwrap().partial_cmp(&cos_l[a].unwrap()).unwrap().then(a.cmp(&b)));
        let mut psi_l = 0.0;
        for &k in by_l.iter().take(rw.k_l) {
            psi_l += cos_l[k].unwrap() + rw.beta * cos_p[k];
        }
        let f: f64 = (0..3).map(|d| rw.w[d] * seg.features[d]).sum();
        (-f).exp() * (psi_pc + psi_l)
    }

    #[test]
    fn score_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand_grid = |rng: &mut ChaCha8Rng| {
            let mut pairs: Vec<(u32, f32)> = (0..30).map(|_| (rng.gen_range(0..60), rng.gen_range(0.0..1.0))).collect();
            pairs.sort_by_key(|p| p.0);
            pairs.dedup_by_key(|p| p.0);
            grid_with(&pairs)
        };
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let pool = RankingPool {
                spec: GridSpec::default(),
                vocab: Vocabulary::build(["a b c d"]),
                ids: (0..n).map(|k| k.to_string()).collect(),
                scenes: (0..n).map(|k| k.to_string()).collect(),
                grids: (0..n).map(|_| rand_grid(&mut rng)).collect(),
                bags: (0..n)
                    .map(|_| rng.gen_bool(0.7).then(|| bag(&(0..4).map(|_| rng.gen_range(0..3) as f64).collect::<Vec<_>>())))
                    .collect(),
            };
            let seg = ScoredSegment {
                grid: rand_grid(&mut rng),
                features: [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)],
            };
            let lang = bag(&[1.0, 0.0, 2.0, 1.0]);
            let rw = RankWeights {
                k_p: rng.gen_range(1..4),
                k_l: rng.gen_range(1..4),
                ..Default::default()
            };
            let a = score_segment(&seg, &lang, &pool, &rw).unwrap();
            assert!((a - naive_score(&seg, &lang, &pool, &rw)).abs() < 1e-9);
        }
    }

    proptest::proptest! {
        #[test]
        fn front_normal_faces_the_sensor(seed in proptest::prelude::any::<u64>(), n in 4usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ext = Vec3::new(rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0));
            let points = (0..n)
                .map(|_| Vec3::new(rng.gen_range(-ext.x..ext.x), rng.gen_range(-ext.y..ext.y), rng.gen_range(-ext.z..ext.z)))
                .collect();
            let sensor = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let scene = Scene {
                id: "s".into(),
                cloud: PointCloud { points, sensor_origin: sensor },
                candidates: Vec::new(),
                pointing_hint: None,
            };
            let ctx = SceneContext::from_scene(&scene).unwrap();
            let view = (sensor - ctx.front_point).normalize();
            proptest::prop_assert!((ctx.front_normal.norm() - 1.0).abs() < 1e-9);
            proptest::prop_assert!(ctx.front_normal.dot(&view) >= std::f64::consts::FRAC_PI_4.cos() - 1e-9);
        }

        #[test]
        fn selection_ignores_score_scale(seed in proptest::prelude::any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(0.0..2.0)).collect()).collect();
            let scaled: Vec<Vec<f64>> = psi.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
            proptest::prop_assert_eq!(select_from_scores(&psi), select_from_scores(&scaled));
        }
    }
}
