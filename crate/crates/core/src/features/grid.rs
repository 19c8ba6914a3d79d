//! Real-valued occupancy grids over a part and its surrounding scene.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{centroid, Frame, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub cells_per_side: usize,
    /// meters
    pub cell_size: f64,
    /// exponential rate per meter for spreading counts to the 26 neighbors
    pub smoothing_decay: f64,
    pub context_value: f64,
    /// meters; scene points closer than this to the part mark context cells
    pub context_radius: f64,
    /// fill cells behind context cells along rays from the sensor
    pub ray_fill: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            cells_per_side: 100,
            cell_size: 0.0025,
            smoothing_decay: 2.0 / 0.0025,
            context_value: 0.2,
            context_radius: 0.05,
            ray_fill: true,
        }
    }
}

impl GridSpec {
    pub fn check(&self) -> Result<()> {
        let ok = self.cells_per_side >= 1
            && self.cell_size > 0.0
            && self.smoothing_decay >= 0.0
            && (0.0..=1.0).contains(&self.context_value)
            && self.context_radius >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid grid spec {self:?}")))
        }
    }

    pub fn cell_count(&self) -> usize {
        self.cells_per_side.pow(3)
    }

    /// Continuous grid coordinates of a point given in the grid's local frame
    /// (origin at the grid center, meters).
    #[inline]
    pub fn grid_coords(&self, p: &Vec3) -> Vec3 {
        let half = self.cells_per_side as f64 / 2.0;
        p.map(|c| c / self.cell_size + half)
    }

    #[inline]
    pub fn cell_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let g = self.grid_coords(p);
        let n = self.cells_per_side as f64;
        if g.iter().all(|&c| c >= 0.0 && c < n) {
            Some([g.x as usize, g.y as usize, g.z as usize])
        } else {
            None
        }
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        let n = self.cells_per_side;
        (c[0] * n + c[1]) * n + c[2]
    }

    #[inline]
    pub fn cell(&self, index: usize) -> [usize; 3] {
        let n = self.cells_per_side;
        [index / (n * n), (index / n) % n, index % n]
    }
}

/// Dense grid in x-major order; values lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl OccupancyGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        OccupancyGrid {
            values: vec![0.0; spec.cell_count()],
            spec,
        }
    }

    pub fn get(&self, c: [usize; 3]) -> f64 {
        self.values[self.spec.index(c)]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_sparse(&self) -> SparseGrid {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, &v) in self.values.iter().enumerate() {
            if v != 0.0 {
                indices.push(i as u32);
                values.push(v as f32);
            }
        }
        SparseGrid::new(indices, values)
    }
}

/// Nonzero cells of a grid, sorted by cell index. Used where many full-size
/// grids must be held at once.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    indices: Vec<u32>,
    values: Vec<f32>,
    norm: f64,
}

impl SparseGrid {
    fn new(indices: Vec<u32>, values: Vec<f32>) -> Self {
        let norm = values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        SparseGrid { indices, values, norm }
    }

    /// Grid from `(cell, value)` pairs sorted by cell with no repeats.
    pub fn from_pairs(pairs: Vec<(u32, f32)>) -> Self {
        debug_assert!(pairs.windows(2).all(|w| w[0].0 < w[1].0));
        let (indices, values) = pairs.into_iter().unzip();
        SparseGrid::new(indices, values)
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn dot(&self, o: &SparseGrid) -> f64 {
        let (mut i, mut j, mut s) = (0, 0, 0.0);
        while i < self.indices.len() && j < o.indices.len() {
            match self.indices[i].cmp(&o.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    s += self.values[i] as f64 * o.values[j] as f64;
                    i += 1;
                    j += 1;
                }
            }
        }
        s
    }

    /// Cosine similarity; 0 when either grid is empty.
    pub fn cosine(&self, o: &SparseGrid) -> f64 {
        if self.norm == 0.0 || o.norm == 0.0 {
            return 0.0;
        }
        self.dot(o) / (self.norm * o.norm)
    }
}

const OFFSETS: [i64; 3] = [-1, 0, 1];

fn neighbor_weights(spec: &GridSpec) -> [f64; 27] {
    let mut w = [0.0; 27];
    let mut k = 0;
    for dx in OFFSETS {
        for dy in OFFSETS {
            for dz in OFFSETS {
                let d = ((dx * dx + dy * dy + dz * dz) as f64).sqrt() * spec.cell_size;
                w[k] = (-spec.smoothing_decay * d).exp();
                k += 1;
            }
        }
    }
    w
}

/// Voxelizes a part given in grid-local coordinates (meters, origin at the
/// grid center, axes already aligned with the part frame).
///
/// `context` holds the scene points that do not belong to the part, and
/// `sensor` the capture location in the same coordinates.
pub fn voxelize_local(part: &[Vec3], context: &[Vec3], sensor: &Vec3, spec: &GridSpec) -> Result<OccupancyGrid> {
    spec.check()?;
    if part.is_empty() {
        return Err(Error::EmptyPart);
    }
    let n = spec.cells_per_side as i64;

    // integer counts first so the result does not depend on point order
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for p in part {
        if let Some(c) = spec.cell_of(p) {
            *counts.entry(spec.index(c)).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyPart);
    }

    let weights = neighbor_weights(spec);
    let mut grid = OccupancyGrid::zeros(*spec);
    for (&idx, &count) in &counts {
        let c = spec.cell(idx);
        let mut k = 0;
        for dx in OFFSETS {
            for dy in OFFSETS {
                for dz in OFFSETS {
                    let (x, y, z) = (c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz);
                    if (0..n).contains(&x) && (0..n).contains(&y) && (0..n).contains(&z) {
                        let j = spec.index([x as usize, y as usize, z as usize]);
                        grid.values[j] += count as f64 * weights[k];
                    }
                    k += 1;
                }
            }
        }
    }
    let max = grid.max();
    for v in &mut grid.values {
        *v /= max;
    }

    let context_cells = context_cells(part, context, spec);
    let cv = spec.context_value;
    for &idx in &context_cells {
        grid.values[idx] = grid.values[idx].max(cv);
    }
    if spec.ray_fill {
        let s = spec.grid_coords(sensor);
        for &idx in &context_cells {
            let c = spec.cell(idx);
            let start = Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5);
            traverse(start, start - s, spec.cells_per_side, |j| {
                grid.values[j] = grid.values[j].max(cv);
            });
        }
    }
    Ok(grid)
}

/// Cells holding at least one scene point within `context_radius` of some
/// part point.
fn context_cells(part: &[Vec3], context: &[Vec3], spec: &GridSpec) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let r = spec.context_radius;
    if r <= 0.0 || context.is_empty() {
        return out;
    }
    let key = |p: &Vec3| -> [i64; 3] { [(p.x / r).floor() as i64, (p.y / r).floor() as i64, (p.z / r).floor() as i64] };
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in part.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(i);
    }
    let r2 = r * r;
    for q in context {
        let Some(cell) = spec.cell_of(q) else { continue };
        let k = key(q);
        let near = OFFSETS.iter().any(|&dx| {
            OFFSETS.iter().any(|&dy| {
                OFFSETS.iter().any(|&dz| {
                    buckets
                        .get(&[k[0] + dx, k[1] + dy, k[2] + dz])
                        .is_some_and(|b| b.iter().any(|&i| (part[i] - q).norm_squared() <= r2))
                })
            })
        });
        if near {
            out.insert(spec.index(cell));
        }
    }
    out
}

/// Visits every cell crossed by the ray `start + t * dir`, `t >= 0`, until
/// it leaves the `n`-cell cube. Coordinates are in cell units.
fn traverse(start: Vec3, dir: Vec3, n: usize, mut visit: impl FnMut(usize)) {
    let mut cell = [start.x.floor() as i64, start.y.floor() as i64, start.z.floor() as i64];
    let ni = n as i64;
    let inside = |c: &[i64; 3]| c.iter().all(|&v| (0..ni).contains(&v));
    if !inside(&cell) {
        return;
    }
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (cell[a] as f64 + 1.0 - start[a]) / dir[a];
            t_delta[a] = 1.0 / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (cell[a] as f64 - start[a]) / dir[a];
            t_delta[a] = -1.0 / dir[a];
        }
    }
    let flat = |c: &[i64; 3]| ((c[0] * ni + c[1]) * ni + c[2]) as usize;
    visit(flat(&cell));
    if step == [0, 0, 0] {
        return;
    }
    loop {
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        cell[a] += step[a];
        t_max[a] += t_delta[a];
        if !inside(&cell) {
            return;
        }
        visit(flat(&cell));
    }
}

/// Voxelizes the points `indices` of `cloud` in the given frame. The grid is
/// centered on the centroid of those points; every other scene point is
/// treated as context.
pub fn voxelize_indices(cloud: &PointCloud, indices: &[usize], frame: &Frame, spec: &GridSpec) -> Result<OccupancyGrid> {
    frame.check()?;
    if indices.is_empty() {
        return Err(Error::EmptyPart);
    }
    let center = centroid(indices.iter().map(|&i| &cloud.points[i])).ok_or(Error::EmptyPart)?;
    let mut in_part = vec![false; cloud.points.len()];
    for &i in indices {
        in_part[i] = true;
    }
    let part: Vec<Vec3> = indices.iter().map(|&i| frame.to_local(&center, &cloud.points[i])).collect();
    let context: Vec<Vec3> = cloud
        .points
        .iter()
        .zip(&in_part)
        .filter(|(_, &inp)| !inp)
        .map(|(p, _)| frame.to_local(&center, p))
        .collect();
    let sensor = frame.to_local(&center, &cloud.sensor_origin);
    voxelize_local(&part, &context, &sensor, spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompactSpec {
    /// cells per side of each compact grid
    pub side: usize,
    /// full-grid cells per coarse cell along one axis
    pub coarse_block: usize,
    /// full-grid cells per fine cell along one axis
    pub fine_block: usize,
}

impl Default for CompactSpec {
    fn default() -> Self {
        CompactSpec {
            side: 10,
            coarse_block: 10,
            fine_block: 4,
        }
    }
}

impl CompactSpec {
    pub fn flat_len(&self) -> usize {
        2 * self.side.pow(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactGridPair {
    pub coarse: OccupancyGrid,
    pub fine: OccupancyGrid,
}

impl CompactGridPair {
    /// Coarse values followed by fine values.
    pub fn flattened(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.coarse.values.len() + self.fine.values.len());
        v.extend_from_slice(&self.coarse.values);
        v.extend_from_slice(&self.fine.values);
        v
    }
}

fn block_average(full: &OccupancyGrid, side: usize, block: usize, offset: usize) -> OccupancyGrid {
    let spec = GridSpec {
        cells_per_side: side,
        cell_size: full.spec.cell_size * block as f64,
        ..full.spec
    };
    let mut out = OccupancyGrid::zeros(spec);
    let inv = 1.0 / (block * block * block) as f64;
    for bx in 0..side {
        for by in 0..side {
            for bz in 0..side {
                let mut s = 0.0;
                for x in 0..block {
                    for y in 0..block {
                        let base = full.spec.index([offset + bx * block + x, offset + by * block + y, offset + bz * block]);
                        s += full.values[base..base + block].iter().sum::<f64>();
                    }
                }
                out.values[spec.index([bx, by, bz])] = s * inv;
            }
        }
    }
    out
}

/// Block-averages a full grid into the coarse grid (whole extent) and the fine
/// grid (centered inner region). No renormalization is applied.
pub fn compact_grids(full: &OccupancyGrid, cs: &CompactSpec) -> Result<CompactGridPair> {
    let n = full.spec.cells_per_side;
    let inner = cs.side * cs.fine_block;
    if cs.side * cs.coarse_block != n || inner > n || !(n - inner).is_multiple_of(2) {
        return Err(Error::Config(format!("compact spec {cs:?} does not fit a {n}-cell grid")));
    }
    Ok(CompactGridPair {
        coarse: block_average(full, cs.side, cs.coarse_block, 0),
        fine: block_average(full, cs.side, cs.fine_block, (n - inner) / 2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> GridSpec {
        GridSpec {
            cells_per_side: 20,
            cell_size: 0.01,
            smoothing_decay: 150.0,
            context_value: 0.2,
            context_radius: 0.03,
            ray_fill: true,
        }
    }

    #[test]
    fn single_point_center() {
        let spec = GridSpec::default();
        let g = voxelize_local(&[Vec3::zeros()], &[], &Vec3::new(0.0, 0.0, 1.0), &spec).unwrap();
        assert_eq!(g.get([50, 50, 50]), 1.0);
        let face = (-spec.smoothing_decay * spec.cell_size).exp();
        for c in [[49, 50, 50], [51, 50, 50], [50, 49, 50], [50, 50, 51]] {
            assert!((g.get(c) - face).abs() < 1e-15);
        }
        assert_eq!(g.values.iter().filter(|&&v| v > 0.0).count(), 27);
    }

    #[test]
    fn empty_part_rejected() {
        let r = voxelize_local(&[], &[], &Vec3::zeros(), &GridSpec::default());
        assert!(matches!(r, Err(Error::EmptyPart)));
    }

    /// Slab test: does the ray `s + t d`, `t >= 0`, pass through the unit
    /// cell `c` over an interval of positive length?
    fn ray_hits(s: &Vec3, d: &Vec3, c: [usize; 3]) -> bool {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            let lo = c[a] as f64;
            let hi = lo + 1.0;
            if d[a] == 0.0 {
                if s[a] < lo || s[a] >= hi {
                    return false;
                }
            } else {
                let (ta, tb) = ((lo - s[a]) / d[a], (hi - s[a]) / d[a]);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        t1 > t0
    }

    /// Naive re-implementation: every point against every cell.
    fn oracle(part: &[Vec3], context: &[Vec3], sensor: &Vec3, spec: &GridSpec) -> Vec<f64> {
        let n = spec.cells_per_side;
        let cs = spec.cell_size;
        let half = n as f64 / 2.0;
        let cell_of = |p: &Vec3| -> Option<[usize; 3]> {
            let g = [p.x / cs + half, p.y / cs + half, p.z / cs + half];
            if g.iter().all(|&v| v >= 0.0 && v < n as f64) {
                Some([g[0].floor() as usize, g[1].floor() as usize, g[2].floor() as usize])
            } else {
                None
            }
        };
        let mut v = vec![0.0; n * n * n];
        let cells: Vec<[usize; 3]> = part.iter().filter_map(cell_of).collect();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    let mut s = 0.0;
                    for c in &cells {
                        let d = [x as f64 - c[0] as f64, y as f64 - c[1] as f64, z as f64 - c[2] as f64];
                        if d.iter().all(|e| e.abs() <= 1.0) {
                            let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() * cs;
                            s += (-spec.smoothing_decay * dist).exp();
                        }
                    }
                    v[(x * n + y) * n + z] = s;
                }
            }
        }
        let m = v.iter().cloned().fold(0.0, f64::max);
        v.iter_mut().for_each(|e| *e /= m);
        let mut ctx = Vec::new();
        for q in context {
            if part.iter().any(|p| (p - q).norm() <= spec.context_radius) {
                if let Some(c) = cell_of(q) {
                    ctx.push(c);
                }
            }
        }
        let sg = Vec3::new(sensor.x / cs + half, sensor.y / cs + half, sensor.z / cs + half);
        let mut fill = vec![false; n * n * n];
        for c in &ctx {
            fill[(c[0] * n + c[1]) * n + c[2]] = true;
            let start = Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5);
            let d = start - sg;
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        if ray_hits(&start, &d, [x, y, z]) {
                            fill[(x * n + y) * n + z] = true;
                        }
                    }
                }
            }
        }
        for (e, f) in v.iter_mut().zip(&fill) {
            if *f {
                *e = e.max(spec.context_value);
            }
        }
        v
    }

    /// A 50-point blob in front of a wall, seen from a sensor in front.
    fn wall_scene(rng: &mut impl Rng) -> (Vec<Vec3>, Vec<Vec3>, Vec3) {
        let part: Vec<Vec3> = (0..50)
            .map(|_| Vec3::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), rng.gen_range(0.0..0.02)))
            .collect();
        let mut wall = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                let x = -0.1 + i as f64 * 0.005 + rng.gen_range(0.0..0.001);
                let y = -0.1 + j as f64 * 0.005 + rng.gen_range(0.0..0.001);
                wall.push(Vec3::new(x, y, -0.012));
            }
        }
        let sensor = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.8);
        (part, wall, sensor)
    }

    #[test]
    fn wall_scene_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = small_spec();
        for _ in 0..3 {
            let (part, wall, sensor) = wall_scene(&mut rng);
            let g = voxelize_local(&part, &wall, &sensor, &spec).unwrap();
            let o = oracle(&part, &wall, &sensor, &spec);
            for (a, b) in g.values.iter().zip(&o) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            assert_eq!(g.max(), 1.0);
            // wall row is z = -0.012 -> cell 8; the cells below it are behind the wall
            let behind = (0..20).flat_map(|x| (0..20).map(move |y| [x, y, 7])).filter(|&c| g.get(c) == 0.2).count();
            assert!(behind > 0);
            let far = g.get([0, 0, 8]);
            assert_eq!(far, 0.0, "wall beyond the context radius stays empty");
        }
    }

    #[test]
    fn invariant_to_point_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut part, wall, sensor) = wall_scene(&mut rng);
        let spec = small_spec();
        let a = voxelize_local(&part, &wall, &sensor, &spec).unwrap();
        part.reverse();
        part.swap(3, 17);
        let b = voxelize_local(&part, &wall, &sensor, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn follows_part_under_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (part, wall, sensor) = wall_scene(&mut rng);
        let mut points = part.clone();
        points.extend(&wall);
        let indices: Vec<usize> = (0..part.len()).collect();
        let spec = small_spec();
        let cloud = PointCloud {
            points: points.clone(),
            sensor_origin: sensor,
        };
        let shift = Vec3::new(1.25, -0.5, 2.0);
        let moved = PointCloud {
            points: points.iter().map(|p| p + shift).collect(),
            sensor_origin: sensor + shift,
        };
        let frame = Frame::identity();
        let a = voxelize_indices(&cloud, &indices, &frame, &spec).unwrap();
        let b = voxelize_indices(&moved, &indices, &frame, &spec).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn compact_of_uniform_is_uniform() {
        let spec = GridSpec::default();
        let full = OccupancyGrid {
            values: vec![1.0; spec.cell_count()],
            spec,
        };
        let c = compact_grids(&full, &CompactSpec::default()).unwrap();
        assert!(c.flattened().iter().all(|&v| v == 1.0));
        assert_eq!(c.flattened().len(), 2000);
    }

    #[test]
    fn compact_single_cell() {
        let spec = GridSpec::default();
        let mut full = OccupancyGrid::zeros(spec);
        full.values[spec.index([3, 4, 5])] = 1.0;
        let c = compact_grids(&full, &CompactSpec::default()).unwrap();
        assert_eq!(c.coarse.get([0, 0, 0]), 1.0 / 1000.0);
        assert_eq!(c.coarse.values.iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(c.fine.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compact_matches_naive_block_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = GridSpec::default();
        let part: Vec<Vec3> = (0..400)
            .map(|_| Vec3::new(rng.gen_range(-0.06..0.06), rng.gen_range(-0.03..0.03), rng.gen_range(-0.01..0.01)))
            .collect();
        let full = voxelize_local(&part, &[], &Vec3::new(0.0, 0.0, 1.0), &spec).unwrap();
        let c = compact_grids(&full, &CompactSpec::default()).unwrap();
        for bx in 0..10 {
            for by in 0..10 {
                for bz in 0..10 {
                    let (mut coarse, mut fine) = (0.0, 0.0);
                    for x in 0..10 {
                        for y in 0..10 {
                            for z in 0..10 {
                                coarse += full.get([bx * 10 + x, by * 10 + y, bz * 10 + z]);
                            }
                        }
                    }
                    for x in 0..4 {
                        for y in 0..4 {
                            for z in 0..4 {
                                fine += full.get([30 + bx * 4 + x, 30 + by * 4 + y, 30 + bz * 4 + z]);
                            }
                        }
                    }
                    assert!((c.coarse.get([bx, by, bz]) - coarse / 1000.0).abs() < 1e-12);
                    assert!((c.fine.get([bx, by, bz]) - fine / 64.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sparse_cosine_of_self_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (part, wall, sensor) = wall_scene(&mut rng);
        let g = voxelize_local(&part, &wall, &sensor, &small_spec()).unwrap().to_sparse();
        assert!((g.cosine(&g) - 1.0).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn values_in_unit_range_with_peak_one(seed in proptest::prelude::any::<u64>(), n in 1usize..60, m in 0usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pt = |r: f64| Vec3::new(rng.gen_range(-r..r), rng.gen_range(-r..r), rng.gen_range(-r..r));
            let part: Vec<Vec3> = (0..n).map(|_| pt(0.05)).collect();
            let context: Vec<Vec3> = (0..m).map(|_| pt(0.09)).collect();
            let g = voxelize_local(&part, &context, &Vec3::new(0.0, -0.5, 0.3), &small_spec()).unwrap();
            proptest::prop_assert!(g.values.iter().all(|v| (0.0..=1.0).contains(v)));
            proptest::prop_assert_eq!(g.values.iter().cloned().fold(0.0, f64::max), 1.0);
        }
    }
}
