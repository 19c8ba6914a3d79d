//! Pre-embedded trajectory library and single-projection inference.
//!
//! The index is an exact cache: inference embeds the query once and scans
//! the stored rows, which returns the same trajectory as embedding every
//! library member per query.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::features::trajectory_vector;
use crate::model::EmbeddingModel;
use crate::nn::{dot, read_f64, read_u32};

const MAGIC: &[u8; 8] = b"DMEINDX\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryIndex {
    pub ids: Vec<String>,
    pub dim: usize,
    /// row-major, one row per id
    pub matrix: Vec<f64>,
    /// fingerprint of the model that produced the rows
    pub fingerprint: String,
}

impl TrajectoryIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Row with the largest inner product with `u`; ties go to the lower row.
    pub fn scan(&self, u: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..self.len() {
            let s = dot(u, self.row(i));
            if s > best.1 {
                best = (i, s);
            }
        }
        best
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        write_str(w, &self.fingerprint)?;
        for id in &self.ids {
            write_str(w, id)?;
        }
        for v in &self.matrix {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated index header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a trajectory index file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let n = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let fingerprint = read_str(r)?;
        let ids = (0..n).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
        let matrix = (0..n * dim).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        Ok(TrajectoryIndex {
            ids,
            dim,
            matrix,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_from(&mut f)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated index".into()))?;
    String::from_utf8(b).map_err(|_| Error::Format("index string is not UTF-8".into()))
}

/// Embeds already-featurized trajectories.
pub fn build_index_from_vectors(model: &EmbeddingModel, ids: Vec<String>, vectors: &[Vec<f64>]) -> Result<TrajectoryIndex> {
    if ids.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if ids.len() != vectors.len() {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            got: vectors.len(),
        });
    }
    let mut matrix = Vec::with_capacity(ids.len() * model.embed_dim());
    for v in vectors {
        matrix.extend(model.embed_traj(v)?);
    }
    Ok(TrajectoryIndex {
        ids,
        dim: model.embed_dim(),
        matrix,
        fingerprint: model.fingerprint(),
    })
}

pub fn build_index(model: &EmbeddingModel, trajectories: &[&Trajectory]) -> Result<TrajectoryIndex> {
    let vectors = trajectories
        .iter()
        .map(|t| trajectory_vector(t, &model.features.trajectory))
        .collect::<Result<Vec<_>>>()?;
    build_index_from_vectors(model, trajectories.iter().map(|t| t.id.clone()).collect(), &vectors)
}

/// An index checked against the model it will be queried with.
#[derive(Debug, Clone, Copy)]
pub struct Retriever<'a> {
    pub index: &'a TrajectoryIndex,
    pub model: &'a EmbeddingModel,
}

impl<'a> Retriever<'a> {
    pub fn new(index: &'a TrajectoryIndex, model: &'a EmbeddingModel) -> Result<Self> {
        let fp = model.fingerprint();
        if fp != index.fingerprint {
            return Err(Error::FingerprintMismatch {
                index: index.fingerprint.clone(),
                model: fp,
            });
        }
        if index.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        Ok(Retriever { index, model })
    }

    /// Best library row for featurized part `pc` and word bag `lang`.
    pub fn infer(&self, pc: &[f64], lang: &[f64]) -> Result<(usize, f64)> {
        let u = self.model.embed_task(pc, lang)?;
        Ok(self.index.scan(&u))
    }

    pub fn infer_id(&self, pc: &[f64], lang: &[f64]) -> Result<(&'a str, f64)> {
        let (i, s) = self.infer(pc, lang)?;
        Ok((self.index.ids[i].as_str(), s))
    }
}

/// One-off inference; verifies the fingerprint on every call.
pub fn infer(index: &TrajectoryIndex, model: &EmbeddingModel, pc: &[f64], lang: &[f64]) -> Result<(String, f64)> {
    let r = Retriever::new(index, model)?;
    r.infer_id(pc, lang).map(|(id, s)| (id.to_owned(), s))
}

/// Reference inference that embeds every library trajectory for each
/// query. Returns the row position and similarity.
pub fn infer_exhaustive(model: &EmbeddingModel, library: &[Vec<f64>], pc: &[f64], lang: &[f64]) -> Result<(usize, f64)> {
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    let u = model.embed_task(pc, lang)?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, t) in library.iter().enumerate() {
        let s = dot(&u, &model.embed_traj(t)?);
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub reps: usize,
    /// seconds
    pub total: f64,
    pub mean: f64,
    pub median: f64,
    pub p99: f64,
}

impl LatencyStats {
    pub fn from_samples(mut s: Vec<f64>) -> Self {
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let total: f64 = s.iter().sum();
        let at = |q: f64| if n == 0 { 0.0 } else { s[((q * n as f64).ceil() as usize).clamp(1, n) - 1] };
        LatencyStats {
            reps: n,
            total,
            mean: if n == 0 { 0.0 } else { total / n as f64 },
            median: at(0.5),
            p99: at(0.99),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub library: usize,
    pub indexed: LatencyStats,
    pub exhaustive: LatencyStats,
    /// ratio of mean exhaustive latency to mean indexed latency
    pub speedup: f64,
    /// repetitions where both methods agreed
    pub agreements: usize,
}

impl BenchReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("method\tlibrary\treps\tmean_ms\tmedian_ms\tp99_ms\ttotal_ms\n");
        for (name, l) in [("indexed", &self.indexed), ("exhaustive", &self.exhaustive)] {
            s.push_str(&format!(
                "{name}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\n",
                self.library,
                l.reps,
                l.mean * 1e3,
                l.median * 1e3,
                l.p99 * 1e3,
                l.total * 1e3
            ));
        }
        s.push_str(&format!("# speedup\t{:.2}\n# agreement\t{}/{}\n", self.speedup, self.agreements, self.indexed.reps));
        s
    }
}

/// Times `reps` queries (cycling through `queries`) with both methods.
/// Featurization is excluded; one untimed warm-up query runs first.
pub fn bench(r: &Retriever<'_>, library: &[Vec<f64>], queries: &[(Vec<f64>, Vec<f64>)], reps: usize) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(Error::Config("bench needs at least one query".into()));
    }
    r.infer(&queries[0].0, &queries[0].1)?;
    infer_exhaustive(r.model, library, &queries[0].0, &queries[0].1)?;
    let mut fast = Vec::with_capacity(reps);
    let mut slow = Vec::with_capacity(reps);
    let mut agreements = 0;
    for k in 0..reps {
        let (pc, lang) = &queries[k % queries.len()];
        let t = Instant::now();
        let a = r.infer(pc, lang)?;
        fast.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let b = infer_exhaustive(r.model, library, pc, lang)?;
        slow.push(t.elapsed().as_secs_f64());
        agreements += (a.0 == b.0) as usize;
    }
    let indexed = LatencyStats::from_samples(fast);
    let exhaustive = LatencyStats::from_samples(slow);
    Ok(BenchReport {
        library: library.len(),
        indexed,
        exhaustive,
        speedup: exhaustive.mean / indexed.mean.max(f64::MIN_POSITIVE),
        agreements,
    })
}
