//! Dense feed-forward stacks with exact backpropagation and AdaDelta.
//!
//! A [`Stack`] keeps all of its parameters in one flat buffer. Each layer
//! stores its weights input-major (row `i` holds the weights leaving input
//! `i`), followed by its bias, so that zero inputs can be skipped in both
//! passes. Checkpoints write weights in the conventional output-major order.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    RectifiedLinear,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::RectifiedLinear => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::RectifiedLinear),
            1 => Ok(Activation::Identity),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Borrowed view of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ParamBlock<'a> {
    pub spec: LayerSpec,
    weights: &'a [f64],
    pub bias: &'a [f64],
}

impl ParamBlock<'_> {
    /// Weight from input `i` to output `o`.
    pub fn weight(&self, o: usize, i: usize) -> f64 {
        self.weights[i * self.spec.out_dim + o]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Outputs of every layer of a forward pass; `0` is the input.
pub type Activations = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    specs: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Stack {
    /// Zero-initialized stack; the dimension chain must be consistent.
    pub fn new(specs: &[LayerSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("a stack needs at least one layer".into()));
        }
        for s in specs {
            if s.in_dim == 0 || s.out_dim == 0 {
                return Err(Error::Config(format!("layer dims must be positive: {s:?}")));
            }
        }
        for w in specs.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::DimensionMismatch {
                    expected: w[0].out_dim,
                    got: w[1].in_dim,
                });
            }
        }
        let mut offsets = Vec::with_capacity(specs.len() + 1);
        let mut total = 0;
        for s in specs {
            offsets.push(total);
            total += s.num_params();
        }
        offsets.push(total);
        Ok(Stack {
            specs: specs.to_vec(),
            offsets,
            params: vec![0.0; total],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&mut self, rng: &mut impl Rng) {
        for k in 0..self.specs.len() {
            let s = self.specs[k];
            let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
            let (w, b) = self.layer_mut(k);
            for v in w.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
            b.fill(0.0);
        }
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn depth(&self) -> usize {
        self.specs.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Flat parameter buffer (layer by layer: input-major weights, then bias).
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter range of layer `k` inside the flat buffer.
    pub fn layer_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn block(&self, k: usize) -> ParamBlock<'_> {
        let s = self.specs[k];
        let p = &self.params[self.layer_range(k)];
        let (weights, bias) = p.split_at(s.in_dim * s.out_dim);
        ParamBlock { spec: s, weights, bias }
    }

    fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let s = self.specs[k];
        let r = self.layer_range(k);
        self.params[r].split_at_mut(s.in_dim * s.out_dim)
    }

    /// Sets weight `(o, i)` of layer `k`.
    pub fn set_weight(&mut self, k: usize, o: usize, i: usize, v: f64) {
        let out = self.specs[k].out_dim;
        self.layer_mut(k).0[i * out + o] = v;
    }

    pub fn bias_mut(&mut self, k: usize) -> &mut [f64] {
        self.layer_mut(k).1
    }

    /// Copies layer `k` of `src` into layer `k` of `self`.
    pub fn copy_layer_from(&mut self, k: usize, src: &Stack, src_k: usize) -> Result<()> {
        if self.specs[k] != src.specs[src_k] {
            return Err(Error::DimensionMismatch {
                expected: self.specs[k].num_params(),
                got: src.specs[src_k].num_params(),
            });
        }
        let r = self.layer_range(k);
        self.params[r].copy_from_slice(&src.params[src.layer_range(src_k)]);
        Ok(())
    }

    fn layer_forward(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let b = self.block(k);
        let out = b.spec.out_dim;
        let mut z = b.bias.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, &b.weights[i * out..(i + 1) * out], &mut z);
            }
        }
        if b.spec.activation == Activation::RectifiedLinear {
            for v in &mut z {
                // at exactly zero the inactive branch is taken
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        z
    }

    /// Forward pass through the first `depth` layers.
    pub fn forward_to(&self, x: &[f64], depth: usize) -> Result<Activations> {
        if x.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        let mut acts = Vec::with_capacity(depth + 1);
        acts.push(x.to_vec());
        for k in 0..depth.min(self.depth()) {
            let next = self.layer_forward(k, &acts[k]);
            acts.push(next);
        }
        Ok(acts)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Activations> {
        self.forward_to(x, self.depth())
    }

    /// Output of the whole stack.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.pop().expect("at least the input"))
    }

    /// Reverse pass over the layers covered by `acts` (which may come from
    /// [`Stack::forward_to`]). Parameter gradients are added into `grads`,
    /// a buffer shaped like [`Stack::params`]. Returns the gradient with
    /// respect to the input when `want_input` is set.
    pub fn backward(&self, acts: &Activations, upstream: &[f64], grads: &mut [f64], want_input: bool) -> Result<Option<Vec<f64>>> {
        let depth = acts.len() - 1;
        if depth == 0 || depth > self.depth() {
            return Err(Error::DimensionMismatch {
                expected: self.depth(),
                got: depth,
            });
        }
        if upstream.len() != self.specs[depth - 1].out_dim {
            return Err(Error::DimensionMismatch {
                expected: self.specs[depth - 1].out_dim,
                got: upstream.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let mut delta = upstream.to_vec();
        for k in (0..depth).rev() {
            let s = self.specs[k];
            let out = &acts[k + 1];
            if s.activation == Activation::RectifiedLinear {
                for (d, &a) in delta.iter_mut().zip(out) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &acts[k];
            let r = self.layer_range(k);
            let (gw, gb) = grads[r].split_at_mut(s.in_dim * s.out_dim);
            for (gbo, d) in gb.iter_mut().zip(&delta) {
                *gbo += d;
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    axpy(xi, &delta, &mut gw[i * s.out_dim..(i + 1) * s.out_dim]);
                }
            }
            if k == 0 && !want_input {
                return Ok(None);
            }
            let b = self.block(k);
            let next: Vec<f64> = (0..s.in_dim)
                .map(|i| dot(&b.weights[i * s.out_dim..(i + 1) * s.out_dim], &delta))
                .collect();
            delta = next;
        }
        Ok(Some(delta))
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.specs.len() as u32).to_le_bytes())?;
        for (k, s) in self.specs.iter().enumerate() {
            w.write_all(&(s.in_dim as u32).to_le_bytes())?;
            w.write_all(&(s.out_dim as u32).to_le_bytes())?;
            w.write_all(&[s.activation.code()])?;
            let b = self.block(k);
            for o in 0..s.out_dim {
                for i in 0..s.in_dim {
                    w.write_all(&b.weight(o, i).to_le_bytes())?;
                }
            }
            for v in b.bias {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let n = read_u32(r)? as usize;
        if n == 0 || n > 64 {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let mut specs = Vec::with_capacity(n);
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let in_dim = read_u32(r)? as usize;
            let out_dim = read_u32(r)? as usize;
            let mut code = [0u8];
            r.read_exact(&mut code).map_err(truncated)?;
            let spec = LayerSpec::new(in_dim, out_dim, Activation::from_code(code[0])?);
            let mut vals = vec![0.0; spec.num_params()];
            for v in vals.iter_mut() {
                *v = read_f64(r)?;
            }
            specs.push(spec);
            blocks.push(vals);
        }
        let mut stack = Stack::new(&specs)?;
        for (k, vals) in blocks.into_iter().enumerate() {
            let s = specs[k];
            let (w, b) = vals.split_at(s.in_dim * s.out_dim);
            for o in 0..s.out_dim {
                for i in 0..s.in_dim {
                    stack.set_weight(k, o, i, w[o * s.in_dim + i]);
                }
            }
            stack.bias_mut(k).copy_from_slice(b);
        }
        if stack.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(stack)
    }
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint: {e}"))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}

/// AdaDelta accumulators for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaDeltaState {
    pub rho: f64,
    pub eps: f64,
    pub eg2: Vec<f64>,
    pub edx2: Vec<f64>,
}

impl AdaDeltaState {
    pub fn new(n: usize, rho: f64, eps: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) || eps <= 0.0 {
            return Err(Error::Config(format!("AdaDelta needs 0 < rho < 1 and eps > 0 (rho={rho}, eps={eps})")));
        }
        Ok(AdaDeltaState {
            rho,
            eps,
            eg2: vec![0.0; n],
            edx2: vec![0.0; n],
        })
    }

    /// One update; `params` is left untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.eg2.len() || grads.len() != self.eg2.len() {
            return Err(Error::DimensionMismatch {
                expected: self.eg2.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let (rho, eps) = (self.rho, self.eps);
        for k in 0..params.len() {
            let g = grads[k];
            let eg2 = rho * self.eg2[k] + (1.0 - rho) * g * g;
            let dx = -((self.edx2[k] + eps).sqrt() / (eg2 + eps).sqrt()) * g;
            self.eg2[k] = eg2;
            self.edx2[k] = rho * self.edx2[k] + (1.0 - rho) * dx * dx;
            params[k] += dx;
        }
        Ok(())
    }
}

/// Sums per-item losses and gradients over `items` in fixed-size chunks.
///
/// Chunks may run on different threads, but every chunk accumulates in item
/// order and chunk results are merged in chunk order, so the result does not
/// depend on the number of workers.
pub fn reduce_chunks<I, G>(
    items: &[I],
    chunk: usize,
    init: impl Fn() -> G + Sync,
    f: impl Fn(&I, &mut G) -> Result<f64> + Sync,
    merge: impl Fn(&mut G, &G),
) -> Result<(f64, G)>
where
    I: Sync,
    G: Send,
{
    use rayon::prelude::*;
    let parts: Vec<Result<(f64, G)>> = items
        .par_chunks(chunk.max(1))
        .map(|c| {
            let mut g = init();
            let mut loss = 0.0;
            for it in c {
                loss += f(it, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    let mut acc = init();
    for p in parts {
        let (l, g) = p?;
        total += l;
        merge(&mut acc, &g);
    }
    Ok((total, acc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// coordinate with the largest error
    pub worst: usize,
}

/// Relative error below which a gradient entry pair is treated as matching
/// regardless of magnitude.
const REL_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// Half of the sampled coordinates are drawn among those with a nonzero
/// analytic gradient, the rest uniformly, so sparse gradients are still
/// exercised. The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    coords: usize,
    step: f64,
    rng: &mut impl Rng,
) -> GradCheck {
    assert_eq!(params.len(), analytic.len());
    let nonzero: Vec<usize> = (0..analytic.len()).filter(|&k| analytic[k] != 0.0).collect();
    let mut picks = Vec::with_capacity(coords);
    for j in 0..coords {
        if j % 2 == 0 && !nonzero.is_empty() {
            picks.push(nonzero[rng.gen_range(0..nonzero.len())]);
        } else {
            picks.push(rng.gen_range(0..params.len()));
        }
    }
    let mut p = params.to_vec();
    let mut worst = (0.0, 0);
    for &k in &picks {
        let orig = p[k];
        p[k] = orig + step;
        let up = loss(&p);
        p[k] = orig - step;
        let down = loss(&p);
        p[k] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > worst.0 {
            worst = (err, k);
        }
    }
    GradCheck {
        max_rel_error: worst.0,
        coords_checked: picks.len(),
        worst: worst.1,
    }
}
