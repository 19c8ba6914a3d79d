//! Greedy layer-wise pre-training with sparse de-noising autoencoders.
//!
//! Each hidden layer is trained as the encoder of an autoencoder whose
//! decoder is a fresh identity-activation layer. The input is corrupted by
//! masking noise and the loss is `1/2 |x_hat - x|^2 + sparsity * |h|_1`
//! against the clean input.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{reduce_chunks, Activation, AdaDeltaState, LayerSpec, Stack};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdaConfig {
    pub epochs: usize,
    pub noise_rate: f64,
    pub sparsity: f64,
    pub batch_size: usize,
    pub rho: f64,
    pub eps: f64,
}

impl Default for SdaConfig {
    fn default() -> Self {
        SdaConfig {
            epochs: 50,
            noise_rate: 0.2,
            sparsity: 1e-3,
            batch_size: 64,
            rho: 0.95,
            eps: 1e-6,
        }
    }
}

/// Copy of `x` with each coordinate zeroed with probability `rate`.
pub fn mask(x: &[f64], rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return x.to_vec();
    }
    x.iter().map(|&v| if rng.gen_bool(rate) { 0.0 } else { v }).collect()
}

/// Reconstruction loss of one sample; adds encoder and decoder gradients
/// when buffers are given.
pub fn autoencoder_loss(
    enc: &Stack,
    dec: &Stack,
    clean: &[f64],
    noisy: &[f64],
    sparsity: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<f64> {
    let e_acts = enc.forward(noisy)?;
    let h = e_acts.last().expect("output");
    let d_acts = dec.forward(h)?;
    let xr = d_acts.last().expect("output");
    if xr.len() != clean.len() {
        return Err(Error::DimensionMismatch {
            expected: clean.len(),
            got: xr.len(),
        });
    }
    let diff: Vec<f64> = xr.iter().zip(clean).map(|(a, b)| a - b).collect();
    let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>() + sparsity * h.iter().map(|v| v.abs()).sum::<f64>();
    if let Some((ge, gd)) = grads {
        let mut gh = dec.backward(&d_acts, &diff, gd, true)?.expect("input grad");
        for (g, &v) in gh.iter_mut().zip(h) {
            *g += sparsity * if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        enc.backward(&e_acts, &gh, ge, false)?;
    }
    Ok(loss)
}

/// Mean reconstruction loss of clean inputs (no masking, no sparsity term).
pub fn reconstruction_error(enc: &Stack, dec: &Stack, data: &[Vec<f64>]) -> Result<f64> {
    let mut s = 0.0;
    for x in data {
        s += autoencoder_loss(enc, dec, x, x, 0.0, None)?;
    }
    Ok(s / data.len().max(1) as f64)
}

/// Trains a single-layer encoder `enc` with a fresh decoder. Returns the
/// decoder and the mean training loss of each epoch.
pub fn train_autoencoder(enc: &mut Stack, data: &[Vec<f64>], cfg: &SdaConfig, rng: &mut impl Rng) -> Result<(Stack, Vec<f64>)> {
    if enc.depth() != 1 {
        return Err(Error::Config("autoencoder encoder must be a single layer".into()));
    }
    let s = enc.specs()[0];
    let mut dec = Stack::new(&[LayerSpec::new(s.out_dim, s.in_dim, Activation::Identity)])?;
    dec.init(rng);
    let mut opt_e = AdaDeltaState::new(enc.num_params(), cfg.rho, cfg.eps)?;
    let mut opt_d = AdaDeltaState::new(dec.num_params(), cfg.rho, cfg.eps)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            // noise is drawn serially so it does not depend on scheduling
            let samples: Vec<(usize, Vec<f64>)> = batch.iter().map(|&i| (i, mask(&data[i], cfg.noise_rate, rng))).collect();
            let (loss, (mut ge, mut gd)) = reduce_chunks(
                &samples,
                16,
                || (enc.zero_grads(), dec.zero_grads()),
                |(i, noisy), (ge, gd)| autoencoder_loss(enc, &dec, &data[*i], noisy, cfg.sparsity, Some((ge, gd))),
                |a, b| {
                    a.0.iter_mut().zip(&b.0).for_each(|(x, y)| *x += y);
                    a.1.iter_mut().zip(&b.1).for_each(|(x, y)| *x += y);
                },
            )?;
            let inv = 1.0 / batch.len() as f64;
            ge.iter_mut().for_each(|g| *g *= inv);
            gd.iter_mut().for_each(|g| *g *= inv);
            opt_e.step(enc.params_mut(), &ge)?;
            opt_d.step(dec.params_mut(), &gd)?;
            epoch_loss += loss;
        }
        history.push(epoch_loss / data.len().max(1) as f64);
    }
    Ok((dec, history))
}

/// Greedily pre-trains the first `layers` layers of `stack` on `data`.
/// Returns the per-epoch loss history of each layer.
pub fn pretrain_stack(stack: &mut Stack, layers: usize, data: &[Vec<f64>], cfg: &SdaConfig, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Err(Error::EmptyTrainingPool);
    }
    let mut inputs: Vec<Vec<f64>> = data.to_vec();
    let mut histories = Vec::new();
    for k in 0..layers.min(stack.depth()) {
        let mut enc = Stack::new(&[stack.specs()[k]])?;
        enc.copy_layer_from(0, stack, k)?;
        let (_, hist) = train_autoencoder(&mut enc, &inputs, cfg, rng)?;
        stack.copy_layer_from(k, &enc, 0)?;
        histories.push(hist);
        if k + 1 < layers {
            inputs = inputs.iter().map(|x| enc.apply(x)).collect::<Result<_>>()?;
        }
    }
    Ok(histories)
}
