//! Autoencoder training.
//!
//! The decoder mirrors the encoder exactly: dense latent→features, ReLU,
//! reshape, then three stride-2 transposed convolutions (32→16→8→M, 4×4
//! kernels, padding 1) ending in a per-pixel softmax over classes. The loss
//! is mean per-pixel cross-entropy between the softmax output and the one-hot
//! input, minimized with Adam. After training the decoder is dropped and only
//! the encoder half is returned.
//!
//! Determinism: initialization, epoch shuffles, and batch order all come from
//! substreams of the configured seed, and per-sample gradients are reduced in
//! fixed chunk order, so a training run is bit-reproducible at any rayon
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::RngStream;
use crate::sensor::SemanticFootprint;
use crate::world::N_CLASSES;

use super::layers::{
    conv_backward, conv_forward, dense_backward, dense_forward, relu, relu_backward, softmax_ce,
    tconv_backward, tconv_forward,
};
use super::{init_blocks, EncShape, EncoderModel, KERNEL, LATENT_DIM, PAD, STRIDE, WIDTHS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Encoder shape plus the eight mirrored decoder blocks. The flat parameter
/// buffer starts with the encoder blocks in file order, so extracting the
/// trained encoder is a prefix copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaeShape {
    pub enc: EncShape,
}

impl CaeShape {
    pub fn block_lens(&self) -> [usize; 16] {
        let e = self.enc.block_lens();
        let kk = KERNEL * KERNEL;
        let feat = self.enc.feat();
        [
            e[0],
            e[1],
            e[2],
            e[3],
            e[4],
            e[5],
            e[6],
            e[7],
            feat * self.enc.latent,
            feat,
            WIDTHS[2] * WIDTHS[1] * kk,
            WIDTHS[1],
            WIDTHS[1] * WIDTHS[0] * kk,
            WIDTHS[0],
            WIDTHS[0] * self.enc.m * kk,
            self.enc.m,
        ]
    }

    pub fn param_len(&self) -> usize {
        self.block_lens().iter().sum()
    }

    pub fn block_offset(&self, b: usize) -> usize {
        self.block_lens()[..b].iter().sum()
    }

    fn fan_in(&self, b: usize) -> usize {
        let kk = KERNEL * KERNEL;
        match b {
            0..=7 => self.enc.fan_in(b),
            8 | 9 => self.enc.latent,
            10 | 11 => WIDTHS[2] * kk,
            12 | 13 => WIDTHS[1] * kk,
            _ => WIDTHS[0] * kk,
        }
    }

    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.param_len()];
        init_blocks(&mut params, seed, 0, &self.block_lens().map(Some), |b| self.fan_in(b));
        params
    }
}

/// Every intermediate activation of one autoencoder pass, kept for the
/// backward sweep. `ce` is the cross-entropy summed over pixels.
pub struct Cache {
    x: Vec<f64>,
    a1: Vec<f64>,
    r1: Vec<f64>,
    a2: Vec<f64>,
    r2: Vec<f64>,
    a3: Vec<f64>,
    r3: Vec<f64>,
    z: Vec<f64>,
    f: Vec<f64>,
    rf: Vec<f64>,
    t1: Vec<f64>,
    rt1: Vec<f64>,
    t2: Vec<f64>,
    rt2: Vec<f64>,
    probs: Vec<f64>,
    pub ce: f64,
}

fn block<'a>(shape: &CaeShape, params: &'a [f64], b: usize) -> &'a [f64] {
    let off = shape.block_offset(b);
    &params[off..off + shape.block_lens()[b]]
}

pub fn cae_forward(shape: &CaeShape, params: &[f64], x: &[f64]) -> Cache {
    let e = &shape.enc;
    let (m, h, w) = (e.m, e.h, e.w);
    debug_assert_eq!(x.len(), m * h * w);
    let a1 = conv_forward(x, m, h, w, block(shape, params, 0), block(shape, params, 1), WIDTHS[0], KERNEL, STRIDE, PAD);
    let r1 = relu(&a1);
    let a2 = conv_forward(&r1, WIDTHS[0], h / 2, w / 2, block(shape, params, 2), block(shape, params, 3), WIDTHS[1], KERNEL, STRIDE, PAD);
    let r2 = relu(&a2);
    let a3 = conv_forward(&r2, WIDTHS[1], h / 4, w / 4, block(shape, params, 4), block(shape, params, 5), WIDTHS[2], KERNEL, STRIDE, PAD);
    let r3 = relu(&a3);
    let z = dense_forward(&r3, block(shape, params, 6), block(shape, params, 7), e.feat(), e.latent);
    let f = dense_forward(&z, block(shape, params, 8), block(shape, params, 9), e.latent, e.feat());
    let rf = relu(&f);
    let t1 = tconv_forward(&rf, WIDTHS[2], h / 8, w / 8, block(shape, params, 10), block(shape, params, 11), WIDTHS[1], KERNEL, STRIDE, PAD);
    let rt1 = relu(&t1);
    let t2 = tconv_forward(&rt1, WIDTHS[1], h / 4, w / 4, block(shape, params, 12), block(shape, params, 13), WIDTHS[0], KERNEL, STRIDE, PAD);
    let rt2 = relu(&t2);
    let logits = tconv_forward(&rt2, WIDTHS[0], h / 2, w / 2, block(shape, params, 14), block(shape, params, 15), m, KERNEL, STRIDE, PAD);
    let (ce, probs) = softmax_ce(&logits, m, h * w, x);
    Cache {
        x: x.to_vec(),
        a1,
        r1,
        a2,
        r2,
        a3,
        r3,
        z,
        f,
        rf,
        t1,
        rt1,
        t2,
        rt2,
        probs,
        ce,
    }
}

/// Hash of every ReLU on/off decision in a cached pass. Two passes with equal
/// signatures lie on the same smooth piece of the loss.
pub fn relu_mask_sig(cache: &Cache) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for pre in [&cache.a1, &cache.a2, &cache.a3, &cache.f, &cache.t1, &cache.t2] {
        for &v in pre.iter() {
            hash ^= (v > 0.0) as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// Gradient of `scale * ce` with respect to every parameter, laid out like
/// the parameter buffer.
pub fn cae_backward(shape: &CaeShape, params: &[f64], cache: &Cache, scale: f64) -> Vec<f64> {
    let e = &shape.enc;
    let (m, h, w) = (e.m, e.h, e.w);
    let mut grads = vec![0.0; shape.param_len()];
    let write = |g: &mut Vec<f64>, b: usize, dw: &[f64], db: &[f64]| {
        let wo = shape.block_offset(b);
        g[wo..wo + dw.len()].copy_from_slice(dw);
        let bo = shape.block_offset(b + 1);
        g[bo..bo + db.len()].copy_from_slice(db);
    };

    let dlogits: Vec<f64> = cache
        .probs
        .iter()
        .zip(&cache.x)
        .map(|(&p, &t)| scale * (p - t))
        .collect();
    let (drt2, dt3w, dt3b) = tconv_backward(&cache.rt2, WIDTHS[0], h / 2, w / 2, block(shape, params, 14), m, KERNEL, STRIDE, PAD, &dlogits);
    write(&mut grads, 14, &dt3w, &dt3b);
    let dt2 = relu_backward(&cache.t2, &drt2);
    let (drt1, dt2w, dt2b) = tconv_backward(&cache.rt1, WIDTHS[1], h / 4, w / 4, block(shape, params, 12), WIDTHS[0], KERNEL, STRIDE, PAD, &dt2);
    write(&mut grads, 12, &dt2w, &dt2b);
    let dt1 = relu_backward(&cache.t1, &drt1);
    let (drf, dt1w, dt1b) = tconv_backward(&cache.rf, WIDTHS[2], h / 8, w / 8, block(shape, params, 10), WIDTHS[1], KERNEL, STRIDE, PAD, &dt1);
    write(&mut grads, 10, &dt1w, &dt1b);
    let df = relu_backward(&cache.f, &drf);
    let (dz, ddw, ddb) = dense_backward(&cache.z, block(shape, params, 8), e.latent, e.feat(), &df);
    write(&mut grads, 8, &ddw, &ddb);
    let (dr3, dew, deb) = dense_backward(&cache.r3, block(shape, params, 6), e.feat(), e.latent, &dz);
    write(&mut grads, 6, &dew, &deb);
    let da3 = relu_backward(&cache.a3, &dr3);
    let (dr2, dc3w, dc3b) = conv_backward(&cache.r2, WIDTHS[1], h / 4, w / 4, block(shape, params, 4), WIDTHS[2], KERNEL, STRIDE, PAD, &da3);
    write(&mut grads, 4, &dc3w, &dc3b);
    let da2 = relu_backward(&cache.a2, &dr2);
    let (dr1, dc2w, dc2b) = conv_backward(&cache.r1, WIDTHS[0], h / 2, w / 2, block(shape, params, 2), WIDTHS[1], KERNEL, STRIDE, PAD, &da2);
    write(&mut grads, 2, &dc2w, &dc2b);
    let da1 = relu_backward(&cache.a1, &dr1);
    let (_, dc1w, dc1b) = conv_backward(&cache.x, m, h, w, block(shape, params, 0), WIDTHS[0], KERNEL, STRIDE, PAD, &da1);
    write(&mut grads, 0, &dc1w, &dc1b);
    grads
}

/// Reconstructed class per pixel (argmax of the softmax, first max wins).
pub fn reconstruction_argmax(shape: &CaeShape, cache: &Cache) -> Vec<usize> {
    let hw = shape.enc.h * shape.enc.w;
    let m = shape.enc.m;
    (0..hw)
        .map(|px| {
            let mut best = 0;
            for mm in 1..m {
                if cache.probs[mm * hw + px] > cache.probs[best * hw + px] {
                    best = mm;
                }
            }
            best
        })
        .collect()
}

/// Train the autoencoder on sensed footprints and return the encoder half
/// plus the mean per-pixel cross-entropy after each epoch.
pub fn train_cae(
    data: &[SemanticFootprint],
    cfg: &TrainConfig,
) -> Result<(EncoderModel, Vec<f64>)> {
    cfg.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::Config("cannot train an encoder on an empty dataset".into()))?;
    if data
        .iter()
        .any(|fp| fp.n_angles != first.n_angles || fp.n_depths != first.n_depths)
    {
        return Err(Error::Config("training footprints have mixed dimensions".into()));
    }
    let enc = EncShape::new(N_CLASSES, first.n_angles, first.n_depths, LATENT_DIM)?;
    let shape = CaeShape { enc };
    let hw = (enc.h * enc.w) as f64;

    let mut params = shape.init(cfg.seed);
    let mut adam_m = vec![0.0; params.len()];
    let mut adam_v = vec![0.0; params.len()];
    let mut step = 0u32;
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        RngStream::substream(cfg.seed, 10_000 + epoch as u64).shuffle(&mut order);
        let mut epoch_ce = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / (batch.len() as f64 * hw);
            // Fixed-size chunks reduced in order keep the sum independent of
            // the thread count.
            let partials: Vec<(Vec<f64>, f64)> = batch
                .chunks(8)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|chunk| {
                    let mut g = vec![0.0; params.len()];
                    let mut ce = 0.0;
                    for &idx in chunk {
                        let x = data[idx].one_hot();
                        let cache = cae_forward(&shape, &params, &x);
                        ce += cache.ce;
                        let gs = cae_backward(&shape, &params, &cache, scale);
                        for (a, b) in g.iter_mut().zip(&gs) {
                            *a += b;
                        }
                    }
                    (g, ce)
                })
                .collect();
            let mut grads = vec![0.0; params.len()];
            for (g, ce) in partials {
                for (a, b) in grads.iter_mut().zip(&g) {
                    *a += b;
                }
                epoch_ce += ce;
            }

            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(step as i32);
            for i in 0..params.len() {
                let g = grads[i];
                adam_m[i] = cfg.beta1 * adam_m[i] + (1.0 - cfg.beta1) * g;
                adam_v[i] = cfg.beta2 * adam_v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = adam_m[i] / bc1;
                let vhat = adam_v[i] / bc2;
                params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        let epoch_loss = epoch_ce / (data.len() as f64 * hw);
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged: loss {epoch_loss} after epoch {epoch} (lr {}, batch {})",
                cfg.learning_rate, cfg.batch_size
            )));
        }
        losses.push(epoch_loss);
    }

    let enc_len = enc.param_len();
    Ok((
        EncoderModel {
            shape: enc,
            params: params[..enc_len].to_vec(),
        },
        losses,
    ))
}
