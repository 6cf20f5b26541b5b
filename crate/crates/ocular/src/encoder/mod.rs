//! Convolutional footprint encoder.
//!
//! The encoder maps a one-hot semantic footprint (M × n_angles × n_depths)
//! through three stride-2 convolutions with channel widths 8, 16, 32 (4×4
//! kernels, padding 1, ReLU) and a final dense layer to a low-dimensional
//! latent — six dimensions in the pipeline. Each convolution halves both
//! spatial dims, so footprint dims must be divisible by 8; the flattened
//! feature count is 32·(n_angles/8)·(n_depths/8).
//!
//! Inference is a pure function of the stored parameters: encoding never
//! touches training state, which is what lets encoded features be reused as
//! ordinary covariates downstream. Parameters live in one flat `f64` buffer
//! with fixed block offsets (conv1 w, conv1 b, conv2 w, conv2 b, conv3 w,
//! conv3 b, dense w, dense b), the same order the model file uses.

pub mod layers;
pub mod train;

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::RngStream;
use crate::sensor::SemanticFootprint;
use crate::world::N_CLASSES;
use layers::{conv_forward, dense_forward, relu};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
/// Channel widths of the three encoder convolutions.
pub const WIDTHS: [usize; 3] = [8, 16, 32];
pub const LATENT_DIM: usize = 6;

const MODEL_MAGIC: &[u8; 4] = b"OENC";
const MODEL_VERSION: u32 = 1;

/// Input geometry and latent width of an encoder; all parameter block sizes
/// derive from this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncShape {
    /// Class channels in the one-hot input.
    pub m: usize,
    /// First spatial dim (angle bins).
    pub h: usize,
    /// Second spatial dim (depth bins).
    pub w: usize,
    pub latent: usize,
}

impl EncShape {
    pub fn new(m: usize, h: usize, w: usize, latent: usize) -> Result<Self> {
        if m == 0 || latent == 0 {
            return Err(Error::Config("encoder needs at least one class channel and one latent dim".into()));
        }
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "encoder input dims must be positive multiples of 8 (three stride-2 halvings), got {h}x{w}"
            )));
        }
        Ok(EncShape { m, h, w, latent })
    }

    /// (in_ch, out_ch, in_h, in_w) of conv layer `i` (0-based).
    pub fn conv_dims(&self, i: usize) -> (usize, usize, usize, usize) {
        let ci = if i == 0 { self.m } else { WIDTHS[i - 1] };
        (ci, WIDTHS[i], self.h >> i, self.w >> i)
    }

    /// Flattened feature count after the conv stack.
    pub fn feat(&self) -> usize {
        WIDTHS[2] * (self.h / 8) * (self.w / 8)
    }

    /// Lengths of the eight encoder parameter blocks, in storage order.
    pub fn block_lens(&self) -> [usize; 8] {
        let kk = KERNEL * KERNEL;
        [
            WIDTHS[0] * self.m * kk,
            WIDTHS[0],
            WIDTHS[1] * WIDTHS[0] * kk,
            WIDTHS[1],
            WIDTHS[2] * WIDTHS[1] * kk,
            WIDTHS[2],
            self.latent * self.feat(),
            self.latent,
        ]
    }

    pub fn param_len(&self) -> usize {
        self.block_lens().iter().sum()
    }

    /// Offset of block `b` in the flat parameter buffer.
    pub fn block_offset(&self, b: usize) -> usize {
        self.block_lens()[..b].iter().sum()
    }

    /// Fan-in of each block's layer (weight blocks only; biases share their
    /// layer's entry).
    fn fan_in(&self, b: usize) -> usize {
        let kk = KERNEL * KERNEL;
        match b {
            0 | 1 => self.m * kk,
            2 | 3 => WIDTHS[0] * kk,
            4 | 5 => WIDTHS[1] * kk,
            _ => self.feat(),
        }
    }
}

/// Trained (or freshly initialized) encoder: shape plus one flat parameter
/// buffer in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub shape: EncShape,
    pub params: Vec<f64>,
}

/// Forward pass of the encoder given a parameter slice laid out per `shape`.
/// Also used inside the autoencoder, whose buffer starts with the same
/// blocks.
pub(crate) fn encode_with(shape: &EncShape, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut act = x.to_vec();
    for i in 0..3 {
        let (ci, co, h, w) = shape.conv_dims(i);
        let wo = shape.block_offset(2 * i);
        let bo = shape.block_offset(2 * i + 1);
        let lens = shape.block_lens();
        let pre = conv_forward(
            &act,
            ci,
            h,
            w,
            &params[wo..wo + lens[2 * i]],
            &params[bo..bo + lens[2 * i + 1]],
            co,
            KERNEL,
            STRIDE,
            PAD,
        );
        act = relu(&pre);
    }
    let dw = shape.block_offset(6);
    let db = shape.block_offset(7);
    let lens = shape.block_lens();
    dense_forward(
        &act,
        &params[dw..dw + lens[6]],
        &params[db..db + lens[7]],
        shape.feat(),
        shape.latent,
    )
}

impl EncoderModel {
    pub fn zeroed(shape: EncShape) -> Self {
        EncoderModel {
            shape,
            params: vec![0.0; shape.param_len()],
        }
    }

    /// He-normal weights (std sqrt(2/fan_in)) and zero biases, drawn from one
    /// substream per parameter block so the layout is stable.
    pub fn random(shape: EncShape, seed: u64) -> Self {
        let mut params = vec![0.0; shape.param_len()];
        init_blocks(&mut params, seed, 0, &shape.block_lens().map(Some), |b| shape.fan_in(b));
        EncoderModel { shape, params }
    }

    /// Latent vector of a one-hot input (length m·h·w).
    pub fn encode_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        let want = self.shape.m * self.shape.h * self.shape.w;
        if x.len() != want {
            return Err(Error::Config(format!(
                "encoder input has {} values, model expects {want}",
                x.len()
            )));
        }
        Ok(encode_with(&self.shape, &self.params, x))
    }

    /// Latent vector of a sensed footprint.
    pub fn encode(&self, fp: &SemanticFootprint) -> Result<Vec<f64>> {
        if self.shape.m != N_CLASSES
            || fp.n_angles != self.shape.h
            || fp.n_depths != self.shape.w
        {
            return Err(Error::Config(format!(
                "footprint {}x{} does not match encoder input {}x{}x{}",
                fp.n_angles, fp.n_depths, self.shape.m, self.shape.h, self.shape.w
            )));
        }
        Ok(encode_with(&self.shape, &self.params, &fp.one_hot()))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        for v in [
            MODEL_VERSION,
            self.shape.m as u32,
            self.shape.h as u32,
            self.shape.w as u32,
            self.shape.latent as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let lens = self.shape.block_lens();
        let mut off = 0;
        for len in lens {
            w.write_all(&(len as u32).to_le_bytes())?;
            for &v in &self.params[off..off + len] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            off += len;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format(format!(
                "bad model magic {magic:?}, expected {MODEL_MAGIC:?}"
            )));
        }
        let mut u32buf = [0u8; 4];
        let mut next_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = next_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}, expected {MODEL_VERSION}"
            )));
        }
        let m = next_u32(r)? as usize;
        let h = next_u32(r)? as usize;
        let w = next_u32(r)? as usize;
        let latent = next_u32(r)? as usize;
        let shape = EncShape::new(m, h, w, latent)
            .map_err(|e| Error::Format(format!("model header invalid: {e}")))?;
        let lens = shape.block_lens();
        let mut params = Vec::with_capacity(shape.param_len());
        for (b, &len) in lens.iter().enumerate() {
            let stored = next_u32(r)? as usize;
            if stored != len {
                return Err(Error::Format(format!(
                    "model block {b} holds {stored} parameters, shape implies {len}"
                )));
            }
            let mut bytes = vec![0u8; 4 * len];
            r.read_exact(&mut bytes)?;
            for chunk in bytes.chunks_exact(4) {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                if !v.is_finite() {
                    return Err(Error::Format("model contains a non-finite parameter".into()));
                }
                params.push(v as f64);
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after model parameters".into()));
        }
        Ok(EncoderModel { shape, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        EncoderModel::read_from(&mut bytes.as_slice())
    }
}

/// Fill consecutive parameter blocks: even-indexed blocks are weights drawn
/// N(0, 2/fan_in) from substream `first_stream + block_index`, odd-indexed
/// blocks are zero biases. `lens` entries of None are skipped.
pub(crate) fn init_blocks(
    params: &mut [f64],
    seed: u64,
    first_stream: u64,
    lens: &[Option<usize>],
    fan_in: impl Fn(usize) -> usize,
) {
    let mut off = 0;
    for (b, len) in lens.iter().enumerate() {
        let Some(len) = *len else { continue };
        if b % 2 == 0 {
            let std = (2.0 / fan_in(b) as f64).sqrt();
            let mut rng = RngStream::substream(seed, first_stream + b as u64);
            let mut i = 0;
            while i < len {
                let (a, c) = rng.next_normal_pair();
                params[off + i] = std * a;
                i += 1;
                if i < len {
                    params[off + i] = std * c;
                    i += 1;
                }
            }
        }
        // Odd blocks are biases and stay zero.
        off += len;
    }
    debug_assert_eq!(off, params.len());
}
