//! Darknet binary `.weights` files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! i32 major, i32 minor, i32 revision
//! seen: u64 when (major, minor) >= (0, 2), otherwise u32
//! for each convolutional layer, in layer order:
//!     batch-normalized: beta[filters] gamma[filters] mean[filters] variance[filters]
//!     otherwise:        bias[filters]
//!     weights[filters * in_channels * size * size]
//! ```
//!
//! Writing always emits version 0.2.0 with a 64-bit `seen`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::cfg::{LayerKind, NetworkDef};
use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, ConvParams};

pub const HEADER_BYTES: usize = 20;

/// Parameters of every convolutional layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    /// Images seen during training, carried through untouched.
    pub seen: u64,
    pub convs: Vec<ConvParams>,
}

impl ParamSet {
    pub fn zeros(def: &NetworkDef) -> Result<Self> {
        Ok(ParamSet { seen: 0, convs: param_template(def)? })
    }

    /// Seeded random parameters with fan-in scaled weights, so activations
    /// stay bounded through deep stacks. Batch-normalized layers get zero bias.
    pub fn random(def: &NetworkDef, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = param_template(def)?;
        for p in &mut convs {
            let fan_in = (p.in_channels * p.kernel_h * p.kernel_w) as f32;
            let limit = (3.0 / fan_in).sqrt();
            p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-limit..limit));
            match &mut p.batch_norm {
                Some(bn) => {
                    for c in 0..p.out_channels {
                        bn.gamma[c] = rng.gen_range(0.5..1.5);
                        bn.beta[c] = rng.gen_range(-0.1..0.1);
                        bn.mean[c] = rng.gen_range(-0.1..0.1);
                        bn.variance[c] = rng.gen_range(0.5..1.5);
                    }
                }
                None => p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1)),
            }
        }
        Ok(ParamSet { seen: rng.gen(), convs })
    }
}

/// Zero-valued parameters matching a shape-inferred definition.
pub fn param_template(def: &NetworkDef) -> Result<Vec<ConvParams>> {
    def.conv_layers()
        .map(|(i, c)| {
            let input = def.layer_input_shape(i)?;
            Ok(ConvParams::zeros(
                input.channels,
                c.filters,
                c.size,
                c.stride,
                c.padding,
                c.batch_normalize,
                c.activation,
            ))
        })
        .collect()
}

fn conv_floats(p: &ConvParams) -> usize {
    let affine = if p.batch_norm.is_some() { 4 } else { 1 };
    affine * p.out_channels + p.weight_count()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    expected: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { expected: self.expected, actual: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

/// Reads a weights stream against a shape-inferred definition. The stream must
/// hold exactly the parameters the definition calls for.
pub fn load_weights(bytes: &[u8], def: &NetworkDef) -> Result<ParamSet> {
    let mut convs = param_template(def)?;
    let mut r = Reader { bytes, pos: 0, expected: HEADER_BYTES };
    let major = r.u32()?;
    let minor = r.u32()?;
    let _revision = r.u32()?;
    let wide_seen = (major, minor) >= (0, 2);
    let header = if wide_seen { HEADER_BYTES } else { HEADER_BYTES - 4 };
    r.expected = header + 4 * convs.iter().map(conv_floats).sum::<usize>();
    let seen = if wide_seen {
        let lo = r.u32()? as u64;
        let hi = r.u32()? as u64;
        lo | (hi << 32)
    } else {
        r.u32()? as u64
    };

    for p in &mut convs {
        let n = p.out_channels;
        if p.batch_norm.is_some() {
            let beta = r.floats(n)?;
            let gamma = r.floats(n)?;
            let mean = r.floats(n)?;
            let variance = r.floats(n)?;
            p.batch_norm = Some(BatchNorm { gamma, beta, mean, variance });
        } else {
            p.bias = r.floats(n)?;
        }
        p.weights = r.floats(p.weight_count())?;
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes { expected: r.expected, extra: bytes.len() - r.pos });
    }
    Ok(ParamSet { seen, convs })
}

/// Serializes parameters. Batch-normalized layers store `beta` in place of a
/// bias, so their `bias` field is not written.
pub fn save_weights(params: &ParamSet) -> Vec<u8> {
    let total = HEADER_BYTES + 4 * params.convs.iter().map(conv_floats).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    for v in [0u32, 2, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&params.seen.to_le_bytes());
    let mut put = |vals: &[f32]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in &params.convs {
        match &p.batch_norm {
            Some(bn) => {
                put(&bn.beta);
                put(&bn.gamma);
                put(&bn.mean);
                put(&bn.variance);
            }
            None => put(&p.bias),
        }
        put(&p.weights);
    }
    out
}

/// Bytes a weights file for `def` must contain (version 0.2 header).
pub fn expected_weights_len(def: &NetworkDef) -> Result<usize> {
    Ok(HEADER_BYTES + 4 * param_template(def)?.iter().map(conv_floats).sum::<usize>())
}

/// Checks that a parameter set lines up with a definition's conv layers.
pub fn check_params(def: &NetworkDef, params: &[ConvParams]) -> Result<()> {
    let template = param_template(def)?;
    if template.len() != params.len() {
        return Err(Error::Config(format!(
            "definition has {} convolutional layers, parameters cover {}",
            template.len(),
            params.len()
        )));
    }
    let conv_indices = def
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind, LayerKind::Convolutional(_)))
        .map(|(i, _)| i);
    for ((t, p), layer) in template.iter().zip(params).zip(conv_indices) {
        let same = t.in_channels == p.in_channels
            && t.out_channels == p.out_channels
            && t.kernel_h == p.kernel_h
            && t.kernel_w == p.kernel_w
            && t.stride == p.stride
            && t.pad == p.pad
            && t.activation == p.activation
            && t.batch_norm.is_some() == p.batch_norm.is_some();
        if !same {
            return Err(Error::Config(format!("parameters for layer {layer} do not match its definition")));
        }
        p.validate()?;
    }
    Ok(())
}
