//! Dense NCHW tensors and the handful of kernels a Tiny-YOLOv3 forward pass needs.
//!
//! All kernels are pure: they borrow their inputs and allocate a fresh output.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Negative slope of the leaky ReLU used by darknet conv layers.
pub const LEAKY_SLOPE: f32 = 0.1;

/// Epsilon inside the batch-norm square root.
pub const BATCH_NORM_EPS: f32 = 1e-5;

/// Rank-4 tensor in (batch, channels, height, width) order, row-major.
///
/// Batch, height and width are always at least 1. A tensor may have zero
/// channels, which makes it the identity for [`concat_channels`].
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let [n, _c, h, w] = dims;
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "tensor dims {dims:?} must have batch, height and width >= 1"
            )));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: [usize; 4], value: f32) -> Result<Self> {
        Self::new(dims, vec![value; dims.iter().product()])
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, ch, h, w] = self.dims;
        ((n * ch + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `height * width` plane for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Size of the payload in bytes.
    pub fn nbytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("dims", &self.dims).field("len", &self.data.len()).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Leaky,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Leaky => "leaky",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "leaky" => Ok(Activation::Leaky),
            other => Err(format!("unknown activation `{other}` (expected linear, relu or leaky)")),
        }
    }
}

#[inline]
pub fn apply_activation(x: f32, kind: Activation) -> f32 {
    match kind {
        Activation::Linear => x,
        Activation::Relu => x.max(0.0),
        Activation::Leaky => {
            if x > 0.0 {
                x
            } else {
                LEAKY_SLOPE * x
            }
        }
    }
}

pub fn activate(input: &Tensor, kind: Activation) -> Tensor {
    input.map(|v| apply_activation(v, kind))
}

/// Inference-time batch-norm statistics, one entry per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
        }
    }

    #[inline]
    pub fn apply(&self, channel: usize, x: f32) -> f32 {
        self.gamma[channel] * (x - self.mean[channel]) / (self.variance[channel] + BATCH_NORM_EPS).sqrt()
            + self.beta[channel]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    /// Zero padding on every side.
    pub pad: usize,
    /// Ordered (out-channel, in-channel, kernel-row, kernel-col).
    pub weights: Vec<f32>,
    /// Per out-channel bias. Batch-normalized darknet layers keep this at zero
    /// and carry their shift in `batch_norm.beta`.
    pub bias: Vec<f32>,
    pub batch_norm: Option<BatchNorm>,
    pub activation: Activation,
}

impl ConvParams {
    /// All-zero parameters for a square kernel. Batch-norm, when requested,
    /// starts as the identity transform.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        pad: usize,
        batch_normalize: bool,
        activation: Activation,
    ) -> Self {
        ConvParams {
            in_channels,
            out_channels,
            kernel_h: size,
            kernel_w: size,
            stride,
            pad,
            weights: vec![0.0; out_channels * in_channels * size * size],
            bias: vec![0.0; out_channels],
            batch_norm: batch_normalize.then(|| BatchNorm::identity(out_channels)),
            activation,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    #[inline]
    pub fn weight_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_channels + ic) * self.kernel_h + ky) * self.kernel_w + kx
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if self.kernel_h > ph || self.kernel_w > pw {
            return Err(Error::Config(format!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Config("conv filters and kernel size must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        if self.weights.len() != self.weight_count() {
            return Err(Error::Config(format!(
                "conv expects {} weights, got {}",
                self.weight_count(),
                self.weights.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::Config(format!(
                "conv expects {} biases, got {}",
                self.out_channels,
                self.bias.len()
            )));
        }
        if let Some(bn) = &self.batch_norm {
            for (name, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("variance", &bn.variance)] {
                if v.len() != self.out_channels {
                    return Err(Error::Config(format!(
                        "batch-norm {name} has {} entries, expected {}",
                        v.len(),
                        self.out_channels
                    )));
                }
            }
            if bn.variance.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::Config("batch-norm running variance must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Absorbs batch-norm into weights and bias:
    /// `w' = w * s`, `b' = (b - mean) * s + beta` with `s = gamma / sqrt(var + eps)`.
    pub fn fold_batch_norm(&self) -> ConvParams {
        let Some(bn) = &self.batch_norm else {
            return self.clone();
        };
        let per_filter = self.in_channels * self.kernel_h * self.kernel_w;
        let mut weights = self.weights.clone();
        let mut bias = self.bias.clone();
        for oc in 0..self.out_channels {
            let scale = bn.gamma[oc] / (bn.variance[oc] + BATCH_NORM_EPS).sqrt();
            for w in &mut weights[oc * per_filter..(oc + 1) * per_filter] {
                *w *= scale;
            }
            bias[oc] = (bias[oc] - bn.mean[oc]) * scale + bn.beta[oc];
        }
        ConvParams { weights, bias, batch_norm: None, ..self.clone() }
    }
}

/// 2-D convolution followed by bias, optional batch-norm and activation.
///
/// Lowered to im2col + SGEMM; 1x1 stride-1 unpadded kernels skip the im2col copy.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.validate()?;
    let [n, c, h, w] = input.dims();
    if c != p.in_channels {
        return Err(Error::Config(format!(
            "conv expects {} input channels, got {c}",
            p.in_channels
        )));
    }
    let (oh, ow) = p.output_hw(h, w)?;
    let k = c * p.kernel_h * p.kernel_w;
    let pixels = oh * ow;
    let m = p.out_channels;
    let direct = p.kernel_h == 1 && p.kernel_w == 1 && p.stride == 1 && p.pad == 0;

    let mut out = vec![0.0f32; n * m * pixels];
    let mut cols = if direct { Vec::new() } else { vec![0.0f32; k * pixels] };

    for b in 0..n {
        let image = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let rhs: &[f32] = if direct {
            image
        } else {
            im2col(image, c, h, w, p, oh, ow, &mut cols);
            &cols
        };
        let dst = &mut out[b * m * pixels..(b + 1) * m * pixels];
        for (oc, row) in dst.chunks_exact_mut(pixels).enumerate() {
            row.fill(p.bias[oc]);
        }
        // dst (m x pixels) += weights (m x k) * rhs (k x pixels), all row-major
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                pixels,
                1.0,
                p.weights.as_ptr(),
                k as isize,
                1,
                rhs.as_ptr(),
                pixels as isize,
                1,
                1.0,
                dst.as_mut_ptr(),
                pixels as isize,
                1,
            );
        }
        for (oc, row) in dst.chunks_exact_mut(pixels).enumerate() {
            match &p.batch_norm {
                Some(bn) => row.iter_mut().for_each(|v| *v = apply_activation(bn.apply(oc, *v), p.activation)),
                None => row.iter_mut().for_each(|v| *v = apply_activation(*v, p.activation)),
            }
        }
    }
    Tensor::new([n, m, oh, ow], out)
}

#[allow(clippy::too_many_arguments)]
fn im2col(image: &[f32], c: usize, h: usize, w: usize, p: &ConvParams, oh: usize, ow: usize, cols: &mut [f32]) {
    let pixels = oh * ow;
    let pad = p.pad as isize;
    let mut row = 0;
    for ic in 0..c {
        let plane = &image[ic * h * w..(ic + 1) * h * w];
        for ky in 0..p.kernel_h {
            for kx in 0..p.kernel_w {
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..oh {
                    let iy = (oy * p.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * p.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output extent of a darknet max-pool along one axis: `(len + pad - size) / stride + 1`.
pub fn maxpool_output_len(len: usize, size: usize, stride: usize, pad: usize) -> Result<usize> {
    if size == 0 || stride == 0 {
        return Err(Error::Config("maxpool size and stride must be >= 1".into()));
    }
    if len + pad < size {
        return Err(Error::Config(format!("maxpool window {size} larger than padded input {}", len + pad)));
    }
    Ok((len + pad - size) / stride + 1)
}

/// Darknet max-pool. Windows start at `i * stride - pad / 2`; positions outside
/// the input count as negative infinity, so an odd `pad` lands on the
/// right/bottom edge.
pub fn maxpool(input: &Tensor, size: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims();
    let oh = maxpool_output_len(h, size, stride, pad)?;
    let ow = maxpool_output_len(w, size, stride, pad)?;
    let offset = (pad / 2) as isize;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let plane = input.plane(b, ch);
            for oy in 0..oh {
                let y0 = (oy * stride) as isize - offset;
                for ox in 0..ow {
                    let x0 = (ox * stride) as isize - offset;
                    let mut best = f32::NEG_INFINITY;
                    for iy in y0.max(0)..(y0 + size as isize).min(h as isize) {
                        let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ix in x0.max(0)..(x0 + size as isize).min(w as isize) {
                            best = best.max(line[ix as usize]);
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let [n, c, h, w] = input.dims();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let plane = input.plane(b, ch);
            for oy in 0..oh {
                let src = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                out.extend((0..ow).map(|ox| src[ox / factor]));
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    concat_all(&[a, b])
}

pub fn concat_all(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Config("concat needs at least one tensor".into()))?;
    let [n, _, h, w] = first.dims();
    for t in parts {
        let [tn, _, th, tw] = t.dims();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::Config(format!(
                "cannot concat {:?} with {:?}: batch and spatial dims differ",
                first.dims(),
                t.dims()
            )));
        }
    }
    let channels: usize = parts.iter().map(|t| t.channels()).sum();
    let mut out = Vec::with_capacity(n * channels * h * w);
    for b in 0..n {
        for t in parts {
            let chw = t.channels() * h * w;
            out.extend_from_slice(&t.data()[b * chw..(b + 1) * chw]);
        }
    }
    Tensor::new([n, channels, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Six nested loops, f64 accumulation, no lowering.
    fn naive_conv(input: &Tensor, p: &ConvParams) -> Tensor {
        let [n, c, h, w] = input.dims();
        let oh = (h + 2 * p.pad - p.kernel_h) / p.stride + 1;
        let ow = (w + 2 * p.pad - p.kernel_w) / p.stride + 1;
        Tensor::from_fn([n, p.out_channels, oh, ow], |b, oc, oy, ox| {
            let mut acc = p.bias[oc] as f64;
            for ic in 0..c {
                for ky in 0..p.kernel_h {
                    for kx in 0..p.kernel_w {
                        let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                        let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += input.at(b, ic, iy as usize, ix as usize) as f64
                                * p.weights[p.weight_index(oc, ic, ky, kx)] as f64;
                        }
                    }
                }
            }
            let mut v = acc as f32;
            if let Some(bn) = &p.batch_norm {
                v = bn.apply(oc, v);
            }
            apply_activation(v, p.activation)
        })
        .unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor {
        Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn random_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, size: usize, stride: usize, pad: usize) -> ConvParams {
        let mut p = ConvParams::zeros(cin, cout, size, stride, pad, false, Activation::Leaky);
        p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        p
    }

    #[test]
    fn activation_values() {
        assert_eq!(apply_activation(5.0, Activation::Relu), 5.0);
        assert_eq!(apply_activation(-3.0, Activation::Relu), 0.0);
        assert!((apply_activation(-3.0, Activation::Leaky) + 0.3).abs() < 1e-7);
        assert_eq!(apply_activation(-3.0, Activation::Linear), -3.0);
        assert_eq!("leaky".parse::<Activation>().unwrap(), Activation::Leaky);
        assert!("logistic".parse::<Activation>().is_err());
    }

    #[test]
    fn stride_two_conv_on_six_by_six() {
        let input = Tensor::full([1, 1, 6, 6], 1.0).unwrap();
        let p = ConvParams::zeros(1, 1, 3, 2, 0, false, Activation::Linear);
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.dims(), [1, 1, 2, 2]);
    }

    #[test]
    fn identity_one_by_one_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, [1, 1, 7, 5]);
        let mut p = ConvParams::zeros(1, 1, 1, 1, 0, false, Activation::Linear);
        p.weights[0] = 1.0;
        assert_eq!(conv2d(&input, &p).unwrap(), input);
    }

    #[test]
    fn conv_matches_naive_reference_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(&mut rng, [1, 2, 5, 5]);
        let p = random_conv(&mut rng, 2, 3, 3, 1, 1);
        let got = conv2d(&input, &p).unwrap();
        let want = naive_conv(&input, &p);
        assert_eq!(got.dims(), [1, 3, 5, 5]);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_rejects_bad_configs() {
        let input = Tensor::zeros([1, 2, 3, 3]).unwrap();
        let p = ConvParams::zeros(3, 1, 3, 1, 0, false, Activation::Linear);
        assert!(matches!(conv2d(&input, &p), Err(Error::Config(_))));
        let p = ConvParams::zeros(2, 1, 5, 1, 0, false, Activation::Linear);
        assert!(matches!(conv2d(&input, &p), Err(Error::Config(_))));
        let mut p = ConvParams::zeros(2, 1, 3, 1, 0, true, Activation::Linear);
        p.batch_norm.as_mut().unwrap().variance[0] = -1.0;
        assert!(matches!(conv2d(&input, &p), Err(Error::Config(_))));
    }

    #[test]
    fn folded_batch_norm_agrees_with_unfolded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, [1, 3, 6, 6]);
        let mut p = random_conv(&mut rng, 3, 4, 3, 1, 1);
        p.bias.fill(0.0);
        p.batch_norm = Some(BatchNorm {
            gamma: (0..4).map(|_| rng.gen_range(0.5..2.0)).collect(),
            beta: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            mean: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            variance: (0..4).map(|_| rng.gen_range(0.1..2.0)).collect(),
        });
        let a = conv2d(&input, &p).unwrap();
        let b = conv2d(&input, &p.fold_batch_norm()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-4);
        }
    }

    #[test]
    fn maxpool_window_maxima() {
        let input = Tensor::new(
            [1, 1, 4, 4],
            vec![1., 3., 2., 1., 4., 6., 5., 2., 7., 8., 9., 3., 1., 2., 3., 4.],
        )
        .unwrap();
        let out = maxpool(&input, 2, 2, 0).unwrap();
        assert_eq!(out.data(), &[6., 5., 8., 9.]);
    }

    #[test]
    fn maxpool_stride_one_keeps_dims() {
        let input = Tensor::full([1, 2, 13, 13], 0.5).unwrap();
        let out = maxpool(&input, 2, 1, 1).unwrap();
        assert_eq!(out.dims(), [1, 2, 13, 13]);
        assert!(out.data().iter().all(|&v| v == 0.5));
        // darknet default pad = size - 1 for the stride-2 pools
        assert_eq!(maxpool_output_len(416, 2, 2, 1).unwrap(), 208);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let input = Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let out = upsample_nearest(&input, 2).unwrap();
        assert_eq!(
            out.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let big = upsample_nearest(&Tensor::zeros([1, 3, 13, 13]).unwrap(), 2).unwrap();
        assert_eq!(big.dims(), [1, 3, 26, 26]);
    }

    #[test]
    fn concat_channel_arithmetic() {
        let a = Tensor::zeros([1, 128, 26, 26]).unwrap();
        let b = Tensor::zeros([1, 256, 26, 26]).unwrap();
        assert_eq!(concat_channels(&a, &b).unwrap().dims(), [1, 384, 26, 26]);
        let a = Tensor::zeros([1, 128, 52, 52]).unwrap();
        assert_eq!(concat_channels(&a, &a).unwrap().dims(), [1, 256, 52, 52]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, [1, 3, 4, 4]);
        let empty = Tensor::zeros([1, 0, 4, 4]).unwrap();
        assert_eq!(concat_channels(&x, &empty).unwrap(), x);

        let c = Tensor::zeros([1, 1, 5, 4]).unwrap();
        assert!(matches!(concat_channels(&x, &c), Err(Error::Config(_))));
    }

    #[test]
    fn tensor_rejects_inconsistent_lengths() {
        assert!(Tensor::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new([1, 1, 0, 2], vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conv_matches_naive(seed in any::<u64>(), c in 1usize..=4, oc in 1usize..=4,
                              h in 1usize..=8, w in 1usize..=8, size in 1usize..=3,
                              stride in 1usize..=2, pad in 0usize..=1) {
            prop_assume!(size <= h + 2 * pad && size <= w + 2 * pad);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_tensor(&mut rng, [1, c, h, w]);
            let p = random_conv(&mut rng, c, oc, size, stride, pad);
            let got = conv2d(&input, &p).unwrap();
            let want = naive_conv(&input, &p);
            prop_assert_eq!(got.dims(), want.dims());
            for (a, b) in got.data().iter().zip(want.data()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }

        #[test]
        fn unpadded_stride_one_dims(h in 1usize..=8, w in 1usize..=8, fh in 1usize..=3, fw in 1usize..=3) {
            prop_assume!(fh <= h && fw <= w);
            let mut p = ConvParams::zeros(1, 1, 1, 1, 0, false, Activation::Linear);
            p.kernel_h = fh;
            p.kernel_w = fw;
            p.weights = vec![0.0; fh * fw];
            let out = conv2d(&Tensor::zeros([1, 1, h, w]).unwrap(), &p).unwrap();
            prop_assert_eq!(out.dims(), [1, 1, h - fh + 1, w - fw + 1]);
        }

        #[test]
        fn identity_batch_norm_is_nearly_identity(x in -10.0f32..10.0) {
            let bn = BatchNorm::identity(1);
            prop_assert!((bn.apply(0, x) - x).abs() <= 1e-4);
        }

        #[test]
        fn maxpool_dominates_and_attains(seed in any::<u64>(), h in 2usize..=8, w in 2usize..=8,
                                         size in 1usize..=3, stride in 1usize..=2) {
            prop_assume!(size <= h && size <= w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_tensor(&mut rng, [1, 2, h, w]);
            let out = maxpool(&input, size, stride, 0).unwrap();
            for c in 0..2 {
                for oy in 0..out.height() {
                    for ox in 0..out.width() {
                        let m = out.at(0, c, oy, ox);
                        let mut hit = false;
                        for ky in 0..size {
                            for kx in 0..size {
                                let v = input.at(0, c, oy * stride + ky, ox * stride + kx);
                                prop_assert!(m >= v);
                                hit |= m == v;
                            }
                        }
                        prop_assert!(hit);
                    }
                }
            }
        }

        #[test]
        fn upsample_then_pool_recovers(seed in any::<u64>(), h in 1usize..=6, w in 1usize..=6, f in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_tensor(&mut rng, [1, 2, h, w]);
            let up = upsample_nearest(&input, f).unwrap();
            prop_assert_eq!(maxpool(&up, f, f, 0).unwrap(), input);
        }

        #[test]
        fn concat_preserves_offsets(seed in any::<u64>(), ca in 1usize..=3, cb in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, [1, ca, 3, 4]);
            let b = random_tensor(&mut rng, [1, cb, 3, 4]);
            let cat = concat_channels(&a, &b).unwrap();
            for c in 0..ca {
                prop_assert_eq!(cat.plane(0, c), a.plane(0, c));
            }
            for c in 0..cb {
                prop_assert_eq!(cat.plane(0, ca + c), b.plane(0, c));
            }
        }
    }
}
