//! Brute-force reference implementations. Everything here is computed in f64
//! with plain loops and shares no code with the library kernels.
#![allow(dead_code)]

use tinydet::config::{LayerKind, NetworkDef};
use tinydet::head::Detection;
use tinydet::postprocess::BBox;
use tinydet::tensor::{Activation, ConvParams, Tensor};

/// Dense NCHW array in f64.
#[derive(Debug, Clone)]
pub struct Nd {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Nd {
    pub fn from_tensor(t: &Tensor) -> Nd {
        Nd { dims: t.dims(), data: t.data().iter().map(|&v| v as f64).collect() }
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.dims;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    fn build(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Nd {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Nd { dims, data }
    }

    /// Largest |a - b| / max(1, |b|) against a library tensor, or infinity
    /// when the shapes differ.
    pub fn max_rel_diff(&self, t: &Tensor) -> f64 {
        if self.dims != t.dims() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(t.data())
            .map(|(&r, &v)| (v as f64 - r).abs() / r.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, t: &Tensor) -> f64 {
        if self.dims != t.dims() {
            return f64::INFINITY;
        }
        self.data.iter().zip(t.data()).map(|(&r, &v)| (v as f64 - r).abs()).fold(0.0, f64::max)
    }
}

fn act(v: f64, a: Activation) -> f64 {
    match a {
        Activation::Linear => v,
        Activation::Relu => v.max(0.0),
        Activation::Leaky => {
            if v > 0.0 {
                v
            } else {
                0.1 * v
            }
        }
    }
}

/// Convolution, then bias or raw batch-norm statistics, then activation.
pub fn conv(input: &Nd, p: &ConvParams) -> Nd {
    let [n, c, h, w] = input.dims;
    let oh = (h + 2 * p.pad - p.kernel_h) / p.stride + 1;
    let ow = (w + 2 * p.pad - p.kernel_w) / p.stride + 1;
    Nd::build([n, p.out_channels, oh, ow], |b, oc, oy, ox| {
        let mut acc = 0.0;
        for ic in 0..c {
            for ky in 0..p.kernel_h {
                for kx in 0..p.kernel_w {
                    let iy = (oy * p.stride + ky) as i64 - p.pad as i64;
                    let ix = (ox * p.stride + kx) as i64 - p.pad as i64;
                    if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                        continue;
                    }
                    let widx = ((oc * c + ic) * p.kernel_h + ky) * p.kernel_w + kx;
                    acc += input.get(b, ic, iy as usize, ix as usize) * p.weights[widx] as f64;
                }
            }
        }
        acc += p.bias[oc] as f64;
        if let Some(bn) = &p.batch_norm {
            let (g, beta, m, var) = (bn.gamma[oc] as f64, bn.beta[oc] as f64, bn.mean[oc] as f64, bn.variance[oc] as f64);
            acc = g * (acc - m) / (var + 1e-5).sqrt() + beta;
        }
        act(acc, p.activation)
    })
}

/// Max over each window anchored at `i * stride - pad / 2`; cells outside the
/// input are skipped.
pub fn maxpool(input: &Nd, size: usize, stride: usize, pad: usize) -> Nd {
    let [n, c, h, w] = input.dims;
    let oh = (h + pad - size) / stride + 1;
    let ow = (w + pad - size) / stride + 1;
    let off = (pad / 2) as i64;
    Nd::build([n, c, oh, ow], |b, ch, oy, ox| {
        let mut best = f64::NEG_INFINITY;
        for dy in 0..size as i64 {
            for dx in 0..size as i64 {
                let y = (oy * stride) as i64 - off + dy;
                let x = (ox * stride) as i64 - off + dx;
                if y >= 0 && x >= 0 && y < h as i64 && x < w as i64 {
                    best = best.max(input.get(b, ch, y as usize, x as usize));
                }
            }
        }
        best
    })
}

pub fn upsample(input: &Nd, factor: usize) -> Nd {
    let [n, c, h, w] = input.dims;
    Nd::build([n, c, h * factor, w * factor], |b, ch, y, x| input.get(b, ch, y / factor, x / factor))
}

pub fn concat(parts: &[&Nd]) -> Nd {
    let [n, _, h, w] = parts[0].dims;
    let total: usize = parts.iter().map(|p| p.dims[1]).sum();
    Nd::build([n, total, h, w], |b, c, y, x| {
        let mut c = c;
        for p in parts {
            if c < p.dims[1] {
                return p.get(b, c, y, x);
            }
            c -= p.dims[1];
        }
        unreachable!()
    })
}

/// Output of every layer of `def`, using the unfolded parameters in layer
/// order.
pub fn forward(def: &NetworkDef, convs: &[ConvParams], image: &Tensor) -> Vec<Nd> {
    let mut outs: Vec<Nd> = Vec::new();
    let mut slot = 0;
    for (i, layer) in def.layers.iter().enumerate() {
        let input = if i == 0 { Nd::from_tensor(image) } else { outs[i - 1].clone() };
        let out = match &layer.kind {
            LayerKind::Convolutional(_) => {
                slot += 1;
                conv(&input, &convs[slot - 1])
            }
            LayerKind::Maxpool(m) => maxpool(&input, m.size, m.stride, m.padding),
            LayerKind::Upsample(u) => upsample(&input, u.factor),
            LayerKind::Yolo(_) => input,
            LayerKind::Route(r) => {
                let idx: Vec<usize> =
                    r.layers.iter().map(|&l| if l < 0 { (i as isize + l) as usize } else { l as usize }).collect();
                let parts: Vec<&Nd> = idx.iter().map(|&k| &outs[k]).collect();
                concat(&parts)
            }
        };
        outs.push(out);
    }
    outs
}

/// Suppression by exhaustive search: the kept set is the unique subset S in
/// which a box belongs to S exactly when no higher-ranked same-class member
/// of S overlaps it by more than `t`. Every subset is tried.
pub fn nms(dets: &[Detection], t: f64) -> Vec<Detection> {
    let n = dets.len();
    assert!(n <= 16);
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut pos = vec![0; n];
    for (r, &i) in rank.iter().enumerate() {
        pos[i] = r;
    }
    let overlap = |a: &BBox, b: &BBox| {
        let iw = ((a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0)).max(0.0);
        let ih = ((a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0)).max(0.0);
        let inter = iw * ih;
        let union = a.w * a.h + b.w * b.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    };
    let mut found: Vec<u32> = Vec::new();
    for mask in 0u32..(1 << n) {
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| {
                mask & (1 << j) != 0
                    && pos[j] < pos[i]
                    && dets[j].class_id == dets[i].class_id
                    && overlap(&dets[j].bbox, &dets[i].bbox) > t
            });
            (mask & (1 << i) != 0) == !blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "fixed point must be unique");
    rank.into_iter().filter(|&i| found[0] & (1 << i) != 0).map(|i| dets[i].clone()).collect()
}

/// AP as a sum of rectangles: every true positive adds 1/G of recall, at the
/// best precision reached at or after its rank.
pub fn ap(hits: &[bool], total_truth: usize) -> f64 {
    if total_truth == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(hits.len());
    let mut tp = 0;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precisions.push(tp as f64 / (k + 1) as f64);
    }
    let mut sum = 0.0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            sum += precisions[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    sum / total_truth as f64
}
