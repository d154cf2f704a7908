//! Image loading, network-input resizing and annotation output.
//!
//! Binary netpbm (P5 greyscale, P6 RGB) is always supported. PNG and JPEG go
//! through the `image` crate when the `codecs` feature is on.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::postprocess::BBox;
use crate::tensor::Tensor;

/// 8-bit interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut img = RgbImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.put(x, y, f(x, y));
            }
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// (1, 3, height, width) tensor with values in [0, 1], RGB order.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn([1, 3, h, w], |_, c, y, x| self.data[(y * w + x) * 3 + c] as f32 / 255.0)
            .expect("image dims are positive")
    }

    /// Draws the outline of a normalized box, `stroke` pixels thick, clipped
    /// to the image.
    pub fn draw_box(&mut self, bbox: &BBox, color: [u8; 3], stroke: usize) {
        if self.width == 0 || self.height == 0 {
            return;
        }
        let (x1, y1, x2, y2) = bbox.corners();
        let clamp = |v: f64, max: usize| (v.round().max(0.0) as usize).min(max - 1);
        let (x1, x2) = (clamp(x1 * self.width as f64, self.width), clamp(x2 * self.width as f64, self.width));
        let (y1, y2) = (clamp(y1 * self.height as f64, self.height), clamp(y2 * self.height as f64, self.height));
        for t in 0..stroke {
            for x in x1..=x2 {
                self.put(x, (y1 + t).min(y2), color);
                self.put(x, y2.saturating_sub(t).max(y1), color);
            }
            for y in y1..=y2 {
                self.put((x1 + t).min(x2), y, color);
                self.put(x2.saturating_sub(t).max(x1), y, color);
            }
        }
    }
}

fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<usize>, usize)> {
    let mut pos = 2;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        out.push(std::str::from_utf8(&bytes[start..pos]).ok()?.parse().ok()?);
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return None;
    }
    Some((out, pos + 1))
}

/// Decodes binary P5/P6 data. 16-bit samples are scaled down to 8 bits.
pub fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let bad = |msg: &str| Error::UnsupportedFormat { path: path.to_path_buf(), msg: msg.to_string() };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("not a binary netpbm file")),
    };
    let (tok, start) = header_tokens(bytes, 3).ok_or_else(|| bad("malformed netpbm header"))?;
    let (width, height, maxval) = (tok[0], tok[1], tok[2]);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("netpbm dimensions or maxval out of range"));
    }
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let need = width * height * channels * sample_bytes;
    let raster = bytes.get(start..start + need).ok_or_else(|| bad("netpbm raster is truncated"))?;
    let sample = |i: usize| -> u8 {
        let v = if sample_bytes == 2 {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
        } else {
            raster[i] as u32
        };
        ((v * 255 + maxval as u32 / 2) / maxval as u32) as u8
    };
    let mut img = RgbImage::new(width, height);
    for p in 0..width * height {
        let rgb = if channels == 1 {
            let g = sample(p);
            [g, g, g]
        } else {
            [sample(3 * p), sample(3 * p + 1), sample(3 * p + 2)]
        };
        img.data[3 * p..3 * p + 3].copy_from_slice(&rgb);
    }
    Ok(img)
}

#[cfg(feature = "codecs")]
fn decode_other(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::UnsupportedFormat { path: path.to_path_buf(), msg: e.to_string() })?
        .to_rgb8();
    Ok(RgbImage { width: img.width() as usize, height: img.height() as usize, data: img.into_raw() })
}

#[cfg(not(feature = "codecs"))]
fn decode_other(_bytes: &[u8], path: &Path) -> Result<RgbImage> {
    Err(Error::UnsupportedFormat {
        path: path.to_path_buf(),
        msg: "only binary netpbm (P5/P6) is supported without the `codecs` feature".into(),
    })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match bytes.get(..2) {
        Some(b"P5") | Some(b"P6") => decode_netpbm(&bytes, path),
        _ => decode_other(&bytes, path),
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn save_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Stretches an image tensor to `width x height` by bilinear interpolation.
/// Corner samples map onto corner samples, so equal sizes are an exact copy.
pub fn resize_to_net(image: &Tensor, width: usize, height: usize) -> Result<Tensor> {
    if width == 0 || height == 0 {
        return Err(Error::Config("resize target must be at least 1x1".into()));
    }
    let [n, c, ih, iw] = image.dims();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let s = if out == 1 { 0.0 } else { (o * (inp - 1)) as f64 / (out - 1) as f64 };
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(width, iw);
    let ys = axis(height, ih);
    let mut out = Vec::with_capacity(n * c * width * height);
    for b in 0..n {
        for ch in 0..c {
            let plane = image.plane(b, ch);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = plane[y0 * iw + x0] * (1.0 - fx) + plane[y0 * iw + x1] * fx;
                    let bot = plane[y1 * iw + x0] * (1.0 - fx) + plane[y1 * iw + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::new([n, c, height, width], out)
}
