//! Full-range BT.601 YCbCr:
//!
//! ```text
//! Y  =       0.299    R + 0.587    G + 0.114    B
//! Cb = 128 - 0.168736 R - 0.331264 G + 0.5      B
//! Cr = 128 + 0.5      R - 0.418688 G - 0.081312 B
//! ```
//!
//! The inverse is the exact inverse of this matrix, not the usual rounded
//! `1.402 / 1.772` coefficients.

use std::sync::OnceLock;

use crate::tensor::Tensor;

use super::{check_same, dims, MetricsError, Result};

const FORWARD: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];
const OFFSET: [f64; 3] = [0.0, 128.0, 128.0];

fn inverse() -> &'static [[f64; 3]; 3] {
    static INV: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    INV.get_or_init(|| {
        let m = FORWARD;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                // Adjugate: transpose of the cofactor matrix.
                let rows: Vec<usize> = (0..3).filter(|&r| r != j).collect();
                let cols: Vec<usize> = (0..3).filter(|&c| c != i).collect();
                let minor = cof(rows[0], rows[1], cols[0], cols[1]);
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                *v = sign * minor / det;
            }
        }
        inv
    })
}

pub fn rgb_to_ycbcr_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = OFFSET[k] + FORWARD[k][0] * rgb[0] + FORWARD[k][1] * rgb[1] + FORWARD[k][2] * rgb[2];
    }
    out
}

pub fn ycbcr_to_rgb_pixel(ycc: [f64; 3]) -> [f64; 3] {
    let inv = inverse();
    let d = [ycc[0] - OFFSET[0], ycc[1] - OFFSET[1], ycc[2] - OFFSET[2]];
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = inv[k][0] * d[0] + inv[k][1] * d[1] + inv[k][2] * d[2];
    }
    out
}

fn convert(img: &Tensor<f64>, f: fn([f64; 3]) -> [f64; 3]) -> Result<Tensor<f64>> {
    let (c, h, w) = dims(img)?;
    if c != 3 {
        return Err(MetricsError::Invalid(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let src = img.data();
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        let p = f([src[i], src[plane + i], src[2 * plane + i]]);
        out[i] = p[0];
        out[plane + i] = p[1];
        out[2 * plane + i] = p[2];
    }
    Ok(Tensor::new(vec![3, h, w], out).expect("shape preserved"))
}

/// `[3, H, W]` RGB in code units `[0, 255]` to YCbCr in the same units.
pub fn rgb_to_ycbcr(rgb: &Tensor<f64>) -> Result<Tensor<f64>> {
    convert(rgb, rgb_to_ycbcr_pixel)
}

/// Inverse of [`rgb_to_ycbcr`]; no clamping.
pub fn ycbcr_to_rgb(ycc: &Tensor<f64>) -> Result<Tensor<f64>> {
    convert(ycc, ycbcr_to_rgb_pixel)
}

/// Per-channel mean absolute difference between two YCbCr images.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ColorDifference {
    pub dy: f64,
    pub dcb: f64,
    pub dcr: f64,
}

pub fn color_difference(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<ColorDifference> {
    check_same(a, b)?;
    let (c, _, _) = dims(a)?;
    if c != 3 {
        return Err(MetricsError::Invalid(format!("expected 3 channels, got {c}")));
    }
    let mad = |ch: usize| {
        let (x, y) = (a.channel(ch), b.channel(ch));
        x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64
    };
    Ok(ColorDifference {
        dy: mad(0),
        dcb: mad(1),
        dcr: mad(2),
    })
}

/// Normalized Cb and Cr histograms over `[0, 255]` with `bins` equal-width
/// bins of `256 / bins` code values; out-of-range values are clamped.
pub fn chroma_histograms(ycc: &Tensor<f64>, bins: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if bins < 2 {
        return Err(MetricsError::Invalid(format!("need at least 2 bins, got {bins}")));
    }
    let (c, _, _) = dims(ycc)?;
    if c != 3 {
        return Err(MetricsError::Invalid(format!("expected 3 channels, got {c}")));
    }
    let hist = |ch: usize| {
        let data = ycc.channel(ch);
        let mut counts = vec![0usize; bins];
        for &v in data {
            let b = (v.clamp(0.0, 255.0) * bins as f64 / 256.0) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        counts
            .into_iter()
            .map(|n| n as f64 / data.len() as f64)
            .collect::<Vec<_>>()
    };
    Ok((hist(1), hist(2)))
}
