use crate::losses::{gaussian_window, MSSSIM_DEFAULT_WEIGHTS};
use crate::tensor::Tensor;

use super::{check_same, dims, MetricsError, Result};

/// `10·log10(MAX² / MSE)` with the MSE averaged over every element.
/// Identical images give `f64::INFINITY`.
pub fn psnr(target: &Tensor<f64>, test: &Tensor<f64>, max_value: f64) -> Result<f64> {
    check_same(target, test)?;
    if !(max_value > 0.0) {
        return Err(MetricsError::Invalid(format!("max_value must be > 0, got {max_value}")));
    }
    let mse = target
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / target.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Window {
    Gaussian { size: usize, sigma: f64 },
    Uniform { size: usize },
}

impl Window {
    pub fn size(&self) -> usize {
        match *self {
            Window::Gaussian { size, .. } | Window::Uniform { size } => size,
        }
    }

    /// Row-major weights summing to 1.
    pub fn weights(&self) -> Vec<f64> {
        match *self {
            Window::Gaussian { size, sigma } => gaussian_window(size, sigma),
            Window::Uniform { size } => vec![1.0 / (size * size) as f64; size * size],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: Window,
    /// Dynamic range `L` of the pixel values.
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: Window::Gaussian { size: 11, sigma: 1.5 },
            dynamic_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    pub fn with_range(dynamic_range: f64) -> Self {
        Self {
            dynamic_range,
            ..Self::default()
        }
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Mean SSIM and mean contrast-structure term of one channel over all valid
/// window positions.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig, weights: &[f64]) -> (f64, f64) {
    let k = cfg.window.size();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for oy in 0..ho {
        for ox in 0..wo {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..k {
                let row = (oy + ky) * w + ox;
                for kx in 0..k {
                    let g = weights[ky * k + kx];
                    let (x, y) = (a[row + kx], b[row + kx]);
                    ma += g * x;
                    mb += g * y;
                    saa += g * x * x;
                    sbb += g * y * y;
                    sab += g * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            ssim_sum += lum * cs;
            cs_sum += cs;
        }
    }
    let n = (ho * wo) as f64;
    (ssim_sum / n, cs_sum / n)
}

fn check_window(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || h < window || w < window {
        return Err(MetricsError::TooSmall { h, w, window });
    }
    Ok(())
}

/// SSIM averaged over valid window positions and then over channels.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, cfg: &SsimConfig) -> Result<f64> {
    check_same(a, b)?;
    let (c, h, w) = dims(a)?;
    check_window(h, w, cfg.window.size())?;
    let weights = cfg.window.weights();
    let total: f64 = (0..c)
        .map(|ch| ssim_plane(a.channel(ch), b.channel(ch), h, w, cfg, &weights).0)
        .sum();
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsssimConfig {
    pub ssim: SsimConfig,
    /// Exponent per scale, finest first.
    pub weights: Vec<f64>,
}

impl MsssimConfig {
    /// Default weights truncated to `scales` and renormalized to sum to 1.
    pub fn with_scales(ssim: SsimConfig, scales: usize) -> Result<Self> {
        if scales == 0 || scales > MSSSIM_DEFAULT_WEIGHTS.len() {
            return Err(MetricsError::Invalid(format!("scales must be in 1..=5, got {scales}")));
        }
        let kept = &MSSSIM_DEFAULT_WEIGHTS[..scales];
        let s: f64 = kept.iter().sum();
        Ok(Self {
            ssim,
            weights: kept.iter().map(|w| w / s).collect(),
        })
    }
}

/// Largest scale count (up to 5) whose coarsest level still fits `window`.
pub fn max_scales(h: usize, w: usize, window: usize) -> usize {
    let mut s = 0;
    let (mut h, mut w) = (h, w);
    while s < MSSSIM_DEFAULT_WEIGHTS.len() && h >= window && w >= window {
        s += 1;
        h /= 2;
        w /= 2;
    }
    s
}

fn downsample(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(h2 * w2);
    for y in 0..h2 {
        for x_ in 0..w2 {
            let i = 2 * y * w + 2 * x_;
            out.push(0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]));
        }
    }
    out
}

/// Multi-scale SSIM: contrast-structure at each scale but the coarsest,
/// full SSIM at the coarsest, each clamped at 0 and raised to its weight.
/// Scales are separated by 2×2 average pooling. Averaged over channels.
pub fn msssim(a: &Tensor<f64>, b: &Tensor<f64>, cfg: &MsssimConfig) -> Result<f64> {
    check_same(a, b)?;
    let (c, h, w) = dims(a)?;
    let s = cfg.weights.len();
    if s == 0 {
        return Err(MetricsError::Invalid("no scales".into()));
    }
    let k = cfg.ssim.window.size();
    let (hc, wc) = (h >> (s - 1), w >> (s - 1));
    if hc < k || wc < k {
        return Err(MetricsError::TooSmall { h, w, window: k });
    }
    let weights = cfg.ssim.window.weights();
    let mut total = 0.0;
    for ch in 0..c {
        let mut x = a.channel(ch).to_vec();
        let mut y = b.channel(ch).to_vec();
        let (mut hh, mut ww) = (h, w);
        let mut prod = 1.0;
        for (j, &wt) in cfg.weights.iter().enumerate() {
            let (full, cs) = ssim_plane(&x, &y, hh, ww, &cfg.ssim, &weights);
            let term = if j + 1 == s { full } else { cs };
            prod *= term.max(0.0).powf(wt);
            if j + 1 < s {
                x = downsample(&x, hh, ww);
                y = downsample(&y, hh, ww);
                hh /= 2;
                ww /= 2;
            }
        }
        total += prod;
    }
    Ok(total / c as f64)
}
