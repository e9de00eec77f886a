//! Three-framework inference.
//!
//! * framework 1: stain the (possibly defocused) input directly;
//! * framework 2: refocus first, then stain;
//! * framework 3: stain an in-focus input, the reference.
//!
//! Outputs are YCbCr code values in `[0, 255]` before clamping.

use crate::metrics::ycbcr_to_rgb;
use crate::models::{GeneratorNetwork, GeneratorVariant};
use crate::phantom::normalize_input;
use crate::tensor::Tensor;

use super::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Framework {
    Direct = 1,
    Refocused = 2,
    InFocus = 3,
}

impl Framework {
    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            1 => Some(Framework::Direct),
            2 => Some(Framework::Refocused),
            3 => Some(Framework::InFocus),
            _ => None,
        }
    }

    pub fn index(self) -> u8 {
        self as u8
    }
}

/// Trained networks available for inference.
pub struct Models {
    pub stainer: GeneratorNetwork<f32>,
    pub refocuser: Option<GeneratorNetwork<f32>>,
    /// Tile size for inference; `None` runs on the whole image.
    pub tile: Option<Tiling>,
}

/// Overlapping tiles blended with a linear ramp of `overlap` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tiling {
    pub size: usize,
    pub overlap: usize,
}

impl Models {
    pub fn new(stainer: GeneratorNetwork<f32>, refocuser: Option<GeneratorNetwork<f32>>) -> Result<Self> {
        if stainer.config().variant != GeneratorVariant::VirtualStainer {
            return Err(PipelineError::Config("stainer checkpoint holds a refocuser".into()));
        }
        if let Some(r) = &refocuser {
            if r.config().variant != GeneratorVariant::Refocuser {
                return Err(PipelineError::Config("refocuser checkpoint holds a stainer".into()));
            }
        }
        Ok(Self {
            stainer,
            refocuser,
            tile: None,
        })
    }

    fn run(&self, net: &GeneratorNetwork<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self.tile {
            None => Ok(net.predict(x)?),
            Some(t) => predict_tiled(net, x, t),
        }
    }

    /// Refocused image in normalized units.
    pub fn refocus(&self, af: &Tensor<f32>) -> Result<Tensor<f32>> {
        let dr = self.refocuser.as_ref().ok_or(PipelineError::MissingCheckpoint("framework 2"))?;
        self.run(dr, &normalize_input(af)?)
    }

    /// Stain `af` under `framework`. For framework 3 the caller supplies
    /// the in-focus image; the code path is the same as framework 1.
    pub fn stain(&self, af: &Tensor<f32>, framework: Framework) -> Result<Tensor<f64>> {
        let (c, _, _) = af.chw()?;
        if c != 2 {
            return Err(PipelineError::Config(format!("expected a 2-channel input, got {c}")));
        }
        let x = match framework {
            Framework::Direct | Framework::InFocus => normalize_input(af)?,
            Framework::Refocused => self.refocus(af)?,
        };
        let y = self.run(&self.stainer, &x)?;
        Ok(y.cast::<f64>().map(|v| v * 255.0))
    }
}

/// RGB code values clamped to `[0, 255]`.
pub fn to_rgb(ycc: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(ycbcr_to_rgb(ycc)?.map(|v| v.clamp(0.0, 255.0)))
}

/// 8-bit RGB PNG of a YCbCr code-value image.
pub fn save_rgb_png(path: &std::path::Path, ycc: &Tensor<f64>) -> Result<()> {
    let rgb = to_rgb(ycc)?;
    let (_, h, w) = rgb.chw()?;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|c| rgb.channel(c)[y * w + x].round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

fn tile_starts(n: usize, size: usize, step: usize) -> Vec<usize> {
    if n <= size {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + size < n).collect();
    v.push(n - size);
    v.dedup();
    v
}

fn ramp(i: usize, size: usize, overlap: usize) -> f32 {
    if overlap == 0 {
        return 1.0;
    }
    let d = i.min(size - 1 - i) as f32 + 1.0;
    (d / (overlap as f32 + 1.0)).min(1.0)
}

/// Run `net` over overlapping tiles and average the outputs, each weighted
/// by a separable ramp that falls off over the overlap.
pub fn predict_tiled(net: &GeneratorNetwork<f32>, x: &Tensor<f32>, tiling: Tiling) -> Result<Tensor<f32>> {
    let (_, h, w) = x.chw()?;
    let Tiling { size, overlap } = tiling;
    if size == 0 || overlap >= size {
        return Err(PipelineError::Config(format!("bad tiling {size}/{overlap}")));
    }
    if h <= size && w <= size {
        return Ok(net.predict(x)?);
    }
    if h < size || w < size {
        return Err(PipelineError::Config(format!("image {h}x{w} smaller than tile {size}")));
    }
    let step = size - overlap;
    let out_c = net.config().out_channels;
    let mut acc = vec![0f32; out_c * h * w];
    let mut wsum = vec![0f32; h * w];
    for &y0 in &tile_starts(h, size, step) {
        for &x0 in &tile_starts(w, size, step) {
            let patch = crate::phantom::crop(x, y0, x0, size)?;
            let out = net.predict(&patch)?;
            for r in 0..size {
                for c in 0..size {
                    let wt = ramp(r, size, overlap) * ramp(c, size, overlap);
                    let p = (y0 + r) * w + x0 + c;
                    wsum[p] += wt;
                    for k in 0..out_c {
                        acc[k * h * w + p] += wt * out.channel(k)[r * size + c];
                    }
                }
            }
        }
    }
    for k in 0..out_c {
        for p in 0..h * w {
            acc[k * h * w + p] /= wsum[p];
        }
    }
    Ok(Tensor::new(vec![out_c, h, w], acc)?)
}
