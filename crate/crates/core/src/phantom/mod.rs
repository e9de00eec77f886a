//! Procedural tissue phantoms standing in for real specimens.
//!
//! A [`Phantom`] holds three abundance maps: compact nuclei, filamentous
//! stroma and a smooth cytoplasm background. From it we render
//! two-channel autofluorescence planes at any axial offset and an
//! H&E-like brightfield image that serves as the staining target.

mod dataset;
mod preprocess;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::imgproc::Plane;
use crate::metrics::rgb_to_ycbcr;
use crate::tensor::Tensor;

pub use dataset::{
    eval_planes, load_dataset, load_manifest, load_record, synthesize_dataset, train_planes,
    write_dataset, DatasetConfig, DatasetManifest, FovRecord, ManifestEntry, Split,
};
pub use preprocess::{augment8, crop, dihedral, dihedral_inverse, normalize_input, patch_offsets, to_patches};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

pub const MIN_SIZE: usize = 64;
/// Largest axial offset that can be rendered, μm.
pub const MAX_DEFOCUS_UM: f64 = 3.0;
/// Blur width at focus, px.
pub const SIGMA0_PX: f64 = 0.5;
/// Blur growth, px per μm of defocus.
pub const KAPPA_PX_PER_UM: f64 = 1.0;
/// Sensor noise standard deviation as a fraction of the dynamic range.
pub const NOISE_STD: f64 = 0.01;

/// Hematoxylin and eosin optical-density vectors (R, G, B).
pub const HEMATOXYLIN_OD: [f64; 3] = [0.65, 0.70, 0.29];
pub const EOSIN_OD: [f64; 3] = [0.07, 0.99, 0.11];

/// Mix two or three integers into a well-spread 64-bit seed.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub nuclei: Plane,
    pub stroma: Plane,
    pub background: Plane,
    pub seed: u64,
}

impl Phantom {
    /// All-zero maps; renders as a white slide.
    pub fn empty(size: usize, seed: u64) -> Self {
        Self {
            nuclei: Plane::zeros(size, size),
            stroma: Plane::zeros(size, size),
            background: Plane::zeros(size, size),
            seed,
        }
    }

    pub fn size(&self) -> usize {
        self.nuclei.h
    }
}

fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, sigma: f64) -> Plane {
    let white = Plane::from_fn(size, size, |_, _| rng.random::<f64>());
    let b = white.gaussian_blur(sigma);
    let (lo, hi) = b
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);
    b.map(|v| (v - lo) / span)
}

fn add_nuclei(rng: &mut ChaCha8Rng, nuclei: &mut Plane, count: usize) {
    let size = nuclei.h;
    for _ in 0..count {
        let cy = rng.random_range(0.0..size as f64);
        let cx = rng.random_range(0.0..size as f64);
        let a = rng.random_range(2.5..4.5);
        let b = a * rng.random_range(0.7..1.0);
        let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = th.sin_cos();
        let reach = (a + 3.0) as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let y = cy as isize + dy;
                let x = cx as isize + dx;
                if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                    continue;
                }
                let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = (c * px + s * py) / a;
                let v = (-s * px + c * py) / b;
                let rho = (u * u + v * v).sqrt();
                let val = 1.0 / (1.0 + ((rho - 1.0) * a / 0.5).exp());
                let (yy, xx) = (y as usize, x as usize);
                if val > nuclei.get(yy, xx) {
                    nuclei.set(yy, xx, val);
                }
            }
        }
    }
}

fn add_fibers(rng: &mut ChaCha8Rng, stroma: &mut Plane, count: usize) {
    let size = stroma.h as f64;
    let orient = smooth_noise(rng, stroma.h, stroma.h as f64 / 6.0);
    let turn = Normal::new(0.0, 0.08).expect("positive std");
    for _ in 0..count {
        let mut y = rng.random_range(0.0..size);
        let mut x = rng.random_range(0.0..size);
        let mut th = orient.get(y as usize, x as usize) * std::f64::consts::PI * 1.5;
        let len = size * rng.random_range(0.3..0.8);
        let width: f64 = rng.random_range(0.6..1.2);
        let amp = rng.random_range(0.5..1.0);
        let steps = (len / 0.5) as usize;
        for _ in 0..steps {
            let r = (3.0 * width).ceil() as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = y as isize + dy;
                    let xx = x as isize + dx;
                    if yy < 0 || xx < 0 || yy >= stroma.h as isize || xx >= stroma.w as isize {
                        continue;
                    }
                    let d2 = (yy as f64 + 0.5 - y).powi(2) + (xx as f64 + 0.5 - x).powi(2);
                    let v = amp * (-d2 / (2.0 * width * width)).exp();
                    let (yu, xu) = (yy as usize, xx as usize);
                    if v > stroma.get(yu, xu) {
                        stroma.set(yu, xu, v);
                    }
                }
            }
            th += turn.sample(rng);
            y += 0.5 * th.sin();
            x += 0.5 * th.cos();
            if y < -2.0 || x < -2.0 || y > size + 2.0 || x > size + 2.0 {
                break;
            }
        }
    }
}

/// Random `size × size` phantom. `nuclei_density` is the expected nuclear
/// area fraction before overlap and must lie in `[0, 1)`.
pub fn generate_phantom(seed: u64, size: usize, nuclei_density: f64) -> Result<Phantom> {
    if size < MIN_SIZE {
        return Err(PhantomError::Invalid(format!("size must be >= {MIN_SIZE}, got {size}")));
    }
    if !(0.0..1.0).contains(&nuclei_density) {
        return Err(PhantomError::Invalid(format!(
            "nuclei density must be in [0, 1), got {nuclei_density}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1]));
    let area = (size * size) as f64;
    // Mean nuclear area is about 30 px².
    let n_nuclei = (nuclei_density * area / 30.0).round() as usize;
    let mut nuclei = Plane::zeros(size, size);
    add_nuclei(&mut rng, &mut nuclei, n_nuclei);
    let chromatin = smooth_noise(&mut rng, size, 0.7);
    let nuclei = Plane::from_fn(size, size, |y, x| nuclei.get(y, x) * (0.7 + 0.3 * chromatin.get(y, x)));

    let mut fibers = Plane::zeros(size, size);
    add_fibers(&mut rng, &mut fibers, (area / 256.0).round() as usize);
    let stroma = Plane::from_fn(size, size, |y, x| fibers.get(y, x).min(1.0) * (1.0 - nuclei.get(y, x)));

    let smooth = smooth_noise(&mut rng, size, size as f64 / 8.0);
    let background = Plane::from_fn(size, size, |y, x| {
        (0.1 + 0.25 * smooth.get(y, x)) * (1.0 - nuclei.get(y, x))
    });
    Ok(Phantom {
        nuclei,
        stroma,
        background,
        seed,
    })
}

/// Defocus blur width `σ₀ + κ·|z|` in pixels.
pub fn blur_sigma(z_axial_um: f64) -> f64 {
    SIGMA0_PX + KAPPA_PX_PER_UM * z_axial_um.abs()
}

/// Axial offset in tenths of a micron, the unit used in file names and
/// noise seeds.
pub fn z_tenths(z_axial_um: f64) -> i64 {
    (z_axial_um * 10.0).round() as i64
}

fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

/// Two-channel (DAPI-like, TxRed-like) autofluorescence plane at axial
/// offset `z_axial_um`, quantized to 16 bits and scaled to `[0, 1]`.
pub fn render_autofluorescence(ph: &Phantom, z_axial_um: f64) -> Result<Tensor<f32>> {
    if !z_axial_um.is_finite() || z_axial_um.abs() > MAX_DEFOCUS_UM + 1e-9 {
        return Err(PhantomError::Invalid(format!(
            "z_axial must be within ±{MAX_DEFOCUS_UM} μm, got {z_axial_um}"
        )));
    }
    let mixes = [[0.85, 0.15, 0.25], [0.10, 0.75, 0.35]];
    let sigma = blur_sigma(z_axial_um);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let zt = z_tenths(z_axial_um);
    let planes: Vec<Plane> = mixes
        .iter()
        .enumerate()
        .map(|(ch, m)| {
            let clean = Plane::from_fn(ph.size(), ph.size(), |y, x| {
                m[0] * ph.nuclei.get(y, x) + m[1] * ph.stroma.get(y, x) + m[2] * ph.background.get(y, x)
            })
            .gaussian_blur(sigma);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[ph.seed, 2, ch as u64, zt as u64]));
            let data = clean.data.iter().map(|&v| quantize16(v + noise.sample(&mut rng))).collect();
            Plane::new(clean.h, clean.w, data)
        })
        .collect();
    Ok(Plane::stack(&planes))
}

/// Brightfield RGB in code values (integers in `[0, 255]`), rendered by
/// Beer-Lambert mixing of the two stains over a white background.
pub fn render_hne_rgb(ph: &Phantom) -> Tensor<f64> {
    let planes: Vec<Plane> = (0..3)
        .map(|k| {
            Plane::from_fn(ph.size(), ph.size(), |y, x| {
                let n = ph.nuclei.get(y, x);
                let s = ph.stroma.get(y, x);
                let b = ph.background.get(y, x);
                let hema = 1.3 * n + 0.05 * s;
                let eosin = 0.7 * s + 0.5 * b + 0.2 * n;
                let od = hema * HEMATOXYLIN_OD[k] + eosin * EOSIN_OD[k];
                (255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0)
            })
        })
        .collect();
    Plane::stack(&planes)
}

/// Brightfield rendering in YCbCr code values.
pub fn render_hne(ph: &Phantom) -> Tensor<f64> {
    rgb_to_ycbcr(&render_hne_rgb(ph)).expect("three channels")
}
