use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::metrics::rgb_to_ycbcr;
use crate::tensor::Tensor;

use super::{generate_phantom, mix_seed, render_autofluorescence, render_hne_rgb, z_tenths, PhantomError, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "id,split,planes,patch_size,seed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axial offsets (μm) of training stacks: −2..2 in 0.5 steps.
pub fn train_planes() -> Vec<f64> {
    (-4..=4).map(|i| i as f64 * 0.5).collect()
}

/// Axial offsets (μm) of evaluation stacks: −3..3 in 0.5 steps.
pub fn eval_planes() -> Vec<f64> {
    (-6..=6).map(|i| i as f64 * 0.5).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub nuclei_density: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 40,
            n_validation: 4,
            n_test: 50,
            image_size: 64,
            patch_size: 64,
            nuclei_density: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: Split,
    pub planes: usize,
    pub patch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Every phantom seed belongs to exactly one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.seed) {
                return Err(PhantomError::Format(format!("seed {} appears more than once", e.seed)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{},{}\n", e.id, e.split, e.planes, e.patch_size, e.seed));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(PhantomError::Format(format!("manifest header must be `{MANIFEST_HEADER}`")));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| PhantomError::Format(format!("manifest line {}: bad {what}", n + 2));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 5 {
                return Err(bad("column count"));
            }
            entries.push(ManifestEntry {
                id: f[0].parse().map_err(|_| bad("id"))?,
                split: Split::parse(f[1]).ok_or_else(|| bad("split"))?,
                planes: f[2].parse().map_err(|_| bad("planes"))?,
                patch_size: f[3].parse().map_err(|_| bad("patch_size"))?,
                seed: f[4].parse().map_err(|_| bad("seed"))?,
            });
        }
        let m = Self { entries };
        m.check_disjoint()?;
        Ok(m)
    }
}

/// One field of view: its defocus stack and stained target, co-registered.
#[derive(Clone, Debug, PartialEq)]
pub struct FovRecord {
    pub id: usize,
    pub z_axial: Vec<f64>,
    /// `[2, H, W]` planes in `[0, 1]`, aligned with `z_axial`.
    pub af_stack: Vec<Tensor<f32>>,
    /// `[3, H, W]` RGB code values.
    pub stain_rgb: Tensor<f32>,
}

impl FovRecord {
    pub fn plane(&self, z_axial_um: f64) -> Option<&Tensor<f32>> {
        let t = z_tenths(z_axial_um);
        self.z_axial
            .iter()
            .position(|&z| z_tenths(z) == t)
            .map(|i| &self.af_stack[i])
    }

    pub fn af_infocus(&self) -> &Tensor<f32> {
        self.plane(0.0).expect("stacks always contain the focal plane")
    }

    /// Stained target in YCbCr code values.
    pub fn stain_ycbcr(&self) -> Tensor<f64> {
        rgb_to_ycbcr(&self.stain_rgb.cast()).expect("three channels")
    }

    /// Stained target in YCbCr scaled to `[0, 1]`, the stainer's output space.
    pub fn stain_target(&self) -> Tensor<f32> {
        self.stain_ycbcr().map(|v| v / 255.0).cast()
    }
}

fn render_record(entry: &ManifestEntry, size: usize, density: f64) -> Result<FovRecord> {
    let ph = generate_phantom(entry.seed, size, density)?;
    let z_axial = if entry.split == Split::Test { eval_planes() } else { train_planes() };
    let af_stack = z_axial
        .iter()
        .map(|&z| render_autofluorescence(&ph, z))
        .collect::<Result<Vec<_>>>()?;
    Ok(FovRecord {
        id: entry.id,
        z_axial,
        af_stack,
        stain_rgb: render_hne_rgb(&ph).cast(),
    })
}

/// Build the manifest and render every record in memory.
pub fn synthesize_dataset(cfg: &DatasetConfig) -> Result<(DatasetManifest, Vec<FovRecord>)> {
    if cfg.n_train + cfg.n_validation + cfg.n_test == 0 {
        return Err(PhantomError::Invalid("dataset needs at least one record".into()));
    }
    if cfg.patch_size == 0 || cfg.patch_size > cfg.image_size {
        return Err(PhantomError::Invalid(format!(
            "patch size {} must be in 1..={}",
            cfg.patch_size, cfg.image_size
        )));
    }
    let splits = std::iter::repeat_n(Split::Train, cfg.n_train)
        .chain(std::iter::repeat_n(Split::Validation, cfg.n_validation))
        .chain(std::iter::repeat_n(Split::Test, cfg.n_test));
    let entries: Vec<ManifestEntry> = splits
        .enumerate()
        .map(|(id, split)| ManifestEntry {
            id,
            split,
            planes: if split == Split::Test { eval_planes().len() } else { train_planes().len() },
            patch_size: cfg.patch_size,
            seed: mix_seed(&[cfg.seed, id as u64]),
        })
        .collect();
    let manifest = DatasetManifest { entries };
    manifest.check_disjoint()?;
    let records = manifest
        .entries
        .iter()
        .map(|e| render_record(e, cfg.image_size, cfg.nuclei_density))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

fn af_path(dir: &Path, id: usize, z: f64, channel: &str) -> PathBuf {
    let t = z_tenths(z);
    let sign = if t < 0 { '-' } else { '+' };
    let a = t.unsigned_abs();
    dir.join(format!("fov{id:04}_z{sign}{}.{}um_{channel}.png", a / 10, a % 10))
}

fn stain_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("fov{id:04}_stain.png"))
}

const CHANNELS: [&str; 2] = ["dapi", "txred"];

/// Write the manifest and every record's PNGs into `dir`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, records: &[FovRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for rec in records {
        for (z, plane) in rec.z_axial.iter().zip(&rec.af_stack) {
            let (_, h, w) = plane.chw().map_err(|e| PhantomError::Format(e.to_string()))?;
            for (ch, name) in CHANNELS.iter().enumerate() {
                let px: Vec<u16> = plane
                    .channel(ch)
                    .iter()
                    .map(|&v| (v as f64 * 65535.0).round().clamp(0.0, 65535.0) as u16)
                    .collect();
                let img: ImageBuffer<Luma<u16>, _> =
                    ImageBuffer::from_raw(w as u32, h as u32, px).expect("buffer matches dims");
                img.save_with_format(af_path(dir, rec.id, *z, name), image::ImageFormat::Png)?;
            }
        }
        let (_, h, w) = rec.stain_rgb.chw().map_err(|e| PhantomError::Format(e.to_string()))?;
        let plane = h * w;
        let src = rec.stain_rgb.data();
        let mut px = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for k in 0..3 {
                px.push(src[k * plane + i].round().clamp(0.0, 255.0) as u8);
            }
        }
        let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, px).expect("buffer matches dims");
        img.save_with_format(stain_path(dir, rec.id), image::ImageFormat::Png)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.to_csv())?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::from_csv(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
}

pub fn load_record(dir: &Path, entry: &ManifestEntry) -> Result<FovRecord> {
    let z_axial = match entry.planes {
        9 => train_planes(),
        13 => eval_planes(),
        n => return Err(PhantomError::Format(format!("record {} has {n} planes", entry.id))),
    };
    let mut af_stack = Vec::with_capacity(z_axial.len());
    for &z in &z_axial {
        let mut data = Vec::new();
        let mut hw = None;
        for name in CHANNELS {
            let img = image::open(af_path(dir, entry.id, z, name))?;
            if !matches!(img, image::DynamicImage::ImageLuma16(_)) {
                return Err(PhantomError::Format(format!("fov {} plane {z}: expected 16-bit gray", entry.id)));
            }
            let img = img.into_luma16();
            let dims = (img.height() as usize, img.width() as usize);
            if hw.is_some_and(|d| d != dims) {
                return Err(PhantomError::Format(format!("fov {} plane {z}: channel sizes differ", entry.id)));
            }
            hw = Some(dims);
            data.extend(img.into_raw().into_iter().map(|v| (v as f64 / 65535.0) as f32));
        }
        let (h, w) = hw.expect("two channels read");
        af_stack.push(Tensor::new(vec![2, h, w], data).expect("consistent plane"));
    }
    let img = image::open(stain_path(dir, entry.id))?.into_rgb8();
    let (h, w) = (img.height() as usize, img.width() as usize);
    let raw = img.into_raw();
    let stain_rgb = Tensor::from_fn(&[3, h, w], |i| {
        let (k, p) = (i / (h * w), i % (h * w));
        raw[3 * p + k] as f32
    });
    Ok(FovRecord {
        id: entry.id,
        z_axial,
        af_stack,
        stain_rgb,
    })
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<FovRecord>)> {
    let manifest = load_manifest(dir)?;
    let records = manifest
        .entries
        .iter()
        .map(|e| load_record(dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}
