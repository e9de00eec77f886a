//! Plain-text `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown keys are rejected. `scale_profile` and `stage` pick
//! the defaults that the remaining keys override, regardless of the order
//! in which they appear.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::losses::{DrLossWeights, VsLossWeights};
use crate::phantom::DatasetConfig;

use super::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    VirtualStainer,
    Refocuser,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::VirtualStainer => "virtual_stainer",
            Stage::Refocuser => "refocuser",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "virtual_stainer" => Some(Stage::VirtualStainer),
            "refocuser" => Some(Stage::Refocuser),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleProfile {
    /// 64 px patches, narrow networks, short runs on a CPU.
    Desk,
    /// 512 px patches and the full iteration budgets.
    Paper,
}

impl ScaleProfile {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleProfile::Desk => "desk",
            ScaleProfile::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(ScaleProfile::Desk),
            "paper" => Some(ScaleProfile::Paper),
            _ => None,
        }
    }
}

/// Stainer weights for desk runs. The summed TV term and the adversarial
/// term at their default weights swamp the per-pixel MAE on small patches
/// and the stainer collapses to the mean color.
pub const DESK_VS_WEIGHTS: VsLossWeights = VsLossWeights {
    eta: 0.02,
    lambda: 1e-6,
};

/// Refocuser weights for desk runs. The adversarial and perceptual terms
/// pull the output toward texture the phantoms do not have and cost
/// accuracy at moderate defocus, so only style, MAE and MS-SSIM remain.
pub const DESK_DR_WEIGHTS: DrLossWeights = DrLossWeights {
    a: 0.0,
    b: 0.0,
    c: 500.0,
    d: 100.0,
    e: 100.0,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub scale_profile: ScaleProfile,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub patch_size: usize,
    pub base_channels: usize,
    pub augment: bool,
    pub vs_weights: VsLossWeights,
    pub dr_weights: DrLossWeights,
    pub seed: u64,
    /// Iterations between validation passes of the plateau detector;
    /// 0 picks 10% of the budget.
    pub validate_every: usize,
}

impl TrainConfig {
    pub fn new(stage: Stage, profile: ScaleProfile) -> Self {
        let (gen_lr, disc_lr, batch_size, max_iterations) = match (profile, stage) {
            (ScaleProfile::Paper, Stage::VirtualStainer) => (1e-4, 1e-5, 4, 40_000),
            (ScaleProfile::Paper, Stage::Refocuser) => (1e-5, 1e-6, 5, 100_000),
            (ScaleProfile::Desk, Stage::VirtualStainer) => (1e-3, 1e-4, 4, 400),
            (ScaleProfile::Desk, Stage::Refocuser) => (1e-3, 1e-4, 4, 2000),
        };
        let (patch_size, base_channels) = match profile {
            ScaleProfile::Paper => (512, 32),
            ScaleProfile::Desk => (64, 8),
        };
        Self {
            stage,
            scale_profile: profile,
            gen_lr,
            disc_lr,
            batch_size,
            max_iterations,
            patch_size,
            base_channels,
            augment: true,
            vs_weights: match profile {
                ScaleProfile::Paper => VsLossWeights::default(),
                ScaleProfile::Desk => DESK_VS_WEIGHTS,
            },
            dr_weights: match profile {
                ScaleProfile::Paper => DrLossWeights::default(),
                ScaleProfile::Desk => DESK_DR_WEIGHTS,
            },
            seed: 0,
            validate_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.gen_lr > 0.0 && self.disc_lr > 0.0) {
            return bad(format!("learning rates must be positive, got {} and {}", self.gen_lr, self.disc_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patch_size == 0 {
            return bad("patch_size must be at least 1".into());
        }
        self.vs_weights.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.dr_weights.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical text form; its hash identifies a training run.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "stage = {}", self.stage.as_str());
        let _ = writeln!(w, "scale_profile = {}", self.scale_profile.as_str());
        let _ = writeln!(w, "gen_lr = {:e}", self.gen_lr);
        let _ = writeln!(w, "disc_lr = {:e}", self.disc_lr);
        let _ = writeln!(w, "batch_size = {}", self.batch_size);
        let _ = writeln!(w, "max_iterations = {}", self.max_iterations);
        let _ = writeln!(w, "patch_size = {}", self.patch_size);
        let _ = writeln!(w, "base_channels = {}", self.base_channels);
        let _ = writeln!(w, "augment = {}", self.augment);
        let _ = writeln!(w, "vs_eta = {:e}", self.vs_weights.eta);
        let _ = writeln!(w, "vs_lambda = {:e}", self.vs_weights.lambda);
        let d = &self.dr_weights;
        for (k, v) in [("dr_a", d.a), ("dr_b", d.b), ("dr_c", d.c), ("dr_d", d.d), ("dr_e", d.e)] {
            let _ = writeln!(w, "{k} = {v:e}");
        }
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "validate_every = {}", self.validate_every);
        s
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

/// Everything one configuration file can set.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    /// Where training writes its checkpoint.
    pub checkpoint: PathBuf,
    pub vs_checkpoint: Option<PathBuf>,
    pub dr_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            train: TrainConfig::new(Stage::VirtualStainer, ScaleProfile::Desk),
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.vstn"),
            vs_checkpoint: None,
            dr_checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "stage",
    "scale_profile",
    "gen_lr",
    "disc_lr",
    "batch_size",
    "max_iterations",
    "patch_size",
    "base_channels",
    "augment",
    "vs_eta",
    "vs_lambda",
    "dr_a",
    "dr_b",
    "dr_c",
    "dr_d",
    "dr_e",
    "seed",
    "validate_every",
    "n_train",
    "n_validation",
    "n_test",
    "image_size",
    "nuclei_density",
    "data_seed",
    "data_dir",
    "checkpoint",
    "vs_checkpoint",
    "dr_checkpoint",
    "out_dir",
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| PipelineError::Config(format!("line {line}: cannot parse `{v}` for `{key}`")))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(PipelineError::Config(format!("line {}: expected `key = value`", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(PipelineError::Config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if entries.insert(k.to_string(), (v.to_string(), i + 1)).is_some() {
                return Err(PipelineError::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        let get = |k: &str| entries.get(k).map(|(v, l)| (v.as_str(), *l));
        let stage = match get("stage") {
            Some((v, l)) => Stage::parse(v)
                .ok_or_else(|| PipelineError::Config(format!("line {l}: unknown stage `{v}`")))?,
            None => Stage::VirtualStainer,
        };
        let profile = match get("scale_profile") {
            Some((v, l)) => ScaleProfile::parse(v)
                .ok_or_else(|| PipelineError::Config(format!("line {l}: unknown scale profile `{v}`")))?,
            None => ScaleProfile::Desk,
        };
        let mut cfg = Config {
            train: TrainConfig::new(stage, profile),
            ..Config::default()
        };
        for (k, (v, l)) in &entries {
            let (v, l) = (v.as_str(), *l);
            let t = &mut cfg.train;
            let d = &mut cfg.dataset;
            match k.as_str() {
                "stage" | "scale_profile" => {}
                "gen_lr" => t.gen_lr = parse_value(k, v, l)?,
                "disc_lr" => t.disc_lr = parse_value(k, v, l)?,
                "batch_size" => t.batch_size = parse_value(k, v, l)?,
                "max_iterations" => t.max_iterations = parse_value(k, v, l)?,
                "patch_size" => {
                    t.patch_size = parse_value(k, v, l)?;
                    d.patch_size = t.patch_size;
                }
                "base_channels" => t.base_channels = parse_value(k, v, l)?,
                "augment" => t.augment = parse_value(k, v, l)?,
                "vs_eta" => t.vs_weights.eta = parse_value(k, v, l)?,
                "vs_lambda" => t.vs_weights.lambda = parse_value(k, v, l)?,
                "dr_a" => t.dr_weights.a = parse_value(k, v, l)?,
                "dr_b" => t.dr_weights.b = parse_value(k, v, l)?,
                "dr_c" => t.dr_weights.c = parse_value(k, v, l)?,
                "dr_d" => t.dr_weights.d = parse_value(k, v, l)?,
                "dr_e" => t.dr_weights.e = parse_value(k, v, l)?,
                "seed" => t.seed = parse_value(k, v, l)?,
                "validate_every" => t.validate_every = parse_value(k, v, l)?,
                "n_train" => d.n_train = parse_value(k, v, l)?,
                "n_validation" => d.n_validation = parse_value(k, v, l)?,
                "n_test" => d.n_test = parse_value(k, v, l)?,
                "image_size" => d.image_size = parse_value(k, v, l)?,
                "nuclei_density" => d.nuclei_density = parse_value(k, v, l)?,
                "data_seed" => d.seed = parse_value(k, v, l)?,
                "data_dir" => cfg.data_dir = PathBuf::from(v),
                "checkpoint" => cfg.checkpoint = PathBuf::from(v),
                "vs_checkpoint" => cfg.vs_checkpoint = Some(PathBuf::from(v)),
                "dr_checkpoint" => cfg.dr_checkpoint = Some(PathBuf::from(v)),
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                _ => unreachable!("filtered against KEYS"),
            }
        }
        if !entries.contains_key("patch_size") {
            cfg.dataset.patch_size = cfg.train.patch_size.min(cfg.dataset.image_size);
            cfg.train.patch_size = cfg.dataset.patch_size;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
