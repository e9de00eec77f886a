//! Binary checkpoint format.
//!
//! ```text
//! "VSTN"  u32 version
//! str     architecture            (u32 length + UTF-8)
//! str     training configuration
//! [u8;32] SHA-256 of the training configuration
//! u64     iteration
//! 2 × parameter block             generator, discriminator
//! 2 × optimizer block
//! u32     CRC-32 of every preceding byte
//! ```
//!
//! A parameter block is `u32 count` then, per tensor, `str name`,
//! `u32 ndim`, `u32 dims…` and the values as little-endian `f32`. An
//! optimizer block is `u64 step`, three `f64` hyper-parameters and the first
//! and second moments in parameter order. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::models::{
    DiscriminatorConfig, DiscriminatorNetwork, GeneratorConfig, GeneratorNetwork, GeneratorVariant, TapPoint,
};
use crate::tensor::{AdamConfig, AdamState, ParamSet, PoolKind, Tensor};

use super::{PipelineError, Result};

pub const MAGIC: &[u8; 4] = b"VSTN";
pub const FORMAT_VERSION: u32 = 1;

/// Network layouts stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Architecture {
    /// Text form including initialization seeds.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let d = &self.discriminator;
        format!(
            "generator variant={} levels={} convs={} pool={} base={} in={} out={} residual_down={} residual_up={} input_skip={} tap={} seed={}\n\
             discriminator in={} base={} blocks={} seed={}\n",
            g.variant.as_str(),
            g.levels,
            g.convs_per_block,
            match g.pool {
                PoolKind::Avg => "avg",
                PoolKind::Max => "max",
            },
            g.base_channels,
            g.in_channels,
            g.out_channels,
            g.residual_down,
            g.residual_up,
            g.input_skip,
            match g.tap {
                TapPoint::PrePool => "pre_pool",
                TapPoint::PostPool => "post_pool",
            },
            g.seed,
            d.in_channels,
            d.base_channels,
            d.blocks,
            d.seed,
        )
    }

    /// Layout text without seeds; two checkpoints are compatible when
    /// these agree.
    pub fn layout_key(&self) -> String {
        self.to_text()
            .lines()
            .map(|l| l.split_whitespace().filter(|t| !t.starts_with("seed=")).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| PipelineError::Checkpoint(format!("architecture: {m}"));
        let mut lines = text.lines();
        let fields = |line: Option<&str>, head: &str| -> Result<std::collections::HashMap<String, String>> {
            let line = line.ok_or_else(|| bad("missing line"))?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(head) {
                return Err(bad(&format!("expected `{head}` line")));
            }
            toks.map(|t| {
                t.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| bad(&format!("bad token `{t}`")))
            })
            .collect()
        };
        let g = fields(lines.next(), "generator")?;
        let d = fields(lines.next(), "discriminator")?;
        fn get<T: std::str::FromStr>(m: &std::collections::HashMap<String, String>, k: &str) -> Result<T> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PipelineError::Checkpoint(format!("architecture: bad or missing `{k}`")))
        }
        let variant: String = get(&g, "variant")?;
        let pool: String = get(&g, "pool")?;
        let tap: String = get(&g, "tap")?;
        let generator = GeneratorConfig {
            variant: GeneratorVariant::parse(&variant).ok_or_else(|| bad("variant"))?,
            levels: get(&g, "levels")?,
            convs_per_block: get(&g, "convs")?,
            pool: match pool.as_str() {
                "avg" => PoolKind::Avg,
                "max" => PoolKind::Max,
                _ => return Err(bad("pool")),
            },
            base_channels: get(&g, "base")?,
            in_channels: get(&g, "in")?,
            out_channels: get(&g, "out")?,
            residual_down: get(&g, "residual_down")?,
            residual_up: get(&g, "residual_up")?,
            input_skip: get(&g, "input_skip")?,
            tap: match tap.as_str() {
                "pre_pool" => TapPoint::PrePool,
                "post_pool" => TapPoint::PostPool,
                _ => return Err(bad("tap")),
            },
            seed: get(&g, "seed")?,
        };
        let discriminator = DiscriminatorConfig {
            in_channels: get(&d, "in")?,
            base_channels: get(&d, "base")?,
            blocks: get(&d, "blocks")?,
            seed: get(&d, "seed")?,
        };
        Ok(Self {
            generator,
            discriminator,
        })
    }
}

/// Complete state of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub train_config: String,
    pub config_hash: [u8; 32],
    pub iteration: u64,
    pub generator: ParamSet<f32>,
    pub discriminator: ParamSet<f32>,
    pub gen_opt: AdamState<f32>,
    pub disc_opt: AdamState<f32>,
}

impl Checkpoint {
    pub fn generator_network(&self) -> Result<GeneratorNetwork<f32>> {
        Ok(GeneratorNetwork::new(self.architecture.generator.clone())?.with_params(self.generator.clone())?)
    }

    pub fn discriminator_network(&self) -> Result<DiscriminatorNetwork<f32>> {
        Ok(DiscriminatorNetwork::new(self.architecture.discriminator.clone())?
            .with_params(self.discriminator.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.architecture.to_text());
        w.str(&self.train_config);
        w.0.extend_from_slice(&self.config_hash);
        w.u64(self.iteration);
        w.params(&self.generator);
        w.params(&self.discriminator);
        w.adam(&self.gen_opt);
        w.adam(&self.disc_opt);
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(PipelineError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(PipelineError::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PipelineError::Checkpoint(format!("unsupported format version {version}")));
        }
        let architecture = Architecture::parse(&r.str()?)?;
        let train_config = r.str()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let iteration = r.u64()?;
        let generator = r.params()?;
        let discriminator = r.params()?;
        let gen_opt = r.adam(&generator)?;
        let disc_opt = r.adam(&discriminator)?;
        if r.pos != body.len() {
            return Err(PipelineError::Checkpoint("trailing bytes".into()));
        }
        let ck = Self {
            architecture,
            train_config,
            config_hash,
            iteration,
            generator,
            discriminator,
            gen_opt,
            disc_opt,
        };
        // Parameter names and shapes must match the stored layout.
        ck.generator_network()?;
        ck.discriminator_network()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Load and refuse anything whose layout differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &Architecture) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_architecture(expected)?;
        Ok(ck)
    }

    pub fn check_architecture(&self, expected: &Architecture) -> Result<()> {
        if self.architecture.layout_key() != expected.layout_key() {
            return Err(PipelineError::ArchitectureMismatch {
                expected: expected.layout_key(),
                found: self.architecture.layout_key(),
            });
        }
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn values(&mut self, t: &Tensor<f32>) {
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn params(&mut self, p: &ParamSet<f32>) {
        self.u32(p.len() as u32);
        for (name, t) in p.iter() {
            self.str(name);
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u32(d as u32);
            }
            self.values(t);
        }
    }

    fn adam(&mut self, a: &AdamState<f32>) {
        self.u64(a.t);
        for v in [a.config.beta1, a.config.beta2, a.config.epsilon] {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        for t in a.m.iter().chain(&a.v) {
            self.values(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(PipelineError::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| PipelineError::Checkpoint("invalid UTF-8".into()))
    }

    fn values(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(4 * n)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| PipelineError::Checkpoint(e.to_string()))
    }

    fn params(&mut self) -> Result<ParamSet<f32>> {
        let n = self.u32()? as usize;
        let mut p = ParamSet::new();
        for _ in 0..n {
            let name = self.str()?;
            let ndim = self.u32()? as usize;
            if ndim > 8 {
                return Err(PipelineError::Checkpoint(format!("tensor `{name}` has {ndim} dims")));
            }
            let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let t = self.values(&shape)?;
            p.push(name, t);
        }
        Ok(p)
    }

    fn adam(&mut self, params: &ParamSet<f32>) -> Result<AdamState<f32>> {
        let t = self.u64()?;
        let config = AdamConfig {
            beta1: self.f64()?,
            beta2: self.f64()?,
            epsilon: self.f64()?,
        };
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let m = shapes.iter().map(|s| self.values(s)).collect::<Result<Vec<_>>>()?;
        let v = shapes.iter().map(|s| self.values(s)).collect::<Result<Vec<_>>>()?;
        Ok(AdamState { m, v, t, config })
    }
}
