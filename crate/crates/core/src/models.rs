//! U-Net generators and the strided-convolution discriminator.
//!
//! Both generator variants share one layout: `levels` downsampling blocks
//! whose widths double (`base · 2^l`), each followed by 2×2 pooling, then
//! `levels` upsampling blocks that resize 2×, concatenate the same-level
//! encoder output and shrink the concatenated channels by four. A 3×3 head
//! maps the final `base / 2` channels to the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Padding, ParamSet, PoolKind, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input {got:?} incompatible with network: {reason}")]
    Input { got: Vec<usize>, reason: String },
    #[error("{0} requires a virtual-stainer network")]
    WrongVariant(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const LEAKY_SLOPE: f64 = 0.1;
const RESIDUAL_GAIN: f64 = 0.25;
/// He gain undone for layers without a following activation.
const LINEAR_GAIN: f64 = 0.710_633_5;
const HEAD_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeneratorVariant {
    VirtualStainer,
    Refocuser,
}

impl GeneratorVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::VirtualStainer => "virtual_stainer",
            Self::Refocuser => "refocuser",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "virtual_stainer" => Some(Self::VirtualStainer),
            "refocuser" => Some(Self::Refocuser),
            _ => None,
        }
    }
}

/// Where the encoder feature taps are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TapPoint {
    PrePool,
    PostPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub variant: GeneratorVariant,
    pub levels: usize,
    pub convs_per_block: usize,
    pub pool: PoolKind,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub residual_down: bool,
    pub residual_up: bool,
    /// Add the network input to the head output (needs `in == out`).
    pub input_skip: bool,
    pub tap: TapPoint,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Two autofluorescence channels in, three YCbCr channels out.
    pub fn virtual_stainer(base_channels: usize, seed: u64) -> Self {
        Self {
            variant: GeneratorVariant::VirtualStainer,
            levels: 4,
            convs_per_block: 3,
            pool: PoolKind::Avg,
            base_channels,
            in_channels: 2,
            out_channels: 3,
            residual_down: true,
            residual_up: false,
            input_skip: false,
            tap: TapPoint::PostPool,
            seed,
        }
    }

    pub fn refocuser(base_channels: usize, seed: u64) -> Self {
        Self {
            variant: GeneratorVariant::Refocuser,
            levels: 5,
            convs_per_block: 2,
            pool: PoolKind::Max,
            base_channels,
            in_channels: 2,
            out_channels: 2,
            residual_down: true,
            residual_up: true,
            input_skip: true,
            tap: TapPoint::PostPool,
            seed,
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn validate(&self) -> Result<()> {
        if self.base_channels < 4 || self.base_channels % 2 != 0 {
            return Err(ModelError::Config(format!(
                "base_channels must be an even number >= 4, got {}",
                self.base_channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.levels == 0 || self.convs_per_block == 0 {
            return Err(ModelError::Config("channel, level and conv counts must be positive".into()));
        }
        if self.input_skip && self.in_channels != self.out_channels {
            return Err(ModelError::Config("input_skip needs in_channels == out_channels".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<ConvLayer>,
    /// `None` means identity shortcut (when residual and widths agree).
    shortcut: Option<ConvLayer>,
    residual: bool,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut self.rng)))
    }

    fn conv<T: Real>(
        &mut self,
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> ConvLayer {
        let fan_in = (c_in * k * k) as f64;
        let std = gain * (2.0 / (fan_in * (1.0 + LEAKY_SLOPE * LEAKY_SLOPE))).sqrt();
        let weight = params.push(format!("{name}.weight"), self.normal(&[c_out, c_in, k, k], std));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        ConvLayer { weight, bias, stride }
    }

    fn dense<T: Real>(&mut self, params: &mut ParamSet<T>, name: &str, n_in: usize, n_out: usize) -> (usize, usize) {
        let std = (2.0 / n_in as f64).sqrt();
        let w = params.push(format!("{name}.weight"), self.normal(&[n_out, n_in], std));
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[n_out]));
        (w, b)
    }
}

fn apply_conv<T: Real>(tape: &mut Tape<T>, p: &[Var], layer: &ConvLayer, x: Var) -> Result<Var> {
    Ok(tape.conv2d(x, p[layer.weight], Some(p[layer.bias]), layer.stride, Padding::SameReflect)?)
}

fn apply_block<T: Real>(tape: &mut Tape<T>, p: &[Var], block: &Block, x: Var) -> Result<Var> {
    let mut h = x;
    for layer in &block.convs {
        h = apply_conv(tape, p, layer, h)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    }
    if block.residual {
        let short = match &block.shortcut {
            Some(proj) => apply_conv(tape, p, proj, x)?,
            None => x,
        };
        h = tape.add(h, short)?;
    }
    Ok(h)
}

fn build_block<T: Real>(
    init: &mut Init,
    params: &mut ParamSet<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    n_convs: usize,
    residual: bool,
) -> Block {
    let convs = (0..n_convs)
        .map(|i| {
            let cin = if i == 0 { c_in } else { c_out };
            // Damp the residual branch so activations stay O(1) with depth.
            let gain = if residual && i + 1 == n_convs { RESIDUAL_GAIN } else { 1.0 };
            init.conv(params, &format!("{name}.conv{i}"), cin, c_out, 3, 1, gain)
        })
        .collect();
    let shortcut = (residual && c_in != c_out).then(|| init.conv(params, &format!("{name}.proj"), c_in, c_out, 1, 1, LINEAR_GAIN));
    Block {
        convs,
        shortcut,
        residual,
    }
}

/// Outputs of a generator forward pass.
pub struct GeneratorOutput {
    pub output: Var,
    /// One tap per downsampling block, shallow to deep.
    pub taps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GeneratorNetwork<T: Real = f32> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    down: Vec<Block>,
    up: Vec<Block>,
    head: ConvLayer,
    frozen: bool,
}

impl<T: Real> GeneratorNetwork<T> {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed);
        let mut params = ParamSet::new();
        let mut down = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let c_in = if l == 0 { config.in_channels } else { config.width(l - 1) };
            down.push(build_block(
                &mut init,
                &mut params,
                &format!("down{l}"),
                c_in,
                config.width(l),
                config.convs_per_block,
                config.residual_down,
            ));
        }
        // up[l] consumes concat(resized deeper features, skip l) = 2·width(l).
        let mut up = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            up.push(build_block(
                &mut init,
                &mut params,
                &format!("up{l}"),
                2 * config.width(l),
                config.width(l) / 2,
                config.convs_per_block,
                config.residual_up,
            ));
        }
        let head = init.conv(&mut params, "head", config.base_channels / 2, config.out_channels, 3, 1, HEAD_GAIN);
        Ok(Self {
            config,
            params,
            down,
            up,
            head,
            frozen: false,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mark parameters as constants: binds never request their gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn with_params(mut self, params: ParamSet<T>) -> Result<Self> {
        self.params.assign(&params)?;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> GeneratorNetwork<U> {
        GeneratorNetwork {
            config: self.config.clone(),
            params: self.params.cast(),
            down: self.down.clone(),
            up: self.up.clone(),
            head: self.head,
            frozen: self.frozen,
        }
    }

    /// Bind parameters on `tape`, trainable unless the network is frozen.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.bind(tape, !self.frozen)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let err = |reason: String| ModelError::Input {
            got: shape.to_vec(),
            reason,
        };
        let [c, h, w] = shape[..] else {
            return Err(err("expected [C, H, W]".into()));
        };
        if c != self.config.in_channels {
            return Err(err(format!("expected {} channels", self.config.in_channels)));
        }
        let f = 1usize << self.config.levels;
        if h % f != 0 || w % f != 0 || h / f < 2 || w / f < 2 {
            return Err(err(format!("spatial dims must be multiples of {f} and at least {}", 2 * f)));
        }
        Ok(())
    }

    fn encode(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<(Vec<Var>, Vec<Var>, Var)> {
        self.check_input(tape.value(x).shape())?;
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut taps = Vec::with_capacity(self.config.levels);
        let mut h = x;
        for block in &self.down {
            let y = apply_block(tape, p, block, h)?;
            h = tape.pool2(y, self.config.pool)?;
            skips.push(y);
            taps.push(match self.config.tap {
                TapPoint::PrePool => y,
                TapPoint::PostPool => h,
            });
        }
        Ok((skips, taps, h))
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<GeneratorOutput> {
        let (skips, taps, mut h) = self.encode(tape, p, x)?;
        for (block, skip) in self.up.iter().zip(&skips).rev() {
            h = tape.resize_bilinear_2x(h)?;
            h = tape.concat_channels(&[h, *skip])?;
            h = apply_block(tape, p, block, h)?;
        }
        let mut output = apply_conv(tape, p, &self.head, h)?;
        if self.config.input_skip {
            output = tape.add(output, x)?;
        }
        Ok(GeneratorOutput { output, taps })
    }

    /// Encoder feature maps only; used for the style loss.
    pub fn tap_features(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Vec<Var>> {
        if self.config.variant != GeneratorVariant::VirtualStainer {
            return Err(ModelError::WrongVariant("tap_vs_features"));
        }
        Ok(self.encode(tape, p, x)?.1)
    }

    /// Gradient-free forward pass on a concrete input.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out.output).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl DiscriminatorConfig {
    pub fn new(in_channels: usize, base_channels: usize, seed: u64) -> Self {
        Self {
            in_channels,
            base_channels,
            blocks: 6,
            seed,
        }
    }

    pub fn width(&self, block: usize) -> usize {
        self.base_channels << block
    }
}

pub struct DiscriminatorOutput {
    /// Scalar in (0, 1).
    pub prob: Var,
    /// Output of every convolution block, shallow to deep.
    pub taps: Vec<Var>,
}

/// Six two-convolution blocks (the second strided), global average pooling
/// and two dense layers ending in a sigmoid.
#[derive(Clone, Debug)]
pub struct DiscriminatorNetwork<T: Real = f32> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    blocks: Vec<[ConvLayer; 2]>,
    dense: [(usize, usize); 2],
}

impl<T: Real> DiscriminatorNetwork<T> {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        if config.base_channels < 2 || config.in_channels == 0 || config.blocks == 0 {
            return Err(ModelError::Config(format!("invalid discriminator config {config:?}")));
        }
        let mut init = Init::new(config.seed);
        let mut params = ParamSet::new();
        let mut blocks = Vec::with_capacity(config.blocks);
        for j in 0..config.blocks {
            let c_in = if j == 0 { config.in_channels } else { config.width(j - 1) };
            let c = config.width(j);
            blocks.push([
                init.conv(&mut params, &format!("block{j}.conv0"), c_in, c, 3, 1, 1.0),
                init.conv(&mut params, &format!("block{j}.conv1"), c, c, 3, 2, 1.0),
            ]);
        }
        let c = config.width(config.blocks - 1);
        let d0 = init.dense(&mut params, "dense0", c, c / 2);
        let d1 = init.dense(&mut params, "dense1", c / 2, 1);
        Ok(Self {
            config,
            params,
            blocks,
            dense: [d0, d1],
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn with_params(mut self, params: ParamSet<T>) -> Result<Self> {
        self.params.assign(&params)?;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> DiscriminatorNetwork<U> {
        DiscriminatorNetwork {
            config: self.config.clone(),
            params: self.params.cast(),
            blocks: self.blocks.clone(),
            dense: self.dense,
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let err = |reason: String| ModelError::Input {
            got: shape.to_vec(),
            reason,
        };
        let [c, h, w] = shape[..] else {
            return Err(err("expected [C, H, W]".into()));
        };
        if c != self.config.in_channels {
            return Err(err(format!("expected {} channels", self.config.in_channels)));
        }
        let f = 1usize << self.config.blocks;
        if h % f != 0 || w % f != 0 {
            return Err(err(format!("spatial dims must be multiples of {f}")));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<DiscriminatorOutput> {
        self.check_input(tape.value(x).shape())?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            for layer in block {
                h = apply_conv(tape, p, layer, h)?;
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            }
            taps.push(h);
        }
        let g = tape.global_avg_pool(h)?;
        let [(w0, b0), (w1, b1)] = self.dense;
        let d = tape.dense(g, p[w0], p[b0])?;
        let d = tape.leaky_relu(d, LEAKY_SLOPE)?;
        let logit = tape.dense(d, p[w1], p[b1])?;
        let prob = tape.sigmoid(logit)?;
        Ok(DiscriminatorOutput { prob, taps })
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<T> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out.prob).item())
    }
}

pub fn build_vs_generator<T: Real>(base_channels: usize, seed: u64) -> Result<GeneratorNetwork<T>> {
    GeneratorNetwork::new(GeneratorConfig::virtual_stainer(base_channels, seed))
}

pub fn build_dr_generator<T: Real>(base_channels: usize, seed: u64) -> Result<GeneratorNetwork<T>> {
    GeneratorNetwork::new(GeneratorConfig::refocuser(base_channels, seed))
}

pub fn build_discriminator<T: Real>(in_channels: usize, base_channels: usize, seed: u64) -> Result<DiscriminatorNetwork<T>> {
    DiscriminatorNetwork::new(DiscriminatorConfig::new(in_channels, base_channels, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shapes(tape: &Tape<f32>, vars: &[Var]) -> Vec<Vec<usize>> {
        vars.iter().map(|&v| tape.value(v).shape().to_vec()).collect()
    }

    #[test]
    fn vs_generator_shapes_and_taps() {
        let net = build_vs_generator::<f32>(8, 1).unwrap();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[2, 64, 64], 0.3));
        let out = net.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(out.output).shape(), &[3, 64, 64]);
        assert_eq!(
            shapes(&tape, &out.taps),
            vec![vec![8, 32, 32], vec![16, 16, 16], vec![32, 8, 8], vec![64, 4, 4]]
        );
        let taps = net.tap_features(&mut tape, &p, x).unwrap();
        assert_eq!(taps.len(), 4);
        for (a, b) in taps.iter().zip(&out.taps) {
            assert_eq!(tape.value(*a), tape.value(*b));
        }
    }

    #[test]
    fn widths_double_per_level() {
        let cfg = GeneratorConfig::virtual_stainer(16, 0);
        assert_eq!((0..4).map(|l| cfg.width(l)).collect::<Vec<_>>(), vec![16, 32, 64, 128]);
    }

    #[test]
    fn dr_generator_layout() {
        let net = build_dr_generator::<f32>(8, 2).unwrap();
        assert_eq!(net.config().pool, PoolKind::Max);
        assert_eq!(net.down.len(), 5);
        assert_eq!(net.up.len(), 5);
        assert!(net.down.iter().chain(&net.up).all(|b| b.residual && b.convs.len() == 2));
        let zero = Tensor::zeros(&[2, 64, 64]);
        let y = net.predict(&zero).unwrap();
        assert_eq!(y.shape(), &[2, 64, 64]);
        assert!(y.all_finite());
        assert!(net.predict(&Tensor::zeros(&[2, 48, 48])).is_err());
        assert!(net.predict(&Tensor::zeros(&[3, 64, 64])).is_err());
        assert!(matches!(
            net.tap_features(&mut Tape::new(), &[], Var::from_test(0)),
            Err(ModelError::WrongVariant(_))
        ));
    }

    #[test]
    fn vs_generator_structure() {
        let net = build_vs_generator::<f32>(8, 2).unwrap();
        assert!(net.down.iter().all(|b| b.residual && b.convs.len() == 3));
        assert!(net.up.iter().all(|b| !b.residual && b.convs.len() == 3));
        assert_eq!(net.config().pool, PoolKind::Avg);
        // Up-block input/output widths: concat 2·w(l) -> w(l)/2.
        for (l, b) in net.up.iter().enumerate() {
            let w = net.params.get(b.convs[0].weight).shape().to_vec();
            assert_eq!(w[1], 2 * (8 << l));
            assert_eq!(w[0], (8 << l) / 2);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_vs_generator::<f32>(8, 7).unwrap();
        let b = build_vs_generator::<f32>(8, 7).unwrap();
        let c = build_vs_generator::<f32>(8, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert_eq!(a.params().numel(), b.params().numel());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(build_vs_generator::<f32>(2, 0).is_err());
        assert!(build_vs_generator::<f32>(5, 0).is_err());
    }

    #[test]
    fn discriminator_shapes() {
        let d = build_discriminator::<f32>(3, 4, 3).unwrap();
        let mut tape = Tape::new();
        let p = d.params().bind(&mut tape, true);
        let x = tape.constant(Tensor::full(&[3, 64, 64], 0.5));
        let out = d.forward(&mut tape, &p, x).unwrap();
        let sizes: Vec<(usize, usize)> = out
            .taps
            .iter()
            .map(|&t| {
                let s = tape.value(t).shape();
                (s[0], s[1])
            })
            .collect();
        assert_eq!(sizes, vec![(4, 32), (8, 16), (16, 8), (32, 4), (64, 2), (128, 1)]);
        let prob = tape.value(out.prob).item();
        assert!(prob > 0.0 && prob < 1.0);
        assert!(d.predict(&Tensor::zeros(&[3, 32, 32])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn generator_preserves_spatial_size(mh in 1usize..3, mw in 1usize..3, seed in 0u64..100) {
            let net = build_vs_generator::<f32>(4, seed).unwrap();
            let (h, w) = (32 * mh, 32 * mw);
            let y = net.predict(&Tensor::full(&[2, h, w], 0.1)).unwrap();
            prop_assert_eq!(y.shape(), &[3, h, w]);
            let dr = build_dr_generator::<f32>(4, seed).unwrap();
            let (h, w) = (64 * mh, 64 * mw);
            let y = dr.predict(&Tensor::full(&[2, h, w], 0.1)).unwrap();
            prop_assert_eq!(y.shape(), &[2, h, w]);
        }
    }
}
