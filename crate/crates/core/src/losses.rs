//! Generator and discriminator objectives for both networks.
//!
//! Terms are built on a [`Tape`] so that composite objectives differentiate
//! end to end. Every composite returns its weighted total together with
//! the unweighted value of each term.

use thiserror::Error;

use crate::models::{DiscriminatorNetwork, GeneratorNetwork, ModelError};
use crate::tensor::{PoolKind, Real, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("discriminator output {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("style loss requires a frozen virtual-stainer network")]
    Unfrozen,
    #[error("image {h}x{w} too small for {scales} scales with a {window}x{window} window")]
    TooSmall {
        h: usize,
        w: usize,
        scales: usize,
        window: usize,
    },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weights of the virtual-staining generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VsLossWeights {
    /// Adversarial weight.
    pub eta: f64,
    /// Total-variation weight.
    pub lambda: f64,
}

impl Default for VsLossWeights {
    fn default() -> Self {
        Self {
            eta: 2000.0,
            lambda: 0.02,
        }
    }
}

/// Weights of the refocusing generator objective, in the order
/// adversarial, perceptual, style, MAE, MS-SSIM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrLossWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl Default for DrLossWeights {
    fn default() -> Self {
        Self {
            a: 300.0,
            b: 2000.0,
            c: 500.0,
            d: 100.0,
            e: 100.0,
        }
    }
}

fn check_weights(ws: &[f64]) -> Result<()> {
    if ws.iter().all(|w| w.is_finite() && *w >= 0.0) {
        Ok(())
    } else {
        Err(LossError::Params(format!("loss weights must be finite and >= 0, got {ws:?}")))
    }
}

impl VsLossWeights {
    pub fn validate(&self) -> Result<()> {
        check_weights(&[self.eta, self.lambda])
    }
}

impl DrLossWeights {
    pub fn validate(&self) -> Result<()> {
        check_weights(&[self.a, self.b, self.c, self.d, self.e])
    }
}

/// Multi-scale SSIM settings.
///
/// `weights[j]` is the exponent of scale `j` (contrast-structure term for
/// all but the coarsest scale, full SSIM at the coarsest). Truncating the
/// default five-scale schedule renormalizes the kept weights to sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MsssimParams {
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

pub const MSSSIM_DEFAULT_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

impl Default for MsssimParams {
    fn default() -> Self {
        Self {
            weights: MSSSIM_DEFAULT_WEIGHTS.to_vec(),
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl MsssimParams {
    /// Default settings restricted to the `scales` finest scales.
    pub fn with_scales(scales: usize) -> Result<Self> {
        if scales == 0 || scales > MSSSIM_DEFAULT_WEIGHTS.len() {
            return Err(LossError::Params(format!("scales must be in 1..=5, got {scales}")));
        }
        let kept = &MSSSIM_DEFAULT_WEIGHTS[..scales];
        let total: f64 = kept.iter().sum();
        Ok(Self {
            weights: kept.iter().map(|w| w / total).collect(),
            ..Self::default()
        })
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Structure-term stabilizer; `C2 / 2` folds the contrast and
    /// structure factors into one `(2σ_fg + C2) / (σ_f² + σ_g² + C2)`.
    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    pub fn gaussian_window(&self) -> Vec<f64> {
        gaussian_window(self.window, self.sigma)
    }
}

/// Normalized `n×n` Gaussian, row-major.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut out = Vec::with_capacity(n * n);
    for a in &g {
        for b in &g {
            out.push(a * b / (s * s));
        }
    }
    out
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(LossError::Shape(sa.to_vec(), sb.to_vec()));
    }
    Ok(())
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().to_f64().unwrap_or(f64::NAN)
}

/// Mean absolute difference over every element (`P·Q·C`).
pub fn mae_loss<T: Real>(tape: &mut Tape<T>, target: Var, output: Var) -> Result<Var> {
    same_shape(tape, target, output)?;
    let d = tape.sub(target, output)?;
    let a = tape.abs(d)?;
    Ok(tape.mean(a)?)
}

/// Anisotropic total variation, summed over channels.
pub fn tv_loss<T: Real>(tape: &mut Tape<T>, image: Var) -> Result<Var> {
    Ok(tape.total_variation(image)?)
}

fn check_prob<T: Real>(tape: &Tape<T>, d: Var) -> Result<()> {
    let v = scalar(tape, d);
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(LossError::OutOfRange(v))
    }
}

/// `(1 - D(fake))²`.
pub fn adv_loss<T: Real>(tape: &mut Tape<T>, d_fake: Var) -> Result<Var> {
    check_prob(tape, d_fake)?;
    let neg = tape.scale(d_fake, -1.0)?;
    let gap = tape.offset(neg, 1.0)?;
    Ok(tape.square(gap)?)
}

/// Least-squares discriminator objective `D(fake)² + (1 - D(real))²`.
pub fn discriminator_loss<T: Real>(tape: &mut Tape<T>, d_fake: Var, d_real: Var) -> Result<Var> {
    check_prob(tape, d_fake)?;
    check_prob(tape, d_real)?;
    let fake = tape.square(d_fake)?;
    let real = adv_loss(tape, d_real)?;
    Ok(tape.add(fake, real)?)
}

/// Mean over paired feature maps of their mean absolute difference.
pub fn feature_distance<T: Real>(tape: &mut Tape<T>, reference: &[Var], output: &[Var]) -> Result<Var> {
    if reference.len() != output.len() || reference.is_empty() {
        return Err(LossError::Params(format!(
            "{} reference maps vs {} output maps",
            reference.len(),
            output.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&r, &o) in reference.iter().zip(output) {
        let m = mae_loss(tape, r, o)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, 1.0 / reference.len() as f64)?)
}

/// Perceptual loss through the refocusing discriminator's block outputs.
pub fn perceptual_loss<T: Real>(
    tape: &mut Tape<T>,
    disc: &DiscriminatorNetwork<T>,
    disc_params: &[Var],
    reference: Var,
    output: Var,
) -> Result<Var> {
    same_shape(tape, reference, output)?;
    let r = disc.forward(tape, disc_params, reference)?.taps;
    let o = disc.forward(tape, disc_params, output)?.taps;
    feature_distance(tape, &r, &o)
}

/// Style loss through the encoder taps of a frozen virtual stainer.
pub fn style_loss<T: Real>(
    tape: &mut Tape<T>,
    frozen_vs: &GeneratorNetwork<T>,
    vs_params: &[Var],
    reference: Var,
    output: Var,
) -> Result<Var> {
    if !frozen_vs.is_frozen() || vs_params.iter().any(|&p| tape.requires_grad(p)) {
        return Err(LossError::Unfrozen);
    }
    same_shape(tape, reference, output)?;
    let r = frozen_vs.tap_features(tape, vs_params, reference)?;
    let o = frozen_vs.tap_features(tape, vs_params, output)?;
    feature_distance(tape, &r, &o)
}

/// MS-SSIM index of `output` against `target`: per channel, the product over
/// scales of clamped contrast-structure means raised to their weights (full
/// SSIM at the coarsest scale), then averaged over channels.
pub fn msssim_index<T: Real>(tape: &mut Tape<T>, target: Var, output: Var, params: &MsssimParams) -> Result<Var> {
    same_shape(tape, target, output)?;
    let (_, h, w) = tape.value(target).chw()?;
    let s = params.scales();
    if s == 0 || params.weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(LossError::Params(format!("bad scale weights {:?}", params.weights)));
    }
    let too_small = LossError::TooSmall {
        h,
        w,
        scales: s,
        window: params.window,
    };
    let f = 1usize << (s - 1);
    if h % f != 0 || w % f != 0 || h / f < params.window || w / f < params.window {
        return Err(too_small);
    }
    let kernel: Vec<T> = params.gaussian_window().into_iter().map(T::lit).collect();
    let (c1, c2) = (params.c1(), params.c2());
    // Floor keeps fractional powers differentiable where the term vanishes.
    const FLOOR: f64 = 1e-6;
    let (mut x, mut y) = (target, output);
    // Per-channel running product over scales, shape [C].
    let mut acc: Option<Var> = None;
    for (j, &weight) in params.weights.iter().enumerate() {
        if j > 0 {
            x = tape.pool2(x, PoolKind::Avg)?;
            y = tape.pool2(y, PoolKind::Avg)?;
        }
        let k = params.window;
        let mu_x = tape.filter(x, &kernel, k)?;
        let mu_y = tape.filter(y, &kernel, k)?;
        let xx = tape.square(x)?;
        let yy = tape.square(y)?;
        let xy = tape.mul(x, y)?;
        let e_xx = tape.filter(xx, &kernel, k)?;
        let e_yy = tape.filter(yy, &kernel, k)?;
        let e_xy = tape.filter(xy, &kernel, k)?;
        let mu_x2 = tape.square(mu_x)?;
        let mu_y2 = tape.square(mu_y)?;
        let mu_xy = tape.mul(mu_x, mu_y)?;
        let var_x = tape.sub(e_xx, mu_x2)?;
        let var_y = tape.sub(e_yy, mu_y2)?;
        let cov = tape.sub(e_xy, mu_xy)?;
        let num = tape.scale(cov, 2.0)?;
        let num = tape.offset(num, c2)?;
        let den = tape.add(var_x, var_y)?;
        let den = tape.offset(den, c2)?;
        let mut map = tape.div(num, den)?;
        if j == s - 1 {
            let ln = tape.scale(mu_xy, 2.0)?;
            let ln = tape.offset(ln, c1)?;
            let ld = tape.add(mu_x2, mu_y2)?;
            let ld = tape.offset(ld, c1)?;
            let lum = tape.div(ln, ld)?;
            map = tape.mul(map, lum)?;
        }
        let pooled = tape.global_avg_pool(map)?;
        let clamped = tape.clamp_min(pooled, FLOOR)?;
        let powered = tape.powf(clamped, weight)?;
        acc = Some(match acc {
            Some(a) => tape.mul(a, powered)?,
            None => powered,
        });
    }
    Ok(tape.mean(acc.expect("at least one scale"))?)
}

/// `1 - MS-SSIM`.
pub fn msssim_loss<T: Real>(tape: &mut Tape<T>, target: Var, output: Var, params: &MsssimParams) -> Result<Var> {
    let idx = msssim_index(tape, target, output, params)?;
    let neg = tape.scale(idx, -1.0)?;
    Ok(tape.offset(neg, 1.0)?)
}

/// Weighted total plus unweighted terms.
#[derive(Clone, Copy, Debug)]
pub struct VsGeneratorLoss {
    pub total: Var,
    pub mae: f64,
    pub adv: f64,
    pub tv: f64,
}

impl VsGeneratorLoss {
    pub fn recombine(&self, w: &VsLossWeights) -> f64 {
        self.mae + w.eta * self.adv + w.lambda * self.tv
    }
}

/// `MAE(z, G(y)) + η·adv(D(G(y))) + λ·TV(G(y))` from already computed
/// generator output and discriminator score.
pub fn compose_vs_generator_loss<T: Real>(
    tape: &mut Tape<T>,
    target: Var,
    output: Var,
    d_fake: Var,
    w: &VsLossWeights,
) -> Result<VsGeneratorLoss> {
    w.validate()?;
    let mae = mae_loss(tape, target, output)?;
    let adv = adv_loss(tape, d_fake)?;
    let tv = tv_loss(tape, output)?;
    let wa = tape.scale(adv, w.eta)?;
    let wt = tape.scale(tv, w.lambda)?;
    let total = tape.add(mae, wa)?;
    let total = tape.add(total, wt)?;
    Ok(VsGeneratorLoss {
        total,
        mae: scalar(tape, mae),
        adv: scalar(tape, adv),
        tv: scalar(tape, tv),
    })
}

/// Full virtual-staining generator objective for input `y` and target `z`.
#[allow(clippy::too_many_arguments)]
pub fn vs_generator_loss<T: Real>(
    tape: &mut Tape<T>,
    y: Var,
    z: Var,
    gen: &GeneratorNetwork<T>,
    gen_params: &[Var],
    disc: &DiscriminatorNetwork<T>,
    disc_params: &[Var],
    w: &VsLossWeights,
) -> Result<VsGeneratorLoss> {
    let out = gen.forward(tape, gen_params, y)?.output;
    let d_fake = disc.forward(tape, disc_params, out)?.prob;
    compose_vs_generator_loss(tape, z, out, d_fake, w)
}

#[derive(Clone, Copy, Debug)]
pub struct DrGeneratorLoss {
    pub total: Var,
    pub adv: f64,
    pub perceptual: f64,
    pub style: f64,
    pub mae: f64,
    pub msssim: f64,
}

impl DrGeneratorLoss {
    pub fn recombine(&self, w: &DrLossWeights) -> f64 {
        w.a * self.adv + w.b * self.perceptual + w.c * self.style + w.d * self.mae + w.e * self.msssim
    }
}

/// Networks taking part in the refocusing generator objective.
pub struct DrObjective<'a, T: Real> {
    pub gen: &'a GeneratorNetwork<T>,
    pub gen_params: &'a [Var],
    pub disc: &'a DiscriminatorNetwork<T>,
    pub disc_params: &'a [Var],
    pub frozen_vs: &'a GeneratorNetwork<T>,
    pub vs_params: &'a [Var],
    pub weights: DrLossWeights,
    pub msssim: MsssimParams,
}

impl<T: Real> DrObjective<'_, T> {
    /// `a·adv + b·perceptual + c·style + d·MAE + e·(1 - MS-SSIM)` for
    /// defocused input `x` and in-focus reference `y`. Returns the loss and
    /// the generator output.
    pub fn generator_loss(&self, tape: &mut Tape<T>, x: Var, y: Var) -> Result<(DrGeneratorLoss, Var)> {
        let out = self.gen.forward(tape, self.gen_params, x)?.output;
        Ok((self.compose(tape, out, y)?, out))
    }

    /// Objective for an already computed generator output.
    pub fn compose(&self, tape: &mut Tape<T>, out: Var, y: Var) -> Result<DrGeneratorLoss> {
        let w = self.weights;
        w.validate()?;
        same_shape(tape, y, out)?;
        let real = self.disc.forward(tape, self.disc_params, y)?;
        let fake = self.disc.forward(tape, self.disc_params, out)?;
        let adv = adv_loss(tape, fake.prob)?;
        let perceptual = feature_distance(tape, &real.taps, &fake.taps)?;
        let style = style_loss(tape, self.frozen_vs, self.vs_params, y, out)?;
        let mae = mae_loss(tape, y, out)?;
        let ms = msssim_loss(tape, y, out, &self.msssim)?;
        let mut total = tape.scale(adv, w.a)?;
        for (term, weight) in [(perceptual, w.b), (style, w.c), (mae, w.d), (ms, w.e)] {
            let t = tape.scale(term, weight)?;
            total = tape.add(total, t)?;
        }
        Ok(DrGeneratorLoss {
            total,
            adv: scalar(tape, adv),
            perceptual: scalar(tape, perceptual),
            style: scalar(tape, style),
            mae: scalar(tape, mae),
            msssim: scalar(tape, ms),
        })
    }
}
