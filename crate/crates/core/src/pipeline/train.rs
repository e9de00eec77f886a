//! Alternating generator/discriminator training of both networks.
//!
//! Each iteration draws a batch, takes one Adam step on the generator and
//! then one on the discriminator, which scores the fakes produced before
//! the generator step. Samples get their own tape and gradients are summed
//! in batch order, so a run is a pure function of its configuration.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{compose_vs_generator_loss, discriminator_loss, DrObjective, MsssimParams};
use crate::models::{
    build_discriminator, build_dr_generator, build_vs_generator, DiscriminatorNetwork, GeneratorNetwork,
    GeneratorVariant,
};
use crate::phantom::{crop, dihedral, mix_seed, normalize_input, FovRecord};
use crate::tensor::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};

use super::checkpoint::{Architecture, Checkpoint};
use super::config::{Stage, TrainConfig};
use super::{PipelineError, Result};

pub const VS_TERMS: &[&str] = &["mae", "adv", "tv"];
pub const DR_TERMS: &[&str] = &["adv", "perceptual", "style", "mae", "msssim"];

/// Losses of one iteration, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub gen_total: f64,
    pub disc: f64,
    /// Unweighted generator terms, named by [`TrainHistory::term_names`].
    pub terms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub stage: Stage,
    pub term_names: &'static [&'static str],
    pub records: Vec<LossRecord>,
    /// `(iteration, validation MAE)` after each validation pass.
    pub validation: Vec<(usize, f64)>,
    /// First validation pass whose MAE moved by less than 1% relative to
    /// the previous one.
    pub plateau_at: Option<usize>,
}

impl TrainHistory {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            term_names: match stage {
                Stage::VirtualStainer => VS_TERMS,
                Stage::Refocuser => DR_TERMS,
            },
            records: Vec::new(),
            validation: Vec::new(),
            plateau_at: None,
        }
    }

    /// Index of `name` among the generator terms.
    pub fn term(&self, name: &str) -> Option<usize> {
        self.term_names.iter().position(|n| *n == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("iteration,gen_total,disc,{}\n", self.term_names.join(","));
        for r in &self.records {
            let terms: Vec<String> = r.terms.iter().map(|v| format!("{v:.6e}")).collect();
            s.push_str(&format!("{},{:.6e},{:.6e},{}\n", r.iteration, r.gen_total, r.disc, terms.join(",")));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    /// Digest of the frozen stainer before and after refocuser training.
    pub frozen_digests: Option<([u8; 32], [u8; 32])>,
}

/// One training example before augmentation: input and target images of a
/// full field of view.
struct Pair<'a> {
    input: &'a Tensor<f32>,
    target: &'a Tensor<f32>,
}

struct Sampler {
    rng: ChaCha8Rng,
    patch: usize,
    augment: bool,
}

impl Sampler {
    fn new(seed: u64, patch: usize, augment: bool) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5A4D])),
            patch,
            augment,
        }
    }

    /// Shared crop and dihedral transform of a pair.
    fn draw(&mut self, pair: &Pair<'_>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (_, h, w) = pair.input.chw()?;
        if self.patch > h || self.patch > w {
            return Err(PipelineError::Config(format!("patch {} exceeds image {h}x{w}", self.patch)));
        }
        let y = self.rng.random_range(0..=h - self.patch);
        let x = self.rng.random_range(0..=w - self.patch);
        let k = if self.augment { self.rng.random_range(0..8) } else { 0 };
        let a = dihedral(&crop(pair.input, y, x, self.patch)?, k)?;
        let b = dihedral(&crop(pair.target, y, x, self.patch)?, k)?;
        Ok((a, b))
    }
}

fn accumulate(acc: &mut [Tensor<f32>], grads: &Gradients<f32>, vars: &[Var]) {
    for (a, &v) in acc.iter_mut().zip(vars) {
        let g = grads.get(v);
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += *y;
        }
    }
}

fn zeros_like(p: &crate::tensor::ParamSet<f32>) -> Vec<Tensor<f32>> {
    p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

fn finish_grads(acc: &mut [Tensor<f32>], batch: usize) -> bool {
    let inv = 1.0 / batch as f32;
    let mut finite = true;
    for t in acc.iter_mut() {
        for v in t.data_mut() {
            *v *= inv;
            finite &= v.is_finite();
        }
    }
    finite
}

struct Gan {
    gen: GeneratorNetwork<f32>,
    disc: DiscriminatorNetwork<f32>,
    gen_opt: AdamState<f32>,
    disc_opt: AdamState<f32>,
}

impl Gan {
    fn new(gen: GeneratorNetwork<f32>, disc: DiscriminatorNetwork<f32>) -> Self {
        let gen_opt = AdamState::new(gen.params(), AdamConfig::default());
        let disc_opt = AdamState::new(disc.params(), AdamConfig::default());
        Self {
            gen,
            disc,
            gen_opt,
            disc_opt,
        }
    }

    fn checkpoint(&self, cfg: &TrainConfig, iteration: usize) -> Checkpoint {
        Checkpoint {
            architecture: Architecture {
                generator: self.gen.config().clone(),
                discriminator: self.disc.config().clone(),
            },
            train_config: cfg.to_text(),
            config_hash: cfg.hash(),
            iteration: iteration as u64,
            generator: self.gen.params().clone(),
            discriminator: self.disc.params().clone(),
            gen_opt: self.gen_opt.clone(),
            disc_opt: self.disc_opt.clone(),
        }
    }

    /// Discriminator step on `(real, fake)` pairs; returns the mean loss.
    fn disc_step(&mut self, pairs: &[(Tensor<f32>, Tensor<f32>)], lr: f64) -> Result<Option<f64>> {
        let mut acc = zeros_like(self.disc.params());
        let mut total = 0.0;
        for (real, fake) in pairs {
            let mut tape = Tape::new();
            let dp = self.disc.params().bind(&mut tape, true);
            let r = tape.constant(real.clone());
            let f = tape.constant(fake.clone());
            let d_real = self.disc.forward(&mut tape, &dp, r)?.prob;
            let d_fake = self.disc.forward(&mut tape, &dp, f)?.prob;
            let loss = discriminator_loss(&mut tape, d_fake, d_real)?;
            total += tape.value(loss).item() as f64;
            accumulate(&mut acc, &tape.backward(loss)?, &dp);
        }
        let mean = total / pairs.len() as f64;
        if !finish_grads(&mut acc, pairs.len()) || !mean.is_finite() {
            return Ok(None);
        }
        self.disc_opt.step(self.disc.params_mut(), &acc, lr)?;
        Ok(Some(mean))
    }
}

/// Whether `e` reports a NaN or infinity somewhere in a forward or
/// backward pass.
fn is_non_finite(e: &PipelineError) -> bool {
    use crate::losses::LossError;
    use crate::models::ModelError;
    use crate::tensor::TensorError::NonFinite as Nf;
    match e {
        PipelineError::Tensor(Nf { .. })
        | PipelineError::Model(ModelError::Tensor(Nf { .. }))
        | PipelineError::Loss(LossError::Tensor(Nf { .. }))
        | PipelineError::Loss(LossError::Model(ModelError::Tensor(Nf { .. }))) => true,
        PipelineError::Loss(LossError::OutOfRange(v)) => !v.is_finite(),
        _ => false,
    }
}

fn guard<T>(r: Result<T>, iteration: usize, last_good: impl FnOnce() -> Checkpoint) -> Result<T> {
    r.map_err(|e| {
        if is_non_finite(&e) {
            PipelineError::NonFinite {
                iteration,
                last_good: Box::new(last_good()),
            }
        } else {
            e
        }
    })
}

fn check_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(PipelineError::Config(format!(
            "configuration is for stage {}, not {}",
            cfg.stage.as_str(),
            stage.as_str()
        )));
    }
    Ok(())
}

fn validate_every(cfg: &TrainConfig) -> usize {
    if cfg.validate_every > 0 {
        cfg.validate_every
    } else {
        (cfg.max_iterations / 10).max(1)
    }
}

fn record_validation(history: &mut TrainHistory, iteration: usize, mae: f64) {
    if let Some(&(_, prev)) = history.validation.last() {
        let rel = (mae - prev).abs() / prev.abs().max(1e-12);
        if rel < 0.01 && history.plateau_at.is_none() {
            info!("validation loss plateaued at iteration {iteration} ({mae:.5})");
            history.plateau_at = Some(iteration);
        }
    }
    history.validation.push((iteration, mae));
}

fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

/// Stainer training on normalized in-focus inputs and YCbCr targets.
pub fn train_virtual_stainer(train: &[FovRecord], validation: &[FovRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_stage(cfg, Stage::VirtualStainer)?;
    if train.is_empty() {
        return Err(PipelineError::Config("no training records".into()));
    }
    let prep = |recs: &[FovRecord]| -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        recs.iter()
            .map(|r| Ok((normalize_input(r.af_infocus())?, r.stain_target())))
            .collect()
    };
    let data = prep(train)?;
    let val = prep(validation)?;
    let mut gan = Gan::new(
        build_vs_generator(cfg.base_channels, mix_seed(&[cfg.seed, 1]))?,
        build_discriminator(3, cfg.base_channels, mix_seed(&[cfg.seed, 2]))?,
    );
    let mut sampler = Sampler::new(cfg.seed, cfg.patch_size, cfg.augment);
    let mut history = TrainHistory::new(Stage::VirtualStainer);
    let every = validate_every(cfg);
    let w = cfg.vs_weights;
    for it in 0..cfg.max_iterations {
        let phase = |sampler: &mut Sampler| -> Result<_> {
            let mut acc = zeros_like(gan.gen.params());
            let mut pairs = Vec::with_capacity(cfg.batch_size);
            let (mut total, mut terms) = (0.0, [0.0; 3]);
            for _ in 0..cfg.batch_size {
                let i = sampler.rng.random_range(0..data.len());
                let (x, z) = sampler.draw(&Pair {
                    input: &data[i].0,
                    target: &data[i].1,
                })?;
                let mut tape = Tape::new();
                let gp = gan.gen.bind(&mut tape);
                let dp = gan.disc.params().bind(&mut tape, false);
                let xv = tape.constant(x);
                let zv = tape.constant(z.clone());
                let out = gan.gen.forward(&mut tape, &gp, xv)?.output;
                let d_fake = gan.disc.forward(&mut tape, &dp, out)?.prob;
                let loss = compose_vs_generator_loss(&mut tape, zv, out, d_fake, &w)?;
                total += tape.value(loss.total).item() as f64;
                for (t, v) in terms.iter_mut().zip([loss.mae, loss.adv, loss.tv]) {
                    *t += v;
                }
                accumulate(&mut acc, &tape.backward(loss.total)?, &gp);
                pairs.push((z, tape.value(out).clone()));
            }
            Ok((acc, pairs, total, terms))
        };
        let (mut acc, pairs, total, terms) = guard(phase(&mut sampler), it, || gan.checkpoint(cfg, it))?;
        let b = cfg.batch_size as f64;
        let gen_total = total / b;
        if !finish_grads(&mut acc, cfg.batch_size) || !gen_total.is_finite() {
            return Err(PipelineError::NonFinite {
                iteration: it,
                last_good: Box::new(gan.checkpoint(cfg, it)),
            });
        }
        let snapshot = gan.checkpoint(cfg, it);
        gan.gen_opt.step(gan.gen.params_mut(), &acc, cfg.gen_lr)?;
        let disc = guard(gan.disc_step(&pairs, cfg.disc_lr), it, || snapshot.clone())?;
        let Some(disc) = disc else {
            return Err(PipelineError::NonFinite {
                iteration: it,
                last_good: Box::new(snapshot),
            });
        };
        history.records.push(LossRecord {
            iteration: it,
            gen_total,
            disc,
            terms: terms.iter().map(|t| t / b).collect(),
        });
        debug!("vs it {it}: gen {gen_total:.5} disc {disc:.5} mae {:.5}", terms[0] / b);
        if !val.is_empty() && ((it + 1) % every == 0 || it + 1 == cfg.max_iterations) {
            let mut s = 0.0;
            for (x, z) in &val {
                s += mean_abs_diff(&gan.gen.predict(x)?, z);
            }
            record_validation(&mut history, it + 1, s / val.len() as f64);
        }
    }
    Ok(TrainOutcome {
        checkpoint: gan.checkpoint(cfg, cfg.max_iterations),
        history,
        frozen_digests: None,
    })
}

/// Refocuser training with the style loss computed by the frozen stainer
/// stored in `vs_checkpoint`. Inputs are planes drawn uniformly from each
/// stack, targets the matching in-focus planes, both normalized.
pub fn train_refocuser(
    train: &[FovRecord],
    validation: &[FovRecord],
    vs_checkpoint: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_stage(cfg, Stage::Refocuser)?;
    if train.is_empty() {
        return Err(PipelineError::Config("no training records".into()));
    }
    if vs_checkpoint.architecture.generator.variant != GeneratorVariant::VirtualStainer {
        return Err(PipelineError::Config("refocuser training needs a virtual-stainer checkpoint".into()));
    }
    let mut vs = vs_checkpoint.generator_network()?;
    vs.freeze();
    let digest_before = vs.params().digest();

    let prep = |recs: &[FovRecord]| -> Result<Vec<(Vec<Tensor<f32>>, Tensor<f32>)>> {
        recs.iter()
            .map(|r| {
                let planes = r.af_stack.iter().map(normalize_input).collect::<std::result::Result<Vec<_>, _>>()?;
                Ok((planes, normalize_input(r.af_infocus())?))
            })
            .collect()
    };
    let data = prep(train)?;
    let val = prep(validation)?;
    let mut gan = Gan::new(
        build_dr_generator(cfg.base_channels, mix_seed(&[cfg.seed, 3]))?,
        build_discriminator(2, cfg.base_channels, mix_seed(&[cfg.seed, 4]))?,
    );
    let scales = crate::metrics::max_scales(cfg.patch_size, cfg.patch_size, MsssimParams::default().window).max(1);
    let base_msssim = MsssimParams::with_scales(scales)?;
    let mut sampler = Sampler::new(cfg.seed, cfg.patch_size, cfg.augment);
    let mut history = TrainHistory::new(Stage::Refocuser);
    let every = validate_every(cfg);
    for it in 0..cfg.max_iterations {
        let phase = |sampler: &mut Sampler| -> Result<_> {
            let mut acc = zeros_like(gan.gen.params());
            let mut pairs = Vec::with_capacity(cfg.batch_size);
            let (mut total, mut terms) = (0.0, [0.0; 5]);
            for _ in 0..cfg.batch_size {
                let i = sampler.rng.random_range(0..data.len());
                let p = sampler.rng.random_range(0..data[i].0.len());
                let (x, y) = sampler.draw(&Pair {
                    input: &data[i].0[p],
                    target: &data[i].1,
                })?;
                let (lo, hi) = y
                    .data()
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                let msssim = MsssimParams {
                    dynamic_range: (hi - lo).max(1e-6) as f64,
                    ..base_msssim.clone()
                };
                let mut tape = Tape::new();
                let gp = gan.gen.bind(&mut tape);
                let dp = gan.disc.params().bind(&mut tape, false);
                let vp = vs.bind(&mut tape);
                let xv = tape.constant(x);
                let yv = tape.constant(y.clone());
                let objective = DrObjective {
                    gen: &gan.gen,
                    gen_params: &gp,
                    disc: &gan.disc,
                    disc_params: &dp,
                    frozen_vs: &vs,
                    vs_params: &vp,
                    weights: cfg.dr_weights,
                    msssim,
                };
                let (loss, out) = objective.generator_loss(&mut tape, xv, yv)?;
                total += tape.value(loss.total).item() as f64;
                for (t, v) in terms
                    .iter_mut()
                    .zip([loss.adv, loss.perceptual, loss.style, loss.mae, loss.msssim])
                {
                    *t += v;
                }
                let grads = tape.backward(loss.total)?;
                if let Some(&v) = vp.iter().find(|&&v| !grads.is_zero(v)) {
                    return Err(PipelineError::FrozenViolation(format!(
                        "nonzero gradient on stainer parameter {} at iteration {it}",
                        v.index()
                    )));
                }
                accumulate(&mut acc, &grads, &gp);
                pairs.push((y, tape.value(out).clone()));
            }
            Ok((acc, pairs, total, terms))
        };
        let (mut acc, pairs, total, terms) = guard(phase(&mut sampler), it, || gan.checkpoint(cfg, it))?;
        let b = cfg.batch_size as f64;
        let gen_total = total / b;
        if !finish_grads(&mut acc, cfg.batch_size) || !gen_total.is_finite() {
            return Err(PipelineError::NonFinite {
                iteration: it,
                last_good: Box::new(gan.checkpoint(cfg, it)),
            });
        }
        let snapshot = gan.checkpoint(cfg, it);
        gan.gen_opt.step(gan.gen.params_mut(), &acc, cfg.gen_lr)?;
        let disc = guard(gan.disc_step(&pairs, cfg.disc_lr), it, || snapshot.clone())?;
        let Some(disc) = disc else {
            return Err(PipelineError::NonFinite {
                iteration: it,
                last_good: Box::new(snapshot),
            });
        };
        history.records.push(LossRecord {
            iteration: it,
            gen_total,
            disc,
            terms: terms.iter().map(|t| t / b).collect(),
        });
        debug!("dr it {it}: gen {gen_total:.5} disc {disc:.5} mae {:.5}", terms[3] / b);
        if (it + 1) % every == 0 || it + 1 == cfg.max_iterations {
            if vs.params().digest() != digest_before {
                return Err(PipelineError::FrozenViolation(format!(
                    "stainer parameters changed by iteration {}",
                    it + 1
                )));
            }
            if !val.is_empty() {
                let mut s = 0.0;
                let mut n = 0;
                for (planes, y) in &val {
                    for x in planes {
                        s += mean_abs_diff(&gan.gen.predict(x)?, y);
                        n += 1;
                    }
                }
                record_validation(&mut history, it + 1, s / n as f64);
            }
        }
    }
    let digest_after = vs.params().digest();
    if digest_after != digest_before {
        return Err(PipelineError::FrozenViolation("stainer parameters changed during training".into()));
    }
    Ok(TrainOutcome {
        checkpoint: gan.checkpoint(cfg, cfg.max_iterations),
        history,
        frozen_digests: Some((digest_before, digest_after)),
    })
}
