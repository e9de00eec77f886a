#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstain_core::tensor::{Tape, Tensor, Var};

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_in(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ w ⊙ v` with fixed random weights, reducing any output to a scalar
/// whose gradient exercises every element.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let w = random(tape.value(v).shape(), seed);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

/// Central-difference check of every probed element. Probes whose `±h`
/// step lands on a different smooth piece than the base point (a changed
/// `branch_pattern`) have no meaningful difference quotient and are only
/// counted.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub worst: f64,
    pub checked: usize,
    pub straddled: usize,
}

pub fn fd_check(
    inputs: &[Tensor<f64>],
    probes: &[Option<Vec<usize>>],
    h: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> FdReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let base = tape.branch_pattern();
    let mut report = FdReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        let all: Vec<usize> = (0..input.len()).collect();
        let idx = probes.get(k).cloned().flatten().unwrap_or(all);
        for j in idx {
            let eval = |delta: f64| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(m, x)| {
                        let mut x = x.clone();
                        if m == k {
                            x.data_mut()[j] += delta;
                        }
                        t.leaf(x, true)
                    })
                    .collect();
                let l = f(&mut t, &vs);
                (t.value(l).item(), t.branch_pattern() == base)
            };
            let ((up, same_up), (down, same_down)) = (eval(h), eval(-h));
            if !(same_up && same_down) {
                report.straddled += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.worst = report.worst.max(rel);
            report.checked += 1;
        }
    }
    report
}

/// Every `stride`-th index below `n`, starting at `offset`.
pub fn every(n: usize, stride: usize, offset: usize) -> Vec<usize> {
    (offset..n).step_by(stride.max(1)).collect()
}

pub type GradFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

/// One finite-difference case per differentiable primitive.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, GradFn)> {
    use vstain_core::tensor::{Activation, Padding, PoolKind};
    let pos = |shape: &[usize], seed| random_in(shape, 0.5, 2.0, seed);
    vec![
        (
            "conv2d same",
            vec![random(&[2, 5, 6], 1), random(&[3, 2, 3, 3], 2), random(&[3], 3)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::SameReflect).unwrap();
                weighted_sum(t, y, 4)
            }),
        ),
        (
            "conv2d stride 2",
            vec![random(&[2, 6, 7], 5), random(&[2, 2, 3, 3], 6), random(&[2], 7)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::SameReflect).unwrap();
                weighted_sum(t, y, 8)
            }),
        ),
        (
            "conv2d valid",
            vec![random(&[1, 5, 5], 9), random(&[2, 1, 3, 3], 10)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, Padding::Valid).unwrap();
                weighted_sum(t, y, 11)
            }),
        ),
        (
            "avg pool",
            vec![random(&[2, 4, 6], 12)],
            Box::new(|t, v| {
                let y = t.pool2(v[0], PoolKind::Avg).unwrap();
                weighted_sum(t, y, 13)
            }),
        ),
        (
            "max pool",
            vec![random(&[2, 4, 6], 14)],
            Box::new(|t, v| {
                let y = t.pool2(v[0], PoolKind::Max).unwrap();
                weighted_sum(t, y, 15)
            }),
        ),
        (
            "bilinear 2x",
            vec![random(&[2, 3, 4], 16)],
            Box::new(|t, v| {
                let y = t.resize_bilinear_2x(v[0]).unwrap();
                weighted_sum(t, y, 17)
            }),
        ),
        (
            "leaky relu",
            vec![random(&[3, 4, 4], 18)],
            Box::new(|t, v| {
                let y = t.leaky_relu(v[0], 0.1).unwrap();
                weighted_sum(t, y, 19)
            }),
        ),
        (
            "sigmoid",
            vec![random(&[5], 20)],
            Box::new(|t, v| {
                let y = t.activation(v[0], Activation::Sigmoid).unwrap();
                weighted_sum(t, y, 21)
            }),
        ),
        (
            "dense",
            vec![random(&[2, 2, 2], 22), random(&[3, 8], 23), random(&[3], 24)],
            Box::new(|t, v| {
                let y = t.dense(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y, 25)
            }),
        ),
        (
            "add sub mul",
            vec![random(&[2, 3, 3], 26), random(&[2, 3, 3], 27)],
            Box::new(|t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let s = t.sub(v[0], v[1]).unwrap();
                let m = t.mul(a, s).unwrap();
                weighted_sum(t, m, 28)
            }),
        ),
        (
            "div",
            vec![random(&[2, 3, 3], 29), pos(&[2, 3, 3], 30)],
            Box::new(|t, v| {
                let q = t.div(v[0], v[1]).unwrap();
                weighted_sum(t, q, 31)
            }),
        ),
        (
            "scale offset",
            vec![random(&[4, 2], 32)],
            Box::new(|t, v| {
                let a = t.scale(v[0], -1.7).unwrap();
                let b = t.offset(a, 0.3).unwrap();
                let c = t.square(b).unwrap();
                weighted_sum(t, c, 33)
            }),
        ),
        (
            "abs",
            vec![random(&[3, 3], 34)],
            Box::new(|t, v| {
                let a = t.abs(v[0]).unwrap();
                weighted_sum(t, a, 35)
            }),
        ),
        (
            "square",
            vec![random(&[3, 3], 36)],
            Box::new(|t, v| {
                let a = t.square(v[0]).unwrap();
                weighted_sum(t, a, 37)
            }),
        ),
        (
            "powf",
            vec![pos(&[3, 3], 38)],
            Box::new(|t, v| {
                let a = t.powf(v[0], 0.7).unwrap();
                weighted_sum(t, a, 39)
            }),
        ),
        (
            "clamp min",
            vec![random(&[4, 4], 40)],
            Box::new(|t, v| {
                let a = t.clamp_min(v[0], 0.05).unwrap();
                weighted_sum(t, a, 41)
            }),
        ),
        (
            "sum mean",
            vec![random(&[2, 3, 3], 42)],
            Box::new(|t, v| {
                let sq = t.square(v[0]).unwrap();
                let s = t.sum(sq).unwrap();
                let m = t.mean(v[0]).unwrap();
                let m2 = t.square(m).unwrap();
                t.add(s, m2).unwrap()
            }),
        ),
        (
            "concat channels",
            vec![random(&[2, 3, 3], 43), random(&[1, 3, 3], 44)],
            Box::new(|t, v| {
                let c = t.concat_channels(&[v[0], v[1]]).unwrap();
                weighted_sum(t, c, 45)
            }),
        ),
        (
            "global average pool",
            vec![random(&[3, 4, 5], 46)],
            Box::new(|t, v| {
                let g = t.global_avg_pool(v[0]).unwrap();
                weighted_sum(t, g, 47)
            }),
        ),
        (
            "depthwise filter",
            vec![random(&[2, 6, 6], 48)],
            Box::new(|t, v| {
                let k: Vec<f64> = (0..9).map(|i| 0.1 * i as f64 - 0.3).collect();
                let f = t.filter(v[0], &k, 3).unwrap();
                weighted_sum(t, f, 49)
            }),
        ),
        (
            "total variation",
            vec![random(&[2, 4, 5], 50)],
            Box::new(|t, v| t.total_variation(v[0]).unwrap()),
        ),
    ]
}

pub struct CompositeCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub probes: Vec<Option<Vec<usize>>>,
    pub f: GradFn,
}

/// A few elements of every tensor: the first, the last and one in between.
fn sparse_probes(tensors: &[Tensor<f64>]) -> Vec<Option<Vec<usize>>> {
    tensors
        .iter()
        .map(|t| {
            let n = t.len();
            let mut v = vec![0, n / 2, n - 1];
            v.dedup();
            Some(v)
        })
        .collect()
}

fn near(base: &Tensor<f64>, amp: f64, seed: u64) -> Tensor<f64> {
    let noise = random(base.shape(), seed);
    Tensor::new(
        base.shape().to_vec(),
        base.data().iter().zip(noise.data()).map(|(a, n)| a + amp * n).collect(),
    )
    .unwrap()
}

/// Composite losses evaluated through tiny 64-bit networks. Parameters are
/// inputs of the check, so gradients are verified on them as well.
pub fn composite_cases() -> Vec<CompositeCase> {
    use vstain_core::losses::*;
    use vstain_core::models::*;

    // Same layer code as the full networks, cut to two levels / blocks so
    // that a ±h step crosses few leaky-ReLU kinks.
    let n = 8;
    let tiny_gen = |mut c: GeneratorConfig| {
        c.levels = 2;
        GeneratorNetwork::<f64>::new(c).unwrap()
    };
    let tiny_disc = |c_in, seed| {
        let mut c = DiscriminatorConfig::new(c_in, 4, seed);
        c.blocks = 2;
        DiscriminatorNetwork::<f64>::new(c).unwrap()
    };
    let vs = tiny_gen(GeneratorConfig::virtual_stainer(4, 11));
    let dr = tiny_gen(GeneratorConfig::refocuser(4, 12));
    let disc3 = tiny_disc(3, 13);
    let disc2 = tiny_disc(2, 14);
    let mut frozen = tiny_gen(GeneratorConfig::virtual_stainer(4, 15));
    frozen.freeze();

    let mut out = Vec::new();

    // Stainer objective with both networks' parameters as inputs.
    {
        let mut inputs = vec![random(&[2, n, n], 20), random_in(&[3, n, n], 0.0, 1.0, 21)];
        let ng = vs.params().len();
        inputs.extend(vs.params().tensors().iter().cloned());
        inputs.extend(disc3.params().tensors().iter().cloned());
        let mut probes = sparse_probes(&inputs);
        probes[0] = Some(every(inputs[0].len(), 37, 7));
        probes[1] = Some(every(inputs[1].len(), 53, 3));
        let (g, d) = (vs.clone(), disc3.clone());
        out.push(CompositeCase {
            name: "stainer generator loss",
            inputs,
            probes,
            f: Box::new(move |t, v| {
                let w = VsLossWeights { eta: 0.5, lambda: 1e-3 };
                let gp = &v[2..2 + ng];
                let dp = &v[2 + ng..];
                vs_generator_loss(t, v[0], v[1], &g, gp, &d, dp, &w).unwrap().total
            }),
        });
    }

    // Least-squares discriminator objective.
    {
        let mut inputs = vec![random_in(&[3, n, n], 0.0, 1.0, 22), random_in(&[3, n, n], 0.0, 1.0, 23)];
        inputs.extend(disc3.params().tensors().iter().cloned());
        let mut probes = sparse_probes(&inputs);
        probes[0] = Some(every(inputs[0].len(), 41, 5));
        probes[1] = Some(every(inputs[1].len(), 41, 9));
        let d = disc3.clone();
        out.push(CompositeCase {
            name: "discriminator loss",
            inputs,
            probes,
            f: Box::new(move |t, v| {
                let fake = d.forward(t, &v[2..], v[0]).unwrap().prob;
                let real = d.forward(t, &v[2..], v[1]).unwrap().prob;
                discriminator_loss(t, fake, real).unwrap()
            }),
        });
    }

    // Refocuser objective: adversarial, perceptual, style, MAE and MS-SSIM.
    {
        // MS-SSIM needs at least one full window.
        let x = random(&[2, 2 * n, 2 * n], 24);
        let y = near(&x, 0.3, 25);
        let mut inputs = vec![x, y];
        let ng = dr.params().len();
        inputs.extend(dr.params().tensors().iter().cloned());
        inputs.extend(disc2.params().tensors().iter().cloned());
        let mut probes = sparse_probes(&inputs);
        probes[0] = Some(every(inputs[0].len(), 29, 11));
        probes[1] = Some(every(inputs[1].len(), 29, 13));
        let (g, d, f) = (dr.clone(), disc2.clone(), frozen.clone());
        out.push(CompositeCase {
            name: "refocuser generator loss",
            inputs,
            probes,
            f: Box::new(move |t, v| {
                let vp = f.bind(t);
                let obj = DrObjective {
                    gen: &g,
                    gen_params: &v[2..2 + ng],
                    disc: &d,
                    disc_params: &v[2 + ng..],
                    frozen_vs: &f,
                    vs_params: &vp,
                    weights: DrLossWeights { a: 1.0, b: 1.0, c: 1.0, d: 1.0, e: 1.0 },
                    msssim: MsssimParams {
                        dynamic_range: 4.0,
                        ..MsssimParams::with_scales(1).unwrap()
                    },
                };
                obj.generator_loss(t, v[0], v[1]).unwrap().0.total
            }),
        });
    }

    // Individual image losses on their own.
    {
        let a = random_in(&[2, 48, 48], 0.0, 1.0, 26);
        let b = near(&a, 0.1, 27);
        let probes = vec![Some(every(a.len(), 97, 1)), Some(every(b.len(), 97, 2))];
        out.push(CompositeCase {
            name: "ms-ssim loss",
            inputs: vec![a, b],
            probes,
            f: Box::new(|t, v| {
                let p = MsssimParams::with_scales(3).unwrap();
                msssim_loss(t, v[0], v[1], &p).unwrap()
            }),
        });
    }
    {
        let a = random(&[2, n, n], 28);
        let b = near(&a, 0.2, 29);
        let probes = vec![Some(every(a.len(), 5, 1)), Some(every(b.len(), 5, 2))];
        let f = frozen.clone();
        out.push(CompositeCase {
            name: "style loss",
            inputs: vec![a, b],
            probes,
            f: Box::new(move |t, v| {
                let vp = f.bind(t);
                style_loss(t, &f, &vp, v[0], v[1]).unwrap()
            }),
        });
    }
    {
        let a = random(&[2, n, n], 30);
        let b = near(&a, 0.2, 31);
        let probes = vec![Some(every(a.len(), 5, 1)), Some(every(b.len(), 5, 2))];
        let d = disc2.clone();
        out.push(CompositeCase {
            name: "perceptual loss",
            inputs: vec![a, b],
            probes,
            f: Box::new(move |t, v| {
                let dp = d.params().bind(t, false);
                perceptual_loss(t, &d, &dp, v[0], v[1]).unwrap()
            }),
        });
    }
    out
}
