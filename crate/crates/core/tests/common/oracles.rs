//! Independent scalar references for the image-quality and test statistics.

pub const A: [f64; 16] = [
    0.10, 0.20, 0.35, 0.40, //
    0.55, 0.60, 0.15, 0.80, //
    0.90, 0.05, 0.45, 0.30, //
    0.25, 0.70, 0.65, 0.95,
];
pub const B: [f64; 16] = [
    0.12, 0.18, 0.30, 0.45, //
    0.50, 0.66, 0.20, 0.75, //
    0.85, 0.10, 0.40, 0.35, //
    0.20, 0.72, 0.60, 0.90,
];

/// Textbook scalar SSIM over one window with uniform weights.
pub fn ssim_scalar(a: &[f64], b: &[f64], l: f64) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
    let vb = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let (c1, c2) = ((0.01 * l) * (0.01 * l), (0.03 * l) * (0.03 * l));
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Student-t density with integer degrees of freedom; the gamma ratio is
/// built from `Γ(1) = 1`, `Γ(1/2) = √π` and `Γ(x + 1) = xΓ(x)`.
pub fn t_density(x: f64, dof: usize) -> f64 {
    let gamma_half = |k: usize| -> f64 {
        // Γ(k / 2)
        let (mut g, mut a) = if k % 2 == 0 { (1.0, 1.0) } else { (std::f64::consts::PI.sqrt(), 0.5) };
        while a < k as f64 / 2.0 - 1e-12 {
            g *= a;
            a += 1.0;
        }
        g
    };
    let nu = dof as f64;
    gamma_half(dof + 1) / ((nu * std::f64::consts::PI).sqrt() * gamma_half(dof)) * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0)
}

/// `P(T > t)` as `1/2 - ∫₀ᵗ f` by composite Simpson.
pub fn upper_tail_oracle(t: f64, dof: usize) -> f64 {
    let n = 20_000;
    let h = t / n as f64;
    let mut s = t_density(0.0, dof) + t_density(t, dof);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * t_density(i as f64 * h, dof);
    }
    0.5 - s * h / 3.0
}
