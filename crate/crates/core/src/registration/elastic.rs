use crate::imgproc::{gaussian_kernel_1d, Plane};

use super::{warp_field, DisplacementField, RegistrationError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ElasticConfig {
    pub levels: usize,
    pub block: usize,
    /// Integer search radius per level, in that level's pixels.
    pub radius: usize,
    /// Matching passes per pyramid level.
    pub iterations: usize,
    /// Blocks whose standard deviation falls below this fraction of the
    /// fixed image's are treated as textureless.
    pub texture_threshold: f64,
    /// Upper bound on the field's forward differences; the field is
    /// smoothed further until it holds.
    pub max_gradient: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            block: 16,
            radius: 4,
            iterations: 2,
            texture_threshold: 0.05,
            max_gradient: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElasticResult {
    pub field: DisplacementField,
    /// Blocks at the finest level left at zero displacement for lack of
    /// texture.
    pub textureless_blocks: usize,
}

fn downsample(p: &Plane) -> Plane {
    let b = p.gaussian_blur(1.0);
    Plane::from_fn(p.h / 2, p.w / 2, |y, x| {
        0.25 * (b.get(2 * y, 2 * x) + b.get(2 * y, 2 * x + 1) + b.get(2 * y + 1, 2 * x) + b.get(2 * y + 1, 2 * x + 1))
    })
}

fn upsample_field(f: &DisplacementField, h: usize, w: usize) -> DisplacementField {
    let at = |p: &Plane, y: usize, x: usize| {
        2.0 * p.sample((y as f64 + 0.5) / 2.0 - 0.5, (x as f64 + 0.5) / 2.0 - 0.5)
    };
    DisplacementField::from_fn(h, w, |y, x| (at(&f.dy, y, x), at(&f.dx, y, x)))
}

fn block_starts(n: usize, block: usize) -> Vec<usize> {
    let step = (block / 2).max(1);
    let mut v: Vec<usize> = (0..=n - block).step_by(step).collect();
    if *v.last().expect("n >= block") != n - block {
        v.push(n - block);
    }
    v
}

fn block_stats(p: &Plane, y0: isize, x0: isize, b: usize) -> (f64, f64, Vec<f64>) {
    let mut vals = Vec::with_capacity(b * b);
    for y in 0..b as isize {
        for x in 0..b as isize {
            vals.push(p.get_clamped(y0 + y, x0 + x));
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt(), vals)
}

fn ncc(a: &[f64], ma: f64, sa: f64, b: &[f64], mb: f64, sb: f64) -> f64 {
    if sa <= 0.0 || sb <= 0.0 {
        return -1.0;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / (sa * sb)
}

/// Vertex of the parabola through `(-1, a)`, `(0, b)`, `(1, c)`.
fn parabola_peak(a: f64, b: f64, c: f64) -> f64 {
    let den = a - 2.0 * b + c;
    if den >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / den).clamp(-0.5, 0.5)
}

/// Piecewise-linear interpolation weights of `t` on sorted knots.
fn interp(knots: &[f64], t: f64) -> (usize, usize, f64) {
    if t <= knots[0] || knots.len() == 1 {
        return (0, 0, 0.0);
    }
    let last = knots.len() - 1;
    if t >= knots[last] {
        return (last, last, 0.0);
    }
    let i = knots.partition_point(|&k| k <= t) - 1;
    let f = (t - knots[i]) / (knots[i + 1] - knots[i]);
    (i, i + 1, f)
}

/// One block-matching pass: residual displacement at each block center,
/// interpolated to a dense field.
fn match_blocks(warped: &Plane, fixed: &Plane, cfg: &ElasticConfig, fixed_std: f64) -> (DisplacementField, usize) {
    let b = cfg.block;
    let r = cfg.radius as isize;
    let ys = block_starts(fixed.h, b);
    let xs = block_starts(fixed.w, b);
    let mut res = vec![(0.0, 0.0); ys.len() * xs.len()];
    let mut textureless = 0;
    let side = (2 * r + 1) as usize;
    let mut scores = vec![0.0; side * side];
    for (iy, &y0) in ys.iter().enumerate() {
        for (ix, &x0) in xs.iter().enumerate() {
            let (mf, sf, fv) = block_stats(fixed, y0 as isize, x0 as isize, b);
            if sf < cfg.texture_threshold * fixed_std {
                textureless += 1;
                continue;
            }
            let (mw, sw, wv) = block_stats(warped, y0 as isize, x0 as isize, b);
            let mut best = (f64::NEG_INFINITY, 0isize, 0isize);
            for dy in -r..=r {
                for dx in -r..=r {
                    // Centered score: moving window shifted by +d and fixed
                    // window shifted by -d, so that the score curve of a
                    // pure translation is symmetric about its peak.
                    let (mm, sm, mv) = block_stats(warped, y0 as isize + dy, x0 as isize + dx, b);
                    let (mg, sg, gv) = block_stats(fixed, y0 as isize - dy, x0 as isize - dx, b);
                    let s = 0.5 * (ncc(&fv, mf, sf, &mv, mm, sm) + ncc(&gv, mg, sg, &wv, mw, sw));
                    scores[((dy + r) as usize) * side + (dx + r) as usize] = s;
                    let closer = dy * dy + dx * dx < best.1 * best.1 + best.2 * best.2;
                    if s > best.0 + 1e-12 || ((s - best.0).abs() <= 1e-12 && closer) {
                        best = (s, dy, dx);
                    }
                }
            }
            let (_, dy, dx) = best;
            let at = |y: isize, x: isize| scores[((y + r) as usize) * side + (x + r) as usize];
            // Sub-pixel refinement only from candidates lying wholly inside
            // the image; edge replication would bias the parabola.
            let inside = |y: isize, x: isize| {
                let fits = |y: isize, x: isize| {
                    y >= 0 && x >= 0 && y + b as isize <= warped.h as isize && x + b as isize <= warped.w as isize
                };
                let (y0, x0) = (y0 as isize, x0 as isize);
                fits(y0 + y, x0 + x) && fits(y0 - y, x0 - x)
            };
            let sub_y = if dy.abs() < r && inside(dy - 1, dx) && inside(dy + 1, dx) {
                parabola_peak(at(dy - 1, dx), at(dy, dx), at(dy + 1, dx))
            } else {
                0.0
            };
            let sub_x = if dx.abs() < r && inside(dy, dx - 1) && inside(dy, dx + 1) {
                parabola_peak(at(dy, dx - 1), at(dy, dx), at(dy, dx + 1))
            } else {
                0.0
            };
            res[iy * xs.len() + ix] = (dy as f64 + sub_y, dx as f64 + sub_x);
        }
    }
    let half = (b as f64 - 1.0) / 2.0;
    let cy: Vec<f64> = ys.iter().map(|&y| y as f64 + half).collect();
    let cx: Vec<f64> = xs.iter().map(|&x| x as f64 + half).collect();
    let field = DisplacementField::from_fn(fixed.h, fixed.w, |y, x| {
        let (y0, y1, fy) = interp(&cy, y as f64);
        let (x0, x1, fx) = interp(&cx, x as f64);
        let g = |i: usize, j: usize| res[i * xs.len() + j];
        let mut out = (0.0, 0.0);
        for (i, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (j, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                let v = g(i, j);
                out.0 += wy * wx * v.0;
                out.1 += wy * wx * v.1;
            }
        }
        out
    });
    (field, textureless)
}

fn smooth(f: &DisplacementField, k: &[f64]) -> DisplacementField {
    DisplacementField {
        dy: f.dy.convolve_separable(k),
        dx: f.dx.convolve_separable(k),
    }
}

/// Coarse-to-fine block matching by local normalized correlation.
///
/// Returns `u` with `moving(p + u(p)) ≈ fixed(p)`. Each level upsamples the
/// previous field, matches blocks against the currently warped moving
/// image with quadratic sub-pixel peaks, composes the residual and smooths
/// with a 5×5 Gaussian.
pub fn elastic_register(moving: &Plane, fixed: &Plane, cfg: &ElasticConfig) -> Result<ElasticResult> {
    if (moving.h, moving.w) != (fixed.h, fixed.w) {
        return Err(RegistrationError::Invalid("elastic registration expects same-size images".into()));
    }
    if cfg.levels == 0 || cfg.block < 4 || cfg.radius == 0 {
        return Err(RegistrationError::Invalid(format!("bad elastic config {cfg:?}")));
    }
    let coarsest = cfg.block << (cfg.levels - 1);
    if fixed.h < coarsest || fixed.w < coarsest {
        return Err(RegistrationError::Invalid(format!(
            "{}x{} too small for {} levels of {} px blocks",
            fixed.h, fixed.w, cfg.levels, cfg.block
        )));
    }
    let mut mov = vec![moving.clone()];
    let mut fix = vec![fixed.clone()];
    for _ in 1..cfg.levels {
        mov.push(downsample(mov.last().expect("non-empty")));
        fix.push(downsample(fix.last().expect("non-empty")));
    }
    let kernel5 = {
        // 5 taps: σ = 1 truncated at radius 2.
        let k = gaussian_kernel_1d(1.0);
        let c = k.len() / 2;
        let t: Vec<f64> = k[c - 2..=c + 2].to_vec();
        let s: f64 = t.iter().sum();
        t.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let mut field: Option<DisplacementField> = None;
    let mut textureless = 0;
    for level in (0..cfg.levels).rev() {
        let (m, f) = (&mov[level], &fix[level]);
        let mut u = match field.take() {
            Some(prev) => upsample_field(&prev, f.h, f.w),
            None => DisplacementField::zeros(f.h, f.w),
        };
        let fstd = f.variance().sqrt();
        if fstd <= 1e-12 {
            return Err(RegistrationError::Degenerate("constant fixed image".into()));
        }
        for _ in 0..cfg.iterations {
            let warped = warp_field(m, &u)?;
            let (r, tl) = match_blocks(&warped, f, cfg, fstd);
            textureless = tl;
            // fixed(p) ≈ warped(p + r(p)) = moving(p + r(p) + u(p + r(p))).
            let composed = DisplacementField::from_fn(f.h, f.w, |y, x| {
                let (ry, rx) = (r.dy.get(y, x), r.dx.get(y, x));
                let (qy, qx) = (y as f64 + ry, x as f64 + rx);
                (ry + u.dy.sample(qy, qx), rx + u.dx.sample(qy, qx))
            });
            u = smooth(&composed, &kernel5);
        }
        field = Some(u);
    }
    let mut u = field.expect("at least one level");
    for _ in 0..50 {
        if u.max_gradient() <= cfg.max_gradient {
            break;
        }
        u = smooth(&u, &kernel5);
    }
    if !u.is_finite() {
        return Err(RegistrationError::Degenerate("non-finite displacement".into()));
    }
    Ok(ElasticResult {
        field: u,
        textureless_blocks: textureless,
    })
}
