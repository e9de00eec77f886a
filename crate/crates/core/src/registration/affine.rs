use crate::imgproc::Plane;

use super::{AffineTransform, RegistrationError, Result};

/// Affine transform parameterized about the image center `c`:
/// `T(p) = c + R(θ)·[[sx, shear], [0, sy]]·(p - c) + (tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub theta_deg: f64,
    pub sx: f64,
    pub sy: f64,
    pub shear: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub fn to_transform(&self, cx: f64, cy: f64) -> AffineTransform {
        let (s, c) = self.theta_deg.to_radians().sin_cos();
        let l = [
            [c * self.sx, c * self.shear - s * self.sy],
            [s * self.sx, s * self.shear + c * self.sy],
        ];
        let tx = cx + self.tx - (l[0][0] * cx + l[0][1] * cy);
        let ty = cy + self.ty - (l[1][0] * cx + l[1][1] * cy);
        AffineTransform {
            m: [[l[0][0], l[0][1], tx], [l[1][0], l[1][1], ty]],
        }
    }

    pub fn from_transform(t: &AffineTransform, cx: f64, cy: f64) -> Self {
        let m = &t.m;
        let sx = m[0][0].hypot(m[1][0]);
        let theta = m[1][0].atan2(m[0][0]);
        let (s, c) = theta.sin_cos();
        let shear = c * m[0][1] + s * m[1][1];
        let sy = -s * m[0][1] + c * m[1][1];
        let (px, py) = t.apply(cx, cy);
        Self {
            theta_deg: theta.to_degrees(),
            sx,
            sy,
            shear,
            tx: px - cx,
            ty: py - cy,
        }
    }

    fn to_vec(self) -> [f64; 6] {
        [self.theta_deg, self.sx.ln(), self.sy.ln(), self.shear, self.tx, self.ty]
    }

    fn from_vec(v: &[f64; 6]) -> Self {
        Self {
            theta_deg: v[0],
            sx: v[1].exp(),
            sy: v[2].exp(),
            shear: v[3],
            tx: v[4],
            ty: v[5],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineConfig {
    /// Joint-histogram bins per axis.
    pub bins: usize,
    pub max_evaluations: usize,
    /// Initial pattern-search steps for `[θ°, ln sx, ln sy, shear, tx, ty]`.
    pub initial_steps: [f64; 6],
    /// Search stops once every step falls below its tolerance.
    pub tolerances: [f64; 6],
    /// Gaussian pre-smoothing (px) per stage, coarse first; `0` uses the
    /// raw images.
    pub smoothing: Vec<f64>,
}

impl Default for AffineConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            max_evaluations: 20_000,
            initial_steps: [1.0, 0.02, 0.02, 0.02, 1.0, 1.0],
            tolerances: [2e-3, 2e-5, 2e-5, 2e-5, 2e-3, 2e-3],
            smoothing: vec![1.5, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineResult {
    pub transform: AffineTransform,
    pub params: AffineParams,
    /// Mutual information (nats) at the returned transform.
    pub mutual_information: f64,
    pub evaluations: usize,
}

struct MiContext<'a> {
    moving: &'a Plane,
    fixed_bins: Vec<usize>,
    moving_scale: (f64, f64),
    bins: usize,
    hist: Vec<f64>,
}

fn range(p: &Plane) -> (f64, f64) {
    p.data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)))
}

impl<'a> MiContext<'a> {
    fn new(moving: &'a Plane, fixed: &Plane, bins: usize) -> Result<Self> {
        let (ml, mh) = range(moving);
        let (fl, fh) = range(fixed);
        if mh - ml <= 1e-12 || fh - fl <= 1e-12 {
            return Err(RegistrationError::Degenerate("constant image".into()));
        }
        let top = (bins - 1) as f64;
        let fixed_bins = fixed
            .data
            .iter()
            .map(|&v| (((v - fl) / (fh - fl)) * top).round() as usize)
            .collect();
        Ok(Self {
            moving,
            fixed_bins,
            moving_scale: (ml, top / (mh - ml)),
            bins,
            hist: vec![0.0; bins * bins],
        })
    }

    /// Mutual information of the fixed image and `moving ∘ t` over the
    /// pixels whose source lies inside the moving image. Moving samples
    /// are split linearly between neighbouring bins.
    fn eval(&mut self, t: &AffineTransform, w: usize, h: usize) -> f64 {
        let b = self.bins;
        self.hist.iter_mut().for_each(|v| *v = 0.0);
        let (xmax, ymax) = ((self.moving.w - 1) as f64, (self.moving.h - 1) as f64);
        let mut n = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = t.apply(x as f64, y as f64);
                if !(0.0..=xmax).contains(&sx) || !(0.0..=ymax).contains(&sy) {
                    continue;
                }
                let v = (self.moving.sample(sy, sx) - self.moving_scale.0) * self.moving_scale.1;
                let v = v.clamp(0.0, (b - 1) as f64);
                let i0 = (v.floor() as usize).min(b - 1);
                let frac = v - i0 as f64;
                let row = self.fixed_bins[y * w + x] * b;
                self.hist[row + i0] += 1.0 - frac;
                if i0 + 1 < b {
                    self.hist[row + i0 + 1] += frac;
                }
                n += 1.0;
            }
        }
        if n < 0.1 * (w * h) as f64 {
            return f64::NEG_INFINITY;
        }
        let mut pf = vec![0.0; b];
        let mut pm = vec![0.0; b];
        for i in 0..b {
            for j in 0..b {
                let p = self.hist[i * b + j] / n;
                pf[i] += p;
                pm[j] += p;
            }
        }
        let mut mi = 0.0;
        for i in 0..b {
            for j in 0..b {
                let p = self.hist[i * b + j] / n;
                if p > 0.0 {
                    mi += p * (p / (pf[i] * pm[j])).ln();
                }
            }
        }
        mi
    }
}

/// Maximize mutual information between `fixed` and `moving` warped by an
/// affine transform, starting from `init`, by a pattern search over
/// rotation, per-axis scale, shear and translation.
///
/// On budget exhaustion the error carries the best transform found.
pub fn affine_register(
    moving: &Plane,
    fixed: &Plane,
    init: &AffineTransform,
    cfg: &AffineConfig,
) -> Result<AffineResult> {
    if cfg.bins < 2 {
        return Err(RegistrationError::Invalid(format!("need at least 2 bins, got {}", cfg.bins)));
    }
    if init.det().abs() <= 1e-6 {
        return Err(RegistrationError::Invalid("singular initial transform".into()));
    }
    let (cx, cy) = ((fixed.w as f64 - 1.0) / 2.0, (fixed.h as f64 - 1.0) / 2.0);
    let mut v = AffineParams::from_transform(init, cx, cy).to_vec();
    let mut evaluations = 0;
    let stages: Vec<f64> = if cfg.smoothing.is_empty() { vec![0.0] } else { cfg.smoothing.clone() };
    let mut best = f64::NEG_INFINITY;
    for (si, &sigma) in stages.iter().enumerate() {
        let (m, f) = (moving.gaussian_blur(sigma), fixed.gaussian_blur(sigma));
        let mut ctx = MiContext::new(&m, &f, cfg.bins)?;
        let mut eval = |v: &[f64; 6], evaluations: &mut usize| {
            *evaluations += 1;
            ctx.eval(&AffineParams::from_vec(v).to_transform(cx, cy), f.w, f.h)
        };
        best = eval(&v, &mut evaluations);
        // Later stages start from a finer step.
        let shrink = 0.25f64.powi(si as i32);
        let mut steps: Vec<f64> = cfg.initial_steps.iter().map(|s| s * shrink).collect();
        let last = si + 1 == stages.len();
        loop {
            if steps.iter().zip(&cfg.tolerances).all(|(s, t)| s < t) {
                break;
            }
            if evaluations >= cfg.max_evaluations {
                let params = AffineParams::from_vec(&v);
                return Err(RegistrationError::NotConverged {
                    evaluations,
                    best: Box::new(AffineResult {
                        transform: params.to_transform(cx, cy),
                        params,
                        mutual_information: best,
                        evaluations,
                    }),
                });
            }
            let mut improved = false;
            for i in 0..6 {
                if steps[i] < cfg.tolerances[i] {
                    continue;
                }
                for sign in [1.0, -1.0] {
                    let mut trial = v;
                    trial[i] += sign * steps[i];
                    let s = eval(&trial, &mut evaluations);
                    if s > best + 1e-12 {
                        best = s;
                        v = trial;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                steps.iter_mut().for_each(|s| *s *= 0.5);
            }
            if !last && steps.iter().zip(&cfg.initial_steps).all(|(s, i)| *s < i * shrink * 0.05) {
                break;
            }
        }
    }
    let params = AffineParams::from_vec(&v);
    Ok(AffineResult {
        transform: params.to_transform(cx, cy),
        params,
        mutual_information: best,
        evaluations,
    })
}
