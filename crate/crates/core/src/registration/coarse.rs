use crate::imgproc::Plane;

use super::{RegistrationError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseConfig {
    /// Largest |dy| and |dx| searched; `None` searches every offset that
    /// satisfies the overlap requirement.
    pub max_offset: Option<usize>,
    /// Minimum overlap per axis as a fraction of the moving image.
    pub min_overlap: f64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            max_offset: Some(16),
            min_overlap: 0.5,
        }
    }
}

fn ncc_at(moving: &Plane, fixed: &Plane, dy: isize, dx: isize) -> Option<f64> {
    // Overlap in moving coordinates: p with p + d inside fixed.
    let y0 = (-dy).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let y1 = (moving.h as isize).min(fixed.h as isize - dy) as usize;
    let x1 = (moving.w as isize).min(fixed.w as isize - dx) as usize;
    if y1 <= y0 || x1 <= x0 {
        return None;
    }
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    let (mut sm, mut sf, mut smm, mut sff, mut smf) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in y0..y1 {
        let fy = (y as isize + dy) as usize;
        for x in x0..x1 {
            let m = moving.get(y, x);
            let f = fixed.get(fy, (x as isize + dx) as usize);
            sm += m;
            sf += f;
            smm += m * m;
            sff += f * f;
            smf += m * f;
        }
    }
    let vm = smm - sm * sm / n;
    let vf = sff - sf * sf / n;
    if vm <= 1e-12 * n || vf <= 1e-12 * n {
        return Some(0.0);
    }
    Some((smf - sm * sf / n) / (vm * vf).sqrt())
}

/// Integer offset `(dy, dx)` maximizing normalized cross-correlation under
/// the convention `fixed[p + d] ≈ moving[p]`. Ties go to the smallest
/// `|d|`.
pub fn coarse_match(moving: &Plane, fixed: &Plane, cfg: &CoarseConfig) -> Result<(isize, isize)> {
    if moving.h > fixed.h || moving.w > fixed.w {
        return Err(RegistrationError::Invalid(format!(
            "moving {}x{} does not fit in fixed {}x{}",
            moving.h, moving.w, fixed.h, fixed.w
        )));
    }
    if moving.variance() <= 1e-12 || fixed.variance() <= 1e-12 {
        return Err(RegistrationError::Degenerate("constant image".into()));
    }
    if !(cfg.min_overlap > 0.0 && cfg.min_overlap <= 1.0) {
        return Err(RegistrationError::Invalid(format!("min_overlap {} not in (0, 1]", cfg.min_overlap)));
    }
    let range = |m: usize, f: usize| {
        let need = ((m as f64 * cfg.min_overlap).ceil() as isize).max(1);
        let mut lo = need - m as isize;
        let mut hi = f as isize - need;
        if let Some(r) = cfg.max_offset {
            lo = lo.max(-(r as isize));
            hi = hi.min(r as isize);
        }
        (lo, hi)
    };
    let (ylo, yhi) = range(moving.h, fixed.h);
    let (xlo, xhi) = range(moving.w, fixed.w);
    let mut best: Option<(f64, isize, isize)> = None;
    for dy in ylo..=yhi {
        for dx in xlo..=xhi {
            let Some(s) = ncc_at(moving, fixed, dy, dx) else { continue };
            let better = match best {
                None => true,
                Some((bs, by, bx)) => {
                    s > bs + 1e-12 || ((s - bs).abs() <= 1e-12 && dy * dy + dx * dx < by * by + bx * bx)
                }
            };
            if better {
                best = Some((s, dy, dx));
            }
        }
    }
    best.map(|(_, dy, dx)| (dy, dx))
        .ok_or_else(|| RegistrationError::Invalid("no admissible offsets".into()))
}
