//! Whole-slide acquisition time under a sparse focus-map policy.
//!
//! A slide is tiled into `n_fovs` camera fields of view. Before imaging, an
//! autofocus search runs at a fraction of them; every FOV is then captured.
//! Coarser (faster, less precise) focus searches are viable when the
//! downstream pipeline tolerates defocus.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScanError {
    #[error("invalid scan parameter: {0}")]
    Invalid(String),
    #[error("reference plan has zero {0} time")]
    ZeroReference(&'static str),
}

pub type Result<T> = std::result::Result<T, ScanError>;

/// Capture time per FOV in seconds (exposures plus stage motion).
///
/// Back-solved from a 208-FOV slide whose fine-mode scan takes 27.1 min in
/// total of which 9.8 min is autofocus: `(27.1 - 9.8) * 60 / 208`.
pub const DEFAULT_CAPTURE_TIME_S: f64 = (27.1 - 9.8) * 60.0 / 208.0;

/// FOVs per slide for the reference tissue area (about 23 mm²).
pub const DEFAULT_FOVS_PER_SLIDE: usize = 208;

pub const FINE_FOCUS_FRACTION: f64 = 0.085;
pub const COARSE_FOCUS_FRACTION: f64 = 0.021;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FocusMode {
    Fine,
    Coarse,
}

impl FocusMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FocusMode::Fine => "fine",
            FocusMode::Coarse => "coarse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fine" => Some(FocusMode::Fine),
            "coarse" => Some(FocusMode::Coarse),
            _ => None,
        }
    }

    pub fn profile(self) -> FocusSearchProfile {
        match self {
            FocusMode::Fine => FocusSearchProfile::fine(),
            FocusMode::Coarse => FocusSearchProfile::coarse(),
        }
    }

    pub fn focus_fraction(self) -> f64 {
        match self {
            FocusMode::Fine => FINE_FOCUS_FRACTION,
            FocusMode::Coarse => COARSE_FOCUS_FRACTION,
        }
    }
}

impl fmt::Display for FocusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Two-pass axial search run at each focus point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocusSearchProfile {
    pub coarse_range_um: f64,
    pub coarse_steps: u32,
    pub fine_range_um: f64,
    pub fine_steps: u32,
    /// Seconds per axial step, including any stage travel between points.
    pub per_step_dwell_s: f64,
    /// Focus precision (± μm).
    pub precision_um: f64,
}

impl FocusSearchProfile {
    /// 23 + 29 steps, 33 s per focus point, ±0.35 μm.
    pub fn fine() -> Self {
        Self {
            coarse_range_um: 50.0,
            coarse_steps: 23,
            fine_range_um: 20.0,
            fine_steps: 29,
            per_step_dwell_s: 33.0 / 52.0,
            precision_um: 0.35,
        }
    }

    /// 9 + 13 steps, 15 s per focus point, ±0.83 μm.
    pub fn coarse() -> Self {
        Self {
            coarse_range_um: 50.0,
            coarse_steps: 9,
            fine_range_um: 20.0,
            fine_steps: 13,
            per_step_dwell_s: 15.0 / 22.0,
            precision_um: 0.83,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_steps < 2 || self.fine_steps < 2 {
            return Err(ScanError::Invalid(format!(
                "search needs at least 2 steps per pass, got {} and {}",
                self.coarse_steps, self.fine_steps
            )));
        }
        let reals = [
            self.coarse_range_um,
            self.fine_range_um,
            self.per_step_dwell_s,
            self.precision_um,
        ];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ScanError::Invalid(format!("negative or non-finite profile value in {self:?}")));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u32 {
        self.coarse_steps + self.fine_steps
    }
}

/// Seconds spent at one focus point.
pub fn autofocus_point_time(profile: &FocusSearchProfile) -> f64 {
    profile.total_steps() as f64 * profile.per_step_dwell_s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanPlan {
    pub n_fovs: usize,
    pub focus_fraction: f64,
    pub profile: FocusSearchProfile,
    pub capture_time_per_fov_s: f64,
}

impl ScanPlan {
    /// Reference plan for `mode` with the default capture time.
    pub fn for_mode(mode: FocusMode, n_fovs: usize) -> Self {
        Self {
            n_fovs,
            focus_fraction: mode.focus_fraction(),
            profile: mode.profile(),
            capture_time_per_fov_s: DEFAULT_CAPTURE_TIME_S,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        if self.n_fovs == 0 {
            return Err(ScanError::Invalid("n_fovs must be at least 1".into()));
        }
        if !(self.focus_fraction > 0.0 && self.focus_fraction <= 1.0) {
            return Err(ScanError::Invalid(format!(
                "focus fraction must be in (0, 1], got {}",
                self.focus_fraction
            )));
        }
        if !self.capture_time_per_fov_s.is_finite() || self.capture_time_per_fov_s < 0.0 {
            return Err(ScanError::Invalid(format!(
                "capture time must be finite and >= 0, got {}",
                self.capture_time_per_fov_s
            )));
        }
        Ok(())
    }

    /// Whole number of focus points placed on the slide, at least one.
    pub fn n_focus_points(&self) -> usize {
        ((self.n_fovs as f64 * self.focus_fraction).round() as usize).max(1)
    }

    /// Focus points per slide as an average rate, `n_fovs · fraction`.
    pub fn expected_focus_points(&self) -> f64 {
        self.n_fovs as f64 * self.focus_fraction
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanReport {
    pub n_fovs: usize,
    pub n_focus_points: usize,
    pub autofocus_s: f64,
    pub capture_s: f64,
    pub total_s: f64,
}

/// Acquisition time of `plan`.
///
/// Autofocus time is charged at the expected focus-point count rather than
/// the rounded one, so small slides are not dominated by rounding.
pub fn plan_scan(plan: &ScanPlan) -> Result<ScanReport> {
    plan.validate()?;
    let autofocus_s = plan.expected_focus_points() * autofocus_point_time(&plan.profile);
    let capture_s = plan.n_fovs as f64 * plan.capture_time_per_fov_s;
    Ok(ScanReport {
        n_fovs: plan.n_fovs,
        n_focus_points: plan.n_focus_points(),
        autofocus_s,
        capture_s,
        total_s: autofocus_s + capture_s,
    })
}

/// Percentage decreases going from `fine` to `coarse`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Savings {
    pub autofocus_pct: f64,
    pub total_pct: f64,
}

pub fn compare_plans(fine: &ScanReport, coarse: &ScanReport) -> Result<Savings> {
    if fine.n_fovs != coarse.n_fovs {
        return Err(ScanError::Invalid(format!(
            "plans cover {} and {} FOVs",
            fine.n_fovs, coarse.n_fovs
        )));
    }
    if fine.autofocus_s == 0.0 {
        return Err(ScanError::ZeroReference("autofocus"));
    }
    if fine.total_s == 0.0 {
        return Err(ScanError::ZeroReference("total"));
    }
    Ok(Savings {
        autofocus_pct: 100.0 * (1.0 - coarse.autofocus_s / fine.autofocus_s),
        total_pct: 100.0 * (1.0 - coarse.total_s / fine.total_s),
    })
}

pub const CSV_HEADER: &str = "mode,n_fovs,focus_points,autofocus_s,capture_s,total_s";

pub fn csv_row(mode: FocusMode, r: &ScanReport) -> String {
    format!(
        "{},{},{},{:.2},{:.2},{:.2}",
        mode, r.n_fovs, r.n_focus_points, r.autofocus_s, r.capture_s, r.total_s
    )
}
