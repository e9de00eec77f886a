//! Color fidelity as a function of defocus.
//!
//! Every framework-1/2 output is compared against the framework-3 output of
//! the same field of view, i.e. the stainer applied to the in-focus plane.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::metrics::{
    color_difference, max_scales, msssim, paired_upper_t_test, psnr, ssim, ColorDifference, MsssimConfig, SsimConfig,
    TTestResult,
};
use crate::phantom::{normalize_input, FovRecord};
use crate::tensor::Tensor;

use super::infer::{Framework, Models};
use super::plot::{line_plot, Series};
use super::{PipelineError, Result};

pub const CHANNELS: [&str; 3] = ["Y", "Cb", "Cr"];

/// Metrics of one stained output against its framework-3 reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorRecord {
    pub fov_id: usize,
    pub framework: Framework,
    pub z_axial_um: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub msssim: f64,
    pub diff: ColorDifference,
}

impl ColorRecord {
    pub fn channel(&self, c: usize) -> f64 {
        match c {
            0 => self.diff.dy,
            1 => self.diff.dcb,
            _ => self.diff.dcr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TTestRow {
    pub z_axial_um: f64,
    pub channel: &'static str,
    /// `c1` framework-1 differences, `c2` framework-2 differences.
    pub result: TTestResult,
}

/// Mean PSNR of defocused inputs and refocused outputs against the
/// normalized in-focus plane, with `MAX` the target's dynamic range.
#[derive(Clone, Debug, PartialEq)]
pub struct RefocusRow {
    pub z_axial_um: f64,
    pub psnr_input: f64,
    pub psnr_output: f64,
}

impl RefocusRow {
    pub fn gain(&self) -> f64 {
        self.psnr_output - self.psnr_input
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub planes: Vec<f64>,
    pub records: Vec<ColorRecord>,
    pub ttests: Vec<TTestRow>,
    pub refocus: Vec<RefocusRow>,
}

fn same_z(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-6
}

impl EvalReport {
    /// Mean difference on `channel` for `framework` at `z`.
    pub fn mean_difference(&self, framework: Framework, z: f64, channel: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.framework == framework && same_z(r.z_axial_um, z))
            .map(|r| r.channel(channel))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn ttest(&self, z: f64, channel: &str) -> Option<&TTestRow> {
        self.ttests.iter().find(|t| same_z(t.z_axial_um, z) && t.channel == channel)
    }

    pub fn refocus_at(&self, z: f64) -> Option<&RefocusRow> {
        self.refocus.iter().find(|r| same_z(r.z_axial_um, z))
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("fov_id,framework,z_axial_um,psnr_db,ssim,msssim,dY,dCb,dCr\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:.1},{:.4},{:.6},{:.6},{:.4},{:.4},{:.4}",
                r.fov_id,
                r.framework.index(),
                r.z_axial_um,
                r.psnr_db,
                r.ssim,
                r.msssim,
                r.diff.dy,
                r.diff.dcb,
                r.diff.dcr
            );
        }
        s
    }

    pub fn ttest_csv(&self) -> String {
        let mut s = String::from("z_axial_um,channel,t,dof,p\n");
        for t in &self.ttests {
            let _ = writeln!(
                s,
                "{:.1},{},{:.6},{},{:.6e}",
                t.z_axial_um, t.channel, t.result.t_statistic, t.result.degrees_of_freedom, t.result.p_value
            );
        }
        s
    }

    pub fn refocus_csv(&self) -> String {
        let mut s = String::from("z_axial_um,psnr_input_db,psnr_output_db,gain_db\n");
        for r in &self.refocus {
            let _ = writeln!(
                s,
                "{:.1},{:.4},{:.4},{:.4}",
                r.z_axial_um,
                r.psnr_input,
                r.psnr_output,
                r.gain()
            );
        }
        s
    }

    /// CSV tables plus one curve plot per color channel.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        fs::write(dir.join("ttest.csv"), self.ttest_csv())?;
        if !self.refocus.is_empty() {
            fs::write(dir.join("refocus.csv"), self.refocus_csv())?;
        }
        for (c, name) in CHANNELS.iter().enumerate() {
            let curve = |f: Framework| -> Vec<(f64, f64)> {
                self.planes
                    .iter()
                    .filter_map(|&z| self.mean_difference(f, z, c).map(|v| (z, v)))
                    .collect()
            };
            let series = [
                Series {
                    color: [200, 40, 40],
                    points: curve(Framework::Direct),
                },
                Series {
                    color: [40, 80, 200],
                    points: curve(Framework::Refocused),
                },
            ];
            line_plot(&dir.join(format!("d{name}_vs_defocus.png")), &series, 480, 320)?;
        }
        Ok(())
    }
}

/// Run frameworks 1 and 2 (when a refocuser is loaded) on every plane of
/// every record.
pub fn evaluate_color_vs_defocus(records: &[FovRecord], models: &Models) -> Result<EvalReport> {
    let Some(first) = records.first() else {
        return Err(PipelineError::Config("no evaluation records".into()));
    };
    let planes = first.z_axial.clone();
    let mut report = EvalReport {
        planes: planes.clone(),
        ..Default::default()
    };
    let mut refocus_sums = vec![(0.0, 0.0); planes.len()];
    for rec in records {
        if rec.z_axial.len() != planes.len() || rec.z_axial.iter().zip(&planes).any(|(a, b)| !same_z(*a, *b)) {
            return Err(PipelineError::Config(format!("record {} has a different set of planes", rec.id)));
        }
        let reference = models.stain(rec.af_infocus(), Framework::InFocus)?;
        let (_, h, w) = reference.chw()?;
        let ssim_cfg = SsimConfig::with_range(255.0);
        let ms_cfg = MsssimConfig::with_scales(ssim_cfg, max_scales(h, w, ssim_cfg.window.size()).max(1))?;
        let score = |out: &Tensor<f64>, framework: Framework, z: f64| -> Result<ColorRecord> {
            Ok(ColorRecord {
                fov_id: rec.id,
                framework,
                z_axial_um: z,
                psnr_db: psnr(&reference, out, 255.0)?,
                ssim: ssim(&reference, out, &ssim_cfg)?,
                msssim: msssim(&reference, out, &ms_cfg)?,
                diff: color_difference(&reference, out)?,
            })
        };
        let target = normalize_input(rec.af_infocus())?.cast::<f64>();
        let (lo, hi) = target
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let range = (hi - lo).max(1e-12);
        for (k, (&z, af)) in planes.iter().zip(&rec.af_stack).enumerate() {
            let direct = models.stain(af, Framework::Direct)?;
            report.records.push(score(&direct, Framework::Direct, z)?);
            if models.refocuser.is_some() {
                let refocused = models.refocus(af)?.cast::<f64>();
                let input = normalize_input(af)?.cast::<f64>();
                refocus_sums[k].0 += psnr(&target, &input, range)?;
                refocus_sums[k].1 += psnr(&target, &refocused, range)?;
                let both = models.stain(af, Framework::Refocused)?;
                report.records.push(score(&both, Framework::Refocused, z)?);
            }
        }
    }
    if models.refocuser.is_none() {
        return Ok(report);
    }
    let n = records.len() as f64;
    for (&z, (i, o)) in planes.iter().zip(&refocus_sums) {
        report.refocus.push(RefocusRow {
            z_axial_um: z,
            psnr_input: i / n,
            psnr_output: o / n,
        });
    }
    for &z in &planes {
        for (c, name) in CHANNELS.iter().enumerate() {
            let diffs = |f: Framework| -> Vec<f64> {
                report
                    .records
                    .iter()
                    .filter(|r| r.framework == f && same_z(r.z_axial_um, z))
                    .map(|r| r.channel(c))
                    .collect()
            };
            let result = paired_upper_t_test(&diffs(Framework::Direct), &diffs(Framework::Refocused))?;
            report.ttests.push(TTestRow {
                z_axial_um: z,
                channel: name,
                result,
            });
        }
    }
    Ok(report)
}
