use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{MetricsError, Result};

/// Significance threshold for the paired tests.
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub n_pairs: usize,
}

impl TTestResult {
    pub fn significant(&self) -> bool {
        self.p_value < SIGNIFICANCE
    }
}

fn paired_t(c1: &[f64], c2: &[f64]) -> Result<(f64, usize)> {
    if c1.len() != c2.len() {
        return Err(MetricsError::Invalid(format!(
            "paired samples differ in length: {} vs {}",
            c1.len(),
            c2.len()
        )));
    }
    let n = c1.len();
    if n < 2 {
        return Err(MetricsError::Invalid(format!("need at least 2 pairs, got {n}")));
    }
    if c1.iter().chain(c2).any(|v| !v.is_finite()) {
        return Err(MetricsError::Invalid("non-finite sample".into()));
    }
    let d: Vec<f64> = c1.iter().zip(c2).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let t = if sd == 0.0 {
        if mean == 0.0 {
            0.0
        } else {
            mean.signum() * f64::INFINITY
        }
    } else {
        mean / (sd / (n as f64).sqrt())
    };
    Ok((t, n))
}

fn upper_tail(t: f64, dof: usize) -> f64 {
    if t == f64::INFINITY {
        return 0.0;
    }
    if t == f64::NEG_INFINITY {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, dof as f64).expect("dof >= 1");
    // P(T > t) = P(T < -t) by symmetry; evaluating the lower tail keeps
    // precision for large t.
    dist.cdf(-t).clamp(0.0, 1.0)
}

/// Tests `H1: mean(c2) < mean(c1)` on the paired differences `c1 - c2`.
///
/// When every difference is identical the statistic is infinite and the
/// p-value degenerates to 0 or 1; when every difference is zero, `t = 0` and
/// `p = 0.5`.
pub fn paired_upper_t_test(c1: &[f64], c2: &[f64]) -> Result<TTestResult> {
    let (t, n) = paired_t(c1, c2)?;
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: n - 1,
        p_value: upper_tail(t, n - 1),
        n_pairs: n,
    })
}

/// Opposite-direction counterpart: `H1: mean(c2) > mean(c1)`.
pub fn paired_lower_t_test(c1: &[f64], c2: &[f64]) -> Result<TTestResult> {
    let (t, n) = paired_t(c1, c2)?;
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: n - 1,
        p_value: upper_tail(-t, n - 1),
        n_pairs: n,
    })
}
