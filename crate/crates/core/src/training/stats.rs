use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard deviation with the `n − 1` denominator; 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Two-sided Student-t quantile `t((1 + level) / 2, df)`.
pub fn t_quantile(level: f64, df: usize) -> Result<f64> {
    let t = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::Parameter(format!("t distribution with {df} dof: {e}")))?;
    Ok(t.inverse_cdf(0.5 + level / 2.0))
}

/// `mean ± t · s / √n`.
pub fn confidence_interval(values: &[f64], level: f64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Parameter(format!(
            "confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let n = values.len();
    let m = mean(values);
    let half = t_quantile(level, n - 1)? * sample_std(values) / (n as f64).sqrt();
    Ok((m - half, m + half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Summary {
    /// 95% summary. A single value gets zero spread and a degenerate interval.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("summary of zero values".into()));
        }
        let m = mean(values);
        let (lo, hi) = if values.len() == 1 {
            (m, m)
        } else {
            confidence_interval(values, 0.95)?
        };
        Ok(Summary {
            n: values.len(),
            mean: m,
            std: sample_std(values),
            ci_low: lo,
            ci_high: hi,
        })
    }

    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }
}
