//! Mask volumes, the lung-volume to bundle-volume regression and the QA
//! verdict built on it.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{BroncoError, Result};
use crate::grid::BinaryMask;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Volume in millilitres.
pub fn mask_volume(mask: &BinaryMask) -> f64 {
    mask.count() as f64 * mask.geometry().voxel_volume_mm3() / 1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub schema_version: u32,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
    /// Residual standard deviation with `n - 2` degrees of freedom (ml).
    pub residual_std: f64,
    pub mean_x: f64,
    /// Sum of squared deviations of the training x values.
    pub sxx: f64,
}

impl RegressionModel {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: RegressionModel = serde_json::from_str(s)?;
        if m.schema_version != MODEL_SCHEMA_VERSION {
            return Err(BroncoError::format(
                "schema_version",
                format!("expected {MODEL_SCHEMA_VERSION}, got {}", m.schema_version),
            ));
        }
        if m.n < 3 || !(m.residual_std >= 0.0) || !(m.sxx > 0.0) {
            return Err(BroncoError::format(
                "n",
                "model needs n >= 3, sxx > 0 and residual_std >= 0",
            ));
        }
        Ok(m)
    }
}

/// Ordinary least squares of bundle volume on lung volume.
pub fn fit_regression(pairs: &[(f64, f64)]) -> Result<RegressionModel> {
    let n = pairs.len();
    if n < 3 {
        return Err(BroncoError::param(format!(
            "regression needs at least 3 pairs, got {n}"
        )));
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(BroncoError::param("regression pairs must be finite"));
    }
    let nf = n as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if !(sxx > 0.0) {
        return Err(BroncoError::param("lung volumes are all equal"));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let sse: f64 = pairs.iter().map(|p| (p.1 - (slope * p.0 + intercept)).powi(2)).sum();
    Ok(RegressionModel {
        schema_version: MODEL_SCHEMA_VERSION,
        slope,
        intercept,
        n,
        residual_std: (sse / (nf - 2.0)).sqrt(),
        mean_x,
        sxx,
    })
}

/// Estimate and two-sided prediction interval for a new observation at `x`.
pub fn predict_with_interval(model: &RegressionModel, x: f64, level: f64) -> Result<(f64, f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(BroncoError::param(format!("interval level {level} is not in (0, 1)")));
    }
    let estimate = model.predict(x);
    let nf = model.n as f64;
    let t = StudentsT::new(0.0, 1.0, nf - 2.0)
        .map_err(|e| BroncoError::param(format!("t distribution: {e}")))?
        .inverse_cdf(0.5 + level / 2.0);
    let se = model.residual_std * (1.0 + 1.0 / nf + (x - model.mean_x).powi(2) / model.sxx).sqrt();
    Ok((estimate, estimate - t * se, estimate + t * se))
}

/// Chauvenet's criterion on the regression residual of `(x, y)`.
pub fn chauvenet_flag(model: &RegressionModel, x: f64, y: f64) -> bool {
    let r = (y - model.predict(x)).abs();
    if model.residual_std == 0.0 {
        return r != 0.0;
    }
    chauvenet_z(model.n, r / model.residual_std)
}

/// `n * erfc(z / sqrt 2) < 0.5`.
pub fn chauvenet_z(n: usize, z: f64) -> bool {
    n as f64 * erfc(z / std::f64::consts::SQRT_2) < 0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    SuspectedOversegmentation,
    SuspectedUndersegmentation,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Ok => "ok",
            Verdict::SuspectedOversegmentation => "suspected_oversegmentation",
            Verdict::SuspectedUndersegmentation => "suspected_undersegmentation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaVerdict {
    pub lung_volume: f64,
    pub measured_volume: f64,
    pub predicted_volume: f64,
    pub interval: (f64, f64),
    pub level: f64,
    pub chauvenet_flag: bool,
    pub verdict: Verdict,
}

pub fn qa_verdict(model: &RegressionModel, lung_volume: f64, bundle_volume: f64, level: f64) -> Result<QaVerdict> {
    let (estimate, lo, hi) = predict_with_interval(model, lung_volume, level)?;
    let flag = chauvenet_flag(model, lung_volume, bundle_volume);
    let inside = bundle_volume >= lo && bundle_volume <= hi;
    let verdict = if inside && !flag {
        Verdict::Ok
    } else if bundle_volume >= estimate {
        Verdict::SuspectedOversegmentation
    } else {
        Verdict::SuspectedUndersegmentation
    };
    Ok(QaVerdict {
        lung_volume,
        measured_volume: bundle_volume,
        predicted_volume: estimate,
        interval: (lo, hi),
        level,
        chauvenet_flag: flag,
        verdict,
    })
}
