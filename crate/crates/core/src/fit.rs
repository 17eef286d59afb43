//! Least-squares fits used by the verification reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    /// log(value) against log(t): `value ~ C * t^slope`.
    PowerLaw,
    /// value against |log t|: `value ~ slope*|log t| + intercept`.
    LogLinear,
    /// value against t.
    Linear,
}

/// Outcome of a least-squares slope fit over a sweep of heights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub model: FitModel,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// The (t, value) pairs that entered the fit, in sweep order.
    pub points: Vec<(f64, f64)>,
    /// Heights dropped because the section boundary was under-resolved.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<f64>,
}

/// Plain least squares on (x, y) with the coefficient of determination.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

impl FitReport {
    /// Fit (t, value) pairs under the given model. Requires at least 4 points.
    pub fn fit(model: FitModel, points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InsufficientData(format!(
                "fit needs >= 4 points, got {}",
                points.len()
            )));
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = points
            .iter()
            .map(|&(t, v)| match model {
                FitModel::PowerLaw => (t.ln(), v.ln()),
                FitModel::LogLinear => (t.ln().abs(), v),
                FitModel::Linear => (t, v),
            })
            .unzip();
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(
                "non-finite value entered a fit (nonpositive input to a log model?)".into(),
            ));
        }
        let (slope, intercept, r2) = least_squares(&xs, &ys);
        Ok(FitReport {
            model,
            slope,
            intercept,
            r2,
            points: points.to_vec(),
            excluded: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn recovers_exact_power_law() {
        let pts: Vec<(f64, f64)> = (1..=6).map(|k| {
            let t = 0.01 * 2f64.powi(k);
            (t, 3.0 * t.powf(-0.5))
        }).collect();
        let fit = FitReport::fit(FitModel::PowerLaw, &pts).unwrap();
        assert_relative_eq!(fit.slope, -0.5, epsilon = 1e-12);
        assert_relative_eq!(fit.intercept, 3f64.ln(), epsilon = 1e-12);
        assert!(fit.r2 > 1.0 - 1e-12);
    }

    #[test]
    fn log_linear_model() {
        let pts: Vec<(f64, f64)> = (1..=5).map(|k| {
            let t = 0.5f64.powi(k * 2);
            (t, 2.0 * t.ln().abs() + 1.0)
        }).collect();
        let fit = FitReport::fit(FitModel::LogLinear, &pts).unwrap();
        assert_relative_eq!(fit.slope, 2.0, epsilon = 1e-12);
        assert_relative_eq!(fit.intercept, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = vec![(0.1, 1.0), (0.2, 2.0), (0.4, 3.0)];
        assert!(FitReport::fit(FitModel::Linear, &pts).is_err());
    }
}
