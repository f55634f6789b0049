//! Student-t predictive distribution and evaluation metrics.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{design_column, LaggedInputMatrix};
use crate::model::{ModelState, NormalizationRecord};
use crate::tensor::cpd_dot_unchecked;

/// Location-scale Student-t.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveT {
    pub location: f64,
    pub scale: f64,
    pub dof: f64,
}

impl PredictiveT {
    /// `dof / (dof − 2) · scale²`, defined only for `dof > 2`.
    pub fn variance(&self) -> Option<f64> {
        (self.dof > 2.0).then(|| self.dof / (self.dof - 2.0) * self.scale * self.scale)
    }

    pub fn ln_pdf(&self, y: f64) -> f64 {
        let nu = self.dof;
        let z = (y - self.location) / self.scale;
        ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln() - self.scale.ln()
            - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
    }

    /// Map a prediction on the standardized output scale back to original units.
    pub fn denormalize(&self, rec: &NormalizationRecord) -> PredictiveT {
        PredictiveT {
            location: rec.output_inverse(self.location),
            scale: self.scale * rec.output_std,
            dof: self.dof,
        }
    }
}

/// Predictive distribution for one (normalized) window `(1, u(n), ..., u(n−M+1))`.
///
/// `scale² = b_N / a_N + Σ_d g^(d)T Σ^(d) g^(d)` with `g^(d)` the mode-`d`
/// design column at the posterior means; `dof = 2 a_N`.
pub fn predict_one(state: &ModelState, window: &[f64]) -> Result<PredictiveT> {
    if window.len() != state.dim() {
        return Err(Error::Dimension(format!(
            "window of length {} for a model with I={}",
            window.len(),
            state.dim()
        )));
    }
    let means = state.factor_means();
    let location = cpd_dot_unchecked(&means, window);
    let spread: f64 = state
        .factors
        .iter()
        .enumerate()
        .map(|(d, f)| {
            let g = design_column(&means, d, window);
            (&f.cov * &g).dot(&g)
        })
        .sum();
    let scale2 = state.tau.rate / state.tau.shape + spread;
    Ok(PredictiveT {
        location,
        scale: scale2.sqrt(),
        dof: 2.0 * state.tau.shape,
    })
}

/// Predictions for every window, on the model's normalized output scale.
pub fn predict_all(state: &ModelState, u: &LaggedInputMatrix, exec: Exec) -> Result<Vec<PredictiveT>> {
    exec.map(u.len(), |n| predict_one(state, u.window(n)))
        .into_iter()
        .collect()
}

/// Mean negative log predictive density.
pub fn nll(preds: &[PredictiveT], y: &[f64]) -> Result<f64> {
    check_lengths(preds, y)?;
    Ok(-preds.iter().zip(y).map(|(p, &v)| p.ln_pdf(v)).sum::<f64>() / y.len() as f64)
}

pub fn rmse(preds: &[PredictiveT], y: &[f64]) -> Result<f64> {
    check_lengths(preds, y)?;
    let sse: f64 = preds.iter().zip(y).map(|(p, v)| (p.location - v).powi(2)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

fn check_lengths(preds: &[PredictiveT], y: &[f64]) -> Result<()> {
    if preds.len() != y.len() || y.is_empty() {
        return Err(Error::Dimension(format!("{} predictions against {} targets", preds.len(), y.len())));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub nll: f64,
    /// Predictions in original output units.
    pub predictions: Vec<PredictiveT>,
}

impl EvalReport {
    /// `(mean, variance)` per point; variance is `None` when `dof ≤ 2`.
    pub fn mean_variance(&self) -> Vec<(f64, Option<f64>)> {
        self.predictions.iter().map(|p| (p.location, p.variance())).collect()
    }
}

/// Predict on normalized windows, de-standardize, and score against raw targets.
pub fn evaluate(state: &ModelState, u: &LaggedInputMatrix, y_raw: &[f64], exec: Exec) -> Result<EvalReport> {
    let predictions: Vec<PredictiveT> = predict_all(state, u, exec)?
        .iter()
        .map(|p| p.denormalize(&state.normalization))
        .collect();
    Ok(EvalReport {
        rmse: rmse(&predictions, y_raw)?,
        nll: nll(&predictions, y_raw)?,
        predictions,
    })
}
