//! End-to-end fitting and scoring on raw datasets: normalization on the
//! estimation split, windowing, identification, de-standardized metrics.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{build_lagged_matrix_padded, LaggedInputMatrix};
use crate::model::{ModelState, NormalizationRecord, Priors};
use crate::predict::{evaluate, predict_all, EvalReport, PredictiveT};
use crate::vi::{identify, FitConfig, FitTrace};

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub memory: usize,
    pub config: FitConfig,
    pub priors: Priors,
    /// Samples `0..split` form the estimation set; the whole dataset when `None`.
    pub split: Option<usize>,
    /// Leading estimation samples excluded from the likelihood.
    pub warmup: usize,
}

impl FitOptions {
    pub fn estimation_len(&self, ds: &Dataset) -> Result<usize> {
        let n = self.split.unwrap_or(ds.len());
        if n == 0 || n > ds.len() {
            return Err(Error::Domain(format!("split {n} invalid for {} samples", ds.len())));
        }
        if self.warmup >= n {
            return Err(Error::Domain(format!("warm-up {} leaves no estimation samples", self.warmup)));
        }
        Ok(n)
    }
}

/// Windows of the normalized signal. The raw signal is zero before its first
/// sample, so the padding is the normalized image of zero.
pub fn normalized_windows(u_raw: &[f64], rec: &NormalizationRecord, memory: usize) -> Result<LaggedInputMatrix> {
    let inputs: Vec<f64> = u_raw.iter().map(|&v| rec.input(v)).collect();
    build_lagged_matrix_padded(&inputs, memory, rec.input(0.0))
}

/// Fit on the estimation split of a raw dataset.
pub fn fit_dataset(ds: &Dataset, opts: &FitOptions) -> Result<(ModelState, FitTrace)> {
    let n = opts.estimation_len(ds)?;
    let rec = NormalizationRecord::fit(&ds.u[..n], &ds.y[..n])?;
    let targets: Vec<f64> = ds.y[opts.warmup..n].iter().map(|&v| rec.output(v)).collect();
    let windows = normalized_windows(&ds.u[..n], &rec, opts.memory)?.slice(opts.warmup, n)?;
    let (mut state, trace) = identify(&windows, &targets, &opts.config, opts.priors)?;
    state.normalization = rec;
    Ok((state, trace))
}

/// Predictive distributions (original units) for samples `from..` of a raw input signal.
pub fn predict_signal(state: &ModelState, u_raw: &[f64], from: usize, exec: Exec) -> Result<Vec<PredictiveT>> {
    let windows = normalized_windows(u_raw, &state.normalization, state.memory)?.slice(from, u_raw.len())?;
    Ok(predict_all(state, &windows, exec)?
        .iter()
        .map(|p| p.denormalize(&state.normalization))
        .collect())
}

/// Score samples `from..` of a raw dataset. Earlier samples still feed the lag windows.
pub fn evaluate_dataset(state: &ModelState, ds: &Dataset, from: usize, exec: Exec) -> Result<EvalReport> {
    let windows = normalized_windows(&ds.u, &state.normalization, state.memory)?.slice(from, ds.len())?;
    evaluate(state, &windows, &ds.y[from..], exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{fading_memory_factors, gaussian_input, synthesize, SyntheticSystem};

    #[test]
    fn fit_and_score_synthetic_data() {
        let f = fading_memory_factors(2, 4, 1, 0.6, 3).unwrap();
        let sys = SyntheticSystem::Cpd { factors: f, noise_std: 0.05 };
        let u: Vec<f64> = gaussian_input(600, 4).iter().map(|v| 3.0 * v + 10.0).collect();
        let ds = synthesize(&sys, &u, 5).unwrap();
        let opts = FitOptions {
            memory: 4,
            config: FitConfig {
                order: 2,
                init_rank: 3,
                max_iter: 60,
                ..FitConfig::default()
            },
            priors: Priors::default(),
            split: Some(400),
            warmup: 4,
        };
        let (state, _) = fit_dataset(&ds, &opts).unwrap();
        assert_eq!(state.normalization, NormalizationRecord::fit(&u[..400], &ds.y[..400]).unwrap());
        let report = evaluate_dataset(&state, &ds, 400, Exec::default()).unwrap();
        assert_eq!(report.predictions.len(), 200);
        assert!(report.rmse < 0.15, "rmse {}", report.rmse);

        let preds = predict_signal(&state, &u, 400, Exec::default()).unwrap();
        assert_eq!(preds, report.predictions);
    }

    #[test]
    fn first_windows_match_zero_initial_conditions() {
        let f = fading_memory_factors(2, 4, 1, 1.0, 8).unwrap();
        let sys = SyntheticSystem::Cpd { factors: f, noise_std: 0.05 };
        let u: Vec<f64> = gaussian_input(500, 9).iter().map(|v| v + 3.0).collect();
        let ds = synthesize(&sys, &u, 10).unwrap();
        let opts = FitOptions {
            memory: 4,
            config: FitConfig {
                order: 2,
                init_rank: 2,
                max_iter: 300,
                ..FitConfig::default()
            },
            priors: Priors::default(),
            split: None,
            warmup: 0,
        };
        let (state, _) = fit_dataset(&ds, &opts).unwrap();
        let report = evaluate_dataset(&state, &ds, 0, Exec::default()).unwrap();
        assert!(report.rmse < 0.1, "rmse {}", report.rmse);
    }

    #[test]
    fn bad_split_is_rejected() {
        let ds = Dataset::new(vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 2.0]).unwrap();
        let opts = FitOptions {
            memory: 1,
            config: FitConfig::default(),
            priors: Priors::default(),
            split: Some(5),
            warmup: 0,
        };
        assert!(fit_dataset(&ds, &opts).is_err());
        let opts = FitOptions { split: Some(2), warmup: 2, ..opts };
        assert!(fit_dataset(&ds, &opts).is_err());
    }
}
