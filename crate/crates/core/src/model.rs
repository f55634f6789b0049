//! Variational posterior state, priors and initialization.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::tensor::CpdFactors;

/// Shape/rate constants of the Gamma hyperpriors on `tau`, `lambda` and `delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub a0: f64,
    pub b0: f64,
    pub c0: f64,
    pub d0: f64,
    pub g0: f64,
    pub h0: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            a0: 1e-6,
            b0: 1e-6,
            c0: 1e-6,
            d0: 1e-6,
            g0: 1e-6,
            h0: 1e-6,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a0, self.b0, self.c0, self.d0, self.g0, self.h0];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Domain(format!("prior constants must be positive and finite: {all:?}")))
        }
    }

    pub fn tau(&self) -> GammaPosterior {
        GammaPosterior::new(self.a0, self.b0)
    }

    pub fn lambda(&self) -> GammaPosterior {
        GammaPosterior::new(self.c0, self.d0)
    }

    pub fn delta(&self) -> GammaPosterior {
        GammaPosterior::new(self.g0, self.h0)
    }
}

/// Gamma distribution in shape/rate form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPosterior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPosterior {
    pub fn new(shape: f64, rate: f64) -> Self {
        GammaPosterior { shape, rate }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// `E[ln x] = ψ(a) − ln b`.
    pub fn mean_ln(&self) -> f64 {
        digamma(self.shape) - self.rate.ln()
    }

    pub fn entropy(&self) -> f64 {
        self.shape - self.rate.ln() + ln_gamma(self.shape) + (1.0 - self.shape) * digamma(self.shape)
    }

    /// `E_self[ln Ga(x | prior)]`.
    pub fn expected_ln_density(&self, prior: &GammaPosterior) -> f64 {
        prior.shape * prior.rate.ln() - ln_gamma(prior.shape) + (prior.shape - 1.0) * self.mean_ln()
            - prior.rate * self.mean()
    }

    fn is_valid(&self) -> bool {
        self.shape.is_finite() && self.rate.is_finite() && self.shape > 0.0 && self.rate > 0.0
    }
}

/// Gaussian posterior over `vec(W^(d))`, with `vec` stacking columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPosterior {
    /// `I x R` mean.
    pub mean: DMatrix<f64>,
    /// `(I R) x (I R)` covariance; block `(r, r')` couples columns `r` and `r'`.
    pub cov: DMatrix<f64>,
    /// `ln det cov`.
    pub log_det: f64,
}

impl FactorPosterior {
    /// Build from mean and covariance, checking shape and positive definiteness.
    pub fn new(mean: DMatrix<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if cov.shape() != (p, p) {
            return Err(Error::Dimension(format!(
                "covariance {:?} for a mean with {p} entries",
                cov.shape()
            )));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numeric("factor covariance is not positive definite"))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(FactorPosterior { mean, cov, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn rank(&self) -> usize {
        self.mean.ncols()
    }

    /// Variance of entry `(i, r)`.
    pub fn var(&self, i: usize, r: usize) -> f64 {
        let k = r * self.dim() + i;
        self.cov[(k, k)]
    }

    /// `E[W(i, r)^2]`.
    pub fn second_entry(&self, i: usize, r: usize) -> f64 {
        self.mean[(i, r)].powi(2) + self.var(i, r)
    }
}

/// Affine maps taking raw signals to the scale the model is fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub input_min: f64,
    pub input_max: f64,
    pub output_mean: f64,
    pub output_std: f64,
}

impl Default for NormalizationRecord {
    /// The identity transform.
    fn default() -> Self {
        NormalizationRecord {
            input_min: 0.0,
            input_max: 1.0,
            output_mean: 0.0,
            output_std: 1.0,
        }
    }
}

impl NormalizationRecord {
    /// Min/max of the inputs and population mean/std of the outputs.
    pub fn fit(u: &[f64], y: &[f64]) -> Result<Self> {
        if u.is_empty() || y.is_empty() {
            return Err(Error::Domain("cannot normalize an empty signal".into()));
        }
        let input_min = u.iter().copied().fold(f64::INFINITY, f64::min);
        let input_max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let n = y.len() as f64;
        let output_mean = y.iter().sum::<f64>() / n;
        let output_std = (y.iter().map(|v| (v - output_mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(input_max > input_min) {
            return Err(Error::Domain("input is constant on the estimation split".into()));
        }
        if !(output_std > 0.0) {
            return Err(Error::Domain("output is constant on the estimation split".into()));
        }
        Ok(NormalizationRecord {
            input_min,
            input_max,
            output_mean,
            output_std,
        })
    }

    pub fn input(&self, u: f64) -> f64 {
        (u - self.input_min) / (self.input_max - self.input_min)
    }

    pub fn output(&self, y: f64) -> f64 {
        (y - self.output_mean) / self.output_std
    }

    pub fn output_inverse(&self, y: f64) -> f64 {
        y * self.output_std + self.output_mean
    }
}

/// Full variational state `q(W^(1..D)) q(delta) q(lambda) q(tau)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub factors: Vec<FactorPosterior>,
    /// One entry per CPD column.
    pub lambda: Vec<GammaPosterior>,
    /// One entry per window row, shared by every factor.
    pub delta: Vec<GammaPosterior>,
    pub tau: GammaPosterior,
    pub memory: usize,
    pub priors: Priors,
    pub normalization: NormalizationRecord,
    /// When false, `delta` stays at its initial value and is treated as fixed.
    pub delta_learned: bool,
}

impl ModelState {
    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn dim(&self) -> usize {
        self.memory + 1
    }

    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda_means(&self) -> Vec<f64> {
        self.lambda.iter().map(GammaPosterior::mean).collect()
    }

    pub fn delta_means(&self) -> Vec<f64> {
        self.delta.iter().map(GammaPosterior::mean).collect()
    }

    pub fn factor_means(&self) -> Vec<DMatrix<f64>> {
        self.factors.iter().map(|f| f.mean.clone()).collect()
    }

    pub fn mean_cpd(&self) -> CpdFactors {
        CpdFactors::new(self.factor_means()).expect("state factors share one shape")
    }

    /// Check the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let (i, r) = (self.dim(), self.rank());
        if self.factors.is_empty() || r == 0 {
            return Err(Error::Format("state has no factors or zero rank".into()));
        }
        for f in &self.factors {
            if f.mean.shape() != (i, r) || f.cov.shape() != (i * r, i * r) {
                return Err(Error::Format(format!(
                    "factor of shape {:?} in a state with I={i}, R={r}",
                    f.mean.shape()
                )));
            }
        }
        if self.delta.len() != i {
            return Err(Error::Format(format!("{} delta entries for I={i}", self.delta.len())));
        }
        let gammas = self.lambda.iter().chain(&self.delta).chain(std::iter::once(&self.tau));
        if gammas.clone().any(|g| !g.is_valid()) {
            return Err(Error::Format("non-positive Gamma parameters".into()));
        }
        Ok(())
    }
}

/// Random factor means (standard normal scaled by `1/sqrt(R)`), identity
/// covariances and every Gamma factor at its prior.
pub fn init_state(order: usize, memory: usize, rank: usize, priors: Priors, seed: u64) -> Result<ModelState> {
    if order == 0 || memory == 0 || rank == 0 {
        return Err(Error::Domain(format!(
            "order, memory and rank must be positive (got {order}, {memory}, {rank})"
        )));
    }
    priors.validate()?;
    let dim = memory + 1;
    let scale = 1.0 / (rank as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = (0..order)
        .map(|_| {
            let mean = DMatrix::from_fn(dim, rank, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
            FactorPosterior {
                mean,
                cov: DMatrix::identity(dim * rank, dim * rank),
                log_det: 0.0,
            }
        })
        .collect();
    Ok(ModelState {
        factors,
        lambda: vec![priors.lambda(); rank],
        delta: vec![priors.delta(); dim],
        tau: priors.tau(),
        memory,
        priors,
        normalization: NormalizationRecord::default(),
        delta_learned: true,
    })
}

/// Diagonal of `E[Λ] ⊗ E[Δ]`: entry `r I + i` is `E[λ_r] E[δ_i]`.
pub fn prior_precision_diag(state: &ModelState) -> Vec<f64> {
    let delta = state.delta_means();
    state
        .lambda_means()
        .into_iter()
        .flat_map(|l| delta.iter().map(move |d| l * d))
        .collect()
}

/// `E[Λ] ⊗ E[Δ]` as a dense matrix.
pub fn prior_precision(state: &ModelState) -> DMatrix<f64> {
    DMatrix::from_diagonal(&prior_precision_diag(state).into())
}
