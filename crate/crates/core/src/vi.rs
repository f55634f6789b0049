//! Mean-field coordinate ascent: closed-form updates for every posterior
//! factor, the evidence lower bound and automatic rank truncation.
//!
//! One sweep updates each factor matrix in turn, then `delta` (when
//! learned), `lambda` and, under [`TauSchedule::EverySweep`], `tau`. The
//! ELBO is evaluated after the sweep and near-zero CPD columns are pruned.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{expected_gram, expected_residual_from_moments, second_moment, LaggedInputMatrix, SecondMoments};
use crate::model::{init_state, prior_precision_diag, FactorPosterior, GammaPosterior, ModelState, Priors};

const LN_2PI: f64 = 1.837_877_066_409_345_5; // ln(2π)

/// When the noise precision is re-estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TauSchedule {
    /// Once per sweep, after `lambda`. Keeps every sweep an ascent step on the ELBO.
    EverySweep,
    /// Only once, after the loop has converged; `tau` stays at its prior mean during the sweeps.
    AfterLoop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Volterra order `D`.
    pub order: usize,
    /// Initial CPD rank.
    pub init_rank: usize,
    pub max_iter: usize,
    /// Stop once `|L_t − L_{t−1}| < elbo_rel_tol · |L_{t−1}|`.
    pub elbo_rel_tol: f64,
    /// Prune column `r` when its largest RMS across factors falls below this
    /// fraction of the largest column RMS.
    pub truncation_threshold: f64,
    pub delta_enabled: bool,
    pub tau_schedule: TauSchedule,
    pub exec: Exec,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            order: 3,
            init_rank: 20,
            max_iter: 200,
            elbo_rel_tol: 1e-6,
            truncation_threshold: 1e-3,
            delta_enabled: true,
            tau_schedule: TauSchedule::EverySweep,
            exec: Exec::default(),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.init_rank == 0 || self.max_iter == 0 {
            return Err(Error::Domain("order, rank and max_iter must be at least 1".into()));
        }
        if !(self.elbo_rel_tol > 0.0) || !(self.truncation_threshold > 0.0) {
            return Err(Error::Domain("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub elbo: f64,
    /// Rank the ELBO was evaluated at (before any truncation in this sweep).
    pub rank: usize,
    pub e_tau: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub records: Vec<IterRecord>,
    pub converged: bool,
    pub runtime_s: f64,
}

impl FitTrace {
    pub fn final_elbo(&self) -> Option<f64> {
        self.records.last().map(|r| r.elbo)
    }

    /// Consecutive ELBO pairs not separated by a rank change.
    pub fn within_rank_pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.records
            .windows(2)
            .filter(|w| w[0].rank == w[1].rank)
            .map(|w| (w[0].elbo, w[1].elbo))
    }
}

fn check_data(state: &ModelState, u: &LaggedInputMatrix, y: &[f64]) -> Result<()> {
    if u.len() != y.len() {
        return Err(Error::Dimension(format!("{} windows against {} targets", u.len(), y.len())));
    }
    if u.dim() != state.dim() {
        return Err(Error::Dimension(format!(
            "window length {} against model I={}",
            u.dim(),
            state.dim()
        )));
    }
    Ok(())
}

fn all_moments(state: &ModelState, u: &LaggedInputMatrix, exec: Exec) -> Vec<SecondMoments> {
    state.factors.iter().map(|f| second_moment(u, f, exec)).collect()
}

/// Cholesky of a symmetric positive-definite matrix, retrying once with a
/// small diagonal jitter.
fn spd_factor(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite entries in posterior precision"));
    }
    let p = a.nrows();
    let jitter = 1e-10 * a.trace() / p as f64;
    match a.clone().cholesky() {
        Some(c) => Ok(c),
        None => {
            let mut b = a;
            for k in 0..p {
                b[(k, k)] += jitter;
            }
            b.cholesky()
                .ok_or_else(|| Error::numeric("posterior precision is not positive definite"))
        }
    }
}

/// Inverse of a lower-triangular matrix by recursive 2x2 blocking, so the
/// bulk of the work runs as matrix products.
fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= 64 {
        let mut inv = DMatrix::identity(n, n);
        l.solve_lower_triangular_mut(&mut inv);
        return inv;
    }
    let k = n / 2;
    let a_inv = lower_inverse(&l.view((0, 0), (k, k)).into_owned());
    let c_inv = lower_inverse(&l.view((k, k), (n - k, n - k)).into_owned());
    let off = -(&c_inv * l.view((k, 0), (n - k, k)) * &a_inv);
    let mut inv = DMatrix::zeros(n, n);
    inv.view_mut((0, 0), (k, k)).copy_from(&a_inv);
    inv.view_mut((k, k), (n - k, n - k)).copy_from(&c_inv);
    inv.view_mut((k, 0), (n - k, k)).copy_from(&off);
    inv
}

/// Update `q(W^(d))` given cached moments of every mode.
pub fn update_factor_with(
    state: &ModelState,
    u: &LaggedInputMatrix,
    y: &[f64],
    d: usize,
    moments: &[SecondMoments],
    exec: Exec,
) -> Result<FactorPosterior> {
    if d >= state.order() {
        return Err(Error::Dimension(format!("mode {d} out of range for order {}", state.order())));
    }
    let (i, r) = (state.dim(), state.rank());
    let tau = state.tau.mean();
    let others: Vec<&SecondMoments> = moments
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != d)
        .map(|(_, m)| m)
        .collect();

    let mut precision = expected_gram(u, &others, r, exec)? * tau;
    for (k, p) in prior_precision_diag(state).into_iter().enumerate() {
        precision[(k, k)] += p;
    }

    // E[G] y, block r = U (y ⊛ h̄_r) with h̄_n = ⊛_{k≠d} E[W^(k)T u_n]
    let mut rhs = DVector::zeros(i * r);
    let mut weights = DVector::zeros(u.len());
    for col in 0..r {
        for (n, w) in weights.iter_mut().enumerate() {
            *w = others.iter().fold(y[n], |acc, m| acc * m.mean(n)[col]);
        }
        rhs.rows_mut(col * i, i).copy_from(&(u.matrix() * &weights));
    }
    rhs *= tau;

    let chol = spd_factor(precision)?;
    let log_det = -2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let l_inv = lower_inverse(&chol.l());
    let mut cov = l_inv.transpose() * &l_inv;
    cov = (&cov + cov.transpose()) * 0.5;
    let mean = chol.solve(&rhs);
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) || !log_det.is_finite() {
        return Err(Error::numeric(format!("non-finite posterior for factor {d}")));
    }
    Ok(FactorPosterior {
        mean: DMatrix::from_column_slice(i, r, mean.as_slice()),
        cov,
        log_det,
    })
}

/// `Σ^(d) = [E[τ] E[G G^T] + E[Λ] ⊗ E[Δ]]^{-1}`, `vec(W̃^(d)) = E[τ] Σ^(d) E[G] y`.
pub fn update_factor(
    state: &ModelState,
    u: &LaggedInputMatrix,
    y: &[f64],
    d: usize,
    exec: Exec,
) -> Result<FactorPosterior> {
    check_data(state, u, y)?;
    update_factor_with(state, u, y, d, &all_moments(state, u, exec), exec)
}

/// Row precisions: `g = g0 + D R / 2`, `h_i = h0 + ½ Σ_d E[w_i^(d)T Λ w_i^(d)]`.
pub fn update_delta(state: &ModelState) -> Vec<GammaPosterior> {
    let lambda = state.lambda_means();
    let shape = state.priors.g0 + (state.order() * state.rank()) as f64 / 2.0;
    (0..state.dim())
        .map(|i| {
            let quad: f64 = state
                .factors
                .iter()
                .map(|f| lambda.iter().enumerate().map(|(r, l)| l * f.second_entry(i, r)).sum::<f64>())
                .sum();
            GammaPosterior::new(shape, state.priors.h0 + 0.5 * quad)
        })
        .collect()
}

/// Column precisions: `c = c0 + D I / 2`, `d_r = d0 + ½ Σ_d E[w_r^(d)T Δ w_r^(d)]`.
pub fn update_lambda(state: &ModelState) -> Vec<GammaPosterior> {
    let delta = state.delta_means();
    let shape = state.priors.c0 + (state.order() * state.dim()) as f64 / 2.0;
    (0..state.rank())
        .map(|r| {
            let quad: f64 = state
                .factors
                .iter()
                .map(|f| delta.iter().enumerate().map(|(i, dl)| dl * f.second_entry(i, r)).sum::<f64>())
                .sum();
            GammaPosterior::new(shape, state.priors.d0 + 0.5 * quad)
        })
        .collect()
}

fn tau_from_residual(priors: &Priors, n: usize, residual: f64) -> GammaPosterior {
    GammaPosterior::new(priors.a0 + n as f64 / 2.0, priors.b0 + 0.5 * residual)
}

/// `a = a0 + N/2`, `b = b0 + ½ E‖y − ŷ‖²`.
pub fn update_tau(state: &ModelState, u: &LaggedInputMatrix, y: &[f64], exec: Exec) -> Result<GammaPosterior> {
    check_data(state, u, y)?;
    let residual = expected_residual_from_moments(y, &all_moments(state, u, exec), exec)?;
    Ok(tau_from_residual(&state.priors, y.len(), residual))
}

/// ELBO from a precomputed expected squared residual over `n` samples.
pub fn elbo_from_residual(state: &ModelState, n: usize, residual: f64) -> Result<f64> {
    let (i, r) = (state.dim(), state.rank());
    let p = (i * r) as f64;
    let tau = &state.tau;

    let mut elbo = 0.5 * n as f64 * (tau.mean_ln() - LN_2PI) - 0.5 * tau.mean() * residual;

    let lambda = state.lambda_means();
    let delta = state.delta_means();
    let sum_ln_lambda: f64 = state.lambda.iter().map(GammaPosterior::mean_ln).sum();
    let sum_ln_delta: f64 = if state.delta_learned {
        state.delta.iter().map(GammaPosterior::mean_ln).sum()
    } else {
        delta.iter().map(|d| d.ln()).sum()
    };
    for f in &state.factors {
        let mut quad = 0.0;
        for (col, l) in lambda.iter().enumerate() {
            for (row, dl) in delta.iter().enumerate() {
                quad += l * dl * f.second_entry(row, col);
            }
        }
        // E ln p(W | λ, δ)
        elbo += -0.5 * p * LN_2PI + 0.5 * (i as f64 * sum_ln_lambda + r as f64 * sum_ln_delta) - 0.5 * quad;
        // Gaussian entropy
        elbo += 0.5 * p * (1.0 + LN_2PI) + 0.5 * f.log_det;
    }

    let prior = state.priors;
    for l in &state.lambda {
        elbo += l.expected_ln_density(&prior.lambda()) + l.entropy();
    }
    if state.delta_learned {
        for d in &state.delta {
            elbo += d.expected_ln_density(&prior.delta()) + d.entropy();
        }
    }
    elbo += tau.expected_ln_density(&prior.tau()) + tau.entropy();

    if !elbo.is_finite() {
        return Err(Error::numeric("non-finite evidence lower bound"));
    }
    Ok(elbo)
}

/// `L(q) = E_q[ln p(y, Θ)] + H(q)`.
pub fn compute_elbo(state: &ModelState, u: &LaggedInputMatrix, y: &[f64], exec: Exec) -> Result<f64> {
    check_data(state, u, y)?;
    let residual = expected_residual_from_moments(y, &all_moments(state, u, exec), exec)?;
    elbo_from_residual(state, y.len(), residual)
}

fn column_rms(m: &DMatrix<f64>, r: usize) -> f64 {
    (m.column(r).norm_squared() / m.nrows() as f64).sqrt()
}

/// Remove CPD columns whose largest RMS across factors is below
/// `threshold` times the largest column RMS. Returns the kept column
/// indices when anything was removed.
pub fn truncate_rank(state: &mut ModelState, threshold: f64) -> Option<Vec<usize>> {
    let r = state.rank();
    let scores: Vec<f64> = (0..r)
        .map(|c| state.factors.iter().map(|f| column_rms(&f.mean, c)).fold(0.0, f64::max))
        .collect();
    let best = (0..r).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
    let cutoff = threshold * scores[best];
    let keep: Vec<usize> = (0..r).filter(|&c| c == best || scores[c] >= cutoff).collect();
    if keep.len() == r {
        return None;
    }
    let i = state.dim();
    let idx: Vec<usize> = keep.iter().flat_map(|&c| c * i..(c + 1) * i).collect();
    for f in &mut state.factors {
        let mean = f.mean.select_columns(&keep);
        let cov = f.cov.select_rows(&idx).select_columns(&idx);
        // principal submatrix of a PD matrix; fall back to the old value if rounding bites
        let log_det = cov
            .clone()
            .cholesky()
            .map(|c| 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
            .unwrap_or(f.log_det);
        *f = FactorPosterior { mean, cov, log_det };
    }
    state.lambda = keep.iter().map(|&c| state.lambda[c]).collect();
    Some(keep)
}

/// Fit a model from scratch: initialize from `cfg.seed` and run [`identify_from`].
pub fn identify(
    u: &LaggedInputMatrix,
    y: &[f64],
    cfg: &FitConfig,
    priors: Priors,
) -> Result<(ModelState, FitTrace)> {
    cfg.validate()?;
    let state = init_state(cfg.order, u.memory(), cfg.init_rank, priors, cfg.seed)?;
    identify_from(state, u, y, cfg)
}

/// Run coordinate-ascent sweeps until the relative ELBO change drops
/// below tolerance or `max_iter` is reached, then refresh `q(tau)`.
pub fn identify_from(
    mut state: ModelState,
    u: &LaggedInputMatrix,
    y: &[f64],
    cfg: &FitConfig,
) -> Result<(ModelState, FitTrace)> {
    cfg.validate()?;
    check_data(&state, u, y)?;
    let exec = cfg.exec;
    let start = Instant::now();
    state.delta_learned = cfg.delta_enabled;

    let mut moments = all_moments(&state, u, exec);
    let mut trace = FitTrace::default();
    let mut prev: Option<f64> = None;

    for iter in 0..cfg.max_iter {
        let mut sweep = || -> Result<f64> {
            for d in 0..state.order() {
                state.factors[d] = update_factor_with(&state, u, y, d, &moments, exec)?;
                moments[d] = second_moment(u, &state.factors[d], exec);
            }
            if cfg.delta_enabled {
                state.delta = update_delta(&state);
            }
            state.lambda = update_lambda(&state);
            let residual = expected_residual_from_moments(y, &moments, exec)?;
            if cfg.tau_schedule == TauSchedule::EverySweep {
                state.tau = tau_from_residual(&state.priors, y.len(), residual);
            }
            elbo_from_residual(&state, y.len(), residual)
        };
        let elbo = sweep().map_err(|e| e.at_iteration(iter))?;
        trace.records.push(IterRecord {
            iter,
            elbo,
            rank: state.rank(),
            e_tau: state.tau.mean(),
            elapsed_s: start.elapsed().as_secs_f64(),
        });

        if let Some(keep) = truncate_rank(&mut state, cfg.truncation_threshold) {
            moments = moments.iter().map(|m| m.retain(&keep)).collect();
            prev = None;
            continue;
        }
        if let Some(p) = prev {
            if (elbo - p).abs() < cfg.elbo_rel_tol * p.abs() {
                trace.converged = true;
                break;
            }
        }
        prev = Some(elbo);
    }

    let residual = expected_residual_from_moments(y, &moments, exec)?;
    state.tau = tau_from_residual(&state.priors, y.len(), residual);
    trace.runtime_s = start.elapsed().as_secs_f64();
    Ok((state, trace))
}
