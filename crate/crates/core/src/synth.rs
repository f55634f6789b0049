//! Synthetic Volterra systems with known ground truth.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::build_lagged_matrix;
use crate::tensor::{cpd_dot, cpd_reconstruct, CpdFactors};

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticSystem {
    /// Explicit kernels: `kernels[d]` holds the `M^d` coefficients of the
    /// order-`d` kernel (first lag index fastest); `kernels[0]` is the constant.
    Kernels {
        memory: usize,
        kernels: Vec<Vec<f64>>,
        noise_std: f64,
    },
    /// Coefficients in CPD form over windows `(1, u(n), ..., u(n−M+1))`.
    Cpd { factors: CpdFactors, noise_std: f64 },
}

impl SyntheticSystem {
    pub fn noise_std(&self) -> f64 {
        match self {
            SyntheticSystem::Kernels { noise_std, .. } | SyntheticSystem::Cpd { noise_std, .. } => *noise_std,
        }
    }

    pub fn memory(&self) -> usize {
        match self {
            SyntheticSystem::Kernels { memory, .. } => *memory,
            SyntheticSystem::Cpd { factors, .. } => factors.dim() - 1,
        }
    }

    pub fn with_noise_std(self, sigma: f64) -> Self {
        match self {
            SyntheticSystem::Kernels { memory, kernels, .. } => SyntheticSystem::Kernels {
                memory,
                kernels,
                noise_std: sigma,
            },
            SyntheticSystem::Cpd { factors, .. } => SyntheticSystem::Cpd {
                factors,
                noise_std: sigma,
            },
        }
    }
}

fn lagged(u: &[f64], n: usize, lag: usize) -> f64 {
    if lag > n {
        0.0
    } else {
        u[n - lag]
    }
}

/// Noise-free output. Kernels are evaluated by direct nested summation.
pub fn noiseless_output(sys: &SyntheticSystem, u: &[f64], bound: usize) -> Result<Vec<f64>> {
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("input signal contains non-finite values".into()));
    }
    match sys {
        SyntheticSystem::Cpd { factors, .. } => {
            let windows = build_lagged_matrix(u, factors.dim() - 1)?;
            (0..u.len()).map(|n| cpd_dot(factors, windows.window(n))).collect()
        }
        SyntheticSystem::Kernels { memory, kernels, .. } => {
            let m = *memory;
            let mut total: u128 = 0;
            for (d, k) in kernels.iter().enumerate() {
                let expected = (m as u128).pow(d as u32);
                if k.len() as u128 != expected {
                    return Err(Error::Dimension(format!(
                        "order-{d} kernel has {} entries, expected {expected}",
                        k.len()
                    )));
                }
                total += expected;
            }
            if total > bound as u128 {
                return Err(Error::SizeBound { size: total, bound });
            }
            Ok((0..u.len())
                .map(|n| {
                    kernels
                        .iter()
                        .enumerate()
                        .map(|(d, kernel)| {
                            kernel
                                .iter()
                                .enumerate()
                                .map(|(flat, &w)| {
                                    let mut rest = flat;
                                    let mut prod = w;
                                    for _ in 0..d {
                                        prod *= lagged(u, n, rest % m);
                                        rest /= m;
                                    }
                                    prod
                                })
                                .sum::<f64>()
                        })
                        .sum()
                })
                .collect())
        }
    }
}

/// `y(n) = Σ_d Σ_m W_d(m) Π u(n − m_j) + e(n)` with `e ~ N(0, σ²)` drawn from `seed`.
pub fn synthesize(sys: &SyntheticSystem, u: &[f64], seed: u64) -> Result<Dataset> {
    let clean = noiseless_output(sys, u, crate::tensor::DEFAULT_MATERIALIZE_BOUND)?;
    let sigma = sys.noise_std();
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("noise std must be non-negative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = clean
        .into_iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::new(u.to_vec(), y)
}

/// Expand CPD coefficients into explicit per-order kernels. Entries of
/// `u_n ⊗ ... ⊗ u_n` with `d` non-constant indices feed the order-`d`
/// kernel at the lags of those indices, taken in mode order.
pub fn cpd_to_kernels(factors: &CpdFactors, bound: usize) -> Result<Vec<Vec<f64>>> {
    let w = cpd_reconstruct(factors, bound)?;
    let (i, order) = (factors.dim(), factors.order());
    let m = i - 1;
    let mut kernels: Vec<Vec<f64>> = (0..=order).map(|d| vec![0.0; m.pow(d as u32)]).collect();
    for (flat, &coef) in w.iter().enumerate() {
        let mut rest = flat;
        let mut lags = Vec::with_capacity(order);
        for _ in 0..order {
            let idx = rest % i;
            rest /= i;
            if idx > 0 {
                lags.push(idx - 1);
            }
        }
        let pos = lags.iter().fold(0, |acc, &l| acc * m + l);
        kernels[lags.len()][pos] += coef;
    }
    Ok(kernels)
}

/// Symmetric CPD system whose factors all equal one `I x R` matrix with
/// entries `N(0, 1) · decay^lag` (constant row unscaled).
pub fn fading_memory_factors(order: usize, memory: usize, rank: usize, decay: f64, seed: u64) -> Result<CpdFactors> {
    if order == 0 || memory == 0 || rank == 0 {
        return Err(Error::Domain("order, memory and rank must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(memory + 1, rank, |row, _| {
        let g: f64 = rng.sample(StandardNormal);
        if row == 0 {
            g
        } else {
            g * decay.powi(row as i32 - 1)
        }
    });
    CpdFactors::new(vec![a; order])
}

/// Standard-normal input signal.
pub fn gaussian_input(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_order_impulse() {
        let sys = SyntheticSystem::Kernels {
            memory: 3,
            kernels: vec![vec![0.0], vec![2.5, 0.0, 0.0]],
            noise_std: 0.0,
        };
        let u = [1.0, -2.0, 0.5, 4.0];
        let ds = synthesize(&sys, &u, 0).unwrap();
        assert_eq!(ds.y, vec![2.5, -5.0, 1.25, 10.0]);
    }

    #[test]
    fn cpd_matches_nested_summation() {
        for (order, rank, seed) in [(2, 1, 1), (2, 2, 2), (3, 2, 3)] {
            let f = fading_memory_factors(order, 4, rank, 0.8, seed).unwrap();
            let mut g = f.clone().into_factors();
            // make the modes differ so kernel ordering is exercised
            g[0] *= 1.3;
            g[0][(2, 0)] -= 0.4;
            let f = CpdFactors::new(g).unwrap();
            let u = gaussian_input(25, seed + 10);
            let via_cpd = noiseless_output(
                &SyntheticSystem::Cpd {
                    factors: f.clone(),
                    noise_std: 0.0,
                },
                &u,
                100_000,
            )
            .unwrap();
            let kernels = SyntheticSystem::Kernels {
                memory: 4,
                kernels: cpd_to_kernels(&f, 100_000).unwrap(),
                noise_std: 0.0,
            };
            let nested = noiseless_output(&kernels, &u, 100_000).unwrap();
            for (a, b) in via_cpd.iter().zip(&nested) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn noise_is_reproducible() {
        let f = fading_memory_factors(2, 3, 1, 0.5, 0).unwrap();
        let sys = SyntheticSystem::Cpd { factors: f, noise_std: 0.1 };
        let u = gaussian_input(50, 1);
        assert_eq!(synthesize(&sys, &u, 7).unwrap(), synthesize(&sys, &u, 7).unwrap());
        assert_ne!(synthesize(&sys, &u, 7).unwrap(), synthesize(&sys, &u, 8).unwrap());
    }

    #[test]
    fn size_guard_and_shape_checks() {
        let sys = SyntheticSystem::Kernels {
            memory: 100,
            kernels: vec![vec![0.0], vec![0.0; 100], vec![0.0; 10_000], vec![0.0; 1_000_000]],
            noise_std: 0.0,
        };
        assert!(matches!(
            noiseless_output(&sys, &[1.0], 1_000_000),
            Err(Error::SizeBound { .. })
        ));
        let bad = SyntheticSystem::Kernels {
            memory: 2,
            kernels: vec![vec![0.0], vec![0.0; 3]],
            noise_std: 0.0,
        };
        assert!(noiseless_output(&bad, &[1.0], 100).is_err());
        let neg = bad.with_noise_std(-1.0);
        assert!(synthesize(&neg, &[1.0], 0).is_err());
    }
}
