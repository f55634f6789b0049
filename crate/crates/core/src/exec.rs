//! Execution policy for the data-parallel inner loops.
//!
//! Work is split into fixed-size chunks whose boundaries do not depend on
//! the thread count. With `fixed_order` set, chunk partials are summed
//! left to right, so the parallel and sequential paths return bitwise
//! identical results.

use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Number of samples per reduction chunk.
pub const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exec {
    /// Use rayon when the crate is built with the `parallel` feature.
    pub parallel: bool,
    /// Reduce chunk partials in index order.
    pub fixed_order: bool,
}

impl Default for Exec {
    fn default() -> Self {
        Exec {
            parallel: cfg!(feature = "parallel"),
            fixed_order: true,
        }
    }
}

impl Exec {
    pub const SEQUENTIAL: Exec = Exec {
        parallel: false,
        fixed_order: true,
    };

    pub fn parallel() -> Self {
        Exec {
            parallel: true,
            fixed_order: true,
        }
    }

    #[cfg(feature = "parallel")]
    fn use_rayon(&self) -> bool {
        self.parallel
    }

    /// `(0..n).map(f).collect()`, possibly in parallel. Output order is index order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.use_rayon() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Sum of `f(range)` over consecutive chunks of `0..n`.
    pub fn sum_chunks<F>(&self, n: usize, f: F) -> f64
    where
        F: Fn(Range<usize>) -> f64 + Sync + Send,
    {
        let chunks = n.div_ceil(CHUNK);
        let range = |c: usize| c * CHUNK..((c + 1) * CHUNK).min(n);
        #[cfg(feature = "parallel")]
        if self.use_rayon() && !self.fixed_order {
            use rayon::prelude::*;
            return (0..chunks).into_par_iter().map(|c| f(range(c))).sum();
        }
        self.map(chunks, |c| f(range(c))).into_iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = Exec::parallel().map(1000, |i| i * 2);
        assert_eq!(v, (0..1000).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn fixed_order_sum_is_bitwise_reproducible() {
        let f = |r: Range<usize>| r.map(|i| (i as f64 * 0.37).sin() * 1e-3).sum::<f64>();
        let a = Exec::parallel().sum_chunks(10_000, f);
        let b = Exec::SEQUENTIAL.sum_chunks(10_000, f);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn empty_sum_is_zero() {
        assert_eq!(Exec::default().sum_chunks(0, |_| 1.0), 0.0);
    }
}
