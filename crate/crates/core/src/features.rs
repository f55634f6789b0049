//! Volterra input windows, per-mode design matrices and the posterior
//! moments the variational updates are built from.
//!
//! Mode indices are zero-based throughout the Rust API.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::FactorPosterior;
use crate::tensor::project;

/// `I x N` matrix whose column `n` is `(1, u(n), u(n-1), ..., u(n-M+1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaggedInputMatrix {
    data: DMatrix<f64>,
    memory: usize,
}

impl LaggedInputMatrix {
    /// Wrap an existing matrix, checking the constant first row.
    pub fn from_matrix(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() < 2 || data.ncols() == 0 {
            return Err(Error::Domain(format!(
                "lagged matrix needs at least 2 rows and 1 column, got {:?}",
                data.shape()
            )));
        }
        if data.row(0).iter().any(|&v| v != 1.0) {
            return Err(Error::Domain("first row of a lagged matrix must be all ones".into()));
        }
        let memory = data.nrows() - 1;
        Ok(LaggedInputMatrix { data, memory })
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    /// `I = M + 1`.
    pub fn dim(&self) -> usize {
        self.memory + 1
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Window for sample `n` (zero-based).
    pub fn window(&self, n: usize) -> &[f64] {
        let i = self.dim();
        &self.data.as_slice()[n * i..(n + 1) * i]
    }

    /// Keep samples `from..to`.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.len() {
            return Err(Error::Domain(format!(
                "sample range {from}..{to} invalid for {} samples",
                self.len()
            )));
        }
        Ok(LaggedInputMatrix {
            data: self.data.columns(from, to - from).into_owned(),
            memory: self.memory,
        })
    }
}

/// Build the lagged input matrix; inputs before the first sample are taken as zero.
pub fn build_lagged_matrix(signal: &[f64], memory: usize) -> Result<LaggedInputMatrix> {
    build_lagged_matrix_padded(signal, memory, 0.0)
}

/// As [`build_lagged_matrix`], with inputs before the first sample equal to `pad`.
pub fn build_lagged_matrix_padded(signal: &[f64], memory: usize, pad: f64) -> Result<LaggedInputMatrix> {
    if signal.is_empty() {
        return Err(Error::Domain("empty input signal".into()));
    }
    if memory == 0 {
        return Err(Error::Domain("memory length must be at least 1".into()));
    }
    let dim = memory + 1;
    let mut data = DMatrix::from_element(dim, signal.len(), pad);
    for (n, mut col) in data.column_iter_mut().enumerate() {
        col[0] = 1.0;
        for lag in 0..memory.min(n + 1) {
            col[1 + lag] = signal[n - lag];
        }
    }
    Ok(LaggedInputMatrix { data, memory })
}

fn check_mode(order: usize, d: usize) -> Result<()> {
    if d >= order {
        return Err(Error::Dimension(format!("mode {d} out of range for order {order}")));
    }
    Ok(())
}

/// `h_n = prod_{k != d} W^(k)T u_n` (elementwise); all ones when `D = 1`.
pub(crate) fn other_modes_product(means: &[DMatrix<f64>], d: usize, u: &[f64]) -> Vec<f64> {
    let mut h = vec![1.0; means[0].ncols()];
    for (k, w) in means.iter().enumerate() {
        if k != d {
            h.iter_mut().zip(project(w, u)).for_each(|(a, b)| *a *= b);
        }
    }
    h
}

/// Mode-`d` design column `h ⊗ u` for a single window.
pub fn design_column(means: &[DMatrix<f64>], d: usize, u: &[f64]) -> DVector<f64> {
    let h = other_modes_product(means, d, u);
    let i = u.len();
    let mut g = DVector::zeros(h.len() * i);
    for (r, hr) in h.iter().enumerate() {
        for (k, uk) in u.iter().enumerate() {
            g[r * i + k] = hr * uk;
        }
    }
    g
}

/// `(I R) x N` design matrix for mode `d`: the model output is `vec(W^(d))^T G_n`.
pub fn design_matrix(u: &LaggedInputMatrix, means: &[DMatrix<f64>], d: usize) -> Result<DMatrix<f64>> {
    check_mode(means.len(), d)?;
    if means[0].nrows() != u.dim() {
        return Err(Error::Dimension(format!(
            "factor rows {} against window length {}",
            means[0].nrows(),
            u.dim()
        )));
    }
    let p = u.dim() * means[0].ncols();
    let mut g = DMatrix::zeros(p, u.len());
    for n in 0..u.len() {
        g.column_mut(n).copy_from(&design_column(means, d, u.window(n)));
    }
    Ok(g)
}

/// Per-sample first and second moments of `W^(k)T u_n` under `q(W^(k))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondMoments {
    rank: usize,
    len: usize,
    // N x R, sample-major
    mean: Vec<f64>,
    // N x R x R, sample-major
    second: Vec<f64>,
}

impl SecondMoments {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `E[W^T u_n]`.
    pub fn mean(&self, n: usize) -> &[f64] {
        &self.mean[n * self.rank..(n + 1) * self.rank]
    }

    /// `E[(W^T u_n)(W^T u_n)^T]`, row-major `R x R`.
    pub fn second(&self, n: usize) -> &[f64] {
        let rr = self.rank * self.rank;
        &self.second[n * rr..(n + 1) * rr]
    }

    pub fn second_matrix(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rank, self.rank, self.second(n))
    }

    /// Drop rank components not listed in `keep`.
    pub(crate) fn retain(&self, keep: &[usize]) -> SecondMoments {
        let r = keep.len();
        let mut mean = Vec::with_capacity(self.len * r);
        let mut second = Vec::with_capacity(self.len * r * r);
        for n in 0..self.len {
            let m = self.mean(n);
            let s = self.second(n);
            mean.extend(keep.iter().map(|&a| m[a]));
            for &a in keep {
                second.extend(keep.iter().map(|&b| s[a * self.rank + b]));
            }
        }
        SecondMoments {
            rank: r,
            len: self.len,
            mean,
            second,
        }
    }
}

/// Moments of `W^(k)T u_n` for every sample:
/// `M_n(r, r') = (m_r^T u_n)(m_r'^T u_n) + u_n^T Σ[r, r'] u_n`.
pub fn second_moment(u: &LaggedInputMatrix, post: &FactorPosterior, exec: Exec) -> SecondMoments {
    let i = u.dim();
    let r = post.mean.ncols();
    let n = u.len();
    let umat = u.matrix();

    // cov_part[r'][(n, r)] = u_n^T Σ[r, r'] u_n
    let cov_part: Vec<Vec<f64>> = exec.map(r, |rp| {
        let q = post.cov.columns(rp * i, i) * umat;
        let mut out = vec![0.0; n * r];
        for s in 0..n {
            let un = u.window(s);
            let qcol = &q.as_slice()[s * r * i..(s + 1) * r * i];
            for a in 0..r {
                out[s * r + a] = qcol[a * i..(a + 1) * i]
                    .iter()
                    .zip(un)
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        out
    });

    let proj = post.mean.transpose() * umat; // R x N
    let mean: Vec<f64> = proj.as_slice().to_vec();
    let mut second = vec![0.0; n * r * r];
    for s in 0..n {
        let m = &mean[s * r..(s + 1) * r];
        let block = &mut second[s * r * r..(s + 1) * r * r];
        for a in 0..r {
            for b in a..r {
                let c = 0.5 * (cov_part[b][s * r + a] + cov_part[a][s * r + b]);
                let v = m[a] * m[b] + c;
                block[a * r + b] = v;
                block[b * r + a] = v;
            }
        }
    }
    SecondMoments {
        rank: r,
        len: n,
        mean,
        second,
    }
}

/// `E[h_n h_n^T] = ⊛_{k≠d} M_n^(k)` as a row-major `R x R` buffer.
fn hadamard_of_seconds(others: &[&SecondMoments], rank: usize, n: usize) -> Vec<f64> {
    let mut h = vec![1.0; rank * rank];
    for m in others {
        h.iter_mut().zip(m.second(n)).for_each(|(a, b)| *a *= b);
    }
    h
}

/// `E[G^(d) G^(d)T] = Σ_n (⊛_{k≠d} M_n^(k)) ⊗ u_n u_n^T`.
///
/// `others` holds the moments of every mode except `d`; pass an empty slice
/// for a first-order model.
pub fn expected_gram(
    u: &LaggedInputMatrix,
    others: &[&SecondMoments],
    rank: usize,
    exec: Exec,
) -> Result<DMatrix<f64>> {
    if let Some(m) = others.iter().find(|m| m.rank() != rank || m.len() != u.len()) {
        return Err(Error::Dimension(format!(
            "moments of rank {} over {} samples against rank {rank} over {} samples",
            m.rank(),
            m.len(),
            u.len()
        )));
    }
    let i = u.dim();
    let n = u.len();
    let umat = u.matrix();
    // H[(r, r')] over samples, one vector per unordered pair
    let hs: Vec<Vec<f64>> = (0..n).map(|s| hadamard_of_seconds(others, rank, s)).collect();
    let pairs: Vec<(usize, usize)> = (0..rank).flat_map(|a| (a..rank).map(move |b| (a, b))).collect();

    let blocks = exec.map(pairs.len(), |k| {
        let (a, b) = pairs[k];
        let mut scaled = umat.clone();
        for (s, mut col) in scaled.column_iter_mut().enumerate() {
            col *= hs[s][a * rank + b];
        }
        scaled * umat.transpose()
    });

    let p = i * rank;
    let mut gram = DMatrix::zeros(p, p);
    for (&(a, b), block) in pairs.iter().zip(blocks) {
        gram.view_mut((a * i, b * i), (i, i)).copy_from(&block);
        if a != b {
            gram.view_mut((b * i, a * i), (i, i)).copy_from(&block.transpose());
        }
    }
    Ok(gram)
}

/// `E‖y − ŷ‖²` under the mean-field posterior, given moments of every mode.
///
/// Evaluated as `Σ_n (y_n − ŷ_n)² + Var[ŷ_n]` with
/// `E[ŷ_n²] = 1^T (⊛_d M_n^(d)) 1` and `ŷ_n = 1^T ⊛_d E[W^(d)T u_n]`.
pub fn expected_residual_from_moments(y: &[f64], moments: &[SecondMoments], exec: Exec) -> Result<f64> {
    let first = moments
        .first()
        .ok_or_else(|| Error::Domain("no factor moments".into()))?;
    if moments.iter().any(|m| m.len() != y.len() || m.rank() != first.rank()) {
        return Err(Error::Dimension("moments do not match the targets".into()));
    }
    let rank = first.rank();
    let refs: Vec<&SecondMoments> = moments.iter().collect();
    Ok(exec.sum_chunks(y.len(), |range| {
        range
            .map(|n| {
                let mut h = vec![1.0; rank];
                for m in &refs {
                    h.iter_mut().zip(m.mean(n)).for_each(|(a, b)| *a *= b);
                }
                let yhat: f64 = h.iter().sum();
                let second: f64 = hadamard_of_seconds(&refs, rank, n).iter().sum();
                let var = second - yhat * yhat;
                (y[n] - yhat).powi(2) + var
            })
            .sum::<f64>()
    }))
}

/// `E‖y − ŷ‖²` computed directly from the factor posteriors.
pub fn expected_residual(
    u: &LaggedInputMatrix,
    y: &[f64],
    factors: &[FactorPosterior],
    exec: Exec,
) -> Result<f64> {
    if y.len() != u.len() {
        return Err(Error::Dimension(format!(
            "{} targets against {} windows",
            y.len(),
            u.len()
        )));
    }
    let moments: Vec<SecondMoments> = factors.iter().map(|f| second_moment(u, f, exec)).collect();
    expected_residual_from_moments(y, &moments, exec)
}
