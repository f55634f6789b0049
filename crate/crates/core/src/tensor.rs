//! Dense tensor primitives and CPD contraction.
//!
//! Conventions: vectorization is first-index-fastest and the Kronecker
//! product takes its first operand as the slow (block) index. Together they
//! make `vec` of an `I x R` matrix its columns stacked in order, which is
//! exactly nalgebra's column-major storage.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest tensor `cpd_reconstruct` will materialize unless told otherwise.
pub const DEFAULT_MATERIALIZE_BOUND: usize = 1_000_000;

/// `D` factor matrices of identical shape `I x R`.
#[derive(Clone, Debug, PartialEq)]
pub struct CpdFactors {
    factors: Vec<DMatrix<f64>>,
}

impl CpdFactors {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = factors
            .first()
            .ok_or_else(|| Error::Domain("a CPD needs at least one factor".into()))?;
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::Domain(format!("empty factor shape {shape:?}")));
        }
        if let Some(bad) = factors.iter().find(|f| f.shape() != shape) {
            return Err(Error::Dimension(format!(
                "factor shape {:?} differs from {shape:?}",
                bad.shape()
            )));
        }
        Ok(CpdFactors { factors })
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn dim(&self) -> usize {
        self.factors[0].nrows()
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.factors
    }

    pub fn into_factors(self) -> Vec<DMatrix<f64>> {
        self.factors
    }
}

/// One-based multi-index into a tensor with extents `dims`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiIndex {
    pub indices: Vec<usize>,
    pub dims: Vec<usize>,
}

/// Linear (one-based) position of a multi-index under first-index-fastest vectorization.
pub fn vec_index(mi: &MultiIndex) -> Result<usize> {
    if mi.indices.len() != mi.dims.len() || mi.dims.is_empty() {
        return Err(Error::Domain(format!(
            "multi-index of length {} against {} extents",
            mi.indices.len(),
            mi.dims.len()
        )));
    }
    let mut linear = 1;
    let mut stride = 1;
    for (&i, &extent) in mi.indices.iter().zip(&mi.dims) {
        if i == 0 || i > extent {
            return Err(Error::Domain(format!("index {i} outside 1..={extent}")));
        }
        linear += (i - 1) * stride;
        stride *= extent;
    }
    Ok(linear)
}

/// Kronecker product with `a` as the slow operand.
pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Kronecker product of two vectors.
pub fn kron_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .flat_map(|&x| b.iter().map(move |&y| x * y))
        .collect()
}

/// Column-wise Kronecker product.
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Domain(format!(
            "khatri-rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let rows = a.nrows() * b.nrows();
    let mut out = DMatrix::zeros(rows, a.ncols());
    for j in 0..a.ncols() {
        let col = kron_vec(a.column(j).as_slice(), b.column(j).as_slice());
        out.column_mut(j).copy_from_slice(&col);
    }
    Ok(out)
}

pub fn hadamard(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "hadamard of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.component_mul(b))
}

/// Materialize `w = sum_r w_r^(1) (x) ... (x) w_r^(D)`. Test-oracle use only.
pub fn cpd_reconstruct(f: &CpdFactors, bound: usize) -> Result<DVector<f64>> {
    let size = (f.dim() as u128).checked_pow(f.order() as u32).unwrap_or(u128::MAX);
    if size > bound as u128 {
        return Err(Error::SizeBound { size, bound });
    }
    let mut w = vec![0.0; size as usize];
    for r in 0..f.rank() {
        let term = f
            .factors()
            .iter()
            .skip(1)
            .fold(f.factors()[0].column(r).as_slice().to_vec(), |acc, m| {
                kron_vec(&acc, m.column(r).as_slice())
            });
        w.iter_mut().zip(term).for_each(|(a, t)| *a += t);
    }
    Ok(DVector::from_vec(w))
}

/// `W^T u` for one factor matrix, as an `R`-vector.
pub(crate) fn project(w: &DMatrix<f64>, u: &[f64]) -> Vec<f64> {
    w.column_iter()
        .map(|c| c.iter().zip(u).map(|(a, b)| a * b).sum())
        .collect()
}

/// `(u (x) ... (x) u)^T w` in `O(DIR)` without forming `w`.
pub fn cpd_dot(f: &CpdFactors, u: &[f64]) -> Result<f64> {
    if u.len() != f.dim() {
        return Err(Error::Dimension(format!(
            "input of length {} against factor rows {}",
            u.len(),
            f.dim()
        )));
    }
    Ok(cpd_dot_unchecked(f.factors(), u))
}

/// Evaluated in double-double arithmetic: the rank-one terms can cancel to
/// far below their own magnitude.
pub(crate) fn cpd_dot_unchecked(factors: &[DMatrix<f64>], u: &[f64]) -> f64 {
    let mut total = Dd::ZERO;
    for r in 0..factors[0].ncols() {
        let term = factors.iter().fold(Dd::ONE, |acc, w| {
            let p = w.column(r).iter().zip(u).fold(Dd::ZERO, |s, (&a, &b)| s.add(Dd::prod(a, b)));
            acc.mul(p)
        });
        total = total.add(term);
    }
    total.hi + total.lo
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        Dd { hi: s, lo: (a - (s - bb)) + (b - bb) }
    }

    fn prod(a: f64, b: f64) -> Dd {
        let p = a * b;
        Dd { hi: p, lo: a.mul_add(b, -p) }
    }

    fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.hi, o.hi);
        let t = Dd::two_sum(s.lo, self.lo + o.lo);
        let u = Dd::two_sum(s.hi, t.hi);
        Dd::two_sum(u.hi, u.lo + t.lo)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = Dd::prod(self.hi, o.hi);
        Dd::two_sum(p.hi, p.lo + self.hi * o.lo + self.lo * o.hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mi(indices: &[usize], dims: &[usize]) -> MultiIndex {
        MultiIndex {
            indices: indices.to_vec(),
            dims: dims.to_vec(),
        }
    }

    #[test]
    fn cpd_dot_survives_cancellation() {
        let f = CpdFactors::new(vec![DMatrix::from_row_slice(1, 3, &[1e16, 1.0, -1e16])]).unwrap();
        assert_eq!(cpd_dot(&f, &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn vec_index_examples() {
        assert_eq!(vec_index(&mi(&[1, 1], &[2, 3])).unwrap(), 1);
        assert_eq!(vec_index(&mi(&[2, 3], &[2, 3])).unwrap(), 6);
        assert_eq!(vec_index(&mi(&[2, 1, 2], &[3, 2, 2])).unwrap(), 8);
    }

    #[test]
    fn vec_index_rejects_out_of_range() {
        assert!(matches!(vec_index(&mi(&[3, 1], &[2, 3])), Err(Error::Domain(_))));
        assert!(matches!(vec_index(&mi(&[0, 1], &[2, 3])), Err(Error::Domain(_))));
        assert!(vec_index(&mi(&[1], &[2, 3])).is_err());
    }

    #[test]
    fn vec_index_is_bijective() {
        let dims = [3usize, 4, 2, 5];
        let total: usize = dims.iter().product();
        let mut seen = vec![false; total];
        for a in 1..=3 {
            for b in 1..=4 {
                for c in 1..=2 {
                    for d in 1..=5 {
                        let i = vec_index(&mi(&[a, b, c, d], &dims)).unwrap();
                        assert!(!seen[i - 1]);
                        seen[i - 1] = true;
                    }
                }
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn kronecker_examples() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(kronecker(&a, &b).as_slice(), &[1.0, 0.0, 2.0, 0.0]);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(kronecker(&a, &one), a);
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(kronecker(&i2, &i2), DMatrix::identity(4, 4));
        assert_eq!(kron_vec(&[1.0, 2.0], &[1.0, 0.0]), vec![1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn khatri_rao_examples() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let b = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
        assert_eq!(khatri_rao(&a, &b).unwrap().as_slice(), &[3.0, 4.0, 6.0, 8.0]);

        let row = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, -2.0, 6.0, -4.0]);
        assert_eq!(khatri_rao(&row, &b).unwrap(), expected);

        let c = DMatrix::zeros(2, 3);
        assert!(matches!(khatri_rao(&a, &c), Err(Error::Domain(_))));
    }

    #[test]
    fn hadamard_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(
            hadamard(&a, &b).unwrap(),
            DMatrix::from_row_slice(2, 2, &[5.0, 12.0, 21.0, 32.0])
        );
        assert_eq!(hadamard(&a, &DMatrix::from_element(2, 2, 1.0)).unwrap(), a);
        assert_eq!(hadamard(&a, &DMatrix::zeros(2, 2)).unwrap(), DMatrix::zeros(2, 2));
        assert!(hadamard(&a, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn cpd_reconstruct_examples() {
        let f = CpdFactors::new(vec![
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        ])
        .unwrap();
        let w = cpd_reconstruct(&f, DEFAULT_MATERIALIZE_BOUND).unwrap();
        assert_eq!(w.as_slice(), &[0.0, 1.0, 0.0, 0.0]);

        // second component all zero
        let g = CpdFactors::new(vec![
            DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::from_column_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(cpd_reconstruct(&g, DEFAULT_MATERIALIZE_BOUND).unwrap(), w);
    }

    #[test]
    fn cpd_reconstruct_refuses_large() {
        let f = CpdFactors::new(vec![DMatrix::zeros(101, 1); 3]).unwrap();
        assert!(matches!(
            cpd_reconstruct(&f, DEFAULT_MATERIALIZE_BOUND),
            Err(Error::SizeBound { .. })
        ));
    }

    #[test]
    fn factors_must_share_shape() {
        assert!(CpdFactors::new(vec![]).is_err());
        assert!(CpdFactors::new(vec![DMatrix::zeros(2, 2), DMatrix::zeros(3, 2)]).is_err());
        assert!(CpdFactors::new(vec![DMatrix::zeros(0, 2)]).is_err());
    }

    #[test]
    fn cpd_dot_small_cases() {
        let zero = CpdFactors::new(vec![DMatrix::zeros(3, 2); 3]).unwrap();
        assert_eq!(cpd_dot(&zero, &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let lin = CpdFactors::new(vec![DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5])]).unwrap();
        assert_eq!(cpd_dot(&lin, &[2.0, 1.0, 4.0]).unwrap(), 2.0);
        assert!(cpd_dot(&lin, &[1.0]).is_err());
    }

    fn factors_strategy(i: usize, d: usize, r: usize) -> impl Strategy<Value = CpdFactors> {
        proptest::collection::vec(-2.0f64..2.0, i * d * r).prop_map(move |v| {
            CpdFactors::new(
                v.chunks(i * r)
                    .map(|c| DMatrix::from_column_slice(i, r, c))
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn khatri_rao_columns_are_kroneckers(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let a = DMatrix::from_column_slice(2, 3, &a);
            let b = DMatrix::from_column_slice(2, 3, &b);
            let kr = khatri_rao(&a, &b).unwrap();
            for j in 0..3 {
                let k = kronecker(&a.columns(j, 1).into_owned(), &b.columns(j, 1).into_owned());
                let col: Vec<f64> = kr.column(j).iter().copied().collect();
                prop_assert_eq!(col.as_slice(), k.as_slice());
            }
        }

        #[test]
        fn cpd_scaling_invariance(
            f in factors_strategy(3, 3, 2),
            u in proptest::collection::vec(-1.0f64..1.0, 3),
            c in prop_oneof![0.1f64..10.0, -10.0f64..-0.1],
            r in 0usize..2,
        ) {
            let base_w = cpd_reconstruct(&f, DEFAULT_MATERIALIZE_BOUND).unwrap();
            let base_dot = cpd_dot(&f, &u).unwrap();
            let mut g = f.clone();
            g.factors_mut()[0].column_mut(r).scale_mut(c);
            g.factors_mut()[2].column_mut(r).scale_mut(1.0 / c);
            let w = cpd_reconstruct(&g, DEFAULT_MATERIALIZE_BOUND).unwrap();
            prop_assert!((&w - &base_w).norm() <= 1e-12 * (1.0 + base_w.norm()));
            let dot = cpd_dot(&g, &u).unwrap();
            prop_assert!((dot - base_dot).abs() <= 1e-12 * (1.0 + base_dot.abs()));
        }
    }
}
