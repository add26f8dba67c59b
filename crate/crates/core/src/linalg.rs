//! Dense linear-algebra helpers over `nalgebra`.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};

/// A square system `M x = b` factored once and solved many times.
#[derive(Clone, Debug)]
pub struct Factored {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
}

impl Factored {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        let lu = matrix.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular("matrix is not invertible"));
        }
        Ok(Self { lu, n })
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        debug_assert_eq!(rhs.len(), self.n);
        let b = DVector::from_column_slice(rhs);
        let x = self.lu.solve(&b).ok_or(Error::Singular("LU solve failed"))?;
        Ok(x.iter().copied().collect())
    }
}

/// Solves `(I - scale * m) x = rhs`.
pub fn solve_resolvent(m: &DMatrix<f64>, scale: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = m.nrows();
    let a = DMatrix::<f64>::identity(n, n) - m * scale;
    Factored::new(a)?.solve(rhs)
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn l1_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
