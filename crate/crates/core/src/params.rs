//! Flat parameter vectors.
//!
//! Every model in the simulator exposes its parameters as one contiguous
//! `f64` vector. Perturbations, local steps, aggregation and the server
//! direction are all expressed as arithmetic on [`ParamVector`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Returns a numeric error naming `what` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(j) => Err(Error::numeric(format!(
                "{what}: non-finite entry {} at index {j}",
                self.0[j]
            ))),
        }
    }

    pub fn ensure_dim(&self, dim: usize, what: &str) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::invalid(format!(
                "{what}: expected dimension {dim}, got {}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        debug_assert_eq!(self.dim(), x.dim());
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.0 {
            *v *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| alpha * v).collect())
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.dim(), other.dim());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.dim(), other.dim());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Arithmetic mean of equally sized vectors, summed in the given order.
    pub fn mean<'a, I>(vectors: I) -> Result<ParamVector>
    where
        I: IntoIterator<Item = &'a ParamVector>,
    {
        let mut iter = vectors.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::invalid("mean of an empty set of vectors"))?;
        let mut acc = first.clone();
        let mut count = 1usize;
        for v in iter {
            v.ensure_dim(acc.dim(), "mean")?;
            acc.axpy(1.0, v);
            count += 1;
        }
        acc.scale(1.0 / count as f64);
        Ok(acc)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_preserves_dim() {
        let a = ParamVector::from_vec(vec![1.0, 2.0, 3.0]);
        let b = ParamVector::from_vec(vec![-1.0, 0.5, 4.0]);
        assert_eq!(a.add(&b).dim(), 3);
        assert_eq!(a.sub(&b).dim(), 3);
        assert_eq!(a.scaled(2.0).dim(), 3);
        let mut c = a.clone();
        c.axpy(-2.0, &b);
        assert_eq!(c.as_slice(), &[3.0, 1.0, -5.0]);
    }

    #[test]
    fn norm_of_three_four() {
        let v = ParamVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(v.norm(), 5.0);
        assert_eq!(v.norm_sq(), 25.0);
    }

    #[test]
    fn mean_of_opposites_is_zero() {
        let a = ParamVector::from_vec(vec![1.5, -2.0]);
        let b = a.scaled(-1.0);
        assert_eq!(ParamVector::mean([&a, &b]).unwrap(), ParamVector::zeros(2));
        assert!(ParamVector::mean(std::iter::empty()).is_err());
    }

    #[test]
    fn ensure_finite_reports_index() {
        let v = ParamVector::from_vec(vec![0.0, f64::NAN]);
        let err = v.ensure_finite("probe").unwrap_err();
        assert!(err.to_string().contains("index 1"));
    }
}
