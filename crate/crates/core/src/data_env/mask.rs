use super::EnvError;
use serde::{Deserialize, Serialize};

/// Observed/unobserved partition of the feature indices `0..d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservationMask {
    bits: Vec<bool>,
    count: usize,
}

impl ObservationMask {
    pub fn empty(dim: usize) -> Self {
        ObservationMask { bits: vec![false; dim], count: 0 }
    }

    pub fn full(dim: usize) -> Self {
        ObservationMask { bits: vec![true; dim], count: dim }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        let count = bits.iter().filter(|&&b| b).count();
        ObservationMask { bits, count }
    }

    pub fn from_indices(dim: usize, indices: &[usize]) -> Result<Self, EnvError> {
        let mut m = Self::empty(dim);
        for &i in indices {
            m.insert(i)?;
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    /// `|o|`
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_full(&self) -> bool {
        self.count == self.bits.len()
    }

    #[inline]
    pub fn is_observed(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Observed indices, ascending.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Unobserved indices, ascending.
    pub fn unobserved(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }

    /// Add `i` to the observed set. Observing twice is an error.
    pub fn insert(&mut self, i: usize) -> Result<(), EnvError> {
        if i >= self.bits.len() {
            return Err(EnvError::FeatureOutOfRange { feature: i, dim: self.bits.len() });
        }
        if self.bits[i] {
            return Err(EnvError::AlreadyObserved(i));
        }
        self.bits[i] = true;
        self.count += 1;
        Ok(())
    }

    /// Binary indicator vector `I_m`.
    pub fn indicator(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// `x ⊙ I_m`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.bits).map(|(&v, &b)| if b { v } else { 0.0 }).collect()
    }

    /// Mask with `i` added (copy).
    pub fn with(&self, i: usize) -> Result<Self, EnvError> {
        let mut m = self.clone();
        m.insert(i)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn observed_and_unobserved_partition(bits in proptest::collection::vec(any::<bool>(), 1..24)) {
            let m = ObservationMask::from_bits(bits.clone());
            let o = m.observed();
            let u = m.unobserved();
            prop_assert_eq!(o.len() + u.len(), bits.len());
            prop_assert!(o.iter().all(|i| !u.contains(i)));
            prop_assert_eq!(m.indicator().iter().sum::<f64>() as usize, o.len());
            prop_assert_eq!(m.count(), o.len());
        }
    }

    #[test]
    fn double_insert_is_an_error() {
        let mut m = ObservationMask::empty(3);
        m.insert(1).unwrap();
        assert_eq!(m.insert(1), Err(EnvError::AlreadyObserved(1)));
        assert!(matches!(m.insert(5), Err(EnvError::FeatureOutOfRange { .. })));
    }
}
