//! Two-feature binary task with a known posterior, for checking MI estimates.

use super::{DynamicsError, PosteriorModel};
use crate::data_env::{Dataset, Instance, ObservationMask};
use crate::rng::Rng;
use rand::Rng as _;

/// `y ~ Bernoulli(1/2)`; feature 0 is `y` flipped with probability `flip`,
/// feature 1 is an independent fair coin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinarySymmetricChannel {
    pub flip: f64,
}

impl BinarySymmetricChannel {
    pub fn new(flip: f64) -> Self {
        assert!((0.0..=1.0).contains(&flip));
        BinarySymmetricChannel { flip }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Dataset {
        let rows = (0..n)
            .map(|_| {
                let y = rng.gen_bool(0.5) as usize;
                let x0 = if rng.gen_bool(self.flip) { 1 - y } else { y };
                let x1 = rng.gen_bool(0.5) as usize;
                Instance { x: vec![x0 as f64, x1 as f64], y }
            })
            .collect();
        Dataset::new(2, rows).expect("rows have length 2")
    }

    /// Closed-form `I(x_0; y) = ln 2 - H_b(flip)`.
    pub fn mutual_information(&self) -> f64 {
        let p = self.flip;
        let hb = crate::math::entropy(&[p, 1.0 - p]);
        std::f64::consts::LN_2 - hb
    }
}

impl PosteriorModel for BinarySymmetricChannel {
    fn num_classes(&self) -> usize {
        2
    }

    fn dim(&self) -> usize {
        2
    }

    fn log_posterior(&self, values: &[f64], mask: &ObservationMask) -> Result<Vec<f64>, DynamicsError> {
        if values.len() != 2 || mask.dim() != 2 {
            return Err(DynamicsError::Shape("channel task has two features".into()));
        }
        let mut p = [0.5, 0.5];
        if mask.is_observed(0) {
            let x = values[0] >= 0.5;
            for (y, q) in p.iter_mut().enumerate() {
                *q = if (y == 1) == x { 1.0 - self.flip } else { self.flip };
            }
        }
        Ok(p.iter().map(|q| q.ln()).collect())
    }
}
