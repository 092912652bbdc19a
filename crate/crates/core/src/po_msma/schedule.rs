use super::PoMsmaError;

/// Strictly decreasing noise levels `σ_1 > … > σ_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_LEVELS: usize = 10;

    /// `levels` geometrically spaced values from `max` down to `min`.
    pub fn geometric(levels: usize, max: f64, min: f64) -> Result<Self, PoMsmaError> {
        if levels == 0 || !(min > 0.0) || !(max.is_finite()) {
            return Err(PoMsmaError::Schedule(format!("{levels} levels from {max} to {min}")));
        }
        if levels == 1 {
            return Self::from_sigmas(vec![max]);
        }
        let ratio = (min / max).powf(1.0 / (levels - 1) as f64);
        let sigmas = (0..levels).map(|i| max * ratio.powi(i as i32)).collect();
        Self::from_sigmas(sigmas)
    }

    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self, PoMsmaError> {
        if sigmas.is_empty() || sigmas.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(PoMsmaError::Schedule("noise levels must be positive and finite".into()));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(PoMsmaError::Schedule("noise levels must be strictly decreasing".into()));
        }
        Ok(NoiseSchedule { sigmas })
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigma(&self, level: usize) -> f64 {
        self.sigmas[level]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::geometric(Self::DEFAULT_LEVELS, 1.0, 0.01).expect("valid default schedule")
    }
}
