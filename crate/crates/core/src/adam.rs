use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates for one variable (Kingma & Ba, bias-corrected).
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    dims: Vec<usize>,
    t: u64,
}

impl AdamState {
    pub fn new(dims: &[usize], config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        let n = dims.iter().product();
        Ok(Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            dims: dims.to_vec(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update to `variable` in place.
    pub fn step(&mut self, variable: &mut Tensor, gradient: &Tensor) -> Result<()> {
        if variable.dims() != self.dims.as_slice() {
            return Err(Error::shape("adam_step", &self.dims, variable.dims()));
        }
        if gradient.dims() != variable.dims() {
            return Err(Error::shape("adam_step", variable.dims(), gradient.dims()));
        }
        if let Some((index, &value)) = gradient
            .data()
            .iter()
            .enumerate()
            .find(|(_, g)| !g.is_finite())
        {
            return Err(Error::NonFiniteGradient { index, value });
        }

        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((x, &g), m), v) in variable
            .data_mut()
            .iter_mut()
            .zip(gradient.data())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = Tensor::vector(vec![0.3, -4.0, 1e-3]);
        let mut adam = AdamState::new(x.dims(), AdamConfig::with_learning_rate(0.01)).unwrap();
        adam.step(&mut x, &g).unwrap();
        assert_eq!(adam.steps(), 1);
        let expected = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (a, b) in x.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_variable_unchanged() {
        let mut x = Tensor::vector(vec![0.25, -1.0]);
        let original = x.clone();
        let mut adam = AdamState::new(x.dims(), AdamConfig::default()).unwrap();
        for _ in 0..50 {
            adam.step(&mut x, &Tensor::zeros(&[2])).unwrap();
        }
        assert_eq!(x, original);
        assert_eq!(adam.steps(), 50);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut x = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let mut adam = AdamState::new(x.dims(), AdamConfig::default()).unwrap();
        let err = adam
            .step(&mut x, &Tensor::vector(vec![0.0, f64::NAN, 1.0]))
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1, .. }));
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn rejects_nonpositive_learning_rate() {
        assert!(AdamState::new(&[1], AdamConfig::with_learning_rate(0.0)).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let mut x = Tensor::vector(vec![0.0, 0.0]);
        let mut adam = AdamState::new(&[3], AdamConfig::default()).unwrap();
        assert!(adam.step(&mut x, &Tensor::zeros(&[2])).is_err());
    }
}
