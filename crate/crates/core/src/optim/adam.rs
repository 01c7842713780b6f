#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    ShapeMismatch { group: String },
    NonFiniteGradient { group: String, index: usize },
    Diverged { iteration: usize, total: f64, initial: f64 },
}

impl core::fmt::Display for OptimError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            OptimError::ShapeMismatch { group } => {
                write!(f, "parameter group '{group}' has mismatched shapes")
            }
            OptimError::NonFiniteGradient { group, index } => {
                write!(f, "non-finite gradient in group '{group}' at index {index}")
            }
            OptimError::Diverged { iteration, total, initial } => write!(
                f,
                "optimization diverged at iteration {iteration}: loss {total} exceeds 10x initial {initial}"
            ),
        }
    }
}

impl core::error::Error for OptimError {}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Bias-corrected Adam over named parameter groups. Each group keeps its own
/// step count and moment buffers; updates are fully deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, states: BTreeMap::new() }
    }

    /// Standard settings (0.9, 0.999, 1e-8).
    pub fn standard() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }

    /// Drops the moments of every group whose name starts with `prefix`.
    /// Used after density control changes the parameter count.
    pub fn reset_group_prefix(&mut self, prefix: &str) {
        self.states.retain(|k, _| !k.starts_with(prefix));
    }

    /// One update step for a named group. Errors on shape mismatch or a
    /// non-finite gradient, naming the group.
    pub fn step(&mut self, group: &str, lr: f64, params: &mut [f64], grads: &[f64]) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::ShapeMismatch { group: String::from(group) });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { group: String::from(group), index });
        }
        let state = self.states.entry(String::from(group)).or_insert_with(|| Moments {
            m: alloc::vec![0.0; params.len()],
            v: alloc::vec![0.0; params.len()],
            step: 0,
        });
        if state.m.len() != params.len() {
            return Err(OptimError::ShapeMismatch { group: String::from(group) });
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::standard();
        let mut p = [1.0, -2.0, 3.5];
        let before = p;
        adam.step("x", 0.1, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut adam = Adam::standard();
        let mut p = [0.0];
        adam.step("x", 0.05, &mut p, &[1.0]).unwrap();
        // Bias correction makes m_hat = v_hat = 1 at step 1.
        let expected = -0.05 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-12, "{}", p[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut adam = Adam::standard();
        let mut x = [0.0f64];
        for _ in 0..100 {
            let g = [2.0 * (x[0] - 3.0)];
            adam.step("x", 0.1, &mut x, &g).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 0.05, "x = {}", x[0]);
    }

    #[test]
    fn non_finite_gradient_names_the_group() {
        let mut adam = Adam::standard();
        let mut p = [0.0, 0.0];
        let err = adam.step("field.mu", 0.1, &mut p, &[0.0, f64::NAN]).unwrap_err();
        assert_eq!(
            err,
            OptimError::NonFiniteGradient { group: String::from("field.mu"), index: 1 }
        );
    }

    #[test]
    fn reset_prefix_restarts_moments() {
        let mut adam = Adam::standard();
        let mut p = [0.0];
        adam.step("field.mu", 0.1, &mut p, &[1.0]).unwrap();
        adam.reset_group_prefix("field.");
        let mut q = [0.0];
        adam.step("field.mu", 0.1, &mut q, &[1.0]).unwrap();
        assert_eq!(p, q);
    }
}
