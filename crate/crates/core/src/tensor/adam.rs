use super::{Gradients, ParamStore, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update and zeroes `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients) -> Result<()> {
        if grads.len() != store.len() || self.first_moment.len() != store.len() {
            return Err(TensorError::Invalid(format!(
                "gradient set covers {} parameters, store has {}",
                grads.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let g = grads
                .get(id)
                .ok_or_else(|| TensorError::MissingGradient(store.name(id).to_string()))?;
            if g.len() != store.get(id).len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: store.get(id).shape().to_vec(),
                    right: vec![g.len()],
                });
            }
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in store.ids() {
            let g = grads.get(id).expect("checked above");
            let m = &mut self.first_moment[id.index()];
            let v = &mut self.second_moment[id.index()];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        grads.zero();
        Ok(())
    }
}
