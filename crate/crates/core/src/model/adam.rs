/// Adam over a fixed list of flat parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, sizes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "parameter group count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient group count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (group, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[group];
            let v = &mut self.v[group];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_has_unit_scale() {
        // f(x) = (x - 3)^2 at x = 0: gradient -6, bias-corrected moments give
        // a step of lr * 6 / (6 + eps) toward the minimum.
        let mut adam = Adam::new(0.001, &[1]);
        let mut x = [0.0];
        let g = [2.0 * (x[0] - 3.0)];
        adam.step(&mut [&mut x], &[&g]);
        let expected = 0.001 * 6.0 / (6.0 + 1e-8);
        assert!((x[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn stays_finite_over_many_steps() {
        let mut adam = Adam::new(0.001, &[3]);
        let mut x = [5.0, -2.0, 0.5];
        for t in 0..1000 {
            let g: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * v + ((t + i) as f64).sin()).collect();
            adam.step(&mut [&mut x], &[&g]);
        }
        assert!(x.iter().all(|v| v.is_finite()));
        assert_eq!(adam.steps_taken(), 1000);
    }
}
