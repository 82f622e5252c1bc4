use crate::params::{ParamSet, ParameterVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation over a flat parameter layout.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, num_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &ParameterVector) {
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let mut offset = 0;
        for idx in 0..params.len() {
            let value = params.get_mut(idx);
            for x in value.iter_mut() {
                let gi = grad.0[offset];
                let m = &mut self.m[offset];
                let v = &mut self.v[offset];
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                offset += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::new();
        p.add("w", array![[1.0, -1.0]]);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            2,
        );
        opt.step(&mut p, &ParameterVector(vec![3.0, -0.5]));
        let w = p.get(0);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.add("w", array![[5.0]]);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            1,
        );
        for _ in 0..2000 {
            let x = p.get(0)[[0, 0]];
            opt.step(&mut p, &ParameterVector(vec![2.0 * (x - 2.0)]));
        }
        assert!((p.get(0)[[0, 0]] - 2.0).abs() < 1e-2);
    }
}
