use crate::model::ModelParams;
use crate::tensor::Array;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` pairs with `params.tensors[i]`; `None` means
    /// the tensor got no gradient this step and is treated as zero.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Array>]) {
        assert_eq!(grads.len(), params.tensors.len(), "one gradient slot per tensor");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = init_params(&ModelConfig::default(), 0).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.01, 0.9, 0.999, 1e-8);
        let grads: Vec<Option<Array>> = p
            .tensors
            .iter()
            .map(|t| Some(Array::filled(t.value.shape(), 0.5)))
            .collect();
        adam.step(&mut p, &grads);
        for (a, b) in p.tensors.iter().zip(&before.tensors) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((y - x - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = init_params(&ModelConfig::default(), 0).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.0, 0.9, 0.999, 1e-8);
        let grads: Vec<Option<Array>> = p
            .tensors
            .iter()
            .map(|t| Some(Array::filled(t.value.shape(), 1.0)))
            .collect();
        adam.step(&mut p, &grads);
        assert_eq!(p, before);
    }
}
