use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<(), NumericsError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NumericsError::InvalidArgument {
                op: "adamw_step",
                msg: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            });
        }
        for ((p, g), m) in params.tensors().iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adamw_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec(), m.shape().to_vec()],
                });
            }
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] *= 1.0 - lr * weight_decay;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(v));
        p
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = one(vec![1.5, -2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let g = vec![Tensor::zeros(&[2])];
        for _ in 0..3 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.tensors()[0].data(), &[1.5, -2.0]);
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn zero_grad_decay_shrinks() {
        let mut p = one(vec![2.0]);
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::zeros(&[1])]).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 2.0 * (1.0 - 1e-3 * 0.1));
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut p = one(vec![0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[Tensor::vector(vec![0.37, -5.0])]).unwrap();
        let d = p.tensors()[0].data();
        assert!((d[0] + 1e-3).abs() < 1e-9);
        assert!((d[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = one(vec![0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert_eq!(opt.step_count(), 0);
    }
}
