//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// First/second moment buffers, one pair per parameter, in store order.
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: store.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect(),
        })
    }

    /// One AdamW update:
    ///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    ///   p <- p - lr wd p - lr m_hat / (sqrt(v_hat) + eps)
    /// Missing gradients (`None`) are treated as zero; weight decay still applies.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Invalid(format!(
                "adamw: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, grad) in grads.iter().enumerate() {
            let p = store.value_mut(idx);
            if let Some(g) = grad {
                if g.len() != p.data.len() {
                    return Err(Error::shape("adamw", &p.shape, &[g.len()]));
                }
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.data.len() {
                let gi = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.lr * self.weight_decay * p.data[i]
                    + self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.check_finite("adamw update")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(data: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = data.len();
        s.push("p", Tensor::from_vec(vec![n], data).unwrap());
        s
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut store = store_with(vec![1.0, -2.0, 0.5]);
        let mut opt = OptimizerState::new(&store, 1e-3, 0.0).unwrap();
        let before = store.value(0).data.clone();
        opt.step(&mut store, &[Some(vec![0.0, 0.0, 0.0])]).unwrap();
        opt.step(&mut store, &[None]).unwrap();
        assert_eq!(store.value(0).data, before);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = store_with(vec![1.0, 1.0]);
        let lr = 0.01;
        let mut opt = OptimizerState::new(&store, lr, 0.0).unwrap();
        opt.step(&mut store, &[Some(vec![3.0, -0.2])]).unwrap();
        // bias-corrected first step: m_hat = g, v_hat = g^2, update = -lr*sign(g)
        let p = &store.value(0).data;
        assert!((p[0] - (1.0 - lr)).abs() < 1e-6, "{}", p[0]);
        assert!((p[1] - (1.0 + lr)).abs() < 1e-6, "{}", p[1]);
    }

    #[test]
    fn decoupled_decay_alone_shrinks_params() {
        let mut store = store_with(vec![2.0]);
        let (lr, wd) = (0.1, 0.05);
        let mut opt = OptimizerState::new(&store, lr, wd).unwrap();
        opt.step(&mut store, &[Some(vec![0.0])]).unwrap();
        let expected = 2.0 * (1.0 - lr * wd);
        assert!((store.value(0).data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = store_with(vec![1.0, 2.0]);
        let mut opt = OptimizerState::new(&store, 1e-3, 0.0).unwrap();
        assert!(opt.step(&mut store, &[Some(vec![1.0])]).is_err());
    }

    #[test]
    fn rejects_non_positive_lr() {
        let store = store_with(vec![1.0]);
        assert!(OptimizerState::new(&store, 0.0, 0.0).is_err());
        assert!(OptimizerState::new(&store, -1.0, 0.0).is_err());
    }
}
