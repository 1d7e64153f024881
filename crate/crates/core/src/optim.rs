use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rate at `epoch` (0-based): `lr0 · decay^epoch`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Adam with L2 weight decay added to the gradient (so its effect scales with the step size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `visit` must hand out the parameter tensors in the
    /// same order as `grads`.
    pub fn step(&mut self, lr: f64, grads: &[Vec<f32>], visit: impl FnOnce(&mut dyn FnMut(&mut [f32]))) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        let wd = self.weight_decay as f32;
        let mut idx = 0;
        let mut mismatch = None;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        visit(&mut |param: &mut [f32]| {
            let Some(g) = grads.get(idx) else {
                mismatch = Some(idx);
                return;
            };
            if g.len() != param.len() {
                mismatch = Some(idx);
                idx += 1;
                return;
            }
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            for (((p, &g), m), v) in param.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + wd * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                if step != 0.0 {
                    *p -= step * *m / (v.sqrt() + eps);
                }
            }
            idx += 1;
        });
        if let Some(i) = mismatch.or((idx != grads.len()).then_some(idx)) {
            return Err(Error::Shape(format!("gradient/parameter mismatch at tensor {i}")));
        }
        Ok(())
    }
}
