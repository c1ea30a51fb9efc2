use ndarray::{Array2, Zip};

use super::params::{Gradients, Mat, ParamStore};

/// AdamW with decoupled weight decay. Decay applies to matrices only
/// (tensors with more than one row), never to biases or norm gains.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, _, p)| Array2::zeros(p.dim())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let decay = if store.get(id).nrows() > 1 {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            match grads.get(id) {
                Some(g) => {
                    Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| b1 * x);
                    v.mapv_inplace(|x| b2 * x);
                }
            }
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + eps);
                *p -= lr * (update + decay * *p);
            });
        }
    }
}
