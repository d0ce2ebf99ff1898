use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam with bias correction. Parameters without a gradient this step are
/// treated as having a zero gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.is_empty() {
            for (_, p) in store.iter() {
                self.m.push(Tensor::zeros(p.tensor.shape()));
                self.v.push(Tensor::zeros(p.tensor.shape()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = p.grad() else { continue };
            let g = g.data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.tensor.data_mut();
            for k in 0..w.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
