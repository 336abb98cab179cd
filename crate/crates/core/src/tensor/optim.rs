use std::collections::BTreeMap;

use super::{ParamStore, Scalar, Tensor};

/// Hyperparameters of stochastic gradient descent with heavy-ball momentum
/// and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with momentum buffers keyed by parameter name.
///
/// Update per parameter `p` with gradient `g`:
/// `d = g + wd·p`, `buf = μ·buf + d` (`buf = d` on first use), `p -= lr·buf`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    /// Applies one update to every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let direction: Vec<T> = grad
                .data()
                .iter()
                .zip(p.data())
                .map(|(&g, &w)| g + wd * w)
                .collect();
            let buf = match self.buffers.get_mut(name) {
                Some(buf) => {
                    for (b, d) in buf.data_mut().iter_mut().zip(&direction) {
                        *b = mu * *b + *d;
                    }
                    buf
                }
                None => {
                    let t = Tensor::new(grad.shape().to_vec(), direction).expect("shape");
                    self.buffers.entry(name.clone()).or_insert(t)
                }
            };
            for (w, &b) in p.data_mut().iter_mut().zip(buf.data()) {
                *w = *w - lr * b;
            }
        }
    }
}
