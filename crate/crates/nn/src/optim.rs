use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// Adam with a per-parameter learning rate. A parameter whose rate is
/// `None` is never written to.
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: Vec<u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        Self {
            config,
            m: store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect(),
            v: store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect(),
            steps: vec![0; store.len()],
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr_for: impl Fn(ParamId, &str) -> Option<f64>,
    ) {
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.global_norm().to_f64().unwrap_or(f64::INFINITY);
                if norm > max && norm.is_finite() {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let Some(lr) = lr_for(id, store.name(id)) else { continue };
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let step = T::lit(lr * bc2.sqrt() / bc1);
            let eps = T::lit(self.config.eps * bc2.sqrt());
            let (tb1, tb2, tclip) = (T::lit(b1), T::lit(b2), T::lit(clip));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * tclip;
                m[j] = tb1 * m[j] + (T::one() - tb1) * gj;
                v[j] = tb2 * v[j] + (T::one() - tb2) * gj * gj;
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}
