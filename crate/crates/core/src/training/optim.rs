use crate::tensor::{ParamGrads, ParameterStore};

/// Plain stochastic gradient descent with global-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub learning_rate: f32,
    pub clip_norm: f32,
}

impl Sgd {
    pub fn new(learning_rate: f32, clip_norm: f32) -> Self {
        Self { learning_rate, clip_norm }
    }

    /// Rescales `grads` so their joint L2 norm is at most `clip_norm`, then
    /// applies one descent step. Returns the norm before clipping.
    pub fn step(&self, store: &mut ParameterStore, grads: &mut ParamGrads) -> f64 {
        let norm = grads.l2_norm();
        if norm > self.clip_norm as f64 {
            grads.scale((self.clip_norm as f64 / norm) as f32);
        }
        for (id, g) in grads.iter() {
            let p = store.get_mut(id).data_mut();
            for (w, &d) in p.iter_mut().zip(g) {
                *w -= self.learning_rate * d;
            }
        }
        norm
    }
}
