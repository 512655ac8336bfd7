use std::collections::BTreeMap;

use crate::detector::Params;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum, L2 weight decay on weights (not biases),
/// and global gradient-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub velocity: Params<f32>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32, clip_norm: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            clip_norm,
            velocity: Params::new(),
        }
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f32) -> Result<f32> {
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt() as f32;
        if !norm.is_finite() {
            return Err(Error::Numerical("gradient norm is not finite".into()));
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if !self.velocity.contains(name) {
                self.velocity.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let v = self.velocity.get_mut(name)?;
            let decay = if name.ends_with(".w") { self.weight_decay } else { 0.0 };
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gv * scale + decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= lr * *vv;
            }
        }
        Ok(norm)
    }
}
