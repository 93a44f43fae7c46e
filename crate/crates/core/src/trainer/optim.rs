use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderState, Gradients};

/// Decoupled-weight-decay Adam over named parameters. Parameters without a
/// gradient in a step are left untouched, as are names rejected by the
/// trainable filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub step: u64,
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        state: &mut EncoderState<f32>,
        grads: &Gradients<f32>,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        let named = grads.named();
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        state.walk_mut(&mut |name: &str, params: &mut [f32]| {
            if !trainable(name) {
                return;
            }
            let Some(g) = named.get(name) else { return };
            let m = moments.entry(name.to_string()).or_insert_with(|| Moments {
                step: 0,
                first: vec![0.0; params.len()],
                second: vec![0.0; params.len()],
            });
            m.step += 1;
            let c1 = 1.0 - b1.powi(m.step as i32);
            let c2 = 1.0 - b2.powi(m.step as i32);
            let decay = (1.0 - lr * wd) as f32;
            for i in 0..params.len() {
                let gi = g[i] as f64;
                let first = b1 * m.first[i] as f64 + (1.0 - b1) * gi;
                let second = b2 * m.second[i] as f64 + (1.0 - b2) * gi * gi;
                m.first[i] = first as f32;
                m.second[i] = second as f32;
                let update = (first / c1) / ((second / c2).sqrt() + eps);
                params[i] = params[i] * decay - (lr * update) as f32;
            }
        });
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &Gradients<f32>) -> f64 {
    let mut sum = 0.0f64;
    grads.walk(&mut |_: &str, _: &[usize], x: &[f32]| {
        sum += x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    });
    sum.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / norm) as f32;
        grads.walk_mut(&mut |_: &str, x: &mut [f32]| x.iter_mut().for_each(|v| *v *= scale));
    }
    norm
}
