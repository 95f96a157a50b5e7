//! Named parameter sets and the Adam optimizer.

use std::collections::BTreeMap;

use super::Tensor;

/// Named trainable tensors with a deterministic iteration order.
#[derive(Default)]
pub struct Params {
    entries: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Tensor {
        assert!(
            self.entries.insert(name.to_string(), tensor.clone()).is_none(),
            "duplicate parameter '{name}'"
        );
        tensor
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&self) {
        for t in self.entries.values() {
            t.zero_grad();
        }
    }
}

/// First/second moment buffers plus the shared step counter.
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let m = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0f32; t.len()]))
            .collect();
        let v = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0f32; t.len()]))
            .collect();
        AdamState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. Parameters without gradients
    /// are left untouched.
    pub fn step(&mut self, params: &Params, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, tensor) in params.iter() {
            let Some(grad) = tensor.grad() else { continue };
            let m = self.m.get_mut(name).expect("state matches params");
            let v = self.v.get_mut(name).expect("state matches params");
            let mut data = tensor.to_vec();
            for i in 0..data.len() {
                let g = grad[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                data[i] = (data[i] as f64 - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
            tensor.set_data(&data);
        }
    }
}

pub fn global_grad_norm(params: &Params) -> f64 {
    let mut total = 0f64;
    for (_, t) in params.iter() {
        if let Some(grad) = t.grad() {
            for g in grad {
                total += g as f64 * g as f64;
            }
        }
    }
    total.sqrt()
}

/// Scale all gradients down so the global norm is at most `max_norm`.
pub fn clip_grad_norm(params: &Params, max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for (_, t) in params.iter() {
            if let Some(mut grad) = t.grad() {
                for g in &mut grad {
                    *g *= scale;
                }
                t.zero_grad();
                t.accumulate_grad(&grad);
            }
        }
    }
    norm
}
