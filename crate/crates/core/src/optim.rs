//! Adam with optional per-entry update masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    /// One update of `param` keyed by `name`. Entries where `mask` is zero are
    /// left untouched and their moments are not advanced.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64, mask: Option<&Tensor>) {
        debug_assert_eq!(param.shape(), grad.shape());
        let n = param.numel();
        let st = self
            .state
            .entry(name.to_owned())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
        if st.m.len() != n {
            // parameter was resized by expansion
            st.m.resize(n, 0.0);
            st.v.resize(n, 0.0);
        }
        st.t += 1;
        let bc1 = 1.0 - self.beta1.powi(st.t as i32);
        let bc2 = 1.0 - self.beta2.powi(st.t as i32);
        let data = param.data_mut();
        for i in 0..n {
            if mask.is_some_and(|m| m.data()[i] == 0.0) {
                continue;
            }
            let gi = grad.data()[i];
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
