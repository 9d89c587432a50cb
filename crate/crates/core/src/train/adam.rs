use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Params, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter group, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<F = f32> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    frozen: Vec<bool>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &Params<F>) -> Self {
        let zeros = || {
            params
                .groups()
                .iter()
                .map(|g| Tensor::zeros(g.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            frozen: vec![false; params.len()],
        }
    }

    /// Excludes a group from updates.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.index()] = true;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.index()]
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
///
/// `weight_decay` is classic L2 (added to the gradient), not decoupled decay.
pub fn adam_step<F: Scalar>(
    params: &mut Params<F>,
    state: &mut AdamState<F>,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} groups, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (g, m) in params.groups().iter().zip(&state.m) {
        if g.value.shape() != m.shape() || g.grad.shape() != m.shape() {
            return Err(Error::dim("adam_step", g.value.shape(), m.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let i = id.index();
        if state.frozen[i] {
            continue;
        }
        let grad: Vec<f64> = params.grad(id).data().iter().map(|g| g.as_f64()).collect();
        let value = params.value_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for k in 0..value.len() {
            let x = value[k].as_f64();
            let g = grad[k] + weight_decay * x;
            let mk = b1 * m[k].as_f64() + (1.0 - b1) * g;
            let vk = b2 * v[k].as_f64() + (1.0 - b2) * g * g;
            m[k] = F::of(mk);
            v[k] = F::of(vk);
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
            value[k] = F::of(x - update);
        }
    }
    Ok(())
}
