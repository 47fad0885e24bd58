use crate::autodiff::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Every parameter must carry a gradient.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64, cfg: AdamConfig) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::State(format!(
            "Adam state tracks {} parameters, set has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        match p.tensor.grad() {
            None => return Err(Error::State(format!("parameter {:?} has no gradient", p.name))),
            Some(g) if g.len() != m.len() => {
                return Err(Error::State(format!("moment shape mismatch for {:?}", p.name)))
            }
            Some(_) => {}
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default();
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
