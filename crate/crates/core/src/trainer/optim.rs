use crate::error::{contract, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// First/second moment buffers, one per parameter in [`ParamSet`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            names: params.names().map(str::to_owned).collect(),
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn tracks(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }
}

/// Bias-corrected Adam update. `grads` follows the parameter order; every
/// parameter must have a gradient.
pub fn adam_step(params: &mut ParamSet, grads: &[Option<Tensor>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.names.len() != params.len() {
        return Err(contract(format!(
            "{} gradients / {} moment buffers for {} parameters",
            grads.len(),
            state.names.len(),
            params.len()
        )));
    }
    for ((name, _), g) in params.iter().zip(grads) {
        match g {
            None => return Err(contract(format!("missing gradient for {name}"))),
            Some(g) if g.numel() != params.get(name).map_or(0, Tensor::numel) => {
                return Err(contract(format!("gradient shape mismatch for {name}")));
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let g = g.as_ref().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `base_lr · min(step^−0.5, step · warmup^−1.5)`: linear warmup, then
/// inverse square-root decay; the peak is at `step = warmup`.
pub fn lr_schedule(step: u64, base_lr: f64, warmup: u64) -> Result<f64> {
    if step < 1 {
        return Err(contract("learning-rate step starts at 1"));
    }
    if warmup < 1 {
        return Err(contract("warmup must be at least 1"));
    }
    let s = step as f64;
    Ok(base_lr * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = one_param(1.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Some(Tensor::scalar(0.0))], &mut st, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_magnitude() {
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + ε)
        let mut p = one_param(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Some(Tensor::scalar(1.0))], &mut st, 0.1).unwrap();
        let delta = -p.get("w").unwrap().item();
        assert!((delta - 0.1 / (1.0 + ADAM_EPS)).abs() < 1e-12);
        assert!((delta - 0.1).abs() < 1e-6);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = one_param(0.0);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[None], &mut st, 0.1).is_err());
    }

    #[test]
    fn schedule_shape() {
        let (base, warm) = (2.0, 100);
        let knee = lr_schedule(warm, base, warm).unwrap();
        assert!((knee - base / (warm as f64).sqrt()).abs() < 1e-15);
        let half = lr_schedule(warm / 2, base, warm).unwrap();
        assert!((half - knee / 2.0).abs() < 1e-15);
        let mut prev = knee;
        for s in warm + 1..warm * 5 {
            let lr = lr_schedule(s, base, warm).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(lr_schedule(0, base, warm).is_err());
    }
}
