use super::{Gradient, PolicyParams};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &PolicyParams) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .tensors()
            .iter()
            .map(|(_, _, d)| vec![0.0; d.len()])
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut PolicyParams,
    grad: &Gradient,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let shapes_match = {
        let t = params.tensors();
        t.len() == grad.tensors.len()
            && t.len() == state.m.len()
            && t.iter().zip(&grad.tensors).zip(&state.m).zip(&state.v).all(
                |((((_, _, p), g), m), v)| p.len() == g.len() && p.len() == m.len() && p.len() == v.len(),
            )
    };
    if !shapes_match {
        return Err(Error::Config("optimizer state does not match parameters".into()));
    }
    if let Some(bad) = grad.tensors.iter().flatten().find(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry {bad}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&grad.tensors)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            let mi = ADAM_BETA1 * f64::from(m[i]) + (1.0 - ADAM_BETA1) * g[i];
            let vi = ADAM_BETA2 * f64::from(v[i]) + (1.0 - ADAM_BETA2) * g[i] * g[i];
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            p[i] = (f64::from(p[i]) - update) as f32;
        }
    }
    if !params.is_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(())
}
