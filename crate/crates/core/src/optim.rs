//! Sign-momentum optimizer with per-tensor trust ratio (GCond) and an AdamW
//! reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcondHyper {
    /// Fused step coefficient `η·γ`.
    pub eta_gamma: f64,
    pub beta1: f64,
    pub eps: f64,
    pub lambda_clip: f64,
    pub weight_decay: f64,
}

impl Default for GcondHyper {
    fn default() -> Self {
        GcondHyper {
            eta_gamma: 1.5e-5,
            beta1: 0.9,
            eps: 1e-8,
            lambda_clip: 10.0,
            weight_decay: 0.0,
        }
    }
}

impl GcondHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta_gamma >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.eps >= 0.0
            && self.lambda_clip > 0.0
            && self.weight_decay >= 0.0
            && [self.eta_gamma, self.eps, self.lambda_clip, self.weight_decay]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config(format!("invalid GCond hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.weight_decay >= 0.0
            && [self.lr, self.eps, self.weight_decay].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config(format!("invalid AdamW hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// First-moment buffers, one per parameter tensor, and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct GcondState {
    pub m: Vec<Tensor>,
    pub t: u64,
}

/// First and second moments, two buffers per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

fn zeros_like(params: &[Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

impl GcondState {
    pub fn new(params: &[Tensor]) -> Self {
        GcondState {
            m: zeros_like(params),
            t: 0,
        }
    }
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: zeros_like(params),
            v: zeros_like(params),
            t: 0,
        }
    }
}

fn check_shapes(params: &[Tensor], grads: &[Tensor], bufs: &[&[Tensor]]) -> Result<()> {
    let bad = grads.len() != params.len()
        || bufs.iter().any(|b| b.len() != params.len())
        || params
            .iter()
            .enumerate()
            .any(|(i, p)| grads[i].shape() != p.shape() || bufs.iter().any(|b| b[i].shape() != p.shape()));
    if bad {
        return Err(Error::Dimension(
            "optimizer parameters, gradients and state disagree in count or shape".into(),
        ));
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One GCond step. Returns the trust ratio used for each tensor.
pub fn gcond_step(params: &mut [Tensor], grads: &[Tensor], state: &mut GcondState, h: &GcondHyper) -> Result<Vec<f64>> {
    check_shapes(params, grads, &[&state.m])?;
    let correction = 1.0 - h.beta1.powi(i32::try_from(state.t + 1).unwrap_or(i32::MAX));
    let mut lambdas = Vec::with_capacity(params.len());
    for ((p, g), m) in params.iter_mut().zip(grads).zip(state.m.iter_mut()) {
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
        }
        let m_hat: Vec<f64> = m.data().iter().map(|v| v / correction).collect();
        let p_norm = norm(p.data());
        // an all-zero tensor has no scale to borrow: leave it in place
        let lambda = if p_norm == 0.0 {
            0.0
        } else {
            (p_norm / (norm(&m_hat) + h.eps)).min(h.lambda_clip)
        };
        let decay = 1.0 - h.eta_gamma * h.weight_decay;
        for (pi, mh) in p.data_mut().iter_mut().zip(&m_hat) {
            *pi = (*pi - h.eta_gamma * lambda * sign(*mh)) * decay;
        }
        lambdas.push(lambda);
    }
    state.t += 1;
    Ok(lambdas)
}

/// One AdamW step with bias correction and decoupled decay.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    check_shapes(params, grads, &[&state.m, &state.v])?;
    let t = i32::try_from(state.t + 1).unwrap_or(i32::MAX);
    let (c1, c2) = (1.0 - h.beta1.powi(t), 1.0 - h.beta2.powi(t));
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            *pj *= 1.0 - h.lr * h.weight_decay;
            *pj -= h.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + h.eps);
        }
    }
    state.t += 1;
    Ok(())
}

/// Auxiliary optimizer scalars held next to the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub param_scalars: usize,
    pub aux_scalars: usize,
    pub aux_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptState {
    Gcond(GcondState),
    AdamW(AdamState),
}

impl OptState {
    pub fn buffers(&self) -> Vec<&[Tensor]> {
        match self {
            OptState::Gcond(s) => vec![&s.m],
            OptState::AdamW(s) => vec![&s.m, &s.v],
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            OptState::Gcond(s) => s.t,
            OptState::AdamW(s) => s.t,
        }
    }
}

pub fn state_memory_report(state: &OptState) -> MemoryReport {
    let bufs = state.buffers();
    let param_scalars = bufs[0].iter().map(Tensor::numel).sum();
    let aux_scalars: usize = bufs.iter().flat_map(|b| b.iter()).map(Tensor::numel).sum();
    MemoryReport {
        param_scalars,
        aux_scalars,
        aux_bytes: aux_scalars * std::mem::size_of::<f64>(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_inputs() -> (Vec<Tensor>, Vec<Tensor>, GcondHyper) {
        let p = vec![Tensor::from_vec(vec![1.0, 0.0])];
        let g = vec![Tensor::from_vec(vec![0.5, -0.5])];
        let h = GcondHyper {
            eps: 0.0,
            ..GcondHyper::default()
        };
        (p, g, h)
    }

    #[test]
    #[allow(clippy::approx_constant)] // the rounded hand value is the oracle
    fn hand_computed_step() {
        let (mut p, g, h) = hand_inputs();
        let mut s = GcondState::new(&p);
        let lam = gcond_step(&mut p, &g, &mut s, &h).unwrap();
        let want = 1.0 / 0.5f64.hypot(0.5);
        assert!((lam[0] - want).abs() < 1e-12);
        assert!((lam[0] - 1.41421).abs() < 1e-5);
        let d = 1.5e-5 * want;
        assert!((p[0].data()[0] - (1.0 - d)).abs() < 1e-15);
        assert!((p[0].data()[1] - d).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn clip_caps_trust_ratio() {
        let (mut p, g, h) = hand_inputs();
        let h = GcondHyper { lambda_clip: 0.5, ..h };
        let mut s = GcondState::new(&p);
        assert_eq!(gcond_step(&mut p, &g, &mut s, &h).unwrap(), vec![0.5]);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::from_vec(vec![0.3, -2.0])];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[2])];
        let mut s = GcondState::new(&p);
        gcond_step(&mut p, &g, &mut s, &GcondHyper::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_tensor_gets_zero_ratio() {
        let mut p = vec![Tensor::zeros(&[3])];
        let g = vec![Tensor::from_vec(vec![1.0, 2.0, -1.0])];
        let mut s = GcondState::new(&p);
        let lam = gcond_step(&mut p, &g, &mut s, &GcondHyper::default()).unwrap();
        assert_eq!(lam, vec![0.0]);
        assert_eq!(p[0], Tensor::zeros(&[3]));
    }

    #[test]
    fn adamw_scalar_step() {
        let mut p = vec![Tensor::from_vec(vec![1.0])];
        let g = vec![Tensor::from_vec(vec![1.0])];
        let mut s = AdamState::new(&p);
        let h = AdamHyper {
            lr: 0.1,
            ..AdamHyper::default()
        };
        adamw_step(&mut p, &g, &mut s, &h).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn adamw_zero_gradient_only_decays() {
        let mut p = vec![Tensor::from_vec(vec![2.0, -1.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p);
        let h = AdamHyper {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamHyper::default()
        };
        adamw_step(&mut p, &g, &mut s, &h).unwrap();
        assert_eq!(p[0].data(), &[2.0 * 0.95, -0.95]);
    }

    #[test]
    fn memory_ratio_is_one_half() {
        let params = vec![Tensor::zeros(&[10, 100])];
        let g = state_memory_report(&OptState::Gcond(GcondState::new(&params)));
        let a = state_memory_report(&OptState::AdamW(AdamState::new(&params)));
        assert_eq!((g.aux_scalars, a.aux_scalars), (1000, 2000));
        assert_eq!(g.aux_bytes * 2, a.aux_bytes);
        let empty = state_memory_report(&OptState::Gcond(GcondState::new(&[])));
        assert_eq!(empty.aux_scalars, 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let g = vec![Tensor::zeros(&[3])];
        let mut s = GcondState::new(&p);
        assert!(gcond_step(&mut p, &g, &mut s, &GcondHyper::default()).is_err());
    }
}
