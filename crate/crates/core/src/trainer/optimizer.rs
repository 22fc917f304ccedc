use crate::error::{Error, Result};
use crate::fusion::FusionParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers shaped like the parameters, plus the step
/// counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: FusionParams,
    pub second_moment: FusionParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &FusionParams) -> Self {
        OptimizerState { first_moment: params.zeros_like(), second_moment: params.zeros_like(), step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub grad_clip: Option<f64>,
}

/// One bias-corrected adaptive-moment update over the tensors selected by
/// `trainable`, after optional global-norm clipping of those gradients.
/// Tensors not selected, and their moments, are left untouched.
pub fn optimizer_step(
    params: &mut FusionParams,
    grads: &FusionParams,
    state: &mut OptimizerState,
    cfg: OptimizerConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut sq = 0.0;
    for (name, g) in &grad_tensors {
        if !trainable(name) {
            continue;
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in {name} at entry {i}")));
        }
        sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    let clip_scale = match cfg.grad_clip {
        Some(c) if sq.sqrt() > c => c / sq.sqrt(),
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let lr = cfg.learning_rate;

    let mut first = state.first_moment.tensors_mut();
    let mut second = state.second_moment.tensors_mut();
    for (((name, p), (_, g)), ((_, m), (_, v))) in params
        .tensors_mut()
        .into_iter()
        .zip(&grad_tensors)
        .zip(first.iter_mut().zip(second.iter_mut()))
    {
        if !trainable(&name) {
            continue;
        }
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i] * clip_scale;
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionShape, FusionVariant};

    fn setup() -> (FusionParams, FusionParams, OptimizerState) {
        let p = FusionParams::init(FusionShape::with_defaults(FusionVariant::Moe, 2), 0).unwrap();
        let g = p.zeros_like();
        let s = OptimizerState::new(&p);
        (p, g, s)
    }

    const CFG: OptimizerConfig = OptimizerConfig { learning_rate: 0.1, grad_clip: None };

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, g, mut s) = setup();
        let before = p.clone();
        optimizer_step(&mut p, &g, &mut s, CFG, |_| true).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_minus_lr() {
        let (mut p, mut g, mut s) = setup();
        g.gate_b.data_mut()[0] = 1.0;
        optimizer_step(&mut p, &g, &mut s, CFG, |_| true).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = -0.1 / (1 + 1e-8)
        let delta = p.gate_b.data()[0];
        assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((delta + 0.1).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let (mut p, mut g, mut s) = setup();
        g.gate_w.data_mut().copy_from_slice(&[2.0, -3.0, 0.5, 0.0]);
        for _ in 0..50 {
            optimizer_step(&mut p, &g, &mut s, CFG, |_| true).unwrap();
        }
        let w = p.gate_w.data();
        assert!(w[0] < 0.0 && w[1] > 0.0 && w[2] < 0.0 && w[3] == 0.0);
    }

    #[test]
    fn frozen_tensors_untouched_and_nan_rejected() {
        let (mut p, mut g, mut s) = setup();
        g.data_fill(1.0);
        let before = p.clone();
        optimizer_step(&mut p, &g, &mut s, CFG, |n| n == "gate_b").unwrap();
        assert_eq!(p.query_adapter, before.query_adapter);
        assert_ne!(p.gate_b, before.gate_b);
        g.gate_w.data_mut()[1] = f64::NAN;
        let err = optimizer_step(&mut p, &g, &mut s, CFG, |_| true).unwrap_err();
        assert!(err.to_string().contains("gate_w"));
    }

    #[test]
    fn clipping_scales_global_norm() {
        let (mut p, mut g, mut s) = setup();
        g.gate_b.data_mut()[0] = 100.0;
        let mut p2 = p.clone();
        let mut s2 = s.clone();
        optimizer_step(&mut p, &g, &mut s, OptimizerConfig { grad_clip: Some(1.0), ..CFG }, |_| true).unwrap();
        assert!((s.first_moment.gate_b.data()[0] - 0.1).abs() < 1e-12);
        optimizer_step(&mut p2, &g, &mut s2, CFG, |_| true).unwrap();
        assert!((s2.first_moment.gate_b.data()[0] - 10.0).abs() < 1e-12);
    }

    trait Fill {
        fn data_fill(&mut self, v: f64);
    }

    impl Fill for FusionParams {
        fn data_fill(&mut self, v: f64) {
            self.for_each_mut(|_, t| t.data_mut().fill(v));
        }
    }
}
