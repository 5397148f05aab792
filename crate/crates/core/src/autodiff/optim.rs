use super::{Grads, ParamSet, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub l2: f64,
    /// Global-norm clipping threshold; `f64::INFINITY` disables clipping.
    pub clip: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            l2: 0.0,
            clip: f64::INFINITY,
        }
    }
}

/// L2 norm over the gradients of all trainable parameters.
pub fn global_norm<S: Scalar>(params: &ParamSet<S>, grads: &Grads<S>) -> f64 {
    let mut acc = 0.0f64;
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.trainable {
            acc += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    acc.sqrt()
}

/// Clips gradients to `cfg.clip` by global norm, then applies
/// `p -= lr * (g + l2 * p)` to every trainable parameter. Returns the
/// pre-clipping norm. Parameters are untouched when any gradient is
/// non-finite.
pub fn sgd_step<S: Scalar>(params: &mut ParamSet<S>, grads: &Grads<S>, cfg: &SgdConfig) -> Result<f64> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.trainable && g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let norm = global_norm(params, grads);
    let scale = if norm > cfg.clip && norm > 0.0 { cfg.clip / norm } else { 1.0 };
    for (p, g) in params.iter_mut().zip(grads.iter()) {
        if !p.trainable {
            continue;
        }
        for (w, gv) in p.value.data_mut().iter_mut().zip(g) {
            let wv = w.as_f64();
            *w = S::from_f64(wv - cfg.lr * (scale * gv.as_f64() + cfg.l2 * wv));
        }
    }
    Ok(norm)
}

/// Momentum SGD with global-norm clipping of the raw gradient and a learning
/// rate that decays geometrically from `lr` to `lr_final` over `total_steps`.
#[derive(Debug, Clone)]
pub struct MomentumSgd<S> {
    velocity: Grads<S>,
    lr: f64,
    decay: f64,
    momentum: f64,
    clip: f64,
    l2: f64,
    steps: usize,
}

impl<S: Scalar> MomentumSgd<S> {
    pub fn new(params: &ParamSet<S>, lr: f64, lr_final: f64, total_steps: usize, momentum: f64, clip: f64, l2: f64) -> Result<Self> {
        if !(lr > 0.0 && lr_final > 0.0) {
            return Err(Error::Config(format!("learning rates must be positive, got {lr} and {lr_final}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        let decay = (lr_final / lr).powf(1.0 / (total_steps.max(2) - 1) as f64);
        Ok(Self {
            velocity: params.zero_grads(),
            lr,
            decay,
            momentum,
            clip,
            l2,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn current_lr(&self) -> f64 {
        self.lr * self.decay.powi(self.steps as i32)
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamSet<S>, mut grads: Grads<S>) -> Result<f64> {
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.trainable && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let norm = global_norm(params, &grads);
        if norm > self.clip {
            grads.scale(self.clip / norm);
        }
        self.velocity.scale(self.momentum);
        self.velocity.add_assign(&grads);
        let cfg = SgdConfig {
            lr: self.current_lr(),
            l2: self.l2,
            clip: f64::INFINITY,
        };
        sgd_step(params, &self.velocity, &cfg)?;
        self.steps += 1;
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(p: f64) -> (ParamSet<f64>, Grads<f64>, super::super::ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::scalar(p), true);
        let g = ps.zero_grads();
        (ps, g, id)
    }

    #[test]
    fn momentum_without_history_is_plain_sgd() {
        let (mut ps, mut g, id) = single(1.0);
        g.get_mut(id)[0] = 2.0;
        let mut opt = MomentumSgd::new(&ps, 0.1, 0.1, 10, 0.9, f64::INFINITY, 0.0).unwrap();
        opt.step(&mut ps, g.clone()).unwrap();
        assert!((ps.get(id).value.data()[0] - 0.8).abs() < 1e-12);
        opt.step(&mut ps, g).unwrap();
        // velocity 0.9 * 2 + 2
        assert!((ps.get(id).value.data()[0] - (0.8 - 0.1 * 3.8)).abs() < 1e-12);
    }

    #[test]
    fn learning_rate_reaches_final_value() {
        let (ps, _, _) = single(0.0);
        let mut opt = MomentumSgd::new(&ps, 0.1, 0.001, 5, 0.0, 1.0, 0.0).unwrap();
        opt.steps = 4;
        assert!((opt.current_lr() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_leave_params() {
        let (mut ps, g, id) = single(1.5);
        sgd_step(&mut ps, &g, &SgdConfig::default()).unwrap();
        assert_eq!(ps.get(id).value.data(), &[1.5]);
    }

    #[test]
    fn plain_step_arithmetic() {
        let (mut ps, mut g, id) = single(1.0);
        g.get_mut(id)[0] = 2.0;
        let cfg = SgdConfig {
            lr: 0.1,
            l2: 0.0,
            clip: f64::INFINITY,
        };
        sgd_step(&mut ps, &g, &cfg).unwrap();
        assert!((ps.get(id).value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clipping_scales_to_threshold() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::zeros(&[2]), true);
        let mut g = ps.zero_grads();
        g.get_mut(id).copy_from_slice(&[6.0, 8.0]);
        let cfg = SgdConfig {
            lr: 1.0,
            l2: 0.0,
            clip: 1.0,
        };
        let norm = sgd_step(&mut ps, &g, &cfg).unwrap();
        assert_eq!(norm, 10.0);
        let v = ps.get(id).value.data();
        assert!((v[0] + 0.6).abs() < 1e-15 && (v[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("ok", Tensor::zeros(&[1]), true);
        let bad = ps.add("layer3.w_in", Tensor::zeros(&[2]), true);
        let mut g = ps.zero_grads();
        g.get_mut(bad)[1] = f32::NAN;
        match sgd_step(&mut ps, &g, &SgdConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "layer3.w_in"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frozen_params_skip_update() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("bn.mean", Tensor::scalar(3.0), false);
        let mut g = ps.zero_grads();
        g.get_mut(id)[0] = 5.0;
        sgd_step(&mut ps, &g, &SgdConfig { lr: 1.0, l2: 0.5, clip: f64::INFINITY }).unwrap();
        assert_eq!(ps.get(id).value.data(), &[3.0]);
    }
}
