//! AdamW, global-norm gradient clipping and the learning-rate schedule.

use super::tensor::{invalid, shape_err, Real, Result, Tensor};

/// Default clipping threshold.
pub const DEFAULT_MAX_GRAD_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers for one parameter list.
#[derive(Debug, Clone)]
pub struct AdamWState<S: Real> {
    pub config: AdamWConfig,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    step: u64,
}

impl<S: Real> AdamWState<S> {
    pub fn new(params: &[Tensor<S>], config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) || config.weight_decay < 0.0 {
            return Err(invalid("adamw", format!("bad config {config:?}")));
        }
        Ok(Self {
            config,
            first: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One decoupled-weight-decay update using the gradients stored on
    /// `params`. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(shape_err("adamw", (params.len(), self.first.len())));
        }
        for (p, m) in params.iter().zip(&self.first) {
            if p.numel() != m.len() {
                return Err(shape_err("adamw", (p.shape(), m.len())));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = S::lit(1.0 - c.beta1.powi(t));
        let bc2 = S::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (lr, eps, wd) = (S::lit(c.lr), S::lit(c.eps), S::lit(c.weight_decay));
        for ((p, m), v) in params.iter().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad_ref();
            let Some(g) = grad.as_ref() else { continue };
            let g = g.clone();
            drop(grad);
            p.update_data(|data| {
                for i in 0..data.len() {
                    m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                    v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] = data[i] - lr * wd * data[i] - lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

/// L2 norm over every gradient present on `params`.
pub fn global_grad_norm<S: Real>(params: &[Tensor<S>]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.into_iter().map(|v| v.as_f64().powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Rescale all gradients so their global norm is at most `max_norm`.
/// Returns the applied scale (1 when no clipping happened).
pub fn clip_global_norm<S: Real>(params: &[Tensor<S>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(invalid("clip_global_norm", "max_norm must be positive"));
    }
    let norm = global_grad_norm(params);
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let s = S::lit(scale);
    for p in params {
        if let Some(g) = p.grad_mut().as_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(scale)
}

/// Constant learning rate followed by a linear decay over the final
/// `decay_steps` of `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTailDecay {
    pub peak: f64,
    pub final_lr: f64,
    pub total_steps: u64,
    pub decay_steps: u64,
}

impl LinearTailDecay {
    /// 1e-4 held, then decayed to 1e-6 over the last 100k of 1.5M steps.
    pub fn reference() -> Self {
        Self {
            peak: 1e-4,
            final_lr: 1e-6,
            total_steps: 1_500_000,
            decay_steps: 100_000,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let start = self.total_steps.saturating_sub(self.decay_steps);
        if step <= start || self.decay_steps == 0 {
            return if step >= self.total_steps && self.decay_steps == 0 {
                self.final_lr
            } else {
                self.peak
            };
        }
        let frac = ((step - start) as f64 / self.decay_steps as f64).min(1.0);
        self.peak + (self.final_lr - self.peak) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(v: f64, g: f64) -> Tensor<f64> {
        let p = Tensor::param(&[1], vec![v]).unwrap();
        *p.grad_mut() = Some(vec![g]);
        p
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let p = param_with_grad(2.5, 0.0);
        let mut st = AdamWState::new(std::slice::from_ref(&p), AdamWConfig::default()).unwrap();
        st.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.to_vec(), vec![2.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = param_with_grad(1.0, 1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut st = AdamWState::new(std::slice::from_ref(&p), cfg).unwrap();
        st.step(std::slice::from_ref(&p)).unwrap();
        // bias-corrected m̂ = v̂ = 1, update = lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.to_vec()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = param_with_grad(1.0, 1.0);
        let mut st = AdamWState::new(&[p], AdamWConfig::default()).unwrap();
        let q = Tensor::<f64>::param(&[2], vec![0.0, 0.0]).unwrap();
        assert!(st.step(&[q]).is_err());
    }

    #[test]
    fn clip_scales_down_large_norms() {
        let a = param_with_grad(0.0, 6.0);
        let b = param_with_grad(0.0, 8.0);
        let s = clip_global_norm(&[a.clone(), b.clone()], DEFAULT_MAX_GRAD_NORM).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
        assert!((global_grad_norm(&[a, b]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_norms() {
        let a = param_with_grad(0.0, 3.0);
        assert_eq!(clip_global_norm(std::slice::from_ref(&a), 5.0).unwrap(), 1.0);
        assert_eq!(a.grad().unwrap(), vec![3.0]);
        assert_eq!(clip_global_norm::<f64>(&[], 5.0).unwrap(), 1.0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LinearTailDecay::reference();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(1_400_000), 1e-4);
        assert!((s.lr_at(1_500_000) - 1e-6).abs() < 1e-18);
        assert!(s.lr_at(1_450_000) < 1e-4 && s.lr_at(1_450_000) > 1e-6);
    }
}
