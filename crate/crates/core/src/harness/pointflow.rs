//! Flow matching onto a single point: a two-layer field learns to carry
//! Gaussian noise to a fixed `x1` in the plane.

use crate::cfm::cfm_loss;
use crate::flowode::{self, sample_single, GuidedField, Solver};
use crate::nn::{sinusoidal, Init, Mlp, Module, NamedParam};
use crate::numerics::{clip_global_norm, no_grad, AdamWConfig, AdamWState, CounterRng, LinearTailDecay, Result as TensorResult, Tensor};

use super::Result;

const FREQ_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PointFlowConfig {
    pub target: [f64; 2],
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub sigma_min: f64,
    pub seed: u64,
}

impl Default for PointFlowConfig {
    fn default() -> Self {
        Self {
            target: [1.5, -0.75],
            hidden: 128,
            steps: 2000,
            batch: 256,
            lr: 3e-3,
            sigma_min: 0.01,
            seed: 5,
        }
    }
}

pub struct PointField {
    pub mlp: Mlp<f32>,
}

impl PointField {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = CounterRng::new(seed);
        let mut init = Init::new(&mut rng);
        Self {
            mlp: Mlp::new(&mut init, 2 + FREQ_DIM, hidden, 2),
        }
    }

    /// `x` is `[B, 2]` with one flow time per row.
    pub fn forward(&self, t: &[f32], x: &Tensor<f32>) -> TensorResult<Tensor<f32>> {
        let features = Tensor::concat(&[x.clone(), sinusoidal(t, FREQ_DIM)?], 1)?;
        self.mlp.forward(&features)
    }
}

impl Module<f32> for PointField {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<f32>>) {
        self.mlp.visit(prefix, out);
    }
}

impl GuidedField<f32> for PointField {
    fn eval_cond(&self, t: f32, x: &Tensor<f32>) -> flowode::Result<Tensor<f32>> {
        Ok(self.forward(&vec![t; x.shape()[0]], x)?)
    }

    // Unconditional model: the null branch is the field itself.
    fn eval_pair(&self, t: f32, x: &Tensor<f32>) -> flowode::Result<(Tensor<f32>, Tensor<f32>)> {
        let v = self.eval_cond(t, x)?;
        Ok((v.clone(), v))
    }
}

pub struct PointFlowRun {
    pub field: PointField,
    pub first_loss: f64,
    pub last_loss: f64,
}

pub fn train(cfg: &PointFlowConfig) -> Result<PointFlowRun> {
    let field = PointField::new(cfg.hidden, cfg.seed);
    let params = field.params();
    let mut adam = AdamWState::new(&params, AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() })?;
    let schedule = LinearTailDecay {
        peak: cfg.lr,
        final_lr: cfg.lr * 0.01,
        total_steps: cfg.steps as u64,
        decay_steps: cfg.steps as u64 / 4,
    };
    let x1 = Tensor::<f32>::from_f64(&[cfg.batch, 2], &cfg.target.repeat(cfg.batch))?;
    let mut rng = CounterRng::new(cfg.seed).split(1);
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..cfg.steps {
        for p in &params {
            p.zero_grad();
        }
        let loss = cfm_loss(|t, x| field.forward(t, x), &x1, None, &mut rng, cfg.sigma_min)?;
        let value = loss.item() as f64;
        if step == 0 {
            first = value;
        }
        last = value;
        loss.backward()?;
        clip_global_norm(&params, 5.0)?;
        adam.set_lr(schedule.lr_at(step as u64));
        adam.step(&params)?;
    }
    Ok(PointFlowRun {
        field,
        first_loss: first,
        last_loss: last,
    })
}

/// Mean Euclidean distance from `n` sampled endpoints to the target.
pub fn mean_distance(field: &PointField, target: [f64; 2], n: usize, n_steps: usize, seed: u64) -> Result<f64> {
    let mut rng = CounterRng::new(seed);
    let x0 = Tensor::<f32>::from_f64(&[n, 2], &rng.normal_vec(2 * n))?;
    let x = no_grad(|| sample_single(field, &x0, n_steps, 0.0, Solver::Midpoint))?;
    let d = x.to_f64_vec();
    Ok(d.chunks(2).map(|p| ((p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2)).sqrt()).sum::<f64>() / n as f64)
}
