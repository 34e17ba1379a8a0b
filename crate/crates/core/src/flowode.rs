//! Fixed-step ODE integration of learned velocity fields, guidance and the
//! piecewise-constant fusion of two fields.

use thiserror::Error;

use crate::cfm::{cfg_combine, CfmError};
use crate::numerics::{CounterRng, Real, Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Cfm(#[from] CfmError),
    #[error("invalid fusion schedule: {0}")]
    Schedule(String),
    #[error("step {step} outside a {n}-step schedule")]
    StepOutOfRange { step: usize, n: usize },
    #[error("normalization statistics of the two decoders differ")]
    NormMismatch,
    #[error("solver produced non-finite state at step {step}")]
    Unstable { step: usize },
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    Euler,
    #[default]
    Midpoint,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Euler => "euler",
            Solver::Midpoint => "midpoint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euler" => Some(Solver::Euler),
            "midpoint" => Some(Solver::Midpoint),
            _ => None,
        }
    }
}

/// `α` on the first `n1` of `n` uniform steps, `0` afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionSchedule {
    pub alpha: f64,
    pub n1: usize,
    pub n: usize,
}

impl Default for FusionSchedule {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            n1: 20,
            n: 30,
        }
    }
}

impl FusionSchedule {
    pub fn new(alpha: f64, n1: usize, n: usize) -> Result<Self> {
        let s = Self { alpha, n1, n };
        s.validate()?;
        Ok(s)
    }

    /// Same weight on every step.
    pub fn constant(alpha: f64, n: usize) -> Result<Self> {
        Self::new(alpha, n, n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FlowError::Schedule(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.n == 0 {
            return Err(FlowError::Schedule("zero steps".into()));
        }
        if self.n1 > self.n {
            return Err(FlowError::Schedule(format!("n1 {} exceeds n {}", self.n1, self.n)));
        }
        Ok(())
    }

    pub fn alpha_at(&self, step: usize) -> Result<f64> {
        if step >= self.n {
            return Err(FlowError::StepOutOfRange { step, n: self.n });
        }
        Ok(if step < self.n1 { self.alpha } else { 0.0 })
    }
}

/// `α·v_a + (1 − α)·v_b`; the endpoints return one input unchanged.
pub fn fuse<S: Real>(v_a: &Tensor<S>, v_b: &Tensor<S>, alpha: f64) -> Result<Tensor<S>> {
    if v_a.shape() != v_b.shape() {
        return Err(TensorError::Shape {
            op: "fuse",
            shapes: format!("{:?} vs {:?}", v_a.shape(), v_b.shape()),
        }
        .into());
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FlowError::Schedule(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(v_a.detach());
    }
    if alpha == 0.0 {
        return Ok(v_b.detach());
    }
    let (a, b) = (S::lit(alpha), S::lit(1.0 - alpha));
    let v = v_a.data().iter().zip(v_b.data().iter()).map(|(&x, &y)| a * x + b * y).collect();
    Ok(Tensor::new(v_a.shape(), v)?)
}

fn axpy<S: Real>(x: &Tensor<S>, h: S, v: &Tensor<S>, step: usize) -> Result<Tensor<S>> {
    if x.shape() != v.shape() {
        return Err(TensorError::Shape {
            op: "integrate",
            shapes: format!("{:?} vs {:?}", x.shape(), v.shape()),
        }
        .into());
    }
    let out: Vec<S> = x.data().iter().zip(v.data().iter()).map(|(&a, &b)| a + h * b).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::Unstable { step });
    }
    Ok(Tensor::new(x.shape(), out)?)
}

/// Integrate `dx/dt = f(step, t, x)` from `t = 0` to `1` in `n` uniform
/// steps. The step index is passed so schedules can key off it; both
/// midpoint evaluations of one step share it.
pub fn integrate<S: Real>(
    mut field: impl FnMut(usize, S, &Tensor<S>) -> Result<Tensor<S>>,
    x0: &Tensor<S>,
    n: usize,
    solver: Solver,
) -> Result<Tensor<S>> {
    if n == 0 {
        return Err(FlowError::Schedule("zero steps".into()));
    }
    let h = S::lit(1.0 / n as f64);
    let half = S::lit(0.5 / n as f64);
    let mut field = |i: usize, t: S, x: &Tensor<S>| match field(i, t, x) {
        Err(FlowError::Tensor(TensorError::NonFinite { .. })) => Err(FlowError::Unstable { step: i }),
        r => r,
    };
    let mut x = x0.detach();
    for i in 0..n {
        let t = S::lit(i as f64 / n as f64);
        let k1 = field(i, t, &x)?;
        x = match solver {
            Solver::Euler => axpy(&x, h, &k1, i)?,
            Solver::Midpoint => {
                let xm = axpy(&x, half, &k1, i)?;
                let k2 = field(i, t + half, &xm)?;
                axpy(&x, h, &k2, i)?
            }
        };
    }
    Ok(x)
}

/// A conditional field with a fully-null counterpart for guidance.
pub trait GuidedField<S: Real> {
    fn eval_cond(&self, t: S, x: &Tensor<S>) -> Result<Tensor<S>>;

    /// Conditional and fully-null velocities at the same point.
    fn eval_pair(&self, t: S, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)>;
}

/// `v + γ(v − v_∅)` for one field.
pub fn guided<S: Real, F: GuidedField<S> + ?Sized>(field: &F, t: S, x: &Tensor<S>, gamma: f64) -> Result<Tensor<S>> {
    if gamma == 0.0 {
        return field.eval_cond(t, x);
    }
    let (c, u) = field.eval_pair(t, x)?;
    Ok(cfg_combine(&c, &u, gamma)?)
}

/// Velocity of the fused sampler at one step; a field whose weight is zero
/// is not evaluated.
pub fn fused_velocity<S: Real>(
    a: &dyn GuidedField<S>,
    b: &dyn GuidedField<S>,
    alpha: f64,
    gamma: f64,
    t: S,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    if alpha == 1.0 {
        return guided(a, t, x, gamma);
    }
    if alpha == 0.0 {
        return guided(b, t, x, gamma);
    }
    fuse(&guided(a, t, x, gamma)?, &guided(b, t, x, gamma)?, alpha)
}

/// Integrate the schedule-fused guided field of `a` (weight `α`) and `b`.
pub fn sample_fused<S: Real>(
    a: &dyn GuidedField<S>,
    b: &dyn GuidedField<S>,
    x0: &Tensor<S>,
    schedule: &FusionSchedule,
    gamma: f64,
    solver: Solver,
) -> Result<Tensor<S>> {
    schedule.validate()?;
    integrate(
        |step, t, x| fused_velocity(a, b, schedule.alpha_at(step)?, gamma, t, x),
        x0,
        schedule.n,
        solver,
    )
}

/// Integrate a single guided field.
pub fn sample_single<S: Real>(field: &dyn GuidedField<S>, x0: &Tensor<S>, n: usize, gamma: f64, solver: Solver) -> Result<Tensor<S>> {
    integrate(|_, t, x| guided(field, t, x, gamma), x0, n, solver)
}

/// Initial noise `[B, T_max, F]`. Sample `b` draws from stream `ids[b]` of
/// `seed`, so its noise does not depend on how samples are batched; frames
/// past its length are zero.
pub fn initial_noise<S: Real>(seed: u64, ids: &[u64], frames: &[usize], t_max: usize, channels: usize) -> Result<Tensor<S>> {
    if ids.len() != frames.len() || frames.iter().any(|&t| t > t_max) {
        return Err(FlowError::Schedule(format!("bad noise layout {ids:?} / {frames:?} / {t_max}")));
    }
    let root = CounterRng::new(seed);
    let mut v = vec![S::zero(); ids.len() * t_max * channels];
    for (bi, (&id, &t)) in ids.iter().zip(frames).enumerate() {
        let mut rng = root.split(id);
        let base = bi * t_max * channels;
        for x in &mut v[base..base + t * channels] {
            *x = S::lit(rng.normal());
        }
    }
    Ok(Tensor::new(&[ids.len(), t_max, channels], v)?)
}

/// Per-channel feature normalization shared by a decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const NORM_TOLERANCE: f64 = 1e-9;

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and standard deviation of each channel over `[*, F]` rows.
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a [f64]>, channels: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for row in frames {
            for (c, &v) in row.iter().enumerate().take(channels) {
                sum[c] += v;
                sq[c] += v * v;
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Self { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn matches(&self, other: &NormStats) -> bool {
        let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= NORM_TOLERANCE);
        close(&self.mean, &other.mean) && close(&self.std, &other.std)
    }

    pub fn require_match(&self, other: &NormStats) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(FlowError::NormMismatch)
        }
    }

    pub fn normalize(&self, row: &[f64]) -> Vec<f64> {
        let c = self.channels();
        row.iter().enumerate().map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c]).collect()
    }

    pub fn denormalize(&self, row: &[f64]) -> Vec<f64> {
        let c = self.channels();
        row.iter().enumerate().map(|(i, v)| v * self.std[i % c] + self.mean[i % c]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_: usize, _: f64, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(x.scale(-1.0)?)
    }

    fn err(n: usize, solver: Solver) -> f64 {
        let x0 = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let x1 = integrate(decay, &x0, n, solver).unwrap().item();
        (x1 - (-1.0f64).exp()).abs()
    }

    #[test]
    fn schedule_values() {
        let s = FusionSchedule::default();
        assert_eq!(s.alpha_at(0).unwrap(), 0.7);
        assert_eq!(s.alpha_at(19).unwrap(), 0.7);
        assert_eq!(s.alpha_at(20).unwrap(), 0.0);
        assert_eq!(s.alpha_at(29).unwrap(), 0.0);
        assert!(s.alpha_at(30).is_err());
        assert!(FusionSchedule::new(1.2, 1, 2).is_err());
        assert!(FusionSchedule::new(0.5, 3, 2).is_err());
    }

    #[test]
    fn fuse_weights() {
        let a = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let b = Tensor::from_f64(&[2], &[3.0, -1.0]).unwrap();
        assert_eq!(fuse(&a, &b, 1.0).unwrap().to_vec(), a.to_vec());
        assert_eq!(fuse(&a, &b, 0.0).unwrap().to_vec(), b.to_vec());
        let m = fuse(&a, &b, 0.25).unwrap().to_vec();
        assert!((m[0] - 2.5).abs() < 1e-15 && (m[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn one_step_examples() {
        let x0 = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let e = integrate(decay, &x0, 1, Solver::Euler).unwrap().item();
        let m = integrate(decay, &x0, 1, Solver::Midpoint).unwrap().item();
        assert_eq!(e, 0.0);
        assert_eq!(m, 0.5);
    }

    #[test]
    fn convergence_orders() {
        let mid = err(10, Solver::Midpoint) / err(20, Solver::Midpoint);
        let eul = err(10, Solver::Euler) / err(20, Solver::Euler);
        assert!((3.5..=4.5).contains(&mid), "{mid}");
        assert!((1.7..=2.3).contains(&eul), "{eul}");
    }

    #[test]
    fn midpoint_halves_share_step_index() {
        let x0 = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
        let mut seen: Vec<(usize, f64)> = Vec::new();
        integrate(
            |i, t, x| {
                seen.push((i, t));
                Ok(x.detach())
            },
            &x0,
            3,
            Solver::Midpoint,
        )
        .unwrap();
        let idx: Vec<usize> = seen.iter().map(|s| s.0).collect();
        assert_eq!(idx, vec![0, 0, 1, 1, 2, 2]);
        assert!((seen[1].1 - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn blowup_is_reported() {
        let x0 = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let r = integrate(|_, _, x| Ok(x.scale(1e300)?), &x0, 4, Solver::Euler);
        assert!(matches!(r, Err(FlowError::Unstable { .. })));
    }

    #[test]
    fn noise_ignores_batching() {
        let a: Tensor<f64> = initial_noise(5, &[3, 9], &[2, 4], 4, 2).unwrap();
        let b: Tensor<f64> = initial_noise(5, &[9], &[4], 6, 2).unwrap();
        assert_eq!(&a.to_vec()[8..16], &b.to_vec()[..8]);
        assert!(a.to_vec()[4..8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norm_roundtrip_and_match() {
        let rows = [vec![1.0, 10.0], vec![3.0, 14.0]];
        let s = NormStats::from_frames(rows.iter().map(|r| r.as_slice()), 2);
        assert_eq!(s.mean, vec![2.0, 12.0]);
        let n = s.normalize(&rows[1]);
        assert_eq!(n, vec![1.0, 1.0]);
        assert_eq!(s.denormalize(&n), rows[1]);
        let mut t = s.clone();
        t.mean[0] += 1e-12;
        assert!(s.matches(&t));
        t.mean[0] += 1e-6;
        assert_eq!(s.require_match(&t), Err(FlowError::NormMismatch));
    }
}
