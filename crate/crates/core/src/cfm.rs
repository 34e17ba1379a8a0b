//! Optimal-transport conditional flow matching: the linear noise→data path,
//! its target field, the regression loss, conditional dropout and
//! classifier-free guidance.

use thiserror::Error;

use crate::numerics::{CounterRng, Real, Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum CfmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid cfm argument: {0}")]
    Invalid(String),
    #[error("flow-matching loss is not finite")]
    Unstable,
}

pub type Result<T> = std::result::Result<T, CfmError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfmConfig {
    pub sigma_min: f64,
    pub cond_dropout_p: f64,
    pub cfg_gamma: f64,
}

impl Default for CfmConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            cond_dropout_p: 0.1,
            cfg_gamma: 1.34,
        }
    }
}

impl CfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(CfmError::Invalid(format!("sigma_min {} outside [0, 1)", self.sigma_min)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_p) {
            return Err(CfmError::Invalid(format!("cond_dropout_p {} outside [0, 1]", self.cond_dropout_p)));
        }
        if !(self.cfg_gamma >= 0.0) {
            return Err(CfmError::Invalid(format!("cfg_gamma {} negative", self.cfg_gamma)));
        }
        Ok(())
    }
}

/// Which conditioning pathways are replaced by their learned null embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct NullMask {
    pub text: bool,
    pub prompt: bool,
}

impl NullMask {
    pub const NONE: NullMask = NullMask {
        text: false,
        prompt: false,
    };
    pub const BOTH: NullMask = NullMask {
        text: true,
        prompt: true,
    };
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CfmError::Invalid(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn path_point<S: Real>(x0: S, x1: S, t: S, sigma: S) -> S {
    (S::one() - (S::one() - sigma) * t) * x0 + t * x1
}

fn target_point<S: Real>(x0: S, x1: S, sigma: S) -> S {
    x1 - (S::one() - sigma) * x0
}

/// `x_t = (1 − (1 − σ)t)·x0 + t·x1`.
pub fn sample_path<S: Real>(x0: &Tensor<S>, x1: &Tensor<S>, t: f64, sigma_min: f64) -> Result<Tensor<S>> {
    check_t(t)?;
    if x0.shape() != x1.shape() {
        return Err(CfmError::Invalid(format!("shapes {:?} vs {:?}", x0.shape(), x1.shape())));
    }
    let (t, s) = (S::lit(t), S::lit(sigma_min));
    let v = x0.data().iter().zip(x1.data().iter()).map(|(&a, &b)| path_point(a, b, t, s)).collect();
    Ok(Tensor::new(x0.shape(), v)?)
}

/// `u = x1 − (1 − σ)·x0`; independent of `t`.
pub fn target_field<S: Real>(x0: &Tensor<S>, x1: &Tensor<S>, sigma_min: f64) -> Result<Tensor<S>> {
    if x0.shape() != x1.shape() {
        return Err(CfmError::Invalid(format!("shapes {:?} vs {:?}", x0.shape(), x1.shape())));
    }
    let s = S::lit(sigma_min);
    let v = x0.data().iter().zip(x1.data().iter()).map(|(&a, &b)| target_point(a, b, s)).collect();
    Ok(Tensor::new(x0.shape(), v)?)
}

/// Per-sample draw used by [`cfm_loss`].
#[derive(Debug, Clone)]
pub struct CfmDraw<S: Real> {
    pub t: Vec<S>,
    pub x_t: Tensor<S>,
    pub target: Tensor<S>,
}

/// Draw `t ~ U[0,1)` per batch element and `x0 ~ N(0, I)`, then build the
/// path point and target. Batch is the leading axis of `x1`.
pub fn draw<S: Real>(x1: &Tensor<S>, rng: &mut CounterRng, sigma_min: f64) -> Result<CfmDraw<S>> {
    let b = *x1.shape().first().ok_or_else(|| CfmError::Invalid("empty x1".into()))?;
    let per = x1.numel() / b.max(1);
    let s = S::lit(sigma_min);
    let t: Vec<S> = (0..b).map(|_| S::lit(rng.uniform())).collect();
    let x1d = x1.data();
    let mut xt = Vec::with_capacity(x1d.len());
    let mut u = Vec::with_capacity(x1d.len());
    for (bi, chunk) in x1d.chunks(per.max(1)).enumerate() {
        for &x1v in chunk {
            let x0v = S::lit(rng.normal());
            xt.push(path_point(x0v, x1v, t[bi], s));
            u.push(target_point(x0v, x1v, s));
        }
    }
    drop(x1d);
    Ok(CfmDraw {
        t,
        x_t: Tensor::new(x1.shape(), xt)?,
        target: Tensor::new(x1.shape(), u)?,
    })
}

/// Weighted mean squared error; `frame_weights` covers every leading index
/// of `pred` (the last axis holds channels).
pub fn weighted_mse<S: Real>(pred: &Tensor<S>, target: &Tensor<S>, frame_weights: Option<&[S]>) -> Result<Tensor<S>> {
    let diff = pred.sub(target)?;
    let sq = diff.mul(&diff)?;
    match frame_weights {
        None => Ok(sq.mean()?),
        Some(w) => {
            let ch = *pred.shape().last().unwrap_or(&1);
            if w.len() * ch != pred.numel() {
                return Err(CfmError::Invalid(format!("{} weights for shape {:?}", w.len(), pred.shape())));
            }
            let total: S = w.iter().copied().sum::<S>() * S::lit(ch as f64);
            if !(total > S::zero()) {
                return Err(CfmError::Invalid("all frames excluded from the loss".into()));
            }
            let full: Vec<S> = w.iter().flat_map(|&v| std::iter::repeat_n(v, ch)).collect();
            let wt = Tensor::new(pred.shape(), full)?;
            Ok(sq.mul(&wt)?.sum()?.scale(S::one() / total)?)
        }
    }
}

/// `E‖v(t, x_t) − u‖²` for one Monte-Carlo draw per batch element.
pub fn cfm_loss<S: Real>(
    field: impl FnOnce(&[S], &Tensor<S>) -> std::result::Result<Tensor<S>, TensorError>,
    x1: &Tensor<S>,
    frame_weights: Option<&[S]>,
    rng: &mut CounterRng,
    sigma_min: f64,
) -> Result<Tensor<S>> {
    let d = draw(x1, rng, sigma_min)?;
    let v = field(&d.t, &d.x_t)?;
    if v.shape() != x1.shape() {
        return Err(CfmError::Invalid(format!("field shape {:?} vs {:?}", v.shape(), x1.shape())));
    }
    let loss = weighted_mse(&v, &d.target, frame_weights)?;
    if !loss.item().is_finite() {
        return Err(CfmError::Unstable);
    }
    Ok(loss)
}

/// Independently null each pathway with probability `p` (on top of any
/// nulling already present).
pub fn conditional_dropout(current: NullMask, p: f64, rng: &mut CounterRng) -> NullMask {
    let text = rng.bernoulli(p);
    let prompt = rng.bernoulli(p);
    NullMask {
        text: current.text || text,
        prompt: current.prompt || prompt,
    }
}

/// `v + γ·(v − v_∅)`; `γ = 0` returns the conditional field unchanged.
pub fn cfg_combine<S: Real>(v_cond: &Tensor<S>, v_uncond: &Tensor<S>, gamma: f64) -> Result<Tensor<S>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(CfmError::Invalid(format!("shapes {:?} vs {:?}", v_cond.shape(), v_uncond.shape())));
    }
    if gamma == 0.0 {
        return Ok(v_cond.detach());
    }
    let g = S::lit(gamma);
    let v = v_cond
        .data()
        .iter()
        .zip(v_uncond.data().iter())
        .map(|(&c, &u)| c + g * (c - u))
        .collect();
    Ok(Tensor::new(v_cond.shape(), v)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn defaults() {
        let c = CfmConfig::default();
        assert_eq!((c.sigma_min, c.cond_dropout_p, c.cfg_gamma), (0.01, 0.1, 1.34));
        assert!(c.validate().is_ok());
        assert!(CfmConfig { sigma_min: 1.0, ..c }.validate().is_err());
        assert!(CfmConfig { cond_dropout_p: 1.5, ..c }.validate().is_err());
    }

    #[test]
    fn path_endpoints() {
        let x0 = s(0.7);
        let x1 = s(-0.3);
        assert_eq!(sample_path(&x0, &x1, 0.0, 0.01).unwrap().item(), 0.7);
        assert!((sample_path(&s(1.0), &s(0.0), 1.0, 0.01).unwrap().item() - 0.01).abs() < 1e-15);
        assert_eq!(sample_path(&s(0.0), &s(2.0), 0.5, 0.0).unwrap().item(), 1.0);
        let end = sample_path(&x0, &x1, 1.0, 0.01).unwrap().item();
        assert_eq!(end, 0.01 * 0.7 + -0.3);
        assert!(sample_path(&x0, &x1, 1.5, 0.01).is_err());
    }

    #[test]
    fn target_examples() {
        assert_eq!(target_field(&s(0.0), &s(1.3), 0.01).unwrap().item(), 1.3);
        assert!((target_field(&s(1.0), &s(1.0), 0.01).unwrap().item() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn path_derivative_equals_target() {
        let mut rng = CounterRng::new(4);
        for _ in 0..50 {
            let (a, b, t) = (rng.normal(), rng.normal(), 0.01 + 0.98 * rng.uniform());
            let h = 1e-6;
            let up = sample_path(&s(a), &s(b), t + h, 0.01).unwrap().item();
            let dn = sample_path(&s(a), &s(b), t - h, 0.01).unwrap().item();
            let u = target_field(&s(a), &s(b), 0.01).unwrap().item();
            assert!(((up - dn) / (2.0 * h) - u).abs() < 1e-8);
        }
    }

    #[test]
    fn oracle_field_has_zero_loss() {
        // The oracle sees the same draw as the loss: replay the rng stream.
        let x1 = Tensor::<f64>::from_f64(&[4, 3], &[0.5, -1.0, 2.0, 0.1, 0.2, 0.3, 1.0, 1.0, 1.0, -2.0, 0.0, 0.4]).unwrap();
        let rng = CounterRng::new(10);
        let d = draw(&x1, &mut rng.clone(), 0.01).unwrap();
        let loss = cfm_loss(|_, _| Ok(d.target.clone()), &x1, None, &mut rng.clone(), 0.01).unwrap();
        assert!(loss.item() < 1e-12);
        let shifted = d.target.add_scalar(0.25).unwrap();
        let loss = cfm_loss(|_, _| Ok(shifted), &x1, None, &mut rng.clone(), 0.01).unwrap();
        assert!((loss.item() - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn weights_exclude_frames() {
        let p = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 1.0, 5.0, 5.0]).unwrap();
        let t = Tensor::<f64>::zeros(&[1, 2, 2]);
        let l = weighted_mse(&p, &t, Some(&[1.0, 0.0])).unwrap();
        assert_eq!(l.item(), 1.0);
        assert!(weighted_mse(&p, &t, Some(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = CounterRng::new(1);
        for _ in 0..100 {
            assert_eq!(conditional_dropout(NullMask::NONE, 0.0, &mut rng), NullMask::NONE);
            assert_eq!(conditional_dropout(NullMask::NONE, 1.0, &mut rng), NullMask::BOTH);
        }
    }

    #[test]
    fn dropout_rates_and_independence() {
        let mut rng = CounterRng::new(99);
        let n = 100_000;
        let draws: Vec<NullMask> = (0..n).map(|_| conditional_dropout(NullMask::NONE, 0.1, &mut rng)).collect();
        let xs: Vec<f64> = draws.iter().map(|d| d.text as u8 as f64).collect();
        let ys: Vec<f64> = draws.iter().map(|d| d.prompt as u8 as f64).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        assert!((mx - 0.1).abs() < 0.005, "{mx}");
        assert!((my - 0.1).abs() < 0.005, "{my}");
        let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n as f64;
        let corr = cov / (mx * (1.0 - mx) * my * (1.0 - my)).sqrt();
        assert!(corr.abs() < 0.02, "{corr}");
    }

    #[test]
    fn cfg_examples() {
        let v = Tensor::<f64>::from_f64(&[3], &[2.0, -0.0, 1.5]).unwrap();
        let u = Tensor::<f64>::from_f64(&[3], &[1.0, 4.0, -2.0]).unwrap();
        let same = cfg_combine(&v, &u, 0.0).unwrap().to_vec();
        for (a, b) in same.iter().zip(v.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(cfg_combine(&s(2.0), &s(1.0), 1.0).unwrap().item(), 3.0);
        assert_eq!(CfmConfig::default().cfg_gamma, 1.34);
    }
}
