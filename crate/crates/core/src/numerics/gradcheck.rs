//! Central finite-difference gradient checks.
//!
//! The checker only calls the forward closure, so it is independent of
//! every backward rule it validates.

use super::ops::MASK_SENTINEL;
use super::rng::CounterRng;
use super::tensor::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare backward gradients of `loss` w.r.t. `params` against central
/// differences. `per_param` caps how many coordinates of each parameter are
/// probed (chosen with `rng`); `None` probes all of them.
pub fn check_gradients(
    name: &str,
    params: &[Tensor<f64>],
    loss: impl Fn() -> Result<Tensor<f64>>,
    per_param: Option<usize>,
    rng: &mut CounterRng,
) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    loss()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for (p, grad) in params.iter().zip(&analytic) {
        let n = p.numel();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|_| rng.range_inclusive(0, n - 1)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = p.data()[i];
            p.update_data(|d| d[i] = orig + FD_STEP);
            let up = loss()?.item();
            p.update_data(|d| d[i] = orig - FD_STEP);
            let down = loss()?.item();
            p.update_data(|d| d[i] = orig);
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel_err = max_rel_err.max(relative_error(grad[i], numeric));
            checked += 1;
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        checked,
    })
}

fn randn(rng: &mut CounterRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = rng.normal_vec(n).into_iter().map(|x| x * scale).collect();
    Tensor::param(shape, v).expect("shape")
}

/// Weighted sum with fixed random weights: a generic scalar head.
fn probe(rng: &mut CounterRng, like: &[usize]) -> Tensor<f64> {
    let n = like.iter().product();
    Tensor::new(like, rng.normal_vec(n)).expect("shape")
}

fn head(y: Result<Tensor<f64>>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    y?.mul(w)?.sum()
}

/// Finite-difference checks for every differentiable op.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = CounterRng::new(seed);
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, [$($p:expr),+], $out_shape:expr, |$w:ident| $body:expr) => {{
            let params = vec![$($p.clone()),+];
            let $w = probe(&mut rng, &$out_shape);
            let mut crng = rng.split(out.len() as u64);
            out.push(check_gradients($name, &params, || head($body, &$w), None, &mut crng)?);
        }};
    }

    let a = randn(&mut rng, &[3, 4], 1.0);
    let b = randn(&mut rng, &[3, 4], 1.0);
    check!("add", [a, b], [3, 4], |w| a.add(&b));
    check!("sub", [a, b], [3, 4], |w| a.sub(&b));
    check!("mul", [a, b], [3, 4], |w| a.mul(&b));
    check!("scale", [a], [3, 4], |w| a.scale(-1.7));
    check!("add_scalar", [a], [3, 4], |w| a.add_scalar(0.3));
    let bias = randn(&mut rng, &[4], 1.0);
    check!("add_row", [a, bias], [3, 4], |w| a.add_row(&bias));

    let m1 = randn(&mut rng, &[2, 3, 4], 1.0);
    let m2 = randn(&mut rng, &[4, 5], 1.0);
    check!("matmul", [m1, m2], [2, 3, 5], |w| m1.matmul(&m2));
    let b1 = randn(&mut rng, &[2, 3, 4], 1.0);
    let b2 = randn(&mut rng, &[2, 4, 2], 1.0);
    check!("bmm", [b1, b2], [2, 3, 2], |w| b1.bmm(&b2));
    check!("transpose", [a], [4, 3], |w| a.transpose());
    check!("reshape", [a], [2, 6], |w| a.reshape(&[2, 6]));

    let c1 = randn(&mut rng, &[2, 2, 3], 1.0);
    let c2 = randn(&mut rng, &[2, 1, 3], 1.0);
    check!("concat", [c1, c2], [2, 3, 3], |w| Tensor::concat(&[c1.clone(), c2.clone()], 1));
    check!("slice", [c1], [2, 1, 3], |w| c1.slice(1, 1, 1));
    check!("sum", [a], [1], |w| a.sum());
    check!("mean", [a], [1], |w| a.mean());

    let mask: Vec<f64> = vec![0.0, MASK_SENTINEL, 0.0, 0.0];
    check!("softmax_masked", [a], [3, 4], |w| a.softmax(Some(&mask)));
    check!("softmax", [a], [3, 4], |w| a.softmax(None));
    check!("layer_norm", [a], [3, 4], |w| a.layer_norm(1e-5));
    check!("sigmoid", [a], [3, 4], |w| a.sigmoid());
    check!("tanh", [a], [3, 4], |w| a.tanh());
    check!("gelu", [a], [3, 4], |w| a.gelu());
    check!("silu", [a], [3, 4], |w| a.silu());
    check!("exp", [a], [3, 4], |w| a.exp());
    let away: Vec<f64> = a.to_vec().iter().map(|v| if v.abs() < 0.05 { v + 0.2 } else { *v }).collect();
    let r = Tensor::param(&[3, 4], away)?;
    check!("relu", [r], [3, 4], |w| r.relu());
    let big = randn(&mut rng, &[3, 4], 60.0);
    check!("softcap", [big], [3, 4], |w| big.softcap(70.0));

    let table = randn(&mut rng, &[5, 3], 1.0);
    check!("embedding", [table], [2, 3, 3], |w| Tensor::embedding(&table, &[0, 4, 4, 1, 2, 0], &[2, 3]));
    let idx = [Some(0), Some(0), Some(1), None, Some(1), Some(1), Some(0), Some(0)];
    check!("gather_rows", [c1], [2, 4, 3], |w| c1.gather_rows(&idx, 4));
    check!("broadcast_leading", [bias], [2, 3, 4], |w| bias.broadcast_leading(&[2, 3]));

    let x3 = randn(&mut rng, &[2, 3, 4], 1.0);
    let v2 = randn(&mut rng, &[2, 4], 1.0);
    let s2 = randn(&mut rng, &[2, 4], 1.0);
    check!("add_bcast", [x3, v2], [2, 3, 4], |w| x3.add_bcast(&v2));
    check!("modulate", [x3, v2, s2], [2, 3, 4], |w| x3.modulate(&v2, &s2));
    check!("gate", [x3, v2], [2, 3, 4], |w| x3.gate(&v2));
    let y3 = randn(&mut rng, &[2, 3, 4], 1.0);
    check!("blend_batch", [x3, y3], [2, 3, 4], |w| x3.blend_batch(&y3, &[true, false]));
    check!("unfold3", [x3], [2, 3, 12], |w| x3.unfold3());

    let q = randn(&mut rng, &[2, 3, 8], 1.0);
    let k = randn(&mut rng, &[2, 5, 8], 1.0);
    let v = randn(&mut rng, &[2, 5, 8], 1.0);
    let kmask: Vec<f64> = (0..10).map(|i| if i == 4 || i == 7 { MASK_SENTINEL } else { 0.0 }).collect();
    check!("attention", [q, k, v], [2, 3, 8], |w| Tensor::attention(&q, &k, &v, 2, Some(&kmask), None));
    let qb = randn(&mut rng, &[2, 3, 8], 12.0);
    check!("attention_softcap", [qb, k, v], [2, 3, 8], |w| {
        Tensor::attention(&qb, &k, &v, 2, Some(&kmask), Some(2.0))
    });
    let pos = [Some(0), None, Some(7)];
    check!("rope", [q], [2, 3, 8], |w| q.rope(2, &pos));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for r in op_suite(2024).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{}: {}", r.name, r.max_rel_err);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn matmul_factor_gradients() {
        let mut rng = CounterRng::new(3);
        let a = randn(&mut rng, &[4, 3], 1.0);
        let b = randn(&mut rng, &[3, 2], 1.0);
        let w = probe(&mut rng, &[4, 2]);
        let r = check_gradients("matmul2d", &[a.clone(), b.clone()], || head(a.matmul(&b), &w), None, &mut rng).unwrap();
        assert!(r.max_rel_err < 1e-4);
        assert_eq!(r.checked, 18);
    }
}
