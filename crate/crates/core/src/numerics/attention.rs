//! Multi-head scaled dot-product attention and rotary position encoding.

use super::ops::softmax_row;
use super::tensor::{invalid, shape_err, Real, Result, Tensor};

/// Strided sub-matrix view used to address one head inside `[B, N, H·dh]`.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rs: isize,
    cs: isize,
}

/// `C[m×n] (+)= A[m×k] · B[k×n]` over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_view<S: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    av: View,
    b: &[S],
    bv: View,
    c: &mut [S],
    cv: View,
    accumulate: bool,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: callers construct views that stay inside the buffers.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

/// Shapes and options of one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

struct Forward<S> {
    out: Vec<S>,
    probs: Vec<S>,
    tanh: Option<Vec<S>>,
}

fn check<S: Real>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    key_mask: Option<&[S]>,
) -> Result<AttnSpec> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let bad = qs.len() != 3
        || ks.len() != 3
        || ks != vs
        || qs[0] != ks[0]
        || qs[2] != ks[2]
        || heads == 0
        || qs[2] % heads != 0;
    if bad {
        return Err(shape_err("attention", (qs, ks, vs, heads)));
    }
    if let Some(m) = key_mask {
        if m.len() != ks[0] * ks[1] {
            return Err(shape_err("attention", (ks, m.len())));
        }
    }
    Ok(AttnSpec {
        batch: qs[0],
        q_len: qs[1],
        k_len: ks[1],
        heads,
        head_dim: qs[2] / heads,
    })
}

fn forward<S: Real>(
    spec: AttnSpec,
    q: &[S],
    k: &[S],
    v: &[S],
    key_mask: Option<&[S]>,
    cap: Option<S>,
) -> Forward<S> {
    let AttnSpec {
        batch,
        q_len,
        k_len,
        heads,
        head_dim,
    } = spec;
    let hd = heads * head_dim;
    let scale = S::one() / S::lit(head_dim as f64).sqrt();
    let block = q_len * k_len;
    let mut out = vec![S::zero(); batch * q_len * hd];
    let mut probs = vec![S::zero(); batch * heads * block];
    let mut tanh = cap.map(|_| vec![S::zero(); batch * heads * block]);
    let mut scores = vec![S::zero(); block];
    for b in 0..batch {
        let mask = key_mask.map(|m| &m[b * k_len..(b + 1) * k_len]);
        for h in 0..heads {
            let qv = View {
                offset: b * q_len * hd + h * head_dim,
                rs: hd as isize,
                cs: 1,
            };
            let kt = View {
                offset: b * k_len * hd + h * head_dim,
                rs: 1,
                cs: hd as isize,
            };
            let sv = View {
                offset: 0,
                rs: k_len as isize,
                cs: 1,
            };
            gemm_view(q_len, head_dim, k_len, q, qv, k, kt, &mut scores, sv, false);
            let pb = (b * heads + h) * block;
            for (i, s) in scores.iter_mut().enumerate() {
                *s *= scale;
                if let (Some(c), Some(th)) = (cap, tanh.as_mut()) {
                    let t = (*s / c).tanh();
                    th[pb + i] = t;
                    *s = c * t;
                }
            }
            for i in 0..q_len {
                softmax_row(
                    &scores[i * k_len..(i + 1) * k_len],
                    mask,
                    &mut probs[pb + i * k_len..pb + (i + 1) * k_len],
                );
            }
            let pv = View {
                offset: pb,
                rs: k_len as isize,
                cs: 1,
            };
            let vv = View {
                offset: b * k_len * hd + h * head_dim,
                rs: hd as isize,
                cs: 1,
            };
            let ov = View {
                offset: b * q_len * hd + h * head_dim,
                rs: hd as isize,
                cs: 1,
            };
            gemm_view(q_len, k_len, head_dim, &probs, pv, v, vv, &mut out, ov, false);
        }
    }
    Forward { out, probs, tanh }
}

/// Probabilities `[B, H, Nq, Nk]` of an attention call, for inspection.
pub fn attention_probs<S: Real>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    heads: usize,
    key_mask: Option<&[S]>,
    softcap: Option<S>,
) -> Result<Vec<S>> {
    let spec = check(q, k, k, heads, key_mask)?;
    Ok(forward(spec, &q.data(), &k.data(), &k.data(), key_mask, softcap).probs)
}

impl<S: Real> Tensor<S> {
    /// Multi-head attention over `[B, N, H·dh]` tensors. `key_mask` is an
    /// additive `[B, Nk]` mask (0 or the sentinel); `softcap` bounds the
    /// scaled logits before masking.
    pub fn attention(
        q: &Tensor<S>,
        k: &Tensor<S>,
        v: &Tensor<S>,
        heads: usize,
        key_mask: Option<&[S]>,
        softcap: Option<S>,
    ) -> Result<Tensor<S>> {
        let spec = check(q, k, v, heads, key_mask)?;
        if let Some(c) = softcap {
            if !(c > S::zero()) {
                return Err(invalid("attention", "softcap must be positive"));
            }
        }
        let fw = forward(spec, &q.data(), &k.data(), &v.data(), key_mask, softcap);
        let Forward { out, probs, tanh } = fw;
        let shape = vec![spec.batch, spec.q_len, spec.heads * spec.head_dim];
        Tensor::from_op(
            "attention",
            shape,
            out,
            vec![q.clone(), k.clone(), v.clone()],
            Box::new(move |g, p, _| backward(spec, g, p, &probs, tanh.as_deref())),
        )
    }

    /// Rotary position encoding on interleaved pairs within each head.
    /// Rows whose position is `None` pass through unchanged.
    pub fn rope(&self, heads: usize, positions: &[Option<usize>]) -> Result<Tensor<S>> {
        let sh = self.shape();
        if sh.len() != 3 || heads == 0 || !sh[2].is_multiple_of(heads) || !(sh[2] / heads).is_multiple_of(2) || positions.len() != sh[1] {
            return Err(shape_err("rope", (sh, heads, positions.len())));
        }
        let (b, n, d) = (sh[0], sh[1], sh[2]);
        let dh = d / heads;
        let table = rope_table::<S>(positions, dh);
        let src = self.data();
        let out = rotate(&src, b, n, heads, dh, &table, false);
        drop(src);
        Tensor::from_op(
            "rope",
            sh.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(rotate(g, b, n, heads, dh, &table, true))]),
        )
    }
}

type RopeTable<S> = Vec<Option<Vec<(S, S)>>>;

fn rope_table<S: Real>(positions: &[Option<usize>], dh: usize) -> RopeTable<S> {
    positions
        .iter()
        .map(|p| {
            p.map(|pos| {
                (0..dh / 2)
                    .map(|i| {
                        let freq = 10000f64.powf(-(2.0 * i as f64) / dh as f64);
                        let ang = pos as f64 * freq;
                        (S::lit(ang.cos()), S::lit(ang.sin()))
                    })
                    .collect()
            })
        })
        .collect()
}

fn rotate<S: Real>(x: &[S], b: usize, n: usize, heads: usize, dh: usize, table: &RopeTable<S>, inverse: bool) -> Vec<S> {
    let mut out = x.to_vec();
    let d = heads * dh;
    for bi in 0..b {
        for (ni, row) in table.iter().enumerate().take(n) {
            let Some(cs) = row else { continue };
            for h in 0..heads {
                let base = (bi * n + ni) * d + h * dh;
                for (i, &(c, s)) in cs.iter().enumerate() {
                    let s = if inverse { -s } else { s };
                    let x0 = x[base + 2 * i];
                    let x1 = x[base + 2 * i + 1];
                    out[base + 2 * i] = x0 * c - x1 * s;
                    out[base + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
    out
}

fn backward<S: Real>(spec: AttnSpec, g: &[S], p: &[Tensor<S>], probs: &[S], tanh: Option<&[S]>) -> Vec<Option<Vec<S>>> {
    let AttnSpec {
        batch,
        q_len,
        k_len,
        heads,
        head_dim,
    } = spec;
    let hd = heads * head_dim;
    let scale = S::one() / S::lit(head_dim as f64).sqrt();
    let block = q_len * k_len;
    let (q, k, v) = (p[0].data(), p[1].data(), p[2].data());
    let mut gq = vec![S::zero(); q.len()];
    let mut gk = vec![S::zero(); k.len()];
    let mut gv = vec![S::zero(); v.len()];
    let mut dp = vec![S::zero(); block];
    let full = |rows: usize| View {
        offset: 0,
        rs: rows as isize,
        cs: 1,
    };
    for b in 0..batch {
        for h in 0..heads {
            let pb = (b * heads + h) * block;
            let qoff = b * q_len * hd + h * head_dim;
            let koff = b * k_len * hd + h * head_dim;
            let hv = |offset| View {
                offset,
                rs: hd as isize,
                cs: 1,
            };
            let ht = |offset| View {
                offset,
                rs: 1,
                cs: hd as isize,
            };
            // dV = Pᵀ dO
            let pt = View {
                offset: pb,
                rs: 1,
                cs: k_len as isize,
            };
            gemm_view(k_len, q_len, head_dim, probs, pt, g, hv(qoff), &mut gv, hv(koff), false);
            // dP = dO Vᵀ
            gemm_view(q_len, head_dim, k_len, g, hv(qoff), &v, ht(koff), &mut dp, full(k_len), false);
            for i in 0..q_len {
                let pr = &probs[pb + i * k_len..pb + (i + 1) * k_len];
                let dr = &mut dp[i * k_len..(i + 1) * k_len];
                let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (j, d) in dr.iter_mut().enumerate() {
                    let mut ds = pr[j] * (*d - dot);
                    if let Some(th) = tanh {
                        let t = th[pb + i * k_len + j];
                        ds *= S::one() - t * t;
                    }
                    *d = ds * scale;
                }
            }
            // dQ = dS K ; dK = dSᵀ Q
            gemm_view(q_len, k_len, head_dim, &dp, full(k_len), &k, hv(koff), &mut gq, hv(qoff), false);
            let dst = View {
                offset: 0,
                rs: 1,
                cs: k_len as isize,
            };
            gemm_view(k_len, q_len, head_dim, &dp, dst, &q, hv(qoff), &mut gk, hv(koff), false);
        }
    }
    vec![
        p[0].requires_grad().then_some(gq),
        p[1].requires_grad().then_some(gk),
        p[2].requires_grad().then_some(gv),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::MASK_SENTINEL;

    #[test]
    fn uniform_keys_average_values() {
        let q = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.3, -0.2]).unwrap();
        let k = Tensor::<f64>::from_f64(&[1, 3, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let v = Tensor::<f64>::from_f64(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let o = Tensor::attention(&q, &k, &v, 1, None, None).unwrap().to_vec();
        assert!((o[0] - 3.0).abs() < 1e-12 && (o[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn masked_keys_get_zero_probability() {
        let q = Tensor::<f64>::from_f64(&[1, 2, 2], &[0.3, -0.2, 0.1, 0.5]).unwrap();
        let k = Tensor::<f64>::from_f64(&[1, 3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let mask = [0.0, MASK_SENTINEL, 0.0];
        let p = attention_probs(&q, &k, 1, Some(&mask), Some(70.0)).unwrap();
        assert_eq!(p[1], 0.0);
        assert_eq!(p[4], 0.0);
    }

    #[test]
    fn rope_preserves_norm_and_skips_none() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 4], &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.rope(1, &[Some(5), None]).unwrap().to_vec();
        let n0: f64 = y[..4].iter().map(|v| v * v).sum();
        assert!((n0 - 30.0).abs() < 1e-12);
        assert_eq!(&y[4..], &[1.0, 2.0, 3.0, 4.0]);
    }
}
