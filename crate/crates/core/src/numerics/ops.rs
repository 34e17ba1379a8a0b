//! Differentiable tensor operations.

use super::tensor::{invalid, numel, shape_err, Real, Result, Tensor};

/// Additive mask value for excluded softmax entries.
pub const MASK_SENTINEL: f64 = -1.0e9;

fn same_shape<S: Real>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, (a.shape(), b.shape())));
    }
    Ok(())
}

fn wants<S: Real>(parents: &[Tensor<S>], i: usize) -> bool {
    parents[i].requires_grad()
}

/// Row-major GEMM on contiguous buffers: `c (+)= op(a) · op(b)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    c: &mut [S],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = S::zero());
        }
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: buffer sizes checked above; c is a distinct mutable slice.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn unary<S: Real>(
    op: &'static str,
    x: &Tensor<S>,
    f: impl Fn(S) -> S,
    df: impl Fn(S, S) -> S + 'static,
) -> Result<Tensor<S>> {
    let data: Vec<S> = x.data().iter().map(|&v| f(v)).collect();
    // df(input, output) -> local derivative
    Tensor::from_op(
        op,
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, p, out| {
            let xin = p[0].data();
            vec![Some(
                g.iter()
                    .zip(xin.iter().zip(out))
                    .map(|(&g, (&xi, &yi))| g * df(xi, yi))
                    .collect(),
            )]
        }),
    )
}

impl<S: Real> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a + b).collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                vec![wants(p, 0).then(|| g.to_vec()), wants(p, 1).then(|| g.to_vec())]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a - b).collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                vec![
                    wants(p, 0).then(|| g.to_vec()),
                    wants(p, 1).then(|| g.iter().map(|&v| -v).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a * b).collect();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                let a = p[0].data();
                let b = p[1].data();
                vec![
                    wants(p, 0).then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect()),
                    wants(p, 1).then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect()),
                ]
            }),
        )
    }

    pub fn scale(&self, c: S) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    pub fn neg(&self) -> Result<Tensor<S>> {
        self.scale(-S::one())
    }

    pub fn add_scalar(&self, c: S) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    /// `x + b` with `b` broadcast over every leading index of `x`.
    pub fn add_row(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let n = *self.shape().last().ok_or_else(|| shape_err("add_row", self.shape()))?;
        if bias.shape() != [n] {
            return Err(shape_err("add_row", (self.shape(), bias.shape())));
        }
        let b = bias.data();
        let data = self
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b.iter()).map(|(&x, &b)| x + b))
            .collect();
        drop(b);
        Tensor::from_op(
            "add_row",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, p, _| {
                let gb = wants(p, 1).then(|| {
                    let mut acc = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    acc
                });
                vec![wants(p, 0).then(|| g.to_vec()), gb]
            }),
        )
    }

    /// `[.., K] · [K, N] -> [.., N]`; leading dims of `self` act as rows.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (ash, bsh) = (self.shape(), rhs.shape());
        if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(shape_err("matmul", (ash, bsh)));
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = self.numel() / k.max(1);
        let mut out = vec![S::zero(); m * n];
        gemm(m, k, n, &self.data(), false, &rhs.data(), false, &mut out, false);
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        Tensor::from_op(
            "matmul",
            shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, p, _| {
                let ga = wants(p, 0).then(|| {
                    let mut ga = vec![S::zero(); m * k];
                    gemm(m, n, k, g, false, &p[1].data(), true, &mut ga, false);
                    ga
                });
                let gb = wants(p, 1).then(|| {
                    let mut gb = vec![S::zero(); k * n];
                    gemm(k, m, n, &p[0].data(), true, g, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Batched matrix product `[B, M, K] · [B, K, N] -> [B, M, N]`.
    pub fn bmm(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (ash, bsh) = (self.shape(), rhs.shape());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(shape_err("bmm", (ash, bsh)));
        }
        let (bs, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![S::zero(); bs * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &a[i * m * k..],
                    false,
                    &b[i * k * n..],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        Tensor::from_op(
            "bmm",
            vec![bs, m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, p, _| {
                let a = p[0].data();
                let b = p[1].data();
                let ga = wants(p, 0).then(|| {
                    let mut ga = vec![S::zero(); bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &b[i * k * n..],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    ga
                });
                let gb = wants(p, 1).then(|| {
                    let mut gb = vec![S::zero(); bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &a[i * m * k..],
                            true,
                            &g[i * m * n..],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<S>> {
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(shape_err("transpose", sh));
        }
        let (r, c) = (sh[0], sh[1]);
        let src = self.data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel(shape) != self.numel() {
            return Err(shape_err("reshape", (self.shape(), shape)));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(shape_err("concat", (first.shape(), axis)));
        }
        for p in parts {
            let sh = p.shape();
            if sh.len() != rank
                || sh.iter().enumerate().any(|(i, &d)| i != axis && d != first.shape()[i])
            {
                let shapes: Vec<_> = parts.iter().map(|p| p.shape().to_vec()).collect();
                return Err(shape_err("concat", shapes));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &w) in datas.iter().zip(&widths) {
                out.extend_from_slice(&d[o * w..(o + 1) * w]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[axis] = total / inner.max(1);
        if inner == 0 {
            shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        }
        Tensor::from_op(
            "concat",
            shape,
            out,
            parts.to_vec(),
            Box::new(move |g, p, _| {
                let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(p.len());
                let mut offset = 0;
                for (i, &w) in widths.iter().enumerate() {
                    if wants(p, i) {
                        let mut gi = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let base = o * total + offset;
                            gi.extend_from_slice(&g[base..base + w]);
                        }
                        grads.push(Some(gi));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        let sh = self.shape().to_vec();
        if axis >= sh.len() || start + len > sh[axis] {
            return Err(shape_err("slice", (&sh, axis, start, len)));
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let full = sh[axis] * inner;
        let w = len * inner;
        let src = self.data();
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&src[base..base + w]);
        }
        drop(src);
        let mut shape = sh.clone();
        shape[axis] = len;
        let total = numel(&sh);
        Tensor::from_op(
            "slice",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![S::zero(); total];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    gx[base..base + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn sum(&self) -> Result<Tensor<S>> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor<S>> {
        let n = self.numel();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        self.sum()?.scale(S::one() / S::lit(n as f64))
    }

    /// Softmax over the last axis with an optional additive mask whose length
    /// is either the last extent (broadcast over rows) or the full size.
    pub fn softmax(&self, mask: Option<&[S]>) -> Result<Tensor<S>> {
        let n = *self.shape().last().ok_or_else(|| shape_err("softmax", self.shape()))?;
        if let Some(m) = mask {
            if m.len() != n && m.len() != self.numel() {
                return Err(shape_err("softmax", (self.shape(), m.len())));
            }
        }
        let src = self.data();
        let mut out = vec![S::zero(); src.len()];
        for (r, (row, orow)) in src.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let moff = match mask {
                Some(m) if m.len() == n => Some(m),
                Some(m) => Some(&m[r * n..(r + 1) * n]),
                None => None,
            };
            softmax_row(row, moff, orow);
        }
        drop(src);
        Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = vec![S::zero(); y.len()];
                for ((gr, yr), gxr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalization over the last axis, no affine parameters.
    /// A zero-variance row maps to zeros.
    pub fn layer_norm(&self, eps: S) -> Result<Tensor<S>> {
        let n = *self.shape().last().ok_or_else(|| shape_err("layer_norm", self.shape()))?;
        let src = self.data();
        let rows = src.len() / n.max(1);
        let mut out = vec![S::zero(); src.len()];
        let mut inv_std = vec![S::zero(); rows];
        let nn = S::lit(n as f64);
        for (r, (row, orow)) in src.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        drop(src);
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = vec![S::zero(); y.len()];
                for (r, ((gr, yr), gxr)) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let mg = gr.iter().copied().sum::<S>() / nn;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() / nn;
                    for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gi - mg - yi * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        unary(
            "sigmoid",
            self,
            |v| S::one() / (S::one() + (-v).exp()),
            |_, y| y * (S::one() - y),
        )
    }

    pub fn tanh(&self) -> Result<Tensor<S>> {
        unary("tanh", self, |v| v.tanh(), |_, y| S::one() - y * y)
    }

    pub fn exp(&self) -> Result<Tensor<S>> {
        unary("exp", self, |v| v.exp(), |_, y| y)
    }

    pub fn relu(&self) -> Result<Tensor<S>> {
        unary("relu", self, |v| v.max(S::zero()), |x, _| if x > S::zero() { S::one() } else { S::zero() })
    }

    pub fn silu(&self) -> Result<Tensor<S>> {
        unary(
            "silu",
            self,
            |v| v / (S::one() + (-v).exp()),
            |x, _| {
                let s = S::one() / (S::one() + (-x).exp());
                s * (S::one() + x * (S::one() - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor<S>> {
        let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
        let k = S::lit(0.044715);
        let half = S::lit(0.5);
        let three = S::lit(3.0);
        unary(
            "gelu",
            self,
            move |x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let th = u.tanh();
                let du = c * (S::one() + three * k * x * x);
                half * (S::one() + th) + half * x * (S::one() - th * th) * du
            },
        )
    }

    /// `cap · tanh(x / cap)`.
    pub fn softcap(&self, cap: S) -> Result<Tensor<S>> {
        if !(cap > S::zero()) {
            return Err(invalid("softcap", format!("cap must be positive, got {cap}")));
        }
        unary(
            "softcap",
            self,
            move |x| cap * (x / cap).tanh(),
            move |x, _| {
                let th = (x / cap).tanh();
                S::one() - th * th
            },
        )
    }

    /// Rows of `table` (`[V, D]`) selected by `ids`, shaped `[lead.., D]`.
    pub fn embedding(table: &Tensor<S>, ids: &[usize], lead: &[usize]) -> Result<Tensor<S>> {
        let sh = table.shape();
        if sh.len() != 2 || numel(lead) != ids.len() {
            return Err(shape_err("embedding", (sh, lead, ids.len())));
        }
        let (v, d) = (sh[0], sh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("embedding", format!("id {bad} outside vocabulary of {v}")));
        }
        let src = table.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        drop(src);
        let ids = ids.to_vec();
        let mut shape = lead.to_vec();
        shape.push(d);
        Tensor::from_op(
            "embedding",
            shape,
            out,
            vec![table.clone()],
            Box::new(move |g, _, _| {
                let mut gt = vec![S::zero(); v * d];
                for (r, &i) in ids.iter().enumerate() {
                    gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
                vec![Some(gt)]
            }),
        )
    }

    /// `[B, L, D] -> [B, T, D]` where output row `(b, j)` copies input row
    /// `(b, index[b*T + j])`, or is zero when the index is `None`.
    pub fn gather_rows(&self, index: &[Option<usize>], t: usize) -> Result<Tensor<S>> {
        let sh = self.shape();
        if sh.len() != 3 || index.len() != sh[0] * t {
            return Err(shape_err("gather_rows", (sh, index.len(), t)));
        }
        let (b, l, d) = (sh[0], sh[1], sh[2]);
        if index.iter().flatten().any(|&i| i >= l) {
            return Err(invalid("gather_rows", format!("index outside length {l}")));
        }
        let src = self.data();
        let mut out = vec![S::zero(); b * t * d];
        for bi in 0..b {
            for j in 0..t {
                if let Some(i) = index[bi * t + j] {
                    let s = (bi * l + i) * d;
                    let o = (bi * t + j) * d;
                    out[o..o + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        drop(src);
        let index = index.to_vec();
        Tensor::from_op(
            "gather_rows",
            vec![b, t, d],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![S::zero(); b * l * d];
                for bi in 0..b {
                    for j in 0..t {
                        if let Some(i) = index[bi * t + j] {
                            let s = (bi * l + i) * d;
                            let o = (bi * t + j) * d;
                            gx[s..s + d].iter_mut().zip(&g[o..o + d]).for_each(|(a, &v)| *a += v);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Repeat `self` over new leading dims: `[inner..] -> [lead.., inner..]`.
    pub fn broadcast_leading(&self, lead: &[usize]) -> Result<Tensor<S>> {
        let reps = numel(lead);
        let n = self.numel();
        let src = self.data();
        let mut out = Vec::with_capacity(reps * n);
        for _ in 0..reps {
            out.extend_from_slice(&src);
        }
        drop(src);
        let mut shape = lead.to_vec();
        shape.extend_from_slice(self.shape());
        Tensor::from_op(
            "broadcast_leading",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![S::zero(); n];
                for chunk in g.chunks(n.max(1)) {
                    gx.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                }
                vec![Some(gx)]
            }),
        )
    }

    fn check_bnd(op: &'static str, x: &Tensor<S>, v: &Tensor<S>) -> Result<(usize, usize, usize)> {
        let (xs, vs) = (x.shape(), v.shape());
        if xs.len() != 3 || vs.len() != 2 || xs[0] != vs[0] || xs[2] != vs[1] {
            return Err(shape_err(op, (xs, vs)));
        }
        Ok((xs[0], xs[1], xs[2]))
    }

    /// `x[b, n, :] + v[b, :]`.
    pub fn add_bcast(&self, v: &Tensor<S>) -> Result<Tensor<S>> {
        let (b, n, d) = Self::check_bnd("add_bcast", self, v)?;
        let xs = self.data();
        let vs = v.data();
        let mut out = xs.clone();
        for bi in 0..b {
            for ni in 0..n {
                let o = (bi * n + ni) * d;
                out[o..o + d].iter_mut().zip(&vs[bi * d..(bi + 1) * d]).for_each(|(a, &c)| *a += c);
            }
        }
        drop((xs, vs));
        Tensor::from_op(
            "add_bcast",
            vec![b, n, d],
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |g, p, _| {
                let gv = wants(p, 1).then(|| sum_over_seq(g, b, n, d));
                vec![wants(p, 0).then(|| g.to_vec()), gv]
            }),
        )
    }

    /// AdaLN modulation `x · (1 + scale) + shift`, per batch element.
    pub fn modulate(&self, shift: &Tensor<S>, scale: &Tensor<S>) -> Result<Tensor<S>> {
        let (b, n, d) = Self::check_bnd("modulate", self, shift)?;
        Self::check_bnd("modulate", self, scale)?;
        let xs = self.data();
        let sh = shift.data();
        let sc = scale.data();
        let mut out = vec![S::zero(); b * n * d];
        for bi in 0..b {
            for ni in 0..n {
                let o = (bi * n + ni) * d;
                for k in 0..d {
                    out[o + k] = xs[o + k] * (S::one() + sc[bi * d + k]) + sh[bi * d + k];
                }
            }
        }
        drop((xs, sh, sc));
        Tensor::from_op(
            "modulate",
            vec![b, n, d],
            out,
            vec![self.clone(), shift.clone(), scale.clone()],
            Box::new(move |g, p, _| {
                let x = p[0].data();
                let sc = p[2].data();
                let gx = wants(p, 0).then(|| {
                    let mut gx = vec![S::zero(); b * n * d];
                    for bi in 0..b {
                        for ni in 0..n {
                            let o = (bi * n + ni) * d;
                            for k in 0..d {
                                gx[o + k] = g[o + k] * (S::one() + sc[bi * d + k]);
                            }
                        }
                    }
                    gx
                });
                let gshift = wants(p, 1).then(|| sum_over_seq(g, b, n, d));
                let gscale = wants(p, 2).then(|| {
                    let mut gs = vec![S::zero(); b * d];
                    for bi in 0..b {
                        for ni in 0..n {
                            let o = (bi * n + ni) * d;
                            for k in 0..d {
                                gs[bi * d + k] += g[o + k] * x[o + k];
                            }
                        }
                    }
                    gs
                });
                vec![gx, gshift, gscale]
            }),
        )
    }

    /// `x[b, n, :] * gate[b, :]`.
    pub fn gate(&self, gate: &Tensor<S>) -> Result<Tensor<S>> {
        let (b, n, d) = Self::check_bnd("gate", self, gate)?;
        let xs = self.data();
        let gs = gate.data();
        let mut out = vec![S::zero(); b * n * d];
        for bi in 0..b {
            for ni in 0..n {
                let o = (bi * n + ni) * d;
                for k in 0..d {
                    out[o + k] = xs[o + k] * gs[bi * d + k];
                }
            }
        }
        drop((xs, gs));
        Tensor::from_op(
            "gate",
            vec![b, n, d],
            out,
            vec![self.clone(), gate.clone()],
            Box::new(move |g, p, _| {
                let x = p[0].data();
                let gt = p[1].data();
                let gx = wants(p, 0).then(|| {
                    let mut gx = vec![S::zero(); b * n * d];
                    for bi in 0..b {
                        for ni in 0..n {
                            let o = (bi * n + ni) * d;
                            for k in 0..d {
                                gx[o + k] = g[o + k] * gt[bi * d + k];
                            }
                        }
                    }
                    gx
                });
                let gg = wants(p, 1).then(|| {
                    let mut gg = vec![S::zero(); b * d];
                    for bi in 0..b {
                        for ni in 0..n {
                            let o = (bi * n + ni) * d;
                            for k in 0..d {
                                gg[bi * d + k] += g[o + k] * x[o + k];
                            }
                        }
                    }
                    gg
                });
                vec![gx, gg]
            }),
        )
    }

    /// Per batch element, take the slab from `self` or from `other`.
    pub fn blend_batch(&self, other: &Tensor<S>, use_other: &[bool]) -> Result<Tensor<S>> {
        same_shape("blend_batch", self, other)?;
        let b = self.shape()[0];
        if use_other.len() != b {
            return Err(shape_err("blend_batch", (self.shape(), use_other.len())));
        }
        let per = self.numel() / b.max(1);
        let a = self.data();
        let o = other.data();
        let mut out = Vec::with_capacity(a.len());
        for (bi, &u) in use_other.iter().enumerate() {
            let src = if u { &o } else { &a };
            out.extend_from_slice(&src[bi * per..(bi + 1) * per]);
        }
        drop((a, o));
        let mask = use_other.to_vec();
        Tensor::from_op(
            "blend_batch",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let pick = |want_other: bool| {
                    let mut gx = vec![S::zero(); g.len()];
                    for (bi, &u) in mask.iter().enumerate() {
                        if u == want_other {
                            gx[bi * per..(bi + 1) * per].copy_from_slice(&g[bi * per..(bi + 1) * per]);
                        }
                    }
                    gx
                };
                vec![wants(p, 0).then(|| pick(false)), wants(p, 1).then(|| pick(true))]
            }),
        )
    }

    /// Width-3 sliding window with zero padding: `[B, N, C] -> [B, N, 3C]`,
    /// output row `j` holds input rows `j-1, j, j+1`.
    pub fn unfold3(&self) -> Result<Tensor<S>> {
        let sh = self.shape();
        if sh.len() != 3 {
            return Err(shape_err("unfold3", sh));
        }
        let (b, n, c) = (sh[0], sh[1], sh[2]);
        let src = self.data();
        let mut out = vec![S::zero(); b * n * 3 * c];
        for bi in 0..b {
            for j in 0..n {
                for (w, off) in [-1isize, 0, 1].iter().enumerate() {
                    let jj = j as isize + off;
                    if jj < 0 || jj >= n as isize {
                        continue;
                    }
                    let s = (bi * n + jj as usize) * c;
                    let o = (bi * n + j) * 3 * c + w * c;
                    out[o..o + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        drop(src);
        Tensor::from_op(
            "unfold3",
            vec![b, n, 3 * c],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![S::zero(); b * n * c];
                for bi in 0..b {
                    for j in 0..n {
                        for (w, off) in [-1isize, 0, 1].iter().enumerate() {
                            let jj = j as isize + off;
                            if jj < 0 || jj >= n as isize {
                                continue;
                            }
                            let s = (bi * n + jj as usize) * c;
                            let o = (bi * n + j) * 3 * c + w * c;
                            gx[s..s + c].iter_mut().zip(&g[o..o + c]).for_each(|(a, &v)| *a += v);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

fn sum_over_seq<S: Real>(g: &[S], b: usize, n: usize, d: usize) -> Vec<S> {
    let mut out = vec![S::zero(); b * d];
    for bi in 0..b {
        for ni in 0..n {
            let o = (bi * n + ni) * d;
            out[bi * d..(bi + 1) * d].iter_mut().zip(&g[o..o + d]).for_each(|(a, &v)| *a += v);
        }
    }
    out
}

pub(crate) fn softmax_row<S: Real>(row: &[S], mask: Option<&[S]>, out: &mut [S]) {
    let mut max = S::neg_infinity();
    for (i, &v) in row.iter().enumerate() {
        let z = v + mask.map_or(S::zero(), |m| m[i]);
        out[i] = z;
        if z > max {
            max = z;
        }
    }
    let mut total = S::zero();
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    let inv = S::one() / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&i).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_symmetric() {
        let x = t(&[2], &[0.0, 0.0]);
        assert_eq!(x.softmax(None).unwrap().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_excludes_entries() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let mask = [0.0, MASK_SENTINEL, 0.0];
        let y = x.softmax(Some(&mask)).unwrap().to_vec();
        assert_eq!(y[1], 0.0);
        assert!((y[0] + y[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t(&[1, 4], &[3.0; 4]);
        assert!(x.layer_norm(1e-5).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::<f64>::param(&[1], vec![3.0]).unwrap();
        x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(&[1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap().sum().unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn softcap_values() {
        let x = t(&[3], &[0.0, 1e6, 70.0]);
        let y = x.softcap(70.0).unwrap().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 70.0).abs() < 1e-9);
        assert!((y[2] - 70.0 * 1f64.tanh()).abs() < 1e-12);
        assert!((y[2] - 53.3116).abs() < 1e-4);
        assert!(x.softcap(0.0).is_err());
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let x = t(&[1], &[1e4]);
        assert!(matches!(x.exp(), Err(crate::numerics::TensorError::NonFinite { .. })));
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 1, 2], &[5.0, 6.0]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert_eq!(c.slice(1, 0, 2).unwrap().to_vec(), a.to_vec());
        assert_eq!(c.slice(1, 2, 1).unwrap().to_vec(), vec![5.0, 6.0]);
    }

    #[test]
    fn gather_rows_repeats_tokens() {
        let x = t(&[1, 3, 1], &[1.0, 2.0, 3.0]);
        let idx = [Some(0), Some(0), Some(1), Some(2), Some(2), Some(2), None];
        let y = x.gather_rows(&idx, 7).unwrap().to_vec();
        assert_eq!(y, vec![1.0, 1.0, 2.0, 3.0, 3.0, 3.0, 0.0]);
    }

    #[test]
    fn unfold3_pads_with_zeros() {
        let x = t(&[1, 2, 1], &[1.0, 2.0]);
        assert_eq!(x.unfold3().unwrap().to_vec(), vec![0.0, 1.0, 2.0, 1.0, 2.0, 0.0]);
    }
}
