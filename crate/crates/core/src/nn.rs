//! Parameterized building blocks shared by the encoders, decoders and the
//! super-resolution model.

use crate::numerics::{CounterRng, Real, Result, Tensor, ATTN_SOFTCAP, LN_EPS, MASK_SENTINEL};

#[derive(Debug, Clone)]
pub struct NamedParam<S: Real> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Anything owning trainable tensors. `visit` must enumerate parameters in
/// a fixed order; checkpoints and optimizer state rely on it.
pub trait Module<S: Real> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>);

    fn named_params(&self) -> Vec<NamedParam<S>> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params(&self) -> Vec<Tensor<S>> {
        self.named_params().into_iter().map(|p| p.tensor).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push<S: Real>(out: &mut Vec<NamedParam<S>>, prefix: &str, name: &str, t: &Tensor<S>) {
    out.push(NamedParam {
        name: scoped(prefix, name),
        tensor: t.clone(),
    });
}

/// Deterministic parameter initializer. Values are drawn in `f64` and
/// rounded, so `f32` and `f64` models built from the same seed agree.
pub struct Init<'a> {
    rng: &'a mut CounterRng,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut CounterRng) -> Self {
        Self { rng }
    }

    pub fn normal<S: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let n = shape.iter().product();
        let v = (0..n).map(|_| S::lit(self.rng.normal() * std)).collect();
        Tensor::param(shape, v).expect("init shape")
    }

    pub fn zeros<S: Real>(&mut self, shape: &[usize]) -> Tensor<S> {
        Tensor::param(shape, vec![S::zero(); shape.iter().product()]).expect("init shape")
    }
}

/// Randomize every parameter (used to break zero-init symmetry in checks).
pub fn perturb_params<S: Real>(module: &impl Module<S>, rng: &mut CounterRng, std: f64) {
    for p in module.params() {
        p.update_data(|d| d.iter_mut().for_each(|v| *v += S::lit(rng.normal() * std)));
    }
}

/// Additive `[B, N]` key mask: valid prefix of each row open, rest closed.
pub fn prefix_mask<S: Real>(lengths: &[usize], n: usize) -> Vec<S> {
    let closed = S::lit(MASK_SENTINEL);
    lengths
        .iter()
        .flat_map(|&len| (0..n).map(move |j| if j < len { S::zero() } else { closed }))
        .collect()
}

pub fn positions(n: usize) -> Vec<Option<usize>> {
    (0..n).map(Some).collect()
}

#[derive(Debug, Clone)]
pub struct Linear<S: Real> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Real> Linear<S> {
    pub fn new(init: &mut Init<'_>, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: init.normal(&[d_in, d_out], 1.0 / (d_in as f64).sqrt()),
            bias: bias.then(|| init.zeros(&[d_out])),
        }
    }

    pub fn zeroed(init: &mut Init<'_>, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: init.zeros(&[d_in, d_out]),
            bias: Some(init.zeros(&[d_out])),
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }
}

impl<S: Real> Module<S> for Linear<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        push(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push(out, prefix, "bias", b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp<S: Real> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Real> Mlp<S> {
    pub fn new(init: &mut Init<'_>, d: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(init, d, hidden, true),
            fc2: Linear::new(init, hidden, d_out, true),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

impl<S: Real> Module<S> for Mlp<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.fc1.visit(&scoped(prefix, "fc1"), out);
        self.fc2.visit(&scoped(prefix, "fc2"), out);
    }
}

/// Sinusoidal features of flow time, `[B, dim]`.
pub fn sinusoidal<S: Real>(t: &[S], dim: usize) -> Result<Tensor<S>> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let x = ti.as_f64() * 1000.0;
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push(S::lit((x * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push(S::lit((x * freq).cos()));
        }
    }
    Tensor::new(&[t.len(), 2 * half], v)
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding<S: Real> {
    pub freq_dim: usize,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Real> TimeEmbedding<S> {
    pub fn new(init: &mut Init<'_>, freq_dim: usize, d: usize) -> Self {
        Self {
            freq_dim,
            fc1: Linear::new(init, freq_dim, d, true),
            fc2: Linear::new(init, d, d, true),
        }
    }

    pub fn forward(&self, t: &[S]) -> Result<Tensor<S>> {
        let f = sinusoidal(t, self.freq_dim)?;
        self.fc2.forward(&self.fc1.forward(&f)?.silu()?)
    }
}

impl<S: Real> Module<S> for TimeEmbedding<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.fc1.visit(&scoped(prefix, "fc1"), out);
        self.fc2.visit(&scoped(prefix, "fc2"), out);
    }
}

/// Zero-initialized projection of a conditioning vector into `chunks`
/// per-channel modulation vectors (shift/scale/gate), so conditioning
/// starts as the identity.
#[derive(Debug, Clone)]
pub struct Modulation<S: Real> {
    pub proj: Linear<S>,
    pub chunks: usize,
    pub dim: usize,
}

impl<S: Real> Modulation<S> {
    pub fn new(init: &mut Init<'_>, cond_dim: usize, dim: usize, chunks: usize) -> Self {
        Self {
            proj: Linear::zeroed(init, cond_dim, dim * chunks),
            chunks,
            dim,
        }
    }

    pub fn forward(&self, cond: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let m = self.proj.forward(&cond.silu()?)?;
        (0..self.chunks).map(|i| m.slice(1, i * self.dim, self.dim)).collect()
    }
}

impl<S: Real> Module<S> for Modulation<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.proj.visit(&scoped(prefix, "proj"), out);
    }
}

/// Query/key/value projections with per-head rotary encoding.
#[derive(Debug, Clone)]
pub struct Qkv<S: Real> {
    pub proj: Linear<S>,
    pub heads: usize,
    pub dim: usize,
}

impl<S: Real> Qkv<S> {
    pub fn new(init: &mut Init<'_>, dim: usize, heads: usize) -> Self {
        Self {
            proj: Linear::new(init, dim, 3 * dim, true),
            heads,
            dim,
        }
    }

    pub fn forward(&self, x: &Tensor<S>, positions: &[Option<usize>]) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
        let qkv = self.proj.forward(x)?;
        let d = self.dim;
        let q = qkv.slice(2, 0, d)?.rope(self.heads, positions)?;
        let k = qkv.slice(2, d, d)?.rope(self.heads, positions)?;
        let v = qkv.slice(2, 2 * d, d)?;
        Ok((q, k, v))
    }
}

impl<S: Real> Module<S> for Qkv<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.proj.visit(&scoped(prefix, "proj"), out);
    }
}

/// Softcapped multi-head attention.
pub fn attend<S: Real>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, heads: usize, key_mask: Option<&[S]>) -> Result<Tensor<S>> {
    Tensor::attention(q, k, v, heads, key_mask, Some(S::lit(ATTN_SOFTCAP)))
}

pub fn ln<S: Real>(x: &Tensor<S>) -> Result<Tensor<S>> {
    x.layer_norm(S::lit(LN_EPS))
}

/// Pre-norm transformer block with optional AdaLN conditioning (used by the
/// text and prompt encoders).
#[derive(Debug, Clone)]
pub struct EncoderBlock<S: Real> {
    pub qkv: Qkv<S>,
    pub out: Linear<S>,
    pub mlp: Mlp<S>,
    pub modulation: Option<Modulation<S>>,
}

impl<S: Real> EncoderBlock<S> {
    pub fn new(init: &mut Init<'_>, dim: usize, heads: usize, ffn_mult: usize, cond_dim: Option<usize>) -> Self {
        Self {
            qkv: Qkv::new(init, dim, heads),
            out: Linear::new(init, dim, dim, true),
            mlp: Mlp::new(init, dim, dim * ffn_mult, dim),
            modulation: cond_dim.map(|c| Modulation::new(init, c, dim, 4)),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<S>,
        cond: Option<&Tensor<S>>,
        positions: &[Option<usize>],
        key_mask: Option<&[S]>,
    ) -> Result<Tensor<S>> {
        let mods = match (&self.modulation, cond) {
            (Some(m), Some(c)) => Some(m.forward(c)?),
            _ => None,
        };
        let mut h = ln(x)?;
        if let Some(m) = &mods {
            h = h.modulate(&m[0], &m[1])?;
        }
        let (q, k, v) = self.qkv.forward(&h, positions)?;
        let a = attend(&q, &k, &v, self.qkv.heads, key_mask)?;
        let x = x.add(&self.out.forward(&a)?)?;
        let mut h = ln(&x)?;
        if let Some(m) = &mods {
            h = h.modulate(&m[2], &m[3])?;
        }
        x.add(&self.mlp.forward(&h)?)
    }
}

impl<S: Real> Module<S> for EncoderBlock<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.qkv.visit(&scoped(prefix, "qkv"), out);
        self.out.visit(&scoped(prefix, "out"), out);
        self.mlp.visit(&scoped(prefix, "mlp"), out);
        if let Some(m) = &self.modulation {
            m.visit(&scoped(prefix, "mod"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_shapes_and_names() {
        let mut rng = CounterRng::new(1);
        let mut init = Init::new(&mut rng);
        let l: Linear<f64> = Linear::new(&mut init, 3, 5, true);
        let x = Tensor::from_f64(&[2, 4, 3], &[0.1; 24]).unwrap();
        assert_eq!(l.forward(&x).unwrap().shape(), &[2, 4, 5]);
        let names: Vec<_> = l.named_params().into_iter().map(|p| p.name).collect();
        assert_eq!(names, vec!["weight", "bias"]);
    }

    #[test]
    fn f32_and_f64_inits_agree() {
        let mut r1 = CounterRng::new(9);
        let mut r2 = CounterRng::new(9);
        let a: Linear<f32> = Linear::new(&mut Init::new(&mut r1), 4, 4, false);
        let b: Linear<f64> = Linear::new(&mut Init::new(&mut r2), 4, 4, false);
        for (x, y) in a.weight.to_vec().iter().zip(b.weight.to_vec()) {
            assert_eq!(*x, y as f32);
        }
    }

    #[test]
    fn zero_modulation_is_identity() {
        let mut rng = CounterRng::new(2);
        let mut init = Init::new(&mut rng);
        let m: Modulation<f64> = Modulation::new(&mut init, 3, 4, 2);
        let c = Tensor::from_f64(&[2, 3], &[1.0; 6]).unwrap();
        for part in m.forward(&c).unwrap() {
            assert!(part.to_vec().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn prefix_mask_layout() {
        let m: Vec<f64> = prefix_mask(&[1, 2], 3);
        assert_eq!(m[0], 0.0);
        assert_eq!(m[1], MASK_SENTINEL);
        assert_eq!(m[4], 0.0);
        assert_eq!(m[5], MASK_SENTINEL);
    }
}
