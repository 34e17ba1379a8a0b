//! Toy 4× super-resolution flow: a 1-D signal is generated from its
//! stride-4 block averages and a pooled prompt embedding. The high-rate
//! target carries a style-dependent component at a quarter of the sample
//! rate, which block averaging removes exactly.

use crate::decoders::{entry, lookup_usize, Descriptor, FinalLayer, StreamBlock};
use crate::encoders::{AttnPool, PromptEncoder};
use crate::flowode::{initial_noise, sample_single, GuidedField, Solver};
use crate::nn::{positions, prefix_mask, scoped, EncoderBlock, Init, Linear, Module, NamedParam, TimeEmbedding};
use crate::numerics::{dft_magnitude, invalid, no_grad, CounterRng, Real, Result, Tensor, Window};
use crate::synthtask::{GeneratorSpec, SynthUtterance};

pub const SR_FACTOR: usize = 4;
pub const LSD_FRAME: usize = 64;
pub const LSD_HOP: usize = 32;
const LSD_FLOOR: f64 = 1e-10;

/// Fixed directions mapping style to the amplitude and phase of the
/// high-frequency component.
#[derive(Debug, Clone, PartialEq)]
pub struct SrTask {
    pub amp_dir: Vec<f64>,
    pub phase_dir: Vec<f64>,
}

impl SrTask {
    pub fn new(spec: &GeneratorSpec) -> Self {
        let mut rng = CounterRng::new(spec.seed).split(303);
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        Self {
            amp_dir: unit(rng.normal_vec(spec.style_dim)),
            phase_dir: unit(rng.normal_vec(spec.style_dim)),
        }
    }

    pub fn amplitude(&self, z: &[f64]) -> f64 {
        0.25 + 0.15 * dot(&self.amp_dir, z).tanh()
    }

    pub fn phase(&self, z: &[f64]) -> f64 {
        std::f64::consts::PI * dot(&self.phase_dir, z).tanh()
    }

    /// High-rate signal for a `T × F` frame matrix: smooth interpolation of
    /// channel 0 plus the style sinusoid at a quarter of the sample rate.
    pub fn high_rate(&self, frames: &[f64], n_mel: usize, z: &[f64]) -> Vec<f64> {
        let base: Vec<f64> = frames.chunks(n_mel).map(|f| f[0]).collect();
        let (a, phi) = (self.amplitude(z), self.phase(z));
        interpolate(&base, SR_FACTOR)
            .into_iter()
            .enumerate()
            .map(|(n, v)| v + a * (std::f64::consts::FRAC_PI_2 * n as f64 + phi).sin())
            .collect()
    }

    pub fn example(&self, utt: &SynthUtterance, n_mel: usize) -> SrExample {
        let high = self.high_rate(&utt.frames, n_mel, &utt.z);
        let prompt = self.high_rate(&utt.prompt_frames, n_mel, &utt.z);
        SrExample {
            low: block_average(&high, SR_FACTOR),
            high,
            prompt,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear interpolation between frame centres, clamped at the ends.
pub fn interpolate(base: &[f64], factor: usize) -> Vec<f64> {
    let t = base.len();
    (0..t * factor)
        .map(|n| {
            let pos = ((n as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (t - 1) as f64);
            let i = pos.floor() as usize;
            let j = (i + 1).min(t - 1);
            let w = pos - i as f64;
            base[i] * (1.0 - w) + base[j] * w
        })
        .collect()
}

pub fn block_average(signal: &[f64], factor: usize) -> Vec<f64> {
    signal.chunks(factor).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Zero-order hold: repeat each low-rate value `factor` times.
pub fn zero_order_hold(low: &[f64], factor: usize) -> Vec<f64> {
    low.iter().flat_map(|&v| std::iter::repeat_n(v, factor)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrExample {
    /// `T` block averages.
    pub low: Vec<f64>,
    /// `4T` target samples.
    pub high: Vec<f64>,
    /// High-rate prompt from a disjoint segment with the same style.
    pub prompt: Vec<f64>,
}

/// Log-spectral distance: mean over frames of the RMS over bins of the
/// difference of `log10(|X|² + 1e-10)`.
pub fn lsd(reference: &[f64], hypothesis: &[f64]) -> Result<f64> {
    if reference.len() != hypothesis.len() {
        return Err(invalid("lsd", format!("lengths {} vs {}", reference.len(), hypothesis.len())));
    }
    let r = dft_magnitude(reference, LSD_FRAME, LSD_HOP, Window::Rectangular)?;
    let h = dft_magnitude(hypothesis, LSD_FRAME, LSD_HOP, Window::Rectangular)?;
    let per_frame: Vec<f64> = r
        .iter()
        .zip(&h)
        .map(|(a, b)| {
            let ms = a
                .iter()
                .zip(b)
                .map(|(x, y)| ((x * x + LSD_FLOOR).log10() - (y * y + LSD_FLOOR).log10()).powi(2))
                .sum::<f64>()
                / a.len() as f64;
            ms.sqrt()
        })
        .collect();
    Ok(per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub hi_channels: usize,
    pub n_blocks: usize,
    pub prompt_dim: usize,
    pub prompt_model: usize,
    pub freq_dim: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn_mult: 2,
            hi_channels: 16,
            n_blocks: 2,
            prompt_dim: 16,
            prompt_model: 32,
            freq_dim: 64,
        }
    }
}

impl SrConfig {
    pub fn descriptor(&self) -> Descriptor {
        vec![
            entry("d_model", self.d_model),
            entry("heads", self.heads),
            entry("ffn_mult", self.ffn_mult),
            entry("hi_channels", self.hi_channels),
            entry("n_blocks", self.n_blocks),
            entry("prompt_dim", self.prompt_dim),
            entry("prompt_model", self.prompt_model),
            entry("freq_dim", self.freq_dim),
            entry("factor", SR_FACTOR),
            entry("full_scale", "prompt_dim=192 period_aware_estimator=absent"),
        ]
    }

    pub fn from_descriptor(d: &Descriptor) -> Result<Self> {
        if lookup_usize(d, "factor")? != SR_FACTOR {
            return Err(invalid("descriptor", "unsupported rate factor"));
        }
        let c = Self {
            d_model: lookup_usize(d, "d_model")?,
            heads: lookup_usize(d, "heads")?,
            ffn_mult: lookup_usize(d, "ffn_mult")?,
            hi_channels: lookup_usize(d, "hi_channels")?,
            n_blocks: lookup_usize(d, "n_blocks")?,
            prompt_dim: lookup_usize(d, "prompt_dim")?,
            prompt_model: lookup_usize(d, "prompt_model")?,
            freq_dim: lookup_usize(d, "freq_dim")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let heads_ok = |d: usize, h: usize| h > 0 && d.is_multiple_of(h) && (d / h).is_multiple_of(2);
        if !heads_ok(self.d_model, self.heads) || !heads_ok(self.prompt_model, 2) || self.hi_channels == 0 || !self.freq_dim.is_multiple_of(2) {
            return Err(invalid("sr_config", format!("inconsistent dimensions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SrModel<S: Real> {
    pub config: SrConfig,
    pub prompt_enc: PromptEncoder<S>,
    pub prompt_pool: AttnPool<S>,
    pub cond_in: Linear<S>,
    pub cond_block: EncoderBlock<S>,
    pub prompt_proj: Linear<S>,
    pub hi_in: Linear<S>,
    pub dblock: Linear<S>,
    pub time: TimeEmbedding<S>,
    pub blocks: Vec<StreamBlock<S>>,
    pub ublock: Linear<S>,
    pub head: FinalLayer<S>,
}

/// Conditioning-encoder activations for a batch, reused across steps.
#[derive(Debug, Clone)]
pub struct SrCondition<S: Real> {
    /// `[B, T_max, d]`.
    pub activations: Tensor<S>,
    pub frames: Vec<usize>,
}

impl<S: Real> SrModel<S> {
    pub fn new(config: SrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut rng = CounterRng::new(seed);
        let mut init = Init::new(&mut rng);
        Ok(Self {
            prompt_enc: PromptEncoder::new(&mut init, SR_FACTOR, c.prompt_model, 2, 1, c.ffn_mult),
            prompt_pool: AttnPool::new(&mut init, c.prompt_model, c.prompt_model, c.prompt_dim),
            cond_in: Linear::new(&mut init, 1, d, true),
            cond_block: EncoderBlock::new(&mut init, d, c.heads, c.ffn_mult, None),
            prompt_proj: Linear::zeroed(&mut init, c.prompt_dim, d),
            hi_in: Linear::new(&mut init, 1, c.hi_channels, true),
            dblock: Linear::new(&mut init, SR_FACTOR * c.hi_channels, d, true),
            time: TimeEmbedding::new(&mut init, c.freq_dim, d),
            blocks: (0..c.n_blocks).map(|_| StreamBlock::new(&mut init, d, c.heads, c.ffn_mult, d)).collect(),
            ublock: Linear::new(&mut init, d, SR_FACTOR * c.hi_channels, true),
            head: FinalLayer::new(&mut init, c.hi_channels, d, 1),
            config,
        })
    }

    /// Prompt embeddings `[B, prompt_dim]` from high-rate prompts framed
    /// into chunks of [`SR_FACTOR`] samples.
    pub fn prompt_embedding(&self, prompts: &[Vec<f64>]) -> Result<Tensor<S>> {
        let lens: Vec<usize> = prompts.iter().map(|p| p.len() / SR_FACTOR).collect();
        if lens.contains(&0) {
            return Err(invalid("sr_prompt", "prompt shorter than one frame"));
        }
        let t = lens.iter().copied().max().unwrap_or(1);
        let mut v = vec![S::zero(); prompts.len() * t * SR_FACTOR];
        for (b, p) in prompts.iter().enumerate() {
            for (i, x) in p.iter().take(lens[b] * SR_FACTOR).enumerate() {
                v[b * t * SR_FACTOR + i] = S::lit(*x);
            }
        }
        let frames = Tensor::new(&[prompts.len(), t, SR_FACTOR], v)?;
        let enc = self.prompt_enc.forward(&frames, &lens)?;
        self.prompt_pool.forward(&enc, &lens)
    }

    /// Encode block-averaged inputs and add the projected prompt embedding
    /// to every activation frame.
    pub fn condition(&self, low: &[Vec<f64>], prompt_emb: &Tensor<S>) -> Result<SrCondition<S>> {
        let frames: Vec<usize> = low.iter().map(Vec::len).collect();
        let b = low.len();
        if frames.contains(&0) || prompt_emb.shape() != [b, self.config.prompt_dim] {
            return Err(invalid("sr_field", "empty conditioning or prompt embedding shape mismatch"));
        }
        let t = frames.iter().copied().max().unwrap_or(1);
        let mut v = vec![S::zero(); b * t];
        for (bi, l) in low.iter().enumerate() {
            for (j, x) in l.iter().enumerate() {
                v[bi * t + j] = S::lit(*x);
            }
        }
        let x = Tensor::new(&[b, t, 1], v)?;
        let mask = prefix_mask::<S>(&frames, t);
        let h = self.cond_block.forward(&self.cond_in.forward(&x)?, None, &positions(t), Some(&mask))?;
        let activations = h.add_bcast(&self.prompt_proj.forward(prompt_emb)?)?;
        Ok(SrCondition { activations, frames })
    }

    /// Velocity over the high-rate signal `[B, 4·T_max]`.
    pub fn field(&self, cond: &SrCondition<S>, t: &[S], y_t: &Tensor<S>) -> Result<Tensor<S>> {
        let (b, tl) = (cond.activations.shape()[0], cond.activations.shape()[1]);
        if y_t.shape() != [b, SR_FACTOR * tl] || t.len() != b {
            return Err(invalid(
                "sr_field",
                format!("signal {:?} is not {}x the {} conditioning frames", y_t.shape(), SR_FACTOR, tl),
            ));
        }
        let c = self.config.hi_channels;
        let hi = self.hi_in.forward(&y_t.reshape(&[b, SR_FACTOR * tl, 1])?)?;
        let down = self.dblock.forward(&hi.reshape(&[b, tl, SR_FACTOR * c])?)?;
        let mut h = down.add(&cond.activations)?;
        let vec = self.time.forward(t)?;
        let mask = prefix_mask::<S>(&cond.frames, tl);
        let pos = positions(tl);
        for blk in &self.blocks {
            h = blk.forward(&h, &vec, &pos, &mask)?;
        }
        let up = self.ublock.forward(&h)?.reshape(&[b, SR_FACTOR * tl, c])?.add(&hi)?;
        self.head.forward(&up, &vec)?.reshape(&[b, SR_FACTOR * tl])
    }
}

impl<S: Real> Module<S> for SrModel<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.prompt_enc.visit(&scoped(prefix, "prompt_enc"), out);
        self.prompt_pool.visit(&scoped(prefix, "prompt_pool"), out);
        self.cond_in.visit(&scoped(prefix, "cond_in"), out);
        self.cond_block.visit(&scoped(prefix, "cond_block"), out);
        self.prompt_proj.visit(&scoped(prefix, "prompt_proj"), out);
        self.hi_in.visit(&scoped(prefix, "hi_in"), out);
        self.dblock.visit(&scoped(prefix, "dblock"), out);
        self.time.visit(&scoped(prefix, "time"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&scoped(prefix, &format!("block{i}")), out);
        }
        self.ublock.visit(&scoped(prefix, "ublock"), out);
        self.head.visit(&scoped(prefix, "head"), out);
    }
}

struct SrBound<'m, S: Real> {
    model: &'m SrModel<S>,
    cond: SrCondition<S>,
}

impl<S: Real> GuidedField<S> for SrBound<'_, S> {
    fn eval_cond(&self, t: S, x: &Tensor<S>) -> crate::flowode::Result<Tensor<S>> {
        let b = self.cond.frames.len();
        Ok(no_grad(|| self.model.field(&self.cond, &vec![t; b], x))?)
    }

    fn eval_pair(&self, t: S, x: &Tensor<S>) -> crate::flowode::Result<(Tensor<S>, Tensor<S>)> {
        let v = self.eval_cond(t, x)?;
        Ok((v.clone(), v))
    }
}

/// Midpoint sampling of normalized high-rate signals, one per conditioning
/// row; sample `ids[b]` selects its noise stream. Each output has exactly
/// four samples per conditioning frame.
pub fn sr_sample<S: Real>(
    model: &SrModel<S>,
    low: &[Vec<f64>],
    prompt_emb: &Tensor<S>,
    ids: &[u64],
    n_steps: usize,
    seed: u64,
) -> crate::flowode::Result<Vec<Vec<f64>>> {
    let cond = no_grad(|| model.condition(low, prompt_emb))?;
    let frames = cond.frames.clone();
    let hi: Vec<usize> = frames.iter().map(|f| f * SR_FACTOR).collect();
    let t_max = hi.iter().copied().max().unwrap_or(0);
    let x0 = initial_noise::<S>(seed, ids, &hi, t_max, 1)?.reshape(&[ids.len(), t_max])?;
    let bound = SrBound { model, cond };
    let y = sample_single(&bound, &x0, n_steps, 0.0, Solver::Midpoint)?;
    let v = y.to_f64_vec();
    Ok(hi.iter().enumerate().map(|(b, &n)| v[b * t_max..b * t_max + n].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::perturb_params;
    use crate::synthtask::make_corpus;

    fn tiny() -> SrConfig {
        SrConfig {
            d_model: 8,
            heads: 2,
            hi_channels: 3,
            n_blocks: 1,
            prompt_dim: 4,
            prompt_model: 4,
            freq_dim: 8,
            ..SrConfig::default()
        }
    }

    #[test]
    fn lsd_examples() {
        let mut rng = CounterRng::new(1);
        let x: Vec<f64> = rng.normal_vec(512);
        assert_eq!(lsd(&x, &x).unwrap(), 0.0);
        let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let d = lsd(&x, &doubled).unwrap();
        assert!((d - 4f64.log10()).abs() < 0.05 * 4f64.log10(), "{d}");
        assert!((lsd(&doubled, &x).unwrap() - d).abs() < 1e-12);
        assert!(lsd(&x, &x[..500]).is_err());
    }

    #[test]
    fn block_average_removes_quarter_rate_tone() {
        let spec = GeneratorSpec::new(3);
        let task = SrTask::new(&spec);
        let c = make_corpus(&spec, 2, 1).unwrap();
        let u = &c.train[0];
        let ex = task.example(u, 8);
        let base: Vec<f64> = u.frames.chunks(8).map(|f| f[0]).collect();
        let smooth = block_average(&interpolate(&base, 4), 4);
        assert_eq!(ex.high.len(), 4 * ex.low.len());
        for (a, b) in ex.low.iter().zip(&smooth) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rate_contract_and_zero_prompt() {
        let mut rng = CounterRng::new(2);
        let m: SrModel<f64> = SrModel::new(tiny(), 1).unwrap();
        let low = vec![rng.normal_vec(5), rng.normal_vec(3)];
        let zero = Tensor::zeros(&[2, 4]);
        let other = Tensor::from_f64(&[2, 4], &rng.normal_vec(8)).unwrap();
        let a = m.condition(&low, &zero).unwrap().activations.to_vec();
        let b = m.condition(&low, &other).unwrap().activations.to_vec();
        assert_eq!(a, b);
        perturb_params(&m, &mut rng, 0.1);
        let cond = m.condition(&low, &other).unwrap();
        let y = Tensor::from_f64(&[2, 20], &rng.normal_vec(40)).unwrap();
        assert_eq!(m.field(&cond, &[0.2, 0.7], &y).unwrap().shape(), &[2, 20]);
        let bad = Tensor::from_f64(&[2, 19], &rng.normal_vec(38)).unwrap();
        assert!(m.field(&cond, &[0.2, 0.7], &bad).is_err());
        let out = sr_sample(&m, &low, &other, &[0, 1], 4, 9).unwrap();
        assert_eq!(out[0].len(), 20);
        assert_eq!(out[1].len(), 12);
        assert_eq!(out, sr_sample(&m, &low, &other, &[0, 1], 4, 9).unwrap());
    }
}
