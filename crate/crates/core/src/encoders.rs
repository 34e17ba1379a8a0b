//! Text and prompt encoders, prompt pooling, duration prediction and the
//! token→frame alignment helpers.

use crate::nn::{positions, prefix_mask, scoped, EncoderBlock, Init, Linear, Module, NamedParam};
use crate::numerics::{invalid, CounterRng, Real, Result, Tensor};

/// Frames per "second" of the toy feature stream.
pub const FRAMES_PER_SECOND: usize = 8;
/// Prompt crop bounds in seconds.
pub const PROMPT_MIN_SECONDS: usize = 1;
pub const PROMPT_MAX_SECONDS: usize = 6;
/// Value written into masked target spans.
pub const MASK_VALUE: f64 = 0.0;

/// Right-padded token ids of a batch, `[B, L_max]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || max_len == 0 {
            return Err(invalid("token_batch", "empty token sequence"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * max_len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, max_len - s.len()));
        }
        Ok(Self {
            ids,
            lengths: seqs.iter().map(Vec::len).collect(),
            max_len,
        })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// Token embedding plus self-attention layers, AdaLN-conditioned on a
/// style/language vector.
#[derive(Debug, Clone)]
pub struct TextEncoder<S: Real> {
    pub embed: Tensor<S>,
    pub lang: Tensor<S>,
    pub style: Linear<S>,
    pub blocks: Vec<EncoderBlock<S>>,
    pub heads: usize,
}

impl<S: Real> TextEncoder<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(init: &mut Init<'_>, vocab: usize, n_lang: usize, style_dim: usize, d: usize, heads: usize, layers: usize, ffn_mult: usize) -> Self {
        Self {
            embed: init.normal(&[vocab, d], 1.0),
            lang: init.normal(&[n_lang, d], 1.0),
            style: Linear::new(init, style_dim, d, true),
            blocks: (0..layers).map(|_| EncoderBlock::new(init, d, heads, ffn_mult, Some(d))).collect(),
            heads,
        }
    }

    pub fn vocab(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn n_lang(&self) -> usize {
        self.lang.shape()[0]
    }

    /// Style/language conditioning vector `[B, d]`.
    pub fn cond(&self, style: &Tensor<S>, lang: &[usize]) -> Result<Tensor<S>> {
        if let Some(&l) = lang.iter().find(|&&l| l >= self.n_lang()) {
            return Err(invalid("text_encode", format!("language id {l} unknown ({} languages)", self.n_lang())));
        }
        let le = Tensor::embedding(&self.lang, lang, &[lang.len()])?;
        self.style.forward(style)?.add(&le)
    }

    /// Per-token features `[B, L, d]` and the conditioning vector.
    pub fn forward(&self, tokens: &TokenBatch, style: &Tensor<S>, lang: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let b = tokens.batch();
        if style.shape().first() != Some(&b) || lang.len() != b {
            return Err(invalid("text_encode", "style/lang batch does not match tokens"));
        }
        if let Some(&id) = tokens.ids.iter().find(|&&i| i >= self.vocab()) {
            return Err(invalid("text_encode", format!("token id {id} outside vocabulary {}", self.vocab())));
        }
        let cond = self.cond(style, lang)?;
        let mut h = Tensor::embedding(&self.embed, &tokens.ids, &[b, tokens.max_len])?;
        let mask = prefix_mask::<S>(&tokens.lengths, tokens.max_len);
        let pos = positions(tokens.max_len);
        for blk in &self.blocks {
            h = blk.forward(&h, Some(&cond), &pos, Some(&mask))?;
        }
        Ok((h, cond))
    }
}

impl<S: Real> Module<S> for TextEncoder<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        crate::nn::push(out, prefix, "embed", &self.embed);
        crate::nn::push(out, prefix, "lang", &self.lang);
        self.style.visit(&scoped(prefix, "style"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&scoped(prefix, &format!("block{i}")), out);
        }
    }
}

/// Frame projection followed by unconditioned self-attention layers.
#[derive(Debug, Clone)]
pub struct PromptEncoder<S: Real> {
    pub input: Linear<S>,
    pub blocks: Vec<EncoderBlock<S>>,
}

impl<S: Real> PromptEncoder<S> {
    pub fn new(init: &mut Init<'_>, n_in: usize, d: usize, heads: usize, layers: usize, ffn_mult: usize) -> Self {
        Self {
            input: Linear::new(init, n_in, d, true),
            blocks: (0..layers).map(|_| EncoderBlock::new(init, d, heads, ffn_mult, None)).collect(),
        }
    }

    /// `frames` is `[B, T_p, n_in]`; frames past `lengths[b]` are ignored.
    pub fn forward(&self, frames: &Tensor<S>, lengths: &[usize]) -> Result<Tensor<S>> {
        let sh = frames.shape();
        if sh.len() != 3 || lengths.len() != sh[0] || lengths.iter().any(|&l| l == 0 || l > sh[1]) {
            return Err(invalid("prompt_encode", format!("bad prompt shape {sh:?} / lengths {lengths:?}")));
        }
        let mask = prefix_mask::<S>(lengths, sh[1]);
        let pos = positions(sh[1]);
        let mut h = self.input.forward(frames)?;
        for blk in &self.blocks {
            h = blk.forward(&h, None, &pos, Some(&mask))?;
        }
        Ok(h)
    }
}

impl<S: Real> Module<S> for PromptEncoder<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.input.visit(&scoped(prefix, "input"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&scoped(prefix, &format!("block{i}")), out);
        }
    }
}

/// `K` learned queries cross-attending over encoded prompt frames.
#[derive(Debug, Clone)]
pub struct QueryPool<S: Real> {
    pub queries: Tensor<S>,
    pub q: Linear<S>,
    pub kv: Linear<S>,
    pub out: Linear<S>,
    pub heads: usize,
}

impl<S: Real> QueryPool<S> {
    pub fn new(init: &mut Init<'_>, k: usize, d: usize, d_out: usize, heads: usize) -> Self {
        Self {
            queries: init.normal(&[k, d], 1.0),
            q: Linear::new(init, d, d, true),
            kv: Linear::new(init, d, 2 * d, true),
            out: Linear::new(init, d, d_out, true),
            heads,
        }
    }

    pub fn k(&self) -> usize {
        self.queries.shape()[0]
    }

    /// `[B, T_p, d] -> [B, K, d_out]` regardless of `T_p`.
    pub fn forward(&self, encoded: &Tensor<S>, lengths: &[usize]) -> Result<Tensor<S>> {
        let sh = encoded.shape();
        let (b, n, d) = (sh[0], sh[1], sh[2]);
        let q = self.q.forward(&self.queries.broadcast_leading(&[b])?)?;
        let kv = self.kv.forward(encoded)?;
        let mask = prefix_mask::<S>(lengths, n);
        let a = crate::nn::attend(&q, &kv.slice(2, 0, d)?, &kv.slice(2, d, d)?, self.heads, Some(&mask))?;
        self.out.forward(&a)
    }

    /// Pooling weights `[B, H, K, T_p]`, for inspection.
    pub fn weights(&self, encoded: &Tensor<S>, lengths: &[usize]) -> Result<Vec<S>> {
        let sh = encoded.shape();
        let q = self.q.forward(&self.queries.broadcast_leading(&[sh[0]])?)?;
        let k = self.kv.forward(encoded)?.slice(2, 0, sh[2])?;
        let mask = prefix_mask::<S>(lengths, sh[1]);
        crate::numerics::attention_probs(&q, &k, self.heads, Some(&mask), Some(S::lit(crate::numerics::ATTN_SOFTCAP)))
    }
}

impl<S: Real> Module<S> for QueryPool<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        crate::nn::push(out, prefix, "queries", &self.queries);
        self.q.visit(&scoped(prefix, "q"), out);
        self.kv.visit(&scoped(prefix, "kv"), out);
        self.out.visit(&scoped(prefix, "out"), out);
    }
}

/// Self-attention pooling to a single fixed-size embedding.
#[derive(Debug, Clone)]
pub struct AttnPool<S: Real> {
    pub hidden: Linear<S>,
    pub score: Linear<S>,
    pub out: Linear<S>,
}

impl<S: Real> AttnPool<S> {
    pub fn new(init: &mut Init<'_>, d: usize, d_att: usize, d_out: usize) -> Self {
        Self {
            hidden: Linear::new(init, d, d_att, true),
            score: Linear::new(init, d_att, 1, true),
            out: Linear::new(init, d, d_out, true),
        }
    }

    /// Softmax weights over valid frames, `[B, T_p]`.
    pub fn weights(&self, encoded: &Tensor<S>, lengths: &[usize]) -> Result<Tensor<S>> {
        let sh = encoded.shape();
        let s = self.score.forward(&self.hidden.forward(encoded)?.tanh()?)?;
        let mask = prefix_mask::<S>(lengths, sh[1]);
        s.reshape(&[sh[0], sh[1]])?.softmax(Some(&mask))
    }

    /// `[B, T_p, d] -> [B, d_out]`.
    pub fn forward(&self, encoded: &Tensor<S>, lengths: &[usize]) -> Result<Tensor<S>> {
        let sh = encoded.shape();
        let w = self.weights(encoded, lengths)?.reshape(&[sh[0], 1, sh[1]])?;
        let pooled = w.bmm(encoded)?.reshape(&[sh[0], sh[2]])?;
        self.out.forward(&pooled)
    }
}

impl<S: Real> Module<S> for AttnPool<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.hidden.visit(&scoped(prefix, "hidden"), out);
        self.score.visit(&scoped(prefix, "score"), out);
        self.out.visit(&scoped(prefix, "out"), out);
    }
}

/// Two width-3 convolutions over token features, predicting log-durations.
#[derive(Debug, Clone)]
pub struct DurationPredictor<S: Real> {
    pub conv1: Linear<S>,
    pub conv2: Linear<S>,
    pub out: Linear<S>,
}

impl<S: Real> DurationPredictor<S> {
    pub fn new(init: &mut Init<'_>, d: usize, hidden: usize) -> Self {
        Self {
            conv1: Linear::new(init, 3 * d, hidden, true),
            conv2: Linear::new(init, 3 * hidden, hidden, true),
            out: Linear::new(init, hidden, 1, true),
        }
    }

    /// Log-durations `[B, L]`; padded positions are zeroed before each
    /// convolution so they do not leak into valid neighbours.
    pub fn forward(&self, features: &Tensor<S>, lengths: &[usize]) -> Result<Tensor<S>> {
        let sh = features.shape();
        let (b, l) = (sh[0], sh[1]);
        let keep = |c: usize| -> Result<Tensor<S>> {
            let v = lengths
                .iter()
                .flat_map(|&n| (0..l).flat_map(move |j| std::iter::repeat_n(if j < n { S::one() } else { S::zero() }, c)))
                .collect();
            Tensor::new(&[b, l, c], v)
        };
        let h = features.mul(&keep(sh[2])?)?;
        let h = self.conv1.forward(&h.unfold3()?)?.gelu()?;
        let h = h.mul(&keep(h.shape()[2])?)?;
        let h = self.conv2.forward(&h.unfold3()?)?.gelu()?;
        self.out.forward(&h)?.reshape(&[b, l])
    }
}

impl<S: Real> Module<S> for DurationPredictor<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.conv1.visit(&scoped(prefix, "conv1"), out);
        self.conv2.visit(&scoped(prefix, "conv2"), out);
        self.out.visit(&scoped(prefix, "out"), out);
    }
}

/// Mean squared error between predicted log-durations and `log` of the
/// ground-truth frame counts over valid tokens.
pub fn duration_loss<S: Real>(log_pred: &Tensor<S>, durations: &[Vec<usize>]) -> Result<Tensor<S>> {
    let (b, l) = (log_pred.shape()[0], log_pred.shape()[1]);
    if durations.len() != b || durations.iter().any(|d| d.len() > l) {
        return Err(invalid("duration_loss", "durations do not match prediction shape"));
    }
    let mut target = vec![S::zero(); b * l];
    let mut weight = vec![S::zero(); b * l];
    let mut count = 0usize;
    for (bi, d) in durations.iter().enumerate() {
        for (j, &n) in d.iter().enumerate() {
            if n == 0 {
                return Err(invalid("duration_loss", "zero ground-truth duration"));
            }
            target[bi * l + j] = S::lit((n as f64).ln());
            weight[bi * l + j] = S::one();
            count += 1;
        }
    }
    let diff = log_pred.sub(&Tensor::new(&[b, l], target)?)?;
    diff.mul(&diff)?.mul(&Tensor::new(&[b, l], weight)?)?.sum()?.scale(S::lit(1.0 / count.max(1) as f64))
}

/// Integer frame counts from log-durations by cumulative rounding, each at
/// least one frame.
pub fn durations_from_log(log_durations: &[f64]) -> Vec<usize> {
    let mut acc = 0.0;
    let mut prev = 0i64;
    log_durations
        .iter()
        .map(|&ld| {
            acc += ld.exp();
            let r = acc.round() as i64;
            let d = (r - prev).max(1);
            prev += d;
            d as usize
        })
        .collect()
}

/// Token-to-frame map for [`length_regulate`]: row `(b, j)` reads token
/// `index[b*T + j]`.
pub fn regulation_index(durations: &[Vec<usize>], t_max: usize) -> Result<Vec<Option<usize>>> {
    let mut index = vec![None; durations.len() * t_max];
    for (bi, d) in durations.iter().enumerate() {
        let total: usize = d.iter().sum();
        if total > t_max {
            return Err(invalid("length_regulate", format!("{total} frames exceed {t_max}")));
        }
        let mut j = 0;
        for (tok, &n) in d.iter().enumerate() {
            for _ in 0..n {
                index[bi * t_max + j] = Some(tok);
                j += 1;
            }
        }
    }
    Ok(index)
}

/// Repeat each token's feature vector by its duration: `[B, L, d]` to
/// `[B, T_max, d]` with `T_max` the longest total, plus per-sample frames.
pub fn length_regulate<S: Real>(features: &Tensor<S>, durations: &[Vec<usize>]) -> Result<(Tensor<S>, Vec<usize>)> {
    let sh = features.shape();
    if sh.len() != 3 || durations.len() != sh[0] || durations.iter().any(|d| d.len() > sh[1]) {
        return Err(invalid("length_regulate", format!("{} duration rows for features {:?}", durations.len(), sh)));
    }
    let frames: Vec<usize> = durations.iter().map(|d| d.iter().sum()).collect();
    let t_max = frames.iter().copied().max().unwrap_or(0).max(1);
    let index = regulation_index(durations, t_max)?;
    Ok((features.gather_rows(&index, t_max)?, frames))
}

/// Pad `tokens` with `filler` up to `t` entries.
pub fn filler_expand(tokens: &[usize], t: usize, filler: usize) -> Result<Vec<usize>> {
    if tokens.len() > t {
        return Err(invalid("filler_expand", format!("{} tokens longer than {t} frames", tokens.len())));
    }
    let mut out = tokens.to_vec();
    out.resize(t, filler);
    Ok(out)
}

/// A prompt span cut out of a target and the masked remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCrop {
    pub start: usize,
    pub len: usize,
    /// `len × F` frames.
    pub prompt: Vec<f64>,
    /// `T × F` target with the span overwritten by [`MASK_VALUE`].
    pub masked_target: Vec<f64>,
    /// Per-frame flag, `true` inside the span.
    pub mask: Vec<bool>,
}

/// Crop a random span of `min..=max` frames (at most `T`) from a `T × F`
/// target. Returns `None` when the target is shorter than `min`.
pub fn crop_prompt_and_mask(frames: &[f64], channels: usize, rng: &mut CounterRng, min: usize, max: usize) -> Result<Option<PromptCrop>> {
    if channels == 0 || !frames.len().is_multiple_of(channels) || min == 0 || min > max {
        return Err(invalid("crop_prompt", format!("bad crop request {min}..={max} over {} values", frames.len())));
    }
    let t = frames.len() / channels;
    if t < min {
        return Ok(None);
    }
    let len = rng.range_inclusive(min, max.min(t));
    let start = rng.range_inclusive(0, t - len);
    let span = start * channels..(start + len) * channels;
    let prompt = frames[span.clone()].to_vec();
    let mut masked_target = frames.to_vec();
    masked_target[span].iter_mut().for_each(|v| *v = MASK_VALUE);
    let mask = (0..t).map(|j| j >= start && j < start + len).collect();
    Ok(Some(PromptCrop {
        start,
        len,
        prompt,
        masked_target,
        mask,
    }))
}
