//! The two vector-field networks. The duration-guided (DG) decoder expands
//! prompt-enriched text by explicit durations and runs dual-stream then
//! merged-stream blocks; the alignment-free (AF) decoder runs a DiT stack
//! over filler-expanded text concatenated with the noisy features.

use std::fmt;

use crate::cfm::NullMask;
use crate::encoders::{durations_from_log, filler_expand, length_regulate, AttnPool, DurationPredictor, PromptEncoder, QueryPool, TextEncoder, TokenBatch};
use crate::flowode::GuidedField;
use crate::nn::{attend, ln, positions, prefix_mask, push, scoped, Init, Linear, Mlp, Modulation, Module, NamedParam, Qkv, TimeEmbedding};
use crate::numerics::{attention_probs, invalid, CounterRng, Real, Result, Tensor, ATTN_SOFTCAP, MASK_SENTINEL};

/// Architecture settings as ordered `key = value` pairs.
pub type Descriptor = Vec<(String, String)>;

fn lookup<'a>(d: &'a Descriptor, key: &str) -> Result<&'a str> {
    d.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| invalid("descriptor", format!("missing key {key}")))
}

pub(crate) fn lookup_usize(d: &Descriptor, key: &str) -> Result<usize> {
    lookup(d, key)?
        .parse()
        .map_err(|_| invalid("descriptor", format!("{key} is not an integer")))
}

pub(crate) fn entry(k: &str, v: impl fmt::Display) -> (String, String) {
    (k.to_string(), v.to_string())
}

/// Adaptive-norm transformer block: shift/scale/gate for attention and MLP
/// from a conditioning vector, gates zero at init so the block starts as
/// the identity.
#[derive(Debug, Clone)]
pub struct StreamBlock<S: Real> {
    pub modulation: Modulation<S>,
    pub qkv: Qkv<S>,
    pub out: Linear<S>,
    pub mlp: Mlp<S>,
}

pub struct Staged<S: Real> {
    mods: Vec<Tensor<S>>,
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
}

impl<S: Real> StreamBlock<S> {
    pub fn new(init: &mut Init<'_>, d: usize, heads: usize, ffn_mult: usize, cond_dim: usize) -> Self {
        Self {
            modulation: Modulation::new(init, cond_dim, d, 6),
            qkv: Qkv::new(init, d, heads),
            out: Linear::new(init, d, d, true),
            mlp: Mlp::new(init, d, d * ffn_mult, d),
        }
    }

    pub fn heads(&self) -> usize {
        self.qkv.heads
    }

    fn stage(&self, x: &Tensor<S>, vec: &Tensor<S>, pos: &[Option<usize>]) -> Result<Staged<S>> {
        let mods = self.modulation.forward(vec)?;
        let h = ln(x)?.modulate(&mods[0], &mods[1])?;
        let (q, k, v) = self.qkv.forward(&h, pos)?;
        Ok(Staged { mods, q, k, v })
    }

    fn finish(&self, x: &Tensor<S>, attn: &Tensor<S>, mods: &[Tensor<S>]) -> Result<Tensor<S>> {
        let x = x.add(&self.out.forward(attn)?.gate(&mods[2])?)?;
        let h = ln(&x)?.modulate(&mods[3], &mods[4])?;
        x.add(&self.mlp.forward(&h)?.gate(&mods[5])?)
    }

    pub fn forward(&self, x: &Tensor<S>, vec: &Tensor<S>, pos: &[Option<usize>], key_mask: &[S]) -> Result<Tensor<S>> {
        let st = self.stage(x, vec, pos)?;
        let a = attend(&st.q, &st.k, &st.v, self.heads(), Some(key_mask))?;
        self.finish(x, &a, &st.mods)
    }
}

impl<S: Real> Module<S> for StreamBlock<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.modulation.visit(&scoped(prefix, "mod"), out);
        self.qkv.visit(&scoped(prefix, "qkv"), out);
        self.out.visit(&scoped(prefix, "out"), out);
        self.mlp.visit(&scoped(prefix, "mlp"), out);
    }
}

/// Merged-sequence block with shared parameters.
pub type SingleStreamBlock<S> = StreamBlock<S>;

/// Separate parameters per stream, one attention over the concatenation.
/// Without a prompt stream it degenerates to a single content stream.
#[derive(Debug, Clone)]
pub struct DoubleStreamBlock<S: Real> {
    pub prompt: Option<StreamBlock<S>>,
    pub content: StreamBlock<S>,
}

/// Everything a dual-stream call needs besides the two token sets.
pub struct JointLayout<'a, S: Real> {
    pub vec: &'a Tensor<S>,
    /// Additive key mask over `[prompt ; content]` per batch element.
    pub mask: &'a [S],
    pub content_pos: &'a [Option<usize>],
}

impl<S: Real> DoubleStreamBlock<S> {
    pub fn new(init: &mut Init<'_>, d: usize, heads: usize, ffn_mult: usize, cond_dim: usize, with_prompt: bool) -> Self {
        Self {
            prompt: with_prompt.then(|| StreamBlock::new(init, d, heads, ffn_mult, cond_dim)),
            content: StreamBlock::new(init, d, heads, ffn_mult, cond_dim),
        }
    }

    pub fn forward(&self, prompt: Option<&Tensor<S>>, content: &Tensor<S>, layout: &JointLayout<'_, S>) -> Result<(Option<Tensor<S>>, Tensor<S>)> {
        let (pb, p) = match (&self.prompt, prompt) {
            (Some(b), Some(p)) => (b, p),
            (None, None) => return Ok((None, self.content.forward(content, layout.vec, layout.content_pos, layout.mask)?)),
            _ => return Err(invalid("double_stream", "prompt stream and prompt tokens must both be present")),
        };
        let k = p.shape()[1];
        let t = content.shape()[1];
        let sp = pb.stage(p, layout.vec, &vec![None; k])?;
        let sc = self.content.stage(content, layout.vec, layout.content_pos)?;
        let q = Tensor::concat(&[sp.q, sc.q], 1)?;
        let kk = Tensor::concat(&[sp.k, sc.k], 1)?;
        let v = Tensor::concat(&[sp.v, sc.v], 1)?;
        let a = attend(&q, &kk, &v, self.content.heads(), Some(layout.mask))?;
        let p2 = pb.finish(p, &a.slice(1, 0, k)?, &sp.mods)?;
        let c2 = self.content.finish(content, &a.slice(1, k, t)?, &sc.mods)?;
        Ok((Some(p2), c2))
    }

    /// Joint attention weights `[B, H, K+T, K+T]` of this block.
    pub fn attention_weights(&self, prompt: &Tensor<S>, content: &Tensor<S>, layout: &JointLayout<'_, S>) -> Result<Vec<S>> {
        let pb = self
            .prompt
            .as_ref()
            .ok_or_else(|| invalid("double_stream", "block has no prompt stream"))?;
        let k = prompt.shape()[1];
        let sp = pb.stage(prompt, layout.vec, &vec![None; k])?;
        let sc = self.content.stage(content, layout.vec, layout.content_pos)?;
        let q = Tensor::concat(&[sp.q, sc.q], 1)?;
        let kk = Tensor::concat(&[sp.k, sc.k], 1)?;
        attention_probs(&q, &kk, self.content.heads(), Some(layout.mask), Some(S::lit(ATTN_SOFTCAP)))
    }
}

impl<S: Real> Module<S> for DoubleStreamBlock<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        if let Some(p) = &self.prompt {
            p.visit(&scoped(prefix, "prompt"), out);
        }
        self.content.visit(&scoped(prefix, "content"), out);
    }
}

/// Key mask over `[K prompt ; T content]`: prompt keys open unless
/// `prompt_closed[b]`, content keys open on the valid prefix.
pub fn joint_mask<S: Real>(k: usize, prompt_closed: &[bool], frames: &[usize], t_max: usize) -> Vec<S> {
    let closed = S::lit(MASK_SENTINEL);
    let mut out = Vec::with_capacity(frames.len() * (k + t_max));
    for (b, &len) in frames.iter().enumerate() {
        let pc = prompt_closed.get(b).copied().unwrap_or(false);
        out.extend((0..k).map(|_| if pc { closed } else { S::zero() }));
        out.extend((0..t_max).map(|j| if j < len { S::zero() } else { closed }));
    }
    out
}

/// AdaLN then a zero-initialized projection to the feature channels.
#[derive(Debug, Clone)]
pub struct FinalLayer<S: Real> {
    pub modulation: Modulation<S>,
    pub out: Linear<S>,
}

impl<S: Real> FinalLayer<S> {
    pub fn new(init: &mut Init<'_>, d: usize, cond_dim: usize, n_out: usize) -> Self {
        Self {
            modulation: Modulation::new(init, cond_dim, d, 2),
            out: Linear::zeroed(init, d, n_out),
        }
    }

    pub fn forward(&self, x: &Tensor<S>, vec: &Tensor<S>) -> Result<Tensor<S>> {
        let m = self.modulation.forward(vec)?;
        self.out.forward(&ln(x)?.modulate(&m[0], &m[1])?)
    }
}

impl<S: Real> Module<S> for FinalLayer<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.modulation.visit(&scoped(prefix, "mod"), out);
        self.out.visit(&scoped(prefix, "out"), out);
    }
}

/// How the DG decoder consumes the speech prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptConditioning {
    /// `K` query-pooled tokens in a dedicated attention stream.
    Sequence,
    /// One attention-pooled vector injected through AdaLN.
    FixedAdaLn,
}

impl PromptConditioning {
    pub fn name(self) -> &'static str {
        match self {
            PromptConditioning::Sequence => "sequence",
            PromptConditioning::FixedAdaLn => "fixed_adaln",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sequence" => Some(PromptConditioning::Sequence),
            "fixed_adaln" => Some(PromptConditioning::FixedAdaLn),
            _ => None,
        }
    }
}

/// A batch of conditioning inputs shared by both decoders.
#[derive(Debug, Clone)]
pub struct CondInputs<S: Real> {
    pub symbols: Vec<Vec<usize>>,
    /// `[B, style_dim]`.
    pub style: Tensor<S>,
    pub lang: Vec<usize>,
    /// `[B, T_p, F]` right-padded prompt frames.
    pub prompt: Tensor<S>,
    pub prompt_lengths: Vec<usize>,
}

impl<S: Real> CondInputs<S> {
    pub fn batch(&self) -> usize {
        self.symbols.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgConfig {
    pub n_symbols: usize,
    pub n_mel: usize,
    pub style_dim: usize,
    pub n_lang: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub text_layers: usize,
    pub prompt_layers: usize,
    pub n_double: usize,
    pub n_single: usize,
    pub k_prompt: usize,
    pub dur_hidden: usize,
    pub freq_dim: usize,
    pub conditioning: PromptConditioning,
}

impl Default for DgConfig {
    fn default() -> Self {
        Self {
            n_symbols: 12,
            n_mel: 8,
            style_dim: 4,
            n_lang: 2,
            d_model: 64,
            heads: 4,
            ffn_mult: 2,
            text_layers: 2,
            prompt_layers: 2,
            n_double: 2,
            n_single: 4,
            k_prompt: 16,
            dur_hidden: 64,
            freq_dim: 64,
            conditioning: PromptConditioning::Sequence,
        }
    }
}

impl DgConfig {
    pub fn descriptor(&self) -> Descriptor {
        vec![
            entry("n_symbols", self.n_symbols),
            entry("n_mel", self.n_mel),
            entry("style_dim", self.style_dim),
            entry("n_lang", self.n_lang),
            entry("d_model", self.d_model),
            entry("heads", self.heads),
            entry("ffn_mult", self.ffn_mult),
            entry("text_layers", self.text_layers),
            entry("prompt_layers", self.prompt_layers),
            entry("n_double", self.n_double),
            entry("n_single", self.n_single),
            entry("k_prompt", self.k_prompt),
            entry("dur_hidden", self.dur_hidden),
            entry("freq_dim", self.freq_dim),
            entry("conditioning", self.conditioning.name()),
            entry("noisy_input", "projection_added_to_regulated_text"),
            entry("full_scale", "d_model=768 text_layers=8 n_double=8 n_single=16"),
        ]
    }

    pub fn from_descriptor(d: &Descriptor) -> Result<Self> {
        let conditioning = PromptConditioning::parse(lookup(d, "conditioning")?)
            .ok_or_else(|| invalid("descriptor", "unknown conditioning"))?;
        let c = Self {
            n_symbols: lookup_usize(d, "n_symbols")?,
            n_mel: lookup_usize(d, "n_mel")?,
            style_dim: lookup_usize(d, "style_dim")?,
            n_lang: lookup_usize(d, "n_lang")?,
            d_model: lookup_usize(d, "d_model")?,
            heads: lookup_usize(d, "heads")?,
            ffn_mult: lookup_usize(d, "ffn_mult")?,
            text_layers: lookup_usize(d, "text_layers")?,
            prompt_layers: lookup_usize(d, "prompt_layers")?,
            n_double: lookup_usize(d, "n_double")?,
            n_single: lookup_usize(d, "n_single")?,
            k_prompt: lookup_usize(d, "k_prompt")?,
            dur_hidden: lookup_usize(d, "dur_hidden")?,
            freq_dim: lookup_usize(d, "freq_dim")?,
            conditioning,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let dh_ok = self.heads > 0 && self.d_model.is_multiple_of(self.heads) && (self.d_model / self.heads).is_multiple_of(2);
        if !dh_ok || self.k_prompt == 0 || self.n_mel == 0 || self.n_lang == 0 || !self.freq_dim.is_multiple_of(2) {
            return Err(invalid("dg_config", format!("inconsistent dimensions {self:?}")));
        }
        Ok(())
    }
}

/// Duration-guided decoder.
#[derive(Debug, Clone)]
pub struct DgModel<S: Real> {
    pub config: DgConfig,
    pub text: TextEncoder<S>,
    pub prompt_enc: PromptEncoder<S>,
    pub query_pool: Option<QueryPool<S>>,
    pub attn_pool: Option<AttnPool<S>>,
    pub null_text: Tensor<S>,
    pub null_prompt: Tensor<S>,
    pub pre_lr: DoubleStreamBlock<S>,
    pub pre_lr_prompt: Option<Linear<S>>,
    pub duration: DurationPredictor<S>,
    pub x_proj: Linear<S>,
    pub time: TimeEmbedding<S>,
    pub dec_prompt: Option<Linear<S>>,
    pub double: Vec<DoubleStreamBlock<S>>,
    pub single: Vec<SingleStreamBlock<S>>,
    pub final_layer: FinalLayer<S>,
}

/// Conditioning resolved for one batch, reused across ODE steps.
#[derive(Debug, Clone)]
pub struct DgCondition<S: Real> {
    pub prompt_tokens: Option<Tensor<S>>,
    pub prompt_vec: Option<Tensor<S>>,
    /// Length-regulated (or null) text features `[B, T_max, d]`.
    pub base: Tensor<S>,
    pub frames: Vec<usize>,
    /// `[B, L_max]`.
    pub log_durations: Tensor<S>,
    pub durations: Vec<Vec<usize>>,
}

impl<S: Real> DgModel<S> {
    pub fn new(config: DgConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let seq = c.conditioning == PromptConditioning::Sequence;
        let mut rng = CounterRng::new(seed);
        let mut init = Init::new(&mut rng);
        let null_std = 0.02;
        Ok(Self {
            text: TextEncoder::new(&mut init, c.n_symbols + 1, c.n_lang, c.style_dim, d, c.heads, c.text_layers, c.ffn_mult),
            prompt_enc: PromptEncoder::new(&mut init, c.n_mel, d, c.heads, c.prompt_layers, c.ffn_mult),
            query_pool: seq.then(|| QueryPool::new(&mut init, c.k_prompt, d, d, c.heads)),
            attn_pool: (!seq).then(|| AttnPool::new(&mut init, d, d, d)),
            null_text: init.normal(&[d], null_std),
            null_prompt: init.normal(&[d], null_std),
            pre_lr: DoubleStreamBlock::new(&mut init, d, c.heads, c.ffn_mult, d, seq),
            pre_lr_prompt: (!seq).then(|| Linear::new(&mut init, d, d, true)),
            duration: DurationPredictor::new(&mut init, d, c.dur_hidden),
            x_proj: Linear::new(&mut init, c.n_mel, d, true),
            time: TimeEmbedding::new(&mut init, c.freq_dim, d),
            dec_prompt: (!seq).then(|| Linear::new(&mut init, d, d, true)),
            double: (0..c.n_double)
                .map(|_| DoubleStreamBlock::new(&mut init, d, c.heads, c.ffn_mult, d, seq))
                .collect(),
            single: (0..c.n_single).map(|_| StreamBlock::new(&mut init, d, c.heads, c.ffn_mult, d)).collect(),
            final_layer: FinalLayer::new(&mut init, d, d, c.n_mel),
            config,
        })
    }

    fn check_inputs(&self, inp: &CondInputs<S>, nulls: &[NullMask]) -> Result<()> {
        let b = inp.batch();
        let ps = inp.prompt.shape();
        if nulls.len() != b || ps.len() != 3 || ps[0] != b || ps[2] != self.config.n_mel || inp.prompt_lengths.len() != b {
            return Err(invalid("dg_field", "conditioning batch is inconsistent"));
        }
        if inp.symbols.iter().any(|s| s.is_empty() || s.iter().any(|&v| v >= self.config.n_symbols)) {
            return Err(invalid("dg_field", "symbol ids must be non-empty and below the symbol count"));
        }
        Ok(())
    }

    /// Resolve conditioning. `durations` overrides the predictor (ground
    /// truth in training, conditional prediction for the null branch).
    pub fn condition(&self, inp: &CondInputs<S>, nulls: &[NullMask], durations: Option<&[Vec<usize>]>) -> Result<DgCondition<S>> {
        self.check_inputs(inp, nulls)?;
        let b = inp.batch();
        let d = self.config.d_model;
        let tokens = TokenBatch::new(&inp.symbols, self.config.n_symbols)?;
        let (h, cond) = self.text.forward(&tokens, &inp.style, &inp.lang)?;
        let enc = self.prompt_enc.forward(&inp.prompt, &inp.prompt_lengths)?;
        let prompt_null: Vec<bool> = nulls.iter().map(|n| n.prompt).collect();
        let text_null: Vec<bool> = nulls.iter().map(|n| n.text).collect();

        let (prompt_tokens, emb) = match (&self.query_pool, &self.attn_pool) {
            (Some(qp), _) => {
                let toks = qp.forward(&enc, &inp.prompt_lengths)?;
                let null = self.null_prompt.broadcast_leading(&[b, qp.k()])?;
                (Some(toks.blend_batch(&null, &prompt_null)?), None)
            }
            (None, Some(ap)) => {
                let e = ap.forward(&enc, &inp.prompt_lengths)?;
                let null = self.null_prompt.broadcast_leading(&[b])?;
                (None, Some(e.blend_batch(&null, &prompt_null)?))
            }
            _ => return Err(invalid("dg_field", "no prompt pooling configured")),
        };

        let mut pre_vec = cond;
        if let (Some(p), Some(e)) = (&self.pre_lr_prompt, &emb) {
            pre_vec = pre_vec.add(&p.forward(e)?)?;
        }
        let k = prompt_tokens.as_ref().map_or(0, |t| t.shape()[1]);
        let mask = joint_mask::<S>(k, &[], &tokens.lengths, tokens.max_len);
        let pos = positions(tokens.max_len);
        let layout = JointLayout {
            vec: &pre_vec,
            mask: &mask,
            content_pos: &pos,
        };
        let (_, enriched) = self.pre_lr.forward(prompt_tokens.as_ref(), &h, &layout)?;
        let log_durations = self.duration.forward(&enriched, &tokens.lengths)?;

        let durations: Vec<Vec<usize>> = match durations {
            Some(dur) => {
                if dur.len() != b || dur.iter().zip(&inp.symbols).any(|(d, s)| d.len() != s.len()) {
                    return Err(invalid("dg_field", "durations do not match the token sequences"));
                }
                dur.to_vec()
            }
            None => {
                let ld = log_durations.to_f64_vec();
                inp.symbols
                    .iter()
                    .enumerate()
                    .map(|(bi, s)| durations_from_log(&ld[bi * tokens.max_len..bi * tokens.max_len + s.len()]))
                    .collect()
            }
        };
        let (lr, frames) = length_regulate(&enriched, &durations)?;
        let t_max = lr.shape()[1];
        let null_t = self.null_text.broadcast_leading(&[b, t_max])?;
        let base = lr.blend_batch(&null_t, &text_null)?;
        let prompt_vec = match (&self.dec_prompt, &emb) {
            (Some(p), Some(e)) => Some(p.forward(e)?),
            _ => None,
        };
        debug_assert_eq!(base.shape()[2], d);
        Ok(DgCondition {
            prompt_tokens,
            prompt_vec,
            base,
            frames,
            log_durations,
            durations,
        })
    }

    /// Velocity `[B, T_max, F]` for noisy features `x_t`.
    pub fn field(&self, cond: &DgCondition<S>, t: &[S], x_t: &Tensor<S>) -> Result<Tensor<S>> {
        let sh = x_t.shape();
        if sh.len() != 3 || sh[..2] != cond.base.shape()[..2] || sh[2] != self.config.n_mel || t.len() != sh[0] {
            return Err(invalid("dg_field", format!("x_t {:?} does not match conditioning {:?}", sh, cond.base.shape())));
        }
        let t_max = sh[1];
        let content = cond.base.add(&self.x_proj.forward(x_t)?)?;
        let mut vec = self.time.forward(t)?;
        if let Some(pv) = &cond.prompt_vec {
            vec = vec.add(pv)?;
        }
        let k = cond.prompt_tokens.as_ref().map_or(0, |p| p.shape()[1]);
        let mask = joint_mask::<S>(k, &[], &cond.frames, t_max);
        let pos = positions(t_max);
        let layout = JointLayout {
            vec: &vec,
            mask: &mask,
            content_pos: &pos,
        };
        let mut prompt = cond.prompt_tokens.clone();
        let mut content = content;
        for blk in &self.double {
            let (p, c) = blk.forward(prompt.as_ref(), &content, &layout)?;
            prompt = p;
            content = c;
        }
        let mut merged = match &prompt {
            Some(p) => Tensor::concat(&[p.clone(), content], 1)?,
            None => content,
        };
        let mut merged_pos = vec![None; k];
        merged_pos.extend(positions(t_max));
        for blk in &self.single {
            merged = blk.forward(&merged, &vec, &merged_pos, &mask)?;
        }
        let content = if k > 0 { merged.slice(1, k, t_max)? } else { merged };
        self.final_layer.forward(&content, &vec)
    }
}

impl<S: Real> Module<S> for DgModel<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.text.visit(&scoped(prefix, "text"), out);
        self.prompt_enc.visit(&scoped(prefix, "prompt_enc"), out);
        if let Some(q) = &self.query_pool {
            q.visit(&scoped(prefix, "query_pool"), out);
        }
        if let Some(a) = &self.attn_pool {
            a.visit(&scoped(prefix, "attn_pool"), out);
        }
        push(out, prefix, "null_text", &self.null_text);
        push(out, prefix, "null_prompt", &self.null_prompt);
        self.pre_lr.visit(&scoped(prefix, "pre_lr"), out);
        if let Some(p) = &self.pre_lr_prompt {
            p.visit(&scoped(prefix, "pre_lr_prompt"), out);
        }
        self.duration.visit(&scoped(prefix, "duration"), out);
        self.x_proj.visit(&scoped(prefix, "x_proj"), out);
        self.time.visit(&scoped(prefix, "time"), out);
        if let Some(p) = &self.dec_prompt {
            p.visit(&scoped(prefix, "dec_prompt"), out);
        }
        for (i, b) in self.double.iter().enumerate() {
            b.visit(&scoped(prefix, &format!("double{i}")), out);
        }
        for (i, b) in self.single.iter().enumerate() {
            b.visit(&scoped(prefix, &format!("single{i}")), out);
        }
        self.final_layer.visit(&scoped(prefix, "final"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AfConfig {
    pub n_symbols: usize,
    pub n_mel: usize,
    pub style_dim: usize,
    pub n_lang: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub text_layers: usize,
    pub prompt_layers: usize,
    pub n_blocks: usize,
    pub prompt_dim: usize,
    pub freq_dim: usize,
}

impl Default for AfConfig {
    fn default() -> Self {
        Self {
            n_symbols: 12,
            n_mel: 8,
            style_dim: 4,
            n_lang: 2,
            d_model: 128,
            heads: 8,
            ffn_mult: 2,
            text_layers: 2,
            prompt_layers: 2,
            n_blocks: 4,
            prompt_dim: 64,
            freq_dim: 64,
        }
    }
}

impl AfConfig {
    pub fn descriptor(&self) -> Descriptor {
        vec![
            entry("n_symbols", self.n_symbols),
            entry("n_mel", self.n_mel),
            entry("style_dim", self.style_dim),
            entry("n_lang", self.n_lang),
            entry("d_model", self.d_model),
            entry("heads", self.heads),
            entry("ffn_mult", self.ffn_mult),
            entry("text_layers", self.text_layers),
            entry("prompt_layers", self.prompt_layers),
            entry("n_blocks", self.n_blocks),
            entry("prompt_dim", self.prompt_dim),
            entry("freq_dim", self.freq_dim),
            entry("noisy_input", "channel_concat_with_expanded_text_then_projection"),
            entry("full_scale", "d_model=1024 head_dim=128 text_layers=8 n_blocks=16 prompt_dim=1024"),
        ]
    }

    pub fn from_descriptor(d: &Descriptor) -> Result<Self> {
        let c = Self {
            n_symbols: lookup_usize(d, "n_symbols")?,
            n_mel: lookup_usize(d, "n_mel")?,
            style_dim: lookup_usize(d, "style_dim")?,
            n_lang: lookup_usize(d, "n_lang")?,
            d_model: lookup_usize(d, "d_model")?,
            heads: lookup_usize(d, "heads")?,
            ffn_mult: lookup_usize(d, "ffn_mult")?,
            text_layers: lookup_usize(d, "text_layers")?,
            prompt_layers: lookup_usize(d, "prompt_layers")?,
            n_blocks: lookup_usize(d, "n_blocks")?,
            prompt_dim: lookup_usize(d, "prompt_dim")?,
            freq_dim: lookup_usize(d, "freq_dim")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let dh_ok = self.heads > 0 && self.d_model.is_multiple_of(self.heads) && (self.d_model / self.heads).is_multiple_of(2);
        if !dh_ok || self.n_mel == 0 || self.n_lang == 0 || self.prompt_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return Err(invalid("af_config", format!("inconsistent dimensions {self:?}")));
        }
        Ok(())
    }

    pub fn filler(&self) -> usize {
        self.n_symbols
    }
}

/// Alignment-free decoder.
#[derive(Debug, Clone)]
pub struct AfModel<S: Real> {
    pub config: AfConfig,
    pub text: TextEncoder<S>,
    pub prompt_enc: PromptEncoder<S>,
    pub attn_pool: AttnPool<S>,
    pub null_text: Tensor<S>,
    pub null_prompt: Tensor<S>,
    pub in_proj: Linear<S>,
    pub time: TimeEmbedding<S>,
    pub prompt_proj: Linear<S>,
    pub blocks: Vec<StreamBlock<S>>,
    pub final_layer: FinalLayer<S>,
}

#[derive(Debug, Clone)]
pub struct AfCondition<S: Real> {
    /// Encoded filler-expanded text `[B, T_max, d]` (or null).
    pub text: Tensor<S>,
    /// Projected prompt embedding `[B, d]`.
    pub prompt_vec: Tensor<S>,
    pub frames: Vec<usize>,
}

impl<S: Real> AfModel<S> {
    pub fn new(config: AfConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut rng = CounterRng::new(seed);
        let mut init = Init::new(&mut rng);
        Ok(Self {
            text: TextEncoder::new(&mut init, c.n_symbols + 1, c.n_lang, c.style_dim, d, c.heads, c.text_layers, c.ffn_mult),
            prompt_enc: PromptEncoder::new(&mut init, c.n_mel, d, c.heads, c.prompt_layers, c.ffn_mult),
            attn_pool: AttnPool::new(&mut init, d, d, c.prompt_dim),
            null_text: init.normal(&[d], 0.02),
            null_prompt: init.normal(&[c.prompt_dim], 0.02),
            in_proj: Linear::new(&mut init, d + c.n_mel, d, true),
            time: TimeEmbedding::new(&mut init, c.freq_dim, d),
            prompt_proj: Linear::new(&mut init, c.prompt_dim, d, true),
            blocks: (0..c.n_blocks).map(|_| StreamBlock::new(&mut init, d, c.heads, c.ffn_mult, d)).collect(),
            final_layer: FinalLayer::new(&mut init, d, d, c.n_mel),
            config,
        })
    }

    /// Resolve conditioning for target lengths `frames` (ground truth in
    /// training, DG-predicted at inference).
    pub fn condition(&self, inp: &CondInputs<S>, nulls: &[NullMask], frames: &[usize]) -> Result<AfCondition<S>> {
        let b = inp.batch();
        let ps = inp.prompt.shape();
        if nulls.len() != b || frames.len() != b || ps.len() != 3 || ps[0] != b || ps[2] != self.config.n_mel {
            return Err(invalid("af_field", "conditioning batch is inconsistent"));
        }
        if inp.symbols.iter().any(|s| s.iter().any(|&v| v >= self.config.n_symbols)) {
            return Err(invalid("af_field", "symbol id outside the symbol set"));
        }
        let t_max = frames.iter().copied().max().unwrap_or(0);
        let expanded = inp
            .symbols
            .iter()
            .zip(frames)
            .map(|(s, &t)| filler_expand(s, t, self.config.filler()))
            .collect::<Result<Vec<_>>>()?;
        let tokens = TokenBatch::new(&expanded, self.config.filler())?;
        let (h, _) = self.text.forward(&tokens, &inp.style, &inp.lang)?;
        let text_null: Vec<bool> = nulls.iter().map(|n| n.text).collect();
        let prompt_null: Vec<bool> = nulls.iter().map(|n| n.prompt).collect();
        let text = h.blend_batch(&self.null_text.broadcast_leading(&[b, t_max])?, &text_null)?;
        let enc = self.prompt_enc.forward(&inp.prompt, &inp.prompt_lengths)?;
        let emb = self.attn_pool.forward(&enc, &inp.prompt_lengths)?;
        let emb = emb.blend_batch(&self.null_prompt.broadcast_leading(&[b])?, &prompt_null)?;
        Ok(AfCondition {
            text,
            prompt_vec: self.prompt_proj.forward(&emb)?,
            frames: frames.to_vec(),
        })
    }

    pub fn field(&self, cond: &AfCondition<S>, t: &[S], x_t: &Tensor<S>) -> Result<Tensor<S>> {
        let sh = x_t.shape();
        if sh.len() != 3 || sh[..2] != cond.text.shape()[..2] || sh[2] != self.config.n_mel || t.len() != sh[0] {
            return Err(invalid("af_field", format!("x_t {:?} does not match text {:?}", sh, cond.text.shape())));
        }
        let t_max = sh[1];
        let mut h = self.in_proj.forward(&Tensor::concat(&[cond.text.clone(), x_t.clone()], 2)?)?;
        let vec = self.time.forward(t)?.add(&cond.prompt_vec)?;
        let mask = prefix_mask::<S>(&cond.frames, t_max);
        let pos = positions(t_max);
        for blk in &self.blocks {
            h = blk.forward(&h, &vec, &pos, &mask)?;
        }
        self.final_layer.forward(&h, &vec)
    }
}

impl<S: Real> Module<S> for AfModel<S> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.text.visit(&scoped(prefix, "text"), out);
        self.prompt_enc.visit(&scoped(prefix, "prompt_enc"), out);
        self.attn_pool.visit(&scoped(prefix, "attn_pool"), out);
        push(out, prefix, "null_text", &self.null_text);
        push(out, prefix, "null_prompt", &self.null_prompt);
        self.in_proj.visit(&scoped(prefix, "in_proj"), out);
        self.time.visit(&scoped(prefix, "time"), out);
        self.prompt_proj.visit(&scoped(prefix, "prompt_proj"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&scoped(prefix, &format!("block{i}")), out);
        }
        self.final_layer.visit(&scoped(prefix, "final"), out);
    }
}

/// A decoder whose conditioning can be resolved once and batched.
pub trait ConditionalField<S: Real> {
    type Cond: Clone;

    fn eval(&self, cond: &Self::Cond, t: &[S], x: &Tensor<S>) -> Result<Tensor<S>>;

    /// Concatenate two conditionings along the batch axis.
    fn stack(a: &Self::Cond, b: &Self::Cond) -> Result<Self::Cond>;
}

fn stack_opt<S: Real>(a: &Option<Tensor<S>>, b: &Option<Tensor<S>>) -> Result<Option<Tensor<S>>> {
    match (a, b) {
        (Some(x), Some(y)) => Ok(Some(Tensor::concat(&[x.clone(), y.clone()], 0)?)),
        (None, None) => Ok(None),
        _ => Err(invalid("stack", "conditionings disagree on optional parts")),
    }
}

impl<S: Real> ConditionalField<S> for DgModel<S> {
    type Cond = DgCondition<S>;

    fn eval(&self, cond: &DgCondition<S>, t: &[S], x: &Tensor<S>) -> Result<Tensor<S>> {
        self.field(cond, t, x)
    }

    fn stack(a: &DgCondition<S>, b: &DgCondition<S>) -> Result<DgCondition<S>> {
        Ok(DgCondition {
            prompt_tokens: stack_opt(&a.prompt_tokens, &b.prompt_tokens)?,
            prompt_vec: stack_opt(&a.prompt_vec, &b.prompt_vec)?,
            base: Tensor::concat(&[a.base.clone(), b.base.clone()], 0)?,
            frames: a.frames.iter().chain(&b.frames).copied().collect(),
            log_durations: Tensor::concat(&[a.log_durations.clone(), b.log_durations.clone()], 0)?,
            durations: a.durations.iter().chain(&b.durations).cloned().collect(),
        })
    }
}

impl<S: Real> ConditionalField<S> for AfModel<S> {
    type Cond = AfCondition<S>;

    fn eval(&self, cond: &AfCondition<S>, t: &[S], x: &Tensor<S>) -> Result<Tensor<S>> {
        self.field(cond, t, x)
    }

    fn stack(a: &AfCondition<S>, b: &AfCondition<S>) -> Result<AfCondition<S>> {
        Ok(AfCondition {
            text: Tensor::concat(&[a.text.clone(), b.text.clone()], 0)?,
            prompt_vec: Tensor::concat(&[a.prompt_vec.clone(), b.prompt_vec.clone()], 0)?,
            frames: a.frames.iter().chain(&b.frames).copied().collect(),
        })
    }
}

/// A frozen decoder bound to conditional and fully-null conditioning; the
/// guidance pair runs as one doubled batch.
pub struct Guided<'m, S: Real, M: ConditionalField<S>> {
    model: &'m M,
    cond: M::Cond,
    pair: M::Cond,
    batch: usize,
}

impl<'m, S: Real, M: ConditionalField<S>> Guided<'m, S, M> {
    pub fn new(model: &'m M, cond: M::Cond, null: &M::Cond, batch: usize) -> Result<Self> {
        let pair = M::stack(&cond, null)?;
        Ok(Self { model, cond, pair, batch })
    }

    pub fn cond(&self) -> &M::Cond {
        &self.cond
    }
}

impl<S: Real, M: ConditionalField<S>> GuidedField<S> for Guided<'_, S, M> {
    fn eval_cond(&self, t: S, x: &Tensor<S>) -> crate::flowode::Result<Tensor<S>> {
        Ok(crate::numerics::no_grad(|| self.model.eval(&self.cond, &vec![t; self.batch], x))?)
    }

    fn eval_pair(&self, t: S, x: &Tensor<S>) -> crate::flowode::Result<(Tensor<S>, Tensor<S>)> {
        let b = self.batch;
        let v = crate::numerics::no_grad(|| {
            let x2 = Tensor::concat(&[x.clone(), x.clone()], 0)?;
            self.model.eval(&self.pair, &vec![t; 2 * b], &x2)
        })?;
        Ok((v.slice(0, 0, b)?, v.slice(0, b, b)?))
    }
}

/// Bind a DG model for sampling: durations come from the conditional
/// branch and are reused by the null branch.
pub fn guided_dg<'m, S: Real>(model: &'m DgModel<S>, inp: &CondInputs<S>) -> Result<Guided<'m, S, DgModel<S>>> {
    let b = inp.batch();
    crate::numerics::no_grad(|| {
        let cond = model.condition(inp, &vec![NullMask::NONE; b], None)?;
        let null = model.condition(inp, &vec![NullMask::BOTH; b], Some(&cond.durations))?;
        Guided::new(model, cond, &null, b)
    })
}

/// Bind an AF model for sampling at the given target lengths.
pub fn guided_af<'m, S: Real>(model: &'m AfModel<S>, inp: &CondInputs<S>, frames: &[usize]) -> Result<Guided<'m, S, AfModel<S>>> {
    let b = inp.batch();
    crate::numerics::no_grad(|| {
        let cond = model.condition(inp, &vec![NullMask::NONE; b], frames)?;
        let null = model.condition(inp, &vec![NullMask::BOTH; b], frames)?;
        Guided::new(model, cond, &null, b)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::perturb_params;

    fn tiny_dg(conditioning: PromptConditioning) -> DgConfig {
        DgConfig {
            n_symbols: 5,
            n_mel: 3,
            d_model: 8,
            heads: 2,
            text_layers: 1,
            prompt_layers: 1,
            n_double: 1,
            n_single: 1,
            k_prompt: 4,
            dur_hidden: 6,
            freq_dim: 8,
            conditioning,
            ..DgConfig::default()
        }
    }

    fn tiny_af() -> AfConfig {
        AfConfig {
            n_symbols: 5,
            n_mel: 3,
            d_model: 8,
            heads: 2,
            text_layers: 1,
            prompt_layers: 1,
            n_blocks: 2,
            prompt_dim: 6,
            freq_dim: 8,
            ..AfConfig::default()
        }
    }

    pub(crate) fn inputs(rng: &mut CounterRng) -> CondInputs<f64> {
        let prompt: Vec<f64> = rng.normal_vec(2 * 6 * 3);
        CondInputs {
            symbols: vec![vec![1, 2, 3], vec![4, 0]],
            style: Tensor::from_f64(&[2, 4], &rng.normal_vec(8)).unwrap(),
            lang: vec![0, 1],
            prompt: Tensor::from_f64(&[2, 6, 3], &prompt).unwrap(),
            prompt_lengths: vec![6, 4],
        }
    }

    #[test]
    fn dg_shapes_and_identity_at_init() {
        let mut rng = CounterRng::new(5);
        let m: DgModel<f64> = DgModel::new(tiny_dg(PromptConditioning::Sequence), 1).unwrap();
        let inp = inputs(&mut rng);
        let dur = vec![vec![2, 1, 3], vec![2, 2]];
        let c = m.condition(&inp, &[NullMask::NONE; 2], Some(&dur)).unwrap();
        assert_eq!(c.frames, vec![6, 4]);
        let x = Tensor::from_f64(&[2, 6, 3], &rng.normal_vec(36)).unwrap();
        let v = m.field(&c, &[0.3, 0.8], &x).unwrap();
        assert_eq!(v.shape(), &[2, 6, 3]);
        assert!(v.to_vec().iter().all(|&a| a == 0.0));
        let blk = &m.double[0];
        let content = Tensor::from_f64(&[2, 6, 8], &rng.normal_vec(96)).unwrap();
        let prompt = Tensor::from_f64(&[2, 4, 8], &rng.normal_vec(64)).unwrap();
        let vec = Tensor::from_f64(&[2, 8], &rng.normal_vec(16)).unwrap();
        let mask = joint_mask::<f64>(4, &[], &[6, 4], 6);
        let pos = positions(6);
        let layout = JointLayout {
            vec: &vec,
            mask: &mask,
            content_pos: &pos,
        };
        let (p2, c2) = blk.forward(Some(&prompt), &content, &layout).unwrap();
        assert_eq!(p2.unwrap().to_vec(), prompt.to_vec());
        assert_eq!(c2.to_vec(), content.to_vec());
    }

    #[test]
    fn masked_prompt_receives_no_attention() {
        let mut rng = CounterRng::new(6);
        let m: DgModel<f64> = DgModel::new(tiny_dg(PromptConditioning::Sequence), 2).unwrap();
        perturb_params(&m, &mut rng, 0.3);
        let content = Tensor::from_f64(&[1, 5, 8], &rng.normal_vec(40)).unwrap();
        let prompt = Tensor::from_f64(&[1, 4, 8], &rng.normal_vec(32)).unwrap();
        let vec = Tensor::from_f64(&[1, 8], &rng.normal_vec(8)).unwrap();
        let pos = positions(5);
        let n = 9;
        for closed in [false, true] {
            let mask = joint_mask::<f64>(4, &[closed], &[5], 5);
            let layout = JointLayout {
                vec: &vec,
                mask: &mask,
                content_pos: &pos,
            };
            let p = m.double[0].attention_weights(&prompt, &content, &layout).unwrap();
            let mut to_prompt = 0.0;
            for h in 0..2 {
                for q in 4..n {
                    to_prompt += (0..4).map(|k| p[(h * n + q) * n + k]).sum::<f64>();
                }
            }
            if closed {
                assert!(to_prompt < 1e-12, "{to_prompt}");
            } else {
                assert!(to_prompt > 1e-3);
            }
        }
    }

    #[test]
    fn predicted_durations_drive_length() {
        let mut rng = CounterRng::new(8);
        for cond in [PromptConditioning::Sequence, PromptConditioning::FixedAdaLn] {
            let m: DgModel<f64> = DgModel::new(tiny_dg(cond), 3).unwrap();
            perturb_params(&m, &mut rng, 0.1);
            let inp = inputs(&mut rng);
            let c = m.condition(&inp, &[NullMask::NONE; 2], None).unwrap();
            for (d, s) in c.durations.iter().zip(&inp.symbols) {
                assert_eq!(d.len(), s.len());
                assert!(d.iter().all(|&v| v >= 1));
            }
            let t = *c.frames.iter().max().unwrap();
            assert_eq!(c.base.shape(), &[2, t, 8]);
            let x = Tensor::from_f64(&[2, t, 3], &rng.normal_vec(2 * t * 3)).unwrap();
            let v = m.field(&c, &[0.5, 0.5], &x).unwrap();
            assert_eq!(v.shape(), x.shape());
        }
    }

    #[test]
    fn af_shapes_and_errors() {
        let mut rng = CounterRng::new(9);
        let m: AfModel<f64> = AfModel::new(tiny_af(), 4).unwrap();
        perturb_params(&m, &mut rng, 0.1);
        let inp = inputs(&mut rng);
        let c = m.condition(&inp, &[NullMask::NONE; 2], &[7, 5]).unwrap();
        let x = Tensor::from_f64(&[2, 7, 3], &rng.normal_vec(42)).unwrap();
        assert_eq!(m.field(&c, &[0.1, 0.9], &x).unwrap().shape(), &[2, 7, 3]);
        assert!(m.condition(&inp, &[NullMask::NONE; 2], &[2, 5]).is_err());
        let wrong = Tensor::from_f64(&[2, 6, 3], &rng.normal_vec(36)).unwrap();
        assert!(m.field(&c, &[0.1, 0.9], &wrong).is_err());
    }

    #[test]
    fn padding_frames_do_not_leak() {
        let mut rng = CounterRng::new(10);
        let m: AfModel<f64> = AfModel::new(tiny_af(), 4).unwrap();
        perturb_params(&m, &mut rng, 0.2);
        let inp = inputs(&mut rng);
        let c = m.condition(&inp, &[NullMask::NONE; 2], &[7, 5]).unwrap();
        let mut xv = rng.normal_vec(42);
        let a = m.field(&c, &[0.4, 0.4], &Tensor::from_f64(&[2, 7, 3], &xv).unwrap()).unwrap().to_vec();
        for j in 5..7 {
            for ch in 0..3 {
                xv[(7 + j) * 3 + ch] = 50.0;
            }
        }
        let b = m.field(&c, &[0.4, 0.4], &Tensor::from_f64(&[2, 7, 3], &xv).unwrap()).unwrap().to_vec();
        for j in 0..5 {
            for ch in 0..3 {
                let i = (7 + j) * 3 + ch;
                assert!((a[i] - b[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn guided_pair_matches_separate_calls() {
        let mut rng = CounterRng::new(11);
        let m: AfModel<f64> = AfModel::new(tiny_af(), 4).unwrap();
        perturb_params(&m, &mut rng, 0.2);
        let inp = inputs(&mut rng);
        let g = guided_af(&m, &inp, &[6, 4]).unwrap();
        let x = Tensor::from_f64(&[2, 6, 3], &rng.normal_vec(36)).unwrap();
        let (c, u) = g.eval_pair(0.3, &x).unwrap();
        let c1 = g.eval_cond(0.3, &x).unwrap();
        let null = m.condition(&inp, &[NullMask::BOTH; 2], &[6, 4]).unwrap();
        let u1 = m.field(&null, &[0.3, 0.3], &x).unwrap();
        for (a, b) in c.to_vec().iter().zip(c1.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in u.to_vec().iter().zip(u1.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn descriptors_round_trip() {
        let d = tiny_dg(PromptConditioning::FixedAdaLn);
        assert_eq!(DgConfig::from_descriptor(&d.descriptor()).unwrap(), d);
        let a = tiny_af();
        assert_eq!(AfConfig::from_descriptor(&a.descriptor()).unwrap(), a);
    }
}
