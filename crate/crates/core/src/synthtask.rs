//! Synthetic symbol→feature corpus with a known generative model, and the
//! brute-force oracles that referee samples: transcription by style
//! estimation plus nearest prototype, style similarity, edit distance.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::CounterRng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synthtask: {0}")]
    Invalid(String),
    #[error("corpus io: {0}")]
    Io(#[from] io::Error),
    #[error("corpus format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

const MULT_GAIN: f64 = 0.3;
const ADD_GAIN: f64 = 0.5;
const MIN_PROTO_SEPARATION: f64 = 2.0;
/// Prompt frames beyond this count are dropped (6 "seconds").
pub const MAX_PROMPT_FRAMES: usize = 48;

/// Everything that determines the corpus. The prototype and style maps are
/// derived from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub n_symbols: usize,
    pub n_mel: usize,
    pub style_dim: usize,
    pub noise: f64,
    pub frames_per_second: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub train_symbols: (usize, usize),
    pub eval_symbols: (usize, usize),
    pub prompt_symbols: (usize, usize),
    pub eval_prompt_noise_mult: f64,
    /// `V × F`, row-major.
    pub prototypes: Vec<f64>,
    /// `F × style_dim` multiplicative style map.
    pub g: Vec<f64>,
    /// `F × style_dim` additive style map.
    pub h: Vec<f64>,
}

impl GeneratorSpec {
    pub fn new(seed: u64) -> Self {
        Self::with_noise(seed, 0.05)
    }

    pub fn with_noise(seed: u64, noise: f64) -> Self {
        let (n_symbols, n_mel, style_dim) = (12, 8, 4);
        let root = CounterRng::new(seed);
        let prototypes = draw_prototypes(&mut root.split(101), n_symbols, n_mel);
        let (g, h) = draw_style_maps(&mut root.split(102), n_mel, style_dim);
        Self {
            seed,
            n_symbols,
            n_mel,
            style_dim,
            noise,
            frames_per_second: 8,
            dur_min: 2,
            dur_max: 7,
            train_symbols: (4, 20),
            eval_symbols: (20, 26),
            prompt_symbols: (4, 8),
            eval_prompt_noise_mult: 4.0,
            prototypes,
            g,
            h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_symbols >= 2
            && self.n_mel > 0
            && self.style_dim > 0
            && self.noise >= 0.0
            && self.dur_min >= 1
            && self.dur_min <= self.dur_max
            && self.train_symbols.0 >= 1
            && self.train_symbols.0 <= self.train_symbols.1
            && self.eval_symbols.0 >= 1
            && self.eval_symbols.0 <= self.eval_symbols.1
            && self.prompt_symbols.0 >= 1
            && self.prompt_symbols.0 <= self.prompt_symbols.1
            && self.prototypes.len() == self.n_symbols * self.n_mel
            && self.g.len() == self.n_mel * self.style_dim
            && self.h.len() == self.n_mel * self.style_dim;
        if ok {
            Ok(())
        } else {
            Err(SynthError::Invalid("inconsistent generator spec".into()))
        }
    }

    pub fn prototype(&self, s: usize) -> &[f64] {
        &self.prototypes[s * self.n_mel..(s + 1) * self.n_mel]
    }

    /// Per-channel multiplicative gain and additive offset for style `z`.
    pub fn style_terms(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.style_dim;
        let dot = |m: &[f64], c: usize| (0..k).map(|j| m[c * k + j] * z[j]).sum::<f64>();
        let gain = (0..self.n_mel).map(|c| 1.0 + MULT_GAIN * dot(&self.g, c).tanh()).collect();
        let offset = (0..self.n_mel).map(|c| ADD_GAIN * dot(&self.h, c).tanh()).collect();
        (gain, offset)
    }

    /// Canonical text of every field; the manifest publishes it.
    pub fn canonical(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("n_symbols = {}\n", self.n_symbols));
        s.push_str(&format!("n_mel = {}\n", self.n_mel));
        s.push_str(&format!("style_dim = {}\n", self.style_dim));
        s.push_str(&format!("noise = {}\n", self.noise));
        s.push_str(&format!("frames_per_second = {}\n", self.frames_per_second));
        s.push_str(&format!("durations = {},{}\n", self.dur_min, self.dur_max));
        s.push_str(&format!("train_symbols = {},{}\n", self.train_symbols.0, self.train_symbols.1));
        s.push_str(&format!("eval_symbols = {},{}\n", self.eval_symbols.0, self.eval_symbols.1));
        s.push_str(&format!("prompt_symbols = {},{}\n", self.prompt_symbols.0, self.prompt_symbols.1));
        s.push_str(&format!("eval_prompt_noise_mult = {}\n", self.eval_prompt_noise_mult));
        s.push_str(&format!("prototypes = {}\n", list(&self.prototypes)));
        s.push_str(&format!("g = {}\n", list(&self.g)));
        s.push_str(&format!("h = {}\n", list(&self.h)));
        s
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn draw_prototypes(rng: &mut CounterRng, v: usize, f: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(v);
    while rows.len() < v {
        let cand = rng.normal_vec(f);
        let far = rows
            .iter()
            .all(|r| r.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_PROTO_SEPARATION);
        if far {
            rows.push(cand);
        }
    }
    rows.concat()
}

/// Columns of `[G | H]` form an orthonormal set (Gram–Schmidt on Gaussian
/// draws), so the two style effects are not confounded.
fn draw_style_maps(rng: &mut CounterRng, f: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(2 * k <= f, "style maps need 2k <= F");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(2 * k);
    while basis.len() < 2 * k {
        let mut v = rng.normal_vec(f);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    // column j of G is basis[j], column j of H is basis[k + j]; stored F×k
    let mut g = vec![0.0; f * k];
    let mut h = vec![0.0; f * k];
    for c in 0..f {
        for j in 0..k {
            g[c * k + j] = basis[j][c];
            h[c * k + j] = basis[k + j][c];
        }
    }
    (g, h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub symbols: Vec<usize>,
    pub durations: Vec<usize>,
    pub z: Vec<f64>,
    /// `T × F`, frame-major.
    pub frames: Vec<f64>,
    pub prompt_symbols: Vec<usize>,
    /// `T_p × F`, frame-major, same `z`.
    pub prompt_frames: Vec<f64>,
}

impl SynthUtterance {
    pub fn n_frames(&self, n_mel: usize) -> usize {
        self.frames.len() / n_mel
    }

    pub fn n_prompt_frames(&self, n_mel: usize) -> usize {
        self.prompt_frames.len() / n_mel
    }
}

/// Symbols with no immediate repeats, so every symbol is a separate run.
pub fn draw_symbols(rng: &mut CounterRng, n: usize, n_symbols: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(n);
    while out.len() < n {
        let s = rng.range_inclusive(0, n_symbols - 1);
        if out.last() != Some(&s) {
            out.push(s);
        }
    }
    out
}

fn render(symbols: &[usize], durations: &[usize], z: &[f64], noise: f64, rng: &mut CounterRng, spec: &GeneratorSpec) -> Vec<f64> {
    let (gain, offset) = spec.style_terms(z);
    let total: usize = durations.iter().sum();
    let mut frames = Vec::with_capacity(total * spec.n_mel);
    for (&s, &d) in symbols.iter().zip(durations) {
        let p = spec.prototype(s);
        for _ in 0..d {
            for c in 0..spec.n_mel {
                frames.push(p[c] * gain[c] + offset[c] + noise * rng.normal());
            }
        }
    }
    frames
}

/// Render `symbols` with style `z`, plus a prompt from a fresh symbol draw
/// with the same style. `prompt_noise_mult` scales the prompt noise.
pub fn gen_utterance(symbols: &[usize], z: &[f64], rng: &mut CounterRng, spec: &GeneratorSpec, prompt_noise_mult: f64) -> Result<SynthUtterance> {
    if symbols.is_empty() {
        return Err(SynthError::Invalid("empty symbol sequence".into()));
    }
    if symbols.iter().any(|&s| s >= spec.n_symbols) || z.len() != spec.style_dim {
        return Err(SynthError::Invalid("symbol id or style dimension out of range".into()));
    }
    let durations: Vec<usize> = symbols.iter().map(|_| rng.range_inclusive(spec.dur_min, spec.dur_max)).collect();
    let frames = render(symbols, &durations, z, spec.noise, rng, spec);
    let n_prompt = rng.range_inclusive(spec.prompt_symbols.0, spec.prompt_symbols.1);
    let prompt_symbols = draw_symbols(rng, n_prompt, spec.n_symbols);
    let prompt_durations: Vec<usize> = prompt_symbols.iter().map(|_| rng.range_inclusive(spec.dur_min, spec.dur_max)).collect();
    let mut prompt_frames = render(&prompt_symbols, &prompt_durations, z, spec.noise * prompt_noise_mult, rng, spec);
    prompt_frames.truncate(MAX_PROMPT_FRAMES * spec.n_mel);
    Ok(SynthUtterance {
        symbols: symbols.to_vec(),
        durations,
        z: z.to_vec(),
        frames,
        prompt_symbols,
        prompt_frames,
    })
}

/// Least-squares fit of style plus per-frame prototype assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleFit {
    pub z: Vec<f64>,
    pub assignment: Vec<usize>,
    pub residual: f64,
}

fn assign(frames: &[f64], z: &[f64], spec: &GeneratorSpec) -> Vec<usize> {
    let (gain, offset) = spec.style_terms(z);
    let f = spec.n_mel;
    frames
        .chunks(f)
        .map(|fr| {
            (0..spec.n_symbols)
                .map(|s| {
                    let p = spec.prototype(s);
                    let e: f64 = (0..f).map(|c| (fr[c] - p[c] * gain[c] - offset[c]).powi(2)).sum();
                    (s, e)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(0, |(s, _)| s)
        })
        .collect()
}

fn residual(frames: &[f64], assignment: &[usize], z: &[f64], spec: &GeneratorSpec) -> f64 {
    let (gain, offset) = spec.style_terms(z);
    let f = spec.n_mel;
    frames
        .chunks(f)
        .zip(assignment)
        .map(|(fr, &s)| {
            let p = spec.prototype(s);
            (0..f).map(|c| (fr[c] - p[c] * gain[c] - offset[c]).powi(2)).sum::<f64>()
        })
        .sum()
}

fn solve_small(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        for k in 0..n {
            a.swap(col * n + k, piv * n + k);
        }
        b.swap(col, piv);
        for r in col + 1..n {
            let m = a[r * n + col] / a[col * n + col];
            for k in col..n {
                a[r * n + k] -= m * a[col * n + k];
            }
            b[r] -= m * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Some(x)
}

/// Levenberg–Marquardt on `z` with the assignment held fixed.
fn refine_z(frames: &[f64], assignment: &[usize], z0: &[f64], spec: &GeneratorSpec, iters: usize) -> Vec<f64> {
    let (f, k) = (spec.n_mel, spec.style_dim);
    let mut z = z0.to_vec();
    let mut lambda = 1e-3;
    let mut cur = residual(frames, assignment, &z, spec);
    for _ in 0..iters {
        let mut jtj = vec![0.0; k * k];
        let mut jtr = vec![0.0; k];
        let pre_g: Vec<f64> = (0..f).map(|c| (0..k).map(|j| spec.g[c * k + j] * z[j]).sum::<f64>().tanh()).collect();
        let pre_h: Vec<f64> = (0..f).map(|c| (0..k).map(|j| spec.h[c * k + j] * z[j]).sum::<f64>().tanh()).collect();
        for (fr, &s) in frames.chunks(f).zip(assignment) {
            let p = spec.prototype(s);
            for c in 0..f {
                let model = p[c] * (1.0 + MULT_GAIN * pre_g[c]) + ADD_GAIN * pre_h[c];
                let r = fr[c] - model;
                let dg = MULT_GAIN * p[c] * (1.0 - pre_g[c] * pre_g[c]);
                let dh = ADD_GAIN * (1.0 - pre_h[c] * pre_h[c]);
                let jrow: Vec<f64> = (0..k).map(|j| dg * spec.g[c * k + j] + dh * spec.h[c * k + j]).collect();
                for a in 0..k {
                    jtr[a] += jrow[a] * r;
                    for b in 0..k {
                        jtj[a * k + b] += jrow[a] * jrow[b];
                    }
                }
            }
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for d in 0..k {
                a[d * k + d] += lambda * (1.0 + jtj[d * k + d]);
            }
            let Some(step) = solve_small(a, jtr.clone(), k) else { break };
            let cand: Vec<f64> = z.iter().zip(&step).map(|(x, s)| x + s).collect();
            let r = residual(frames, assignment, &cand, spec);
            if r < cur {
                z = cand;
                cur = r;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    z
}

fn starts(k: usize) -> Vec<Vec<f64>> {
    let mut rng = CounterRng::new(0x5eed);
    let mut out = vec![vec![0.0; k]];
    out.extend((0..6).map(|_| rng.normal_vec(k).into_iter().map(|v| 1.5 * v).collect()));
    out
}

/// Alternate nearest-prototype assignment and style refinement from a few
/// fixed starting points; keep the lowest residual.
pub fn estimate_style(frames: &[f64], spec: &GeneratorSpec) -> StyleFit {
    let mut best: Option<StyleFit> = None;
    for z0 in starts(spec.style_dim) {
        let mut z = z0;
        let mut a = assign(frames, &z, spec);
        for _ in 0..12 {
            z = refine_z(frames, &a, &z, spec, 25);
            let next = assign(frames, &z, spec);
            let done = next == a;
            a = next;
            if done {
                break;
            }
        }
        let r = residual(frames, &a, &z, spec);
        if best.as_ref().is_none_or(|b| r < b.residual) {
            best = Some(StyleFit {
                z,
                assignment: a,
                residual: r,
            });
        }
    }
    best.unwrap_or(StyleFit {
        z: vec![0.0; spec.style_dim],
        assignment: Vec::new(),
        residual: 0.0,
    })
}

/// Remove style from frames with a given `z` (`T × F`).
pub fn destyle(frames: &[f64], z: &[f64], spec: &GeneratorSpec) -> Vec<f64> {
    let (gain, offset) = spec.style_terms(z);
    frames
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i % spec.n_mel;
            (v - offset[c]) / gain[c]
        })
        .collect()
}

/// Per-frame labels to run symbols: runs shorter than `min_run` are merged
/// into the preceding run (or the following one at the start).
pub fn collapse_runs(labels: &[usize], min_run: usize) -> Vec<usize> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some((s, n)) if *s == l => *n += 1,
            _ => runs.push((l, 1)),
        }
    }
    loop {
        let Some(i) = runs.iter().position(|&(_, n)| n < min_run) else { break };
        if runs.len() == 1 {
            break;
        }
        let n = runs[i].1;
        runs.remove(i);
        let target = if i > 0 { i - 1 } else { 0 };
        runs[target].1 += n;
        // neighbours may now carry the same symbol
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
        for r in runs {
            match merged.last_mut() {
                Some(last) if last.0 == r.0 => last.1 += r.1,
                _ => merged.push(r),
            }
        }
        runs = merged;
    }
    runs.into_iter().map(|(s, _)| s).collect()
}

/// Oracle decoder: estimate style, label frames by nearest styled
/// prototype, collapse runs shorter than the minimum duration.
pub fn oracle_transcribe(frames: &[f64], spec: &GeneratorSpec) -> Vec<usize> {
    if frames.is_empty() {
        return Vec::new();
    }
    let fit = estimate_style(frames, spec);
    collapse_runs(&fit.assignment, spec.dur_min)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Cosine between the least-squares style estimates of two frame sets.
pub fn style_similarity(frames_a: &[f64], frames_b: &[f64], spec: &GeneratorSpec) -> Result<f64> {
    if frames_a.is_empty() || frames_b.is_empty() {
        return Err(SynthError::Invalid("style similarity of an empty frame set".into()));
    }
    Ok(cosine(&estimate_style(frames_a, spec).z, &estimate_style(frames_b, spec).z))
}

pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

pub fn cer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(SynthError::Invalid("cer with empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: GeneratorSpec,
    pub train: Vec<SynthUtterance>,
    pub eval: Vec<SynthUtterance>,
}

pub const DEFAULT_TRAIN: usize = 4096;
pub const DEFAULT_EVAL: usize = 128;

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

fn make_split(spec: &GeneratorSpec, stream: u64, n: usize, range: (usize, usize), prompt_mult: f64) -> Result<Vec<SynthUtterance>> {
    let root = CounterRng::new(spec.seed).split(stream);
    (0..n)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let z = rng.normal_vec(spec.style_dim);
            let len = rng.range_inclusive(range.0, range.1);
            let symbols = draw_symbols(&mut rng, len, spec.n_symbols);
            gen_utterance(&symbols, &z, &mut rng, spec, prompt_mult)
        })
        .collect()
}

/// Train split from one RNG stream and the long-utterance, noisy-prompt
/// eval split from another.
pub fn make_corpus(spec: &GeneratorSpec, n_train: usize, n_eval: usize) -> Result<Corpus> {
    spec.validate()?;
    if n_train == 0 || n_eval == 0 {
        return Err(SynthError::Invalid("split sizes must be at least 1".into()));
    }
    Ok(Corpus {
        spec: spec.clone(),
        train: make_split(spec, TRAIN_STREAM, n_train, spec.train_symbols, 1.0)?,
        eval: make_split(spec, EVAL_STREAM, n_eval, spec.eval_symbols, spec.eval_prompt_noise_mult)?,
    })
}

const SPLIT_MAGIC: &[u8; 4] = b"PFXC";
const SPLIT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_split(utts: &[SynthUtterance], n_mel: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SPLIT_MAGIC);
    put_u32(&mut out, SPLIT_VERSION as usize);
    put_u32(&mut out, utts.len());
    for u in utts {
        put_u32(&mut out, u.symbols.len());
        u.symbols.iter().for_each(|&s| put_u32(&mut out, s));
        u.durations.iter().for_each(|&d| put_u32(&mut out, d));
        put_f64s(&mut out, &u.z);
        put_u32(&mut out, u.n_frames(n_mel));
        put_u32(&mut out, n_mel);
        put_f64s(&mut out, &u.frames);
        put_u32(&mut out, u.prompt_symbols.len());
        u.prompt_symbols.iter().for_each(|&s| put_u32(&mut out, s));
        put_u32(&mut out, u.n_prompt_frames(n_mel));
        put_f64s(&mut out, &u.prompt_frames);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SynthError::Format("split file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u32()).collect()
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_split(bytes: &[u8], style_dim: usize) -> Result<Vec<SynthUtterance>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != SPLIT_MAGIC {
        return Err(SynthError::Format("bad split magic".into()));
    }
    if c.u32()? != SPLIT_VERSION as usize {
        return Err(SynthError::Format("unsupported split version".into()));
    }
    let n = c.u32()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let l = c.u32()?;
        let symbols = c.u32s(l)?;
        let durations = c.u32s(l)?;
        let z = c.f64s(style_dim)?;
        let t = c.u32()?;
        let f = c.u32()?;
        let frames = c.f64s(t * f)?;
        let lp = c.u32()?;
        let prompt_symbols = c.u32s(lp)?;
        let tp = c.u32()?;
        let prompt_frames = c.f64s(tp * f)?;
        out.push(SynthUtterance {
            symbols,
            durations,
            z,
            frames,
            prompt_symbols,
            prompt_frames,
        });
    }
    if c.pos != bytes.len() {
        return Err(SynthError::Format("trailing bytes in split file".into()));
    }
    Ok(out)
}

const LAYOUT_DOC: &str = "magic PFXC, u32 version, u32 count; per record: u32 L, L u32 symbols, L u32 durations, style_dim f64 z, u32 T, u32 F, T*F f64 frames, u32 Lp, Lp u32 prompt symbols, u32 Tp, Tp*F f64 prompt frames; all little-endian";

/// Write `manifest.txt`, `train.bin` and `eval.bin` under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n_mel = corpus.spec.n_mel;
    let train = encode_split(&corpus.train, n_mel);
    let eval = encode_split(&corpus.eval, n_mel);
    let digest = |b: &[u8]| Sha256::digest(b).iter().map(|x| format!("{x:02x}")).collect::<String>();
    let mut m = String::new();
    m.push_str(&corpus.spec.canonical());
    m.push_str(&format!("spec_hash = {}\n", corpus.spec.hash()));
    m.push_str(&format!("train.count = {}\n", corpus.train.len()));
    m.push_str(&format!("train.sha256 = {}\n", digest(&train)));
    m.push_str(&format!("eval.count = {}\n", corpus.eval.len()));
    m.push_str(&format!("eval.sha256 = {}\n", digest(&eval)));
    m.push_str(&format!("layout = {LAYOUT_DOC}\n"));
    fs::write(dir.join("train.bin"), train)?;
    fs::write(dir.join("eval.bin"), eval)?;
    let mut f = fs::File::create(dir.join("manifest.txt"))?;
    f.write_all(m.as_bytes())?;
    Ok(())
}

fn manifest_value<'a>(m: &'a str, key: &str) -> Result<&'a str> {
    m.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .ok_or_else(|| SynthError::Format(format!("manifest lacks {key}")))
}

/// Read a corpus back, re-deriving the spec from its seed and noise and
/// checking the published hash.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let mut m = String::new();
    fs::File::open(dir.join("manifest.txt"))?.read_to_string(&mut m)?;
    let seed: u64 = manifest_value(&m, "seed")?
        .parse()
        .map_err(|_| SynthError::Format("bad seed".into()))?;
    let noise: f64 = manifest_value(&m, "noise")?
        .parse()
        .map_err(|_| SynthError::Format("bad noise".into()))?;
    let spec = GeneratorSpec::with_noise(seed, noise);
    if manifest_value(&m, "spec_hash")? != spec.hash() {
        return Err(SynthError::Format("manifest spec hash does not match its generator settings".into()));
    }
    let train = decode_split(&fs::read(dir.join("train.bin"))?, spec.style_dim)?;
    let eval = decode_split(&fs::read(dir.join("eval.bin"))?, spec.style_dim)?;
    Ok(Corpus { spec, train, eval })
}
