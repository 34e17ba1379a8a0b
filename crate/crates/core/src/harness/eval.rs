//! Synthesis, scoring and the evaluation sweeps.

use std::fmt::Write as _;
use std::path::Path;

use super::config::ExperimentConfig;
use super::data::{cond_inputs, frame_weights, pad_rows};
use super::train::{load_af, load_dg, load_sr, stream_seed, SrData};
use super::{read_text, write_file, HarnessError, Result};
use crate::cfm::{draw, weighted_mse, NullMask};
use crate::checkpoint::Checkpoint;
use crate::decoders::{guided_af, guided_dg, AfModel, DgModel};
use crate::flowode::{fuse, initial_noise, sample_fused, sample_single, FusionSchedule, NormStats};
use crate::numerics::{no_grad, CounterRng};
use crate::superres::{lsd, sr_sample, zero_order_hold, SR_FACTOR};
use crate::synthtask::{cer, edit_distance, oracle_transcribe, style_similarity, Corpus, GeneratorSpec};

const NOISE_STREAM: u64 = 51;
const LOSS_STREAM: u64 = 52;

pub const METRICS_HEADER: &str = "run_id,alpha,proxy_cer,style_sim,loss,seed,wall_ms";

/// One sweep result. `wall_ms` is written as 0 so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub alpha: f64,
    pub proxy_cer: f64,
    pub style_sim: f64,
    pub loss: f64,
    pub seed: u64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.run_id, self.alpha, self.proxy_cer, self.style_sim, self.loss, self.seed, self.wall_ms
        )
    }

    fn same_key(&self, other: &MetricsRow) -> bool {
        self.run_id == other.run_id && self.alpha == other.alpha
    }
}

pub fn parse_metrics(text: &str, origin: &str) -> Result<Vec<MetricsRow>> {
    let err = |line: usize, msg: String| HarnessError::Parse {
        origin: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(err(1, format!("expected header {METRICS_HEADER:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 7 || cols[0].is_empty() {
            return Err(err(n, format!("expected 7 columns, got {}", cols.len())));
        }
        let real = |j: usize| cols[j].parse::<f64>().map_err(|_| err(n, format!("bad number {:?}", cols[j])));
        let int = |j: usize| cols[j].parse::<u64>().map_err(|_| err(n, format!("bad integer {:?}", cols[j])));
        rows.push(MetricsRow {
            run_id: cols[0].to_string(),
            alpha: real(1)?,
            proxy_cer: real(2)?,
            style_sim: real(3)?,
            loss: real(4)?,
            seed: int(5)?,
            wall_ms: int(6)?,
        });
    }
    Ok(rows)
}

/// Append rows to a metrics CSV, skipping any `(run_id, alpha)` already
/// present so an interrupted sweep can resume. Returns every row in the file.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<Vec<MetricsRow>> {
    let mut existing = if path.exists() {
        parse_metrics(&read_text(path)?, &path.display().to_string())?
    } else {
        Vec::new()
    };
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in &existing {
        let _ = writeln!(text, "{}", r.to_line());
    }
    for r in rows {
        if !existing.iter().any(|e| e.same_key(r)) {
            let _ = writeln!(text, "{}", r.to_line());
            existing.push(r.clone());
        }
    }
    write_file(path, text)?;
    Ok(existing)
}

/// One evaluation request: text, speaker conditioning, and the frames of
/// the target speaker used for scoring.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: u64,
    pub symbols: Vec<usize>,
    pub durations: Vec<usize>,
    pub style: Vec<f64>,
    pub prompt: Vec<f64>,
    /// Ground-truth frames for the text in the target speaker's voice.
    pub reference: Vec<f64>,
}

/// The first `n` eval utterances. With `mismatched`, item `i` takes the
/// prompt and style of utterance `i + 1` (cyclically), a different speaker.
pub fn eval_items(corpus: &Corpus, n: usize, mismatched: bool) -> Result<Vec<EvalItem>> {
    if n > corpus.eval.len() || n < 2 {
        return Err(HarnessError::Contract(format!(
            "need 2..={} eval utterances, asked for {n}",
            corpus.eval.len()
        )));
    }
    Ok((0..n)
        .map(|i| {
            let u = &corpus.eval[i];
            let s = if mismatched { &corpus.eval[(i + 1) % n] } else { u };
            EvalItem {
                id: i as u64,
                symbols: u.symbols.clone(),
                durations: u.durations.clone(),
                style: s.z.clone(),
                prompt: s.prompt_frames.clone(),
                reference: u.frames.clone(),
            }
        })
        .collect())
}

/// How the sampler combines the decoders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    DgOnly,
    AfOnly,
    Fused(FusionSchedule),
}

/// A decoder pair sharing normalization statistics.
pub struct Decoders<'m> {
    pub dg: &'m DgModel<f32>,
    pub af: Option<&'m AfModel<f32>>,
    pub norm: &'m NormStats,
}

impl Decoders<'_> {
    /// Sampled frames (denormalized, `T_i × F`) per item. Frame counts come
    /// from the DG duration predictor in every mode.
    pub fn synthesize(&self, items: &[EvalItem], mode: Mode, cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
        let f = self.dg.config.n_mel;
        let s = &cfg.sampler;
        let gamma = cfg.cfm.cfg_gamma;
        let seed = stream_seed(cfg.run.seed, NOISE_STREAM);
        // Batch in length order to limit padding; per-item noise streams make
        // the result independent of batch composition.
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by_key(|&i| items[i].symbols.len());
        let sorted: Vec<EvalItem> = order.iter().map(|&i| items[i].clone()).collect();
        let mut out = vec![Vec::new(); items.len()];
        let mut pos = 0;
        for chunk in sorted.chunks(cfg.eval.batch_size) {
            let inp = self.inputs(chunk)?;
            let g_dg = guided_dg(self.dg, &inp)?;
            let frames = g_dg.cond().frames.clone();
            let t_max = frames.iter().copied().max().unwrap_or(0);
            let ids: Vec<u64> = chunk.iter().map(|it| it.id).collect();
            let x0 = initial_noise::<f32>(seed, &ids, &frames, t_max, f)?;
            let af = || {
                self.af
                    .ok_or_else(|| HarnessError::Contract("this mode needs an AF checkpoint".into()))
                    .and_then(|m| Ok(guided_af(m, &inp, &frames)?))
            };
            let x = match mode {
                Mode::DgOnly => sample_single(&g_dg, &x0, s.n_steps, gamma, s.solver)?,
                Mode::AfOnly => sample_single(&af()?, &x0, s.n_steps, gamma, s.solver)?,
                Mode::Fused(schedule) => sample_fused(&g_dg, &af()?, &x0, &schedule, gamma, s.solver)?,
            };
            let v = x.to_f64_vec();
            for (b, &t) in frames.iter().enumerate() {
                let start = b * t_max * f;
                out[order[pos]] = self.norm.denormalize(&v[start..start + t * f]);
                pos += 1;
            }
        }
        Ok(out)
    }

    fn inputs(&self, chunk: &[EvalItem]) -> Result<crate::decoders::CondInputs<f32>> {
        let f = self.dg.config.n_mel;
        let prompts: Vec<Vec<f64>> = chunk.iter().map(|it| self.norm.normalize(&it.prompt)).collect();
        let prompt_refs: Vec<&[f64]> = prompts.iter().map(Vec::as_slice).collect();
        let styles: Vec<&[f64]> = chunk.iter().map(|it| it.style.as_slice()).collect();
        Ok(cond_inputs(chunk.iter().map(|it| it.symbols.clone()).collect(), &styles, &prompt_refs, f)?)
    }

    /// Conditional flow-matching loss of `α·v_DG + (1−α)·v_AF` on the
    /// ground-truth frames, one fixed draw per item.
    pub fn fused_loss(&self, items: &[EvalItem], alpha: f64, cfg: &ExperimentConfig) -> Result<f64> {
        let f = self.dg.config.n_mel;
        let mut rng = CounterRng::new(stream_seed(cfg.run.seed, LOSS_STREAM));
        let (mut total, mut weight) = (0.0, 0.0);
        no_grad(|| -> Result<()> {
            for chunk in items.chunks(cfg.eval.batch_size) {
                let inp = self.inputs(chunk)?;
                let nulls = vec![NullMask::NONE; chunk.len()];
                let targets: Vec<Vec<f64>> = chunk.iter().map(|it| self.norm.normalize(&it.reference)).collect();
                let refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
                let (x1, frames) = pad_rows::<f32>(&refs, f)?;
                let w = frame_weights::<f32>(&frames, x1.shape()[1], None);
                let d = draw(&x1, &mut rng, cfg.cfm.sigma_min)?;
                let v_dg = || -> Result<_> {
                    let durations: Vec<Vec<usize>> = chunk.iter().map(|it| it.durations.clone()).collect();
                    let c = self.dg.condition(&inp, &nulls, Some(&durations))?;
                    Ok(self.dg.field(&c, &d.t, &d.x_t)?)
                };
                let v = if alpha == 1.0 || self.af.is_none() {
                    v_dg()?
                } else {
                    let af = self.af.unwrap_or_else(|| unreachable!());
                    let c = af.condition(&inp, &nulls, &frames)?;
                    let v_af = af.field(&c, &d.t, &d.x_t)?;
                    if alpha == 0.0 {
                        v_af
                    } else {
                        fuse(&v_dg()?, &v_af, alpha)?
                    }
                };
                let n: f64 = frames.iter().sum::<usize>() as f64;
                total += weighted_mse(&v, &d.target, Some(&w))?.item() as f64 * n;
                weight += n;
            }
            Ok(())
        })?;
        Ok(total / weight)
    }
}

/// Corpus-level proxy CER (total edits over total reference symbols) and
/// mean style similarity against each item's reference frames.
pub fn score(items: &[EvalItem], outputs: &[Vec<f64>], spec: &GeneratorSpec) -> Result<(f64, f64)> {
    let (mut edits, mut symbols, mut sim) = (0usize, 0usize, 0.0);
    for (it, y) in items.iter().zip(outputs) {
        let hyp = oracle_transcribe(y, spec);
        edits += edit_distance(&it.symbols, &hyp);
        symbols += it.symbols.len();
        sim += style_similarity(y, &it.reference, spec)?;
    }
    Ok((edits as f64 / symbols.max(1) as f64, sim / items.len().max(1) as f64))
}

/// Per-utterance proxy CER.
pub fn utterance_cer(symbols: &[usize], frames: &[f64], spec: &GeneratorSpec) -> Result<f64> {
    Ok(cer(symbols, &oracle_transcribe(frames, spec))?)
}

pub fn require_pair(dg: &Checkpoint, af: &Checkpoint) -> Result<()> {
    dg.norm.require_match(&af.norm)?;
    let n_mel = |c: &Checkpoint| c.descriptor.iter().find(|(k, _)| k == "n_mel").map(|(_, v)| v.clone());
    if n_mel(dg) != n_mel(af) {
        return Err(HarnessError::Contract("DG and AF checkpoints disagree on the feature count".into()));
    }
    Ok(())
}

fn check_corpus_norm(ckpt: &Checkpoint, corpus: &Corpus) -> Result<()> {
    let f = corpus.spec.n_mel;
    let norm = NormStats::from_frames(corpus.train.iter().flat_map(|u| u.frames.chunks(f)), f);
    Ok(ckpt.norm.require_match(&norm)?)
}

/// The α sweep. Each α uses the schedule "α for the first `n1` steps, then
/// AF only"; a final `…-dg_only` row samples with the DG field throughout.
pub fn ablate_alpha(cfg: &ExperimentConfig, dg_ckpt: &Checkpoint, af_ckpt: &Checkpoint, corpus: &Corpus, alphas: &[f64]) -> Result<Vec<MetricsRow>> {
    require_pair(dg_ckpt, af_ckpt)?;
    check_corpus_norm(dg_ckpt, corpus)?;
    let (dg, af) = (load_dg(dg_ckpt)?, load_af(af_ckpt)?);
    let dec = Decoders {
        dg: &dg,
        af: Some(&af),
        norm: &dg_ckpt.norm,
    };
    let items = eval_items(corpus, cfg.eval.n_utterances, false)?;
    let run = format!("alpha_sweep-s{}", cfg.run.seed);
    let mut rows = Vec::new();
    let mut row = |run_id: String, alpha: f64, mode: Mode, loss_alpha: f64| -> Result<()> {
        let out = dec.synthesize(&items, mode, cfg)?;
        let (proxy_cer, style_sim) = score(&items, &out, &corpus.spec)?;
        rows.push(MetricsRow {
            run_id,
            alpha,
            proxy_cer,
            style_sim,
            loss: dec.fused_loss(&items, loss_alpha, cfg)?,
            seed: cfg.run.seed,
            wall_ms: 0,
        });
        Ok(())
    };
    for &a in alphas {
        let schedule = FusionSchedule::new(a, cfg.sampler.n1, cfg.sampler.n_steps)?;
        row(run.clone(), a, Mode::Fused(schedule), a)?;
    }
    row(format!("{run}-dg_only"), 1.0, Mode::DgOnly, 1.0)?;
    Ok(rows)
}

/// Matched versus mismatched prompts for a sequence-conditioned and a
/// fixed-embedding DG checkpoint, DG field only.
pub fn ablate_prompt_conditioning(cfg: &ExperimentConfig, variants: &[&Checkpoint], corpus: &Corpus) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for ckpt in variants {
        check_corpus_norm(ckpt, corpus)?;
        let dg = load_dg(ckpt)?;
        let dec = Decoders {
            dg: &dg,
            af: None,
            norm: &ckpt.norm,
        };
        for mismatched in [false, true] {
            let items = eval_items(corpus, cfg.eval.n_utterances, mismatched)?;
            let out = dec.synthesize(&items, Mode::DgOnly, cfg)?;
            let (proxy_cer, style_sim) = score(&items, &out, &corpus.spec)?;
            rows.push(MetricsRow {
                run_id: format!(
                    "{}-{}",
                    dg.config.conditioning.name(),
                    if mismatched { "mismatched" } else { "matched" }
                ),
                alpha: 1.0,
                proxy_cer,
                style_sim,
                loss: dec.fused_loss(&items, 1.0, cfg)?,
                seed: cfg.run.seed,
                wall_ms: 0,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrReport {
    /// Per signal: `(lsd of the model, lsd of zero-order hold, samples, frames)`.
    pub signals: Vec<(f64, f64, usize, usize)>,
}

impl SrReport {
    pub fn mean_lsd(&self) -> (f64, f64) {
        let n = self.signals.len().max(1) as f64;
        let m = self.signals.iter().map(|s| s.0).sum::<f64>() / n;
        let z = self.signals.iter().map(|s| s.1).sum::<f64>() / n;
        (m, z)
    }

    pub fn rate_exact(&self) -> bool {
        self.signals.iter().all(|s| s.2 == SR_FACTOR * s.3)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("signal,lsd_model,lsd_zoh,samples,frames\n");
        for (i, (m, z, n, t)) in self.signals.iter().enumerate() {
            let _ = writeln!(s, "{i},{m},{z},{n},{t}");
        }
        s
    }
}

/// Score the SR model against zero-order hold on the first `sr.n_eval`
/// held-out signals.
pub fn sr_eval(cfg: &ExperimentConfig, ckpt: &Checkpoint, corpus: &Corpus) -> Result<SrReport> {
    let model = load_sr(ckpt)?;
    let n = cfg.sr.n_eval;
    if n > corpus.eval.len() {
        return Err(HarnessError::Contract(format!("only {} held-out signals", corpus.eval.len())));
    }
    let data = SrData::with_norm(corpus, ckpt.norm.clone());
    let examples = &data.eval[..n];
    let seed = stream_seed(cfg.run.seed, NOISE_STREAM);
    let mut signals = Vec::with_capacity(n);
    for (c, chunk) in examples.chunks(cfg.eval.batch_size).enumerate() {
        let low: Vec<Vec<f64>> = chunk.iter().map(|e| e.low.clone()).collect();
        let prompts: Vec<Vec<f64>> = chunk.iter().map(|e| e.prompt.clone()).collect();
        let emb = no_grad(|| model.prompt_embedding(&prompts))?;
        let ids: Vec<u64> = (0..chunk.len()).map(|i| (c * cfg.eval.batch_size + i) as u64).collect();
        let out = sr_sample(&model, &low, &emb, &ids, cfg.sampler.n_steps, seed)?;
        for (e, y) in chunk.iter().zip(out) {
            let reference = data.norm.denormalize(&e.high);
            let hyp = data.norm.denormalize(&y);
            let zoh = zero_order_hold(&data.norm.denormalize(&e.low), SR_FACTOR);
            signals.push((lsd(&reference, &hyp)?, lsd(&reference, &zoh)?, y.len(), e.low.len()));
        }
    }
    Ok(SrReport { signals })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, alpha: f64) -> MetricsRow {
        MetricsRow {
            run_id: id.into(),
            alpha,
            proxy_cer: 0.125,
            style_sim: -0.5,
            loss: 1.0 / 3.0,
            seed: 4,
            wall_ms: 0,
        }
    }

    #[test]
    fn metrics_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let all = append_metrics(&path, &[row("a", 0.0), row("a", 0.5)]).unwrap();
        assert_eq!(all.len(), 2);
        let first = std::fs::read(&path).unwrap();
        let all = append_metrics(&path, &[row("a", 0.5), row("a", 1.0)]).unwrap();
        assert_eq!(all.len(), 3);
        append_metrics(&path, &[row("a", 1.0)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(std::str::from_utf8(&first).unwrap()));
        assert_eq!(parse_metrics(&text, "m").unwrap(), all);
    }

    #[test]
    fn malformed_metrics_report_line() {
        let bad = format!("{METRICS_HEADER}\na,0,0,0,0,1,0\na,x,0,0,0,1,0\n");
        match parse_metrics(&bad, "m") {
            Err(HarnessError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_metrics("x,y\n", "m"), Err(HarnessError::Parse { line: 1, .. })));
    }
}
