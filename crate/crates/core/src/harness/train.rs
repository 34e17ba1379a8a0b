//! Training loops for the two decoders, the duration predictor and the
//! super-resolution model.

use std::fmt::Write as _;

use super::config::{ExperimentConfig, OptimSection};
use super::data::{cond_inputs, frame_weights, pad_rows, LengthBuckets};
use super::{HarnessError, Result};
use crate::cfm::{cfm_loss, conditional_dropout, CfmError, NullMask};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::decoders::{AfModel, CondInputs, DgConfig, DgModel};
use crate::encoders::{crop_prompt_and_mask, duration_loss, FRAMES_PER_SECOND, PROMPT_MAX_SECONDS, PROMPT_MIN_SECONDS};
use crate::flowode::NormStats;
use crate::nn::Module;
use crate::numerics::{clip_global_norm, AdamWConfig, AdamWState, CounterRng, LinearTailDecay, Real, Tensor, TensorError};
use crate::superres::{block_average, SrExample, SrModel, SrTask};
use crate::synthtask::Corpus;

/// Sorted-length window that batches are drawn from.
const BUCKET_WINDOW: usize = 256;

const DG_INIT: u64 = 11;
const DG_LOOP: u64 = 12;
const AF_INIT: u64 = 21;
const AF_LOOP: u64 = 22;
const SR_INIT: u64 = 31;
const SR_LOOP: u64 = 32;
const DUR_LOOP: u64 = 42;

pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    CounterRng::new(seed).split(stream).next_u64()
}

/// Window means of the training loss, one point per `log_every` steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    /// `(last step of the window, mean loss)`, steps counted from 1.
    pub points: Vec<(usize, f64)>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.points {
            let _ = writeln!(s, "{step},{loss}");
        }
        s
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub checkpoint: Checkpoint,
    pub losses: LossLog,
}

fn is_non_finite(e: &HarnessError) -> bool {
    matches!(
        e,
        HarnessError::Tensor(TensorError::NonFinite { .. })
            | HarnessError::Cfm(CfmError::Unstable)
            | HarnessError::Cfm(CfmError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Shared optimizer loop: zero grads, loss, backward, clip, AdamW.
fn optimize(
    params: &[Tensor<f32>],
    optim: &OptimSection,
    lr: f64,
    steps: usize,
    log_every: usize,
    observer: &mut dyn FnMut(usize, f64),
    mut step_loss: impl FnMut(usize) -> Result<Tensor<f32>>,
) -> Result<LossLog> {
    let mut adam = AdamWState::new(
        params,
        AdamWConfig {
            lr,
            weight_decay: optim.weight_decay,
            ..AdamWConfig::default()
        },
    )?;
    let schedule = LinearTailDecay {
        peak: lr,
        final_lr: optim.final_lr.min(lr),
        total_steps: steps as u64,
        decay_steps: (steps as f64 * optim.decay_fraction).round() as u64,
    };
    let mut log = LossLog::default();
    let mut window = Vec::with_capacity(log_every);
    for step in 0..steps {
        let diverged = |reason: String| HarnessError::Diverged { step, reason };
        for p in params {
            p.zero_grad();
        }
        let loss = step_loss(step).map_err(|e| if is_non_finite(&e) { diverged(e.to_string()) } else { e })?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(diverged(format!("loss is {value}")));
        }
        loss.backward().map_err(|e| diverged(e.to_string()))?;
        let norm = clip_global_norm(params, optim.clip).map_err(|e| diverged(e.to_string()))?;
        if !norm.is_finite() {
            return Err(diverged(format!("gradient norm is {norm}")));
        }
        adam.set_lr(schedule.lr_at(step as u64));
        adam.step(params)?;
        window.push(value);
        if window.len() == log_every || step + 1 == steps {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            log.points.push((step + 1, mean));
            observer(step + 1, mean);
            window.clear();
        }
    }
    Ok(log)
}

/// Normalized training targets with a length-bucketed sampler.
pub struct TtsData<'c> {
    pub corpus: &'c Corpus,
    pub norm: NormStats,
    targets: Vec<Vec<f64>>,
    buckets: LengthBuckets,
}

impl<'c> TtsData<'c> {
    pub fn new(corpus: &'c Corpus) -> Self {
        let f = corpus.spec.n_mel;
        let norm = NormStats::from_frames(corpus.train.iter().flat_map(|u| u.frames.chunks(f)), f);
        let targets: Vec<Vec<f64>> = corpus.train.iter().map(|u| norm.normalize(&u.frames)).collect();
        let lengths: Vec<usize> = corpus.train.iter().map(|u| u.n_frames(f)).collect();
        Self {
            corpus,
            norm,
            targets,
            buckets: LengthBuckets::new(&lengths, BUCKET_WINDOW),
        }
    }
}

/// One training batch: the prompt is a crop of each target, and the cropped
/// span is excluded from the loss.
pub struct TtsBatch {
    pub inp: CondInputs<f32>,
    pub x1: Tensor<f32>,
    pub weights: Vec<f32>,
    pub nulls: Vec<NullMask>,
    pub durations: Vec<Vec<usize>>,
    pub frames: Vec<usize>,
}

pub fn tts_batch(data: &TtsData<'_>, batch: usize, dropout_p: f64, rng: &mut CounterRng) -> Result<TtsBatch> {
    let f = data.corpus.spec.n_mel;
    let idx = data.buckets.draw(rng, batch);
    let mut prompts = Vec::with_capacity(batch);
    let mut spans = Vec::with_capacity(batch);
    for &i in &idx {
        let target = &data.targets[i];
        let t = target.len() / f;
        // Keep at least half of every target in the loss.
        let hi = (PROMPT_MAX_SECONDS * FRAMES_PER_SECOND).min(t / 2).max(1);
        let lo = (PROMPT_MIN_SECONDS * FRAMES_PER_SECOND).min(hi);
        let crop = crop_prompt_and_mask(target, f, rng, lo, hi)?
            .ok_or_else(|| HarnessError::Contract(format!("utterance {i} too short for a prompt crop")))?;
        prompts.push(crop.prompt);
        spans.push(crop.mask);
    }
    let nulls: Vec<NullMask> = idx.iter().map(|_| conditional_dropout(NullMask::NONE, dropout_p, rng)).collect();
    let utts: Vec<_> = idx.iter().map(|&i| &data.corpus.train[i]).collect();
    let styles: Vec<&[f64]> = utts.iter().map(|u| u.z.as_slice()).collect();
    let prompt_refs: Vec<&[f64]> = prompts.iter().map(Vec::as_slice).collect();
    let inp = cond_inputs(utts.iter().map(|u| u.symbols.clone()).collect(), &styles, &prompt_refs, f)?;
    let target_refs: Vec<&[f64]> = idx.iter().map(|&i| data.targets[i].as_slice()).collect();
    let (x1, frames) = pad_rows(&target_refs, f)?;
    let t_max = x1.shape()[1];
    Ok(TtsBatch {
        inp,
        weights: frame_weights(&frames, t_max, Some(&spans)),
        x1,
        nulls,
        durations: utts.iter().map(|u| u.durations.clone()).collect(),
        frames,
    })
}

fn dg_descriptor_seed(cfg: &ExperimentConfig) -> u64 {
    stream_seed(cfg.run.seed, DG_INIT)
}

/// DG decoder and duration predictor trained jointly.
pub fn train_dg(cfg: &ExperimentConfig, corpus: &Corpus, dg: DgConfig, observer: &mut dyn FnMut(usize, f64)) -> Result<Trained<DgModel<f32>>> {
    let data = TtsData::new(corpus);
    let model: DgModel<f32> = DgModel::new(dg, dg_descriptor_seed(cfg))?;
    let params = model.params();
    let mut rng = CounterRng::new(stream_seed(cfg.run.seed, DG_LOOP));
    let losses = optimize(&params, &cfg.optim, cfg.optim.lr, cfg.train.steps, cfg.train.log_every, observer, |_| {
        let b = tts_batch(&data, cfg.optim.batch_size, cfg.cfm.cond_dropout_p, &mut rng)?;
        let cond = model.condition(&b.inp, &b.nulls, Some(&b.durations))?;
        let flow = cfm_loss(|t, x| model.field(&cond, t, x), &b.x1, Some(&b.weights), &mut rng, cfg.cfm.sigma_min)?;
        let dur = duration_loss(&cond.log_durations, &b.durations)?;
        Ok(flow.add(&dur.scale(cfg.train.dur_weight as f32)?)?)
    })?;
    let checkpoint = Checkpoint::capture(ModelKind::Dg, model.config.descriptor(), data.norm.clone(), cfg.run.seed, &model);
    Ok(Trained { model, checkpoint, losses })
}

/// AF decoder trained with ground-truth frame counts.
pub fn train_af(cfg: &ExperimentConfig, corpus: &Corpus, observer: &mut dyn FnMut(usize, f64)) -> Result<Trained<AfModel<f32>>> {
    let data = TtsData::new(corpus);
    let model: AfModel<f32> = AfModel::new(cfg.af_config(), stream_seed(cfg.run.seed, AF_INIT))?;
    let params = model.params();
    let mut rng = CounterRng::new(stream_seed(cfg.run.seed, AF_LOOP));
    let losses = optimize(&params, &cfg.optim, cfg.optim.lr, cfg.train.steps, cfg.train.log_every, observer, |_| {
        let b = tts_batch(&data, cfg.optim.batch_size, cfg.cfm.cond_dropout_p, &mut rng)?;
        let cond = model.condition(&b.inp, &b.nulls, &b.frames)?;
        Ok(cfm_loss(|t, x| model.field(&cond, t, x), &b.x1, Some(&b.weights), &mut rng, cfg.cfm.sigma_min)?)
    })?;
    let checkpoint = Checkpoint::capture(ModelKind::Af, model.config.descriptor(), data.norm.clone(), cfg.run.seed, &model);
    Ok(Trained { model, checkpoint, losses })
}

/// Fine-tune only the duration predictor of a trained DG checkpoint.
pub fn train_duration(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    dg_ckpt: &Checkpoint,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<Trained<DgModel<f32>>> {
    dg_ckpt.expect(ModelKind::Dg, None)?;
    let data = TtsData::new(corpus);
    dg_ckpt.norm.require_match(&data.norm)?;
    let model: DgModel<f32> = DgModel::new(DgConfig::from_descriptor(&dg_ckpt.descriptor)?, dg_ckpt.seed)?;
    dg_ckpt.restore_into(&model)?;
    let params = model.duration.params();
    let mut rng = CounterRng::new(stream_seed(cfg.run.seed, DUR_LOOP));
    let losses = optimize(&params, &cfg.optim, cfg.optim.lr, cfg.train.dur_steps, cfg.train.log_every, observer, |_| {
        let b = tts_batch(&data, cfg.optim.batch_size, 0.0, &mut rng)?;
        let cond = model.condition(&b.inp, &b.nulls, Some(&b.durations))?;
        Ok(duration_loss(&cond.log_durations, &b.durations)?)
    })?;
    let checkpoint = Checkpoint::capture(ModelKind::Dg, model.config.descriptor(), data.norm.clone(), dg_ckpt.seed, &model);
    Ok(Trained { model, checkpoint, losses })
}

/// Super-resolution examples with scalar normalization of the high-rate
/// signal; block averages are taken after normalizing.
pub struct SrData {
    pub norm: NormStats,
    pub train: Vec<SrExample>,
    pub eval: Vec<SrExample>,
}

impl SrData {
    pub fn new(corpus: &Corpus) -> Self {
        let task = SrTask::new(&corpus.spec);
        let f = corpus.spec.n_mel;
        let raw_train: Vec<SrExample> = corpus.train.iter().map(|u| task.example(u, f)).collect();
        let norm = NormStats::from_frames(raw_train.iter().flat_map(|e| e.high.chunks(1)), 1);
        Self::with_norm(corpus, norm)
    }

    pub fn with_norm(corpus: &Corpus, norm: NormStats) -> Self {
        let task = SrTask::new(&corpus.spec);
        let f = corpus.spec.n_mel;
        let prep = |u| {
            let e = task.example(u, f);
            let high = norm.normalize(&e.high);
            SrExample {
                low: block_average(&high, crate::superres::SR_FACTOR),
                high,
                prompt: norm.normalize(&e.prompt),
            }
        };
        Self {
            train: corpus.train.iter().map(prep).collect(),
            eval: corpus.eval.iter().map(prep).collect(),
            norm,
        }
    }
}

pub fn train_sr(cfg: &ExperimentConfig, corpus: &Corpus, observer: &mut dyn FnMut(usize, f64)) -> Result<Trained<SrModel<f32>>> {
    let data = SrData::new(corpus);
    let model: SrModel<f32> = SrModel::new(cfg.sr_config(), stream_seed(cfg.run.seed, SR_INIT))?;
    let params = model.params();
    let lengths: Vec<usize> = data.train.iter().map(|e| e.low.len()).collect();
    let buckets = LengthBuckets::new(&lengths, BUCKET_WINDOW);
    let mut rng = CounterRng::new(stream_seed(cfg.run.seed, SR_LOOP));
    let losses = optimize(&params, &cfg.optim, cfg.sr.lr, cfg.sr.steps, cfg.train.log_every, observer, |_| {
        let idx = buckets.draw(&mut rng, cfg.sr.batch_size);
        let low: Vec<Vec<f64>> = idx.iter().map(|&i| data.train[i].low.clone()).collect();
        let prompts: Vec<Vec<f64>> = idx.iter().map(|&i| data.train[i].prompt.clone()).collect();
        let highs: Vec<&[f64]> = idx.iter().map(|&i| data.train[i].high.as_slice()).collect();
        let (x1, lens) = pad_rows::<f32>(&highs, 1)?;
        let (b, n) = (x1.shape()[0], x1.shape()[1]);
        let weights = frame_weights(&lens, n, None);
        let emb = model.prompt_embedding(&prompts)?;
        let cond = model.condition(&low, &emb)?;
        let field = |t: &[f32], x: &Tensor<f32>| model.field(&cond, t, &x.reshape(&[b, n])?)?.reshape(&[b, n, 1]);
        Ok(cfm_loss(field, &x1, Some(&weights), &mut rng, cfg.cfm.sigma_min)?)
    })?;
    let checkpoint = Checkpoint::capture(ModelKind::Sr, model.config.descriptor(), data.norm.clone(), cfg.run.seed, &model);
    Ok(Trained { model, checkpoint, losses })
}

pub fn load_dg(ckpt: &Checkpoint) -> Result<DgModel<f32>> {
    ckpt.expect(ModelKind::Dg, None)?;
    let m = DgModel::new(DgConfig::from_descriptor(&ckpt.descriptor)?, ckpt.seed)?;
    ckpt.restore_into(&m)?;
    Ok(m)
}

pub fn load_af(ckpt: &Checkpoint) -> Result<AfModel<f32>> {
    ckpt.expect(ModelKind::Af, None)?;
    let m = AfModel::new(crate::decoders::AfConfig::from_descriptor(&ckpt.descriptor)?, ckpt.seed)?;
    ckpt.restore_into(&m)?;
    Ok(m)
}

pub fn load_sr(ckpt: &Checkpoint) -> Result<SrModel<f32>> {
    ckpt.expect(ModelKind::Sr, None)?;
    let m = SrModel::new(crate::superres::SrConfig::from_descriptor(&ckpt.descriptor)?, ckpt.seed)?;
    ckpt.restore_into(&m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthtask::{make_corpus, GeneratorSpec};

    fn tiny_cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.dg.d_model = 16;
        c.dg.heads = 2;
        c.dg.n_double = 1;
        c.dg.n_single = 1;
        c.dg.text_layers = 1;
        c.dg.prompt_layers = 1;
        c.dg.k_prompt = 4;
        c.dg.dur_hidden = 8;
        c.af.d_model = 16;
        c.af.heads = 2;
        c.af.n_blocks = 1;
        c.af.text_layers = 1;
        c.af.prompt_layers = 1;
        c.af.prompt_dim = 8;
        c.optim.batch_size = 4;
        c.train.steps = 6;
        c.train.log_every = 4;
        c.train.dur_steps = 3;
        c.sr.steps = 4;
        c.sr.batch_size = 3;
        c.sr.d_model = 16;
        c.sr.heads = 2;
        c.sr.n_blocks = 1;
        c.sr.hi_channels = 4;
        c.validate().unwrap();
        c
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let cfg = tiny_cfg();
        let corpus = make_corpus(&GeneratorSpec::new(5), 24, 4).unwrap();
        let mut seen = Vec::new();
        let a = train_dg(&cfg, &corpus, cfg.dg_config(), &mut |s, l| seen.push((s, l))).unwrap();
        let b = train_dg(&cfg, &corpus, cfg.dg_config(), &mut |_, _| {}).unwrap();
        assert_eq!(a.losses.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![4, 6]);
        assert_eq!(seen, a.losses.points);
        assert_eq!(a.losses.to_csv(), b.losses.to_csv());
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());

        let af = train_af(&cfg, &corpus, &mut |_, _| {}).unwrap();
        assert_eq!(af.checkpoint.kind, ModelKind::Af);
        assert!(af.checkpoint.norm.matches(&a.checkpoint.norm));

        let dur = train_duration(&cfg, &corpus, &a.checkpoint, &mut |_, _| {}).unwrap();
        let changed: Vec<bool> = a
            .checkpoint
            .params
            .iter()
            .zip(&dur.checkpoint.params)
            .map(|(x, y)| x.values != y.values)
            .collect();
        for (rec, c) in a.checkpoint.params.iter().zip(changed) {
            assert_eq!(c, rec.name.starts_with("duration"), "{}", rec.name);
        }

        let sr = train_sr(&cfg, &corpus, &mut |_, _| {}).unwrap();
        assert_eq!(sr.checkpoint.kind, ModelKind::Sr);
        assert!(load_sr(&sr.checkpoint).is_ok());
        assert!(load_dg(&sr.checkpoint).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let mut cfg = tiny_cfg();
        cfg.optim.lr = 1e30;
        cfg.train.steps = 50;
        let corpus = make_corpus(&GeneratorSpec::new(5), 24, 4).unwrap();
        match train_af(&cfg, &corpus, &mut |_, _| {}) {
            Err(HarnessError::Diverged { step, .. }) => assert!(step > 0 && step < 50),
            other => panic!("expected divergence, got {:?}", other.map(|t| t.losses)),
        }
    }
}
