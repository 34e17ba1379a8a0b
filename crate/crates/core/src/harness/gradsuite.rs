//! Finite-difference checks of every op and of the full decoder fields.

use crate::cfm::NullMask;
use crate::decoders::{AfConfig, AfModel, CondInputs, DgConfig, DgModel, PromptConditioning};
use crate::nn::{perturb_params, Module};
use crate::numerics::gradcheck::{check_gradients, op_suite, GradCheckReport};
use crate::numerics::{CounterRng, Result, Tensor};
use crate::superres::{SrConfig, SrModel};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const FIELD_TOLERANCE: f64 = 1e-3;
const PROBES_PER_PARAM: usize = 3;
const PERTURB_STD: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub ops: Vec<GradCheckReport>,
    pub fields: Vec<GradCheckReport>,
}

impl SuiteReport {
    pub fn max_op_error(&self) -> f64 {
        self.ops.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_field_error(&self) -> f64 {
        self.fields.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_op_error() < OP_TOLERANCE && self.max_field_error() < FIELD_TOLERANCE
    }
}

fn randn(rng: &mut CounterRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &rng.normal_vec(n)).expect("shape matches data")
}

fn tiny_inputs(rng: &mut CounterRng, n_mel: usize) -> CondInputs<f64> {
    let mut prompt = randn(rng, &[2, 5, n_mel]).to_vec();
    prompt[(5 + 3) * n_mel..].iter_mut().for_each(|v| *v = 0.0);
    CondInputs {
        symbols: vec![vec![0, 3, 1], vec![4, 2]],
        style: randn(rng, &[2, 2]),
        lang: vec![0, 1],
        prompt: Tensor::new(&[2, 5, n_mel], prompt).expect("shape matches data"),
        prompt_lengths: vec![5, 3],
    }
}

fn dg_check(conditioning: PromptConditioning, rng: &mut CounterRng) -> Result<GradCheckReport> {
    let cfg = DgConfig {
        n_symbols: 5,
        n_mel: 3,
        style_dim: 2,
        d_model: 8,
        heads: 2,
        text_layers: 1,
        prompt_layers: 1,
        n_double: 1,
        n_single: 1,
        k_prompt: 3,
        dur_hidden: 4,
        freq_dim: 8,
        conditioning,
        ..DgConfig::default()
    };
    let model: DgModel<f64> = DgModel::new(cfg, 3)?;
    perturb_params(&model, rng, PERTURB_STD);
    let inp = tiny_inputs(rng, 3);
    let durations = vec![vec![2, 1, 2], vec![1, 3]];
    let x = randn(rng, &[2, 5, 3]);
    let w = randn(rng, &[2, 5, 3]);
    let wd = randn(rng, &[2, 3]);
    let nulls = [NullMask::NONE, NullMask { text: false, prompt: true }];
    let loss = || {
        let c = model.condition(&inp, &nulls, Some(&durations))?;
        let v = model.field(&c, &[0.3, 0.8], &x)?;
        v.mul(&w)?.sum()?.add(&c.log_durations.mul(&wd)?.sum()?)
    };
    let name = format!("dg_field[{}]", model.config.conditioning.name());
    check_gradients(&name, &model.params(), loss, Some(PROBES_PER_PARAM), rng)
}

fn af_check(rng: &mut CounterRng) -> Result<GradCheckReport> {
    let cfg = AfConfig {
        n_symbols: 5,
        n_mel: 3,
        style_dim: 2,
        d_model: 8,
        heads: 2,
        text_layers: 1,
        prompt_layers: 1,
        n_blocks: 2,
        prompt_dim: 4,
        freq_dim: 8,
        ..AfConfig::default()
    };
    let model: AfModel<f64> = AfModel::new(cfg, 4)?;
    perturb_params(&model, rng, PERTURB_STD);
    let inp = tiny_inputs(rng, 3);
    let x = randn(rng, &[2, 6, 3]);
    let w = randn(rng, &[2, 6, 3]);
    let nulls = [NullMask { text: true, prompt: false }, NullMask::NONE];
    let loss = || {
        let c = model.condition(&inp, &nulls, &[6, 4])?;
        model.field(&c, &[0.1, 0.6], &x)?.mul(&w)?.sum()
    };
    check_gradients("af_field", &model.params(), loss, Some(PROBES_PER_PARAM), rng)
}

fn sr_check(rng: &mut CounterRng) -> Result<GradCheckReport> {
    let cfg = SrConfig {
        d_model: 8,
        heads: 2,
        hi_channels: 3,
        n_blocks: 1,
        prompt_dim: 4,
        prompt_model: 4,
        freq_dim: 8,
        ..SrConfig::default()
    };
    let model: SrModel<f64> = SrModel::new(cfg, 5)?;
    perturb_params(&model, rng, PERTURB_STD);
    let low = vec![rng.normal_vec(4), rng.normal_vec(3)];
    let prompts = vec![rng.normal_vec(12), rng.normal_vec(8)];
    let y = randn(rng, &[2, 16]);
    let w = randn(rng, &[2, 16]);
    let loss = || {
        let emb = model.prompt_embedding(&prompts)?;
        let c = model.condition(&low, &emb)?;
        model.field(&c, &[0.4, 0.9], &y)?.mul(&w)?.sum()
    };
    check_gradients("sr_field", &model.params(), loss, Some(PROBES_PER_PARAM), rng)
}

/// All op checks plus end-to-end checks of both decoder fields (both prompt
/// conditioning variants) and the super-resolution field, in 64-bit.
pub fn run(seed: u64) -> Result<SuiteReport> {
    let ops = op_suite(seed)?;
    let mut rng = CounterRng::new(seed).split(99);
    let fields = vec![
        dg_check(PromptConditioning::Sequence, &mut rng)?,
        dg_check(PromptConditioning::FixedAdaLn, &mut rng)?,
        af_check(&mut rng)?,
        sr_check(&mut rng)?,
    ];
    Ok(SuiteReport { ops, fields })
}
