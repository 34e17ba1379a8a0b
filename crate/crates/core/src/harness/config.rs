//! Plain-text experiment configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! section.key = value   # trailing comment
//! ```
//!
//! Unknown sections or keys are rejected, as are duplicate keys. Missing keys
//! keep their defaults.

use std::fmt::Write as _;
use std::path::Path;

use super::HarnessError;
use crate::decoders::{AfConfig, DgConfig, PromptConditioning};
use crate::flowode::Solver;
use crate::superres::SrConfig;

/// A value that can appear on the right of `=`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! via_from_str {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
via_from_str!(u64, usize);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> Option<Self> {
        parse_list(s)
    }
    fn render(&self) -> String {
        self.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Solver {
    fn parse_value(s: &str) -> Option<Self> {
        Solver::parse(s)
    }
    fn render(&self) -> String {
        self.name().to_string()
    }
}

impl ConfigValue for PromptConditioning {
    fn parse_value(s: &str) -> Option<Self> {
        PromptConditioning::parse(s)
    }
    fn render(&self) -> String {
        self.name().to_string()
    }
}

/// Comma-separated finite reals, e.g. `0,0.25,0.5`.
pub fn parse_list(s: &str) -> Option<Vec<f64>> {
    let v: Option<Vec<f64>> = s.split(',').map(|p| f64::parse_value(p.trim())).collect();
    v.filter(|v| !v.is_empty())
}

macro_rules! section {
    ($(#[$m:meta])* $name:ident $tag:literal { $($field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $(pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl $name {
            pub const SECTION: &'static str = $tag;

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), ConfigValue::render(&self.$field)),)*]
            }

            /// `Ok(false)` for an unknown key.
            fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .ok_or_else(|| format!("bad value {value:?} for {}.{}", $tag, key))?;
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }
        }
    };
}

section!(
    /// Synthetic corpus.
    CorpusSection "corpus" {
        seed: u64 = 7,
        n_train: usize = 4096,
        n_eval: usize = 128,
        noise: f64 = 0.05,
    }
);

section!(DgSection "dg" {
    d_model: usize = 64,
    heads: usize = 4,
    ffn_mult: usize = 2,
    text_layers: usize = 2,
    prompt_layers: usize = 2,
    n_double: usize = 2,
    n_single: usize = 4,
    k_prompt: usize = 16,
    dur_hidden: usize = 64,
    conditioning: PromptConditioning = PromptConditioning::Sequence,
});

section!(AfSection "af" {
    d_model: usize = 128,
    heads: usize = 8,
    ffn_mult: usize = 2,
    text_layers: usize = 2,
    prompt_layers: usize = 2,
    n_blocks: usize = 4,
    prompt_dim: usize = 64,
});

section!(SrSection "sr" {
    d_model: usize = 64,
    heads: usize = 4,
    hi_channels: usize = 16,
    n_blocks: usize = 2,
    prompt_dim: usize = 16,
    steps: usize = 1500,
    batch_size: usize = 16,
    lr: f64 = 1e-3,
    n_eval: usize = 64,
});

section!(
    /// AdamW and the learning-rate schedule.
    OptimSection "optim" {
        lr: f64 = 1e-3,
        final_lr: f64 = 1e-6,
        decay_fraction: f64 = 0.25,
        weight_decay: f64 = 0.0,
        clip: f64 = 5.0,
        batch_size: usize = 16,
    }
);

section!(CfmSection "cfm" {
    sigma_min: f64 = 0.01,
    cond_dropout_p: f64 = 0.1,
    cfg_gamma: f64 = 1.34,
});

section!(SamplerSection "sampler" {
    solver: Solver = Solver::Midpoint,
    n_steps: usize = 30,
    n1: usize = 20,
    alpha: f64 = 0.7,
});

section!(TrainSection "train" {
    steps: usize = 1500,
    log_every: usize = 50,
    dur_weight: f64 = 0.1,
    dur_steps: usize = 500,
});

section!(EvalSection "eval" {
    n_utterances: usize = 64,
    batch_size: usize = 16,
    alphas: Vec<f64> = vec![0.0, 0.25, 0.5, 0.75, 1.0],
});

section!(RunSection "run" {
    seed: u64 = 1,
});

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSection,
    pub dg: DgSection,
    pub af: AfSection,
    pub sr: SrSection,
    pub optim: OptimSection,
    pub cfm: CfmSection,
    pub sampler: SamplerSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    fn sections(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        vec![
            (CorpusSection::SECTION, self.corpus.entries()),
            (DgSection::SECTION, self.dg.entries()),
            (AfSection::SECTION, self.af.entries()),
            (SrSection::SECTION, self.sr.entries()),
            (OptimSection::SECTION, self.optim.entries()),
            (CfmSection::SECTION, self.cfm.entries()),
            (SamplerSection::SECTION, self.sampler.entries()),
            (TrainSection::SECTION, self.train.entries()),
            (EvalSection::SECTION, self.eval.entries()),
            (RunSection::SECTION, self.run.entries()),
        ]
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<bool, String> {
        match section {
            CorpusSection::SECTION => self.corpus.set(key, value),
            DgSection::SECTION => self.dg.set(key, value),
            AfSection::SECTION => self.af.set(key, value),
            SrSection::SECTION => self.sr.set(key, value),
            OptimSection::SECTION => self.optim.set(key, value),
            CfmSection::SECTION => self.cfm.set(key, value),
            SamplerSection::SECTION => self.sampler.set(key, value),
            TrainSection::SECTION => self.train.set(key, value),
            EvalSection::SECTION => self.eval.set(key, value),
            RunSection::SECTION => self.run.set(key, value),
            _ => Ok(false),
        }
    }

    /// Canonical text form; `parse(&c.print())` gives back `c`.
    pub fn print(&self) -> String {
        let mut out = String::new();
        for (i, (section, entries)) in self.sections().into_iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for (k, v) in entries {
                let _ = writeln!(out, "{section}.{k} = {v}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        Self::parse_named(text, "<config>")
    }

    fn parse_named(text: &str, origin: &str) -> Result<Self, HarnessError> {
        let err = |line: usize, msg: String| HarnessError::Parse {
            origin: origin.to_string(),
            line,
            msg,
        };
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (lhs, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected `section.key = value`, got {line:?}")))?;
            let (lhs, value) = (lhs.trim(), value.trim());
            let (section, key) = lhs
                .split_once('.')
                .ok_or_else(|| err(line_no, format!("key {lhs:?} has no section")))?;
            if !seen.insert(lhs.to_string()) {
                return Err(err(line_no, format!("duplicate key {lhs}")));
            }
            match cfg.set(section, key, value) {
                Ok(true) => {}
                Ok(false) => return Err(err(line_no, format!("unknown key {lhs}"))),
                Err(msg) => return Err(err(line_no, msg)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse_named(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::Contract(format!("config: {msg}")));
        let o = &self.optim;
        if !(o.lr > 0.0) || !(o.final_lr > 0.0) || !(0.0..=1.0).contains(&o.decay_fraction) || o.weight_decay < 0.0 {
            return bad("optimizer settings out of range");
        }
        if !(o.clip > 0.0) || o.batch_size == 0 || self.sr.batch_size == 0 || self.eval.batch_size == 0 {
            return bad("clip and batch sizes must be positive");
        }
        if !(self.sr.lr > 0.0) || self.sr.steps == 0 || self.sr.n_eval == 0 {
            return bad("sr settings out of range");
        }
        let c = &self.cfm;
        if !(c.sigma_min >= 0.0 && c.sigma_min < 1.0) || !(0.0..=1.0).contains(&c.cond_dropout_p) || c.cfg_gamma < 0.0 {
            return bad("cfm settings out of range");
        }
        let s = &self.sampler;
        if s.n_steps == 0 || s.n1 > s.n_steps || !(0.0..=1.0).contains(&s.alpha) {
            return bad("sampler settings out of range");
        }
        if self.eval.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("eval.alphas must lie in [0, 1]");
        }
        let t = &self.train;
        if t.steps == 0 || t.log_every == 0 || t.dur_weight < 0.0 || t.dur_steps == 0 || self.eval.n_utterances == 0 {
            return bad("train/eval budgets must be positive");
        }
        if self.corpus.n_train == 0 || self.corpus.n_eval == 0 || self.corpus.noise < 0.0 {
            return bad("corpus sizes must be positive");
        }
        self.dg_config().validate().map_err(|e| HarnessError::Contract(e.to_string()))?;
        self.af_config().validate().map_err(|e| HarnessError::Contract(e.to_string()))?;
        self.sr_config().validate().map_err(|e| HarnessError::Contract(e.to_string()))?;
        Ok(())
    }

    pub fn dg_config(&self) -> DgConfig {
        let d = &self.dg;
        DgConfig {
            d_model: d.d_model,
            heads: d.heads,
            ffn_mult: d.ffn_mult,
            text_layers: d.text_layers,
            prompt_layers: d.prompt_layers,
            n_double: d.n_double,
            n_single: d.n_single,
            k_prompt: d.k_prompt,
            dur_hidden: d.dur_hidden,
            conditioning: d.conditioning,
            ..DgConfig::default()
        }
    }

    pub fn af_config(&self) -> AfConfig {
        let a = &self.af;
        AfConfig {
            d_model: a.d_model,
            heads: a.heads,
            ffn_mult: a.ffn_mult,
            text_layers: a.text_layers,
            prompt_layers: a.prompt_layers,
            n_blocks: a.n_blocks,
            prompt_dim: a.prompt_dim,
            ..AfConfig::default()
        }
    }

    pub fn sr_config(&self) -> SrConfig {
        let s = &self.sr;
        SrConfig {
            d_model: s.d_model,
            heads: s.heads,
            hi_channels: s.hi_channels,
            n_blocks: s.n_blocks,
            prompt_dim: s.prompt_dim,
            ..SrConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.print()).unwrap(), c);
    }

    #[test]
    fn edited_round_trip() {
        let mut c = ExperimentConfig::default();
        c.optim.lr = 3.0e-4;
        c.dg.conditioning = PromptConditioning::FixedAdaLn;
        c.sampler.solver = Solver::Euler;
        c.eval.alphas = vec![0.1, 1.0 / 3.0];
        let back = ExperimentConfig::parse(&c.print()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_defaults() {
        let c = ExperimentConfig::parse("# header\n\n  optim.lr = 0.002 # faster\nrun.seed=9\n").unwrap();
        assert_eq!(c.optim.lr, 0.002);
        assert_eq!(c.run.seed, 9);
        assert_eq!(c.cfm, CfmSection::default());
    }

    #[test]
    fn rejections_carry_line_numbers() {
        for (text, line) in [
            ("run.seed = 1\noptim.bogus = 3\n", 2),
            ("nosection = 3", 1),
            ("\n\nrun.seed = x", 3),
            ("mystery.key = 1", 1),
            ("run.seed = 1\nrun.seed = 2", 2),
            ("sampler.solver = rk4", 1),
        ] {
            match ExperimentConfig::parse(text) {
                Err(HarnessError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(
            ExperimentConfig::parse("sampler.n1 = 40"),
            Err(HarnessError::Contract(_))
        ));
    }
}
