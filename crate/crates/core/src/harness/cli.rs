//! Command line: `pflux <subcommand> [--config PATH] [--seed INT] [--out DIR]`.
//!
//! Exit codes: 0 on success, 1 on a contract violation (incompatible
//! checkpoints, invalid values, divergence, failed gradient check), 2 on IO,
//! parse and usage errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use super::config::{parse_list, ExperimentConfig};
use super::eval::{ablate_alpha, ablate_prompt_conditioning, append_metrics, require_pair, sr_eval, utterance_cer, Decoders, EvalItem, Mode};
use super::plot::{plot, render};
use super::train::{load_af, load_dg, train_af, train_dg, train_duration, train_sr, LossLog};
use super::{gradsuite, read_text, write_file, HarnessError, Result};
use crate::checkpoint::Checkpoint;
use crate::decoders::PromptConditioning;
use crate::flowode::FusionSchedule;
use crate::synthtask::{estimate_style, make_corpus, oracle_transcribe, read_corpus, write_corpus, Corpus, GeneratorSpec};

#[derive(Debug, Parser)]
#[command(name = "pflux", version, about = "Fused flow-matching decoders on a synthetic speech-like task")]
struct Cli {
    /// Experiment config (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; for gen-corpus, the corpus seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Dg,
    Af,
    Dur,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and a few example prompt files.
    GenCorpus,
    /// Train a DG or AF decoder, or fine-tune a DG duration predictor.
    Train {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        corpus: PathBuf,
        /// DG checkpoint to start from (`--kind dur`).
        #[arg(long)]
        init: Option<PathBuf>,
        /// `sequence` or `fixed_adaln` (DG only).
        #[arg(long)]
        conditioning: Option<String>,
    },
    /// Synthesize features for a symbol string and a prompt file.
    Synth {
        #[arg(long)]
        dg: PathBuf,
        #[arg(long)]
        af: Option<PathBuf>,
        /// Space-separated symbols: letters `a`.. or integer ids.
        #[arg(long)]
        text: String,
        /// Prompt frames, one whitespace-separated frame per line.
        #[arg(long)]
        prompt: PathBuf,
        /// Fusion weight for the first `sampler.n1` steps (needs `--af`).
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Proxy CER and style similarity across fusion weights.
    AblateAlpha {
        #[arg(long)]
        dg: PathBuf,
        #[arg(long)]
        af: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated weights, e.g. `0,0.25,0.5,0.75,1`.
        #[arg(long)]
        alphas: Option<String>,
        /// Early-step count override.
        #[arg(long)]
        n1: Option<usize>,
    },
    /// Sequence versus fixed-embedding prompt conditioning.
    AblatePrompt {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the super-resolution model.
    SrTrain {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Score the super-resolution model against zero-order hold.
    SrEval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Finite-difference checks of all ops and full fields.
    Gradcheck,
    /// Render a metrics CSV as an SVG chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
    },
}

/// Parse `argv` (including the program name), run, return the exit code.
pub fn run(argv: impl IntoIterator<Item = impl Into<OsString> + Clone>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
        if matches!(cli.command, Command::GenCorpus) {
            cfg.corpus.seed = s;
        }
    }
    Ok(cfg)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        crate::checkpoint::CheckpointError::Io(source) => HarnessError::io(path, source),
        other => other.into(),
    })
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    read_corpus(dir).map_err(|e| match e {
        crate::synthtask::SynthError::Io(source) => HarnessError::io(dir, source),
        other => other.into(),
    })
}

fn save_ckpt(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, ckpt.to_bytes())
}

fn frames_to_text(frames: &[f64], f: usize) -> String {
    let mut s = String::new();
    for row in frames.chunks(f) {
        let cols: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cols.join(" "));
    }
    s
}

fn frames_from_text(text: &str, f: usize, origin: &str) -> Result<Vec<f64>> {
    let mut v = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) if row.len() == f && row.iter().all(|x| x.is_finite()) => v.extend(row),
            _ => {
                return Err(HarnessError::Parse {
                    origin: origin.into(),
                    line: i + 1,
                    msg: format!("expected {f} finite values"),
                })
            }
        }
    }
    if v.is_empty() {
        return Err(HarnessError::Parse {
            origin: origin.into(),
            line: 1,
            msg: "no frames".into(),
        });
    }
    Ok(v)
}

/// Letters `a`, `b`, … or integer ids.
pub fn parse_symbols(text: &str, n_symbols: usize) -> Result<Vec<usize>> {
    let syms: Option<Vec<usize>> = text
        .split_whitespace()
        .map(|t| match t.as_bytes() {
            [c @ b'a'..=b'z'] => Some((c - b'a') as usize),
            _ => t.parse().ok(),
        })
        .map(|s| s.filter(|&v| v < n_symbols))
        .collect();
    match syms {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(HarnessError::Contract(format!("text {text:?} is not a list of symbols below {n_symbols}"))),
    }
}

pub fn symbols_to_text(symbols: &[usize]) -> String {
    let names: Vec<String> = symbols
        .iter()
        .map(|&s| if s < 26 { ((b'a' + s as u8) as char).to_string() } else { s.to_string() })
        .collect();
    names.join(" ")
}

const EXAMPLE_PROMPTS: usize = 4;

fn progress<'a>(err: &'a mut dyn Write, label: &str) -> impl FnMut(usize, f64) + 'a {
    let label = label.to_string();
    move |step, loss| {
        let _ = writeln!(err, "{label} step {step} loss {loss:.5}");
    }
}

fn write_training(out_dir: &Path, name: &str, ckpt: &Checkpoint, losses: &LossLog, out: &mut dyn Write) -> Result<()> {
    let path = out_dir.join(format!("{name}.ckpt"));
    save_ckpt(ckpt, &path)?;
    write_file(&out_dir.join(format!("{name}_loss.csv")), losses.to_csv())?;
    let _ = writeln!(
        out,
        "{name}: wrote {} (smoothed loss {:.5} -> {:.5})",
        path.display(),
        losses.first().unwrap_or(f64::NAN),
        losses.last().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&cli)?;
    let dir = cli.out.clone();
    match &cli.command {
        Command::GenCorpus => {
            let spec = GeneratorSpec::with_noise(cfg.corpus.seed, cfg.corpus.noise);
            let corpus = make_corpus(&spec, cfg.corpus.n_train, cfg.corpus.n_eval)?;
            write_corpus(&corpus, &dir).map_err(|e| match e {
                crate::synthtask::SynthError::Io(source) => HarnessError::io(&dir, source),
                other => other.into(),
            })?;
            let f = spec.n_mel;
            for (i, u) in corpus.eval.iter().take(EXAMPLE_PROMPTS).enumerate() {
                write_file(&dir.join(format!("prompts/eval_{i:03}.txt")), frames_to_text(&u.prompt_frames, f))?;
            }
            write_file(&dir.join("config.txt"), cfg.print())?;
            let _ = writeln!(
                out,
                "corpus {}: {} train, {} eval, spec {}",
                dir.display(),
                corpus.train.len(),
                corpus.eval.len(),
                spec.hash()
            );
        }
        Command::Train {
            kind,
            corpus,
            init,
            conditioning,
        } => {
            let corpus = load_corpus(corpus)?;
            match kind {
                Kind::Dg => {
                    let mut dg = cfg.dg_config();
                    if let Some(c) = conditioning {
                        dg.conditioning = PromptConditioning::parse(c)
                            .ok_or_else(|| HarnessError::Usage(format!("unknown conditioning {c:?}")))?;
                    }
                    let name = match dg.conditioning {
                        PromptConditioning::Sequence => "dg".to_string(),
                        c => format!("dg_{}", c.name()),
                    };
                    let t = train_dg(&cfg, &corpus, dg, &mut progress(err, &name))?;
                    write_training(&dir, &name, &t.checkpoint, &t.losses, out)?;
                }
                Kind::Af => {
                    let t = train_af(&cfg, &corpus, &mut progress(err, "af"))?;
                    write_training(&dir, "af", &t.checkpoint, &t.losses, out)?;
                }
                Kind::Dur => {
                    let init = init.as_ref().ok_or_else(|| HarnessError::Usage("--kind dur needs --init DG_CHECKPOINT".into()))?;
                    let base = load_ckpt(init)?;
                    let t = train_duration(&cfg, &corpus, &base, &mut progress(err, "dur"))?;
                    write_training(&dir, "dur", &t.checkpoint, &t.losses, out)?;
                }
            }
        }
        Command::Synth {
            dg,
            af,
            text,
            prompt,
            alpha,
        } => {
            let dg_ckpt = load_ckpt(dg)?;
            let dg_model = load_dg(&dg_ckpt)?;
            let af_ckpt = af.as_ref().map(|p| load_ckpt(p)).transpose()?;
            if let Some(a) = &af_ckpt {
                require_pair(&dg_ckpt, a)?;
            }
            let af_model = af_ckpt.as_ref().map(load_af).transpose()?;
            let f = dg_model.config.n_mel;
            let symbols = parse_symbols(text, dg_model.config.n_symbols)?;
            let prompt_frames = frames_from_text(&read_text(prompt)?, f, &prompt.display().to_string())?;
            // Only the corpus generator's style maps are needed to read a style off the prompt.
            let corpus_spec = GeneratorSpec::new(cfg.corpus.seed);
            let style = estimate_style(&prompt_frames, &corpus_spec).z;
            let item = EvalItem {
                id: 0,
                durations: Vec::new(),
                symbols,
                style,
                prompt: prompt_frames,
                reference: Vec::new(),
            };
            let mode = match (alpha.unwrap_or(cfg.sampler.alpha), af_model.is_some()) {
                (_, false) => Mode::DgOnly,
                (a, true) => Mode::Fused(FusionSchedule::new(a, cfg.sampler.n1, cfg.sampler.n_steps)?),
            };
            let dec = Decoders {
                dg: &dg_model,
                af: af_model.as_ref(),
                norm: &dg_ckpt.norm,
            };
            let frames = dec.synthesize(std::slice::from_ref(&item), mode, &cfg)?.remove(0);
            let hyp = oracle_transcribe(&frames, &corpus_spec);
            write_file(&dir.join("features.txt"), frames_to_text(&frames, f))?;
            write_file(&dir.join("transcription.txt"), format!("{}\n", symbols_to_text(&hyp)))?;
            let _ = writeln!(
                out,
                "{} frames; oracle transcription: {} (CER {:.3})",
                frames.len() / f,
                symbols_to_text(&hyp),
                utterance_cer(&item.symbols, &frames, &corpus_spec)?
            );
        }
        Command::AblateAlpha {
            dg,
            af,
            corpus,
            alphas,
            n1,
        } => {
            let mut cfg = cfg.clone();
            if let Some(n) = n1 {
                cfg.sampler.n1 = *n;
                cfg.validate()?;
            }
            let alphas = match alphas {
                Some(s) => parse_list(s).ok_or_else(|| HarnessError::Usage(format!("bad --alphas {s:?}")))?,
                None => cfg.eval.alphas.clone(),
            };
            if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(HarnessError::Contract("alphas must lie in [0, 1]".into()));
            }
            let (dg, af) = (load_ckpt(dg)?, load_ckpt(af)?);
            let corpus = load_corpus(corpus)?;
            let rows = ablate_alpha(&cfg, &dg, &af, &corpus, &alphas)?;
            let all = append_metrics(&dir.join("alpha_metrics.csv"), &rows)?;
            write_file(&dir.join("alpha.svg"), render(&all))?;
            for r in &rows {
                let _ = writeln!(out, "{} alpha={} proxy_cer={:.4} style_sim={:.4}", r.run_id, r.alpha, r.proxy_cer, r.style_sim);
            }
        }
        Command::AblatePrompt { seq, fixed, corpus } => {
            let (seq, fixed) = (load_ckpt(seq)?, load_ckpt(fixed)?);
            let corpus = load_corpus(corpus)?;
            let rows = ablate_prompt_conditioning(&cfg, &[&seq, &fixed], &corpus)?;
            append_metrics(&dir.join("prompt_metrics.csv"), &rows)?;
            for r in &rows {
                let _ = writeln!(out, "{} proxy_cer={:.4} style_sim={:.4}", r.run_id, r.proxy_cer, r.style_sim);
            }
        }
        Command::SrTrain { corpus } => {
            let corpus = load_corpus(corpus)?;
            let t = train_sr(&cfg, &corpus, &mut progress(err, "sr"))?;
            write_training(&dir, "sr", &t.checkpoint, &t.losses, out)?;
        }
        Command::SrEval { sr, corpus } => {
            let ckpt = load_ckpt(sr)?;
            let corpus = load_corpus(corpus)?;
            let report = sr_eval(&cfg, &ckpt, &corpus)?;
            write_file(&dir.join("sr_metrics.csv"), report.to_csv())?;
            let (m, z) = report.mean_lsd();
            let _ = writeln!(
                out,
                "LSD model {m:.4} vs zero-order hold {z:.4} ({:+.1}%), rate exact: {}",
                100.0 * (m - z) / z,
                report.rate_exact()
            );
        }
        Command::Gradcheck => {
            let report = gradsuite::run(cfg.run.seed)?;
            for r in report.ops.iter().chain(&report.fields) {
                let _ = writeln!(out, "{:<24} max_rel_err {:.3e} ({} coords)", r.name, r.max_rel_err, r.checked);
            }
            let _ = writeln!(
                out,
                "max relative error: ops {:.3e} (< {:.0e}), fields {:.3e} (< {:.0e})",
                report.max_op_error(),
                gradsuite::OP_TOLERANCE,
                report.max_field_error(),
                gradsuite::FIELD_TOLERANCE
            );
            if !report.passed() {
                let _ = writeln!(err, "gradient check failed");
                return Ok(1);
            }
        }
        Command::Plot { csv } => {
            let svg = plot(&read_text(csv)?, &csv.display().to_string())?;
            let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
            let path = dir.join(format!("{stem}.svg"));
            write_file(&path, svg)?;
            let _ = writeln!(out, "wrote {}", path.display());
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("pflux").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let (code, _, err) = call(&["frobnicate"]);
        assert_eq!(code, 2);
        assert!(err.contains("Usage"), "{err}");
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn exit_codes_by_error_class() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.csv");
        assert_eq!(call(&["plot", "--csv", missing.to_str().unwrap()]).0, 2);
        let cfg = dir.path().join("c.txt");
        std::fs::write(&cfg, "sampler.n1 = 99\n").unwrap();
        assert_eq!(call(&["gradcheck", "--config", cfg.to_str().unwrap()]).0, 1);
        std::fs::write(&cfg, "sampler.bogus = 1\n").unwrap();
        assert_eq!(call(&["gradcheck", "--config", cfg.to_str().unwrap()]).0, 2);
    }

    #[test]
    fn symbol_text() {
        assert_eq!(parse_symbols("a b c", 12).unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_symbols("11 a", 12).unwrap(), vec![11, 0]);
        assert!(parse_symbols("z", 12).is_err());
        assert!(parse_symbols("", 12).is_err());
        assert_eq!(symbols_to_text(&[0, 11]), "a l");
    }
}
