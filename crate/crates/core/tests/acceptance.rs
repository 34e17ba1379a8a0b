//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,3,6` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pflux::cfm::cfg_combine;
use pflux::checkpoint::Checkpoint;
use pflux::decoders::{guided_dg, AfModel, DgModel, PromptConditioning};
use pflux::flowode::{guided, initial_noise, integrate, FusionSchedule, GuidedField, Solver};
use pflux::harness::data::cond_inputs;
use pflux::harness::eval::{ablate_alpha, ablate_prompt_conditioning, eval_items, sr_eval, Decoders, MetricsRow, Mode};
use pflux::harness::pointflow::{self, PointFlowConfig};
use pflux::harness::train::{train_af, train_dg, train_sr, LossLog};
use pflux::harness::{gradsuite, ExperimentConfig};
use pflux::numerics::{no_grad, CounterRng, Tensor};
use pflux::synthtask::{edit_distance, make_corpus, oracle_transcribe, Corpus, GeneratorSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = Result<Outcome, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn c1_gradients() -> Check {
    let start = Instant::now();
    let r = gradsuite::run(1).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let (op, field) = (r.max_op_error(), r.max_field_error());
    Ok(outcome(
        op < gradsuite::OP_TOLERANCE && field < gradsuite::FIELD_TOLERANCE && secs < 120.0,
        format!("max op error {op:.2e} (< 1e-4), max field error {field:.2e} (< 1e-3), {secs:.1}s (< 120s)"),
    ))
}

fn c2_point_target() -> Check {
    let start = Instant::now();
    let cfg = PointFlowConfig::default();
    let run = pointflow::train(&cfg).map_err(err)?;
    let d = pointflow::mean_distance(&run.field, cfg.target, 256, 30, 17).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        d < 0.1 && secs < 60.0,
        format!("mean distance {d:.4} (< 0.1) over 256 samples, {} steps in {secs:.1}s (< 60s)", cfg.steps),
    ))
}

fn decay_error(n: usize, solver: Solver) -> Result<f64, String> {
    let x0 = Tensor::<f64>::from_f64(&[1], &[1.0]).map_err(err)?;
    let x1 = integrate(|_, _, x: &Tensor<f64>| Ok(x.scale(-1.0)?), &x0, n, solver).map_err(err)?;
    Ok((x1.item() - (-1.0f64).exp()).abs())
}

fn c3_solver_order() -> Check {
    let ratio = |s| -> Result<f64, String> { Ok(decay_error(10, s)? / decay_error(20, s)?) };
    let (mid, euler) = (ratio(Solver::Midpoint)?, ratio(Solver::Euler)?);
    Ok(outcome(
        (3.5..=4.5).contains(&mid) && (1.7..=2.3).contains(&euler),
        format!("error ratio N=10/N=20: midpoint {mid:.3} (3.5..4.5), euler {euler:.3} (1.7..2.3)"),
    ))
}

fn same_bits(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
}

fn c4_fusion_identities(m: &Models, corpus: &Corpus, cfg: &ExperimentConfig) -> Check {
    let items = eval_items(corpus, 8, false).map_err(err)?;
    let dec = Decoders {
        dg: &m.dg,
        af: Some(&m.af),
        norm: &m.dg_ckpt.norm,
    };
    let n = cfg.sampler.n_steps;
    let run = |mode| dec.synthesize(&items, mode, cfg).map_err(err);
    let dg_only = run(Mode::DgOnly)?;
    let af_only = run(Mode::AfOnly)?;
    let one = run(Mode::Fused(FusionSchedule::constant(1.0, n).map_err(err)?))?;
    let zero = run(Mode::Fused(FusionSchedule::constant(0.0, n).map_err(err)?))?;
    // The α = 0 row of the sweep schedule is AF-only throughout.
    let sweep_zero = run(Mode::Fused(FusionSchedule::new(0.0, cfg.sampler.n1, n).map_err(err)?))?;

    // γ = 0 against the raw conditional DG field.
    let sub = &items[..4];
    let prompts: Vec<Vec<f64>> = sub.iter().map(|it| m.dg_ckpt.norm.normalize(&it.prompt)).collect();
    let prompt_refs: Vec<&[f64]> = prompts.iter().map(Vec::as_slice).collect();
    let styles: Vec<&[f64]> = sub.iter().map(|it| it.style.as_slice()).collect();
    let inp = cond_inputs::<f32>(sub.iter().map(|it| it.symbols.clone()).collect(), &styles, &prompt_refs, m.dg.config.n_mel)
        .map_err(err)?;
    let gamma_zero = no_grad(|| -> Result<bool, String> {
        let g = guided_dg(&m.dg, &inp).map_err(err)?;
        let frames = g.cond().frames.clone();
        let t_max = frames.iter().copied().max().unwrap_or(0);
        let ids: Vec<u64> = (0..sub.len() as u64).collect();
        let x = initial_noise::<f32>(3, &ids, &frames, t_max, m.dg.config.n_mel).map_err(err)?;
        let mut ok = true;
        for t in [0.0f32, 0.37, 0.9] {
            let raw = m.dg.field(g.cond(), &vec![t; sub.len()], &x).map_err(err)?;
            let via_cfg = guided(&g, t, &x, 0.0).map_err(err)?;
            let (c, u) = g.eval_pair(t, &x).map_err(err)?;
            let combined = cfg_combine(&c, &u, 0.0).map_err(err)?;
            ok &= same_bits(&[raw.to_f64_vec()], &[via_cfg.to_f64_vec()]);
            ok &= same_bits(&[c.to_f64_vec()], &[combined.to_f64_vec()]);
        }
        Ok(ok)
    })?;
    let checks = [
        ("alpha=1 == dg_only", same_bits(&one, &dg_only)),
        ("alpha=0 == af_only", same_bits(&zero, &af_only)),
        ("sweep alpha=0 == af_only", same_bits(&sweep_zero, &af_only)),
        ("gamma=0 == conditional", gamma_zero),
    ];
    let detail = checks.iter().map(|(n, ok)| format!("{n}: {}", if *ok { "bit-identical" } else { "DIFFERS" })).collect::<Vec<_>>().join("; ");
    Ok(outcome(checks.iter().all(|c| c.1), detail))
}

/// Worst deviation of pooled outputs under extra garbage padding, and whether
/// the query pool always yields `k` vectors.
fn pooling_deviation(dg: &DgModel<f32>, af: &AfModel<f32>, n_mel: usize) -> Result<(f64, f64, bool), String> {
    let qp = dg.query_pool.as_ref().ok_or("sequence checkpoint has no query pool")?;
    let mut rng = CounterRng::new(23);
    let (mut q_dev, mut a_dev, mut k_ok) = (0.0f64, 0.0f64, true);
    no_grad(|| -> Result<(), String> {
        for len in [8usize, 40, 200] {
            let valid = rng.normal_vec(len * n_mel);
            let mut reference: Option<(Vec<f64>, Vec<f64>)> = None;
            for pad in [0usize, 5, 64] {
                let mut v = valid.clone();
                v.extend(rng.normal_vec(pad * n_mel).iter().map(|x| 50.0 * x));
                let frames = Tensor::<f32>::from_f64(&[1, len + pad, n_mel], &v).map_err(err)?;
                let enc = dg.prompt_enc.forward(&frames, &[len]).map_err(err)?;
                let q = qp.forward(&enc, &[len]).map_err(err)?;
                k_ok &= q.shape()[1] == qp.k() && qp.k() == 16;
                let enc_af = af.prompt_enc.forward(&frames, &[len]).map_err(err)?;
                let a = af.attn_pool.forward(&enc_af, &[len]).map_err(err)?;
                let (q, a) = (q.to_f64_vec(), a.to_f64_vec());
                match &reference {
                    None => reference = Some((q, a)),
                    Some((q0, a0)) => {
                        let dev = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                        q_dev = q_dev.max(dev(&q, q0));
                        a_dev = a_dev.max(dev(&a, a0));
                    }
                }
            }
        }
        Ok(())
    })?;
    Ok((q_dev, a_dev, k_ok))
}

fn c5_pool_invariance(m: &Models) -> Check {
    let (q, a, k_ok) = pooling_deviation(&m.dg, &m.af, m.dg.config.n_mel)?;
    Ok(outcome(
        q <= 1e-6 && a <= 1e-6 && k_ok,
        format!("query pool max dev {q:.2e}, attn pool max dev {a:.2e} (<= 1e-6) over pads 5,64; K=16 for lengths 8,40,200: {k_ok}"),
    ))
}

fn c6_oracle() -> Check {
    let clean = GeneratorSpec::with_noise(101, 0.0);
    let c = make_corpus(&clean, 100, 1).map_err(err)?;
    let exact = c.train.iter().filter(|u| oracle_transcribe(&u.frames, &clean) == u.symbols).count();
    let noisy = GeneratorSpec::with_noise(102, 0.05);
    let c = make_corpus(&noisy, 500, 1).map_err(err)?;
    let (mut edits, mut total) = (0, 0);
    for u in &c.train {
        edits += edit_distance(&u.symbols, &oracle_transcribe(&u.frames, &noisy));
        total += u.symbols.len();
    }
    let acc = 1.0 - edits as f64 / total as f64;
    Ok(outcome(
        exact == 100 && acc >= 0.99,
        format!("noiseless exact {exact}/100; symbol accuracy at noise 0.05: {:.4} (>= 0.99) over 500", acc),
    ))
}

fn row<'r>(rows: &'r [MetricsRow], run_id: &str, alpha: f64) -> Result<&'r MetricsRow, String> {
    rows.iter().find(|r| r.run_id == run_id && r.alpha == alpha).ok_or_else(|| format!("missing row {run_id} alpha={alpha}"))
}

fn c7_alpha_sweep(m: &Models, corpus: &Corpus, cfg: &ExperimentConfig) -> Check {
    let start = Instant::now();
    let rows = ablate_alpha(cfg, &m.dg_ckpt, &m.af_ckpt, corpus, &cfg.eval.alphas).map_err(err)?;
    let run = format!("alpha_sweep-s{}", cfg.run.seed);
    let endpoints = [row(&rows, &run, 0.0)?, row(&rows, &run, 1.0)?, row(&rows, &format!("{run}-dg_only"), 1.0)?];
    let best_endpoint = endpoints.iter().map(|r| r.proxy_cer).fold(f64::INFINITY, f64::min);
    let inner: Vec<&MetricsRow> = rows.iter().filter(|r| r.run_id == run && r.alpha > 0.0 && r.alpha < 1.0).collect();
    let best_inner = inner.iter().min_by(|a, b| a.proxy_cer.total_cmp(&b.proxy_cer)).ok_or("no intermediate alpha")?;
    let table = rows
        .iter()
        .map(|r| format!("{}{}={:.4}", if r.run_id.ends_with("dg_only") { "dg_only" } else { "a" }, if r.run_id.ends_with("dg_only") { String::new() } else { format!("{}", r.alpha) }, r.proxy_cer))
        .collect::<Vec<_>>()
        .join(" ");
    let best = best_inner.proxy_cer.min(best_endpoint);
    Ok(outcome(
        best_inner.proxy_cer <= best_endpoint + 0.01 && best <= 0.15,
        format!(
            "CER {table}; best intermediate alpha={} {:.4} vs best endpoint {:.4} (+0.01); best {:.4} (<= 0.15); n={} in {:.0}s",
            best_inner.alpha,
            best_inner.proxy_cer,
            best_endpoint,
            best,
            cfg.eval.n_utterances,
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn c8_prompt_conditioning(m: &Models, corpus: &Corpus, cfg: &ExperimentConfig) -> Check {
    let rows = ablate_prompt_conditioning(cfg, &[&m.dg_ckpt, &m.fixed_ckpt], corpus).map_err(err)?;
    let sim = |id: &str| row(&rows, id, 1.0).map(|r| r.style_sim);
    let (seq, seq_mis, fixed) = (sim("sequence-matched")?, sim("sequence-mismatched")?, sim("fixed_adaln-matched")?);
    Ok(outcome(
        seq >= fixed - 0.02 && seq - seq_mis >= 0.3,
        format!("style sim: sequence matched {seq:.4}, fixed matched {fixed:.4} (seq >= fixed - 0.02); sequence mismatched {seq_mis:.4} (gap {:.4} >= 0.3)", seq - seq_mis),
    ))
}

fn c9_superres(m: &Models, corpus: &Corpus, cfg: &ExperimentConfig) -> Check {
    let report = sr_eval(cfg, &m.sr_ckpt, corpus).map_err(err)?;
    let (model, zoh) = report.mean_lsd();
    Ok(outcome(
        model <= 0.9 * zoh && report.rate_exact() && report.signals.len() == 64,
        format!(
            "mean LSD model {model:.4} vs zero-order hold {zoh:.4} ({:+.1}%, need <= -10%) on {} signals; rate exact: {}",
            100.0 * (model - zoh) / zoh,
            report.signals.len(),
            report.rate_exact()
        ),
    ))
}

const TINY_CONFIG: &str = "\
corpus.n_train = 48
corpus.n_eval = 8
dg.d_model = 16
dg.heads = 2
dg.text_layers = 1
dg.prompt_layers = 1
dg.n_double = 1
dg.n_single = 1
dg.k_prompt = 4
dg.dur_hidden = 16
af.d_model = 16
af.heads = 2
af.text_layers = 1
af.prompt_layers = 1
af.n_blocks = 1
af.prompt_dim = 8
sr.d_model = 16
sr.heads = 2
sr.hi_channels = 8
sr.n_blocks = 1
sr.prompt_dim = 8
sr.steps = 6
sr.n_eval = 4
optim.batch_size = 4
sampler.n_steps = 4
sampler.n1 = 2
train.steps = 6
train.log_every = 3
train.dur_steps = 3
eval.n_utterances = 4
eval.batch_size = 4
eval.alphas = 0,0.5,1
";

fn pflux(dir: &Path, args: &[&str]) -> Result<(), String> {
    let cfg = dir.join("tiny.cfg");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pflux"));
    cmd.current_dir(dir).args(args).arg("--config").arg(&cfg);
    let out = cmd.output().map_err(err)?;
    if !out.status.success() {
        return Err(format!("pflux {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn pipeline(dir: &Path) -> Result<(), String> {
    std::fs::write(dir.join("tiny.cfg"), TINY_CONFIG).map_err(err)?;
    let steps: &[&[&str]] = &[
        &["gen-corpus", "--seed", "9", "--out", "corpus"],
        &["train", "--kind", "dg", "--corpus", "corpus", "--out", "m"],
        &["train", "--kind", "dg", "--conditioning", "fixed_adaln", "--corpus", "corpus", "--out", "m"],
        &["train", "--kind", "af", "--corpus", "corpus", "--out", "m"],
        &["train", "--kind", "dur", "--init", "m/dg.ckpt", "--corpus", "corpus", "--out", "m"],
        &["synth", "--dg", "m/dg.ckpt", "--af", "m/af.ckpt", "--text", "a b c d", "--prompt", "corpus/prompts/eval_000.txt", "--out", "s"],
        &["ablate-alpha", "--dg", "m/dg.ckpt", "--af", "m/af.ckpt", "--corpus", "corpus", "--out", "a"],
        &["ablate-prompt", "--seq", "m/dg.ckpt", "--fixed", "m/dg_fixed_adaln.ckpt", "--corpus", "corpus", "--out", "p"],
        &["sr-train", "--corpus", "corpus", "--out", "m"],
        &["sr-eval", "--sr", "m/sr.ckpt", "--corpus", "corpus", "--out", "e"],
        &["plot", "--csv", "p/prompt_metrics.csv", "--out", "p"],
    ];
    for args in steps {
        pflux(dir, args)?;
    }
    Ok(())
}

fn files(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(err)? {
            let p = e.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).map_err(err)?.display().to_string();
                out.insert(rel, std::fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn c10_reproducible() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (fa, fb) = (files(a.path())?, files(b.path())?);
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb.get(*k) != Some(v)).map(|(k, _)| k).collect();
    let kinds = ["ckpt", "csv", "svg"];
    let covered = kinds.iter().all(|k| fa.keys().any(|f| f.ends_with(k)));
    // Rerunning a sweep into the same directory keeps the metrics file.
    let before = std::fs::read(a.path().join("a/alpha_metrics.csv")).map_err(err)?;
    pflux(a.path(), &["ablate-alpha", "--dg", "m/dg.ckpt", "--af", "m/af.ckpt", "--corpus", "corpus", "--out", "a"])?;
    let after = std::fs::read(a.path().join("a/alpha_metrics.csv")).map_err(err)?;
    Ok(outcome(
        differing.is_empty() && fa.len() == fb.len() && covered && before == after,
        format!(
            "{} files compared across two runs, differing: {:?}; checkpoints, CSVs and SVGs present: {covered}; resumed sweep unchanged: {}",
            fa.len(),
            differing,
            before == after
        ),
    ))
}

struct Models {
    dg: DgModel<f32>,
    dg_ckpt: Checkpoint,
    fixed_ckpt: Checkpoint,
    af: AfModel<f32>,
    af_ckpt: Checkpoint,
    sr_ckpt: Checkpoint,
    losses: Vec<(&'static str, LossLog, f64)>,
}

fn train_all(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Models, String> {
    let progress = |label: &'static str| {
        let start = Instant::now();
        move |step: usize, loss: f64| eprintln!("  {label} step {step} loss {loss:.4} ({:.0}s)", start.elapsed().as_secs_f64())
    };
    let timed = |label: &'static str| (label, Instant::now());
    let (l, t0) = timed("dg");
    let dg = train_dg(cfg, corpus, cfg.dg_config(), &mut progress(l)).map_err(err)?;
    let dg_secs = t0.elapsed().as_secs_f64();
    let mut fixed_cfg = cfg.dg_config();
    fixed_cfg.conditioning = PromptConditioning::FixedAdaLn;
    let (l, t0) = timed("dg_fixed_adaln");
    let fixed = train_dg(cfg, corpus, fixed_cfg, &mut progress(l)).map_err(err)?;
    let fixed_secs = t0.elapsed().as_secs_f64();
    let (l, t0) = timed("af");
    let af = train_af(cfg, corpus, &mut progress(l)).map_err(err)?;
    let af_secs = t0.elapsed().as_secs_f64();
    let (l, t0) = timed("sr");
    let sr = train_sr(cfg, corpus, &mut progress(l)).map_err(err)?;
    let sr_secs = t0.elapsed().as_secs_f64();
    Ok(Models {
        losses: vec![
            ("dg", dg.losses.clone(), dg_secs),
            ("dg_fixed_adaln", fixed.losses.clone(), fixed_secs),
            ("af", af.losses.clone(), af_secs),
            ("sr", sr.losses.clone(), sr_secs),
        ],
        dg: dg.model,
        dg_ckpt: dg.checkpoint,
        fixed_ckpt: fixed.checkpoint,
        af: af.model,
        af_ckpt: af.checkpoint,
        sr_ckpt: sr.checkpoint,
    })
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut failures = 0;
    let mut report = |id: &str, name: &str, r: Check| {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!("[{}] {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    let quick: [(u32, &str, fn() -> Check); 4] = [
        (1, "gradient suite", c1_gradients),
        (2, "point-target flow matching", c2_point_target),
        (3, "solver convergence order", c3_solver_order),
        (6, "oracle integrity", c6_oracle),
    ];
    for (id, name, f) in quick {
        if wanted(id) {
            report(&id.to_string(), name, f());
        }
    }

    if [4, 5, 7, 8, 9].into_iter().any(wanted) {
        let cfg = ExperimentConfig::default();
        let spec = GeneratorSpec::with_noise(cfg.corpus.seed, cfg.corpus.noise);
        let trained = make_corpus(&spec, cfg.corpus.n_train, cfg.corpus.n_eval)
            .map_err(err)
            .and_then(|corpus| train_all(&cfg, &corpus).map(|m| (corpus, m)));
        match trained {
            Err(e) => {
                for id in [4u32, 5, 7, 8, 9].into_iter().filter(|&i| wanted(i)) {
                    report(&id.to_string(), "training", Err(e.clone()));
                }
            }
            Ok((corpus, m)) => {
                for (label, log, secs) in &m.losses {
                    let (first, last) = (log.first().unwrap_or(f64::NAN), log.last().unwrap_or(f64::NAN));
                    report(
                        "aux",
                        &format!("{label} training loss"),
                        Ok(outcome(last < 0.5 * first, format!("window mean {first:.4} -> {last:.4} (< half) in {secs:.0}s"))),
                    );
                }
                if wanted(4) {
                    report("4", "fusion and guidance identities", c4_fusion_identities(&m, &corpus, &cfg));
                }
                if wanted(5) {
                    report("5", "pooling padding invariance", c5_pool_invariance(&m));
                }
                if wanted(7) {
                    report("7", "alpha sweep", c7_alpha_sweep(&m, &corpus, &cfg));
                }
                if wanted(8) {
                    report("8", "prompt conditioning", c8_prompt_conditioning(&m, &corpus, &cfg));
                }
                if wanted(9) {
                    report("9", "super-resolution", c9_superres(&m, &corpus, &cfg));
                }
            }
        }
    }

    if wanted(10) {
        report("10", "CLI reproducibility", c10_reproducible());
    }
    println!("acceptance: {failures} failing");
    if failures > 0 {
        std::process::exit(1);
    }
}
