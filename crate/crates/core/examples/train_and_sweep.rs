//! Train both decoders on the synthetic corpus, then sweep the fusion
//! weight. Writes `alpha_metrics.csv` and `alpha.svg` into the output
//! directory.
//!
//! `cargo run --release --example train_and_sweep [steps] [n_items] [out_dir]`

use std::path::PathBuf;

use pflux::harness::eval::{ablate_alpha, METRICS_HEADER};
use pflux::harness::plot::render;
use pflux::harness::train::{train_af, train_dg};
use pflux::harness::ExperimentConfig;
use pflux::synthtask::{make_corpus, GeneratorSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    cfg.eval.n_utterances = args.next().and_then(|s| s.parse().ok()).unwrap_or(16);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/sweep".into()));

    let spec = GeneratorSpec::with_noise(cfg.corpus.seed, cfg.corpus.noise);
    let corpus = make_corpus(&spec, cfg.corpus.n_train, cfg.corpus.n_eval).unwrap();
    let log = |label: &'static str| move |step: usize, loss: f64| eprintln!("{label} {step:>5} {loss:.4}");
    let dg = train_dg(&cfg, &corpus, cfg.dg_config(), &mut log("dg")).unwrap();
    let af = train_af(&cfg, &corpus, &mut log("af")).unwrap();
    println!(
        "dg loss {:.3} -> {:.3}, af loss {:.3} -> {:.3}",
        dg.losses.first().unwrap(),
        dg.losses.last().unwrap(),
        af.losses.first().unwrap(),
        af.losses.last().unwrap()
    );

    let rows = ablate_alpha(&cfg, &dg.checkpoint, &af.checkpoint, &corpus, &cfg.eval.alphas).unwrap();
    let mut csv = format!("{METRICS_HEADER}\n");
    for r in &rows {
        println!("{:<24} alpha {:<4} CER {:.4}  style {:.4}", r.run_id, r.alpha, r.proxy_cer, r.style_sim);
        csv.push_str(&r.to_line());
        csv.push('\n');
    }
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("alpha_metrics.csv"), csv).unwrap();
    std::fs::write(out.join("alpha.svg"), render(&rows)).unwrap();
    println!("wrote {}", out.display());
}
