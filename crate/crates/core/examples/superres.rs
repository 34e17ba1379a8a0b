//! Train the 4x super-resolution stage and score it against zero-order hold
//! by log-spectral distance.
//!
//! `cargo run --release --example superres [steps] [n_signals]`

use pflux::harness::eval::sr_eval;
use pflux::harness::train::train_sr;
use pflux::harness::ExperimentConfig;
use pflux::superres::{block_average, zero_order_hold, SR_FACTOR};
use pflux::synthtask::{make_corpus, GeneratorSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::default();
    cfg.sr.steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(400);
    cfg.sr.n_eval = args.next().and_then(|s| s.parse().ok()).unwrap_or(32);

    let corpus = make_corpus(&GeneratorSpec::with_noise(cfg.corpus.seed, cfg.corpus.noise), cfg.corpus.n_train, cfg.corpus.n_eval).unwrap();
    let sr = train_sr(&cfg, &corpus, &mut |step, loss| eprintln!("sr {step:>5} {loss:.4}")).unwrap();

    let x = [1.0, 2.0, 3.0];
    println!("zero-order hold of {x:?}: {:?}", zero_order_hold(&x, SR_FACTOR));
    println!("block average back: {:?}", block_average(&zero_order_hold(&x, SR_FACTOR), SR_FACTOR));

    let report = sr_eval(&cfg, &sr.checkpoint, &corpus).unwrap();
    let (model, zoh) = report.mean_lsd();
    println!(
        "LSD over {} signals: model {model:.4}, zero-order hold {zoh:.4} ({:+.1}%); output rate exact: {}",
        report.signals.len(),
        100.0 * (model - zoh) / zoh,
        report.rate_exact()
    );
}
