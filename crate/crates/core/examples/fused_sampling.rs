//! Sampling with the piecewise-constant fusion schedule, and the identities
//! at its endpoints. Models are freshly initialized, so the frames
//! themselves are noise-like; the point is the sampler.

use pflux::decoders::{AfModel, DgModel};
use pflux::flowode::{FusionSchedule, NormStats};
use pflux::harness::eval::{eval_items, Decoders, Mode};
use pflux::harness::ExperimentConfig;
use pflux::synthtask::{make_corpus, GeneratorSpec};

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.dg.d_model = 32;
    cfg.dg.n_single = 2;
    cfg.af.d_model = 32;
    cfg.af.heads = 4;
    cfg.af.n_blocks = 2;
    cfg.sampler.n_steps = 10;
    cfg.sampler.n1 = 6;
    let corpus = make_corpus(&GeneratorSpec::new(cfg.corpus.seed), 64, 8).unwrap();
    let f = corpus.spec.n_mel;
    let norm = NormStats::from_frames(corpus.train.iter().flat_map(|u| u.frames.chunks(f)), f);
    let dg = DgModel::<f32>::new(cfg.dg_config(), 1).unwrap();
    let af = AfModel::<f32>::new(cfg.af_config(), 2).unwrap();
    let dec = Decoders { dg: &dg, af: Some(&af), norm: &norm };
    let items = eval_items(&corpus, 4, false).unwrap();

    let schedule = FusionSchedule::new(0.7, cfg.sampler.n1, cfg.sampler.n_steps).unwrap();
    let alphas: Vec<f64> = (0..schedule.n).map(|i| schedule.alpha_at(i).unwrap()).collect();
    println!("alpha per step: {alphas:?}");

    let run = |mode| dec.synthesize(&items, mode, &cfg).unwrap();
    let fused = run(Mode::Fused(schedule));
    for (it, y) in items.iter().zip(&fused) {
        println!("item {}: {} symbols -> {} frames", it.id, it.symbols.len(), y.len() / f);
    }
    let n = cfg.sampler.n_steps;
    let one = run(Mode::Fused(FusionSchedule::constant(1.0, n).unwrap()));
    let zero = run(Mode::Fused(FusionSchedule::constant(0.0, n).unwrap()));
    println!("alpha = 1 everywhere equals DG only: {}", one == run(Mode::DgOnly));
    println!("alpha = 0 everywhere equals AF only: {}", zero == run(Mode::AfOnly));
}
