use pflux::numerics::CounterRng;
use pflux::synthtask::{cer, edit_distance, estimate_style, gen_utterance, destyle, make_corpus, oracle_transcribe, style_similarity, draw_symbols, GeneratorSpec};

#[test]
fn noiseless_transcription_is_exact() {
    let spec = GeneratorSpec::with_noise(11, 0.0);
    let c = make_corpus(&spec, 100, 1).unwrap();
    for u in &c.train {
        assert_eq!(oracle_transcribe(&u.frames, &spec), u.symbols);
    }
}

#[test]
fn noisy_symbol_accuracy() {
    let spec = GeneratorSpec::new(12);
    let c = make_corpus(&spec, 500, 1).unwrap();
    let (mut errs, mut total) = (0, 0);
    for u in &c.train {
        errs += edit_distance(&u.symbols, &oracle_transcribe(&u.frames, &spec));
        total += u.symbols.len();
    }
    let acc = 1.0 - errs as f64 / total as f64;
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn pure_noise_scores_near_chance() {
    let spec = GeneratorSpec::new(13);
    let mut rng = CounterRng::new(1);
    let mut total = 0.0;
    for _ in 0..50 {
        let reference = draw_symbols(&mut rng, 12, spec.n_symbols);
        let noise: Vec<f64> = rng.normal_vec(60 * spec.n_mel);
        total += cer(&reference, &oracle_transcribe(&noise, &spec)).unwrap();
    }
    assert!(total / 50.0 > 0.7, "{}", total / 50.0);
}

#[test]
fn destyling_with_estimate_matches_truth() {
    let spec = GeneratorSpec::new(14);
    let c = make_corpus(&spec, 20, 1).unwrap();
    for u in &c.train {
        let fit = estimate_style(&u.frames, &spec);
        let a = destyle(&u.frames, &fit.z, &spec);
        let b = destyle(&u.frames, &u.z, &spec);
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
    }
}

#[test]
fn random_style_pairs_are_uncorrelated() {
    let spec = GeneratorSpec::new(15);
    let mut rng = CounterRng::new(2);
    let mut sum = 0.0;
    let mut same_sum = 0.0;
    let n = 1000;
    for _ in 0..n {
        let za = rng.normal_vec(4);
        let zb = rng.normal_vec(4);
        let sa = draw_symbols(&mut rng, 6, spec.n_symbols);
        let sb = draw_symbols(&mut rng, 6, spec.n_symbols);
        let a = gen_utterance(&sa, &za, &mut rng, &spec, 1.0).unwrap();
        let b = gen_utterance(&sb, &zb, &mut rng, &spec, 1.0).unwrap();
        sum += style_similarity(&a.frames, &b.frames, &spec).unwrap();
        same_sum += style_similarity(&a.frames, &a.prompt_frames, &spec).unwrap();
    }
    assert!((sum / n as f64).abs() < 0.1, "{}", sum / n as f64);
    assert!(same_sum / n as f64 > 0.95, "{}", same_sum / n as f64);
}
