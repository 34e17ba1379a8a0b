//! The synthetic speech-like corpus and its oracle recognizer.

use pflux::synthtask::{cer, estimate_style, make_corpus, oracle_transcribe, style_similarity, GeneratorSpec};

fn main() {
    let spec = GeneratorSpec::new(7);
    let corpus = make_corpus(&spec, 200, 20).unwrap();
    println!("spec {}: {} symbols, {} channels", spec.hash(), spec.n_symbols, spec.n_mel);

    let u = &corpus.train[0];
    println!("utterance 0: symbols {:?}", u.symbols);
    println!("  durations {:?}, {} frames", u.durations, u.n_frames(spec.n_mel));
    println!("  oracle    {:?}", oracle_transcribe(&u.frames, &spec));
    let fit = estimate_style(&u.prompt_frames, &spec);
    println!("  true z {:.3?}\n  prompt estimate {:.3?}", u.z, fit.z);

    let mean_cer = corpus.train.iter().map(|u| cer(&u.symbols, &oracle_transcribe(&u.frames, &spec)).unwrap()).sum::<f64>()
        / corpus.train.len() as f64;
    println!("mean oracle CER on clean references: {mean_cer:.4}");

    let same = style_similarity(&u.frames, &u.prompt_frames, &spec).unwrap();
    let other = style_similarity(&u.frames, &corpus.train[1].frames, &spec).unwrap();
    println!("style similarity: own prompt {same:.3}, another speaker {other:.3}");
}
