use std::path::Path;
use std::process::Command;

const TINY: &str = "\
corpus.n_train = 32
corpus.n_eval = 4
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
optim.batch_size = 4
sampler.n_steps = 2
sampler.n1 = 1
train.steps = 2
train.log_every = 1
eval.n_utterances = 2
eval.batch_size = 2
";

fn pflux(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_pflux"))
        .current_dir(dir)
        .args(args)
        .args(["--config", "tiny.cfg"])
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let (code, out, err) = pflux(dir, args);
    assert_eq!(code, 0, "pflux {args:?}: {err}");
    out
}

#[test]
fn contract_and_io_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(d, &["gen-corpus", "--seed", "3", "--out", "c1"]);
    ok(d, &["gen-corpus", "--seed", "4", "--out", "c2"]);
    ok(d, &["train", "--kind", "dg", "--corpus", "c1", "--out", "m1"]);
    ok(d, &["train", "--kind", "af", "--corpus", "c1", "--out", "m1"]);
    ok(d, &["train", "--kind", "af", "--corpus", "c2", "--out", "m2"]);

    let synth = ok(d, &["synth", "--dg", "m1/dg.ckpt", "--af", "m1/af.ckpt", "--text", "a b c", "--prompt", "c1/prompts/eval_000.txt", "--out", "s"]);
    assert!(synth.contains("oracle transcription"), "{synth}");
    let features = std::fs::read_to_string(d.join("s/features.txt")).unwrap();
    assert!(features.lines().all(|l| l.split_whitespace().count() == 8));

    // Decoders trained on different corpora carry different normalization.
    let (code, _, err) = pflux(d, &["synth", "--dg", "m1/dg.ckpt", "--af", "m2/af.ckpt", "--text", "a b", "--prompt", "c1/prompts/eval_000.txt"]);
    assert_eq!(code, 1, "{err}");
    // An AF checkpoint where a DG one is expected.
    let (code, _, err) = pflux(d, &["ablate-alpha", "--dg", "m1/af.ckpt", "--af", "m1/af.ckpt", "--corpus", "c1", "--out", "a"]);
    assert_eq!(code, 1, "{err}");
    // A DG checkpoint evaluated on a corpus with other statistics.
    let (code, _, err) = pflux(d, &["ablate-alpha", "--dg", "m1/dg.ckpt", "--af", "m1/af.ckpt", "--corpus", "c2", "--out", "a"]);
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = pflux(d, &["ablate-alpha", "--dg", "m1/dg.ckpt", "--af", "m1/af.ckpt", "--corpus", "c1", "--alphas", "0,1.5"]);
    assert_eq!(code, 1);

    let bytes = std::fs::read(d.join("m1/dg.ckpt")).unwrap();
    std::fs::write(d.join("cut.ckpt"), &bytes[..bytes.len() / 3]).unwrap();
    let (code, _, err) = pflux(d, &["synth", "--dg", "cut.ckpt", "--text", "a", "--prompt", "c1/prompts/eval_000.txt"]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = pflux(d, &["synth", "--dg", "missing.ckpt", "--text", "a", "--prompt", "c1/prompts/eval_000.txt"]);
    assert_eq!(code, 2);
    std::fs::write(d.join("bad_prompt.txt"), "1 2 3\n").unwrap();
    let (code, _, err) = pflux(d, &["synth", "--dg", "m1/dg.ckpt", "--text", "a", "--prompt", "bad_prompt.txt"]);
    assert_eq!(code, 2);
    assert!(err.contains("bad_prompt.txt:1"), "{err}");
    let (code, _, _) = pflux(d, &["train", "--kind", "dur", "--corpus", "c1"]);
    assert_eq!(code, 2);
}
