use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn chamtoy(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chamtoy"))
        .current_dir(dir)
        .env_remove("CHAMTOY_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = chamtoy(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    chamtoy(dir, args).status.code().expect("exit code")
}

/// A small corpus with its tokenizer.
fn workspace() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth-corpus", "--out", "corpus", "--seed", "3", "--scale", "0.2"]);
    ok(d, &["tokenizer-train", "--corpus", "corpus", "--out", "tok", "--seed", "3"]);
    tmp
}

const SHORT: [&str; 6] = [
    "--set",
    "optim.total_steps=20",
    "--set",
    "optim.warmup_steps=2",
    "--set",
    "checkpoint_every=10",
];

fn train(d: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--corpus", "corpus", "--tokenizer", "tok", "--out", out, "--toy"];
    args.extend(SHORT);
    args.extend(extra);
    ok(d, &args)
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn tokenizer_training_is_deterministic_and_exact_on_flat_colours() {
    let tmp = workspace();
    let d = tmp.path();
    let report = ok(d, &["tokenizer-train", "--corpus", "corpus", "--out", "tok2", "--seed", "3"]);
    assert!(report.contains("reconstruction_mse = 0\n"), "{report}");
    for f in ["bpe.txt", "codebook.bin", "tokenizer"] {
        assert_eq!(fs::read(d.join("tok").join(f)).unwrap(), fs::read(d.join("tok2").join(f)).unwrap(), "{f}");
    }
    let small = ["tokenizer-train", "--corpus", "corpus", "--out", "t3", "--set", "tokenizer.text_vocab=100"];
    assert_eq!(code(d, &small), 1);
    fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(d, &["tokenizer-train", "--corpus", "empty", "--out", "t4"]), 2);
}

#[test]
fn preset_switches_are_echoed() {
    let tmp = workspace();
    let d = tmp.path();
    train(d, "run", &["--preset", "34b-recipe"]);
    let cfg = read(d.join("run/config"));
    for line in [
        "model.norm_strategy = post-norm-reorder",
        "model.use_qk_norm = true",
        "model.dropout_p = 0",
        "optim.total_steps = 20",
    ] {
        assert!(cfg.contains(line), "missing `{line}` in\n{cfg}");
    }
    assert!(d.join("run/checkpoints/step_000010").is_dir());
    assert_eq!(read(d.join("run/loss.csv")).lines().count(), 21);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let tmp = workspace();
    let d = tmp.path();
    train(d, "run", &[]);
    let loss = fs::read(d.join("run/loss.csv")).unwrap();
    let weights = fs::read(d.join("run/final/weights.bin")).unwrap();
    ok(
        d,
        &[
            "train",
            "--corpus",
            "corpus",
            "--tokenizer",
            "tok",
            "--out",
            "run",
            "--resume",
            "run/checkpoints/step_000010",
        ],
    );
    assert_eq!(fs::read(d.join("run/loss.csv")).unwrap(), loss);
    assert_eq!(fs::read(d.join("run/final/weights.bin")).unwrap(), weights);
}

#[test]
fn qknorm_ablation_differs_in_one_key() {
    let tmp = workspace();
    let d = tmp.path();
    train(d, "abl", &["--ablate", "qknorm"]);
    let on = read(d.join("abl/qknorm-on/config"));
    let off = read(d.join("abl/qknorm-off/config"));
    let diff: Vec<(&str, &str)> = on.lines().zip(off.lines()).filter(|(a, b)| a != b).collect();
    assert_eq!(diff, vec![("model.use_qk_norm = true", "model.use_qk_norm = false")]);
    let paired = read(d.join("abl/ablation.csv"));
    assert!(paired.starts_with("arm,step,ce,"));
    assert_eq!(paired.lines().filter(|l| l.starts_with("qknorm-off,")).count(), 20);
    assert_eq!(paired.lines().filter(|l| l.starts_with("qknorm-on,")).count(), 20);
}

#[test]
fn generation_honours_modality_and_seed() {
    let tmp = workspace();
    let d = tmp.path();
    train(d, "run", &[]);
    let gen = |out: &str, extra: &[&str]| {
        let mut a = vec!["generate", "--checkpoint", "run/final", "--tokenizer", "tok", "--prompt", "the red", "--out-dir", out];
        a.extend(extra);
        ok(d, &a)
    };
    gen("text", &["--modality", "text", "--max-tokens", "40", "--seed", "1"]);
    assert!(!read(d.join("text/manifest")).contains("image"));

    gen("image", &["--modality", "image", "--seed", "1", "--stream"]);
    assert_eq!(read(d.join("image/manifest")).trim(), "image segment_000.ppm");

    gen("a", &["--seed", "7", "--max-tokens", "40"]);
    gen("b", &["--seed", "7", "--max-tokens", "40", "--stream"]);
    assert_eq!(read(d.join("a/manifest")), read(d.join("b/manifest")));
    assert_eq!(read(d.join("a/tokens")), read(d.join("b/tokens")));
}

#[test]
fn sft_and_monitor_report() {
    let tmp = workspace();
    let d = tmp.path();
    train(d, "run", &[]);
    let args = [
        "sft", "--corpus", "corpus", "--tokenizer", "tok", "--init", "run/final", "--out", "sft", "--toy", "--set",
        "optim.total_steps=5",
    ];
    ok(d, &args);
    let cfg = read(d.join("sft/config"));
    assert!(cfg.contains("model.dropout_p = 0.05") && cfg.contains("optim.schedule = cosine"), "{cfg}");
    let report = ok(d, &["monitor-report", "--run", "run"]);
    assert!(report.contains("divergence flag       never raised"), "{report}");
    let plot = read(d.join("run/monitor_plot.csv"));
    assert!(plot.starts_with("step,ce,zloss,total,lr,grad_norm,output_rms,log_rms,ewma_log_rms,diverged\n"));
    assert_eq!(plot.lines().count(), 21);
}

#[test]
fn divergence_halt_exits_with_3() {
    let tmp = workspace();
    let d = tmp.path();
    let mut args = vec!["train", "--corpus", "corpus", "--tokenizer", "tok", "--out", "bad", "--toy"];
    args.extend(SHORT);
    args.extend([
        "--set",
        "monitor.grace_steps=0",
        "--set",
        "optim.warmup_steps=0",
        "--set",
        "monitor.window=1",
        "--set",
        "monitor.slope_threshold=-1",
    ]);
    assert_eq!(code(d, &args), 3);
    assert_eq!(read(d.join("bad/loss.csv")).lines().count(), 3);
}

#[test]
fn usage_and_config_errors_exit_with_1() {
    let tmp = workspace();
    let d = tmp.path();
    assert_eq!(code(d, &["train", "--bogus"]), 1);
    let base = ["train", "--corpus", "corpus", "--tokenizer", "tok", "--out", "r"];
    assert_eq!(code(d, &[&base[..], &["--set", "optim.beta1=1.5"]].concat()), 1);
    assert_eq!(code(d, &[&base[..], &["--set", "model.text_vocab=7"]].concat()), 1);
    assert_eq!(code(d, &[&base[..], &["--set", "data.seq_len=4096"]].concat()), 1);
    assert_eq!(code(d, &["eval"]), 1);
    assert_eq!(code(d, &["--help"]), 0);
}

#[test]
fn eval_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ok(d, &["eval", "--appendix", "--out", "rep"]);
    for rate in ["58.8", "51.6", "69.1", "61.7"] {
        assert!(out.contains(&format!(",{rate},{rate}")), "{rate} in\n{out}");
    }
    assert!(read(d.join("rep/gemini-plus_modality.csv")).contains("mixed,194,145,102,60.4"));

    fs::write(d.join("agree.csv"), "item_id,annotator_id,label\n1,a,yes\n1,b,yes\n2,a,no\n2,b,no\n").unwrap();
    ok(d, &["eval", "--judgments", "agree.csv", "--out", "rep"]);
    let kv = read(d.join("rep/agree_agreement"));
    assert!(kv.contains("alpha = 1\n") && kv.contains("bootstrap_iterations = 1000\n"), "{kv}");

    fs::write(d.join("bad.csv"), "item_id,result,category,modality\n1,win,,\n2,meh,,\n").unwrap();
    let o = chamtoy(d, &["eval", "--outcomes", "bad.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}
