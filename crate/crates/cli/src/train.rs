use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chamtoy::config::{KeyValues, Settings};
use chamtoy::data::corpus::{disk_images, read_corpus};
use chamtoy::data::synthetic::{generate, SyntheticSpec};
use chamtoy::data::{pack_sft, PretrainBatches, SftBatches, TokenCorpus, Tokenizers};
use chamtoy::numerics::Scalar;
use chamtoy::model::{load_checkpoint, ModelConfig, Transformer, PRESETS};
use chamtoy::trainer::{ablation_arms, resume, run_ablation, train_loop, RunSummary, Trainer, ABLATIONS};
use chamtoy::Error;
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::run_config::{RunConfig, SEED_ENV};
use crate::{ConfigArgs, Outcome};

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok().filter(|s| !s.is_empty())
}

fn layered(base: RunConfig, args: &ConfigArgs) -> anyhow::Result<(RunConfig, KeyValues)> {
    let mut cfg = base;
    let explicit = cfg.layer(env_seed().as_deref(), args.config.as_deref(), &args.sets, args.seed)?;
    Ok((cfg, explicit))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.to_kv().write(&dir.join("config"))?;
    Ok(())
}

fn fresh_run_dir(dir: &Path) -> anyhow::Result<()> {
    if dir.join("config").exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; pick a new --out or pass --resume",
            dir.display()
        ))
        .into());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Records per kind are scaled by this factor (1.0 = 200 text docs).
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

pub fn synth(args: SynthArgs) -> anyhow::Result<Outcome> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed().map(|s| s.parse()).transpose().context("parsing CHAMTOY_SEED")?.unwrap_or(0),
    };
    if !(args.scale > 0.0) {
        return Err(Error::Config("--scale must be positive".into()).into());
    }
    let d = SyntheticSpec::default();
    let n = |x: usize| ((x as f64 * args.scale).round() as usize).max(1);
    let spec = SyntheticSpec {
        text_docs: n(d.text_docs),
        pairs: n(d.pairs),
        interleaved: n(d.interleaved),
        curated: n(d.curated),
        sft: n(d.sft),
        ..d
    };
    let corpus = generate(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    corpus.write(&args.out)?;
    println!(
        "wrote {} records and {} images to {}",
        corpus.records.len(),
        corpus.images.len(),
        args.out.display()
    );
    Ok(Outcome::Done)
}

#[derive(Debug, Args)]
pub struct TokenizerArgs {
    /// A `.jsonl` file or a directory of them; images resolve relative to it.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

pub fn tokenizer(args: TokenizerArgs) -> anyhow::Result<Outcome> {
    let (cfg, _) = layered(RunConfig::default(), &args.cfg)?;
    let (base, records) = read_corpus(&args.corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let lookup = disk_images(&base);
    let (tok, report) = Tokenizers::train(&records, &lookup, &cfg.tokenizer, &mut rng)?;
    tok.save(&args.out)?;

    let mut echo = KeyValues::new();
    echo.set("seed", cfg.train.seed);
    echo.extend_prefixed("tokenizer", &cfg.tokenizer.to_kv());
    echo.write(&args.out.join("config"))?;

    let mut r = KeyValues::new();
    r.set("bpe_vocab", tok.bpe.vocab_size());
    r.set("codebook_size", tok.codebook.size());
    r.set("tokens_per_image", tok.tokens_per_image());
    r.set("distinct_patches", report.distinct_patches);
    r.set("padded_codebook", report.padded);
    r.set("kmeans_steps", report.mse_history.len());
    r.set("reconstruction_mse", report.mse_history.last().copied().unwrap_or(0.0));
    r.write(&args.out.join("report"))?;
    print!("{r}");
    Ok(Outcome::Done)
}

fn load_inputs(corpus: &Path, tokenizer: &Path) -> anyhow::Result<(Tokenizers, TokenCorpus)> {
    let tok = Tokenizers::load(tokenizer).with_context(|| format!("loading tokenizer {}", tokenizer.display()))?;
    let (base, records) = read_corpus(corpus)?;
    let encoded = TokenCorpus::encode(&records, &tok.encoder(), &disk_images(&base))?;
    Ok((tok, encoded))
}

/// The vocabulary sizes come from the tokenizer; an explicit setting that
/// disagrees is a contradiction.
fn fit_to_tokenizer(model: &mut ModelConfig, explicit: &KeyValues, tok: &Tokenizers) -> anyhow::Result<()> {
    let fixed = [
        ("model.text_vocab", tok.vocab.text_size()),
        ("model.codebook_size", tok.vocab.codebook_size()),
    ];
    for (key, want) in fixed {
        if let Some(v) = explicit.get(key) {
            if v.parse::<usize>().ok() != Some(want) {
                return Err(Error::Config(format!("{key} = {v} but the tokenizer provides {want}")).into());
            }
        }
    }
    model.text_vocab = tok.vocab.text_size();
    model.codebook_size = tok.vocab.codebook_size();
    Ok(())
}

fn pretrain_data(cfg: &RunConfig, tok: &Tokenizers, corpus: &TokenCorpus) -> anyhow::Result<PretrainBatches> {
    Ok(PretrainBatches::new(
        corpus,
        cfg.mixture.clone(),
        tok.vocab,
        tok.tokens_per_image(),
        cfg.batch_size,
        cfg.seq_len,
        cfg.train.optim.total_steps,
    )?)
}

fn report_summary(label: &str, t: &Trainer, s: &RunSummary) -> Outcome {
    let last = t.rows.last().map_or(Scalar::NAN, |r| r.total());
    println!("{label}: {} steps, final loss {last:.4}", s.steps);
    match s.first_flag {
        Some(step) if s.halted => {
            println!("{label}: divergence flag raised at step {step}; halted");
            Outcome::Halted
        }
        Some(step) => {
            println!("{label}: divergence flag raised at step {step}");
            Outcome::Done
        }
        None => Outcome::Done,
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory written by `tokenizer-train`.
    #[arg(long)]
    tokenizer: PathBuf,
    /// Run directory: config, loss.csv, checkpoints/, final/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "7b-recipe", value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: String,
    /// Toy dimensions and a short run.
    #[arg(long)]
    toy: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run a paired ablation; each arm gets its own run directory.
    #[arg(long, conflicts_with = "resume", value_parser = clap::builder::PossibleValuesParser::new(ABLATIONS))]
    ablate: Option<String>,
    /// Continue the run in --out from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> anyhow::Result<Outcome> {
    if let Some(ckpt) = &args.resume {
        let kv = KeyValues::read(&args.out.join("config"))
            .with_context(|| format!("{} is not a run directory", args.out.display()))?;
        let mut cfg = RunConfig::default();
        cfg.apply(&kv)?;
        let (tok, corpus) = load_inputs(&args.corpus, &args.tokenizer)?;
        let data = pretrain_data(&cfg, &tok, &corpus)?;
        let (t, s) = resume(ckpt, &args.out, &data)?;
        return Ok(report_summary("resumed", &t, &s));
    }

    let (mut cfg, explicit) = layered(RunConfig::for_preset(&args.preset, args.toy)?, &args.cfg)?;
    let (tok, corpus) = load_inputs(&args.corpus, &args.tokenizer)?;
    fit_to_tokenizer(&mut cfg.model, &explicit, &tok)?;
    cfg.validate()?;
    let data = pretrain_data(&cfg, &tok, &corpus)?;
    fresh_run_dir(&args.out)?;
    write_config(&args.out, &cfg)?;

    let Some(kind) = &args.ablate else {
        let (t, s) = train_loop(cfg.model.clone(), &data, cfg.train.clone(), Some(&args.out))?;
        return Ok(report_summary("train", &t, &s));
    };
    let arms = ablation_arms(kind, &cfg.model)?;
    for a in &arms {
        write_config(&args.out.join(&a.label), &RunConfig { model: a.model.clone(), ..cfg.clone() })?;
    }
    let results = run_ablation(&arms, &data, &cfg.train, Some(&args.out))?;
    let mut outcome = Outcome::Done;
    for (label, t, s) in &results {
        if let Outcome::Halted = report_summary(label, t, s) {
            outcome = Outcome::Halted;
        }
    }
    println!("paired traces: {}", args.out.join("ablation.csv").display());
    Ok(outcome)
}

#[derive(Debug, Args)]
pub struct SftArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Checkpoint directory of the pre-trained model.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    toy: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn same_shape(a: &ModelConfig, b: &ModelConfig) -> bool {
    (a.d_model, a.n_layers, a.n_heads, a.n_kv_heads, a.d_ff, a.text_vocab, a.codebook_size, a.tie_embeddings)
        == (b.d_model, b.n_layers, b.n_heads, b.n_kv_heads, b.d_ff, b.text_vocab, b.codebook_size, b.tie_embeddings)
}

pub fn sft(args: SftArgs) -> anyhow::Result<Outcome> {
    let ckpt = load_checkpoint(&args.init)?;
    let (cfg, _) = layered(RunConfig::for_sft(ckpt.config.clone(), args.toy), &args.cfg)?;
    if !same_shape(&cfg.model, &ckpt.config) {
        return Err(Error::Config("fine-tuning cannot change the model's dimensions or vocabulary".into()).into());
    }
    cfg.validate()?;
    let (tok, corpus) = load_inputs(&args.corpus, &args.tokenizer)?;
    if tok.vocab != ckpt.config.vocab() {
        bail!(Error::Config("tokenizer and checkpoint vocabularies differ".into()));
    }
    let packed = pack_sft(&corpus.sft, cfg.seq_len, &tok.vocab);
    if !packed.rejected.is_empty() {
        eprintln!(
            "skipped {} examples longer than data.seq_len = {}",
            packed.rejected.len(),
            cfg.seq_len
        );
    }
    let data = SftBatches::new(packed.sequences, cfg.batch_size)?;
    fresh_run_dir(&args.out)?;
    write_config(&args.out, &cfg)?;
    let model = Transformer {
        config: cfg.model.clone(),
        params: ckpt.params,
    };
    let mut t = Trainer::new(model, cfg.train.clone())?;
    let s = t.run(&data, Some(&args.out), None)?;
    Ok(report_summary("sft", &t, &s))
}
