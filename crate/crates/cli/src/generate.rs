use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use chamtoy::config::{KeyValues, Settings};
use chamtoy::data::corpus::disk_images;
use chamtoy::data::{ImagePrep, Tokenizers};
use chamtoy::decoder::{
    detokenize_mixed, generate_fused, generate_stream, write_document, DocSegment, Modality, Sampling, StreamEvent,
};
use chamtoy::model::{load_checkpoint, Transformer};
use chamtoy::numerics::Scalar;
use chamtoy::tokenizer::TokenClass;
use chamtoy::{Error, TokenId};
use clap::Args;

use crate::run_config::{RunConfig, SEED_ENV};
use crate::Outcome;

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint directory (a run's `final/` or `checkpoints/step_*`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Prompt text; `<image:path>` inlines an image relative to the file.
    #[arg(long, conflicts_with = "prompt")]
    prompt_file: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    /// End the prompt with the prompt/answer separator used in fine-tuning.
    #[arg(long)]
    sep: bool,
    #[arg(long, value_parser = ["any", "text", "image"])]
    modality: Option<String>,
    /// 0 means greedy.
    #[arg(long)]
    temperature: Option<Scalar>,
    #[arg(long)]
    top_p: Option<Scalar>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Sampling seed; falls back to decode.seed, then $CHAMTOY_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Print tokens as they are produced.
    #[arg(long)]
    stream: bool,
    /// Write the document as text and PPM segments plus a manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

/// Prints the longest valid UTF-8 prefix of `buf` and keeps the rest.
fn flush_utf8(buf: &mut Vec<u8>, out: &mut impl Write) -> std::io::Result<()> {
    let valid = match std::str::from_utf8(buf) {
        Ok(s) => s.len(),
        Err(e) if e.error_len().is_some() => buf.len(),
        Err(e) => e.valid_up_to(),
    };
    out.write_all(&String::from_utf8_lossy(&buf[..valid]).into_owned().into_bytes())?;
    buf.drain(..valid);
    out.flush()
}

pub fn run(args: GenerateArgs) -> anyhow::Result<Outcome> {
    let mut cfg = RunConfig::default();
    let explicit = cfg.layer(None, args.config.as_deref(), &args.sets, None)?;
    let policy = &mut cfg.decode;
    if let Some(m) = &args.modality {
        policy.constraint = m.parse::<Modality>()?;
    }
    match (args.top_p, args.temperature) {
        (Some(p), t) => {
            policy.sampling = Sampling::TopP {
                p,
                temperature: t.unwrap_or(1.0),
            }
        }
        (None, Some(t)) if t == 0.0 => policy.sampling = Sampling::Greedy,
        (None, Some(t)) => policy.sampling = Sampling::Temperature(t),
        (None, None) => {}
    }
    if let Some(n) = args.max_tokens {
        policy.max_tokens = n;
    }
    if let Some(s) = args.seed {
        policy.seed = s;
    } else if explicit.get("decode.seed").is_none() {
        if let Ok(s) = std::env::var(SEED_ENV) {
            policy.set("seed", &s)?;
        }
    }
    policy.validate()?;
    let policy = cfg.decode.clone();

    let tok = Tokenizers::load(&args.tokenizer)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if ckpt.config.vocab() != tok.vocab {
        return Err(Error::Config("tokenizer and checkpoint vocabularies differ".into()).into());
    }
    let model = Transformer {
        config: ckpt.config,
        params: ckpt.params,
    };

    let (text, base) = match (&args.prompt_file, &args.prompt) {
        (Some(f), _) => {
            let t = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            let base = f.parent().map(PathBuf::from).unwrap_or_default();
            (t.strip_suffix('\n').map(str::to_string).unwrap_or(t), base)
        }
        (None, Some(p)) => (p.clone(), PathBuf::from(".")),
        (None, None) => (String::new(), PathBuf::from(".")),
    };
    let mut prompt: Vec<TokenId> = tok
        .encoder()
        .encode_field(&text, &disk_images(&base), ImagePrep::Letterbox)?;
    if args.sep {
        prompt.push(tok.vocab.sep());
    }
    let k = tok.tokens_per_image();

    let (tokens, reason) = if args.stream {
        let mut stream =
            generate_stream(model.session(), &prompt, &policy, &tok.vocab, k)?.with_codebook(&tok.codebook, tok.image_side);
        let mut stdout = std::io::stdout().lock();
        let mut pending = Vec::new();
        for ev in stream.by_ref() {
            match ev? {
                StreamEvent::Token(t) if tok.vocab.classify(t)? == TokenClass::Text => {
                    pending.extend_from_slice(tok.bpe.piece(t).unwrap_or_default());
                    flush_utf8(&mut pending, &mut stdout)?;
                }
                StreamEvent::ImageBlockStart => write!(stdout, "[image")?,
                StreamEvent::ImageBlockEnd { codes, .. } => write!(stdout, " {} tokens]", codes.len())?,
                StreamEvent::Token(_) => {}
            }
        }
        pending.extend_from_slice(b"\n");
        flush_utf8(&mut pending, &mut stdout)?;
        let reason = stream.stop_reason().expect("finished stream");
        (stream.state().emitted.clone(), reason)
    } else {
        let (tokens, reason) = generate_fused(model.session(), &prompt, &policy, &tok.vocab, k)?;
        (tokens, reason)
    };
    let doc = detokenize_mixed(&tokens, &tok.vocab, &tok.codebook, &tok.bpe, tok.image_side)?;
    if !args.stream {
        for seg in &doc {
            match seg {
                DocSegment::Text(s) => print!("{s}"),
                DocSegment::Image(img) => print!("[image {}x{}]", img.width(), img.height()),
            }
        }
        println!();
    }
    eprintln!("stopped: {reason:?} after {} tokens", tokens.len());

    if let Some(dir) = &args.out_dir {
        if dir.join("manifest").exists() {
            return Err(Error::Config(format!("{} already holds a document", dir.display())).into());
        }
        write_document(dir, &doc)?;
        let ids: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
        fs::write(dir.join("tokens"), ids.join(" ") + "\n").with_context(|| format!("writing {}", dir.display()))?;
        let mut echo = KeyValues::new();
        echo.set("checkpoint", args.checkpoint.display());
        echo.set("prompt_tokens", prompt.len());
        echo.extend_prefixed("decode", &policy.to_kv());
        echo.write(&dir.join("config"))?;
    }
    Ok(Outcome::Done)
}
