//! Checkpoint directories: `manifest` + `weights.bin` + `config`.
//!
//! `manifest` holds one `name shape dtype offset length` record per tensor
//! (shape as comma-separated extents, offset and length in bytes);
//! `weights.bin` is the concatenation of little-endian buffers; `config` is a
//! flat key-value file with the model configuration, the step counter and any
//! extra run state.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelParams};
use crate::config::{KeyValues, Settings};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, SCALAR_DTYPE};
use crate::trainer::OptimState;

pub const CHECKPOINT_VERSION: u32 = 1;

const SCALAR_BYTES: usize = std::mem::size_of::<Scalar>();

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<OptimState>,
    pub step: u64,
    /// Additional run state stored under `extra.` in the config file.
    pub extra: KeyValues,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams) -> Self {
        Checkpoint {
            config,
            params,
            optimizer: None,
            step: 0,
            extra: KeyValues::new(),
        }
    }
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(vec![]);
    }
    s.split(',').map(|d| d.parse().ok()).collect()
}

fn named_tensors(ckpt: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out = ckpt.params.named();
    if let Some(opt) = &ckpt.optimizer {
        let names: Vec<String> = ckpt.params.named().into_iter().map(|(n, _)| n).collect();
        for (n, m) in names.iter().zip(&opt.first_moment) {
            out.push((format!("optim.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(&opt.second_moment) {
            out.push((format!("optim.v.{n}"), v));
        }
    }
    out
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut manifest = String::new();
    let mut weights = Vec::new();
    for (name, t) in named_tensors(ckpt) {
        let offset = weights.len();
        for v in t.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push_str(&format!(
            "{name} {} {SCALAR_DTYPE} {offset} {}\n",
            shape_str(t.shape()),
            weights.len() - offset
        ));
    }
    let mut cfg = KeyValues::new();
    cfg.set("format_version", CHECKPOINT_VERSION);
    cfg.set("dtype", SCALAR_DTYPE);
    cfg.set("step", ckpt.step);
    cfg.extend_prefixed("model", &ckpt.config.to_kv());
    match &ckpt.optimizer {
        Some(o) => {
            cfg.set("optim.present", true);
            cfg.set("optim.step", o.step);
        }
        None => cfg.set("optim.present", false),
    }
    cfg.extend_prefixed("extra", &ckpt.extra);

    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };
    write("manifest", manifest.as_bytes())?;
    write("weights.bin", &weights)?;
    write("config", cfg.to_string().as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let cfg_path = dir.join("config");
    let kv = KeyValues::read(&cfg_path)?;
    let version: u32 = kv.get_parsed("format_version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &cfg_path,
            format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let dtype = kv.get("dtype").unwrap_or_default();
    if dtype != SCALAR_DTYPE {
        return Err(Error::format(
            &cfg_path,
            format!("checkpoint dtype {dtype}, this build uses {SCALAR_DTYPE}"),
        ));
    }
    let mut config = ModelConfig::default();
    config.apply(&kv.section("model"))?;
    config.validate()?;
    let step: u64 = kv.get_parsed("step")?;

    let weights_path = dir.join("weights.bin");
    let weights = fs::read(&weights_path)
        .map_err(|e| Error::io(format!("reading {}", weights_path.display()), e))?;
    let manifest_path = dir.join("manifest");
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;

    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    let mut covered = 0usize;
    for (i, line) in manifest.lines().enumerate() {
        let bad = |reason: String| Error::format(&manifest_path, format!("line {}: {reason}", i + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, dt, offset, length] = fields[..] else {
            return Err(bad(format!("expected 5 fields, got {}", fields.len())));
        };
        let shape = parse_shape(shape).ok_or_else(|| bad(format!("bad shape `{shape}`")))?;
        if dt != SCALAR_DTYPE {
            return Err(bad(format!("dtype {dt} unsupported")));
        }
        let offset: usize = offset.parse().map_err(|_| bad("bad offset".into()))?;
        let length: usize = length.parse().map_err(|_| bad("bad length".into()))?;
        let elems: usize = shape.iter().product();
        if length != elems * SCALAR_BYTES {
            return Err(bad(format!(
                "length {length} does not match shape {shape:?} ({} bytes)",
                elems * SCALAR_BYTES
            )));
        }
        if offset + length > weights.len() {
            return Err(Error::format(
                &weights_path,
                format!(
                    "length mismatch: `{name}` needs bytes {offset}..{} but the buffer has {}",
                    offset + length,
                    weights.len()
                ),
            ));
        }
        let data = weights[offset..offset + length]
            .chunks_exact(SCALAR_BYTES)
            .map(|c| Scalar::from_le_bytes(c.try_into().expect("chunk size")))
            .collect();
        covered += length;
        tensors.insert(name.to_string(), Tensor::new(shape, data)?);
    }
    if covered != weights.len() {
        return Err(Error::format(
            &weights_path,
            format!(
                "length mismatch: manifest covers {covered} bytes, buffer holds {}",
                weights.len()
            ),
        ));
    }

    let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::format(&manifest_path, format!("missing tensor `{name}`")))?;
        if t.shape() != like.shape() {
            return Err(Error::format(
                &manifest_path,
                format!("`{name}` has shape {:?}, config implies {:?}", t.shape(), like.shape()),
            ));
        }
        Ok(t)
    };

    // Shapes come from the configuration; values from the file.
    let mut params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in params.named_mut() {
        *slot = take(&name, slot)?;
    }
    let optimizer = if kv.get_parsed::<bool>("optim.present")? {
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (name, t) in names.iter().zip(params.tensors()) {
            m.push(take(&format!("optim.m.{name}"), t)?);
            v.push(take(&format!("optim.v.{name}"), t)?);
        }
        Some(OptimState {
            step: kv.get_parsed("optim.step")?,
            first_moment: m,
            second_moment: v,
        })
    } else {
        None
    };
    if let Some(extra_name) = tensors.keys().next() {
        return Err(Error::format(
            &manifest_path,
            format!("unexpected tensor `{extra_name}`"),
        ));
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        step,
        extra: kv.section("extra"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, Transformer};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cfg = preset("toy").unwrap();
        cfg.text_vocab = 40;
        cfg.codebook_size = 8;
        let m = Transformer::new(cfg, &mut rng).unwrap();
        let mut ck = Checkpoint::new(m.config.clone(), m.params.clone());
        ck.optimizer = Some(OptimState::zeros_like(&m.params.tensors()));
        ck.step = 17;
        ck.extra.set("note", "hello");
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ck = sample();
        save_checkpoint(&a, &ck).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, ck);
        save_checkpoint(&b, &loaded).unwrap();
        for f in ["manifest", "weights.bin", "config"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn truncated_buffer_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample()).unwrap();
        let w = dir.path().join("weights.bin");
        let mut bytes = fs::read(&w).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&w, bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample()).unwrap();
        let c = dir.path().join("config");
        let text = fs::read_to_string(&c).unwrap().replace("format_version = 1", "format_version = 2");
        fs::write(&c, text).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
