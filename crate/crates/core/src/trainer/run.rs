//! The training loop, `loss.csv`, checkpoint/resume and the ablation harness.
//!
//! Every step draws its batch from its own ChaCha stream (`2·step`) and its
//! dropout masks from another (`2·step + 1`), both keyed by the run seed, so
//! a run resumed from any checkpoint replays the uninterrupted run exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::monitor::{monitor_step, MonitorConfig, NormTrace};
use super::optim::{adamw_step, clip_global_norm, lr_at, OptimConfig, OptimState};
use crate::config::{parse_value, KeyValues, Settings};
use crate::data::BatchSource;
use crate::error::{Error, Result};
use crate::model::{
    forward_batch, load_checkpoint, preset, save_checkpoint, Checkpoint, ForwardOptions,
    ModelConfig, Transformer,
};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::objective::{shift_for_next_token, total_loss_graph};
use crate::TokenId;

const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub monitor: MonitorConfig,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
    pub halt_on_divergence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: OptimConfig::default(),
            monitor: MonitorConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            halt_on_divergence: true,
        }
    }
}

impl Settings for TrainConfig {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("halt_on_divergence", self.halt_on_divergence);
        kv.extend_prefixed("optim", &self.optim.to_kv());
        kv.extend_prefixed("monitor", &self.monitor.to_kv());
        kv
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("optim.") {
            return self.optim.set(k, v);
        }
        if let Some(k) = key.strip_prefix("monitor.") {
            return self.monitor.set(k, v);
        }
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "halt_on_divergence" => self.halt_on_divergence = parse_value(key, v)?,
            other => return Err(Error::config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }
}

/// One row of `loss.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub ce: Scalar,
    pub zloss: Scalar,
    pub lr: Scalar,
    pub grad_norm: Scalar,
    pub output_rms: Scalar,
    pub diverged: bool,
}

impl LossRow {
    pub fn total(&self) -> Scalar {
        self.ce + self.zloss
    }
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let io = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::format(path, format!("record {}: {e}", i + 1)))
        })
        .collect()
}

/// Parameters drawn from the run seed on a stream no step uses.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Transformer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    Transformer::new(config, &mut rng)
}

/// The monitor arms at the end of learning-rate warmup at the earliest.
fn armed_monitor(config: &TrainConfig) -> MonitorConfig {
    MonitorConfig {
        grace_steps: config.monitor.grace_steps.max(config.optim.warmup_steps),
        ..config.monitor.clone()
    }
}

fn step_rngs(seed: u64, step: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut data = ChaCha8Rng::seed_from_u64(seed);
    data.set_stream(2 * step);
    let mut dropout = ChaCha8Rng::seed_from_u64(seed);
    dropout.set_stream(2 * step + 1);
    (data, dropout)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    /// Steps completed, counting any before a resume.
    pub steps: u64,
    /// Stopped early on the divergence flag.
    pub halted: bool,
    pub first_flag: Option<u64>,
}

/// Training state: model, optimizer moments, monitor and the loss log.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Transformer,
    pub config: TrainConfig,
    pub optim: OptimState,
    pub trace: NormTrace,
    pub rows: Vec<LossRow>,
    /// Next step to run.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Transformer, config: TrainConfig) -> Result<Self> {
        config.optim.validate()?;
        let optim = OptimState::zeros_like(&model.params.tensors());
        Ok(Trainer {
            trace: NormTrace::new(armed_monitor(&config)),
            model,
            config,
            optim,
            rows: Vec::new(),
            step: 0,
        })
    }

    /// Restores a run from a checkpoint written by [`Trainer::checkpoint`];
    /// `rows` is the earlier loss log, cut back to the checkpoint's step.
    pub fn from_checkpoint(ckpt: Checkpoint, mut rows: Vec<LossRow>) -> Result<Self> {
        let optim = ckpt
            .optimizer
            .ok_or_else(|| Error::config("checkpoint has no optimizer state to resume from"))?;
        let mut config = TrainConfig::default();
        config.apply(&ckpt.extra.section("train"))?;
        config.optim.validate()?;
        let trace = NormTrace::restore_state(armed_monitor(&config), &ckpt.extra.section("monitor"))?;
        rows.retain(|r| r.step < ckpt.step);
        Ok(Trainer {
            model: Transformer {
                config: ckpt.config,
                params: ckpt.params,
            },
            config,
            optim,
            trace,
            rows,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = KeyValues::new();
        extra.extend_prefixed("train", &self.config.to_kv());
        extra.extend_prefixed("monitor", &self.trace.state_kv());
        Checkpoint {
            config: self.model.config.clone(),
            params: self.model.params.clone(),
            optimizer: Some(self.optim.clone()),
            step: self.step,
            extra,
        }
    }

    /// Runs one step and returns its log row. A non-finite gradient skips
    /// the update; it is an error unless `halt_on_divergence` is set, in
    /// which case the row is logged with the flag raised.
    pub fn train_step(&mut self, data: &dyn BatchSource) -> Result<LossRow> {
        let step = self.step;
        let (mut data_rng, mut dropout_rng) = step_rngs(self.config.seed, step);
        let batch = data.batch(step, &mut data_rng)?;
        let mut inputs: Vec<&[TokenId]> = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for seq in batch.iter().filter(|s| s.tokens.len() >= 2) {
            let (i, t, m) = shift_for_next_token(&seq.tokens, &seq.loss_mask)?;
            inputs.push(i);
            targets.extend_from_slice(t);
            mask.extend(m);
        }
        if inputs.is_empty() {
            return Err(Error::Empty(format!("step {step}: batch has no trainable sequence")));
        }

        let cfg = &self.model.config;
        let mut g = Graph::new();
        let vars = self.model.params.bind(&mut g);
        let fwd = forward_batch(&mut g, &vars, cfg, &inputs, ForwardOptions::train(), &mut dropout_rng)?;
        let loss = total_loss_graph(&mut g, fwd.logits, &targets, &mask, cfg.z_loss_coeff)?;
        let values = loss.breakdown(&g);
        let back = g.backward(loss.total)?;
        let names = self.model.params.named();
        let mut grads: Vec<Tensor> = vars
            .vars()
            .iter()
            .zip(&names)
            .map(|(v, (_, p))| back.get_or_zeros(*v, p))
            .collect();
        let bad = grads
            .iter()
            .position(|t| !t.all_finite())
            .map(|i| names[i].0.clone());
        let grad_norm = clip_global_norm(&mut grads, self.config.optim.clip_norm)?;
        let output = g.value(fwd.last_layer_output);
        let diverged = monitor_step(&mut self.trace, step, output, values.total)?;
        let lr = lr_at(step + 1, &self.config.optim);
        let row = LossRow {
            step,
            ce: values.cross_entropy,
            zloss: values.z_loss,
            lr,
            grad_norm,
            output_rms: self.trace.records().last().map_or(Scalar::NAN, |r| r.output_rms),
            diverged,
        };
        if let Some(name) = bad {
            if !self.config.halt_on_divergence {
                return Err(Error::NonFiniteGradient { name, step });
            }
        } else {
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adamw_step(
                &mut self.model.params.tensors_mut(),
                &grad_refs,
                &mut self.optim,
                &self.config.optim,
                lr,
            )?;
        }
        self.rows.push(row);
        self.step += 1;
        Ok(row)
    }

    /// Trains up to `until` (exclusive, capped at `total_steps`). With an
    /// output directory, writes `loss.csv`, `checkpoints/step_NNNNNN` every
    /// `checkpoint_every` steps and `final` at the end.
    pub fn run(&mut self, data: &dyn BatchSource, out: Option<&Path>, until: Option<u64>) -> Result<RunSummary> {
        let end = until
            .unwrap_or(self.config.optim.total_steps)
            .min(self.config.optim.total_steps);
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let mut halted = false;
        while self.step < end {
            let row = self.train_step(data)?;
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    save_checkpoint(&checkpoint_dir(dir, self.step), &self.checkpoint())?;
                    write_loss_csv(&dir.join("loss.csv"), &self.rows)?;
                }
            }
            if row.diverged && self.config.halt_on_divergence {
                halted = true;
                break;
            }
        }
        if let Some(dir) = out {
            write_loss_csv(&dir.join("loss.csv"), &self.rows)?;
            save_checkpoint(&dir.join("final"), &self.checkpoint())?;
        }
        Ok(RunSummary {
            steps: self.step,
            halted,
            first_flag: self.trace.first_flag(),
        })
    }
}

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:06}"))
}

/// Fresh run from `config`; the model is initialised from the run seed.
pub fn train_loop(
    model_config: ModelConfig,
    data: &dyn BatchSource,
    config: TrainConfig,
    out: Option<&Path>,
) -> Result<(Trainer, RunSummary)> {
    let model = init_model(model_config, config.seed)?;
    let mut t = Trainer::new(model, config)?;
    let summary = t.run(data, out, None)?;
    Ok((t, summary))
}

/// Continues the run in `run_dir` from the checkpoint at `ckpt_dir`,
/// keeping `loss.csv` rows from before the checkpoint.
pub fn resume(ckpt_dir: &Path, run_dir: &Path, data: &dyn BatchSource) -> Result<(Trainer, RunSummary)> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let csv = run_dir.join("loss.csv");
    let rows = if csv.exists() { read_loss_csv(&csv)? } else { Vec::new() };
    let mut t = Trainer::from_checkpoint(ckpt, rows)?;
    let summary = t.run(data, Some(run_dir), None)?;
    Ok((t, summary))
}

/// One side of an ablation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationArm {
    pub label: String,
    pub model: ModelConfig,
}

/// Names accepted by [`ablation_arms`].
pub const ABLATIONS: [&str; 3] = ["qknorm", "recipes", "dropout"];

/// Paired configurations that differ only in the ablated switch:
/// `qknorm` (on/off), `recipes` (7b-recipe vs llama2-recipe switches) and
/// `dropout` (34b-recipe switches with dropout 0 vs 0.1).
pub fn ablation_arms(kind: &str, base: &ModelConfig) -> Result<Vec<AblationArm>> {
    let arm = |label: &str, model| AblationArm {
        label: label.to_string(),
        model,
    };
    Ok(match kind {
        "qknorm" => vec![
            arm("qknorm-on", ModelConfig { use_qk_norm: true, ..base.clone() }),
            arm("qknorm-off", ModelConfig { use_qk_norm: false, ..base.clone() }),
        ],
        "recipes" => vec![
            arm("7b-recipe", base.with_switches_of(&preset("7b-recipe")?)),
            arm("llama2-recipe", base.with_switches_of(&preset("llama2-recipe")?)),
        ],
        "dropout" => {
            let b34 = base.with_switches_of(&preset("34b-recipe")?);
            vec![
                arm("dropout-0.0", ModelConfig { dropout_p: 0.0, ..b34.clone() }),
                arm("dropout-0.1", ModelConfig { dropout_p: 0.1, ..b34 }),
            ]
        }
        other => {
            return Err(Error::config(format!(
                "unknown ablation `{other}`; expected one of {ABLATIONS:?}"
            )))
        }
    })
}

/// Runs every arm with the same seed and data. Each arm writes its own run
/// directory under `out/<label>`; `out/ablation.csv` stacks all traces with
/// an `arm` column.
pub fn run_ablation(
    arms: &[AblationArm],
    data: &dyn BatchSource,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<(String, Trainer, RunSummary)>> {
    let mut results = Vec::with_capacity(arms.len());
    for a in arms {
        let dir = out.map(|o| o.join(&a.label));
        let (t, s) = train_loop(a.model.clone(), data, config.clone(), dir.as_deref())?;
        results.push((a.label.clone(), t, s));
    }
    if let Some(o) = out {
        let path = o.join("ablation.csv");
        let err = |e: csv::Error| Error::format(&path, e.to_string());
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(err)?;
        w.write_record(["arm", "step", "ce", "zloss", "lr", "grad_norm", "output_rms", "diverged"])
            .map_err(err)?;
        for (label, t, _) in &results {
            for r in &t.rows {
                w.serialize((label, r)).map_err(err)?;
            }
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(results)
}
