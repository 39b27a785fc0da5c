use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use chamtoy::config::{KeyValues, Settings};
use chamtoy::numerics::Scalar;
use chamtoy::trainer::{read_loss_csv, LossRow, MonitorConfig, NormTrace};
use chamtoy::Error;
use clap::Args;

use crate::run_config::RunConfig;
use crate::Outcome;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory holding `loss.csv` and `config`.
    #[arg(long, required_unless_present = "loss_csv")]
    run: Option<PathBuf>,
    /// A bare loss.csv; the monitor then uses its default settings.
    #[arg(long, conflicts_with = "run")]
    loss_csv: Option<PathBuf>,
    /// Where to write `monitor_report.txt` and `monitor_plot.csv`;
    /// defaults to the directory of the loss file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rows between lines of the step table (default: about 20 lines).
    #[arg(long)]
    every: Option<usize>,
}

/// Replays the monitor over logged rms values, armed as the trainer arms it.
fn replay(rows: &[LossRow], cfg: &RunConfig) -> chamtoy::Result<NormTrace> {
    let monitor = MonitorConfig {
        grace_steps: cfg.train.monitor.grace_steps.max(cfg.train.optim.warmup_steps),
        ..cfg.train.monitor.clone()
    };
    let mut trace = NormTrace::new(monitor);
    for r in rows {
        trace.observe(r.step, r.output_rms, r.total())?;
    }
    Ok(trace)
}

fn summary(rows: &[LossRow], trace: &NormTrace) -> String {
    let mut s = String::new();
    let first = &rows[0];
    let last = &rows[rows.len() - 1];
    let tail = &rows[rows.len().saturating_sub(50)..];
    let tail_mean = tail.iter().map(LossRow::total).sum::<Scalar>() / tail.len() as Scalar;
    let best = rows.iter().min_by(|a, b| a.total().total_cmp(&b.total())).expect("non-empty");
    let max_grad = rows.iter().map(|r| r.grad_norm).fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut line = |k: &str, v: String| {
        let _ = writeln!(s, "{k:<22}{v}");
    };
    line("steps", format!("{}", rows.len()));
    line("loss at first step", format!("{:.4} (step {})", first.total(), first.step));
    if let Some(r) = rows.iter().find(|r| r.step == 10) {
        line("loss at step 10", format!("{:.4}", r.total()));
    }
    line("loss at last step", format!("{:.4} (step {})", last.total(), last.step));
    line("mean of last 50", format!("{tail_mean:.4}"));
    line("lowest loss", format!("{:.4} (step {})", best.total(), best.step));
    line("output rms", format!("{:.4} -> {:.4}", first.output_rms, last.output_rms));
    line("largest grad norm", format!("{max_grad:.4}"));
    line(
        "divergence flag",
        match trace.first_flag() {
            Some(step) => format!("raised at step {step}"),
            None => "never raised".into(),
        },
    );
    s
}

fn table(rows: &[LossRow], every: usize) -> String {
    let mut s = format!(
        "{:>7} {:>9} {:>11} {:>10} {:>10} {:>10} {:>4}\n",
        "step", "ce", "zloss", "lr", "grad_norm", "out_rms", "flag"
    );
    for (i, r) in rows.iter().enumerate() {
        if i % every == 0 || i + 1 == rows.len() {
            let _ = writeln!(
                s,
                "{:>7} {:>9.4} {:>11.3e} {:>10.3e} {:>10.4} {:>10.4} {:>4}",
                r.step,
                r.ce,
                r.zloss,
                r.lr,
                r.grad_norm,
                r.output_rms,
                if r.diverged { "!" } else { "" }
            );
        }
    }
    s
}

fn plot_csv(rows: &[LossRow], trace: &NormTrace) -> String {
    let mut s = String::from("step,ce,zloss,total,lr,grad_norm,output_rms,log_rms,ewma_log_rms,diverged\n");
    for (r, n) in rows.iter().zip(trace.records()) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.ce,
            r.zloss,
            r.total(),
            r.lr,
            r.grad_norm,
            r.output_rms,
            r.output_rms.ln(),
            n.ewma_log_rms,
            u8::from(n.diverged)
        );
    }
    s
}

pub fn run(args: ReportArgs) -> anyhow::Result<Outcome> {
    let mut cfg = RunConfig::default();
    let csv = match (&args.run, &args.loss_csv) {
        (Some(dir), _) => {
            let c = dir.join("config");
            if c.exists() {
                cfg.apply(&KeyValues::read(&c)?)?;
            }
            dir.join("loss.csv")
        }
        (None, Some(f)) => f.clone(),
        (None, None) => unreachable!("clap requires one of --run and --loss-csv"),
    };
    let rows = read_loss_csv(&csv)?;
    if rows.is_empty() {
        return Err(Error::Empty(format!("{} has no rows", csv.display())).into());
    }
    let trace = replay(&rows, &cfg)?;
    let every = args.every.unwrap_or((rows.len() / 20).max(1)).max(1);
    let text = format!("{}\n{}", summary(&rows, &trace), table(&rows, every));
    print!("{text}");

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| csv.parent().map(PathBuf::from).unwrap_or_default());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("monitor_report.txt"), &text).context("writing monitor_report.txt")?;
    fs::write(out.join("monitor_plot.csv"), plot_csv(&rows, &trace)).context("writing monitor_plot.csv")?;
    Ok(Outcome::Done)
}
