use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chamtoy::config::KeyValues;
use chamtoy::evalkit::{
    bootstrap_ci, breakdown, krippendorff_alpha, published_win_rates, read_judgments, read_outcomes, BootstrapConfig,
    Breakdown, GroupBy, WinCounts,
};
use chamtoy::numerics::Scalar;
use chamtoy::Error;
use clap::Args;

use crate::run_config::SEED_ENV;
use crate::Outcome;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `item_id,result,category,modality` CSV; repeatable.
    #[arg(long)]
    outcomes: Vec<PathBuf>,
    /// `item_id,annotator_id,label` CSV; repeatable.
    #[arg(long)]
    judgments: Vec<PathBuf>,
    /// Recompute the bundled published win-rate tables from their counts.
    #[arg(long)]
    appendix: bool,
    #[arg(long, default_value_t = 1000)]
    bootstrap_iters: usize,
    #[arg(long, default_value_t = 0.95)]
    level: Scalar,
    /// Bootstrap seed; falls back to $CHAMTOY_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the text and CSV reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn slug(name: &str) -> String {
    name.to_lowercase().replace('+', "-plus").replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_")
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

struct Reports<'a>(Option<&'a Path>);

impl Reports<'_> {
    fn write(&self, name: &str, body: &str) -> anyhow::Result<()> {
        if let Some(dir) = self.0 {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let p = dir.join(name);
            fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }

    fn tables(&self, name: &str, by_category: &Breakdown, by_modality: &Breakdown) -> anyhow::Result<()> {
        println!("== {name}: by category\n{by_category}");
        println!("== {name}: by modality\n{by_modality}");
        self.write(&format!("{name}.txt"), &format!("{by_category}\n{by_modality}"))?;
        self.write(&format!("{name}_category.csv"), &by_category.to_csv())?;
        self.write(&format!("{name}_modality.csv"), &by_modality.to_csv())
    }
}

pub fn run(args: EvalArgs) -> anyhow::Result<Outcome> {
    if args.outcomes.is_empty() && args.judgments.is_empty() && !args.appendix {
        return Err(Error::Config("nothing to evaluate: pass --outcomes, --judgments or --appendix".into()).into());
    }
    let reports = Reports(args.out.as_deref());

    if args.appendix {
        let rows = published_win_rates();
        let mut opponents: Vec<&str> = Vec::new();
        for r in &rows {
            if !opponents.contains(&r.opponent.as_str()) {
                opponents.push(&r.opponent);
            }
        }
        let mut summary = String::from("opponent,wins,ties,losses,win_rate,printed\n");
        for opp in opponents {
            let of = |kind: &str| -> Vec<(String, WinCounts)> {
                rows.iter()
                    .filter(|r| r.opponent == opp && r.kind == kind)
                    .map(|r| (r.group.clone(), r.counts()))
                    .collect()
            };
            let overall = of("overall")[0].1;
            let printed = rows
                .iter()
                .find(|r| r.opponent == opp && r.kind == "overall")
                .map_or(Scalar::NAN, |r| r.printed_rate);
            let table = |groups| Breakdown {
                overall,
                groups,
                untagged: 0,
            };
            reports.tables(&slug(opp), &table(of("category")), &table(of("modality")))?;
            summary.push_str(&format!(
                "{opp},{},{},{},{:.1},{printed:.1}\n",
                overall.wins,
                overall.ties,
                overall.losses,
                100.0 * overall.rate()?
            ));
        }
        println!("{summary}");
        reports.write("appendix_summary.csv", &summary)?;
    }

    for path in &args.outcomes {
        let outcomes = read_outcomes(path)?;
        let name = slug(&stem(path));
        reports.tables(
            &name,
            &breakdown(&outcomes, GroupBy::Category),
            &breakdown(&outcomes, GroupBy::Modality),
        )?;
    }

    let seed = match args.seed {
        Some(s) => s,
        None => std::env::var(SEED_ENV)
            .ok()
            .map(|s| s.parse::<u64>())
            .transpose()
            .context("parsing CHAMTOY_SEED")?
            .unwrap_or(0),
    };
    let boot = BootstrapConfig {
        iterations: args.bootstrap_iters,
        level: args.level,
        seed,
    };
    for path in &args.judgments {
        let records = read_judgments(path)?;
        let alpha = krippendorff_alpha(&records)?;
        let ci = bootstrap_ci(&records, &boot)?;
        let mut kv = KeyValues::new();
        kv.set("alpha", alpha);
        kv.set("ci_low", ci.low);
        kv.set("ci_high", ci.high);
        kv.set("level", boot.level);
        kv.set("bootstrap_iterations", boot.iterations);
        kv.set("degenerate_resamples", ci.skipped);
        kv.set("seed", seed);
        kv.set("records", records.len());
        let name = slug(&stem(path));
        println!("== {name}: agreement (nominal alpha)\n{kv}");
        reports.write(&format!("{name}_agreement"), &kv.to_string())?;
    }
    Ok(Outcome::Done)
}
