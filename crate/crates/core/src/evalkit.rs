//! Evaluation arithmetic: maj@N voting, pairwise win rates with half-point
//! ties, group breakdowns, nominal Krippendorff's alpha and item-level
//! bootstrap intervals, plus CSV ingest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Majority answer of `answers`; ties go to the answer that appears first.
/// With one answer (greedy decoding) that answer is returned.
pub fn maj_at_n<T: PartialEq + Clone>(answers: &[T]) -> Result<T> {
    let mut best: Option<(usize, usize)> = None;
    for (i, a) in answers.iter().enumerate() {
        if answers[..i].contains(a) {
            continue;
        }
        let n = answers[i..].iter().filter(|b| *b == a).count();
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((i, n));
        }
    }
    best.map(|(i, _)| answers[i].clone())
        .ok_or_else(|| Error::Empty("maj@N over no answers".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairResult {
    Win,
    Tie,
    Loss,
}

impl FromStr for PairResult {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "win" => Ok(PairResult::Win),
            "tie" => Ok(PairResult::Tie),
            "loss" | "lose" => Ok(PairResult::Loss),
            other => Err(Error::config(format!("unknown result `{other}` (win|tie|loss)"))),
        }
    }
}

/// One side-by-side judgement of the evaluated model against a baseline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseOutcome {
    pub item_id: String,
    pub result: PairResult,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub category: Option<String>,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub modality: Option<String>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.trim().is_empty()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WinCounts {
    pub wins: u64,
    pub ties: u64,
    pub losses: u64,
}

impl WinCounts {
    pub fn new(wins: u64, ties: u64, losses: u64) -> Self {
        WinCounts { wins, ties, losses }
    }

    pub fn of(outcomes: &[PairwiseOutcome]) -> Self {
        let mut c = WinCounts::default();
        for o in outcomes {
            c.add(o.result);
        }
        c
    }

    pub fn add(&mut self, r: PairResult) {
        match r {
            PairResult::Win => self.wins += 1,
            PairResult::Tie => self.ties += 1,
            PairResult::Loss => self.losses += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.wins + self.ties + self.losses
    }

    /// `(wins + ties/2) / total`.
    pub fn rate(&self) -> Result<Scalar> {
        if self.total() == 0 {
            return Err(Error::Empty("win rate over no comparisons".into()));
        }
        Ok((self.wins as Scalar + 0.5 * self.ties as Scalar) / self.total() as Scalar)
    }

    /// The same comparisons seen from the baseline's side.
    pub fn reversed(&self) -> Self {
        WinCounts::new(self.losses, self.ties, self.wins)
    }

    /// One outcome per comparison, item ids `{prefix}{n}`.
    pub fn expand(&self, prefix: &str, category: Option<&str>, modality: Option<&str>) -> Vec<PairwiseOutcome> {
        let results = std::iter::repeat_n(PairResult::Win, self.wins as usize)
            .chain(std::iter::repeat_n(PairResult::Tie, self.ties as usize))
            .chain(std::iter::repeat_n(PairResult::Loss, self.losses as usize));
        results
            .enumerate()
            .map(|(i, result)| PairwiseOutcome {
                item_id: format!("{prefix}{i}"),
                result,
                category: category.map(str::to_string),
                modality: modality.map(str::to_string),
            })
            .collect()
    }
}

pub fn win_rate(outcomes: &[PairwiseOutcome]) -> Result<Scalar> {
    WinCounts::of(outcomes).rate()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    Category,
    Modality,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Breakdown {
    pub overall: WinCounts,
    /// Groups in name order; groups without items do not appear.
    pub groups: Vec<(String, WinCounts)>,
    /// Outcomes lacking the grouping tag (counted in `overall` only).
    pub untagged: u64,
}

pub fn breakdown(outcomes: &[PairwiseOutcome], by: GroupBy) -> Breakdown {
    let mut groups: BTreeMap<String, WinCounts> = BTreeMap::new();
    let mut untagged = 0;
    for o in outcomes {
        let tag = match by {
            GroupBy::Category => &o.category,
            GroupBy::Modality => &o.modality,
        };
        match tag {
            Some(t) => groups.entry(t.clone()).or_default().add(o.result),
            None => untagged += 1,
        }
    }
    Breakdown {
        overall: WinCounts::of(outcomes),
        groups: groups.into_iter().collect(),
        untagged,
    }
}

impl fmt::Display for Breakdown {
    /// The `Wins Ties Loses Win rate` table layout, rates to one decimal.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.groups.iter().map(|(g, _)| g.len()).max().unwrap_or(0).max(7);
        writeln!(f, "{:<width$}  {:>6} {:>6} {:>6} {:>9}", "", "Wins", "Ties", "Loses", "Win rate")?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, c: &WinCounts| match c.rate() {
            Ok(r) => writeln!(
                f,
                "{name:<width$}  {:>6} {:>6} {:>6} {:>8.1}%",
                c.wins,
                c.ties,
                c.losses,
                100.0 * r
            ),
            Err(_) => writeln!(f, "{name:<width$}  {:>6} {:>6} {:>6} {:>9}", 0, 0, 0, "-"),
        };
        row(f, "Overall", &self.overall)?;
        for (g, c) in &self.groups {
            row(f, g, c)?;
        }
        if self.untagged > 0 {
            writeln!(f, "({} outcomes carry no group tag)", self.untagged)?;
        }
        Ok(())
    }
}

impl Breakdown {
    /// `group,wins,ties,losses,win_rate` with the overall row first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,wins,ties,losses,win_rate\n");
        let overall = std::iter::once(("Overall".to_string(), self.overall));
        for (g, c) in overall.chain(self.groups.iter().cloned()) {
            let rate = c.rate().map_or(String::new(), |r| format!("{:.1}", 100.0 * r));
            s.push_str(&format!("{g},{},{},{},{rate}\n", c.wins, c.ties, c.losses));
        }
        s
    }
}

/// One annotator's nominal label for one item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub item_id: String,
    pub annotator_id: String,
    pub label: String,
}

/// Items with their labels, in item-id order.
fn units(records: &[JudgmentRecord]) -> Result<Vec<Vec<&str>>> {
    let mut seen = BTreeSet::new();
    let mut by_item: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        if !seen.insert((r.item_id.as_str(), r.annotator_id.as_str())) {
            return Err(Error::config(format!(
                "annotator `{}` labels item `{}` twice",
                r.annotator_id, r.item_id
            )));
        }
        by_item.entry(&r.item_id).or_default().push(&r.label);
    }
    Ok(by_item.into_values().collect())
}

fn alpha_of_units(units: &[Vec<&str>]) -> Result<Scalar> {
    // Coincidences: within an item with m pairable values each ordered pair
    // of distinct annotations contributes 1/(m-1).
    let mut o: HashMap<(&str, &str), Scalar> = HashMap::new();
    for u in units.iter().filter(|u| u.len() >= 2) {
        let w = 1.0 / (u.len() - 1) as Scalar;
        for (i, a) in u.iter().enumerate() {
            for (j, b) in u.iter().enumerate() {
                if i != j {
                    *o.entry((a, b)).or_default() += w;
                }
            }
        }
    }
    let mut n_c: BTreeMap<&str, Scalar> = BTreeMap::new();
    for (&(c, _), &v) in &o {
        *n_c.entry(c).or_default() += v;
    }
    let n: Scalar = n_c.values().sum();
    if n == 0.0 {
        return Err(Error::Empty("no item has two or more labels".into()));
    }
    let observed: Scalar = o.iter().filter(|((c, k), _)| c != k).map(|(_, v)| v).sum();
    let total_sq: Scalar = n_c.values().map(|x| x * x).sum();
    let expected = n * n - total_sq;
    if expected == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Krippendorff's alpha for nominal labels. Items with a single label are
/// unpairable and ignored. A corpus using one label everywhere has alpha 1.
pub fn krippendorff_alpha(records: &[JudgmentRecord]) -> Result<Scalar> {
    alpha_of_units(&units(records)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub level: Scalar,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            iterations: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapCi {
    pub point: Scalar,
    pub low: Scalar,
    pub high: Scalar,
    /// Resamples that were used.
    pub iterations: usize,
    /// Resamples without any pairable item.
    pub skipped: usize,
}

fn percentile(sorted: &[Scalar], q: Scalar) -> Scalar {
    let pos = q * (sorted.len() - 1) as Scalar;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as Scalar) * (sorted[hi] - sorted[lo])
}

/// Percentile interval of alpha over resamples of whole items. Resample
/// `i` draws from its own ChaCha stream, so results do not depend on the
/// order in which iterations run.
pub fn bootstrap_ci(records: &[JudgmentRecord], cfg: &BootstrapConfig) -> Result<BootstrapCi> {
    if !(cfg.level > 0.0 && cfg.level < 1.0) || cfg.iterations == 0 {
        return Err(Error::config("bootstrap needs iterations > 0 and level in (0, 1)"));
    }
    let all = units(records)?;
    let point = alpha_of_units(&all)?;
    let mut alphas = Vec::with_capacity(cfg.iterations);
    let mut skipped = 0;
    for i in 0..cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let sample: Vec<Vec<&str>> = (0..all.len())
            .map(|_| all[rng.random_range(0..all.len())].clone())
            .collect();
        match alpha_of_units(&sample) {
            Ok(a) => alphas.push(a),
            Err(_) => skipped += 1,
        }
    }
    if alphas.is_empty() {
        return Err(Error::Empty("every bootstrap resample was degenerate".into()));
    }
    alphas.sort_by(Scalar::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok(BootstrapCi {
        point,
        low: percentile(&alphas, tail),
        high: percentile(&alphas, 1.0 - tail),
        iterations: alphas.len(),
        skipped,
    })
}

fn parse_csv<T: for<'de> Deserialize<'de>>(text: &str, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let got = r
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let missing: Vec<&str> = header.iter().copied().filter(|h| !got.iter().any(|g| g == *h)).collect();
    if !missing.is_empty() {
        return Err(Error::Parse {
            line: 1,
            reason: format!("header lacks column(s) {}", missing.join(", ")),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push(rec.deserialize(Some(&got)).map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// `item_id,annotator_id,label` rows.
pub fn parse_judgments(text: &str) -> Result<Vec<JudgmentRecord>> {
    parse_csv(text, &["item_id", "annotator_id", "label"])
}

/// `item_id,result,category,modality` rows; the last two may be empty.
pub fn parse_outcomes(text: &str) -> Result<Vec<PairwiseOutcome>> {
    parse_csv(text, &["item_id", "result"])
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn read_judgments(path: &Path) -> Result<Vec<JudgmentRecord>> {
    parse_judgments(&read(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_outcomes(path: &Path) -> Result<Vec<PairwiseOutcome>> {
    parse_outcomes(&read(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// One row of the published side-by-side win-rate tables.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct WinRateRow {
    pub opponent: String,
    /// `overall`, `category` or `modality`.
    pub kind: String,
    pub group: String,
    pub wins: u64,
    pub ties: u64,
    pub losses: u64,
    /// The rate as printed, in percent.
    pub printed_rate: Scalar,
}

impl WinRateRow {
    pub fn counts(&self) -> WinCounts {
        WinCounts::new(self.wins, self.ties, self.losses)
    }
}

const WIN_RATE_TABLES: &str = include_str!("../fixtures/win_rate_tables.csv");
const PROMPT_CATEGORIES: &str = include_str!("../fixtures/prompt_categories.csv");

/// Counts of the four human-evaluation win-rate tables (vs Gemini+,
/// GPT-4V+, Gemini and GPT-4V), by overall, task category and modality.
pub fn published_win_rates() -> Vec<WinRateRow> {
    parse_csv(WIN_RATE_TABLES, &["opponent", "kind", "group"]).expect("bundled table parses")
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct PromptCategory {
    pub category: String,
    pub description: String,
}

/// The twelve task categories of the human-evaluation prompts.
pub fn prompt_categories() -> Vec<PromptCategory> {
    parse_csv(PROMPT_CATEGORIES, &["category", "description"]).expect("bundled taxonomy parses")
}
