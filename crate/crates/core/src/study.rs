//! Multi-seed comparisons of initialisations across label fractions, and
//! the tables built from their metrics logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::trainer::{finetune, pretrain, ExperimentConfig, MetricsLog, Result, TrainError};

/// One initialisation under comparison. `pretrain: None` trains from
/// scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub pretrain: Option<LossWeights>,
    pub fractions: Vec<f64>,
}

impl Arm {
    pub fn scratch(fractions: &[f64]) -> Self {
        Self {
            name: "scratch".into(),
            pretrain: None,
            fractions: fractions.to_vec(),
        }
    }

    pub fn pretrained(name: &str, weights: LossWeights, fractions: &[f64]) -> Self {
        Self {
            name: name.into(),
            pretrain: Some(weights),
            fractions: fractions.to_vec(),
        }
    }
}

/// Schedule used for every run of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyPlan {
    pub seeds: Vec<u64>,
    pub pretrain_iterations: u64,
    pub pretrain_lr: f64,
    pub finetune_iterations: u64,
    pub finetune_lr: f64,
}

impl Default for StudyPlan {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            pretrain_iterations: 300,
            pretrain_lr: 1e-2,
            finetune_iterations: 150,
            finetune_lr: 1e-3,
        }
    }
}

impl StudyPlan {
    /// `base` with this plan's schedule and `seed` for data and weights.
    pub fn configure(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut c = base.clone();
        c.seed = seed;
        c.model.seed = seed;
        c.pretrain.iterations = self.pretrain_iterations;
        c.pretrain.optim.lr = self.pretrain_lr;
        c.finetune.iterations = self.finetune_iterations;
        c.finetune.optim.lr = self.finetune_lr;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub arm: String,
    pub seed: u64,
    pub fraction: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StudyResults {
    pub rows: Vec<StudyRow>,
    pub files: Vec<PathBuf>,
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl StudyResults {
    pub fn dice(&self, arm: &str, seed: u64, fraction: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.seed == seed && r.fraction == fraction)
            .map(|r| r.dice)
    }

    pub fn median_dice(&self, arm: &str, fraction: f64) -> Option<f64> {
        median(
            self.rows
                .iter()
                .filter(|r| r.arm == arm && r.fraction == fraction)
                .map(|r| r.dice)
                .collect(),
        )
    }

    /// `arm − baseline` for one seed and fraction.
    pub fn gap(&self, arm: &str, baseline: &str, seed: u64, fraction: f64) -> Option<f64> {
        Some(self.dice(arm, seed, fraction)? - self.dice(baseline, seed, fraction)?)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Plain-text table of every row.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>5} {:>9} {:>8}\n", "arm", "seed", "fraction", "dice");
        for r in &self.rows {
            let _ = writeln!(s, "{:<12} {:>5} {:>9} {:>8.4}", r.arm, r.seed, r.fraction, r.dice);
        }
        s
    }
}

pub fn pretrain_dir(root: &Path, arm: &str, seed: u64) -> PathBuf {
    root.join("pretrain").join(arm).join(format!("seed{seed}"))
}

pub fn finetune_dir(root: &Path, arm: &str, seed: u64, fraction: f64) -> PathBuf {
    root.join("finetune").join(arm).join(format!("seed{seed}_frac{fraction}"))
}

/// Pre-trains each non-scratch arm once per seed, then fine-tunes every
/// arm at each of its fractions. Runs land under `root/pretrain/<arm>/` and
/// `root/finetune/<arm>/`.
pub fn run_study(base: &ExperimentConfig, plan: &StudyPlan, arms: &[Arm], root: &Path) -> Result<StudyResults> {
    if plan.seeds.is_empty() || arms.is_empty() {
        return Err(TrainError::Config("a study needs at least one seed and one arm".into()));
    }
    let mut out = StudyResults::default();
    for &seed in &plan.seeds {
        let cfg = plan.configure(base, seed);
        for arm in arms {
            let init = match &arm.pretrain {
                Some(w) => {
                    let mut c = cfg.clone();
                    c.loss.weights = *w;
                    c.output = pretrain_dir(root, &arm.name, seed);
                    log::info!("study: pre-training '{}' with seed {seed}", arm.name);
                    let o = pretrain(&c)?;
                    out.files.extend(o.files);
                    Some(c.output.join("model.ckpt"))
                }
                None => None,
            };
            for &fraction in &arm.fractions {
                let mut c = cfg.clone();
                c.finetune.label_fraction = fraction;
                c.finetune.init = init.clone();
                c.output = finetune_dir(root, &arm.name, seed, fraction);
                log::info!("study: fine-tuning '{}' at fraction {fraction} with seed {seed}", arm.name);
                let o = finetune(&c)?;
                let dice = o
                    .log
                    .final_dice()
                    .ok_or_else(|| TrainError::Config("fine-tuning produced no evaluation".into()))?;
                out.files.extend(o.files);
                out.rows.push(StudyRow {
                    arm: arm.name.clone(),
                    seed,
                    fraction,
                    dice,
                });
            }
        }
    }
    Ok(out)
}

/// Final Dice of one fine-tuning run found on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub seed: Option<u64>,
    pub fraction: f64,
    pub dice: f64,
}

/// Every fine-tuning run (a directory holding `eval.csv`) at or up to two
/// levels below `dir`.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunSummary>> {
    let mut found = Vec::new();
    visit(dir, 0, &mut found)?;
    found.sort_by(|a: &RunSummary, b| a.dir.cmp(&b.dir));
    Ok(found)
}

fn visit(dir: &Path, depth: usize, found: &mut Vec<RunSummary>) -> Result<()> {
    if dir.join("eval.csv").is_file() {
        let log = MetricsLog::load(dir)?;
        let bad = |what: &str| TrainError::Config(format!("{}: metrics log lacks {what}", dir.display()));
        let fraction = log
            .note_value("label_fraction")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("a label_fraction note"))?;
        let dice = log.final_dice().ok_or_else(|| bad("evaluation rows"))?;
        found.push(RunSummary {
            dir: dir.to_path_buf(),
            seed: log.note_value("seed").and_then(|v| v.parse().ok()),
            fraction,
            dice,
        });
        return Ok(());
    }
    if depth >= 2 {
        return Ok(());
    }
    let entries = std::fs::read_dir(dir).map_err(|source| TrainError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for d in subdirs {
        visit(&d, depth + 1, found)?;
    }
    Ok(())
}

/// Median final Dice per label fraction for each named group of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionTable {
    pub groups: Vec<String>,
    /// fraction → per group `(median dice, run count)`.
    pub rows: BTreeMap<String, Vec<Option<(f64, usize)>>>,
}

impl FractionTable {
    pub fn build(groups: &[(String, Vec<RunSummary>)]) -> Self {
        let mut fractions: Vec<f64> = groups.iter().flat_map(|(_, r)| r.iter().map(|s| s.fraction)).collect();
        fractions.sort_by(f64::total_cmp);
        fractions.dedup();
        let rows = fractions
            .iter()
            .map(|&f| {
                let cells = groups
                    .iter()
                    .map(|(_, runs)| {
                        let d: Vec<f64> = runs.iter().filter(|r| r.fraction == f).map(|r| r.dice).collect();
                        let n = d.len();
                        median(d).map(|m| (m, n))
                    })
                    .collect();
                (f.to_string(), cells)
            })
            .collect();
        Self {
            groups: groups.iter().map(|(n, _)| n.clone()).collect(),
            rows,
        }
    }

    fn sorted_rows(&self) -> Vec<(&String, &Vec<Option<(f64, usize)>>)> {
        let mut v: Vec<_> = self.rows.iter().collect();
        v.sort_by(|a, b| a.0.parse::<f64>().unwrap_or(0.0).total_cmp(&b.0.parse::<f64>().unwrap_or(0.0)));
        v
    }

    /// Aligned text; with two or more groups a final column holds
    /// `last − first`.
    pub fn text(&self) -> String {
        let mut s = format!("{:>9}", "fraction");
        for g in &self.groups {
            let _ = write!(s, " {:>16}", g);
        }
        if self.groups.len() > 1 {
            let _ = write!(s, " {:>9}", "gap");
        }
        s.push('\n');
        for (f, cells) in self.sorted_rows() {
            let _ = write!(s, "{f:>9}");
            for c in cells {
                match c {
                    Some((m, n)) => {
                        let _ = write!(s, " {:>16}", format!("{m:.4} (n={n})"));
                    }
                    None => {
                        let _ = write!(s, " {:>16}", "-");
                    }
                }
            }
            if let (Some(Some((a, _))), Some(Some((b, _)))) = (cells.first(), cells.last()) {
                if cells.len() > 1 {
                    let _ = write!(s, " {:>+9.4}", b - a);
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("fraction");
        for g in &self.groups {
            let _ = write!(s, ",{g},{g}_runs");
        }
        s.push('\n');
        for (f, cells) in self.sorted_rows() {
            s.push_str(f);
            for c in cells {
                match c {
                    Some((m, n)) => {
                        let _ = write!(s, ",{m},{n}");
                    }
                    None => s.push_str(",,0"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// `(fraction, median dice)` points of one group.
    pub fn series(&self, group: usize) -> Vec<(f64, f64)> {
        self.sorted_rows()
            .into_iter()
            .filter_map(|(f, cells)| Some((f.parse().ok()?, cells.get(group)?.as_ref()?.0)))
            .collect()
    }
}
