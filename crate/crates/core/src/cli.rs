//! The `mixcl` command line.
//!
//! Exit codes: 0 on success, 1 when the input (flags, config, data layout)
//! is invalid, 2 when a run fails or a check does not pass.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::data::generate_synthetic_corpus;
use crate::model::Checkpoint;
use crate::study::{collect_runs, FractionTable};
use crate::trainer::{evaluate, finetune, fold_split, pretrain, ExperimentConfig, MetricsLog, TrainError};
use crate::verify::{grad_check_suite, run_oracle, ORACLE_NAMES};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "MIXCL_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "mixcl", version, about = "Mixed contrastive pre-training for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML); every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set finetune.label_fraction=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to `$MIXCL_OUTPUT_ROOT/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic corpus (to `data_dir` unless `--out` is given)
    /// and print per-file checksums.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train on the configured source datasets.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Write a loss-curve SVG next to the metrics.
        #[arg(long)]
        plots: bool,
    },
    /// Fine-tune on the target dataset, optionally from a checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        label_fraction: Option<f64>,
        #[arg(long)]
        plots: bool,
    },
    /// Dice of a fine-tuned checkpoint on the configured test fold.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare loss gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the brute-force and statistical oracles.
    OracleCheck {
        /// Run a single oracle.
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for replay files of failing cases.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Table of final Dice per label fraction across groups of runs.
    Report {
        /// Comma-separated run directories.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plots: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = std::result::Result<Vec<PathBuf>, Failure>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenerateData { common, seed } => generate_data(&common, seed),
        Command::Pretrain { common, plots } => run_pretrain(&common, plots),
        Command::Finetune {
            common,
            init,
            label_fraction,
            plots,
        } => run_finetune(&common, init, label_fraction, plots),
        Command::Evaluate { common, checkpoint } => run_evaluate(&common, &checkpoint),
        Command::GradCheck { trials, seed } => grad_check(trials, seed),
        Command::OracleCheck { only, seed, out } => oracle_check(only.as_deref(), seed, out),
        Command::Report { runs, out, plots } => report(&runs, out, plots),
    };
    match result {
        Ok(files) => {
            if !files.is_empty() {
                println!("produced files:");
                for f in files {
                    println!("  {}", f.display());
                }
            }
            0
        }
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
}

fn out_dir(explicit: &Option<PathBuf>, command: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| output_root().join(command))
}

/// Sets `key` (dotted path) in a TOML table. The value is parsed as TOML
/// and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> std::result::Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("--set {assignment}: expected KEY=VALUE"))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| format!("--set: empty key in '{assignment}'"))?;
    let mut t = table;
    for p in path {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("--set {key}: '{p}' is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn load_config(common: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let mut table = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Invalid(format!("--config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Failure::Invalid(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for o in &common.overrides {
        apply_override(&mut table, o).map_err(Failure::Invalid)?;
    }
    let origin = common.config.as_ref().map_or("config".to_string(), |p| p.display().to_string());
    ExperimentConfig::from_toml(&toml::to_string(&table).map_err(|e| Failure::Invalid(e.to_string()))?).map_err(|e| {
        let msg = e.to_string();
        let unknown = msg
            .split_once("unknown field `")
            .and_then(|(_, rest)| rest.split_once('`'))
            .and_then(|(name, _)| key_path(&table, name));
        match unknown {
            Some(path) => Failure::Invalid(format!("{origin}: unknown key `{path}` ({msg})")),
            None => Failure::Invalid(format!("{origin}: {msg}")),
        }
    })
}

/// Dotted path of the first key called `name` in `table`.
fn key_path(table: &toml::Table, name: &str) -> Option<String> {
    if table.contains_key(name) {
        return Some(name.to_string());
    }
    table.iter().find_map(|(k, v)| {
        v.as_table()
            .and_then(|t| key_path(t, name))
            .map(|p| format!("{k}.{p}"))
    })
}

fn sha256_hex(path: &Path) -> std::result::Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn generate_data(common: &Common, seed: Option<u64>) -> Outcome {
    let cfg = load_config(common)?;
    let seed = seed.unwrap_or(cfg.seed);
    let dir = common.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
    let manifests =
        generate_synthetic_corpus(&cfg.corpus, seed, &dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut files = Vec::new();
    for m in &manifests {
        files.push(m.root.join("manifest.toml"));
        for i in 0..m.len() {
            files.push(m.volume_path(i));
            files.push(m.labelmap_path(i));
        }
    }
    let mut sums = String::new();
    for f in &files {
        let rel = f.strip_prefix(&dir).unwrap_or(f);
        sums.push_str(&format!("{}  {}\n", sha256_hex(f)?, rel.display()));
    }
    let sum_path = dir.join("checksums.sha256");
    fs::write(&sum_path, &sums).map_err(|e| Failure::Runtime(format!("{}: {e}", sum_path.display())))?;
    print!("{sums}");
    files.push(sum_path);
    Ok(files)
}

fn run_pretrain(common: &Common, plots: bool) -> Outcome {
    let mut cfg = load_config(common)?;
    cfg.output = out_dir(&common.out, "pretrain");
    let o = pretrain(&cfg)?;
    let mut files = o.files;
    println!(
        "pre-training finished: {} steps, final loss {:.5}, {} steps without positive pairs",
        o.log.steps.len(),
        o.log.steps.last().map_or(f64::NAN, |r| r.total),
        o.skipped_label_steps
    );
    if plots {
        files.push(plot_losses(&o.log, &cfg.output.join("loss.svg"))?);
    }
    Ok(files)
}

fn run_finetune(common: &Common, init: Option<PathBuf>, fraction: Option<f64>, plots: bool) -> Outcome {
    let mut cfg = load_config(common)?;
    cfg.output = out_dir(&common.out, "finetune");
    if init.is_some() {
        cfg.finetune.init = init;
    }
    if let Some(f) = fraction {
        cfg.finetune.label_fraction = f;
        cfg.validate().map_err(|e| Failure::Invalid(format!("--label-fraction: {e}")))?;
    }
    let o = finetune(&cfg)?;
    println!(
        "fine-tuning finished: supervised volumes {:?}, final mean Dice {:.4}",
        o.supervised,
        o.log.final_dice().unwrap_or(f64::NAN)
    );
    let mut files = o.files;
    if plots {
        files.push(plot_losses(&o.log, &cfg.output.join("loss.svg"))?);
    }
    Ok(files)
}

fn run_evaluate(common: &Common, checkpoint: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let dir = out_dir(&common.out, "evaluate");
    let ck = Checkpoint::load(checkpoint).map_err(|e| Failure::Invalid(format!("--checkpoint: {e}")))?;
    let ds = cfg.load_dataset(&cfg.target_dataset)?;
    if ck.config.classes != ds.class_count {
        return Err(Failure::Invalid(format!(
            "--checkpoint predicts {} classes but dataset '{}' has {}",
            ck.config.classes, ds.id, ds.class_count
        )));
    }
    let split = fold_split(ds.len(), cfg.finetune.folds, cfg.finetune.fold, cfg.seed);
    let (mean, per) = evaluate(&ck.params, &ck.config, &ds, &split.test).map_err(Failure::from)?;
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let mut text = format!("# checkpoint: {}\n# test_volumes: {:?}\nclass,dice\n", checkpoint.display(), split.test);
    for (k, d) in per.iter().enumerate() {
        text.push_str(&format!("{},{d}\n", k + 1));
    }
    text.push_str(&format!("mean,{mean}\n"));
    let p = dir.join("dice.csv");
    fs::write(&p, &text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    println!("mean Dice {mean:.4} over test volumes {:?}", split.test);
    Ok(vec![p])
}

fn grad_check(trials: usize, seed: u64) -> Outcome {
    if trials == 0 {
        return Err(Failure::Invalid("--trials must be at least 1".into()));
    }
    let rows = grad_check_suite(trials, seed).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{:<14} {:>7} {:>14} {:>10}  status", "loss", "trials", "max rel error", "worst N×C");
    let mut ok = true;
    for r in &rows {
        ok &= r.passed();
        println!(
            "{:<14} {:>7} {:>14.3e} {:>10}  {}",
            r.loss,
            r.trials,
            r.max_rel_error,
            format!("{}×{}", r.worst_shape[0], r.worst_shape[1]),
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    if ok {
        Ok(vec![])
    } else {
        Err(Failure::Runtime("gradient check exceeded tolerance".into()))
    }
}

fn oracle_check(only: Option<&str>, seed: u64, out: Option<PathBuf>) -> Outcome {
    let names: Vec<&str> = match only {
        Some(n) if ORACLE_NAMES.contains(&n) => vec![n],
        Some(n) => {
            return Err(Failure::Invalid(format!(
                "--only {n}: unknown oracle (choose from {})",
                ORACLE_NAMES.join(", ")
            )))
        }
        None => ORACLE_NAMES.to_vec(),
    };
    let dir = out_dir(&out, "oracle-check");
    let mut failed = Vec::new();
    let mut files = Vec::new();
    for n in names {
        let o = run_oracle(n, seed).expect("name checked above");
        println!("{:<20} {}  {}", o.name, if o.passed { "pass" } else { "FAIL" }, o.summary);
        if let Some(case) = o.failure {
            fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
            let p = dir.join(format!("{}.failure.toml", o.name));
            fs::write(&p, case).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            println!("  failing case written to {}", p.display());
            files.push(p);
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        Ok(files)
    } else {
        for f in &files {
            println!("  {}", f.display());
        }
        Err(Failure::Runtime(format!("oracle failures: {}", failed.join(", "))))
    }
}

fn report(runs: &[PathBuf], out: Option<PathBuf>, plots: bool) -> Outcome {
    let mut groups = Vec::new();
    for r in runs {
        if !r.is_dir() {
            return Err(Failure::Invalid(format!("--runs: {} is not a directory", r.display())));
        }
        let found = collect_runs(r)?;
        if found.is_empty() {
            return Err(Failure::Invalid(format!("--runs: no fine-tuning runs under {}", r.display())));
        }
        let name = r.file_name().map_or_else(|| r.display().to_string(), |n| n.to_string_lossy().into_owned());
        groups.push((name, found));
    }
    let table = FractionTable::build(&groups);
    print!("{}", table.text());
    let dir = out_dir(&out, "report");
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for (name, text) in [("report.csv", table.csv()), ("report.txt", table.text())] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
        files.push(p);
    }
    if plots {
        files.push(plot_fractions(&table, &dir.join("dice_vs_fraction.svg"))?);
    }
    Ok(files)
}

const PALETTE: [plotters::style::RGBColor; 4] = [
    plotters::style::RGBColor(31, 119, 180),
    plotters::style::RGBColor(214, 39, 40),
    plotters::style::RGBColor(44, 160, 44),
    plotters::style::RGBColor(148, 103, 189),
];

fn plot_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("plot: {e}"))
}

fn plot_losses(log: &MetricsLog, path: &Path) -> std::result::Result<PathBuf, Failure> {
    use plotters::prelude::*;
    let series: Vec<(&str, Vec<(f64, f64)>)> = [
        ("total", log.steps.iter().map(|r| (r.step as f64, r.total)).collect::<Vec<_>>()),
        ("identity", log.steps.iter().map(|r| (r.step as f64, r.identity)).collect()),
        ("label", log.steps.iter().map(|r| (r.step as f64, r.label)).collect()),
        ("recon", log.steps.iter().map(|r| (r.step as f64, r.recon)).collect()),
    ]
    .into_iter()
    .filter(|(_, s)| s.iter().any(|&(_, v)| v != 0.0))
    .collect();
    let xmax = log.steps.len().max(1) as f64;
    let ymax = series
        .iter()
        .flat_map(|(_, s)| s.iter().map(|&(_, v)| v))
        .filter(|v| v.is_finite())
        .fold(1e-9, f64::max);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..xmax, 0.0..ymax * 1.05)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(plot_err)?;
    for (i, (name, s)) in series.into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s, color))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(path.to_path_buf())
}

fn plot_fractions(table: &FractionTable, path: &Path) -> std::result::Result<PathBuf, Failure> {
    use plotters::prelude::*;
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("final Dice by label fraction", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..1.05, 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("label fraction")
        .y_desc("median Dice")
        .draw()
        .map_err(plot_err)?;
    for (i, name) in table.groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts = table.series(i);
        chart
            .draw_series(LineSeries::new(pts.clone(), color))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))
            .map_err(plot_err)?;
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_keys() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "finetune.label_fraction=0.1").unwrap();
        apply_override(&mut t, "target_dataset=target").unwrap();
        apply_override(&mut t, "seed = 4").unwrap();
        let c = ExperimentConfig::from_toml(&toml::to_string(&t).unwrap()).unwrap();
        assert_eq!(c.finetune.label_fraction, 0.1);
        assert_eq!(c.seed, 4);
        assert!(apply_override(&mut t, "no_equals").is_err());
        assert!(apply_override(&mut t, "seed.x=1").is_err());
    }

    #[test]
    fn unknown_flags_and_commands_are_rejected() {
        assert_eq!(run(["mixcl", "grad-check", "--bogus"]), 1);
        assert_eq!(run(["mixcl", "frobnicate"]), 1);
        assert_eq!(run(["mixcl", "oracle-check", "--only", "nope"]), 1);
        assert_eq!(run(["mixcl", "--help"]), 0);
    }
}
