use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Result, TrainError};

/// One optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub identity: f64,
    pub label: f64,
    pub recon: f64,
    pub positive_pairs: usize,
}

/// One evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub mean_dice: f64,
    pub per_class: Vec<f64>,
}

/// Training and evaluation rows plus `# key: value` header notes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub notes: Vec<(String, String)>,
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
    /// Names of the foreground classes reported in `evals`.
    pub class_names: Vec<String>,
}

impl MetricsLog {
    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    pub fn push_step(&mut self, row: StepRow) -> Result<()> {
        if self.steps.last().is_some_and(|r| r.step >= row.step) {
            return Err(TrainError::Config(format!("step rows must increase (got {})", row.step)));
        }
        self.steps.push(row);
        Ok(())
    }

    pub fn push_eval(&mut self, row: EvalRow) -> Result<()> {
        if self.evals.last().is_some_and(|r| r.step >= row.step) {
            return Err(TrainError::Config(format!("eval rows must increase (got {})", row.step)));
        }
        self.evals.push(row);
        Ok(())
    }

    pub fn final_dice(&self) -> Option<f64> {
        self.evals.last().map(|r| r.mean_dice)
    }

    fn header(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.notes {
            let _ = writeln!(s, "# {k}: {v}");
        }
        s
    }

    pub fn steps_csv(&self) -> String {
        let mut s = self.header();
        s.push_str("step,lr,total,identity,label,recon,positive_pairs\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step, r.lr, r.total, r.identity, r.label, r.recon, r.positive_pairs
            );
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = self.header();
        s.push_str("step,mean_dice");
        for c in &self.class_names {
            let _ = write!(s, ",dice_{c}");
        }
        s.push('\n');
        for r in &self.evals {
            let _ = write!(s, "{},{}", r.step, r.mean_dice);
            for d in &r.per_class {
                let _ = write!(s, ",{d}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes `train.csv` and, when evaluations exist, `eval.csv`.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let mut out = vec![dir.join("train.csv")];
        write(&out[0], &self.steps_csv())?;
        if !self.evals.is_empty() {
            out.push(dir.join("eval.csv"));
            write(&out[1], &self.evals_csv())?;
        }
        Ok(out)
    }

    /// Reads the files written by [`Self::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let mut log = MetricsLog::default();
        let train = read(&dir.join("train.csv"))?;
        let (notes, rows) = split(&train);
        log.notes = notes;
        for (i, r) in rows.iter().enumerate() {
            let f: Vec<&str> = r.split(',').collect();
            let bad = || TrainError::Config(format!("{}: malformed row {}", dir.join("train.csv").display(), i + 1));
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            log.steps.push(StepRow {
                step: f[0].parse().map_err(|_| bad())?,
                lr: num(1)?,
                total: num(2)?,
                identity: num(3)?,
                label: num(4)?,
                recon: num(5)?,
                positive_pairs: f[6].parse().map_err(|_| bad())?,
            });
        }
        let eval_path = dir.join("eval.csv");
        if eval_path.exists() {
            let text = read(&eval_path)?;
            let mut lines = text.lines().filter(|l| !l.starts_with('#'));
            if let Some(h) = lines.next() {
                log.class_names = h.split(',').skip(2).map(|c| c.trim_start_matches("dice_").to_string()).collect();
            }
            for (i, r) in lines.enumerate() {
                let bad = || TrainError::Config(format!("{}: malformed row {}", eval_path.display(), i + 1));
                let f: Vec<&str> = r.split(',').collect();
                if f.len() < 2 {
                    return Err(bad());
                }
                log.evals.push(EvalRow {
                    step: f[0].parse().map_err(|_| bad())?,
                    mean_dice: f[1].parse().map_err(|_| bad())?,
                    per_class: f[2..].iter().map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?,
                });
            }
        }
        Ok(log)
    }

    pub fn note_value(&self, key: &str) -> Option<&str> {
        self.notes.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn split(text: &str) -> (Vec<(String, String)>, Vec<&str>) {
    let mut notes = Vec::new();
    let mut rows = Vec::new();
    let mut header_seen = false;
    for l in text.lines() {
        if let Some(n) = l.strip_prefix("# ") {
            if let Some((k, v)) = n.split_once(": ") {
                notes.push((k.to_string(), v.to_string()));
            }
        } else if !header_seen {
            header_seen = true;
        } else if !l.is_empty() {
            rows.push(l);
        }
    }
    (notes, rows)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> StepRow {
        StepRow {
            step,
            lr: 1e-4,
            total: 0.1 + step as f64 / 3.0,
            identity: 0.5,
            label: 2.0,
            recon: 0.03,
            positive_pairs: 7,
        }
    }

    #[test]
    fn rows_must_increase() {
        let mut m = MetricsLog::default();
        m.push_step(row(1)).unwrap();
        assert!(m.push_step(row(1)).is_err());
        m.push_step(row(2)).unwrap();
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MetricsLog::default();
        m.note("fold", 0);
        m.class_names = vec!["organ".into()];
        for s in 1..4 {
            m.push_step(row(s)).unwrap();
        }
        m.push_eval(EvalRow {
            step: 3,
            mean_dice: 0.123456789012345,
            per_class: vec![0.123456789012345],
        })
        .unwrap();
        m.save(dir.path()).unwrap();
        let back = MetricsLog::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.note_value("fold"), Some("0"));
    }
}
