//! CSV metric files, multi-seed aggregation and the reward-model/human
//! agreement matrix.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preference::{Label, PreferenceRecord, JudgeKind};
use crate::reward_model::TIE_BAND;

pub const CURVE_HEADER: &str = "x,mean,std";

/// Append-only CSV with a fixed header and strictly increasing `x`.
#[derive(Debug)]
pub struct MetricLog {
    path: PathBuf,
    columns: usize,
    last_x: Option<f64>,
}

impl MetricLog {
    /// Creates (truncates) the file and writes the header.
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let mut f = File::create(path)?;
        writeln!(f, "{header}")?;
        Ok(Self {
            path: path.to_path_buf(),
            columns: header.split(',').count(),
            last_x: None,
        })
    }

    pub fn curve(path: &Path) -> Result<Self> {
        Self::create(path, CURVE_HEADER)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, x: f64, values: &[f64]) -> Result<()> {
        if values.len() + 1 != self.columns {
            return Err(Error::Shape {
                expected: self.columns - 1,
                actual: values.len(),
            });
        }
        if self.last_x.is_some_and(|last| x <= last) {
            return Err(Error::Contract(format!("metric rows must have increasing x; got {x} after {:?}", self.last_x)));
        }
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        let row: Vec<String> = std::iter::once(x).chain(values.iter().copied()).map(|v| v.to_string()).collect();
        writeln!(f, "{}", row.join(","))?;
        self.last_x = Some(x);
        Ok(())
    }
}

/// Reads an `x,mean,std` file into `(x, mean, std)` rows.
pub fn read_curve(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != CURVE_HEADER {
        return Err(Error::Format(format!("{}: expected header {CURVE_HEADER:?}", path.display())));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
            .collect::<Result<_>>()?;
        if v.len() != 3 {
            return Err(Error::Format(format!("{}: expected 3 columns", path.display())));
        }
        rows.push((v[0], v[1], v[2]));
    }
    Ok(rows)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Merges per-seed curves: for every `x` present in all inputs, the output
/// holds the mean and population std of the per-seed `mean` column.
pub fn aggregate_curves(curves: &[Vec<(f64, f64, f64)>]) -> Vec<(f64, f64, f64)> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    first
        .iter()
        .filter_map(|&(x, _, _)| {
            let vals: Option<Vec<f64>> = curves.iter().map(|c| c.iter().find(|r| r.0 == x).map(|r| r.1)).collect();
            vals.map(|v| {
                let (m, s) = mean_std(&v);
                (x, m, s)
            })
        })
        .collect()
}

/// Aggregates `metric` (a file name under each run's `logs/`) across runs
/// and writes an `x,mean,std` file.
pub fn aggregate_seeds(run_dirs: &[PathBuf], metric: &str, out: &Path) -> Result<Vec<(f64, f64, f64)>> {
    if run_dirs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let curves = run_dirs
        .iter()
        .map(|d| read_curve(&d.join("logs").join(metric)))
        .collect::<Result<Vec<_>>>()?;
    let merged = aggregate_curves(&curves);
    let mut log = MetricLog::curve(out)?;
    for &(x, m, s) in &merged {
        log.append(x, &[m, s])?;
    }
    Ok(merged)
}

/// Counts indexed by (reward-model choice, human choice), each in the order
/// first, second, tie.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub counts: [[u64; 3]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub matrix: AgreementMatrix,
    /// Fraction of agreeing decided answers; `None` when no record has a
    /// decided answer from both sides.
    pub accuracy: Option<f64>,
}

fn choice_index(label: Label) -> Option<usize> {
    match label {
        Label::First => Some(0),
        Label::Second => Some(1),
        Label::Tie => Some(2),
        Label::Discarded => None,
    }
}

/// Model choice from its probability that the first segment wins.
pub fn model_choice(prob_first: f64) -> Label {
    if prob_first > TIE_BAND.1 {
        Label::First
    } else if prob_first < TIE_BAND.0 {
        Label::Second
    } else {
        Label::Tie
    }
}

impl AgreementMatrix {
    pub fn from_counts(counts: [[u64; 3]; 3]) -> Self {
        Self { counts }
    }

    /// Builds the matrix from human-labeled records that carry a model
    /// prediction; discarded answers are ignored.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a PreferenceRecord>) -> Self {
        let mut m = Self::default();
        for r in records {
            if r.judge != JudgeKind::Human {
                continue;
            }
            let (Some(p), Some(h)) = (r.model_prob, choice_index(r.label)) else {
                continue;
            };
            let model = choice_index(model_choice(p)).expect("model choice is never discarded");
            m.counts[model][h] += 1;
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Diagonal over decided answers divided by all decided-by-both cells;
    /// ties on either side are excluded.
    pub fn accuracy(&self) -> Option<f64> {
        let c = &self.counts;
        let denom = c[0][0] + c[0][1] + c[1][0] + c[1][1];
        (denom > 0).then(|| (c[0][0] + c[1][1]) as f64 / denom as f64)
    }

    pub fn report(&self) -> AgreementReport {
        AgreementReport {
            matrix: *self,
            accuracy: self.accuracy(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_log_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let mut log = MetricLog::curve(&p).unwrap();
        log.append(1.0, &[2.0, 0.5]).unwrap();
        assert!(log.append(1.0, &[2.0, 0.5]).is_err());
        log.append(2.0, &[3.0, 0.0]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "x,mean,std");
        assert_eq!(read_curve(&p).unwrap(), vec![(1.0, 2.0, 0.5), (2.0, 3.0, 0.0)]);
    }

    #[test]
    fn three_seed_population_std() {
        let curves = vec![vec![(5.0, 1.0, 0.0)], vec![(5.0, 2.0, 0.0)], vec![(5.0, 3.0, 0.0)]];
        let merged = aggregate_curves(&curves);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].1, 2.0);
        assert!((merged[0].2 - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn agreement_edge_cases() {
        let perfect = AgreementMatrix::from_counts([[4, 0, 0], [0, 6, 0], [0, 0, 0]]);
        assert_eq!(perfect.accuracy(), Some(1.0));
        let ties = AgreementMatrix::from_counts([[0, 0, 3], [0, 0, 2], [0, 0, 1]]);
        assert_eq!(ties.accuracy(), None);
    }

    #[test]
    fn model_choice_bands() {
        assert_eq!(model_choice(0.9), Label::First);
        assert_eq!(model_choice(0.1), Label::Second);
        assert_eq!(model_choice(0.5), Label::Tie);
    }
}
