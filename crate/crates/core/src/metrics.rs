//! Accuracy ledger and the incremental-learning summary metrics.
//!
//! `acc[t][j]` is the test accuracy on task `j` after learning task `t`
//! (both 1-based, `j <= t`). Average accuracy after stage `t` is the mean of
//! row `t`; average forgetting is the mean, over earlier tasks, of the drop
//! from the best accuracy the task ever had before stage `t` to its current
//! accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    /// Row `t-1` holds `acc[t][1..=t]`; rows are filled stage by stage.
    rows: Vec<Vec<Option<f64>>>,
}

impl MetricsLedger {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: (1..=tasks).map(|t| vec![None; t]).collect(),
        }
    }

    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, t: usize, j: usize, acc: f64) -> Result<()> {
        if t == 0 || j == 0 || j > t || t > self.task_count() {
            return Err(Error::InvalidArgument(format!(
                "ledger cell ({t},{j}) outside the lower triangle of {} tasks",
                self.task_count()
            )));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Invariant(format!("accuracy {acc} outside [0, 1]")));
        }
        self.rows[t - 1][j - 1] = Some(acc);
        Ok(())
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t.checked_sub(1)?)?.get(j.checked_sub(1)?).copied()?
    }

    fn row(&self, t: usize) -> Result<Vec<f64>> {
        if t == 0 || t > self.task_count() {
            return Err(Error::InvalidArgument(format!(
                "stage {t} outside 1..={}",
                self.task_count()
            )));
        }
        self.rows[t - 1]
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.ok_or_else(|| Error::InvalidArgument(format!("ledger row {t} missing task {}", j + 1)))
            })
            .collect()
    }

    pub fn is_row_complete(&self, t: usize) -> bool {
        self.row(t).is_ok()
    }

    /// Rows `1..=t` completely filled.
    pub fn completed_stages(&self) -> usize {
        (1..=self.task_count())
            .take_while(|&t| self.is_row_complete(t))
            .count()
    }

    /// CSV with header `stage,task,accuracy`, one line per filled cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,task,accuracy\n");
        for (t, row) in self.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(a) = v {
                    out.push_str(&format!("{},{},{}\n", t + 1, j + 1, a));
                }
            }
        }
        out
    }

    /// Cell-wise mean of ledgers with the same shape (cross-validation folds).
    pub fn mean_of(ledgers: &[MetricsLedger]) -> Result<MetricsLedger> {
        let first = ledgers
            .first()
            .ok_or_else(|| Error::InvalidArgument("no ledgers to average".into()))?;
        let mut out = MetricsLedger::new(first.task_count());
        for t in 1..=first.task_count() {
            for j in 1..=t {
                let vals: Option<Vec<f64>> = ledgers.iter().map(|l| l.get(t, j)).collect();
                if let Some(v) = vals {
                    out.set(t, j, v.iter().sum::<f64>() / v.len() as f64)?;
                }
            }
        }
        Ok(out)
    }
}

/// `AA_t = (1/t) sum_{j<=t} acc[t][j]`.
pub fn average_accuracy(ledger: &MetricsLedger, t: usize) -> Result<f64> {
    let row = ledger.row(t)?;
    Ok(row.iter().sum::<f64>() / t as f64)
}

/// `FR_t = (1/(t-1)) sum_{j<t} (max_{j <= s <= t-1} acc[s][j] - acc[t][j])`.
pub fn average_forgetting(ledger: &MetricsLedger, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::InvalidArgument(
            "forgetting needs at least two stages".into(),
        ));
    }
    for s in 1..=t {
        ledger.row(s)?;
    }
    let mut total = 0.0;
    for j in 1..t {
        let best = (j..t)
            .map(|s| ledger.get(s, j).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        total += best - ledger.get(t, j).unwrap();
    }
    Ok(total / (t - 1) as f64)
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub aa_mean: f64,
    pub aa_std: f64,
    /// Absent at stage 1.
    pub fr_mean: Option<f64>,
    pub fr_std: Option<f64>,
}

/// Aggregate of several runs of one method on one manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub variant: String,
    pub manifest_hash: String,
    pub runs: usize,
    pub stages: Vec<StageSummary>,
}

impl Report {
    pub fn final_stage(&self) -> &StageSummary {
        self.stages.last().expect("report has at least one stage")
    }
}

/// The pieces of a run record that aggregation needs.
pub trait LedgerSource {
    fn manifest_hash(&self) -> &str;
    fn method_label(&self) -> String;
    fn variant_label(&self) -> String;
    fn ledger(&self) -> &MetricsLedger;
}

/// Per-stage mean and sample standard deviation of `AA_t` and `FR_t` across
/// runs. All runs must share the manifest, method and variant.
pub fn aggregate_runs<R: LedgerSource>(records: &[R]) -> Result<Report> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no run records to aggregate".into()))?;
    for r in records {
        if r.manifest_hash() != first.manifest_hash() {
            return Err(Error::InvalidArgument(format!(
                "run records come from different manifests ({} vs {})",
                first.manifest_hash(),
                r.manifest_hash()
            )));
        }
        if r.method_label() != first.method_label() || r.variant_label() != first.variant_label()
        {
            return Err(Error::InvalidArgument(format!(
                "cannot aggregate {}/{} with {}/{}",
                first.method_label(),
                first.variant_label(),
                r.method_label(),
                r.variant_label()
            )));
        }
        if r.ledger().task_count() != first.ledger().task_count() {
            return Err(Error::InvalidArgument("ledgers differ in task count".into()));
        }
    }
    let stages = first.ledger().task_count();
    let mut summaries = Vec::with_capacity(stages);
    for t in 1..=stages {
        let aa: Vec<f64> = records
            .iter()
            .map(|r| average_accuracy(r.ledger(), t))
            .collect::<Result<_>>()?;
        let (aa_mean, aa_std) = mean_std(&aa);
        let (fr_mean, fr_std) = if t >= 2 {
            let fr: Vec<f64> = records
                .iter()
                .map(|r| average_forgetting(r.ledger(), t))
                .collect::<Result<_>>()?;
            let (m, s) = mean_std(&fr);
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        summaries.push(StageSummary {
            stage: t,
            aa_mean,
            aa_std,
            fr_mean,
            fr_std,
        });
    }
    Ok(Report {
        method: first.method_label(),
        variant: first.variant_label(),
        manifest_hash: first.manifest_hash().to_string(),
        runs: records.len(),
        stages: summaries,
    })
}
