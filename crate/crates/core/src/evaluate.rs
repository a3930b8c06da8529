//! Patient-level aggregation, metrics, and report emission.
//!
//! Window probabilities are pooled into one score per patient under six
//! aggregation rules; the score is thresholded at 0.5 (ties classify
//! positive, favoring sensitivity in a screening context). Metrics are
//! computed at the patient level; AUC is the Mann–Whitney rank statistic
//! with ties counted one half, which equals the pairwise win fraction
//! exactly. Undefined metrics are reported absent rather than coerced to
//! a number: precision with zero predicted positives, recall and AUC with a
//! single class.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Diagnosis;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot aggregate an empty probability sequence")]
    EmptyProbs,
    #[error("window probability {value} outside [0, 1]")]
    ProbOutOfRange { value: f64 },
    #[error("cannot compute metrics for zero patients")]
    EmptyDecisions,
    #[error("non-finite patient score")]
    NonFiniteScore,
    #[error("unknown aggregation rule `{0}`")]
    UnknownRule(String),
    #[error("writing report to {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Window-to-patient aggregation rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggRule {
    Mean,
    Median,
    Majority,
    Gmean,
    Max,
    Min,
}

impl AggRule {
    pub const ALL: [AggRule; 6] = [
        AggRule::Mean,
        AggRule::Median,
        AggRule::Majority,
        AggRule::Gmean,
        AggRule::Max,
        AggRule::Min,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AggRule::Mean => "mean",
            AggRule::Median => "median",
            AggRule::Majority => "majority",
            AggRule::Gmean => "gmean",
            AggRule::Max => "max",
            AggRule::Min => "min",
        }
    }
}

impl fmt::Display for AggRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggRule {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(AggRule::Mean),
            "median" => Ok(AggRule::Median),
            "majority" => Ok(AggRule::Majority),
            "gmean" => Ok(AggRule::Gmean),
            "max" => Ok(AggRule::Max),
            "min" => Ok(AggRule::Min),
            other => Err(EvalError::UnknownRule(other.to_string())),
        }
    }
}

/// Pools window probabilities into one patient score. `majority` is the
/// fraction of windows at or above 0.5, so it stays real-valued and admits
/// an ROC; `gmean` of any zero entry is 0.
pub fn aggregate(probs: &[f64], rule: AggRule) -> Result<f64, EvalError> {
    if probs.is_empty() {
        return Err(EvalError::EmptyProbs);
    }
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(EvalError::ProbOutOfRange { value: p });
        }
    }
    let n = probs.len() as f64;
    let score = match rule {
        AggRule::Mean => probs.iter().sum::<f64>() / n,
        AggRule::Median => {
            let mut sorted = probs.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mid = sorted.len() / 2;
            if sorted.len() % 2 == 1 {
                sorted[mid]
            } else {
                (sorted[mid - 1] + sorted[mid]) / 2.0
            }
        }
        AggRule::Majority => probs.iter().filter(|&&p| p >= 0.5).count() as f64 / n,
        AggRule::Gmean => {
            if probs.contains(&0.0) {
                0.0
            } else {
                (probs.iter().map(|&p| p.ln()).sum::<f64>() / n).exp()
            }
        }
        AggRule::Max => probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        AggRule::Min => probs.iter().cloned().fold(f64::INFINITY, f64::min),
    };
    Ok(score)
}

/// One patient's aggregated score and thresholded class. Score ≥ 0.5 maps
/// to the positive class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientDecision {
    pub patient_id: String,
    pub label: Diagnosis,
    pub window_probs: Vec<f64>,
    pub rule: AggRule,
    pub score: f64,
    pub decision: Diagnosis,
}

pub fn decide(
    patient_id: &str,
    label: Diagnosis,
    window_probs: &[f64],
    rule: AggRule,
) -> Result<PatientDecision, EvalError> {
    let score = aggregate(window_probs, rule)?;
    let decision = if score >= 0.5 {
        Diagnosis::Pd
    } else {
        Diagnosis::Control
    };
    Ok(PatientDecision {
        patient_id: patient_id.to_string(),
        label,
        window_probs: window_probs.to_vec(),
        rule,
        score,
        decision,
    })
}

/// Mann–Whitney AUC with average ranks for ties. Returns `None` unless both
/// classes are present. Rank sums are half-integers, so the result equals
/// the brute-force pairwise statistic bit for bit.
pub fn auc_mann_whitney(scores: &[f64], labels: &[Diagnosis]) -> Option<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == Diagnosis::Pd).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Tied block occupies 1-based ranks i+1..=j+1; everyone gets the mean.
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            rank[idx[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l == Diagnosis::Pd)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Patient-level metrics for one evaluated fold. Positive class is PD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub n_patients: usize,
}

pub fn compute_metrics(decisions: &[PatientDecision]) -> Result<Metrics, EvalError> {
    if decisions.is_empty() {
        return Err(EvalError::EmptyDecisions);
    }
    if decisions.iter().any(|d| !d.score.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for d in decisions {
        match (d.decision, d.label) {
            (Diagnosis::Pd, Diagnosis::Pd) => tp += 1,
            (Diagnosis::Pd, Diagnosis::Control) => fp += 1,
            (Diagnosis::Control, Diagnosis::Control) => tn += 1,
            (Diagnosis::Control, Diagnosis::Pd) => fn_ += 1,
        }
    }
    let n = decisions.len();
    let scores: Vec<f64> = decisions.iter().map(|d| d.score).collect();
    let labels: Vec<Diagnosis> = decisions.iter().map(|d| d.label).collect();
    Ok(Metrics {
        accuracy: (tp + tn) as f64 / n as f64,
        auc: auc_mann_whitney(&scores, &labels),
        precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
        recall: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
        n_patients: n,
    })
}

/// Cross-fold mean and sample standard deviation (n−1); a single fold has
/// std 0.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

fn summarize_optional(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return (None, None);
    }
    let (mean, std) = summarize(&present);
    (Some(mean), Some(std))
}

/// One CSV row: per-fold detail (`fold` = index) or a cross-fold summary
/// (`fold` = "mean"/"std"). Absent metrics serialize as empty cells;
/// baseline rows without a channel budget leave `m` as "-".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub paradigm: String,
    pub m: Option<usize>,
    pub rule: String,
    pub fold: String,
    pub acc: f64,
    pub auc: Option<f64>,
    pub prec: Option<f64>,
    pub rec: Option<f64>,
    pub n_test_patients: Option<usize>,
}

impl MetricsRow {
    pub fn detail(
        paradigm: &str,
        m: Option<usize>,
        rule: &str,
        fold: usize,
        metrics: &Metrics,
    ) -> MetricsRow {
        MetricsRow {
            paradigm: paradigm.to_string(),
            m,
            rule: rule.to_string(),
            fold: fold.to_string(),
            acc: metrics.accuracy,
            auc: metrics.auc,
            prec: metrics.precision,
            rec: metrics.recall,
            n_test_patients: Some(metrics.n_patients),
        }
    }
}

/// Builds the "mean" and "std" rows for one (paradigm, m, rule) group of
/// per-fold detail rows. Absent metrics are summarized over the folds where
/// they exist and stay absent if they exist nowhere.
pub fn summary_rows(detail: &[MetricsRow]) -> Vec<MetricsRow> {
    if detail.is_empty() {
        return Vec::new();
    }
    let accs: Vec<f64> = detail.iter().map(|r| r.acc).collect();
    let (acc_mean, acc_std) = summarize(&accs);
    let aucs: Vec<Option<f64>> = detail.iter().map(|r| r.auc).collect();
    let (auc_mean, auc_std) = summarize_optional(&aucs);
    let precs: Vec<Option<f64>> = detail.iter().map(|r| r.prec).collect();
    let (prec_mean, prec_std) = summarize_optional(&precs);
    let recs: Vec<Option<f64>> = detail.iter().map(|r| r.rec).collect();
    let (rec_mean, rec_std) = summarize_optional(&recs);
    let base = &detail[0];
    let make = |fold: &str, acc: f64, auc, prec, rec| MetricsRow {
        paradigm: base.paradigm.clone(),
        m: base.m,
        rule: base.rule.clone(),
        fold: fold.to_string(),
        acc,
        auc,
        prec,
        rec,
        n_test_patients: None,
    };
    vec![
        make("mean", acc_mean, auc_mean, prec_mean, rec_mean),
        make("std", acc_std, auc_std, prec_std, rec_std),
    ]
}

pub const CSV_HEADER: &str = "paradigm,m,rule,fold,acc,auc,prec,rec,n_test_patients";

fn csv_cell(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Renders rows to CSV text with a fixed header; floats at 6 decimals so
/// identical results give identical bytes.
pub fn results_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = r.m.map(|v| v.to_string()).unwrap_or_else(|| "-".to_string());
        let n = r
            .n_test_patients
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{:.6},{},{},{},{}\n",
            r.paradigm,
            m,
            r.rule,
            r.fold,
            r.acc,
            csv_cell(r.auc),
            csv_cell(r.prec),
            csv_cell(r.rec),
            n,
        ));
    }
    out
}

/// Writes `results.csv` and `results.json` under `out_dir`. The JSON sidecar
/// is any serializable run summary (config, seed, per-fold selections, audit
/// status). Returns the two paths.
pub fn emit_report<T: Serialize>(
    rows: &[MetricsRow],
    sidecar: &T,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), EvalError> {
    emit_report_as(rows, sidecar, out_dir, "results")
}

/// `emit_report` with a caller-chosen file stem (`<stem>.csv`, `<stem>.json`).
pub fn emit_report_as<T: Serialize>(
    rows: &[MetricsRow],
    sidecar: &T,
    out_dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf), EvalError> {
    std::fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let json_path = out_dir.join(format!("{stem}.json"));
    let wrap = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| EvalError::Io {
            path: path.clone(),
            source,
        }
    };
    std::fs::write(&csv_path, results_csv(rows)).map_err(wrap(&csv_path))?;
    let mut json = serde_json::to_vec_pretty(sidecar).expect("sidecar serializes");
    json.push(b'\n');
    let mut f = std::fs::File::create(&json_path).map_err(wrap(&json_path))?;
    f.write_all(&json).map_err(wrap(&json_path))?;
    Ok((csv_path, json_path))
}
