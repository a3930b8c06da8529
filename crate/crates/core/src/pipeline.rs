//! End-to-end command implementations behind the `ncv` binary.
//!
//! Everything here is a thin composition of the other modules: load and
//! harmonize recordings, build pooled features (optionally through the
//! spectrogram cache), dispatch on the split paradigm, and emit reports.
//! The run configuration file is strict JSON — unknown keys are rejected so
//! typos fail loudly instead of silently falling back to defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_datasets, write_dataset, SynthSpec, SYNTH_ORIGIN};
use crate::error::{NcvError, Result};
use crate::evaluate::{
    compute_metrics, decide, emit_report_as, summary_rows, AggRule, MetricsRow, PatientDecision,
};
use crate::folds::{
    audit_leakage, nested_split, plan_folds, population_block_plan, window_level_assignments,
    LeakageReport,
};
use crate::model::{PoolConfig, TrainConfig};
use crate::preprocess::{harmonize_all, ChannelTemplate};
use crate::selection::{
    build_feature_windows, patient_strata, run_baseline, run_nested_cv, AuditStatus, BaselineMode,
    FeatWindow, NcvConfig, ParadigmRun, WindowFoldOutcome,
};
use crate::spectro::{SpectroCache, WindowingConfig};

pub use crate::selection::Paradigm;

/// Environment variable consulted for the spectrogram cache directory when
/// the config file does not set one.
pub const CACHE_DIR_ENV: &str = "NCV_CACHE_DIR";

/// The run configuration file. Top-level keys cover data, paradigm, and
/// split parameters; `windowing`, `pool`, and `train` are nested sections
/// with the same strictness. Every field has a default except `dataset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Manifest paths; multiple manifests merge into one cohort.
    pub dataset: Vec<PathBuf>,
    /// Channel template file; absent means the built-in 64-channel montage.
    pub template: Option<PathBuf>,
    pub paradigm: Paradigm,
    pub out_dir: PathBuf,
    pub outer_k: usize,
    pub inner_k: usize,
    pub m_values: Vec<usize>,
    pub seed: u64,
    pub rules: Vec<AggRule>,
    /// Origin tag held out by the population_block paradigm.
    pub block_origin: Option<String>,
    /// Spectrogram cache directory; falls back to $NCV_CACHE_DIR, then to no
    /// cache.
    pub cache_dir: Option<PathBuf>,
    /// Worker thread cap; absent means all available cores. Results do not
    /// depend on it.
    pub workers: Option<usize>,
    pub windowing: WindowingConfig,
    pub pool: PoolConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ncv = NcvConfig::default();
        RunConfig {
            dataset: Vec::new(),
            template: None,
            paradigm: Paradigm::Stratified,
            out_dir: PathBuf::from("ncv-out"),
            outer_k: ncv.outer_k,
            inner_k: ncv.inner_k,
            m_values: ncv.m_values,
            seed: ncv.seed,
            rules: ncv.rules,
            block_origin: None,
            cache_dir: None,
            workers: None,
            windowing: WindowingConfig::default(),
            pool: PoolConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn ncv(&self) -> NcvConfig {
        NcvConfig {
            outer_k: self.outer_k,
            inner_k: self.inner_k,
            m_values: self.m_values.clone(),
            seed: self.seed,
            rules: self.rules.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(NcvError::Config("dataset must name at least one manifest".into()));
        }
        if self.paradigm == Paradigm::PopulationBlock && self.block_origin.is_none() {
            return Err(NcvError::Config(
                "population_block paradigm requires block_origin".into(),
            ));
        }
        if let Some(0) = self.workers {
            return Err(NcvError::Config("workers must be at least 1".into()));
        }
        self.ncv().validate()?;
        self.windowing.validate().map_err(NcvError::Spectro)?;
        self.pool.validate().map_err(NcvError::Model)?;
        Ok(())
    }

    fn cache(&self) -> Result<Option<SpectroCache>> {
        let dir = self
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from));
        match dir {
            Some(dir) => Ok(Some(SpectroCache::new(&dir).map_err(NcvError::Spectro)?)),
            None => Ok(None),
        }
    }
}

/// Parses a config file, rejecting unknown keys with the offending path in
/// the message.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| NcvError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| NcvError::Config(format!("config {}: {e}", path.display())))
}

/// Runs `f` under a worker pool capped at `workers` threads (all cores when
/// absent). The computation's output never depends on the cap.
pub fn with_worker_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| NcvError::Config(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Loads, harmonizes, and featurizes the configured dataset.
pub fn prepare_features(cfg: &RunConfig) -> Result<Vec<FeatWindow>> {
    let recordings = load_datasets(&cfg.dataset).map_err(NcvError::Dataset)?;
    let template = match &cfg.template {
        Some(path) => ChannelTemplate::from_file(path).map_err(NcvError::Preprocess)?,
        None => ChannelTemplate::canonical_64().clone(),
    };
    let harmonized = harmonize_all(&recordings, &template).map_err(NcvError::Preprocess)?;
    let cache = cfg.cache()?;
    build_feature_windows(&harmonized, &cfg.windowing, &cfg.pool, cache.as_ref())
}

/// Everything `cmd_synth` produced.
#[derive(Clone, Debug)]
pub struct SynthArtifacts {
    pub manifest_path: PathBuf,
    pub ground_truth_path: PathBuf,
    pub n_recordings: usize,
}

/// Generates a synthetic cohort and writes it as a loadable dataset plus a
/// ground-truth descriptor for recovery checks.
pub fn cmd_synth(spec_path: Option<&Path>, out_dir: &Path) -> Result<SynthArtifacts> {
    let spec: SynthSpec = match spec_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                NcvError::Config(format!("cannot read synth spec {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| NcvError::Config(format!("synth spec {}: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    let (recordings, truth) = generate_synthetic(&spec).map_err(NcvError::Dataset)?;
    let manifest_path =
        write_dataset(out_dir, "synthetic", SYNTH_ORIGIN, &recordings).map_err(NcvError::Dataset)?;
    let ground_truth_path = out_dir.join("ground_truth.json");
    let mut body = serde_json::to_vec_pretty(&truth).expect("ground truth serializes");
    body.push(b'\n');
    std::fs::write(&ground_truth_path, body).map_err(|e| {
        NcvError::Config(format!(
            "cannot write {}: {e}",
            ground_truth_path.display()
        ))
    })?;
    Ok(SynthArtifacts {
        manifest_path,
        ground_truth_path,
        n_recordings: recordings.len(),
    })
}

/// The JSON sidecar: full config plus the complete run, which doubles as the
/// prediction cache for later ablation/report passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config: RunConfig,
    pub run: ParadigmRun,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub run: ParadigmRun,
}

fn window_decisions(outcome: &WindowFoldOutcome) -> Vec<PatientDecision> {
    outcome
        .samples
        .iter()
        .map(|s| PatientDecision {
            patient_id: format!("{}#w{}c{}", s.patient_id, s.window_index, s.channel_index),
            label: s.label,
            window_probs: vec![s.prob],
            rule: AggRule::Mean,
            score: s.prob,
            decision: if s.prob >= 0.5 {
                crate::dataset::Diagnosis::Pd
            } else {
                crate::dataset::Diagnosis::Control
            },
        })
        .collect()
}

/// Expands a run into CSV rows: per-fold detail plus mean/std summary rows
/// for every (m, rule) group. No-stratification runs evaluate at the window
/// level and appear under rule "window" with no m.
pub fn metrics_rows(run: &ParadigmRun, rules: &[AggRule]) -> Result<Vec<MetricsRow>> {
    let paradigm = run.paradigm.name();
    let mut rows = Vec::new();
    if run.paradigm == Paradigm::NoStratification {
        let mut detail = Vec::new();
        for outcome in &run.window_folds {
            let decisions = window_decisions(outcome);
            let metrics = compute_metrics(&decisions).map_err(NcvError::Report)?;
            detail.push(MetricsRow::detail(paradigm, None, "window", outcome.fold, &metrics));
        }
        let summary = summary_rows(&detail);
        rows.extend(detail);
        rows.extend(summary);
        return Ok(rows);
    }

    for m_run in &run.m_runs {
        for &rule in rules {
            let mut detail = Vec::new();
            for fold in &m_run.folds {
                let decisions: Vec<PatientDecision> = fold
                    .patients
                    .iter()
                    .map(|p| decide(&p.patient_id, p.label, &p.probs, rule))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(NcvError::Report)?;
                let metrics = compute_metrics(&decisions).map_err(NcvError::Report)?;
                detail.push(MetricsRow::detail(
                    paradigm,
                    Some(m_run.m),
                    rule.name(),
                    fold.fold,
                    &metrics,
                ));
            }
            let summary = summary_rows(&detail);
            rows.extend(detail);
            rows.extend(summary);
        }
    }
    Ok(rows)
}

/// Executes the configured paradigm end to end and writes `results.csv` and
/// `results.json` under `out_dir`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let features = prepare_features(cfg)?;
    let ncv = cfg.ncv();
    let run = with_worker_pool(cfg.workers, || match cfg.paradigm {
        Paradigm::Stratified => run_nested_cv(&features, &ncv),
        Paradigm::NoStratification => run_baseline(&features, &BaselineMode::NoStratification, &ncv),
        Paradigm::PopulationBlock => {
            let origin = cfg.block_origin.clone().expect("validated");
            run_baseline(&features, &BaselineMode::PopulationBlock { origin_tag: origin }, &ncv)
        }
    })??;
    let rows = metrics_rows(&run, &cfg.rules)?;
    let sidecar = ResultsFile {
        config: cfg.clone(),
        run,
    };
    let (csv_path, json_path) =
        emit_report_as(&rows, &sidecar, &cfg.out_dir, "results").map_err(NcvError::Report)?;
    Ok(RunArtifacts {
        csv_path,
        json_path,
        run: sidecar.run,
    })
}

fn load_results(cfg: &RunConfig) -> Result<ResultsFile> {
    let path = cfg.out_dir.join("results.json");
    let text = std::fs::read_to_string(&path).map_err(|_| {
        NcvError::State(format!(
            "no prediction cache at {}; run `ncv run` with this config first",
            path.display()
        ))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| NcvError::State(format!("corrupt results file {}: {e}", path.display())))
}

/// Re-aggregates a finished run under all six rules and every configured m,
/// from the cached predictions — no retraining. Writes `ablation.csv` and
/// `ablation.json`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let results = load_results(cfg)?;
    if results.run.paradigm == Paradigm::NoStratification {
        return Err(NcvError::State(
            "ablation needs patient-level predictions; the cached run is the \
             window-level no_stratification baseline"
                .into(),
        ));
    }
    let cached: BTreeSet<usize> = results.run.m_values.iter().copied().collect();
    let wanted: BTreeSet<usize> = cfg.m_values.iter().copied().collect();
    if !wanted.is_subset(&cached) {
        return Err(NcvError::State(format!(
            "cached run covers m values {:?} but the config asks for {:?}; \
             run `ncv run` with the new m_values first",
            results.run.m_values, cfg.m_values
        )));
    }
    let mut run = results.run.clone();
    run.m_runs.retain(|mr| wanted.contains(&mr.m));
    run.m_values = cfg.m_values.clone();
    let rows = metrics_rows(&run, &AggRule::ALL)?;
    let sidecar = ResultsFile {
        config: cfg.clone(),
        run,
    };
    let (csv_path, json_path) =
        emit_report_as(&rows, &sidecar, &cfg.out_dir, "ablation").map_err(NcvError::Report)?;
    Ok(RunArtifacts {
        csv_path,
        json_path,
        run: sidecar.run,
    })
}

/// Outcome of a standalone audit pass.
#[derive(Clone, Debug, Serialize)]
pub struct AuditSummary {
    pub paradigm: Paradigm,
    pub intentional: bool,
    pub findings: LeakageReport,
    pub n_splits_checked: usize,
}

impl AuditSummary {
    /// Non-zero only when a split that must be clean leaks.
    pub fn exit_code(&self) -> i32 {
        if self.findings.is_clean() || self.intentional {
            0
        } else {
            4
        }
    }
}

/// Rebuilds the configured paradigm's splits and audits every train/test
/// pairing without training anything.
pub fn cmd_audit(cfg: &RunConfig) -> Result<AuditSummary> {
    cfg.validate()?;
    let features = prepare_features(cfg)?;
    let (strata, origins) = patient_strata(&features).map_err(NcvError::Selection)?;
    let spans = |pids: &[String]| {
        let set: BTreeSet<&str> = pids.iter().map(String::as_str).collect();
        let span_set: BTreeSet<_> = features
            .iter()
            .filter(|w| set.contains(w.patient_id.as_str()))
            .map(|w| w.span())
            .collect();
        span_set.into_iter().collect::<Vec<_>>()
    };

    let mut findings = LeakageReport::default();
    let mut checked = 0usize;
    match cfg.paradigm {
        Paradigm::Stratified => {
            let plan = plan_folds(&strata, cfg.outer_k, cfg.seed).map_err(NcvError::Folds)?;
            for fold in 0..cfg.outer_k {
                let split =
                    nested_split(&plan, fold, cfg.inner_k, cfg.seed).map_err(NcvError::Folds)?;
                let test = spans(&split.outer_test);
                findings.merge(audit_leakage(&spans(&split.outer_train), &test));
                checked += 1;
                for inner in &split.inner {
                    let it = spans(&inner.train);
                    let iv = spans(&inner.val);
                    findings.merge(audit_leakage(&it, &iv));
                    findings.merge(audit_leakage(&it, &test));
                    findings.merge(audit_leakage(&iv, &test));
                    checked += 3;
                }
            }
            Ok(AuditSummary {
                paradigm: cfg.paradigm,
                intentional: false,
                findings,
                n_splits_checked: checked,
            })
        }
        Paradigm::NoStratification => {
            let unit_set: BTreeSet<(String, usize)> = features
                .iter()
                .map(|w| (w.patient_id.clone(), w.window_index))
                .collect();
            let units: Vec<(String, usize)> = unit_set.into_iter().collect();
            let assignment = window_level_assignments(&units, cfg.outer_k, cfg.seed)
                .map_err(NcvError::Folds)?;
            for fold in 0..cfg.outer_k {
                let side = |want_test: bool| {
                    let span_set: BTreeSet<_> = features
                        .iter()
                        .filter(|w| {
                            (assignment[&(w.patient_id.clone(), w.window_index)] == fold)
                                == want_test
                        })
                        .map(|w| w.span())
                        .collect();
                    span_set.into_iter().collect::<Vec<_>>()
                };
                findings.merge(audit_leakage(&side(false), &side(true)));
                checked += 1;
            }
            Ok(AuditSummary {
                paradigm: cfg.paradigm,
                intentional: true,
                findings,
                n_splits_checked: checked,
            })
        }
        Paradigm::PopulationBlock => {
            let origin = cfg.block_origin.clone().expect("validated");
            let plan =
                population_block_plan(&strata, &origins, &origin).map_err(NcvError::Folds)?;
            let split = nested_split(&plan, 1, cfg.inner_k, cfg.seed).map_err(NcvError::Folds)?;
            let test = spans(&split.outer_test);
            findings.merge(audit_leakage(&spans(&split.outer_train), &test));
            checked += 1;
            for inner in &split.inner {
                let it = spans(&inner.train);
                let iv = spans(&inner.val);
                findings.merge(audit_leakage(&it, &iv));
                findings.merge(audit_leakage(&it, &test));
                findings.merge(audit_leakage(&iv, &test));
                checked += 3;
            }
            Ok(AuditSummary {
                paradigm: cfg.paradigm,
                intentional: false,
                findings,
                n_splits_checked: checked,
            })
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

/// Renders a human-readable summary of an existing results file.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let results = load_results(cfg)?;
    let run = &results.run;
    let mut out = String::new();
    out.push_str(&format!("paradigm: {}\n", run.paradigm));
    out.push_str(&format!("seed: {}\n", run.seed));
    match &run.audit {
        AuditStatus::Clean => out.push_str("leakage: clean\n"),
        AuditStatus::IntentionalBaseline { findings } => {
            out.push_str(&format!("leakage: intentional-baseline ({findings})\n"));
        }
    }
    if let Some(split) = &run.origin_split {
        out.push_str(&format!(
            "origin split: train [{}] -> test {}\n",
            split.train_origins.join(", "),
            split.test_origin
        ));
    }
    let rows = metrics_rows(run, &results.config.rules)?;
    for row in rows.iter().filter(|r| r.fold == "mean") {
        let m = row.m.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{} m={} rule={}: acc {:.3}, auc {}, prec {}, rec {}\n",
            row.paradigm,
            m,
            row.rule,
            row.acc,
            fmt_opt(row.auc),
            fmt_opt(row.prec),
            fmt_opt(row.rec),
        ));
    }
    for m_run in &run.m_runs {
        out.push_str(&format!(
            "m={} modal channels: {:?}; per-fold: {}\n",
            m_run.m,
            m_run.modal_channels,
            m_run
                .folds
                .iter()
                .map(|f| format!("{:?}", f.selected_channels))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    Ok(out)
}
