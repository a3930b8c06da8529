//! Nested cross-validation with inner-loop channel scoring, plus the two
//! baseline split policies it is compared against.
//!
//! The unit of classification is one (channel, time-window) pooled feature
//! vector; the unit of splitting is the patient. Per outer fold, one model
//! per inner fold is trained on all active channels of the inner-train
//! patients, each channel is scored by its accuracy on the inner-validation
//! windows, scores are averaged across inner folds, and the top-m channels
//! are selected. The final model retrains on the full outer-train side
//! restricted to the selection and is evaluated on outer-test patients the
//! scoring never saw. Every split this module constructs is checked by the
//! leakage auditor at runtime; a finding in a split that must be clean
//! aborts the run.
//!
//! The baselines reuse the identical feature/model/metric path and differ
//! only in the split policy: `no_stratification` assigns time windows to
//! folds with no patient grouping (the leakage the auditor exists to catch —
//! its report is attached to the run as an intentional finding), and
//! `population_block` holds out every patient of one origin.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Diagnosis;
use crate::error::{NcvError, Result};
use crate::evaluate::AggRule;
use crate::folds::{
    audit_leakage, nested_split, plan_folds, population_block_plan, window_level_assignments,
    FoldPlan, LeakageReport, PatientStratum, WindowSpan,
};
use crate::model::{predict_proba, train, ModelParams, PoolConfig, TrainConfig};
use crate::preprocess::HarmonizedRecording;
use crate::spectro::{segment_spans, SpectroCache, SpectrogramExtractor, WindowingConfig};

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("no feature windows to work with")]
    EmptyFeatureSet,
    #[error("patient `{patient_id}` appears with two different diagnoses")]
    ConflictingLabels { patient_id: String },
    #[error("patient `{patient_id}` appears with two different origin tags")]
    ConflictingOrigins { patient_id: String },
    #[error("need at least {need} {label} patients for {need} outer folds, have {have}")]
    TooFewPatients {
        label: String,
        have: usize,
        need: usize,
    },
    #[error("channel score board is empty; no channel had validation windows")]
    EmptyBoard,
    #[error("channel budget m must be at least 1")]
    ZeroM,
    #[error("fold {fold} has no evaluable test predictions")]
    NoTestPredictions { fold: usize },
}

/// One pooled feature vector with full provenance. Only active channels
/// produce feature windows; an absent or degenerate channel contributes no
/// samples for its patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatWindow {
    pub patient_id: String,
    pub session_id: String,
    pub label: Diagnosis,
    pub origin_tag: String,
    pub channel_index: usize,
    /// Time-window index, numbered per patient across sessions.
    pub window_index: usize,
    pub start_sample: usize,
    pub end_sample: usize,
    pub features: Vec<f64>,
}

impl FeatWindow {
    pub fn span(&self) -> WindowSpan {
        WindowSpan {
            patient_id: self.patient_id.clone(),
            session_id: self.session_id.clone(),
            start: self.start_sample,
            end: self.end_sample,
        }
    }
}

/// Computes pooled features for every active (channel, time-window) pair,
/// streaming one spectrogram at a time. Output order is recordings sorted by
/// (patient_id, session_id), then ascending channel, then ascending window,
/// regardless of input order or worker count.
pub fn build_feature_windows(
    recs: &[HarmonizedRecording],
    wcfg: &WindowingConfig,
    pcfg: &PoolConfig,
    cache: Option<&SpectroCache>,
) -> Result<Vec<FeatWindow>> {
    pcfg.validate().map_err(NcvError::Model)?;
    let extractor = SpectrogramExtractor::new(wcfg).map_err(NcvError::Spectro)?;

    let mut order: Vec<usize> = (0..recs.len()).collect();
    order.sort_by(|&a, &b| {
        (recs[a].patient_id.as_str(), recs[a].session_id.as_str())
            .cmp(&(recs[b].patient_id.as_str(), recs[b].session_id.as_str()))
    });

    // Window numbering continues across a patient's sessions, so offsets are
    // fixed sequentially before the parallel pass.
    let mut offsets = vec![0usize; order.len()];
    let mut running: Option<(&str, usize)> = None;
    for (pos, &ri) in order.iter().enumerate() {
        let rec = &recs[ri];
        let count = crate::spectro::window_count(rec.n_samples(), wcfg);
        let offset = match running {
            Some((pid, total)) if pid == rec.patient_id.as_str() => total,
            _ => 0,
        };
        offsets[pos] = offset;
        running = Some((rec.patient_id.as_str(), offset + count));
    }

    let per_rec: Vec<Vec<FeatWindow>> = order
        .par_iter()
        .zip(offsets.par_iter())
        .map(|(&ri, &offset)| {
            let rec = &recs[ri];
            let spans = segment_spans(rec.n_samples(), wcfg);
            let mut out = Vec::new();
            for (ch, &active) in rec.active_mask.iter().enumerate() {
                if !active {
                    continue;
                }
                let row: Vec<f64> = rec.data.row(ch).to_vec();
                for (w, &(start, end)) in spans.iter().enumerate() {
                    let mut window = vec![0.0; wcfg.outer_len];
                    let take = wcfg.outer_len.min(row.len().saturating_sub(start));
                    window[..take].copy_from_slice(&row[start..start + take]);
                    let spec = extractor
                        .normalized(&window, cache)
                        .map_err(NcvError::Spectro)?;
                    let features =
                        crate::model::pooled_features(&spec, pcfg).map_err(NcvError::Model)?;
                    out.push(FeatWindow {
                        patient_id: rec.patient_id.clone(),
                        session_id: rec.session_id.clone(),
                        label: rec.diagnosis,
                        origin_tag: rec.origin_tag.clone(),
                        channel_index: ch,
                        window_index: offset + w,
                        start_sample: start,
                        end_sample: end,
                        features,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    Ok(per_rec.into_iter().flatten().collect())
}

/// Per-channel inner-fold accuracies and their averages. Only channels with
/// active validation windows in a given inner fold receive an entry for it,
/// so the average runs over exactly the folds that scored the channel.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelScoreBoard {
    pub scores: BTreeMap<usize, Vec<f64>>,
}

impl ChannelScoreBoard {
    pub fn add_inner_fold(&mut self, accuracies: &BTreeMap<usize, f64>) {
        for (&ch, &acc) in accuracies {
            self.scores.entry(ch).or_default().push(acc);
        }
    }

    pub fn means(&self) -> BTreeMap<usize, f64> {
        self.scores
            .iter()
            .map(|(&ch, accs)| (ch, accs.iter().sum::<f64>() / accs.len() as f64))
            .collect()
    }

    /// The min(m, scored) channels with the highest mean accuracy, exact
    /// ties broken toward the lower channel index; returned sorted
    /// ascending.
    pub fn select_top_m(&self, m: usize) -> std::result::Result<Vec<usize>, SelectionError> {
        if m == 0 {
            return Err(SelectionError::ZeroM);
        }
        if self.scores.is_empty() {
            return Err(SelectionError::EmptyBoard);
        }
        let mut ranked: Vec<(usize, f64)> = self.means().into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut selected: Vec<usize> = ranked.iter().take(m).map(|&(ch, _)| ch).collect();
        selected.sort_unstable();
        Ok(selected)
    }
}

/// Per-channel accuracy of one model on validation windows: the fraction of
/// each channel's windows whose thresholded probability (≥ 0.5 → positive)
/// matches the label. Channels without validation windows are absent.
pub fn score_channels(
    params: &ModelParams,
    val: &[&FeatWindow],
) -> Result<BTreeMap<usize, f64>> {
    if val.is_empty() {
        return Ok(BTreeMap::new());
    }
    let (x, y) = design_matrix(val);
    let probs = predict_proba(params, &x).map_err(NcvError::Model)?;
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((w, &prob), &label) in val.iter().zip(&probs).zip(&y) {
        let entry = hits.entry(w.channel_index).or_insert((0, 0));
        entry.1 += 1;
        if (prob >= 0.5) == (label == 1.0) {
            entry.0 += 1;
        }
    }
    Ok(hits
        .into_iter()
        .map(|(ch, (h, t))| (ch, h as f64 / t as f64))
        .collect())
}

fn design_matrix(feats: &[&FeatWindow]) -> (Array2<f64>, Vec<f64>) {
    let d = feats[0].features.len();
    let mut x = Array2::zeros((feats.len(), d));
    let mut y = Vec::with_capacity(feats.len());
    for (i, w) in feats.iter().enumerate() {
        for (j, &v) in w.features.iter().enumerate() {
            x[(i, j)] = v;
        }
        y.push(f64::from(w.label.label()));
    }
    (x, y)
}

/// Library-level run parameters, embedded in the run configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NcvConfig {
    pub outer_k: usize,
    pub inner_k: usize,
    pub m_values: Vec<usize>,
    pub seed: u64,
    pub rules: Vec<AggRule>,
    pub train: TrainConfig,
}

impl Default for NcvConfig {
    fn default() -> Self {
        NcvConfig {
            outer_k: 5,
            inner_k: 3,
            m_values: vec![1, 2, 4, 8, 16],
            seed: 7,
            rules: vec![AggRule::Mean],
            train: TrainConfig::default(),
        }
    }
}

impl NcvConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(NcvError::Config(msg.to_string()));
        if self.outer_k < 2 {
            return fail("outer_k must be at least 2");
        }
        if self.inner_k < 2 {
            return fail("inner_k must be at least 2");
        }
        if self.m_values.is_empty() {
            return fail("m_values must not be empty");
        }
        if self.m_values.contains(&0) {
            return fail("m_values entries must be at least 1");
        }
        if self.m_values.iter().collect::<HashSet<_>>().len() != self.m_values.len() {
            return fail("m_values entries must be unique");
        }
        if self.rules.is_empty() {
            return fail("rules must not be empty");
        }
        if self.rules.iter().collect::<HashSet<_>>().len() != self.rules.len() {
            return fail("rules entries must be unique");
        }
        self.train.validate().map_err(NcvError::Model)
    }
}

/// The three split policies under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Stratified,
    NoStratification,
    PopulationBlock,
}

impl Paradigm {
    pub fn name(&self) -> &'static str {
        match self {
            Paradigm::Stratified => "stratified",
            Paradigm::NoStratification => "no_stratification",
            Paradigm::PopulationBlock => "population_block",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "stratified" => Ok(Paradigm::Stratified),
            "no_stratification" => Ok(Paradigm::NoStratification),
            "population_block" => Ok(Paradigm::PopulationBlock),
            other => Err(format!(
                "unknown paradigm `{other}` (expected stratified, no_stratification, or population_block)"
            )),
        }
    }
}

/// Audit outcome attached to every run. Baseline runs that leak by design
/// carry their findings instead of failing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum AuditStatus {
    Clean,
    IntentionalBaseline { findings: LeakageReport },
}

/// One test patient's window probabilities for one (outer fold, m).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientWindows {
    pub patient_id: String,
    pub label: Diagnosis,
    pub probs: Vec<f64>,
}

/// Outcome of one outer fold for one channel budget m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MFold {
    pub fold: usize,
    pub selected_channels: Vec<usize>,
    pub patients: Vec<PatientWindows>,
    /// Test patients with no active window on any selected channel; they are
    /// excluded from this fold's metrics.
    pub skipped_patients: Vec<String>,
}

/// All outer folds for one channel budget m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MRun {
    pub m: usize,
    pub folds: Vec<MFold>,
    /// Most frequent selected subset across outer folds (ties to the
    /// lexicographically smallest), published as deployment guidance.
    pub modal_channels: Vec<usize>,
}

/// One window-level prediction from the no-stratification baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPred {
    pub patient_id: String,
    pub session_id: String,
    pub channel_index: usize,
    pub window_index: usize,
    pub label: Diagnosis,
    pub prob: f64,
}

/// One fold of the no-stratification baseline: every test sample's
/// prediction, evaluated at the window level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowFoldOutcome {
    pub fold: usize,
    pub n_train_windows: usize,
    pub samples: Vec<WindowPred>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginSplit {
    pub train_origins: Vec<String>,
    pub test_origin: String,
}

/// Everything a run produced, serializable as the prediction cache that
/// later report/ablation passes reuse without retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParadigmRun {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub outer_k: usize,
    pub inner_k: usize,
    pub m_values: Vec<usize>,
    /// Per outer fold, in fold order (stratified and block runs).
    pub boards: Vec<ChannelScoreBoard>,
    pub m_runs: Vec<MRun>,
    /// Per fold window-level outcomes (no-stratification runs).
    pub window_folds: Vec<WindowFoldOutcome>,
    pub audit: AuditStatus,
    pub origin_split: Option<OriginSplit>,
    pub fold_plan: Option<FoldPlan>,
}

/// Patient strata derived from feature windows, with label and origin
/// consistency checks. `n_windows` counts distinct time windows.
pub fn patient_strata(
    features: &[FeatWindow],
) -> std::result::Result<(Vec<PatientStratum>, BTreeMap<String, String>), SelectionError> {
    if features.is_empty() {
        return Err(SelectionError::EmptyFeatureSet);
    }
    let mut info: BTreeMap<&str, (Diagnosis, &str, BTreeSet<usize>)> = BTreeMap::new();
    for w in features {
        match info.entry(w.patient_id.as_str()) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert((w.label, w.origin_tag.as_str(), BTreeSet::from([w.window_index])));
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                let (label, origin, windows) = e.get_mut();
                if *label != w.label {
                    return Err(SelectionError::ConflictingLabels {
                        patient_id: w.patient_id.clone(),
                    });
                }
                if *origin != w.origin_tag {
                    return Err(SelectionError::ConflictingOrigins {
                        patient_id: w.patient_id.clone(),
                    });
                }
                windows.insert(w.window_index);
            }
        }
    }
    let strata = info
        .iter()
        .map(|(pid, (label, _, windows))| PatientStratum {
            patient_id: pid.to_string(),
            label: *label,
            n_windows: windows.len(),
        })
        .collect();
    let origins = info
        .iter()
        .map(|(pid, (_, origin, _))| (pid.to_string(), origin.to_string()))
        .collect();
    Ok((strata, origins))
}

fn require_patients_per_class(
    strata: &[PatientStratum],
    need: usize,
) -> std::result::Result<(), SelectionError> {
    for diagnosis in [Diagnosis::Control, Diagnosis::Pd] {
        let have = strata.iter().filter(|s| s.label == diagnosis).count();
        if have < need {
            return Err(SelectionError::TooFewPatients {
                label: diagnosis.to_string(),
                have,
                need,
            });
        }
    }
    Ok(())
}

fn spans_of(feats: &[&FeatWindow]) -> Vec<WindowSpan> {
    let set: BTreeSet<WindowSpan> = feats.iter().map(|w| w.span()).collect();
    set.into_iter().collect()
}

fn require_clean(train: &[&FeatWindow], test: &[&FeatWindow]) -> Result<()> {
    let report = audit_leakage(&spans_of(train), &spans_of(test));
    if report.is_clean() {
        Ok(())
    } else {
        Err(NcvError::Leakage(report))
    }
}

fn by_patients<'a>(
    features: &'a [FeatWindow],
    patients: &HashSet<&str>,
) -> Vec<&'a FeatWindow> {
    features
        .iter()
        .filter(|w| patients.contains(w.patient_id.as_str()))
        .collect()
}

struct OuterFoldResult {
    board: ChannelScoreBoard,
    per_m: Vec<MFold>,
}

/// Runs one outer fold end to end: inner scoring loop, per-m selection,
/// retraining, and test prediction. `display_fold` is the fold index
/// reported downstream (block runs expose their single split as fold 0).
fn run_outer_fold(
    features: &[FeatWindow],
    plan: &FoldPlan,
    outer_fold: usize,
    display_fold: usize,
    cfg: &NcvConfig,
) -> Result<OuterFoldResult> {
    let split = nested_split(plan, outer_fold, cfg.inner_k, cfg.seed).map_err(NcvError::Folds)?;
    let train_set: HashSet<&str> = split.outer_train.iter().map(String::as_str).collect();
    let test_set: HashSet<&str> = split.outer_test.iter().map(String::as_str).collect();
    let train_feats = by_patients(features, &train_set);
    let test_feats = by_patients(features, &test_set);
    require_clean(&train_feats, &test_feats)?;

    let mut board = ChannelScoreBoard::default();
    for inner in &split.inner {
        let it_set: HashSet<&str> = inner.train.iter().map(String::as_str).collect();
        let iv_set: HashSet<&str> = inner.val.iter().map(String::as_str).collect();
        let it_feats = by_patients(features, &it_set);
        let iv_feats = by_patients(features, &iv_set);
        // Every pairing that must be disjoint is audited, including each
        // inner set against the untouchable outer-test side.
        require_clean(&it_feats, &iv_feats)?;
        require_clean(&it_feats, &test_feats)?;
        require_clean(&iv_feats, &test_feats)?;

        let (x, y) = design_matrix(&it_feats);
        let params = train(&x, &y, &cfg.train).map_err(NcvError::Model)?;
        let accuracies = score_channels(&params, &iv_feats)?;
        board.add_inner_fold(&accuracies);
    }

    let mut per_m = Vec::with_capacity(cfg.m_values.len());
    for &m in &cfg.m_values {
        let selected = board.select_top_m(m).map_err(NcvError::Selection)?;
        let sel: HashSet<usize> = selected.iter().copied().collect();
        let tr: Vec<&FeatWindow> = train_feats
            .iter()
            .copied()
            .filter(|w| sel.contains(&w.channel_index))
            .collect();
        let (x, y) = design_matrix(&tr);
        let params = train(&x, &y, &cfg.train).map_err(NcvError::Model)?;

        let te: Vec<&FeatWindow> = test_feats
            .iter()
            .copied()
            .filter(|w| sel.contains(&w.channel_index))
            .collect();
        let mut patients: BTreeMap<&str, PatientWindows> = BTreeMap::new();
        if !te.is_empty() {
            let (xt, _) = design_matrix(&te);
            let probs = predict_proba(&params, &xt).map_err(NcvError::Model)?;
            for (w, &p) in te.iter().zip(&probs) {
                patients
                    .entry(w.patient_id.as_str())
                    .or_insert_with(|| PatientWindows {
                        patient_id: w.patient_id.clone(),
                        label: w.label,
                        probs: Vec::new(),
                    })
                    .probs
                    .push(p);
            }
        }
        let skipped: Vec<String> = split
            .outer_test
            .iter()
            .filter(|p| !patients.contains_key(p.as_str()))
            .cloned()
            .collect();
        if patients.is_empty() {
            return Err(NcvError::Selection(SelectionError::NoTestPredictions {
                fold: display_fold,
            }));
        }
        per_m.push(MFold {
            fold: display_fold,
            selected_channels: selected,
            patients: patients.into_values().collect(),
            skipped_patients: skipped,
        });
    }

    Ok(OuterFoldResult { board, per_m })
}

fn modal_subset(folds: &[MFold]) -> Vec<usize> {
    let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
    for f in folds {
        *counts.entry(&f.selected_channels).or_insert(0) += 1;
    }
    // BTreeMap iteration is ascending, so on tied counts the smallest subset
    // is kept.
    let mut best: (&[usize], usize) = (&[], 0);
    for (subset, count) in counts {
        if count > best.1 {
            best = (subset, count);
        }
    }
    best.0.to_vec()
}

fn assemble_m_runs(cfg: &NcvConfig, fold_results: Vec<OuterFoldResult>) -> (Vec<ChannelScoreBoard>, Vec<MRun>) {
    let boards = fold_results.iter().map(|r| r.board.clone()).collect();
    let m_runs = cfg
        .m_values
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let folds: Vec<MFold> = fold_results.iter().map(|r| r.per_m[mi].clone()).collect();
            let modal_channels = modal_subset(&folds);
            MRun {
                m,
                folds,
                modal_channels,
            }
        })
        .collect();
    (boards, m_runs)
}

/// The patient-grouped stratified paradigm: `outer_k` stratified outer folds,
/// each with an `inner_k`-fold channel-selection loop.
pub fn run_nested_cv(features: &[FeatWindow], cfg: &NcvConfig) -> Result<ParadigmRun> {
    cfg.validate()?;
    let (strata, _) = patient_strata(features).map_err(NcvError::Selection)?;
    require_patients_per_class(&strata, cfg.outer_k).map_err(NcvError::Selection)?;
    let plan = plan_folds(&strata, cfg.outer_k, cfg.seed).map_err(NcvError::Folds)?;

    let fold_results: Vec<OuterFoldResult> = (0..cfg.outer_k)
        .into_par_iter()
        .map(|fold| run_outer_fold(features, &plan, fold, fold, cfg))
        .collect::<Result<_>>()?;

    let (boards, m_runs) = assemble_m_runs(cfg, fold_results);
    Ok(ParadigmRun {
        paradigm: Paradigm::Stratified,
        seed: cfg.seed,
        outer_k: cfg.outer_k,
        inner_k: cfg.inner_k,
        m_values: cfg.m_values.clone(),
        boards,
        m_runs,
        window_folds: Vec::new(),
        audit: AuditStatus::Clean,
        origin_split: None,
        fold_plan: Some(plan),
    })
}

/// Baseline split policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BaselineMode {
    NoStratification,
    PopulationBlock { origin_tag: String },
}

/// Runs a baseline paradigm over the same features, models, and metrics as
/// the stratified run; only the split policy differs.
pub fn run_baseline(
    features: &[FeatWindow],
    mode: &BaselineMode,
    cfg: &NcvConfig,
) -> Result<ParadigmRun> {
    cfg.validate()?;
    match mode {
        BaselineMode::NoStratification => run_no_stratification(features, cfg),
        BaselineMode::PopulationBlock { origin_tag } => {
            run_population_block(features, origin_tag, cfg)
        }
    }
}

/// Window-level folds with no patient grouping. Patients straddle folds and
/// overlapping windows land on both sides, so the audit reports findings;
/// they are recorded as intentional rather than aborting.
fn run_no_stratification(features: &[FeatWindow], cfg: &NcvConfig) -> Result<ParadigmRun> {
    let unit_set: BTreeSet<(String, usize)> = features
        .iter()
        .map(|w| (w.patient_id.clone(), w.window_index))
        .collect();
    let units: Vec<(String, usize)> = unit_set.into_iter().collect();
    let assignment =
        window_level_assignments(&units, cfg.outer_k, cfg.seed).map_err(NcvError::Folds)?;

    let mut findings = LeakageReport::default();
    let fold_of = |w: &FeatWindow| assignment[&(w.patient_id.clone(), w.window_index)];
    let outcomes: Vec<WindowFoldOutcome> = (0..cfg.outer_k)
        .map(|fold| {
            let tr: Vec<&FeatWindow> = features.iter().filter(|w| fold_of(w) != fold).collect();
            let te: Vec<&FeatWindow> = features.iter().filter(|w| fold_of(w) == fold).collect();
            findings.merge(audit_leakage(&spans_of(&tr), &spans_of(&te)));

            let (x, y) = design_matrix(&tr);
            let params = train(&x, &y, &cfg.train).map_err(NcvError::Model)?;
            let (xt, _) = design_matrix(&te);
            let probs = predict_proba(&params, &xt).map_err(NcvError::Model)?;
            let samples = te
                .iter()
                .zip(&probs)
                .map(|(w, &prob)| WindowPred {
                    patient_id: w.patient_id.clone(),
                    session_id: w.session_id.clone(),
                    channel_index: w.channel_index,
                    window_index: w.window_index,
                    label: w.label,
                    prob,
                })
                .collect();
            Ok(WindowFoldOutcome {
                fold,
                n_train_windows: tr.len(),
                samples,
            })
        })
        .collect::<Result<_>>()?;

    Ok(ParadigmRun {
        paradigm: Paradigm::NoStratification,
        seed: cfg.seed,
        outer_k: cfg.outer_k,
        inner_k: cfg.inner_k,
        m_values: Vec::new(),
        boards: Vec::new(),
        m_runs: Vec::new(),
        window_folds: outcomes,
        audit: AuditStatus::IntentionalBaseline { findings },
        origin_split: None,
        fold_plan: None,
    })
}

/// Holds out every patient of one origin as the test side; channel selection
/// runs inside the training origins exactly as in the stratified paradigm.
fn run_population_block(
    features: &[FeatWindow],
    origin_tag: &str,
    cfg: &NcvConfig,
) -> Result<ParadigmRun> {
    let (strata, origins) = patient_strata(features).map_err(NcvError::Selection)?;
    let plan = population_block_plan(&strata, &origins, origin_tag).map_err(NcvError::Folds)?;
    // Fold 1 of a block plan is the held-out origin; reported as fold 0.
    let result = run_outer_fold(features, &plan, 1, 0, cfg)?;
    let (boards, m_runs) = assemble_m_runs(cfg, vec![result]);

    let train_origins: BTreeSet<String> = plan
        .assignments
        .iter()
        .filter(|(_, &fold)| fold == 0)
        .map(|(pid, _)| origins[pid].clone())
        .collect();
    Ok(ParadigmRun {
        paradigm: Paradigm::PopulationBlock,
        seed: cfg.seed,
        outer_k: 1,
        inner_k: cfg.inner_k,
        m_values: cfg.m_values.clone(),
        boards,
        m_runs,
        window_folds: Vec::new(),
        audit: AuditStatus::Clean,
        origin_split: Some(OriginSplit {
            train_origins: train_origins.into_iter().collect(),
            test_origin: origin_tag.to_string(),
        }),
        fold_plan: Some(plan),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthSpec};
    use crate::preprocess::{harmonize_all, ChannelTemplate};

    fn tiny_windowing() -> WindowingConfig {
        WindowingConfig {
            outer_len: 512,
            outer_hop: 256,
            n_fft: 64,
            stft_hop: 32,
            db_floor_eps: 1e-10,
        }
    }

    fn tiny_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            n_patients_per_class: 4,
            channels: ["Fp1", "Fp2", "C3", "C4"].iter().map(|s| s.to_string()).collect(),
            duration_s: 24.0,
            discriminative_channels: vec!["C3".to_string(), "C4".to_string()],
            seed,
            ..SynthSpec::default()
        }
    }

    fn tiny_cfg() -> NcvConfig {
        NcvConfig {
            outer_k: 2,
            inner_k: 2,
            m_values: vec![1, 2, 4],
            seed: 3,
            rules: vec![AggRule::Mean],
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
        }
    }

    fn tiny_features(seed: u64) -> Vec<FeatWindow> {
        let (recs, _) = generate_synthetic(&tiny_spec(seed)).unwrap();
        let template =
            ChannelTemplate::from_labels(&["Fp1", "Fp2", "C3", "C4"]).unwrap();
        let harmonized = harmonize_all(&recs, &template).unwrap();
        build_feature_windows(&harmonized, &tiny_windowing(), &PoolConfig::default(), None)
            .unwrap()
    }

    #[test]
    fn feature_windows_cover_active_channels_and_windows() {
        let features = tiny_features(1);
        // 8 patients × 4 channels × 5 windows (1536 samples, len 512 hop 256).
        assert_eq!(features.len(), 8 * 4 * 5);
        assert!(features.iter().all(|w| w.features.len() == 64));
        let windows: BTreeSet<usize> = features.iter().map(|w| w.window_index).collect();
        assert_eq!(windows, (0..5).collect());
        assert!(features
            .iter()
            .all(|w| w.end_sample - w.start_sample == 512));
    }

    #[test]
    fn inactive_channels_produce_no_features() {
        let (recs, _) = generate_synthetic(&tiny_spec(1)).unwrap();
        // Harmonize against a template with two channels the data lacks.
        let template =
            ChannelTemplate::from_labels(&["Fp1", "Fp2", "F3", "C3", "C4", "O1"]).unwrap();
        let harmonized = harmonize_all(&recs, &template).unwrap();
        let features =
            build_feature_windows(&harmonized, &tiny_windowing(), &PoolConfig::default(), None)
                .unwrap();
        let channels: BTreeSet<usize> = features.iter().map(|w| w.channel_index).collect();
        // Canonical order is region-major (left before right), so the template
        // sorts to [Fp1, F3, Fp2, C3, C4, O1]; F3 (1) and O1 (5) lack data.
        assert_eq!(channels, BTreeSet::from([0, 2, 3, 4]));
        assert_eq!(features.len(), 8 * 4 * 5);
    }

    #[test]
    fn score_board_examples() {
        let mut board = ChannelScoreBoard::default();
        board.add_inner_fold(&BTreeMap::from([(0, 0.6), (3, 0.8)]));
        assert_eq!(board.select_top_m(1).unwrap(), vec![3]);

        let mut board = ChannelScoreBoard::default();
        board.add_inner_fold(&BTreeMap::from([(5, 0.6)]));
        board.add_inner_fold(&BTreeMap::from([(5, 0.8)]));
        assert_eq!(board.means()[&5], 0.7);

        // Exact tie: lower index wins.
        let mut board = ChannelScoreBoard::default();
        board.add_inner_fold(&BTreeMap::from([(2, 0.75), (7, 0.75)]));
        assert_eq!(board.select_top_m(1).unwrap(), vec![2]);

        // m beyond the scored set returns everything, ascending.
        assert_eq!(board.select_top_m(10).unwrap(), vec![2, 7]);

        assert!(matches!(board.select_top_m(0), Err(SelectionError::ZeroM)));
        assert!(matches!(
            ChannelScoreBoard::default().select_top_m(1),
            Err(SelectionError::EmptyBoard)
        ));
    }

    #[test]
    fn mean_skips_folds_without_entries() {
        let mut board = ChannelScoreBoard::default();
        board.add_inner_fold(&BTreeMap::from([(1, 0.9), (2, 0.5)]));
        board.add_inner_fold(&BTreeMap::from([(2, 0.7)]));
        let means = board.means();
        // Channel 1 was only scored in one fold; its mean is that score.
        assert_eq!(means[&1], 0.9);
        assert_eq!(means[&2], 0.6);
    }

    #[test]
    fn constant_predictor_scores_positive_fraction() {
        let features = tiny_features(2);
        let params = ModelParams {
            weights: vec![0.0; 64],
            bias: 0.0,
            feature_mean: vec![0.0; 64],
            feature_std: vec![1.0; 64],
        };
        let refs: Vec<&FeatWindow> = features.iter().collect();
        let accs = score_channels(&params, &refs).unwrap();
        // p = 0.5 everywhere → predicted positive → accuracy per channel is
        // its positive-window fraction (balanced classes → 0.5).
        for (&ch, &acc) in &accs {
            let total = refs.iter().filter(|w| w.channel_index == ch).count();
            let pos = refs
                .iter()
                .filter(|w| w.channel_index == ch && w.label == Diagnosis::Pd)
                .count();
            assert_eq!(acc, pos as f64 / total as f64, "channel {ch}");
        }
    }

    #[test]
    fn nested_cv_structure_and_isolation() {
        let features = tiny_features(3);
        let cfg = tiny_cfg();
        let run = run_nested_cv(&features, &cfg).unwrap();
        assert_eq!(run.paradigm, Paradigm::Stratified);
        assert_eq!(run.boards.len(), 2);
        assert_eq!(run.m_runs.len(), 3);
        assert!(matches!(run.audit, AuditStatus::Clean));

        for m_run in &run.m_runs {
            assert_eq!(m_run.folds.len(), 2);
            // Every patient is tested exactly once across outer folds.
            let mut tested: Vec<&str> = m_run
                .folds
                .iter()
                .flat_map(|f| f.patients.iter().map(|p| p.patient_id.as_str()))
                .collect();
            tested.sort();
            assert_eq!(tested.len(), 8);
            assert!(tested.windows(2).all(|w| w[0] != w[1]));
            for fold in &m_run.folds {
                assert_eq!(fold.selected_channels.len(), m_run.m.min(4));
                assert!(fold.skipped_patients.is_empty());
                for p in &fold.patients {
                    // 5 windows × |selected| channels per patient.
                    assert_eq!(p.probs.len(), 5 * fold.selected_channels.len());
                    assert!(p.probs.iter().all(|&pr| (0.0..=1.0).contains(&pr)));
                }
            }
            assert!(!m_run.modal_channels.is_empty());
        }
    }

    #[test]
    fn m_at_channel_count_is_the_all_channel_run() {
        let features = tiny_features(4);
        let mut cfg = tiny_cfg();
        cfg.m_values = vec![4, 16];
        let run = run_nested_cv(&features, &cfg).unwrap();
        let m4 = &run.m_runs[0];
        let m16 = &run.m_runs[1];
        for (a, b) in m4.folds.iter().zip(&m16.folds) {
            assert_eq!(a.selected_channels, b.selected_channels);
            assert_eq!(a.patients, b.patients);
        }
    }

    #[test]
    fn nested_cv_is_deterministic() {
        let features = tiny_features(5);
        let cfg = tiny_cfg();
        let a = run_nested_cv(&features, &cfg).unwrap();
        let b = run_nested_cv(&features, &cfg).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        let back: ParadigmRun = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn too_few_patients_is_reported_per_class() {
        let features = tiny_features(6);
        let mut cfg = tiny_cfg();
        cfg.outer_k = 5;
        let err = run_nested_cv(&features, &cfg).unwrap_err();
        assert!(matches!(
            err,
            NcvError::Selection(SelectionError::TooFewPatients { have: 4, need: 5, .. })
        ));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let features = tiny_features(7);
        for broken in [
            NcvConfig { outer_k: 1, ..tiny_cfg() },
            NcvConfig { inner_k: 0, ..tiny_cfg() },
            NcvConfig { m_values: vec![], ..tiny_cfg() },
            NcvConfig { m_values: vec![0], ..tiny_cfg() },
            NcvConfig { m_values: vec![2, 2], ..tiny_cfg() },
            NcvConfig { rules: vec![], ..tiny_cfg() },
        ] {
            assert!(matches!(
                run_nested_cv(&features, &broken),
                Err(NcvError::Config(_))
            ));
        }
    }

    #[test]
    fn no_stratification_flags_leakage_and_covers_all_samples() {
        let features = tiny_features(8);
        let run = run_baseline(&features, &BaselineMode::NoStratification, &tiny_cfg()).unwrap();
        assert_eq!(run.paradigm, Paradigm::NoStratification);
        assert_eq!(run.window_folds.len(), 2);
        let AuditStatus::IntentionalBaseline { findings } = &run.audit else {
            panic!("expected intentional-baseline audit");
        };
        assert!(!findings.is_clean());
        assert!(!findings.subject.is_empty());
        // Overlapping windows (hop < len) must also produce temporal findings.
        assert!(!findings.temporal.is_empty());

        let total: usize = run.window_folds.iter().map(|f| f.samples.len()).sum();
        assert_eq!(total, features.len());
        for f in &run.window_folds {
            assert_eq!(f.n_train_windows, features.len() - f.samples.len());
        }
    }

    #[test]
    fn population_block_holds_out_one_origin() {
        let mut features = tiny_features(9);
        // Split the cohort into two origins by patient parity.
        for w in &mut features {
            let n: usize = w.patient_id[2..].parse().unwrap();
            w.origin_tag = if n.is_multiple_of(2) { "siteA".into() } else { "siteB".into() };
        }
        let mode = BaselineMode::PopulationBlock { origin_tag: "siteB".into() };
        let run = run_baseline(&features, &mode, &tiny_cfg()).unwrap();
        assert_eq!(run.paradigm, Paradigm::PopulationBlock);
        assert!(matches!(run.audit, AuditStatus::Clean));
        let split = run.origin_split.as_ref().unwrap();
        assert_eq!(split.test_origin, "siteB");
        assert_eq!(split.train_origins, vec!["siteA".to_string()]);
        assert_eq!(run.m_runs[0].folds.len(), 1);
        for p in &run.m_runs[0].folds[0].patients {
            let n: usize = p.patient_id[2..].parse().unwrap();
            assert_eq!(n % 2, 1, "patient {} not from siteB", p.patient_id);
        }

        let missing = BaselineMode::PopulationBlock { origin_tag: "siteC".into() };
        assert!(run_baseline(&features, &missing, &tiny_cfg()).is_err());
    }

    #[test]
    fn conflicting_patient_metadata_is_rejected() {
        let mut features = tiny_features(10);
        features[0].label = match features[0].label {
            Diagnosis::Pd => Diagnosis::Control,
            Diagnosis::Control => Diagnosis::Pd,
        };
        assert!(matches!(
            patient_strata(&features),
            Err(SelectionError::ConflictingLabels { .. })
        ));

        let mut features = tiny_features(10);
        features[0].origin_tag = "elsewhere".into();
        assert!(matches!(
            patient_strata(&features),
            Err(SelectionError::ConflictingOrigins { .. })
        ));
    }
}
