//! Patient-grouped stratified fold planning and the leakage auditor.
//!
//! Patients are the atomic unit: a fold plan assigns every patient to exactly
//! one fold while keeping per-fold class counts within one patient of ideal.
//! Nested splits re-plan inner folds over the outer-train patients only, with
//! a seed derived per outer fold. The auditor checks any train/test pair of
//! window sets for the two failure modes worth aborting a run over: a patient
//! on both sides, and overlapping sample spans of one recording on both
//! sides.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Diagnosis;

#[derive(Debug, thiserror::Error)]
pub enum FoldError {
    #[error("fold count {k} must be at least 2")]
    KTooSmall { k: usize },
    #[error("fold count {k} exceeds available group count {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("stratified folds need both classes present")]
    SingleClass,
    #[error("duplicate patient `{patient_id}` in fold input")]
    DuplicatePatient { patient_id: String },
    #[error("inner fold count {inner_k} exceeds outer-train patient count {available}")]
    InnerKTooLarge { inner_k: usize, available: usize },
    #[error("fold index {fold} out of range for k={k}")]
    BadFoldIndex { fold: usize, k: usize },
    #[error("population block: origin `{origin}` matches no patients")]
    UnknownOrigin { origin: String },
    #[error("population block needs at least 2 origins; all patients share `{origin}`")]
    SingleOrigin { origin: String },
}

/// One patient as the fold planner sees them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientStratum {
    pub patient_id: String,
    pub label: Diagnosis,
    /// Feature windows this patient contributes; used to spread heavy
    /// patients across folds first.
    pub n_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    StratifiedGrouped,
    WindowLevelUnstratified,
    PopulationBlock { origin_tag: String },
}

/// A patient → fold assignment, serializable for audits and re-runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub mode: FoldMode,
    pub assignments: BTreeMap<String, usize>,
    pub strata: Vec<PatientStratum>,
}

impl FoldPlan {
    pub fn fold_patients(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<FoldPlan, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Greedy grouped stratified assignment: shuffle patients by seed, stable
/// sort by (label, descending window count), then give each patient to the
/// fold with the fewest patients of that label so far (ties to the smallest
/// fold, then the lowest fold index). Per-fold class counts end within ±1 of
/// the feasible optimum, and every fold is non-empty whenever k <= patients.
pub fn plan_folds(patients: &[PatientStratum], k: usize, seed: u64) -> Result<FoldPlan, FoldError> {
    if k < 2 {
        return Err(FoldError::KTooSmall { k });
    }
    if k > patients.len() {
        return Err(FoldError::KTooLarge { k, n: patients.len() });
    }
    let mut ids = HashSet::new();
    for p in patients {
        if !ids.insert(p.patient_id.as_str()) {
            return Err(FoldError::DuplicatePatient {
                patient_id: p.patient_id.clone(),
            });
        }
    }
    let classes: HashSet<Diagnosis> = patients.iter().map(|p| p.label).collect();
    if classes.len() < 2 {
        return Err(FoldError::SingleClass);
    }

    let mut order: Vec<usize> = (0..patients.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    // Stable sort keeps the shuffled order within equal keys.
    order.sort_by_key(|&i| (patients[i].label.label(), std::cmp::Reverse(patients[i].n_windows)));

    let mut class_counts = vec![[0usize; 2]; k];
    let mut totals = vec![0usize; k];
    let mut assignments = BTreeMap::new();
    for &i in &order {
        let label = patients[i].label.label() as usize;
        let fold = (0..k)
            .min_by_key(|&f| (class_counts[f][label], totals[f], f))
            .expect("k >= 2");
        class_counts[fold][label] += 1;
        totals[fold] += 1;
        assignments.insert(patients[i].patient_id.clone(), fold);
    }

    let mut strata = patients.to_vec();
    strata.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(FoldPlan {
        k,
        mode: FoldMode::StratifiedGrouped,
        assignments,
        strata,
    })
}

/// A single-split plan holding out every patient of one origin: fold 0 =
/// train, fold 1 = test.
pub fn population_block_plan(
    patients: &[PatientStratum],
    origin_of: &BTreeMap<String, String>,
    origin: &str,
) -> Result<FoldPlan, FoldError> {
    let mut assignments = BTreeMap::new();
    let mut n_test = 0usize;
    for p in patients {
        let is_test = origin_of.get(&p.patient_id).map(String::as_str) == Some(origin);
        assignments.insert(p.patient_id.clone(), usize::from(is_test));
        n_test += usize::from(is_test);
    }
    if n_test == 0 {
        return Err(FoldError::UnknownOrigin { origin: to_owned_origin(origin) });
    }
    if n_test == patients.len() {
        return Err(FoldError::SingleOrigin { origin: to_owned_origin(origin) });
    }
    let mut strata = patients.to_vec();
    strata.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(FoldPlan {
        k: 2,
        mode: FoldMode::PopulationBlock {
            origin_tag: to_owned_origin(origin),
        },
        assignments,
        strata,
    })
}

fn to_owned_origin(origin: &str) -> String {
    origin.to_string()
}

/// Assigns `(patient_id, window_index)` units to folds with no grouping or
/// stratification — the leakage baseline. Seeded shuffle, then round-robin.
pub fn window_level_assignments(
    units: &[(String, usize)],
    k: usize,
    seed: u64,
) -> Result<BTreeMap<(String, usize), usize>, FoldError> {
    if k < 2 {
        return Err(FoldError::KTooSmall { k });
    }
    if k > units.len() {
        return Err(FoldError::KTooLarge { k, n: units.len() });
    }
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order
        .iter()
        .enumerate()
        .map(|(pos, &i)| (units[i].clone(), pos % k))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedSplit {
    pub outer_train: Vec<String>,
    pub outer_test: Vec<String>,
    pub inner: Vec<InnerSplit>,
}

/// splitmix64; decorrelates per-fold seeds from the run seed.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, fold: u64) -> u64 {
    splitmix64(seed ^ splitmix64(fold.wrapping_add(1)))
}

/// Expands one outer fold of a plan into (outer_train, outer_test, inner
/// splits). Inner folds are planned over outer-train patients only, with a
/// per-outer-fold derived seed, so outer-test patients can never appear in
/// any inner set.
pub fn nested_split(
    plan: &FoldPlan,
    outer_fold: usize,
    inner_k: usize,
    seed: u64,
) -> Result<NestedSplit, FoldError> {
    if outer_fold >= plan.k {
        return Err(FoldError::BadFoldIndex {
            fold: outer_fold,
            k: plan.k,
        });
    }
    let mut outer_train = Vec::new();
    let mut outer_test = Vec::new();
    for (patient, &fold) in &plan.assignments {
        if fold == outer_fold {
            outer_test.push(patient.clone());
        } else {
            outer_train.push(patient.clone());
        }
    }

    let train_strata: Vec<PatientStratum> = plan
        .strata
        .iter()
        .filter(|s| !outer_test.contains(&s.patient_id))
        .cloned()
        .collect();
    let inner_plan = plan_folds(&train_strata, inner_k, derive_seed(seed, outer_fold as u64))
        .map_err(|e| match e {
            FoldError::KTooLarge { k, n } => FoldError::InnerKTooLarge {
                inner_k: k,
                available: n,
            },
            other => other,
        })?;

    let inner = (0..inner_k)
        .map(|f| {
            let mut val = Vec::new();
            let mut train = Vec::new();
            for (patient, &fold) in &inner_plan.assignments {
                if fold == f {
                    val.push(patient.clone());
                } else {
                    train.push(patient.clone());
                }
            }
            InnerSplit { train, val }
        })
        .collect();

    Ok(NestedSplit {
        outer_train,
        outer_test,
        inner,
    })
}

/// Provenance of one window for the auditor: which patient, which recording,
/// and which sample span `[start, end)` it covers.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowSpan {
    pub patient_id: String,
    pub session_id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalLeak {
    pub patient_id: String,
    pub session_id: String,
    pub overlapping_pairs: usize,
    /// First offending (train span, test span) pair, as (start, end) tuples.
    pub example: ((usize, usize), (usize, usize)),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Patients with windows on both sides of the split.
    pub subject: Vec<String>,
    /// Recordings with overlapping spans on both sides of the split.
    pub temporal: Vec<TemporalLeak>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.subject.is_empty() && self.temporal.is_empty()
    }

    pub fn merge(&mut self, other: LeakageReport) {
        for p in other.subject {
            if !self.subject.contains(&p) {
                self.subject.push(p);
            }
        }
        self.subject.sort();
        self.temporal.extend(other.temporal);
    }
}

impl fmt::Display for LeakageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            return f.write_str("clean");
        }
        let mut parts = Vec::new();
        if !self.subject.is_empty() {
            parts.push(format!(
                "subject leakage: {} patient(s) on both sides [{}]",
                self.subject.len(),
                self.subject.join(", ")
            ));
        }
        if !self.temporal.is_empty() {
            let pairs: usize = self.temporal.iter().map(|t| t.overlapping_pairs).sum();
            let first = &self.temporal[0];
            parts.push(format!(
                "temporal leakage: {} overlapping pair(s) across {} recording(s), e.g. patient {} session {} train span [{}, {}) vs test span [{}, {})",
                pairs,
                self.temporal.len(),
                first.patient_id,
                first.session_id,
                first.example.0 .0,
                first.example.0 .1,
                first.example.1 .0,
                first.example.1 .1,
            ));
        }
        f.write_str(&parts.join("; "))
    }
}

/// Checks a train/test pair of window sets for subject leakage (a patient on
/// both sides) and temporal leakage (overlapping spans of one recording on
/// both sides). An empty report means the split is clean.
pub fn audit_leakage(train: &[WindowSpan], test: &[WindowSpan]) -> LeakageReport {
    let train_patients: BTreeSet<&str> = train.iter().map(|w| w.patient_id.as_str()).collect();
    let test_patients: BTreeSet<&str> = test.iter().map(|w| w.patient_id.as_str()).collect();
    let subject: Vec<String> = train_patients
        .intersection(&test_patients)
        .map(|p| p.to_string())
        .collect();

    let mut train_by_rec: HashMap<(&str, &str), Vec<(usize, usize)>> = HashMap::new();
    for w in train {
        train_by_rec
            .entry((w.patient_id.as_str(), w.session_id.as_str()))
            .or_default()
            .push((w.start, w.end));
    }

    let mut temporal: BTreeMap<(String, String), TemporalLeak> = BTreeMap::new();
    for w in test {
        let Some(spans) = train_by_rec.get(&(w.patient_id.as_str(), w.session_id.as_str())) else {
            continue;
        };
        for &(s, e) in spans {
            if s < w.end && w.start < e {
                temporal
                    .entry((w.patient_id.clone(), w.session_id.clone()))
                    .and_modify(|t| t.overlapping_pairs += 1)
                    .or_insert_with(|| TemporalLeak {
                        patient_id: w.patient_id.clone(),
                        session_id: w.session_id.clone(),
                        overlapping_pairs: 1,
                        example: ((s, e), (w.start, w.end)),
                    });
            }
        }
    }

    LeakageReport {
        subject,
        temporal: temporal.into_values().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strata(counts: &[(&str, Diagnosis, usize)]) -> Vec<PatientStratum> {
        counts
            .iter()
            .map(|(id, label, n)| PatientStratum {
                patient_id: id.to_string(),
                label: *label,
                n_windows: *n,
            })
            .collect()
    }

    fn balanced_strata(n_per_class: usize, n_windows: usize) -> Vec<PatientStratum> {
        let mut out = Vec::new();
        for i in 0..n_per_class {
            out.push(PatientStratum {
                patient_id: format!("ct{i:02}"),
                label: Diagnosis::Control,
                n_windows,
            });
            out.push(PatientStratum {
                patient_id: format!("pd{i:02}"),
                label: Diagnosis::Pd,
                n_windows,
            });
        }
        out
    }

    fn class_counts(plan: &FoldPlan) -> Vec<[usize; 2]> {
        let mut counts = vec![[0usize; 2]; plan.k];
        for s in &plan.strata {
            counts[plan.assignments[&s.patient_id]][s.label.label() as usize] += 1;
        }
        counts
    }

    #[test]
    fn six_patients_three_folds_perfectly_balanced() {
        for seed in 0..10 {
            let plan = plan_folds(&balanced_strata(3, 4), 3, seed).unwrap();
            for counts in class_counts(&plan) {
                assert_eq!(counts, [1, 1]);
            }
        }
    }

    #[test]
    fn leave_one_patient_out_degenerates_to_singletons() {
        let p = balanced_strata(2, 1);
        let plan = plan_folds(&p, 4, 9).unwrap();
        let mut folds: Vec<usize> = plan.assignments.values().copied().collect();
        folds.sort();
        assert_eq!(folds, vec![0, 1, 2, 3]);
    }

    #[test]
    fn plan_errors() {
        let p = balanced_strata(2, 1);
        assert!(matches!(plan_folds(&p, 1, 0), Err(FoldError::KTooSmall { .. })));
        assert!(matches!(plan_folds(&p, 5, 0), Err(FoldError::KTooLarge { .. })));
        let single = strata(&[("a", Diagnosis::Pd, 1), ("b", Diagnosis::Pd, 1)]);
        assert!(matches!(plan_folds(&single, 2, 0), Err(FoldError::SingleClass)));
        let dup = strata(&[("a", Diagnosis::Pd, 1), ("a", Diagnosis::Control, 1)]);
        assert!(matches!(plan_folds(&dup, 2, 0), Err(FoldError::DuplicatePatient { .. })));
    }

    #[test]
    fn nested_split_shapes_and_isolation() {
        let p = balanced_strata(10, 9);
        let plan = plan_folds(&p, 5, 42).unwrap();
        for fold in 0..5 {
            let split = nested_split(&plan, fold, 3, 42).unwrap();
            assert_eq!(split.outer_test.len(), 4);
            assert_eq!(split.outer_train.len(), 16);
            assert_eq!(split.inner.len(), 3);
            for inner in &split.inner {
                assert!(inner.val.len() == 5 || inner.val.len() == 6, "val size {}", inner.val.len());
                for v in &inner.val {
                    assert!(!split.outer_test.contains(v));
                    assert!(!inner.train.contains(v));
                }
                for t in &inner.train {
                    assert!(!split.outer_test.contains(t));
                }
                assert_eq!(inner.train.len() + inner.val.len(), split.outer_train.len());
            }
        }
    }

    #[test]
    fn nested_split_is_deterministic_per_seed() {
        let p = balanced_strata(8, 3);
        let plan = plan_folds(&p, 4, 11).unwrap();
        let a = nested_split(&plan, 2, 3, 11).unwrap();
        let b = nested_split(&plan, 2, 3, 11).unwrap();
        assert_eq!(a, b);
        let plan2 = plan_folds(&p, 4, 12).unwrap();
        assert!(plan != plan2 || nested_split(&plan2, 2, 3, 12).unwrap() != a);
    }

    #[test]
    fn inner_k_too_large_is_reported() {
        let p = balanced_strata(2, 1);
        let plan = plan_folds(&p, 2, 0).unwrap();
        // Outer-train has 2 patients; inner_k = 3 cannot fit.
        assert!(matches!(
            nested_split(&plan, 0, 3, 0),
            Err(FoldError::InnerKTooLarge { inner_k: 3, available: 2 })
        ));
    }

    #[test]
    fn population_block_plan_splits_by_origin() {
        let p = strata(&[
            ("a1", Diagnosis::Pd, 1),
            ("a2", Diagnosis::Control, 1),
            ("b1", Diagnosis::Pd, 1),
            ("b2", Diagnosis::Control, 1),
        ]);
        let origins: BTreeMap<String, String> = [
            ("a1", "siteA"),
            ("a2", "siteA"),
            ("b1", "siteB"),
            ("b2", "siteB"),
        ]
        .iter()
        .map(|(p, o)| (p.to_string(), o.to_string()))
        .collect();
        let plan = population_block_plan(&p, &origins, "siteB").unwrap();
        assert_eq!(plan.assignments["a1"], 0);
        assert_eq!(plan.assignments["b1"], 1);
        let split = nested_split(&plan, 1, 2, 5).unwrap();
        assert_eq!(split.outer_test, vec!["b1".to_string(), "b2".to_string()]);

        assert!(matches!(
            population_block_plan(&p, &origins, "siteC"),
            Err(FoldError::UnknownOrigin { .. })
        ));
        let all_a: BTreeMap<String, String> =
            p.iter().map(|s| (s.patient_id.clone(), "siteA".to_string())).collect();
        assert!(matches!(
            population_block_plan(&p, &all_a, "siteA"),
            Err(FoldError::SingleOrigin { .. })
        ));
    }

    fn span(pid: &str, sid: &str, start: usize, end: usize) -> WindowSpan {
        WindowSpan {
            patient_id: pid.to_string(),
            session_id: sid.to_string(),
            start,
            end,
        }
    }

    #[test]
    fn audit_disjoint_patients_is_clean() {
        let train = vec![span("a", "s1", 0, 100), span("a", "s1", 50, 150)];
        let test = vec![span("b", "s1", 0, 100)];
        assert!(audit_leakage(&train, &test).is_clean());
    }

    #[test]
    fn audit_flags_subject_leakage_by_name() {
        let train = vec![span("a", "s1", 0, 100)];
        let test = vec![span("a", "s2", 0, 100), span("b", "s1", 0, 100)];
        let report = audit_leakage(&train, &test);
        assert_eq!(report.subject, vec!["a".to_string()]);
        // Different sessions: subject but not temporal leakage.
        assert!(report.temporal.is_empty());
    }

    #[test]
    fn audit_flags_overlapping_spans_of_one_recording() {
        let train = vec![span("a", "s1", 0, 16384)];
        let test = vec![span("a", "s1", 4096, 20480)];
        let report = audit_leakage(&train, &test);
        assert_eq!(report.temporal.len(), 1);
        assert_eq!(report.temporal[0].overlapping_pairs, 1);
        assert_eq!(report.temporal[0].example, ((0, 16384), (4096, 20480)));

        // Abutting spans do not overlap.
        let test = vec![span("a", "s1", 16384, 32768)];
        assert!(audit_leakage(&train, &test).temporal.is_empty());
    }

    #[test]
    fn window_level_split_of_overlapping_windows_trips_audit() {
        // One long recording per patient, hop < len, odd window count per
        // patient and k=2: fold parity guarantees some patient straddles.
        let patients = ["a", "b", "c", "d", "e"];
        let mut units = Vec::new();
        let mut spans = HashMap::new();
        for p in patients {
            for w in 0..3usize {
                units.push((p.to_string(), w));
                spans.insert((p.to_string(), w), span(p, "s1", w * 50, w * 50 + 100));
            }
        }
        let assignment = window_level_assignments(&units, 2, 77).unwrap();
        for fold in 0..2 {
            let train: Vec<WindowSpan> = units
                .iter()
                .filter(|u| assignment[*u] != fold)
                .map(|u| spans[u].clone())
                .collect();
            let test: Vec<WindowSpan> = units
                .iter()
                .filter(|u| assignment[*u] == fold)
                .map(|u| spans[u].clone())
                .collect();
            let report = audit_leakage(&train, &test);
            assert!(!report.is_clean(), "fold {fold} unexpectedly clean");
        }
    }

    proptest! {
        #[test]
        fn plans_partition_and_balance(
            n_control in 1usize..12,
            n_pd in 1usize..12,
            k in 2usize..6,
            seed in 0u64..1000,
        ) {
            let mut patients = Vec::new();
            for i in 0..n_control {
                patients.push(PatientStratum {
                    patient_id: format!("c{i}"),
                    label: Diagnosis::Control,
                    n_windows: 1 + (i % 4),
                });
            }
            for i in 0..n_pd {
                patients.push(PatientStratum {
                    patient_id: format!("p{i}"),
                    label: Diagnosis::Pd,
                    n_windows: 1 + (i % 3),
                });
            }
            prop_assume!(k <= patients.len());
            let plan = plan_folds(&patients, k, seed).unwrap();

            // Partition: every patient exactly once.
            prop_assert_eq!(plan.assignments.len(), patients.len());
            for p in &patients {
                prop_assert!(plan.assignments[&p.patient_id] < k);
            }
            // Class balance within 1 across folds.
            let mut counts = vec![[0usize; 2]; k];
            for p in &patients {
                counts[plan.assignments[&p.patient_id]][p.label.label() as usize] += 1;
            }
            for class in 0..2 {
                let per_fold: Vec<usize> = counts.iter().map(|c| c[class]).collect();
                let lo = per_fold.iter().min().unwrap();
                let hi = per_fold.iter().max().unwrap();
                prop_assert!(hi - lo <= 1, "class {class}: {per_fold:?}");
            }
        }

        #[test]
        fn nested_splits_never_leak_outer_test(
            n_per_class in 3usize..8,
            k in 2usize..5,
            inner_k in 2usize..4,
            seed in 0u64..500,
        ) {
            let patients = balanced_strata(n_per_class, 3);
            prop_assume!(k <= patients.len());
            let plan = plan_folds(&patients, k, seed).unwrap();
            for fold in 0..k {
                let split = match nested_split(&plan, fold, inner_k, seed) {
                    Ok(s) => s,
                    Err(FoldError::InnerKTooLarge { .. }) => continue,
                    Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
                };
                let test: BTreeSet<&String> = split.outer_test.iter().collect();
                for inner in &split.inner {
                    for p in inner.train.iter().chain(inner.val.iter()) {
                        prop_assert!(!test.contains(p));
                    }
                }
                // Inner vals partition outer_train.
                let mut seen = BTreeSet::new();
                for inner in &split.inner {
                    for p in &inner.val {
                        prop_assert!(seen.insert(p.clone()));
                    }
                }
                prop_assert_eq!(seen.len(), split.outer_train.len());
            }
        }
    }
}
