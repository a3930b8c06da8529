//! Statistical sanity checks of the synthetic cohort generator: amplitude
//! calibration, no class signal when the effect is zero, clear class signal
//! on the planted channels, and the per-patient fingerprint that makes
//! window-level splits leak.
//!
//! All randomness is seeded, so every check is deterministic; the bounds are
//! standard large-sample limits with generous slack.

use ncv_core::dataset::generate_synthetic;
use ncv_core::evaluate::auc_mann_whitney;
use ncv_core::selection::{build_feature_windows, FeatWindow};
use ncv_core::preprocess::harmonize_all;
use ncv_core::{ChannelTemplate, Diagnosis, PoolConfig, SynthSpec, WindowingConfig};
use statrs::distribution::{ContinuousCDF, Normal};

fn base_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_patients_per_class: 4,
        channels: ["Fp1", "Fp2", "C3", "C4"].iter().map(|s| s.to_string()).collect(),
        duration_s: 24.0,
        class_effect_size: 2.0,
        idiosyncrasy_strength: 1.0,
        noise_sigma: 1.0,
        seed,
        ..SynthSpec::default()
    }
}

fn tiny_windowing() -> WindowingConfig {
    WindowingConfig {
        outer_len: 512,
        outer_hop: 256,
        n_fft: 64,
        stft_hop: 32,
        db_floor_eps: 1e-10,
    }
}

fn features_for(spec: &SynthSpec) -> Vec<FeatWindow> {
    let (recordings, _) = generate_synthetic(spec).unwrap();
    let labels: Vec<&str> = spec.channels.iter().map(String::as_str).collect();
    let template = ChannelTemplate::from_labels(&labels).unwrap();
    let harmonized = harmonize_all(&recordings, &template).unwrap();
    build_feature_windows(&harmonized, &tiny_windowing(), &PoolConfig::default(), None).unwrap()
}

/// Pooled row 1 of the 8x8 grid covers the planted 4-8 Hz band; its mean is
/// the single most class-informative summary of a window.
fn band_row_mean(w: &FeatWindow) -> f64 {
    w.features[8..16].iter().sum::<f64>() / 8.0
}

/// Two-sided p-value for the large-sample Mann-Whitney test that `auc` is
/// 0.5, with `n1` positives and `n0` negatives.
fn mwu_p_value(auc: f64, n1: usize, n0: usize) -> f64 {
    let se = ((n1 + n0 + 1) as f64 / (12.0 * n1 as f64 * n0 as f64)).sqrt();
    let z = (auc - 0.5) / se;
    let normal = Normal::new(0.0, 1.0).unwrap();
    2.0 * (1.0 - normal.cdf(z.abs()))
}

/// AUC of the band-row feature for PD vs control windows on the given
/// channel indices, plus the class counts behind it.
fn band_auc(features: &[FeatWindow], channels: &[usize]) -> (f64, usize, usize) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for w in features.iter().filter(|w| channels.contains(&w.channel_index)) {
        scores.push(band_row_mean(w));
        labels.push(w.label);
    }
    let n1 = labels.iter().filter(|l| **l == Diagnosis::Pd).count();
    let n0 = labels.len() - n1;
    (auc_mann_whitney(&scores, &labels).unwrap(), n1, n0)
}

#[test]
fn amplitude_calibration_matches_documented_model() {
    // Longer recording for tight variance estimates.
    let spec = SynthSpec {
        duration_s: 256.0,
        class_effect_size: 1.5,
        idiosyncrasy_strength: 2.0,
        ..base_spec(31)
    };
    let (recordings, truth) = generate_synthetic(&spec).unwrap();

    let variance = |r: &ncv_core::Recording, ch: usize| -> f64 {
        let row = r.samples.row(ch);
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
    };

    // Control channels carry noise plus the signature tone:
    // sigma^2 + idio^2 / 2.
    let control = recordings.iter().find(|r| r.diagnosis == Diagnosis::Control).unwrap();
    let expected = 1.0 + 2.0_f64.powi(2) / 2.0;
    for ch in 0..4 {
        let v = variance(control, ch);
        assert!(
            (v - expected).abs() / expected < 0.05,
            "control channel {ch}: variance {v:.3}, expected {expected:.3}"
        );
    }

    // Discriminative channels of a case add the band tones: + effect^2.
    let case = recordings.iter().find(|r| r.diagnosis == Diagnosis::Pd).unwrap();
    let disc_expected = expected + 1.5_f64.powi(2);
    for (ch, label) in case.channel_labels.iter().enumerate() {
        let v = variance(case, ch);
        let want = if truth.discriminative_channels.contains(label) {
            disc_expected
        } else {
            expected
        };
        assert!(
            (v - want).abs() / want < 0.05,
            "case channel {label}: variance {v:.3}, expected {want:.3}"
        );
    }
}

#[test]
fn zero_effect_produces_no_class_separation() {
    let spec = SynthSpec {
        class_effect_size: 0.0,
        ..base_spec(32)
    };
    let features = features_for(&spec);
    // All four channels, planted set included: nothing should separate.
    let (auc, n1, n0) = band_auc(&features, &[0, 1, 2, 3]);
    let p = mwu_p_value(auc, n1, n0);
    assert!(
        p > 1e-4,
        "null cohort separates: AUC {auc:.3} over {n1}+{n0} windows, p {p:.2e}"
    );
}

#[test]
fn planted_effect_separates_only_the_planted_channels() {
    let features = features_for(&base_spec(33));
    // Template order for [Fp1, Fp2, C3, C4]: frontal pair first, central
    // pair second, so the planted C3/C4 sit at indices 2 and 3.
    let (auc_planted, n1, n0) = band_auc(&features, &[2, 3]);
    assert!(n1 > 0 && n0 > 0);
    assert!(
        auc_planted > 0.9,
        "planted channels barely separate: AUC {auc_planted:.3}"
    );

    let (auc_rest, n1, n0) = band_auc(&features, &[0, 1]);
    let p = mwu_p_value(auc_rest, n1, n0);
    assert!(
        p > 1e-4,
        "unplanted channels separate: AUC {auc_rest:.3} over {n1}+{n0} windows, p {p:.2e}"
    );
}

/// Nearest-neighbor patient identification from single windows: with strong
/// idiosyncrasy each patient's signature tone is a fingerprint, which is
/// exactly what window-level splits let a classifier memorize. Without it,
/// identification collapses toward chance.
fn nn_patient_id_accuracy(features: &[FeatWindow]) -> f64 {
    let windows: Vec<&FeatWindow> =
        features.iter().filter(|w| w.channel_index == 0).collect();
    let mut hits = 0usize;
    for (i, query) in windows.iter().enumerate() {
        let mut best: Option<(f64, &str)> = None;
        for (j, other) in windows.iter().enumerate() {
            if i == j {
                continue;
            }
            let d: f64 = query
                .features
                .iter()
                .zip(&other.features)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, other.patient_id.as_str()));
            }
        }
        if best.unwrap().1 == query.patient_id {
            hits += 1;
        }
    }
    hits as f64 / windows.len() as f64
}

#[test]
fn idiosyncrasy_gives_each_patient_a_window_fingerprint() {
    let with_signature = SynthSpec {
        class_effect_size: 0.0,
        idiosyncrasy_strength: 3.0,
        ..base_spec(34)
    };
    let acc = nn_patient_id_accuracy(&features_for(&with_signature));
    assert!(acc >= 0.9, "fingerprint too weak: 1-NN accuracy {acc:.3}");

    let without_signature = SynthSpec {
        class_effect_size: 0.0,
        idiosyncrasy_strength: 0.0,
        ..base_spec(34)
    };
    let acc = nn_patient_id_accuracy(&features_for(&without_signature));
    assert!(acc < 0.5, "pure-noise windows should not identify patients: {acc:.3}");
}
