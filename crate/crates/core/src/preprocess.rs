//! Signal normalization and montage harmonization.
//!
//! Recordings arrive with arbitrary sample rates and channel subsets. This
//! module conforms each one to a canonical channel template: every supplied
//! channel is resampled to 64 Hz, standardized to zero mean and unit
//! variance, scaled to unit amplitude, and written to its template row;
//! template rows the recording does not supply stay all-zero and inactive.
//!
//! Template ordering rule: regions run anterior to posterior; within a
//! region, odd-numbered (left) labels come first, then `z` (midline) labels,
//! then even-numbered (right) labels, each sub-group by ascending label
//! number. Equal numbers (e.g. Fp1 vs F1) fall back to the anatomical row
//! order of the label prefix, anterior first.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dataset::{Diagnosis, Recording};

/// Every harmonized signal is resampled to this rate.
pub const TARGET_RATE_HZ: f64 = 64.0;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("signal is empty")]
    EmptySignal,
    #[error("signal too short to standardize: length {len} < 2")]
    TooShort { len: usize },
    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },
    #[error("invalid resample rates: {from_hz} Hz -> {to_hz} Hz")]
    InvalidRate { from_hz: f64, to_hz: f64 },
    #[error("channel label `{label}` cannot be mapped onto the template")]
    UnmappableLabel { label: String },
    #[error("channels `{first}` and `{second}` both map to template entry {label}")]
    AliasCollision { first: String, second: String, label: String },
    #[error("invalid template: {reason}")]
    InvalidTemplate { reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Electrode row prefixes in anterior→posterior order, uppercase for lookup.
const ROWS: [&str; 13] = [
    "FP", "AF", "F", "FT", "FC", "T", "C", "TP", "CP", "P", "PO", "O", "I",
];
/// Canonical display casing for each row prefix.
const ROW_DISPLAY: [&str; 13] = [
    "Fp", "AF", "F", "FT", "FC", "T", "C", "TP", "CP", "P", "PO", "O", "I",
];

/// Anatomical regions in anterior→posterior order.
pub const REGIONS: [&str; 8] = [
    "frontal",
    "fronto-central",
    "central",
    "temporal",
    "centro-parietal",
    "parietal",
    "parieto-occipital",
    "occipital",
];

fn region_rank_of_row(row: usize) -> usize {
    match row {
        0..=2 => 0,  // Fp, AF, F
        3 | 4 => 1,      // FT, FC
        6 => 2,          // C
        5 => 3,          // T
        7 | 8 => 4,      // TP, CP
        9 => 5,          // P
        10 => 6,         // PO
        11 | 12 => 7,    // O, I
        _ => unreachable!("row index out of range"),
    }
}

/// Vendor synonyms normalized before lookup (10-20 names for 10-10 sites).
fn alias(upper: &str) -> &str {
    match upper {
        "T3" => "T7",
        "T4" => "T8",
        "T5" => "P7",
        "T6" => "P8",
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Hemisphere {
    Left,
    Midline,
    Right,
}

impl fmt::Display for Hemisphere {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hemisphere::Left => "left",
            Hemisphere::Midline => "midline",
            Hemisphere::Right => "right",
        })
    }
}

impl std::str::FromStr for Hemisphere {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "left" => Ok(Hemisphere::Left),
            "midline" => Ok(Hemisphere::Midline),
            "right" => Ok(Hemisphere::Right),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Suffix {
    Midline,
    Number(u32),
}

#[derive(Clone, Debug)]
struct ParsedLabel {
    row: usize,
    suffix: Suffix,
    display: String,
}

impl ParsedLabel {
    fn hemisphere(&self) -> Hemisphere {
        match self.suffix {
            Suffix::Midline => Hemisphere::Midline,
            Suffix::Number(n) if n % 2 == 1 => Hemisphere::Left,
            Suffix::Number(_) => Hemisphere::Right,
        }
    }

    fn region(&self) -> &'static str {
        REGIONS[region_rank_of_row(self.row)]
    }

    /// Template ordering key: region, hemisphere, label number (midline
    /// sorts as 0 inside its own group), then anatomical row as tie-break.
    fn sort_key(&self) -> (usize, usize, u32, usize) {
        let (hemi, num) = match self.suffix {
            Suffix::Midline => (1, 0),
            Suffix::Number(n) => (if n % 2 == 1 { 0 } else { 2 }, n),
        };
        (region_rank_of_row(self.row), hemi, num, self.row)
    }
}

fn parse_label(raw: &str) -> Result<ParsedLabel, PreprocessError> {
    let fail = || PreprocessError::UnmappableLabel { label: raw.to_string() };
    let upper = raw.trim().to_ascii_uppercase();
    let upper = alias(&upper);
    let (prefix, suffix) = if let Some(stripped) = upper.strip_suffix('Z') {
        (stripped, Suffix::Midline)
    } else {
        let pos = upper.find(|c: char| c.is_ascii_digit()).ok_or_else(fail)?;
        let n: u32 = upper[pos..].parse().map_err(|_| fail())?;
        if n == 0 {
            return Err(fail());
        }
        (&upper[..pos], Suffix::Number(n))
    };
    let row = ROWS.iter().position(|r| *r == prefix).ok_or_else(fail)?;
    let display = match suffix {
        Suffix::Midline => format!("{}z", ROW_DISPLAY[row]),
        Suffix::Number(n) => format!("{}{}", ROW_DISPLAY[row], n),
    };
    Ok(ParsedLabel { row, suffix, display })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateEntry {
    pub label: String,
    pub region: String,
    pub hemisphere: Hemisphere,
}

/// The canonical montage: an ordered set of channel labels defining the
/// index every harmonized recording row maps to.
#[derive(Clone, Debug)]
pub struct ChannelTemplate {
    entries: Vec<TemplateEntry>,
    index: HashMap<String, usize>,
}

impl PartialEq for ChannelTemplate {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ChannelTemplate {
    /// Builds a template from raw labels, applying alias normalization and
    /// the canonical ordering rule.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<ChannelTemplate, PreprocessError> {
        if labels.is_empty() {
            return Err(PreprocessError::InvalidTemplate {
                reason: "template has no channels".to_string(),
            });
        }
        let mut parsed = labels
            .iter()
            .map(|l| parse_label(l.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        parsed.sort_by_key(|p| p.sort_key());
        for pair in parsed.windows(2) {
            if pair[0].display == pair[1].display {
                return Err(PreprocessError::InvalidTemplate {
                    reason: format!("duplicate channel {}", pair[0].display),
                });
            }
        }
        let entries = parsed
            .into_iter()
            .map(|p| TemplateEntry {
                label: p.display.clone(),
                region: p.region().to_string(),
                hemisphere: p.hemisphere(),
            })
            .collect();
        Ok(ChannelTemplate::from_entries(entries))
    }

    fn from_entries(entries: Vec<TemplateEntry>) -> ChannelTemplate {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.label.clone(), i))
            .collect();
        ChannelTemplate { entries, index }
    }

    /// Parses the text format: one `index,label,region,hemisphere` line per
    /// channel. Blank lines and `#` comments are skipped. The file must
    /// already satisfy the canonical ordering; parsing re-derives region and
    /// hemisphere from each label and rejects inconsistencies.
    pub fn parse_str(text: &str) -> Result<ChannelTemplate, PreprocessError> {
        let bad = |line_no: usize, reason: String| PreprocessError::InvalidTemplate {
            reason: format!("line {line_no}: {reason}"),
        };
        let mut entries = Vec::new();
        let mut prev_key: Option<(usize, usize, u32, usize)> = None;
        for (line_no, line) in text.lines().enumerate() {
            let line_no = line_no + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 4 {
                return Err(bad(line_no, format!("expected 4 fields, got {}", parts.len())));
            }
            let idx: usize = parts[0]
                .parse()
                .map_err(|_| bad(line_no, format!("bad index `{}`", parts[0])))?;
            if idx != entries.len() {
                return Err(bad(line_no, format!("index {idx}, expected {}", entries.len())));
            }
            let parsed = parse_label(parts[1])?;
            if parsed.display != parts[1] {
                return Err(bad(
                    line_no,
                    format!("label `{}` is not in canonical form `{}`", parts[1], parsed.display),
                ));
            }
            if parsed.region() != parts[2] {
                return Err(bad(
                    line_no,
                    format!("label {} belongs to region {}, not {}", parts[1], parsed.region(), parts[2]),
                ));
            }
            let hemi: Hemisphere = parts[3]
                .parse()
                .map_err(|_| bad(line_no, format!("bad hemisphere `{}`", parts[3])))?;
            if parsed.hemisphere() != hemi {
                return Err(bad(
                    line_no,
                    format!("label {} lies on the {} side, not {}", parts[1], parsed.hemisphere(), hemi),
                ));
            }
            let key = parsed.sort_key();
            if let Some(prev) = prev_key {
                if key <= prev {
                    return Err(bad(
                        line_no,
                        format!("label {} violates the montage ordering rule", parts[1]),
                    ));
                }
            }
            prev_key = Some(key);
            let region = parsed.region().to_string();
            let hemisphere = parsed.hemisphere();
            entries.push(TemplateEntry {
                label: parsed.display,
                region,
                hemisphere,
            });
        }
        if entries.is_empty() {
            return Err(PreprocessError::InvalidTemplate {
                reason: "template has no channels".to_string(),
            });
        }
        Ok(ChannelTemplate::from_entries(entries))
    }

    pub fn from_file(path: &Path) -> Result<ChannelTemplate, PreprocessError> {
        let text = fs::read_to_string(path).map_err(|source| PreprocessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ChannelTemplate::parse_str(&text)
    }

    /// The built-in 64-channel canonical montage.
    pub fn canonical_64() -> &'static ChannelTemplate {
        static TEMPLATE: OnceLock<ChannelTemplate> = OnceLock::new();
        TEMPLATE.get_or_init(|| {
            ChannelTemplate::parse_str(include_str!("../data/template_64.txt"))
                .expect("embedded template is valid")
        })
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", i, e.label, e.region, e.hemisphere));
        }
        out
    }

    pub fn n_channels(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[TemplateEntry] {
        &self.entries
    }

    pub fn label(&self, index: usize) -> &str {
        &self.entries[index].label
    }

    /// Index of a raw label after alias and case normalization.
    pub fn index_of(&self, raw_label: &str) -> Option<usize> {
        let parsed = parse_label(raw_label).ok()?;
        self.index.get(&parsed.display).copied()
    }
}

/// A recording conformed to a template: fixed channel count, 64 Hz,
/// normalized rows. Inactive rows (absent or degenerate channels) are
/// all-zero.
#[derive(Clone, Debug)]
pub struct HarmonizedRecording {
    pub patient_id: String,
    pub session_id: String,
    pub diagnosis: Diagnosis,
    pub sample_rate_hz: f64,
    pub origin_tag: String,
    pub data: Array2<f64>,
    pub active_mask: Vec<bool>,
    /// True where the source supplied the channel but it was constant.
    pub degenerate_mask: Vec<bool>,
}

impl HarmonizedRecording {
    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }
}

/// Output length of `resample`, without touching sample data.
pub fn resampled_len(n: usize, from_hz: f64, to_hz: f64) -> usize {
    if from_hz == to_hz {
        n
    } else {
        ((n as f64) * to_hz / from_hz).round().max(1.0) as usize
    }
}

/// FFT-domain resampling: forward transform, spectrum truncation or
/// zero-extension (with the usual even-length Nyquist-bin fold/split),
/// inverse transform. Exactly band-limited; preserves content below the
/// lower Nyquist frequency.
pub fn resample(signal: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>, PreprocessError> {
    if !(from_hz.is_finite() && to_hz.is_finite() && from_hz > 0.0 && to_hz > 0.0) {
        return Err(PreprocessError::InvalidRate { from_hz, to_hz });
    }
    if signal.is_empty() {
        return Err(PreprocessError::EmptySignal);
    }
    if let Some(index) = signal.iter().position(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFinite { index });
    }
    let n = signal.len();
    let out_len = resampled_len(n, from_hz, to_hz);
    if out_len == n {
        return Ok(signal.to_vec());
    }

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut spec: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut spec);

    let mut out_spec = vec![Complex::new(0.0, 0.0); out_len];
    let keep = n.min(out_len);
    let low = keep.div_ceil(2);
    out_spec[..low].copy_from_slice(&spec[..low]);
    for k in 1..=keep / 2 {
        out_spec[out_len - k] = spec[n - k];
    }
    if keep.is_multiple_of(2) {
        let h = keep / 2;
        if out_len < n {
            // Downsampling: fold the source's mirrored bin onto the new Nyquist.
            out_spec[h] = spec[h] + spec[n - h];
        } else {
            // Upsampling: split the source Nyquist bin across both mirrors.
            out_spec[h] = spec[h] * 0.5;
            out_spec[out_len - h] = out_spec[h];
        }
    }

    let ifft = planner.plan_fft_inverse(out_len);
    ifft.process(&mut out_spec);
    // The inverse transform is unnormalized; 1/n also absorbs the out_len/n
    // amplitude rescaling of spectrum-length change.
    let scale = 1.0 / n as f64;
    Ok(out_spec.iter().map(|c| c.re * scale).collect())
}

/// Z-scores a signal to zero mean and unit population variance. A constant
/// signal cannot be scaled; it comes back all-zero with the degenerate flag.
pub fn standardize(signal: &[f64]) -> Result<(Vec<f64>, bool), PreprocessError> {
    if signal.len() < 2 {
        return Err(PreprocessError::TooShort { len: signal.len() });
    }
    if let Some(index) = signal.iter().position(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFinite { index });
    }
    let n = signal.len() as f64;
    let lo = signal.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = signal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok((vec![0.0; signal.len()], true));
    }
    let mean = signal.iter().sum::<f64>() / n;
    let var = signal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok((vec![0.0; signal.len()], true));
    }
    Ok((signal.iter().map(|v| (v - mean) / sd).collect(), false))
}

/// Scales so the largest absolute value is exactly 1; all-zero input passes
/// through unchanged.
pub fn unit_amplitude(signal: &[f64]) -> Vec<f64> {
    let max_abs = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        signal.to_vec()
    } else {
        signal.iter().map(|v| v / max_abs).collect()
    }
}

/// The per-channel pipeline applied by `harmonize`: resample to 64 Hz,
/// standardize, unit amplitude. Returns the row and its degenerate flag.
pub fn preprocess_channel(signal: &[f64], from_hz: f64) -> Result<(Vec<f64>, bool), PreprocessError> {
    let resampled = resample(signal, from_hz, TARGET_RATE_HZ)?;
    let (standardized, degenerate) = standardize(&resampled)?;
    if degenerate {
        return Ok((standardized, true));
    }
    Ok((unit_amplitude(&standardized), false))
}

/// Conforms one recording to the template. Row `pi(c)` holds the
/// preprocessed channel `c`; rows for channels the recording does not supply
/// stay zero with `active_mask` false.
pub fn harmonize(rec: &Recording, template: &ChannelTemplate) -> Result<HarmonizedRecording, PreprocessError> {
    let c = template.n_channels();
    let mut slot_source: Vec<Option<usize>> = vec![None; c];
    for (ci, label) in rec.channel_labels.iter().enumerate() {
        let idx = template
            .index_of(label)
            .ok_or_else(|| PreprocessError::UnmappableLabel { label: label.clone() })?;
        if let Some(prev) = slot_source[idx] {
            return Err(PreprocessError::AliasCollision {
                first: rec.channel_labels[prev].clone(),
                second: label.clone(),
                label: template.label(idx).to_string(),
            });
        }
        slot_source[idx] = Some(ci);
    }

    let out_len = resampled_len(rec.n_samples(), rec.sample_rate_hz, TARGET_RATE_HZ);
    let mut data = Array2::<f64>::zeros((c, out_len));
    let mut active_mask = vec![false; c];
    let mut degenerate_mask = vec![false; c];
    for (slot, source) in slot_source.iter().enumerate() {
        let Some(ci) = source else { continue };
        let signal: Vec<f64> = rec.samples.row(*ci).iter().map(|&v| v as f64).collect();
        let (row, degenerate) = preprocess_channel(&signal, rec.sample_rate_hz)?;
        if degenerate {
            degenerate_mask[slot] = true;
        } else {
            active_mask[slot] = true;
            data.row_mut(slot)
                .iter_mut()
                .zip(row.iter())
                .for_each(|(dst, &src)| *dst = src);
        }
    }

    Ok(HarmonizedRecording {
        patient_id: rec.patient_id.clone(),
        session_id: rec.session_id.clone(),
        diagnosis: rec.diagnosis,
        sample_rate_hz: TARGET_RATE_HZ,
        origin_tag: rec.origin_tag.clone(),
        data,
        active_mask,
        degenerate_mask,
    })
}

/// Harmonizes many recordings in parallel, preserving input order.
pub fn harmonize_all(
    recs: &[Recording],
    template: &ChannelTemplate,
) -> Result<Vec<HarmonizedRecording>, PreprocessError> {
    recs.par_iter().map(|rec| harmonize(rec, template)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn six_channel_template_gets_canonical_indices() {
        let t = ChannelTemplate::from_labels(&["C4", "Cz", "Fp2", "C3", "Fpz", "Fp1"]).unwrap();
        let labels: Vec<&str> = t.entries().iter().map(|e| e.label.as_str()).collect();
        assert_eq!(labels, ["Fp1", "Fpz", "Fp2", "C3", "Cz", "C4"]);
        assert_eq!(t.index_of("Fp1"), Some(0));
        assert_eq!(t.index_of("Fpz"), Some(1));
        assert_eq!(t.index_of("Fp2"), Some(2));
        assert_eq!(t.index_of("C3"), Some(3));
        assert_eq!(t.index_of("Cz"), Some(4));
        assert_eq!(t.index_of("C4"), Some(5));
    }

    #[test]
    fn canonical_64_is_a_valid_bijection_with_ordered_regions() {
        let t = ChannelTemplate::canonical_64();
        assert_eq!(t.n_channels(), 64);
        // pi is a bijection: every label resolves back to its own index.
        for (i, e) in t.entries().iter().enumerate() {
            assert_eq!(t.index_of(&e.label), Some(i), "label {}", e.label);
        }
        // Regions appear in anterior→posterior order, contiguously.
        let mut last_rank = 0;
        for e in t.entries() {
            let rank = REGIONS.iter().position(|r| *r == e.region).unwrap();
            assert!(rank >= last_rank, "region order violated at {}", e.label);
            last_rank = rank;
        }
        // Within each region: left before midline before right.
        for pair in t.entries().windows(2) {
            if pair[0].region == pair[1].region {
                assert!(pair[0].hemisphere <= pair[1].hemisphere);
            }
        }
    }

    #[test]
    fn aliases_and_case_normalize_before_lookup() {
        let t = ChannelTemplate::canonical_64();
        assert_eq!(t.index_of("T3"), t.index_of("T7"));
        assert_eq!(t.index_of("T6"), t.index_of("P8"));
        assert_eq!(t.index_of("FPZ"), t.index_of("Fpz"));
        assert_eq!(t.index_of("fc5"), t.index_of("FC5"));
        assert_eq!(t.index_of("X99"), None);
    }

    #[test]
    fn template_file_round_trip() {
        let t = ChannelTemplate::canonical_64();
        let text = t.to_file_string();
        let back = ChannelTemplate::parse_str(&text).unwrap();
        assert_eq!(*t, back);
    }

    #[test]
    fn tampered_template_files_are_rejected() {
        let good = ChannelTemplate::canonical_64().to_file_string();
        let mut lines: Vec<&str> = good.lines().collect();
        lines.swap(0, 1);
        let swapped: String = lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                // Reindex so only the ordering violation remains.
                let rest = l.split_once(',').unwrap().1;
                format!("{i},{rest}\n")
            })
            .collect();
        assert!(matches!(
            ChannelTemplate::parse_str(&swapped),
            Err(PreprocessError::InvalidTemplate { .. })
        ));

        let wrong_region = "0,Fp1,occipital,left\n";
        assert!(matches!(
            ChannelTemplate::parse_str(wrong_region),
            Err(PreprocessError::InvalidTemplate { .. })
        ));

        let wrong_side = "0,Fp1,frontal,right\n";
        assert!(matches!(
            ChannelTemplate::parse_str(wrong_side),
            Err(PreprocessError::InvalidTemplate { .. })
        ));
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let signal: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = resample(&signal, 64.0, 64.0).unwrap();
        assert_eq!(signal, out);
    }

    /// Naive DFT magnitude at bin k — independent oracle for the FFT path.
    fn dft_bin_magnitude(signal: &[f64], k: usize) -> f64 {
        let n = signal.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in signal.iter().enumerate() {
            let phase = -std::f64::consts::TAU * k as f64 * t as f64 / n;
            re += v * phase.cos();
            im += v * phase.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn downsampling_preserves_a_low_frequency_tone() {
        // 1 Hz sine, 256 samples at 128 Hz -> 128 samples at 64 Hz.
        let signal: Vec<f64> = (0..256)
            .map(|t| (std::f64::consts::TAU * 1.0 * t as f64 / 128.0).sin())
            .collect();
        let out = resample(&signal, 128.0, 64.0).unwrap();
        assert_eq!(out.len(), 128);
        // Delta-f = 64/128 = 0.5 Hz, so 1 Hz lands on bin 2.
        let mags: Vec<f64> = (0..64).map(|k| dft_bin_magnitude(&out, k)).collect();
        let peak = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 2);
        let amplitude = 2.0 * mags[2] / out.len() as f64;
        assert!((amplitude - 1.0).abs() < 0.01, "amplitude {amplitude}");
    }

    #[test]
    fn resample_output_length_follows_rate_ratio() {
        let signal = vec![1.0; 256];
        assert_eq!(resample(&signal, 128.0, 64.0).unwrap().len(), 128);
        assert_eq!(resample(&signal, 100.0, 64.0).unwrap().len(), 164);
        assert_eq!(resampled_len(256, 100.0, 64.0), 164);
        assert_eq!(resample(&signal, 64.0, 128.0).unwrap().len(), 512);
    }

    #[test]
    fn resample_rejects_bad_input() {
        assert!(matches!(
            resample(&[1.0, f64::NAN], 64.0, 64.0),
            Err(PreprocessError::NonFinite { index: 1 })
        ));
        assert!(matches!(
            resample(&[1.0], 0.0, 64.0),
            Err(PreprocessError::InvalidRate { .. })
        ));
        assert!(matches!(resample(&[], 64.0, 64.0), Err(PreprocessError::EmptySignal)));
    }

    #[test]
    fn standardize_examples() {
        let (out, degenerate) = standardize(&[1.0, 3.0]).unwrap();
        assert_eq!(out, vec![-1.0, 1.0]);
        assert!(!degenerate);

        let (flat, degenerate) = standardize(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(flat, vec![0.0, 0.0, 0.0]);
        assert!(degenerate);

        assert!(matches!(standardize(&[1.0]), Err(PreprocessError::TooShort { len: 1 })));
    }

    #[test]
    fn standardize_random_vector_hits_zero_mean_unit_sd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let signal: Vec<f64> = (0..512).map(|_| rng.random_range(-4.0..4.0)).collect();
        let (out, _) = standardize(&signal).unwrap();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(var.sqrt(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn unit_amplitude_examples() {
        assert_eq!(unit_amplitude(&[0.5, -2.0]), vec![0.25, -1.0]);
        assert_eq!(unit_amplitude(&[0.0, 0.0]), vec![0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let signal: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (z, _) = standardize(&signal).unwrap();
        let s = unit_amplitude(&z);
        let max_abs = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(max_abs, 1.0);
    }

    fn test_recording(labels: &[&str], data: Array2<f32>, rate: f64) -> Recording {
        Recording {
            patient_id: "p0".to_string(),
            session_id: "s0".to_string(),
            diagnosis: Diagnosis::Control,
            sample_rate_hz: rate,
            channel_labels: labels.iter().map(|s| s.to_string()).collect(),
            samples: data,
            source_file: String::new(),
            origin_tag: "test".to_string(),
        }
    }

    #[test]
    fn harmonize_zero_pads_absent_channels() {
        let template = ChannelTemplate::from_labels(&["Fp1", "Fpz", "Fp2", "C3", "Cz", "C4"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Array2::from_shape_fn((2, 64), |_| rng.random_range(-1.0f32..1.0));
        let rec = test_recording(&["Fp1", "C3"], data, 64.0);
        let h = harmonize(&rec, &template).unwrap();
        assert_eq!(h.active_mask, vec![true, false, false, true, false, false]);
        assert_eq!(h.sample_rate_hz, TARGET_RATE_HZ);
        for row in [1usize, 2, 4, 5] {
            assert!(h.data.row(row).iter().all(|&v| v == 0.0));
        }
        for row in [0usize, 3] {
            let max_abs = h.data.row(row).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert_eq!(max_abs, 1.0);
        }
    }

    #[test]
    fn harmonize_full_64_channel_recording_is_all_active() {
        let template = ChannelTemplate::canonical_64();
        let labels: Vec<&str> = template.entries().iter().map(|e| e.label.as_str()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = Array2::from_shape_fn((64, 128), |_| rng.random_range(-1.0f32..1.0));
        let rec = test_recording(&labels, data, 64.0);
        let h = harmonize(&rec, template).unwrap();
        assert!(h.active_mask.iter().all(|&a| a));
        assert!(h.degenerate_mask.iter().all(|&d| !d));
    }

    #[test]
    fn harmonize_flags_constant_channels_degenerate() {
        let template = ChannelTemplate::from_labels(&["C3", "C4"]).unwrap();
        let mut data = Array2::<f32>::zeros((2, 64));
        data.row_mut(0).fill(7.5);
        for (t, v) in data.row_mut(1).iter_mut().enumerate() {
            *v = (t as f32 * 0.3).sin();
        }
        let rec = test_recording(&["C3", "C4"], data, 64.0);
        let h = harmonize(&rec, &template).unwrap();
        assert_eq!(h.active_mask, vec![false, true]);
        assert_eq!(h.degenerate_mask, vec![true, false]);
        assert!(h.data.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn harmonize_rejects_unknown_and_colliding_labels() {
        let template = ChannelTemplate::from_labels(&["C3", "C4"]).unwrap();
        let rec = test_recording(&["C3", "Nose1"], Array2::zeros((2, 64)), 64.0);
        match harmonize(&rec, &template) {
            Err(PreprocessError::UnmappableLabel { label }) => assert_eq!(label, "Nose1"),
            other => panic!("unexpected: {other:?}"),
        }

        let template = ChannelTemplate::from_labels(&["T7", "T8"]).unwrap();
        let rec = test_recording(&["T3", "T7"], Array2::zeros((2, 64)), 64.0);
        assert!(matches!(
            harmonize(&rec, &template),
            Err(PreprocessError::AliasCollision { .. })
        ));
    }

    #[test]
    fn channel_pipeline_is_idempotent_at_64_hz() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let signal: Vec<f64> = (0..256).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (once, _) = preprocess_channel(&signal, 64.0).unwrap();
        let (twice, _) = preprocess_channel(&once, 64.0).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
