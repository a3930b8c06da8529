//! Outer windowing and per-channel STFT spectrograms.
//!
//! Each harmonized channel is cut into fixed-length overlapping outer
//! windows; each outer window becomes an F×T magnitude spectrogram (Hann
//! analysis window, centered framing), converted to dB and min-max scaled to
//! [0,1] per spectrogram.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::Diagnosis;
use crate::preprocess::HarmonizedRecording;

#[derive(Debug, thiserror::Error)]
pub enum SpectroError {
    #[error("signal is empty")]
    EmptySignal,
    #[error("window length {got} does not match configured outer_len {expected}")]
    WrongWindowLength { expected: usize, got: usize },
    #[error("negative magnitude at ({row}, {col})")]
    NegativeMagnitude { row: usize, col: usize },
    #[error("invalid windowing config: {reason}")]
    InvalidConfig { reason: String },
    #[error("spectrogram cache i/o error at {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Outer windowing and STFT geometry.
///
/// Defaults: 16384-sample outer windows (256 s at 64 Hz) hopping by 4096,
/// 256-point FFT frames hopping by 64 — yielding 128 frequency bins at
/// 0.25 Hz resolution by 256 time frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowingConfig {
    pub outer_len: usize,
    pub outer_hop: usize,
    pub n_fft: usize,
    pub stft_hop: usize,
    pub db_floor_eps: f64,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        WindowingConfig {
            outer_len: 16384,
            outer_hop: 4096,
            n_fft: 256,
            stft_hop: 64,
            db_floor_eps: 1e-10,
        }
    }
}

impl WindowingConfig {
    pub fn validate(&self) -> Result<(), SpectroError> {
        let fail = |reason: String| SpectroError::InvalidConfig { reason };
        if self.outer_len == 0 || self.outer_hop == 0 || self.n_fft == 0 || self.stft_hop == 0 {
            return Err(fail("all window sizes must be positive".into()));
        }
        if self.outer_hop > self.outer_len {
            return Err(fail(format!(
                "outer_hop {} exceeds outer_len {}",
                self.outer_hop, self.outer_len
            )));
        }
        if self.stft_hop > self.n_fft {
            return Err(fail(format!("stft_hop {} exceeds n_fft {}", self.stft_hop, self.n_fft)));
        }
        if !self.n_fft.is_multiple_of(2) {
            return Err(fail(format!("n_fft {} must be even", self.n_fft)));
        }
        if self.outer_len < self.stft_hop {
            return Err(fail("outer_len shorter than one STFT hop".into()));
        }
        if !(self.db_floor_eps.is_finite() && self.db_floor_eps > 0.0) {
            return Err(fail("db_floor_eps must be positive".into()));
        }
        Ok(())
    }

    /// Frequency bins retained (DC up to, excluding, Nyquist).
    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2
    }

    /// STFT frames per outer window.
    pub fn time_bins(&self) -> usize {
        self.outer_len / self.stft_hop
    }

    /// Frequency resolution in Hz at the harmonized 64 Hz rate.
    pub fn freq_resolution_hz(&self) -> f64 {
        crate::preprocess::TARGET_RATE_HZ / self.n_fft as f64
    }
}

/// One channel's normalized spectrogram for one outer window, with full
/// provenance for leakage auditing.
#[derive(Clone, Debug)]
pub struct SpectrogramWindow {
    pub patient_id: String,
    pub session_id: String,
    pub diagnosis: Diagnosis,
    pub channel_index: usize,
    /// Windows are numbered per patient, across that patient's sessions in
    /// (patient_id, session_id) order.
    pub window_index: usize,
    /// First sample of the outer window within its recording (64 Hz frame).
    pub start_sample: usize,
    pub active: bool,
    /// F×T magnitudes, dB-scaled then min-max normalized to [0,1].
    pub values: Array2<f64>,
}

/// Number of outer windows a signal of `n_samples` yields.
pub fn window_count(n_samples: usize, cfg: &WindowingConfig) -> usize {
    if n_samples == 0 {
        0
    } else if n_samples < cfg.outer_len {
        1
    } else {
        (n_samples - cfg.outer_len) / cfg.outer_hop + 1
    }
}

/// Sample spans `[start, start + outer_len)` of each outer window.
pub fn segment_spans(n_samples: usize, cfg: &WindowingConfig) -> Vec<(usize, usize)> {
    (0..window_count(n_samples, cfg))
        .map(|k| (k * cfg.outer_hop, k * cfg.outer_hop + cfg.outer_len))
        .collect()
}

fn window_slice(signal: &[f64], start: usize, outer_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer_len];
    if start < signal.len() {
        let take = outer_len.min(signal.len() - start);
        out[..take].copy_from_slice(&signal[start..start + take]);
    }
    out
}

/// Cuts a signal into outer windows. Signals shorter than one window are
/// zero-padded into exactly one; trailing samples short of a full window are
/// dropped.
pub fn segment(signal: &[f64], cfg: &WindowingConfig) -> Result<Vec<Vec<f64>>, SpectroError> {
    cfg.validate()?;
    if signal.is_empty() {
        return Err(SpectroError::EmptySignal);
    }
    Ok(segment_spans(signal.len(), cfg)
        .into_iter()
        .map(|(start, _)| window_slice(signal, start, cfg.outer_len))
        .collect())
}

/// Reusable STFT kernel: one FFT plan plus the Hann window.
struct Stft {
    cfg: WindowingConfig,
    fft: Arc<dyn Fft<f64>>,
    hann: Vec<f64>,
}

impl Stft {
    fn new(cfg: &WindowingConfig) -> Stft {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(cfg.n_fft);
        let n = cfg.n_fft as f64;
        let hann = (0..cfg.n_fft)
            .map(|k| 0.5 * (1.0 - (std::f64::consts::TAU * k as f64 / n).cos()))
            .collect();
        Stft { cfg: cfg.clone(), fft, hann }
    }

    /// Magnitude spectrogram of one outer window. Frame `i` covers samples
    /// `[i*stft_hop, i*stft_hop + n_fft)` of the window after centering pads
    /// of n_fft/2 zeros on each edge, so the frame count is exactly
    /// outer_len/stft_hop.
    fn magnitude(&self, window: &[f64]) -> Result<Array2<f64>, SpectroError> {
        let cfg = &self.cfg;
        if window.len() != cfg.outer_len {
            return Err(SpectroError::WrongWindowLength {
                expected: cfg.outer_len,
                got: window.len(),
            });
        }
        let half = cfg.n_fft / 2;
        let mut padded = vec![0.0; cfg.outer_len + cfg.n_fft];
        padded[half..half + cfg.outer_len].copy_from_slice(window);

        let f_bins = cfg.freq_bins();
        let t_bins = cfg.time_bins();
        let mut out = Array2::<f64>::zeros((f_bins, t_bins));
        let mut frame = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for i in 0..t_bins {
            let start = i * cfg.stft_hop;
            for (k, slot) in frame.iter_mut().enumerate() {
                *slot = Complex::new(padded[start + k] * self.hann[k], 0.0);
            }
            self.fft.process_with_scratch(&mut frame, &mut scratch);
            for f in 0..f_bins {
                out[[f, i]] = frame[f].norm();
            }
        }
        Ok(out)
    }
}

/// STFT magnitude of one outer window (length must equal `outer_len`).
pub fn stft_magnitude(window: &[f64], cfg: &WindowingConfig) -> Result<Array2<f64>, SpectroError> {
    cfg.validate()?;
    Stft::new(cfg).magnitude(window)
}

/// Converts magnitudes to dB (`20·log10(mag + eps)`) and min-max scales the
/// whole spectrogram to [0,1]. A constant spectrogram maps to all-0.5.
pub fn to_normalized_db(mag: &Array2<f64>, db_floor_eps: f64) -> Result<Array2<f64>, SpectroError> {
    for ((row, col), &v) in mag.indexed_iter() {
        if v < 0.0 {
            return Err(SpectroError::NegativeMagnitude { row, col });
        }
    }
    let db = mag.mapv(|v| 20.0 * (v + db_floor_eps).log10());
    let lo = db.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(Array2::from_elem(db.dim(), 0.5));
    }
    let range = hi - lo;
    Ok(db.mapv(|v| (v - lo) / range))
}

/// Normalized spectrogram of one outer window: `stft_magnitude` then
/// `to_normalized_db`. The cache, when present, is consulted by content
/// hash; it is an optimization only and never changes values.
fn normalized_spectrogram(
    stft: &Stft,
    window: &[f64],
    cache: Option<&SpectroCache>,
) -> Result<Array2<f64>, SpectroError> {
    if let Some(cache) = cache {
        let key = cache_key(window, &stft.cfg);
        if let Some(values) = cache.get(key, &stft.cfg) {
            return Ok(values);
        }
        let values = to_normalized_db(&stft.magnitude(window)?, stft.cfg.db_floor_eps)?;
        cache.put(key, &values);
        return Ok(values);
    }
    to_normalized_db(&stft.magnitude(window)?, stft.cfg.db_floor_eps)
}

/// Streaming one-window front end: a reusable FFT plan for callers that
/// consume spectrograms one at a time (e.g. pooling them to features
/// immediately) instead of materializing a dataset's worth.
pub struct SpectrogramExtractor {
    stft: Stft,
}

impl SpectrogramExtractor {
    pub fn new(cfg: &WindowingConfig) -> Result<SpectrogramExtractor, SpectroError> {
        cfg.validate()?;
        Ok(SpectrogramExtractor { stft: Stft::new(cfg) })
    }

    pub fn config(&self) -> &WindowingConfig {
        &self.stft.cfg
    }

    /// Normalized spectrogram of one outer window; identical to the batch
    /// path, cache included.
    pub fn normalized(
        &self,
        window: &[f64],
        cache: Option<&SpectroCache>,
    ) -> Result<Array2<f64>, SpectroError> {
        normalized_spectrogram(&self.stft, window, cache)
    }
}

/// Extracts one SpectrogramWindow per (patient window, template channel),
/// ordered by (patient_id, window_index, channel_index). Inactive channels
/// produce constant 0.5 spectrograms (their zero rows normalize to 0.5), so
/// shapes stay uniform; downstream code skips them via `active`.
pub fn extract_all(
    recs: &[HarmonizedRecording],
    cfg: &WindowingConfig,
) -> Result<Vec<SpectrogramWindow>, SpectroError> {
    extract_all_cached(recs, cfg, None)
}

/// `extract_all` with an optional on-disk cache.
pub fn extract_all_cached(
    recs: &[HarmonizedRecording],
    cfg: &WindowingConfig,
    cache: Option<&SpectroCache>,
) -> Result<Vec<SpectrogramWindow>, SpectroError> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..recs.len()).collect();
    order.sort_by(|&a, &b| {
        (recs[a].patient_id.as_str(), recs[a].session_id.as_str())
            .cmp(&(recs[b].patient_id.as_str(), recs[b].session_id.as_str()))
    });

    // Per-patient window numbering continues across sessions, so offsets are
    // fixed before the parallel pass.
    let mut offsets = vec![0usize; recs.len()];
    let mut running: Option<(&str, usize)> = None;
    for &ri in &order {
        let rec = &recs[ri];
        let count = window_count(rec.n_samples(), cfg);
        let offset = match running {
            Some((pid, total)) if pid == rec.patient_id.as_str() => total,
            _ => 0,
        };
        offsets[ri] = offset;
        running = Some((rec.patient_id.as_str(), offset + count));
    }

    let per_rec: Vec<Vec<SpectrogramWindow>> = order
        .par_iter()
        .map(|&ri| {
            let rec = &recs[ri];
            let stft = Stft::new(cfg);
            let spans = segment_spans(rec.n_samples(), cfg);
            let constant = Array2::from_elem((cfg.freq_bins(), cfg.time_bins()), 0.5);
            let mut out = Vec::with_capacity(spans.len() * rec.data.nrows());
            for (w, &(start, _)) in spans.iter().enumerate() {
                for ch in 0..rec.data.nrows() {
                    let active = rec.active_mask[ch];
                    let values = if active {
                        let row = rec.data.row(ch);
                        let slice = window_slice(row.as_slice().expect("contiguous row"), start, cfg.outer_len);
                        normalized_spectrogram(&stft, &slice, cache)?
                    } else {
                        // Zero rows normalize to the constant 0.5 spectrogram.
                        constant.clone()
                    };
                    out.push(SpectrogramWindow {
                        patient_id: rec.patient_id.clone(),
                        session_id: rec.session_id.clone(),
                        diagnosis: rec.diagnosis,
                        channel_index: ch,
                        window_index: offsets[ri] + w,
                        start_sample: start,
                        active,
                        values,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_, SpectroError>>()?;

    Ok(per_rec.into_iter().flatten().collect())
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(hash: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(hash, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn cache_key(window: &[f64], cfg: &WindowingConfig) -> u64 {
    let mut h = FNV_OFFSET;
    for v in [cfg.outer_len as u64, cfg.n_fft as u64, cfg.stft_hop as u64] {
        h = fnv1a(h, &v.to_le_bytes());
    }
    h = fnv1a(h, &cfg.db_floor_eps.to_le_bytes());
    for v in window {
        h = fnv1a(h, &v.to_le_bytes());
    }
    h
}

const CACHE_MAGIC: [u8; 4] = *b"NCVS";

/// Content-addressed spectrogram cache: one binary blob per distinct
/// (window samples, STFT geometry) pair. Corrupt or mismatched blobs are
/// treated as misses and rewritten.
pub struct SpectroCache {
    dir: PathBuf,
}

impl SpectroCache {
    pub fn new(dir: &Path) -> Result<SpectroCache, SpectroError> {
        fs::create_dir_all(dir).map_err(|source| SpectroError::CacheIo {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(SpectroCache { dir: dir.to_path_buf() })
    }

    fn blob_path(&self, key: u64) -> PathBuf {
        self.dir.join(format!("{key:016x}.spec"))
    }

    fn get(&self, key: u64, cfg: &WindowingConfig) -> Option<Array2<f64>> {
        let bytes = fs::read(self.blob_path(key)).ok()?;
        let (f_bins, t_bins) = (cfg.freq_bins(), cfg.time_bins());
        let expected = 12 + 8 * f_bins * t_bins;
        if bytes.len() != expected || bytes[..4] != CACHE_MAGIC {
            return None;
        }
        let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if f != f_bins || t != t_bins {
            return None;
        }
        let values: Vec<f64> = bytes[12..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((f, t), values).ok()
    }

    fn put(&self, key: u64, values: &Array2<f64>) {
        let (f, t) = values.dim();
        let mut bytes = Vec::with_capacity(12 + 8 * f * t);
        bytes.extend_from_slice(&CACHE_MAGIC);
        bytes.extend_from_slice(&(f as u32).to_le_bytes());
        bytes.extend_from_slice(&(t as u32).to_le_bytes());
        for v in values.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        // Write-then-rename keeps concurrent writers of one key safe; a
        // failed write only costs a future cache miss.
        let tmp = self.dir.join(format!("{key:016x}.tmp{}", std::process::id()));
        if fs::write(&tmp, &bytes).is_ok() {
            let _ = fs::rename(&tmp, self.blob_path(key));
        }
    }
}
