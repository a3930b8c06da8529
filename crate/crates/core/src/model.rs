//! Pooled spectrogram features and a deterministic logistic-regression
//! classifier.
//!
//! Spectrogram windows are reduced to a small grid by adaptive mean pooling:
//! output cell (i, j) averages input rows [floor(i·F/F'), ceil((i+1)·F/F'))
//! and the analogous column span, so the grid covers the full plane for any
//! input size. With the default 128×256 → 8×8 reduction each pooled row
//! spans 16 frequency bins = 4 Hz at 0.25 Hz resolution: row 0 is 0–4 Hz,
//! row 1 is 4–8 Hz, and so on.
//!
//! The classifier is full-batch gradient descent on the standardized pooled
//! features with a decaying step size. Each epoch's step is halved until the
//! loss does not increase, so the recorded loss history is monotone
//! non-increasing by construction — a property the test suite pins.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("empty training set")]
    EmptyInput,
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label count {n_labels} does not match sample count {n_rows}")]
    LabelCount { n_rows: usize, n_labels: usize },
    #[error("label at index {index} is not 0 or 1")]
    BadLabel { index: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { rows: 8, cols: 8 }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(ModelError::BadConfig("pool grid dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.1,
            lr_decay: 0.995,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::BadConfig("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::BadConfig("learning_rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(ModelError::BadConfig("lr_decay must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Trained classifier. Feature standardization is folded into the model so
/// prediction takes raw pooled features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

/// Adaptive mean pooling to a `rows × cols` grid. Output cell (i, j)
/// averages the input block rows [floor(i·R/rows), ceil((i+1)·R/rows)) ×
/// cols [floor(j·C/cols), ceil((j+1)·C/cols)); blocks tile the input exactly
/// when the sizes divide and overlap by one otherwise.
pub fn pool_to_grid(values: &Array2<f64>, cfg: &PoolConfig) -> Result<Array2<f64>, ModelError> {
    cfg.validate()?;
    let (r, c) = values.dim();
    if r == 0 || c == 0 {
        return Err(ModelError::EmptyInput);
    }
    let mut out = Array2::zeros((cfg.rows, cfg.cols));
    for i in 0..cfg.rows {
        let r0 = i * r / cfg.rows;
        let r1 = ((i + 1) * r).div_ceil(cfg.rows);
        for j in 0..cfg.cols {
            let c0 = j * c / cfg.cols;
            let c1 = ((j + 1) * c).div_ceil(cfg.cols);
            let mut sum = 0.0;
            for row in r0..r1 {
                for col in c0..c1 {
                    sum += values[(row, col)];
                }
            }
            out[(i, j)] = sum / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    Ok(out)
}

/// Flattened row-major pooled grid, the classifier's feature vector.
pub fn pooled_features(values: &Array2<f64>, cfg: &PoolConfig) -> Result<Vec<f64>, ModelError> {
    Ok(pool_to_grid(values, cfg)?.into_raw_vec_and_offset().0)
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy and its gradient at (weights, bias) on raw
/// feature rows. Uses the overflow-free form
/// `max(z, 0) − z·y + ln(1 + exp(−|z|))`.
pub fn loss_and_grad(
    weights: &[f64],
    bias: f64,
    x: &Array2<f64>,
    y: &[f64],
) -> (f64, Vec<f64>, f64) {
    let n = x.nrows();
    let d = x.ncols();
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; d];
    let mut grad_b = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let z = bias + row.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>();
        loss += z.max(0.0) - z * y[i] + (-z.abs()).exp().ln_1p();
        let resid = sigmoid(z) - y[i];
        for (g, a) in grad_w.iter_mut().zip(row.iter()) {
            *g += resid * a;
        }
        grad_b += resid;
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    for g in &mut grad_w {
        *g *= inv;
    }
    grad_b *= inv;
    (loss, grad_w, grad_b)
}

fn loss_only(weights: &[f64], bias: f64, x: &Array2<f64>, y: &[f64]) -> f64 {
    let mut loss = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let z = bias + row.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>();
        loss += z.max(0.0) - z * y[i] + (-z.abs()).exp().ln_1p();
    }
    loss / x.nrows() as f64
}

fn validate_training_input(x: &Array2<f64>, y: &[f64]) -> Result<(), ModelError> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(ModelError::EmptyInput);
    }
    if y.len() != x.nrows() {
        return Err(ModelError::LabelCount {
            n_rows: x.nrows(),
            n_labels: y.len(),
        });
    }
    for (i, &v) in y.iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(ModelError::BadLabel { index: i });
        }
    }
    for ((row, col), &v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(ModelError::NonFinite { row, col });
        }
    }
    Ok(())
}

fn standardize_columns(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let d = x.ncols();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for (j, col) in x.columns().into_iter().enumerate() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean[j] = m;
        let s = var.sqrt();
        // Constant features standardize to zero instead of NaN.
        std[j] = if s < 1e-12 { 1.0 } else { s };
    }
    let mut xs = x.clone();
    for mut row in xs.rows_mut() {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    (xs, mean, std)
}

/// Trains from zero-initialized weights and returns the per-epoch loss
/// history alongside the parameters. Each epoch proposes a step of size
/// `learning_rate · lr_decay^epoch` and halves it (up to 30 times) until the
/// loss does not increase; a step that still increases the loss is skipped.
pub fn train_with_history(
    x: &Array2<f64>,
    y: &[f64],
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>), ModelError> {
    cfg.validate()?;
    validate_training_input(x, y)?;
    let (xs, mean, std) = standardize_columns(x);
    let d = xs.ncols();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut lr = cfg.learning_rate;
    let (mut loss, mut gw, mut gb) = loss_and_grad(&w, b, &xs, y);
    history.push(loss);
    for _ in 0..cfg.epochs {
        let mut step = lr;
        let mut accepted = false;
        for _ in 0..30 {
            let cand_w: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi - step * gi).collect();
            let cand_b = b - step * gb;
            let cand_loss = loss_only(&cand_w, cand_b, &xs, y);
            if cand_loss <= loss {
                w = cand_w;
                b = cand_b;
                loss = cand_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        history.push(loss);
        if accepted {
            let next = loss_and_grad(&w, b, &xs, y);
            loss = next.0;
            gw = next.1;
            gb = next.2;
        }
        lr *= cfg.lr_decay;
    }
    Ok((
        ModelParams {
            weights: w,
            bias: b,
            feature_mean: mean,
            feature_std: std,
        },
        history,
    ))
}

pub fn train(x: &Array2<f64>, y: &[f64], cfg: &TrainConfig) -> Result<ModelParams, ModelError> {
    Ok(train_with_history(x, y, cfg)?.0)
}

/// Class-1 probabilities for raw feature rows, clamped to
/// [1e-12, 1 − 1e-12] so downstream log-odds stay finite.
pub fn predict_proba(params: &ModelParams, x: &Array2<f64>) -> Result<Vec<f64>, ModelError> {
    if x.ncols() != params.weights.len() {
        return Err(ModelError::DimMismatch {
            expected: params.weights.len(),
            got: x.ncols(),
        });
    }
    let probs = x
        .rows()
        .into_iter()
        .map(|row| {
            let z = params.bias
                + row
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        (v - params.feature_mean[j]) / params.feature_std[j] * params.weights[j]
                    })
                    .sum::<f64>();
            sigmoid(z).clamp(1e-12, 1.0 - 1e-12)
        })
        .collect();
    Ok(probs)
}

/// Fraction of rows whose thresholded probability (p ≥ 0.5 → class 1)
/// matches the label.
pub fn accuracy(probs: &[f64], y: &[f64]) -> f64 {
    let hits = probs
        .iter()
        .zip(y)
        .filter(|(&p, &label)| (p >= 0.5) == (label == 1.0))
        .count();
    hits as f64 / y.len() as f64
}
