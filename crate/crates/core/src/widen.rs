//! Importance-weighted merging by weight disentanglement.
//!
//! For each 2-D weight the pipeline is: split every column into a magnitude
//! and a direction, measure how far each model moved from the backbone in
//! both, rank those divergences inside each model, turn ranks into
//! per-model shares with a softmax across models, lift the shares of
//! above-average columns to a fixed score `s`, and finally add each model's
//! delta scaled column-wise by its scores. 1-D parameters skip the direction
//! half and are scored on absolute element differences alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    ascending_rank_normalize, column_cosine_similarity, column_norms, min_max_normalize,
    softmax_over_models, Matrix, NormOrder, ScoreTable,
};

/// Which parts of the pipeline are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// No disentanglement: one divergence per column, `1 - cos(W_n, W_pre)`.
    NoWd,
    /// Min-max normalization in place of ranking.
    NoRank,
    /// Plain softmax shares, no score calibration.
    NoSc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoWd, Variant::NoRank, Variant::NoSc];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoWd => "no_wd",
            Variant::NoRank => "no_rank",
            Variant::NoSc => "no_sc",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidenParams {
    /// Multiple of the mean normalized score a column must exceed to be crucial.
    pub t: f64,
    /// Score assigned to crucial columns.
    pub s: f64,
    pub norm_order: NormOrder,
    pub variant: Variant,
}

impl Default for WidenParams {
    fn default() -> Self {
        Self {
            t: 1.0,
            s: 1.0,
            norm_order: NormOrder::L2,
            variant: Variant::Full,
        }
    }
}

impl WidenParams {
    pub fn validate(&self) -> Result<()> {
        if !self.t.is_finite() {
            return Err(Error::Config(format!("t must be finite, got {}", self.t)));
        }
        if !self.s.is_finite() {
            return Err(Error::Config(format!("s must be finite, got {}", self.s)));
        }
        Ok(())
    }
}

/// Calibrated per-model, per-column scores.
///
/// `direction` is `None` for 1-D parameters, which carry magnitude only.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub magnitude: ScoreTable,
    pub direction: Option<ScoreTable>,
}

impl ImportanceScores {
    /// The factor applied to model `n`'s delta in column `j`.
    #[inline]
    pub fn coefficient(&self, n: usize, j: usize) -> f64 {
        match &self.direction {
            Some(d) => (self.magnitude.get(n, j) + d.get(n, j)) / 2.0,
            None => self.magnitude.get(n, j),
        }
    }

    pub fn combined(&self) -> ScoreTable {
        let mut out = self.magnitude.clone();
        for n in 0..out.models() {
            for j in 0..out.cols() {
                out.set(n, j, self.coefficient(n, j));
            }
        }
        out
    }
}

/// `|m_n - m_pre|` per column.
pub fn magnitude_divergence(m_n: &[f64], m_pre: &[f64]) -> Result<Vec<f64>> {
    if m_n.len() != m_pre.len() {
        return Err(Error::ShapeMismatch(format!(
            "magnitude lengths {} vs {}",
            m_n.len(),
            m_pre.len()
        )));
    }
    Ok(m_n.iter().zip(m_pre).map(|(a, b)| (a - b).abs()).collect())
}

/// `1 - cos` between matching columns; lies in `[0, 2]`.
///
/// Cosine ignores positive column scaling, so this gives the same answer for
/// direction matrices and for the raw weights they were split from.
pub fn direction_divergence(d_n: &Matrix, d_pre: &Matrix) -> Result<Vec<f64>> {
    Ok(column_cosine_similarity(d_n, d_pre)?
        .into_iter()
        .map(|c| 1.0 - c)
        .collect())
}

/// Columns whose normalized score strictly exceeds `t` times the mean.
pub fn crucial_set(scores: &[f64], t: f64) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let threshold = t / scores.len() as f64 * scores.iter().sum::<f64>();
    scores
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(j, _)| j)
        .collect()
}

/// Overrides `raw[n, j]` with `s` for every `j` in `crucial[n]`.
pub fn calibrate_scores(raw: &ScoreTable, crucial: &[Vec<usize>], s: f64) -> Result<ScoreTable> {
    if crucial.len() != raw.models() {
        return Err(Error::ShapeMismatch(format!(
            "{} crucial sets for {} models",
            crucial.len(),
            raw.models()
        )));
    }
    let mut out = raw.clone();
    for (n, set) in crucial.iter().enumerate() {
        for &j in set {
            if j >= raw.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "crucial index {j} out of range for {} columns",
                    raw.cols()
                )));
            }
            out.set(n, j, s);
        }
    }
    Ok(out)
}

/// Normalize, softmax across models, then calibrate.
fn score_table(divergences: Vec<Vec<f64>>, params: &WidenParams) -> Result<ScoreTable> {
    let normalized: Vec<Vec<f64>> = divergences
        .iter()
        .map(|d| match params.variant {
            Variant::NoRank => min_max_normalize(d),
            _ => ascending_rank_normalize(d),
        })
        .collect();
    let crucial: Vec<Vec<usize>> = match params.variant {
        Variant::NoSc => Vec::new(),
        _ => normalized.iter().map(|v| crucial_set(v, params.t)).collect(),
    };
    let raw = softmax_over_models(&ScoreTable::from_rows(normalized)?);
    if crucial.is_empty() {
        Ok(raw)
    } else {
        calibrate_scores(&raw, &crucial, params.s)
    }
}

fn check_models(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::EmptyModelList)
    } else {
        Ok(())
    }
}

fn ensure_finite(values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidTensor("vector contains NaN or infinity".into()))
    }
}

/// Scores for a 2-D weight.
pub fn widen_scores_2d(
    backbone: &Matrix,
    models: &[&Matrix],
    params: &WidenParams,
) -> Result<ImportanceScores> {
    params.validate()?;
    check_models(models.len())?;
    for m in models {
        backbone.ensure_same_shape(m)?;
    }
    backbone.ensure_finite()?;

    if params.variant == Variant::NoWd {
        let div = models
            .iter()
            .map(|w| direction_divergence(w, backbone))
            .collect::<Result<Vec<_>>>()?;
        let table = score_table(div, params)?;
        return Ok(ImportanceScores {
            direction: Some(table.clone()),
            magnitude: table,
        });
    }

    let m_pre = column_norms(backbone, params.norm_order)?;
    let mut mag_div = Vec::with_capacity(models.len());
    let mut dir_div = Vec::with_capacity(models.len());
    for w in models {
        let m_n = column_norms(w, params.norm_order)?;
        mag_div.push(magnitude_divergence(&m_n, &m_pre)?);
        dir_div.push(direction_divergence(w, backbone)?);
    }
    Ok(ImportanceScores {
        magnitude: score_table(mag_div, params)?,
        direction: Some(score_table(dir_div, params)?),
    })
}

/// Scores for a 1-D parameter (norm weights, biases).
pub fn widen_scores_1d(
    backbone: &[f32],
    models: &[&[f32]],
    params: &WidenParams,
) -> Result<ImportanceScores> {
    params.validate()?;
    check_models(models.len())?;
    if backbone.is_empty() {
        return Err(Error::InvalidTensor("empty vector".into()));
    }
    ensure_finite(backbone)?;
    let div = models
        .iter()
        .map(|w| {
            if w.len() != backbone.len() {
                return Err(Error::ShapeMismatch(format!(
                    "vector lengths {} vs {}",
                    w.len(),
                    backbone.len()
                )));
            }
            ensure_finite(w)?;
            Ok(w.iter()
                .zip(backbone)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceScores {
        magnitude: score_table(div, params)?,
        direction: None,
    })
}

/// `W_pre + Σ_n coef[n, j] · (W_n - W_pre)`, accumulated in f64.
pub fn apply_scores_2d(backbone: &Matrix, models: &[&Matrix], scores: &ImportanceScores) -> Matrix {
    let (rows, cols) = backbone.shape();
    let coef: Vec<f64> = (0..models.len())
        .flat_map(|n| (0..cols).map(move |j| (n, j)))
        .map(|(n, j)| scores.coefficient(n, j))
        .collect();
    let pre = backbone.as_slice();
    let mut out = Vec::with_capacity(rows * cols);
    for (idx, &b) in pre.iter().enumerate() {
        let j = idx % cols;
        let base = f64::from(b);
        let mut acc = base;
        for (n, w) in models.iter().enumerate() {
            acc += coef[n * cols + j] * (f64::from(w.as_slice()[idx]) - base);
        }
        out.push(acc as f32);
    }
    Matrix::new(rows, cols, out).expect("shape preserved")
}

pub fn apply_scores_1d(backbone: &[f32], models: &[&[f32]], scores: &ImportanceScores) -> Vec<f32> {
    backbone
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let base = f64::from(b);
            let mut acc = base;
            for (n, w) in models.iter().enumerate() {
                acc += scores.coefficient(n, j) * (f64::from(w[j]) - base);
            }
            acc as f32
        })
        .collect()
}

pub fn widen_merge_2d(backbone: &Matrix, models: &[&Matrix], params: &WidenParams) -> Result<Matrix> {
    let scores = widen_scores_2d(backbone, models, params)?;
    Ok(apply_scores_2d(backbone, models, &scores))
}

pub fn widen_merge_1d(backbone: &[f32], models: &[&[f32]], params: &WidenParams) -> Result<Vec<f32>> {
    let scores = widen_scores_1d(backbone, models, params)?;
    Ok(apply_scores_1d(backbone, models, &scores))
}
