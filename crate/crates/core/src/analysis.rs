//! Diagnostics over importance scores and deltas: score histograms,
//! Low/Medium/High tier transitions between two variants, and delta deciles.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{validate_homologous, CheckpointHandle};
use crate::engine::MergeRecipe;
use crate::error::{Error, Result};
use crate::linalg::{ascending_order, ScoreTable};
use crate::widen::{widen_scores_2d, ImportanceScores, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    L,
    M,
    H,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::L, Tier::M, Tier::H];

    fn index(self) -> usize {
        self as usize
    }
}

/// Labels each position by its ascending-sorted place: the first `k/3`
/// (floored) are `L`, the next `k/3` are `M`, the rest `H`. Ties keep index order.
pub fn tier_classify(scores: &[f64]) -> Result<Vec<Tier>> {
    let k = scores.len();
    if k < 3 {
        return Err(Error::TooSmall(format!("tier classification needs at least 3 scores, got {k}")));
    }
    let third = k / 3;
    let mut tiers = vec![Tier::H; k];
    for (place, idx) in ascending_order(scores).into_iter().enumerate() {
        tiers[idx] = match place {
            p if p < third => Tier::L,
            p if p < 2 * third => Tier::M,
            _ => Tier::H,
        };
    }
    Ok(tiers)
}

/// Counts of positions moving from tier `x` (first scores) to tier `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TierTransition {
    pub counts: [[u64; 3]; 3],
}

impl TierTransition {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Fraction of all positions in cell `(from, to)`; zero when empty.
    pub fn fraction(&self, from: Tier, to: Tier) -> f64 {
        match self.total() {
            0 => 0.0,
            total => self.counts[from.index()][to.index()] as f64 / total as f64,
        }
    }

    pub fn fractions(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for from in Tier::ALL {
            for to in Tier::ALL {
                out[from.index()][to.index()] = self.fraction(from, to);
            }
        }
        out
    }

    pub fn row_mass(&self, from: Tier) -> f64 {
        Tier::ALL.iter().map(|&to| self.fraction(from, to)).sum()
    }

    /// Adds another transition's counts, weighting tensors by column count.
    pub fn accumulate(&mut self, other: &TierTransition) {
        for (row, other_row) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(other_row) {
                *c += o;
            }
        }
    }
}

pub fn tier_transition(scores_a: &[f64], scores_b: &[f64]) -> Result<TierTransition> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::ShapeMismatch(format!(
            "score vectors of length {} and {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let a = tier_classify(scores_a)?;
    let b = tier_classify(scores_b)?;
    let mut out = TierTransition::default();
    for (x, y) in a.into_iter().zip(b) {
        out.counts[x.index()][y.index()] += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreComponent {
    Magnitude,
    Direction,
    #[default]
    Combined,
}

impl std::str::FromStr for ScoreComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "direction" => Ok(Self::Direction),
            "combined" => Ok(Self::Combined),
            other => Err(Error::Config(format!("unknown score component `{other}`"))),
        }
    }
}

/// Post-calibration scores of one tensor, one row per model.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRecord {
    pub tensor: String,
    pub component: ScoreComponent,
    pub scores: ScoreTable,
}

impl ImportanceRecord {
    /// Picks `component` out of `scores`. Direction falls back to magnitude
    /// for 1-D parameters, which have no direction.
    pub fn from_scores(tensor: &str, component: ScoreComponent, scores: &ImportanceScores) -> Self {
        let table = match component {
            ScoreComponent::Magnitude => scores.magnitude.clone(),
            ScoreComponent::Direction => scores.direction.clone().unwrap_or_else(|| scores.magnitude.clone()),
            ScoreComponent::Combined => scores.combined(),
        };
        Self {
            tensor: tensor.to_string(),
            component,
            scores: table,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges from 0 to the upper bound.
    pub edges: Vec<f64>,
    /// One row of `bins` counts per model.
    pub counts: Vec<Vec<u64>>,
}

impl Histogram {
    pub fn total(&self, model: usize) -> u64 {
        self.counts[model].iter().sum()
    }
}

/// Equal-width histogram of scores over `[0, max(1, s)]`, per model.
///
/// Bins are half-open except the last, which includes the upper edge. Values
/// outside the range are clamped into the end bins, so counts always sum to
/// the number of score entries.
pub fn importance_histogram(records: &[ImportanceRecord], bins: usize, s: f64) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let upper = s.max(1.0);
    let edges = (0..=bins).map(|i| upper * i as f64 / bins as f64).collect();
    let models = records.iter().map(|r| r.scores.models()).max().unwrap_or(0);
    let mut counts = vec![vec![0u64; bins]; models];
    for record in records {
        for (n, row) in record.scores.rows().enumerate() {
            for &v in row {
                let pos = (v / upper * bins as f64).floor();
                let bin = if pos.is_nan() || pos < 0.0 { 0 } else { (pos as usize).min(bins - 1) };
                counts[n][bin] += 1;
            }
        }
    }
    Ok(Histogram { edges, counts })
}

pub const DECILE_POINTS: usize = 11;

/// Sorted values at positions `round(q * (len - 1))` for q = 0, 0.1, ..., 1.
pub fn delta_deciles<T: Copy + Into<f64>>(delta: &[T]) -> Result<[f64; DECILE_POINTS]> {
    if delta.is_empty() {
        return Err(Error::EmptyInput("delta deciles of an empty input".into()));
    }
    let mut sorted: Vec<f64> = delta.iter().map(|&v| v.into()).collect();
    sorted.sort_unstable_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    let mut out = [0.0; DECILE_POINTS];
    for (i, slot) in out.iter_mut().enumerate() {
        let q = i as f64 / 10.0;
        *slot = sorted[(q * last).round() as usize];
    }
    Ok(out)
}

/// Whether tiers are assigned over all of a model's columns at once or per tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierScope {
    #[default]
    Model,
    Tensor,
}

impl std::str::FromStr for TierScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Self::Model),
            "tensor" => Ok(Self::Tensor),
            other => Err(Error::Config(format!("unknown tier scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub bins: usize,
    pub from: Variant,
    pub to: Variant,
    pub scope: TierScope,
    pub component: ScoreComponent,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bins: 20,
            from: Variant::NoSc,
            to: Variant::Full,
            scope: TierScope::Model,
            component: ScoreComponent::Combined,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorTransitions {
    pub tensor: String,
    pub columns: usize,
    /// One per model.
    pub transitions: Vec<TierTransition>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub config: AnalysisConfig,
    pub t: f64,
    pub s: f64,
    pub backbone: PathBuf,
    pub models: Vec<PathBuf>,
    /// 2-D tensors that contributed scores.
    pub tensors: Vec<String>,
    /// Scored columns per model.
    pub score_entries: u64,
    pub histogram_from: Histogram,
    pub histogram_to: Histogram,
    /// Checkpoint-wide transition per model.
    pub transitions: Vec<TierTransition>,
    /// Present for per-tensor scope; tensors with fewer than 3 columns are left out.
    pub tensor_transitions: Option<Vec<TensorTransitions>>,
    /// Deciles of all deltas (every tensor shared with the backbone) per model.
    pub deciles: Vec<[f64; DECILE_POINTS]>,
    pub notes: Vec<String>,
}

type TensorOutcome = (Option<TensorScores>, Vec<Vec<f32>>);

struct TensorScores {
    name: String,
    from: ImportanceRecord,
    to: ImportanceRecord,
    deltas: Vec<Vec<f32>>,
}

fn score_tensor(
    recipe: &MergeRecipe,
    config: &AnalysisConfig,
    backbone: &CheckpointHandle,
    models: &[CheckpointHandle],
    name: &str,
) -> Result<TensorScores> {
    let pre = backbone.read_tensor(name)?;
    let loaded = models.iter().map(|m| m.read_tensor(name)).collect::<Result<Vec<_>>>()?;
    let deltas = loaded
        .iter()
        .map(|m| m.data.iter().zip(&pre.data).map(|(a, b)| a - b).collect())
        .collect();
    let pre = pre.to_matrix()?;
    let mats = loaded.iter().map(|m| m.to_matrix()).collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = mats.iter().collect();
    let mut params = recipe.params.widen();
    let mut record = |variant| {
        params.variant = variant;
        widen_scores_2d(&pre, &refs, &params).map(|s| ImportanceRecord::from_scores(name, config.component, &s))
    };
    Ok(TensorScores {
        name: name.to_string(),
        from: record(config.from)?,
        to: record(config.to)?,
        deltas,
    })
}

fn read_deltas(backbone: &CheckpointHandle, models: &[CheckpointHandle], name: &str) -> Result<Vec<Vec<f32>>> {
    let pre = backbone.read_tensor(name)?;
    models
        .iter()
        .map(|m| {
            let w = m.read_tensor(name)?;
            Ok(w.data.iter().zip(&pre.data).map(|(a, b)| a - b).collect())
        })
        .collect()
}

/// Scores every 2-D tensor shared by all checkpoints of `recipe` under two
/// WIDEN variants and summarizes how importance shifts between them.
///
/// Uses the recipe's backbone, models, `t`, `s`, norm order and thread count;
/// its method and output are ignored.
pub fn analyze(recipe: &MergeRecipe, config: &AnalysisConfig) -> Result<AnalysisReport> {
    if config.bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if recipe.models.is_empty() {
        return Err(Error::EmptyModelList);
    }
    recipe.params.widen().validate()?;
    let backbone = CheckpointHandle::open(&recipe.backbone)?;
    let models = recipe.models.iter().map(CheckpointHandle::open).collect::<Result<Vec<_>>>()?;
    let all: Vec<&CheckpointHandle> = std::iter::once(&backbone).chain(&models).collect();
    let homology = validate_homologous(&all);
    if !homology.homologous {
        return Err(Error::NotHomologous(homology.summary()));
    }

    let threads = recipe.threads.resolve();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;

    let metas: Vec<_> = backbone.metas().cloned().collect();
    for meta in &metas {
        if !(1..=2).contains(&meta.rank()) {
            return Err(Error::UnsupportedRank {
                name: meta.name.clone(),
                rank: meta.rank(),
            });
        }
    }

    let mut scored: Vec<TensorScores> = Vec::new();
    let mut deltas: Vec<Vec<f32>> = vec![Vec::new(); models.len()];
    for batch in metas.chunks(threads) {
        let results: Vec<Result<TensorOutcome>> = pool.install(|| {
            batch
                .par_iter()
                .map(|meta| {
                    let out = if meta.rank() == 2 {
                        score_tensor(recipe, config, &backbone, &models, &meta.name).map(|mut ts| {
                            let d = std::mem::take(&mut ts.deltas);
                            (Some(ts), d)
                        })
                    } else {
                        read_deltas(&backbone, &models, &meta.name).map(|d| (None, d))
                    };
                    out.map_err(|e| e.in_tensor(&meta.name))
                })
                .collect()
        });
        for result in results {
            let (ts, d) = result?;
            for (acc, part) in deltas.iter_mut().zip(d) {
                acc.extend(part);
            }
            scored.extend(ts);
        }
    }

    let from: Vec<ImportanceRecord> = scored.iter().map(|t| t.from.clone()).collect();
    let to: Vec<ImportanceRecord> = scored.iter().map(|t| t.to.clone()).collect();
    let s = recipe.params.s;
    let histogram_from = importance_histogram(&from, config.bins, s)?;
    let histogram_to = importance_histogram(&to, config.bins, s)?;
    let score_entries = scored.iter().map(|t| t.from.scores.cols() as u64).sum();

    let (transitions, tensor_transitions) = match config.scope {
        TierScope::Model => {
            let mut per_model = Vec::with_capacity(models.len());
            for n in 0..models.len() {
                let a: Vec<f64> = scored.iter().flat_map(|t| t.from.scores.row(n).to_vec()).collect();
                let b: Vec<f64> = scored.iter().flat_map(|t| t.to.scores.row(n).to_vec()).collect();
                per_model.push(tier_transition(&a, &b)?);
            }
            (per_model, None)
        }
        TierScope::Tensor => {
            let mut per_model = vec![TierTransition::default(); models.len()];
            let mut per_tensor = Vec::new();
            for t in scored.iter().filter(|t| t.from.scores.cols() >= 3) {
                let transitions = (0..models.len())
                    .map(|n| tier_transition(t.from.scores.row(n), t.to.scores.row(n)))
                    .collect::<Result<Vec<_>>>()?;
                for (acc, tr) in per_model.iter_mut().zip(&transitions) {
                    acc.accumulate(tr);
                }
                per_tensor.push(TensorTransitions {
                    tensor: t.name.clone(),
                    columns: t.from.scores.cols(),
                    transitions,
                });
            }
            (per_model, Some(per_tensor))
        }
    };

    let deciles = deltas
        .iter()
        .map(|d| delta_deciles(d))
        .collect::<Result<Vec<_>>>()?;

    Ok(AnalysisReport {
        config: *config,
        t: recipe.params.t,
        s,
        backbone: recipe.backbone.clone(),
        models: recipe.models.clone(),
        tensors: scored.iter().map(|t| t.name.clone()).collect(),
        score_entries,
        histogram_from,
        histogram_to,
        transitions,
        tensor_transitions,
        deciles,
        notes: vec![
            "tiers: ascending order, floor(k/3) low, floor(k/3) medium, remainder high; ties by index".into(),
            "deciles: sorted deltas at index round(q * (len - 1))".into(),
            "histogram: equal bins over [0, max(1, s)], last bin closed".into(),
        ],
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Writes `analysis.json`, `histogram.csv`, `transitions.csv` and
/// `deciles.csv` into `dir`, returning the paths written.
pub fn write_analysis(report: &AnalysisReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("analysis.json");
    let json = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::Config(format!("cannot serialize analysis: {e}")))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let hist_path = dir.join("histogram.csv");
    let mut w = csv::Writer::from_path(&hist_path).map_err(|e| csv_error(&hist_path, e))?;
    w.write_record(["variant", "model", "bin", "lower", "upper", "count"])
        .map_err(|e| csv_error(&hist_path, e))?;
    for (variant, hist) in [(report.config.from, &report.histogram_from), (report.config.to, &report.histogram_to)] {
        for (n, row) in hist.counts.iter().enumerate() {
            for (b, count) in row.iter().enumerate() {
                w.write_record([
                    variant.to_string(),
                    n.to_string(),
                    b.to_string(),
                    hist.edges[b].to_string(),
                    hist.edges[b + 1].to_string(),
                    count.to_string(),
                ])
                .map_err(|e| csv_error(&hist_path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&hist_path, e))?;

    let tr_path = dir.join("transitions.csv");
    let mut w = csv::Writer::from_path(&tr_path).map_err(|e| csv_error(&tr_path, e))?;
    w.write_record(["tensor", "model", "from", "to", "count", "fraction"])
        .map_err(|e| csv_error(&tr_path, e))?;
    let mut rows: Vec<(String, usize, &TierTransition)> =
        report.transitions.iter().enumerate().map(|(n, t)| ("*".to_string(), n, t)).collect();
    for tt in report.tensor_transitions.iter().flatten() {
        rows.extend(tt.transitions.iter().enumerate().map(|(n, t)| (tt.tensor.clone(), n, t)));
    }
    for (tensor, n, tr) in rows {
        for from in Tier::ALL {
            for to in Tier::ALL {
                w.write_record([
                    tensor.clone(),
                    n.to_string(),
                    format!("{from:?}"),
                    format!("{to:?}"),
                    tr.counts[from.index()][to.index()].to_string(),
                    tr.fraction(from, to).to_string(),
                ])
                .map_err(|e| csv_error(&tr_path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&tr_path, e))?;

    let dec_path = dir.join("deciles.csv");
    let mut w = csv::Writer::from_path(&dec_path).map_err(|e| csv_error(&dec_path, e))?;
    w.write_record(["model", "quantile", "value"]).map_err(|e| csv_error(&dec_path, e))?;
    for (n, deciles) in report.deciles.iter().enumerate() {
        for (i, v) in deciles.iter().enumerate() {
            w.write_record([n.to_string(), format!("{:.1}", i as f64 / 10.0), v.to_string()])
                .map_err(|e| csv_error(&dec_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&dec_path, e))?;

    Ok(vec![json_path, hist_path, tr_path, dec_path])
}
