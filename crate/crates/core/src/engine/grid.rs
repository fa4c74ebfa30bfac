use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::recipe::{same_path, MergeRecipe, OneOrMany, ParamGrid, RecipeDoc};
use super::run::run_merge;
use crate::error::{Error, Result};
use crate::widen::Variant;

/// One point of an expanded grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    /// Values of the swept parameters (those listing more than one value).
    pub swept: BTreeMap<String, String>,
    pub recipe: MergeRecipe,
}

fn strings<T: Clone>(v: &Option<OneOrMany<T>>, show: impl Fn(&T) -> String) -> Option<Vec<String>> {
    v.as_ref().map(|v| v.values().iter().map(&show).collect())
}

/// `(name, rendered values)` for every parameter the document sets, in a fixed order.
fn axes(p: &ParamGrid) -> Vec<(&'static str, Vec<String>)> {
    let num = |x: &f64| format!("{x}");
    [
        ("t", strings(&p.t, num)),
        ("s", strings(&p.s, num)),
        ("lambda", strings(&p.lambda, num)),
        ("phi", strings(&p.phi, num)),
        ("keep_ratio", strings(&p.keep_ratio, num)),
        ("mask_top", strings(&p.mask_top, num)),
        ("drop_rate", strings(&p.drop_rate, num)),
        ("seed", strings(&p.seed, |x| x.to_string())),
        ("variant", strings(&p.variant, |x: &Variant| x.to_string())),
        ("norm_order", strings(&p.norm_order, |x| u8::from(*x).to_string())),
    ]
    .into_iter()
    .filter_map(|(name, values)| values.map(|v| (name, v)))
    .collect()
}

fn pick<T: Clone>(slot: &Option<OneOrMany<T>>, index: Option<usize>) -> Option<OneOrMany<T>> {
    match (slot, index) {
        (Some(v), Some(i)) => Some(OneOrMany::One(v.values()[i].clone())),
        (other, _) => other.clone(),
    }
}

fn suffixed(output: &Path, swept: &BTreeMap<String, String>, order: &[&str]) -> PathBuf {
    if swept.is_empty() {
        return output.to_path_buf();
    }
    let stem = output.file_stem().unwrap_or_default().to_string_lossy();
    let mut name = stem.into_owned();
    for key in order {
        if let Some(v) = swept.get(*key) {
            name.push_str(&format!("__{key}-{v}"));
        }
    }
    if let Some(ext) = output.extension() {
        name.push('.');
        name.push_str(&ext.to_string_lossy());
    }
    output.with_file_name(name)
}

/// Cartesian product of every list-valued parameter, each point a complete
/// recipe whose output name carries the swept values.
pub fn grid_search_expand(doc: &RecipeDoc) -> Result<Vec<GridPoint>> {
    let axes = axes(&doc.params);
    if let Some((name, _)) = axes.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Config(format!(
            "parameter `{name}` has an empty list, so the grid is empty"
        )));
    }
    let order: Vec<&str> = axes.iter().map(|(n, _)| *n).collect();
    let sizes: Vec<usize> = axes.iter().map(|(_, v)| v.len()).collect();
    let total: usize = sizes.iter().product();

    let mut points = Vec::with_capacity(total);
    for flat in 0..total {
        // Last axis varies fastest.
        let mut rem = flat;
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for (axis, &size) in order.iter().zip(&sizes).rev() {
            index.insert(axis, rem % size);
            rem /= size;
        }
        let swept: BTreeMap<String, String> = axes
            .iter()
            .filter(|(_, v)| v.len() > 1)
            .map(|(n, v)| (n.to_string(), v[index[n]].clone()))
            .collect();
        let p = &doc.params;
        let at = |n: &str| index.get(n).copied();
        let mut point_doc = doc.clone();
        point_doc.params = ParamGrid {
            t: pick(&p.t, at("t")),
            s: pick(&p.s, at("s")),
            lambda: pick(&p.lambda, at("lambda")),
            phi: pick(&p.phi, at("phi")),
            keep_ratio: pick(&p.keep_ratio, at("keep_ratio")),
            mask_top: pick(&p.mask_top, at("mask_top")),
            drop_rate: pick(&p.drop_rate, at("drop_rate")),
            seed: pick(&p.seed, at("seed")),
            variant: pick(&p.variant, at("variant")),
            norm_order: pick(&p.norm_order, at("norm_order")),
        };
        point_doc.output = suffixed(&doc.output, &swept, &order);
        points.push(GridPoint {
            recipe: MergeRecipe::from_doc(&point_doc)?,
            swept,
        });
    }

    let mut seen = BTreeSet::new();
    for point in &points {
        if !seen.insert(point.recipe.output.clone()) {
            return Err(Error::Config(format!(
                "grid produces {} more than once",
                point.recipe.output.display()
            )));
        }
        let inputs = std::iter::once(&doc.backbone).chain(&doc.models);
        for input in inputs {
            if same_path(input, &point.recipe.output) {
                return Err(Error::Config(format!(
                    "grid output {} would overwrite an input",
                    input.display()
                )));
            }
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub output: PathBuf,
    pub swept: BTreeMap<String, String>,
    pub status: GridStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridManifest {
    pub manifest_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl GridManifest {
    pub fn all_completed(&self) -> bool {
        self.entries.iter().all(|e| matches!(e.status, GridStatus::Completed))
    }
}

/// Where the manifest for a grid with base output `output` is written.
pub fn manifest_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().unwrap_or_default().to_string_lossy();
    output.with_file_name(format!("{stem}.manifest.json"))
}

/// Expands and runs a grid, stopping at the first failed point.
///
/// The manifest lists every completed point and the failure, if any, and is
/// written whether or not all points succeed. Expansion errors (including
/// output collisions) are returned before anything is written.
pub fn run_grid(doc: &RecipeDoc) -> Result<(GridManifest, Option<Error>)> {
    let points = grid_search_expand(doc)?;
    let mut manifest = GridManifest {
        manifest_path: manifest_path(&doc.output),
        entries: Vec::with_capacity(points.len()),
    };
    let mut failure = None;
    for point in points {
        match run_merge(&point.recipe) {
            Ok(report) => manifest.entries.push(ManifestEntry {
                output: point.recipe.output,
                swept: point.swept,
                status: GridStatus::Completed,
                error: None,
                wall_time_secs: Some(report.wall_time_secs),
            }),
            Err(e) => {
                manifest.entries.push(ManifestEntry {
                    output: point.recipe.output,
                    swept: point.swept,
                    status: GridStatus::Failed,
                    error: Some(e.to_string()),
                    wall_time_secs: None,
                });
                failure = Some(e);
                break;
            }
        }
    }
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
    std::fs::write(&manifest.manifest_path, json)
        .map_err(|e| Error::io(&manifest.manifest_path, e))?;
    Ok((manifest, failure))
}
