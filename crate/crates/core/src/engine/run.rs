use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::recipe::{MergeParams, MergeRecipe, Method, MissingTensorPolicy};
use crate::baselines::{
    average_merge, breadcrumbs_merge, dare_task_arithmetic, magnitude_prune_task_arithmetic,
    model_stock, slerp_merge, task_arithmetic, tensor_seed, ties_merge,
};
use crate::checkpoint::{
    validate_homologous, CheckpointHandle, CheckpointWriter, Dtype, HomologyReport, Tensor,
    TensorMeta,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::widen::{widen_merge_1d, widen_merge_2d};

/// How a tensor was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorPath {
    Widen2d,
    Widen1d,
    Elementwise,
    CopiedBackbone,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub path: TensorPath,
}

#[derive(Debug, Clone, Serialize)]
pub struct MergeReport {
    pub method: Method,
    pub params: MergeParams,
    pub output: PathBuf,
    pub models: usize,
    pub threads: usize,
    pub tensors: Vec<TensorReport>,
    pub merged_2d: usize,
    pub merged_1d: usize,
    pub copied_from_backbone: Vec<String>,
    /// Names present in some model but not in the backbone; never written.
    pub skipped_not_in_backbone: Vec<String>,
    pub wall_time_secs: f64,
    /// Largest f32 working set held at once across in-flight tensors.
    pub peak_resident_bytes_estimate: u64,
    pub homology: HomologyReport,
}

/// Merges one tensor. `backbone` and every model must share a shape.
///
/// Only WIDEN distinguishes rank: rank-2 tensors go through the
/// magnitude/direction path, rank-1 through the magnitude-only path. Every
/// baseline is element-wise.
pub fn merge_tensor(
    method: Method,
    params: &MergeParams,
    name: &str,
    backbone: &Tensor,
    models: &[&Tensor],
) -> Result<Vec<f32>> {
    for m in models {
        if m.shape != backbone.shape {
            return Err(Error::ShapeMismatch(format!(
                "model shape {:?} vs backbone {:?}",
                m.shape, backbone.shape
            )));
        }
    }
    let pre = backbone.data.as_slice();
    let flat: Vec<&[f32]> = models.iter().map(|m| m.data.as_slice()).collect();
    match method {
        Method::Widen => match backbone.rank() {
            2 => {
                let pre = backbone.to_matrix()?;
                let ms = models.iter().map(|m| m.to_matrix()).collect::<Result<Vec<Matrix>>>()?;
                let refs: Vec<&Matrix> = ms.iter().collect();
                Ok(widen_merge_2d(&pre, &refs, &params.widen())?.into_vec())
            }
            1 => widen_merge_1d(pre, &flat, &params.widen()),
            rank => Err(Error::UnsupportedRank {
                name: name.to_string(),
                rank,
            }),
        },
        Method::Average => average_merge(pre, &flat),
        Method::TaskArithmetic => task_arithmetic(pre, &flat, params.lambda),
        Method::Slerp => slerp_merge(&flat, params.phi),
        Method::ModelStock => model_stock(pre, &flat),
        Method::Ties => ties_merge(pre, &flat, params.keep_ratio, params.lambda),
        Method::Breadcrumbs => {
            breadcrumbs_merge(pre, &flat, params.mask_top, params.keep_ratio, params.lambda)
        }
        Method::DareTaskArithmetic => dare_task_arithmetic(
            pre,
            &flat,
            params.lambda,
            params.drop_rate,
            tensor_seed(params.seed, name),
        ),
        Method::MagnitudePruneTaskArithmetic => {
            magnitude_prune_task_arithmetic(pre, &flat, params.lambda, params.drop_rate)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Merge,
    Copy,
}

struct PlannedTensor {
    meta: TensorMeta,
    out_dtype: Dtype,
    action: Action,
}

fn plan(
    recipe: &MergeRecipe,
    backbone: &CheckpointHandle,
    models: &[CheckpointHandle],
    homology: &HomologyReport,
) -> Result<Vec<PlannedTensor>> {
    if !homology.homologous && recipe.missing_tensor_policy == MissingTensorPolicy::Error {
        return Err(Error::NotHomologous(homology.summary()));
    }
    backbone
        .metas()
        .map(|meta| {
            if !(1..=2).contains(&meta.rank()) {
                return Err(Error::UnsupportedRank {
                    name: meta.name.clone(),
                    rank: meta.rank(),
                });
            }
            let everywhere = models
                .iter()
                .all(|m| m.meta(&meta.name).is_some_and(|o| o.shape == meta.shape));
            Ok(PlannedTensor {
                meta: meta.clone(),
                out_dtype: recipe.dtype_policy.resolve(meta.dtype),
                action: if everywhere { Action::Merge } else { Action::Copy },
            })
        })
        .collect()
}

fn process(
    recipe: &MergeRecipe,
    backbone: &CheckpointHandle,
    models: &[CheckpointHandle],
    item: &PlannedTensor,
) -> Result<Vec<f32>> {
    let name = item.meta.name.as_str();
    let pre = backbone.read_tensor(name)?;
    if item.action == Action::Copy {
        return Ok(pre.data);
    }
    let loaded = models
        .iter()
        .map(|m| m.read_tensor(name))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = loaded.iter().collect();
    let merged = merge_tensor(recipe.method, &recipe.params, name, &pre, &refs)?;
    if merged.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidTensor("merged values are not finite".into()));
    }
    Ok(merged)
}

/// Runs one merge end to end and writes the output checkpoint.
///
/// Everything that can be checked without touching tensor payloads is
/// checked before the output file is created. Tensors are merged in
/// batches of at most `threads`, in ascending name order, and each batch is
/// written before the next is read. On any failure the partial output is
/// removed.
pub fn run_merge(recipe: &MergeRecipe) -> Result<MergeReport> {
    let started = Instant::now();
    recipe.validate()?;
    let backbone = CheckpointHandle::open(&recipe.backbone)?;
    let models = recipe
        .models
        .iter()
        .map(CheckpointHandle::open)
        .collect::<Result<Vec<_>>>()?;

    let all: Vec<&CheckpointHandle> = std::iter::once(&backbone).chain(&models).collect();
    let homology = validate_homologous(&all);
    let planned = plan(recipe, &backbone, &models, &homology)?;
    let mut skipped: Vec<String> = models
        .iter()
        .flat_map(|m| m.names())
        .filter(|n| !backbone.contains(n))
        .map(str::to_string)
        .collect();
    skipped.sort();
    skipped.dedup();

    let threads = recipe.threads.resolve();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;

    let out_metas: Vec<TensorMeta> = planned
        .iter()
        .map(|p| TensorMeta {
            name: p.meta.name.clone(),
            dtype: p.out_dtype,
            shape: p.meta.shape.clone(),
        })
        .collect();
    let metadata: BTreeMap<String, String> = [
        ("format".to_string(), "pt".to_string()),
        ("merge_method".to_string(), recipe.method.to_string()),
    ]
    .into();
    let mut writer = CheckpointWriter::create(&recipe.output, &out_metas, &metadata)?;

    let copies_per_tensor = (models.len() + 2) as u64;
    let mut peak = 0u64;
    for batch in planned.chunks(threads) {
        let resident: u64 = batch
            .iter()
            .map(|p| {
                let copies = match p.action {
                    Action::Merge => copies_per_tensor,
                    Action::Copy => 1,
                };
                p.meta.numel() as u64 * 4 * copies
            })
            .sum();
        peak = peak.max(resident);
        let results: Vec<Result<Vec<f32>>> = pool.install(|| {
            batch
                .par_iter()
                .map(|item| {
                    process(recipe, &backbone, &models, item).map_err(|e| e.in_tensor(&item.meta.name))
                })
                .collect()
        });
        for (item, result) in batch.iter().zip(results) {
            writer.write_tensor(&item.meta.name, &result?)?;
        }
    }
    writer.finish()?;

    let tensors: Vec<TensorReport> = planned
        .iter()
        .map(|p| TensorReport {
            name: p.meta.name.clone(),
            shape: p.meta.shape.clone(),
            dtype: p.out_dtype,
            path: match (p.action, recipe.method, p.meta.rank()) {
                (Action::Copy, _, _) => TensorPath::CopiedBackbone,
                (_, Method::Widen, 2) => TensorPath::Widen2d,
                (_, Method::Widen, _) => TensorPath::Widen1d,
                _ => TensorPath::Elementwise,
            },
        })
        .collect();
    let merged = |rank: usize| {
        planned
            .iter()
            .filter(|p| p.action == Action::Merge && p.meta.rank() == rank)
            .count()
    };
    Ok(MergeReport {
        method: recipe.method,
        params: recipe.params,
        output: recipe.output.clone(),
        models: models.len(),
        threads,
        merged_2d: merged(2),
        merged_1d: merged(1),
        copied_from_backbone: planned
            .iter()
            .filter(|p| p.action == Action::Copy)
            .map(|p| p.meta.name.clone())
            .collect(),
        skipped_not_in_backbone: skipped,
        tensors,
        wall_time_secs: started.elapsed().as_secs_f64(),
        peak_resident_bytes_estimate: peak,
        homology,
    })
}
