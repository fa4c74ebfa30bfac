//! Recipe-driven merging of whole checkpoints.

mod grid;
mod recipe;
mod run;

pub use grid::{grid_search_expand, manifest_path, run_grid, GridManifest, GridPoint, GridStatus, ManifestEntry};
pub use recipe::{
    MergeParams, MergeRecipe, Method, MissingTensorPolicy, OneOrMany, ParamGrid, RecipeDoc,
    RecipeOverrides, Threads,
};
pub use run::{merge_tensor, run_merge, MergeReport, TensorPath, TensorReport};
