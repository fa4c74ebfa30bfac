use std::path::PathBuf;

use serde::Serialize;

use super::{CheckpointHandle, Dtype};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeDiff {
    pub name: String,
    pub reference: Vec<usize>,
    pub other: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DtypeMismatch {
    pub name: String,
    pub reference: Dtype,
    pub other: Dtype,
}

/// Differences between the reference checkpoint and one other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Comparison {
    pub path: PathBuf,
    pub only_in_reference: Vec<String>,
    pub only_in_other: Vec<String>,
    pub shape_mismatch: Vec<ShapeDiff>,
    /// Reported but not disqualifying: every dtype is upcast for merging.
    pub dtype_mismatch: Vec<DtypeMismatch>,
}

impl Comparison {
    pub fn is_homologous(&self) -> bool {
        self.only_in_reference.is_empty()
            && self.only_in_other.is_empty()
            && self.shape_mismatch.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HomologyReport {
    pub reference: PathBuf,
    pub comparisons: Vec<Comparison>,
    pub homologous: bool,
}

impl HomologyReport {
    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        for c in self.comparisons.iter().filter(|c| !c.is_homologous()) {
            parts.push(format!(
                "{}: {} only in reference, {} only in other, {} shape mismatches",
                c.path.display(),
                c.only_in_reference.len(),
                c.only_in_other.len(),
                c.shape_mismatch.len()
            ));
        }
        parts.join("; ")
    }
}

/// Compares every handle against the first one.
pub fn validate_homologous(handles: &[&CheckpointHandle]) -> HomologyReport {
    let Some((reference, others)) = handles.split_first() else {
        return HomologyReport {
            reference: PathBuf::new(),
            comparisons: Vec::new(),
            homologous: true,
        };
    };
    let comparisons: Vec<Comparison> = others
        .iter()
        .map(|other| {
            let mut c = Comparison {
                path: other.path().to_path_buf(),
                only_in_reference: Vec::new(),
                only_in_other: other
                    .names()
                    .filter(|n| !reference.contains(n))
                    .map(str::to_string)
                    .collect(),
                shape_mismatch: Vec::new(),
                dtype_mismatch: Vec::new(),
            };
            for meta in reference.metas() {
                match other.meta(&meta.name) {
                    None => c.only_in_reference.push(meta.name.clone()),
                    Some(o) => {
                        if o.shape != meta.shape {
                            c.shape_mismatch.push(ShapeDiff {
                                name: meta.name.clone(),
                                reference: meta.shape.clone(),
                                other: o.shape.clone(),
                            });
                        }
                        if o.dtype != meta.dtype {
                            c.dtype_mismatch.push(DtypeMismatch {
                                name: meta.name.clone(),
                                reference: meta.dtype,
                                other: o.dtype,
                            });
                        }
                    }
                }
            }
            c
        })
        .collect();
    HomologyReport {
        reference: reference.path().to_path_buf(),
        homologous: comparisons.iter().all(Comparison::is_homologous),
        comparisons,
    }
}
