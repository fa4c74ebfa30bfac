use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::DtypePolicy;
use crate::error::{Error, Result};
use crate::linalg::NormOrder;
use crate::widen::{Variant, WidenParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Widen,
    Average,
    TaskArithmetic,
    Slerp,
    ModelStock,
    Ties,
    Breadcrumbs,
    DareTaskArithmetic,
    MagnitudePruneTaskArithmetic,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Widen,
        Method::Average,
        Method::TaskArithmetic,
        Method::Slerp,
        Method::ModelStock,
        Method::Ties,
        Method::Breadcrumbs,
        Method::DareTaskArithmetic,
        Method::MagnitudePruneTaskArithmetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Widen => "widen",
            Method::Average => "average",
            Method::TaskArithmetic => "task_arithmetic",
            Method::Slerp => "slerp",
            Method::ModelStock => "model_stock",
            Method::Ties => "ties",
            Method::Breadcrumbs => "breadcrumbs",
            Method::DareTaskArithmetic => "dare_task_arithmetic",
            Method::MagnitudePruneTaskArithmetic => "magnitude_prune_task_arithmetic",
        }
    }

    fn check_arity(self, n: usize) -> Result<()> {
        match self {
            Method::Slerp if n != 2 => Err(Error::Arity(format!(
                "slerp merges exactly 2 models, recipe lists {n}"
            ))),
            Method::ModelStock if n < 2 => Err(Error::Arity(format!(
                "model_stock needs at least 2 models, recipe lists {n}"
            ))),
            _ if n == 0 => Err(Error::Arity("recipe lists no models".into())),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingTensorPolicy {
    /// Refuse to merge checkpoints whose names or shapes differ.
    #[default]
    Error,
    /// Copy the backbone tensor wherever a model lacks it or disagrees on shape.
    CopyBackbone,
}

/// Worker count: a positive integer or `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "ThreadsRepr", into = "ThreadsRepr")]
pub enum Threads {
    #[default]
    Auto,
    Count(NonZeroUsize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThreadsRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<ThreadsRepr> for Threads {
    type Error = String;

    fn try_from(value: ThreadsRepr) -> std::result::Result<Self, Self::Error> {
        let count = match value {
            ThreadsRepr::Name(s) if s == "auto" => return Ok(Threads::Auto),
            ThreadsRepr::Name(s) => s.parse::<usize>().ok(),
            ThreadsRepr::Count(n) => Some(n),
        };
        count
            .and_then(NonZeroUsize::new)
            .map(Threads::Count)
            .ok_or_else(|| "threads must be a positive integer or \"auto\"".to_string())
    }
}

impl From<Threads> for ThreadsRepr {
    fn from(value: Threads) -> Self {
        match value {
            Threads::Auto => ThreadsRepr::Name("auto".into()),
            Threads::Count(n) => ThreadsRepr::Count(n.get()),
        }
    }
}

impl std::str::FromStr for Threads {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Threads::try_from(ThreadsRepr::Name(s.to_string()))
    }
}

impl Threads {
    pub fn resolve(self) -> usize {
        match self {
            Threads::Count(n) => n.get(),
            Threads::Auto => std::thread::available_parallelism().map_or(1, NonZeroUsize::get),
        }
    }
}

/// Hyperparameters for every method; each method reads the ones it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeParams {
    pub t: f64,
    pub s: f64,
    pub lambda: f64,
    pub phi: f64,
    pub keep_ratio: f64,
    pub mask_top: f64,
    pub drop_rate: f64,
    pub seed: u64,
    pub variant: Variant,
    pub norm_order: NormOrder,
}

impl MergeParams {
    pub fn defaults_for(method: Method) -> Self {
        Self {
            t: 1.0,
            s: 1.0,
            lambda: 1.0,
            phi: 0.5,
            keep_ratio: 0.9,
            mask_top: 0.01,
            drop_rate: match method {
                Method::MagnitudePruneTaskArithmetic => 0.5,
                _ => 0.9,
            },
            seed: 0,
            variant: Variant::Full,
            norm_order: NormOrder::L2,
        }
    }

    pub fn widen(&self) -> WidenParams {
        WidenParams {
            t: self.t,
            s: self.s,
            norm_order: self.norm_order,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t", self.t), ("s", self.s), ("lambda", self.lambda)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        let in_range = |name: &str, v: f64, ok: bool| {
            if ok && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is out of range")))
            }
        };
        in_range("phi", self.phi, (0.0..=1.0).contains(&self.phi))?;
        in_range("keep_ratio", self.keep_ratio, self.keep_ratio > 0.0 && self.keep_ratio <= 1.0)?;
        in_range("mask_top", self.mask_top, (0.0..1.0).contains(&self.mask_top))?;
        in_range("drop_rate", self.drop_rate, (0.0..1.0).contains(&self.drop_rate))?;
        if self.keep_ratio + self.mask_top > 1.0 + 1e-9 {
            return Err(Error::Config(format!(
                "keep_ratio ({}) + mask_top ({}) exceeds 1",
                self.keep_ratio, self.mask_top
            )));
        }
        Ok(())
    }
}

/// A scalar or a list of values; lists are only meaningful for grid runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// The `params` block of a recipe file as written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGrid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<OneOrMany<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<OneOrMany<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<OneOrMany<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<OneOrMany<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_ratio: Option<OneOrMany<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_top: Option<OneOrMany<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_rate: Option<OneOrMany<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<OneOrMany<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<OneOrMany<Variant>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_order: Option<OneOrMany<NormOrder>>,
}

/// A recipe file as parsed, before defaults are filled in or grids expanded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeDoc {
    pub backbone: PathBuf,
    pub models: Vec<PathBuf>,
    pub method: Method,
    #[serde(default)]
    pub params: ParamGrid,
    #[serde(default)]
    pub missing_tensor_policy: MissingTensorPolicy,
    #[serde(default)]
    pub dtype_policy: DtypePolicy,
    pub output: PathBuf,
    #[serde(default)]
    pub threads: Threads,
}

impl RecipeDoc {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid recipe: {e}")))
    }

    /// Reads a recipe file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut doc = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            doc.rebase(dir);
        }
        Ok(doc)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.backbone);
        self.models.iter_mut().for_each(fix);
        fix(&mut self.output);
    }
}

/// Command-line style overrides applied on top of a recipe file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecipeOverrides {
    pub method: Option<Method>,
    pub t: Option<f64>,
    pub s: Option<f64>,
    pub lambda: Option<f64>,
    pub phi: Option<f64>,
    pub keep_ratio: Option<f64>,
    pub mask_top: Option<f64>,
    pub drop_rate: Option<f64>,
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub threads: Option<Threads>,
    pub dtype_policy: Option<DtypePolicy>,
    pub output: Option<PathBuf>,
}

impl RecipeOverrides {
    pub fn apply(&self, doc: &mut RecipeDoc) {
        fn set<T: Copy>(slot: &mut Option<OneOrMany<T>>, value: Option<T>) {
            if let Some(v) = value {
                *slot = Some(OneOrMany::One(v));
            }
        }
        if let Some(m) = self.method {
            doc.method = m;
        }
        let p = &mut doc.params;
        set(&mut p.t, self.t);
        set(&mut p.s, self.s);
        set(&mut p.lambda, self.lambda);
        set(&mut p.phi, self.phi);
        set(&mut p.keep_ratio, self.keep_ratio);
        set(&mut p.mask_top, self.mask_top);
        set(&mut p.drop_rate, self.drop_rate);
        set(&mut p.seed, self.seed);
        set(&mut p.variant, self.variant);
        if let Some(t) = self.threads {
            doc.threads = t;
        }
        if let Some(d) = self.dtype_policy {
            doc.dtype_policy = d;
        }
        if let Some(o) = &self.output {
            doc.output = o.clone();
        }
    }
}

/// A fully resolved, single-run merge configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeRecipe {
    pub backbone: PathBuf,
    pub models: Vec<PathBuf>,
    pub method: Method,
    pub params: MergeParams,
    pub missing_tensor_policy: MissingTensorPolicy,
    pub dtype_policy: DtypePolicy,
    pub output: PathBuf,
    pub threads: Threads,
}

fn single<T: Clone>(name: &str, value: &Option<OneOrMany<T>>, default: T) -> Result<T> {
    match value {
        None => Ok(default),
        Some(v) => match v.values().as_slice() {
            [one] => Ok(one.clone()),
            [] => Err(Error::Config(format!("parameter `{name}` has an empty list"))),
            many => Err(Error::Config(format!(
                "parameter `{name}` lists {} values; use the grid command to sweep it",
                many.len()
            ))),
        },
    }
}

impl MergeRecipe {
    pub fn new(backbone: PathBuf, models: Vec<PathBuf>, method: Method, output: PathBuf) -> Self {
        Self {
            backbone,
            models,
            method,
            params: MergeParams::defaults_for(method),
            missing_tensor_policy: MissingTensorPolicy::default(),
            dtype_policy: DtypePolicy::default(),
            output,
            threads: Threads::default(),
        }
    }

    /// Resolves a document with scalar parameters; list-valued parameters
    /// with more than one entry are rejected.
    pub fn from_doc(doc: &RecipeDoc) -> Result<Self> {
        let d = MergeParams::defaults_for(doc.method);
        let p = &doc.params;
        let params = MergeParams {
            t: single("t", &p.t, d.t)?,
            s: single("s", &p.s, d.s)?,
            lambda: single("lambda", &p.lambda, d.lambda)?,
            phi: single("phi", &p.phi, d.phi)?,
            keep_ratio: single("keep_ratio", &p.keep_ratio, d.keep_ratio)?,
            mask_top: single("mask_top", &p.mask_top, d.mask_top)?,
            drop_rate: single("drop_rate", &p.drop_rate, d.drop_rate)?,
            seed: single("seed", &p.seed, d.seed)?,
            variant: single("variant", &p.variant, d.variant)?,
            norm_order: single("norm_order", &p.norm_order, d.norm_order)?,
        };
        let recipe = Self {
            backbone: doc.backbone.clone(),
            models: doc.models.clone(),
            method: doc.method,
            params,
            missing_tensor_policy: doc.missing_tensor_policy,
            dtype_policy: doc.dtype_policy,
            output: doc.output.clone(),
            threads: doc.threads,
        };
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn validate(&self) -> Result<()> {
        self.method.check_arity(self.models.len())?;
        self.params.validate()?;
        let inputs = std::iter::once(&self.backbone).chain(&self.models);
        for input in inputs {
            if same_path(input, &self.output) {
                return Err(Error::Config(format!(
                    "output {} would overwrite an input",
                    self.output.display()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}
