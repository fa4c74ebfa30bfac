#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use widen_core::checkpoint::{write_checkpoint, Dtype, DtypePolicy, NamedTensor};
use widen_core::checkpoint::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f32 {
    // Box-Muller; good enough for fixtures.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

pub fn random_vec(rng: &mut impl Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len).map(|_| normal(rng) * scale).collect()
}

/// A backbone layout: names and shapes.
pub type Layout = Vec<(String, Vec<usize>)>;

pub fn random_layout(rng: &mut impl Rng, tensors: usize, max_dim: usize) -> Layout {
    (0..tensors)
        .map(|i| {
            let shape = if rng.gen_bool(0.3) {
                vec![rng.gen_range(1..=max_dim)]
            } else {
                vec![rng.gen_range(1..=max_dim), rng.gen_range(1..=max_dim)]
            };
            (format!("layer.{i:02}.weight"), shape)
        })
        .collect()
}

pub fn random_tensors(rng: &mut impl Rng, layout: &Layout) -> Vec<(String, Tensor)> {
    layout
        .iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            (name.clone(), Tensor::new(shape.clone(), random_vec(rng, n, 1.0)).unwrap())
        })
        .collect()
}

pub fn perturb(rng: &mut impl Rng, base: &[(String, Tensor)], scale: f32) -> Vec<(String, Tensor)> {
    base.iter()
        .map(|(name, t)| {
            let data = t.data.iter().map(|v| v + normal(rng) * scale).collect();
            (name.clone(), Tensor::new(t.shape.clone(), data).unwrap())
        })
        .collect()
}

pub fn save(path: &Path, tensors: &[(String, Tensor)], dtype: Dtype) -> PathBuf {
    let named: Vec<NamedTensor> = tensors
        .iter()
        .map(|(name, tensor)| NamedTensor {
            name: name.clone(),
            dtype,
            tensor: tensor.clone(),
        })
        .collect();
    write_checkpoint(path, &named, DtypePolicy::PreserveInput, &BTreeMap::new()).unwrap()
}

/// Writes a backbone and `n` perturbed models into `dir`.
pub fn fixture_set(
    dir: &Path,
    seed: u64,
    n: usize,
    tensors: usize,
    max_dim: usize,
    scale: f32,
) -> (PathBuf, Vec<PathBuf>) {
    let mut rng = rng(seed);
    let layout = random_layout(&mut rng, tensors, max_dim);
    let base = random_tensors(&mut rng, &layout);
    let backbone = save(&dir.join("backbone.safetensors"), &base, Dtype::F32);
    let models = (0..n)
        .map(|i| {
            let m = perturb(&mut rng, &base, scale);
            save(&dir.join(format!("model{i}.safetensors")), &m, Dtype::F32)
        })
        .collect();
    (backbone, models)
}

pub fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}
