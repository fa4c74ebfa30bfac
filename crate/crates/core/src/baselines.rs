//! Baseline merge methods.
//!
//! All of these are element-wise and rank-agnostic: tensors are passed as
//! flat row-major slices and the backbone, when a method uses one, comes
//! first. Arithmetic is done in f64 and rounded once on output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{ascending_order, ZERO_NORM_EPS};

const SLERP_COLINEAR_EPS: f64 = 1e-6;

fn check_inputs(backbone: &[f32], models: &[&[f32]]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::EmptyModelList);
    }
    for m in models {
        if m.len() != backbone.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor has {} elements, backbone has {}",
                m.len(),
                backbone.len()
            )));
        }
    }
    Ok(())
}

fn check_fraction(name: &str, value: f64, lo_inclusive: bool, hi_inclusive: bool) -> Result<()> {
    let lo_ok = if lo_inclusive { value >= 0.0 } else { value > 0.0 };
    let hi_ok = if hi_inclusive { value <= 1.0 } else { value < 1.0 };
    if value.is_finite() && lo_ok && hi_ok {
        Ok(())
    } else {
        let lo = if lo_inclusive { '[' } else { '(' };
        let hi = if hi_inclusive { ']' } else { ')' };
        Err(Error::Config(format!("{name} must lie in {lo}0, 1{hi}, got {value}")))
    }
}

/// Number of entries a fraction of `len` stands for, rounded to nearest.
fn fraction_count(fraction: f64, len: usize) -> usize {
    ((fraction * len as f64).round() as usize).min(len)
}

/// Positions of `delta` sorted by ascending magnitude; ties keep index order.
fn magnitude_order(delta: &[f32]) -> Vec<usize> {
    let mags: Vec<f64> = delta.iter().map(|v| f64::from(v.abs())).collect();
    ascending_order(&mags)
}

fn delta(model: &[f32], backbone: &[f32]) -> Vec<f32> {
    model.iter().zip(backbone).map(|(m, b)| m - b).collect()
}

/// `(1/N) Σ_n W_n`.
pub fn average_merge(backbone: &[f32], models: &[&[f32]]) -> Result<Vec<f32>> {
    check_inputs(backbone, models)?;
    let n = models.len() as f64;
    Ok((0..backbone.len())
        .map(|i| (models.iter().map(|m| f64::from(m[i])).sum::<f64>() / n) as f32)
        .collect())
}

/// `W_pre + λ Σ_n (W_n - W_pre)`.
pub fn task_arithmetic(backbone: &[f32], models: &[&[f32]], lambda: f64) -> Result<Vec<f32>> {
    check_inputs(backbone, models)?;
    Ok(backbone
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let base = f64::from(b);
            let sum: f64 = models.iter().map(|m| f64::from(m[i]) - base).sum();
            (base + lambda * sum) as f32
        })
        .collect())
}

/// Sums already-computed deltas onto the backbone with scale `lambda`.
fn add_scaled_deltas(backbone: &[f32], deltas: &[Vec<f32>], lambda: f64) -> Vec<f32> {
    backbone
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let sum: f64 = deltas.iter().map(|d| f64::from(d[i])).sum();
            (f64::from(b) + lambda * sum) as f32
        })
        .collect()
}

/// Spherical interpolation between two whole tensors, one angle per tensor.
///
/// Falls back to linear interpolation when the tensors are (anti)colinear
/// or either one is all zeros.
pub fn slerp_merge(models: &[&[f32]], phi: f64) -> Result<Vec<f32>> {
    let [a, b] = models else {
        return Err(Error::Arity(format!(
            "slerp merges exactly 2 models, got {}",
            models.len()
        )));
    };
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} elements", a.len(), b.len())));
    }
    check_fraction("phi", phi, true, true)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    let (ca, cb) = if na <= ZERO_NORM_EPS || nb <= ZERO_NORM_EPS {
        (1.0 - phi, phi)
    } else {
        let omega = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
        let sin_omega = omega.sin();
        if sin_omega < SLERP_COLINEAR_EPS {
            (1.0 - phi, phi)
        } else {
            (
                ((1.0 - phi) * omega).sin() / sin_omega,
                (phi * omega).sin() / sin_omega,
            )
        }
    };
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (ca * f64::from(x) + cb * f64::from(y)) as f32)
        .collect())
}

/// Interpolation ratio toward the model average from the mean pairwise
/// cosine between task vectors: `N·cos / (1 + (N-1)·cos)`, clamped to `[0, 1]`.
pub fn model_stock_ratio(backbone: &[f32], models: &[&[f32]]) -> Result<f64> {
    check_inputs(backbone, models)?;
    let n = models.len();
    if n < 2 {
        return Err(Error::Arity(format!("model stock needs at least 2 models, got {n}")));
    }
    let deltas: Vec<Vec<f64>> = models
        .iter()
        .map(|m| {
            m.iter()
                .zip(backbone)
                .map(|(&x, &b)| f64::from(x) - f64::from(b))
                .collect()
        })
        .collect();
    let norms: Vec<f64> = deltas
        .iter()
        .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if norms[i] <= ZERO_NORM_EPS || norms[j] <= ZERO_NORM_EPS {
                continue;
            }
            let dot: f64 = deltas[i].iter().zip(&deltas[j]).map(|(x, y)| x * y).sum();
            total += (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Ok(0.0);
    }
    let cos = total / pairs as f64;
    let denom = 1.0 + (n as f64 - 1.0) * cos;
    if denom <= ZERO_NORM_EPS {
        return Ok(0.0);
    }
    Ok((n as f64 * cos / denom).clamp(0.0, 1.0))
}

/// `r · mean(W_n) + (1 - r) · W_pre` with `r` from [`model_stock_ratio`].
pub fn model_stock(backbone: &[f32], models: &[&[f32]]) -> Result<Vec<f32>> {
    let r = model_stock_ratio(backbone, models)?;
    let mean = average_merge(backbone, models)?;
    Ok(mean
        .iter()
        .zip(backbone)
        .map(|(&m, &b)| (r * f64::from(m) + (1.0 - r) * f64::from(b)) as f32)
        .collect())
}

/// Keeps the `keep_ratio` fraction of entries with the largest magnitude.
pub fn trim_to_top(delta: &[f32], keep_ratio: f64) -> Result<Vec<f32>> {
    check_fraction("keep_ratio", keep_ratio, false, true)?;
    let drop = delta.len() - fraction_count(keep_ratio, delta.len());
    let mut out = delta.to_vec();
    for idx in magnitude_order(delta).into_iter().take(drop) {
        out[idx] = 0.0;
    }
    Ok(out)
}

/// Trim, elect sign, disjoint mean.
///
/// Each delta is trimmed to its top `keep_ratio` entries by magnitude. Per
/// entry the elected sign is that of the sum of trimmed deltas, and the
/// merged delta is the mean of the trimmed deltas carrying that sign.
/// Entries with no such contributor stay at the backbone value.
pub fn ties_merge(
    backbone: &[f32],
    models: &[&[f32]],
    keep_ratio: f64,
    lambda: f64,
) -> Result<Vec<f32>> {
    check_inputs(backbone, models)?;
    let trimmed = models
        .iter()
        .map(|m| trim_to_top(&delta(m, backbone), keep_ratio))
        .collect::<Result<Vec<_>>>()?;
    Ok(backbone
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let total: f64 = trimmed.iter().map(|d| f64::from(d[i])).sum();
            let elected = if total > 0.0 {
                1.0
            } else if total < 0.0 {
                -1.0
            } else {
                return b;
            };
            let (sum, count) = trimmed
                .iter()
                .map(|d| f64::from(d[i]))
                .filter(|&v| v * elected > 0.0)
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                b
            } else {
                (f64::from(b) + lambda * sum / count as f64) as f32
            }
        })
        .collect())
}

/// Zeros the largest `mask_top` fraction and the smallest
/// `1 - keep_ratio - mask_top` fraction by magnitude.
pub fn breadcrumbs_mask(delta: &[f32], mask_top: f64, keep_ratio: f64) -> Result<Vec<f32>> {
    check_fraction("mask_top", mask_top, true, false)?;
    check_fraction("keep_ratio", keep_ratio, false, true)?;
    let bottom = 1.0 - keep_ratio - mask_top;
    if bottom < -1e-9 {
        return Err(Error::Config(format!(
            "keep_ratio ({keep_ratio}) + mask_top ({mask_top}) exceeds 1"
        )));
    }
    let len = delta.len();
    let n_bottom = fraction_count(bottom.max(0.0), len);
    let n_top = fraction_count(mask_top, len).min(len - n_bottom);
    let order = magnitude_order(delta);
    let mut out = delta.to_vec();
    for &idx in order[..n_bottom].iter().chain(&order[len - n_top..]) {
        out[idx] = 0.0;
    }
    Ok(out)
}

pub fn breadcrumbs_merge(
    backbone: &[f32],
    models: &[&[f32]],
    mask_top: f64,
    keep_ratio: f64,
    lambda: f64,
) -> Result<Vec<f32>> {
    check_inputs(backbone, models)?;
    let masked = models
        .iter()
        .map(|m| breadcrumbs_mask(&delta(m, backbone), mask_top, keep_ratio))
        .collect::<Result<Vec<_>>>()?;
    Ok(add_scaled_deltas(backbone, &masked, lambda))
}

/// Stable per-tensor seed derived from a global seed and the tensor name.
pub fn tensor_seed(global_seed: u64, tensor_name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(tensor_name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Drops each entry with probability `p` and rescales survivors by `1/(1-p)`.
pub fn dare_sparsify<R: Rng + ?Sized>(delta: &[f32], p: f64, rng: &mut R) -> Result<Vec<f32>> {
    check_fraction("drop_rate", p, true, false)?;
    let scale = 1.0 / (1.0 - p);
    Ok(delta
        .iter()
        .map(|&v| {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                (f64::from(v) * scale) as f32
            }
        })
        .collect())
}

pub fn dare_sparsify_seeded(delta: &[f32], p: f64, seed: u64) -> Result<Vec<f32>> {
    dare_sparsify(delta, p, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Task arithmetic over DARE-sparsified deltas. Models draw from one stream
/// seeded by `seed`, in list order.
pub fn dare_task_arithmetic(
    backbone: &[f32],
    models: &[&[f32]],
    lambda: f64,
    p: f64,
    seed: u64,
) -> Result<Vec<f32>> {
    check_inputs(backbone, models)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deltas = models
        .iter()
        .map(|m| dare_sparsify(&delta(m, backbone), p, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(add_scaled_deltas(backbone, &deltas, lambda))
}

/// Zeros the `drop_rate` fraction of entries with the smallest magnitude.
pub fn magnitude_prune(delta: &[f32], drop_rate: f64) -> Result<Vec<f32>> {
    check_fraction("drop_rate", drop_rate, true, false)?;
    let drop = fraction_count(drop_rate, delta.len());
    let mut out = delta.to_vec();
    for idx in magnitude_order(delta).into_iter().take(drop) {
        out[idx] = 0.0;
    }
    Ok(out)
}

pub fn magnitude_prune_task_arithmetic(
    backbone: &[f32],
    models: &[&[f32]],
    lambda: f64,
    drop_rate: f64,
) -> Result<Vec<f32>> {
    check_inputs(backbone, models)?;
    let deltas = models
        .iter()
        .map(|m| magnitude_prune(&delta(m, backbone), drop_rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(add_scaled_deltas(backbone, &deltas, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn average_examples() {
        let pre = [9.0f32];
        assert_eq!(average_merge(&pre, &[&[4.0]]).unwrap(), vec![4.0]);
        assert_eq!(average_merge(&pre, &[&[0.0], &[2.0]]).unwrap(), vec![1.0]);
        assert!(matches!(average_merge(&pre, &[]), Err(Error::EmptyModelList)));
        assert!(matches!(
            average_merge(&pre, &[&[1.0, 2.0]]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn average_equals_backbone_plus_mean_delta() {
        let pre = [0.25f32, -1.5, 3.0];
        let m = [[1.0f32, 0.0, 2.0], [0.5, -2.0, 2.5], [-1.0, 1.0, 4.0]];
        let refs: Vec<&[f32]> = m.iter().map(|r| r.as_slice()).collect();
        let got = average_merge(&pre, &refs).unwrap();
        for i in 0..3 {
            let mut s = 0.0f64;
            for r in &m {
                s += f64::from(r[i]) - f64::from(pre[i]);
            }
            let expected = f64::from(pre[i]) + s / 3.0;
            assert!((f64::from(got[i]) - expected).abs() <= 1e-6);
        }
    }

    #[test]
    fn task_arithmetic_examples() {
        let pre = [1.0f32, 2.0];
        let a = [3.0f32, 0.0];
        let b = [0.0f32, 5.0];
        assert_eq!(task_arithmetic(&pre, &[&a, &b], 0.0).unwrap(), pre.to_vec());
        assert_eq!(
            task_arithmetic(&pre, &[&a, &b], 0.5).unwrap(),
            average_merge(&pre, &[&a, &b]).unwrap()
        );
    }

    #[test]
    fn slerp_endpoints_and_right_angle() {
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        assert_eq!(slerp_merge(&[&a, &b], 0.0).unwrap(), a.to_vec());
        let end = slerp_merge(&[&a, &b], 1.0).unwrap();
        assert!((end[0] - b[0]).abs() < 1e-7 && (end[1] - b[1]).abs() < 1e-7);
        let mid = slerp_merge(&[&a, &b], 0.5).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((mid[0] - h).abs() < 1e-6 && (mid[1] - h).abs() < 1e-6);
    }

    #[test]
    fn slerp_colinear_falls_back_to_lerp() {
        let a = [1.0f32, 2.0, -1.0];
        let b = [2.0f32, 4.0, -2.0];
        let out = slerp_merge(&[&a, &b], 0.3).unwrap();
        for i in 0..3 {
            assert!((out[i] - (0.7 * a[i] + 0.3 * b[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn slerp_arity() {
        let a = [1.0f32];
        assert!(matches!(slerp_merge(&[&a], 0.5), Err(Error::Arity(_))));
        assert!(matches!(slerp_merge(&[&a, &a, &a], 0.5), Err(Error::Arity(_))));
    }

    #[test]
    fn model_stock_cases() {
        let pre = [0.0f32, 0.0];
        let a = [1.0f32, 2.0];
        assert!((model_stock_ratio(&pre, &[&a, &a]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(model_stock(&pre, &[&a, &a]).unwrap(), a.to_vec());

        let neg = [-1.0f32, -2.0];
        assert_eq!(model_stock_ratio(&pre, &[&a, &neg]).unwrap(), 0.0);
        assert_eq!(model_stock(&pre, &[&a, &neg]).unwrap(), pre.to_vec());

        let base = [0.5f32, -0.25];
        assert_eq!(model_stock(&base, &[&base, &base]).unwrap(), base.to_vec());
        assert!(matches!(model_stock(&pre, &[&a]), Err(Error::Arity(_))));
    }

    #[test]
    fn model_stock_orthogonal_pair() {
        // cos = 0 gives r = 0: no shared direction, stay at the anchor.
        let pre = [0.0f32, 0.0];
        let r = model_stock_ratio(&pre, &[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(r, 0.0);
        // cos = 1/2 with N = 2 gives 2·0.5 / 1.5 = 2/3.
        let r = model_stock_ratio(&pre, &[&[1.0, 0.0], &[0.5, 0.75f32.sqrt()]]).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn ties_hand_cases() {
        let pre = [10.0f32];
        assert_eq!(ties_merge(&pre, &[&[11.0], &[13.0]], 1.0, 1.0).unwrap(), vec![12.0]);
        assert_eq!(ties_merge(&pre, &[&[8.0], &[11.0]], 1.0, 1.0).unwrap(), vec![8.0]);
        // Balanced disagreement elects no sign.
        assert_eq!(ties_merge(&pre, &[&[9.0], &[11.0]], 1.0, 1.0).unwrap(), vec![10.0]);
        assert!(ties_merge(&pre, &[&[9.0]], 0.0, 1.0).is_err());
    }

    #[test]
    fn ties_trim_keeps_largest() {
        assert_eq!(
            trim_to_top(&[0.1, -3.0, 2.0, 0.5], 0.5).unwrap(),
            vec![0.0, -3.0, 2.0, 0.0]
        );
    }

    #[test]
    fn breadcrumbs_band() {
        let d: Vec<f32> = (1..=10).map(|v| v as f32).collect();
        let masked = breadcrumbs_mask(&d, 0.1, 0.8).unwrap();
        let mut expected = d.clone();
        expected[0] = 0.0;
        expected[9] = 0.0;
        assert_eq!(masked, expected);
        assert_eq!(breadcrumbs_mask(&d, 0.0, 1.0).unwrap(), d);
        assert!(matches!(breadcrumbs_mask(&d, 0.3, 0.9), Err(Error::Config(_))));
    }

    #[test]
    fn breadcrumbs_without_masking_is_task_arithmetic() {
        let pre = [0.0f32, 1.0, 2.0];
        let a = [0.5f32, 1.5, 1.0];
        let b = [-0.5f32, 3.0, 2.25];
        assert_eq!(
            breadcrumbs_merge(&pre, &[&a, &b], 0.0, 1.0, 0.7).unwrap(),
            task_arithmetic(&pre, &[&a, &b], 0.7).unwrap()
        );
    }

    #[test]
    fn magnitude_prune_examples() {
        let d = [1.0f32, -5.0, 2.0, 0.5];
        assert_eq!(magnitude_prune(&d, 0.0).unwrap(), d.to_vec());
        assert_eq!(magnitude_prune(&d, 0.5).unwrap(), vec![0.0, -5.0, 2.0, 0.0]);
        assert!(magnitude_prune(&d, 1.0).is_err());
    }

    #[test]
    fn dare_identity_and_range() {
        let d = [1.0f32, -2.0, 3.0];
        assert_eq!(dare_sparsify_seeded(&d, 0.0, 1).unwrap(), d.to_vec());
        assert!(matches!(dare_sparsify_seeded(&d, 1.0, 1), Err(Error::Config(_))));
        let out = dare_sparsify_seeded(&d, 0.5, 9).unwrap();
        for (o, v) in out.iter().zip(&d) {
            assert!(*o == 0.0 || *o == 2.0 * v);
        }
    }

    #[test]
    fn dare_mean_converges() {
        let len = 100;
        let draws = 10_000;
        let p = 0.5;
        let d: Vec<f32> = (0..len).map(|i| ((i as f32) * 0.37).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut sum = vec![0.0f64; len];
        for _ in 0..draws {
            for (s, v) in sum.iter_mut().zip(dare_sparsify(&d, p, &mut rng).unwrap()) {
                *s += f64::from(v);
            }
        }
        // Entry-averaged mean against its standard error.
        let empirical: f64 = sum.iter().sum::<f64>() / (draws * len) as f64;
        let truth: f64 = d.iter().map(|&v| f64::from(v)).sum::<f64>() / len as f64;
        let var_one_draw: f64 = d
            .iter()
            .map(|&v| f64::from(v).powi(2) * p / (1.0 - p))
            .sum::<f64>()
            / (len * len) as f64;
        let se = (var_one_draw / draws as f64).sqrt();
        assert!((empirical - truth).abs() <= 3.0 * se, "{empirical} vs {truth} (se {se})");
    }

    #[test]
    fn tensor_seed_is_stable_and_name_sensitive() {
        assert_eq!(tensor_seed(1, "a"), tensor_seed(1, "a"));
        assert_ne!(tensor_seed(1, "a"), tensor_seed(1, "b"));
        assert_ne!(tensor_seed(1, "a"), tensor_seed(2, "a"));
    }

    /// Brute-force TIES: for each entry, enumerate contributors directly.
    fn ties_bounds(pre: &[f32], trimmed: &[Vec<f32>], lambda: f64, i: usize) -> Option<(f64, f64)> {
        let vals: Vec<f64> = trimmed.iter().map(|d| f64::from(d[i])).collect();
        let total: f64 = vals.iter().sum();
        if total == 0.0 {
            return None;
        }
        let agreeing: Vec<f64> = vals.into_iter().filter(|v| v * total > 0.0).collect();
        let lo = agreeing.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = agreeing.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let b = f64::from(pre[i]);
        let (x, y) = (b + lambda * lo, b + lambda * hi);
        Some((x.min(y), x.max(y)))
    }

    proptest! {
        #[test]
        fn ties_stays_within_agreeing_contributions(
            pre in prop::collection::vec(-1.0f32..1.0, 10),
            deltas in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 10), 1..4),
            keep in prop::sample::select(vec![0.5, 0.7, 0.9, 1.0]),
            lambda in prop::sample::select(vec![0.5, 1.0]),
        ) {
            let models: Vec<Vec<f32>> = deltas.iter()
                .map(|d| pre.iter().zip(d).map(|(a, b)| a + b).collect())
                .collect();
            let refs: Vec<&[f32]> = models.iter().map(Vec::as_slice).collect();
            let out = ties_merge(&pre, &refs, keep, lambda).unwrap();
            let trimmed: Vec<Vec<f32>> = models.iter()
                .map(|m| trim_to_top(&delta(m, &pre), keep).unwrap())
                .collect();
            for i in 0..pre.len() {
                match ties_bounds(&pre, &trimmed, lambda, i) {
                    None => prop_assert_eq!(out[i], pre[i]),
                    Some((lo, hi)) => {
                        let v = f64::from(out[i]);
                        prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                    }
                }
            }
        }

        #[test]
        fn slerp_preserves_unit_norm(
            a in prop::collection::vec(-1.0f32..1.0, 6),
            b in prop::collection::vec(-1.0f32..1.0, 6),
            phi in 0.0f64..1.0,
        ) {
            let norm = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ua: Vec<f32> = a.iter().map(|x| (f64::from(*x) / norm(&a)) as f32).collect();
            let ub: Vec<f32> = b.iter().map(|x| (f64::from(*x) / norm(&b)) as f32).collect();
            let cos: f64 = ua.iter().zip(&ub).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
            // The linear fallback only kicks in for (anti)colinear inputs.
            prop_assume!(cos.abs() < 0.999);
            let out = slerp_merge(&[&ua, &ub], phi).unwrap();
            prop_assert!((norm(&out) - 1.0).abs() <= 1e-5);
        }

        #[test]
        fn every_baseline_is_idempotent_on_backbone(
            pre in prop::collection::vec(-3.0f32..3.0, 1..20),
            n in 2usize..4,
        ) {
            let refs: Vec<&[f32]> = std::iter::repeat_n(pre.as_slice(), n).collect();
            prop_assert_eq!(&average_merge(&pre, &refs).unwrap(), &pre);
            prop_assert_eq!(&task_arithmetic(&pre, &refs, 0.5).unwrap(), &pre);
            prop_assert_eq!(&slerp_merge(&refs[..2], 0.3).unwrap(), &pre);
            prop_assert_eq!(&model_stock(&pre, &refs).unwrap(), &pre);
            prop_assert_eq!(&ties_merge(&pre, &refs, 0.7, 1.0).unwrap(), &pre);
            prop_assert_eq!(&breadcrumbs_merge(&pre, &refs, 0.05, 0.9, 1.0).unwrap(), &pre);
            prop_assert_eq!(&dare_task_arithmetic(&pre, &refs, 1.0, 0.9, 3).unwrap(), &pre);
            prop_assert_eq!(&magnitude_prune_task_arithmetic(&pre, &refs, 1.0, 0.5).unwrap(), &pre);
        }
    }
}
