//! Dense kernels shared by every merge method.
//!
//! Matrices are stored row-major in `f32`. Anything that reduces over a
//! column (norms, dot products, cosines) accumulates in `f64` and returns
//! `f64` row vectors, since checkpoint deltas are often four orders of
//! magnitude smaller than the weights they perturb.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose norm is at or below this are treated as all-zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// The `l_c` norm applied to each column during disentanglement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NormOrder {
    L1,
    #[default]
    L2,
}

impl TryFrom<u8> for NormOrder {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, Self::Error> {
        match value {
            1 => Ok(NormOrder::L1),
            2 => Ok(NormOrder::L2),
            other => Err(format!("norm order must be 1 or 2, got {other}")),
        }
    }
}

impl From<NormOrder> for u8 {
    fn from(value: NormOrder) -> Self {
        match value {
            NormOrder::L1 => 1,
            NormOrder::L2 => 2,
        }
    }
}

/// Row-major `rows × cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidTensor(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidTensor(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().skip(col).step_by(self.cols).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidTensor("matrix contains NaN or infinity".into()))
        }
    }

    pub(crate) fn ensure_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )))
        }
    }
}

/// An `N × k` table of per-model, per-column scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    models: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let models = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if models == 0 || cols == 0 {
            return Err(Error::EmptyInput("score table needs at least one row and column".into()));
        }
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("score rows differ in length".into()));
        }
        Ok(Self {
            models,
            cols,
            data: rows.concat(),
        })
    }

    pub fn filled(models: usize, cols: usize, value: f64) -> Self {
        Self {
            models,
            cols,
            data: vec![value; models * cols],
        }
    }

    pub fn models(&self) -> usize {
        self.models
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, model: usize, col: usize) -> f64 {
        self.data[model * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, model: usize, col: usize, value: f64) {
        self.data[model * self.cols + col] = value;
    }

    pub fn row(&self, model: usize) -> &[f64] {
        &self.data[model * self.cols..(model + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn column_sum(&self, col: usize) -> f64 {
        (0..self.models).map(|n| self.get(n, col)).sum()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Per-column `l_c` norms.
pub fn column_norms(w: &Matrix, order: NormOrder) -> Result<Vec<f64>> {
    w.ensure_finite()?;
    let mut acc = vec![0.0f64; w.cols];
    for row in w.data.chunks_exact(w.cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            let v = f64::from(v);
            *a += match order {
                NormOrder::L1 => v.abs(),
                NormOrder::L2 => v * v,
            };
        }
    }
    if order == NormOrder::L2 {
        acc.iter_mut().for_each(|a| *a = a.sqrt());
    }
    Ok(acc)
}

/// A weight split into per-column magnitudes and unit-norm direction columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledWeight {
    pub magnitudes: Vec<f64>,
    pub directions: Matrix,
}

impl DisentangledWeight {
    /// `m ⊙ D`, which reproduces the original weight for every non-zero column.
    pub fn recompose(&self) -> Matrix {
        let mut out = self.directions.clone();
        let cols = out.cols;
        for row in out.data.chunks_exact_mut(cols) {
            for (v, &m) in row.iter_mut().zip(&self.magnitudes) {
                *v = (f64::from(*v) * m) as f32;
            }
        }
        out
    }
}

/// Splits `w` into magnitudes `m` and directions `D` with `W = m ⊙ D`.
///
/// Columns with norm at or below [`ZERO_NORM_EPS`] get an all-zero direction.
pub fn normalize_columns(w: &Matrix, order: NormOrder) -> Result<DisentangledWeight> {
    let magnitudes = column_norms(w, order)?;
    let mut directions = w.clone();
    let cols = w.cols;
    for row in directions.data.chunks_exact_mut(cols) {
        for (v, &m) in row.iter_mut().zip(&magnitudes) {
            *v = if m > ZERO_NORM_EPS {
                (f64::from(*v) / m) as f32
            } else {
                0.0
            };
        }
    }
    Ok(DisentangledWeight {
        magnitudes,
        directions,
    })
}

/// Cosine similarity of matching columns of `a` and `b`.
///
/// A column pair where either side has l2 norm at or below [`ZERO_NORM_EPS`]
/// scores 1, i.e. "direction unchanged".
pub fn column_cosine_similarity(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    a.ensure_same_shape(b)?;
    a.ensure_finite()?;
    b.ensure_finite()?;
    let cols = a.cols;
    let mut dot = vec![0.0f64; cols];
    let mut na = vec![0.0f64; cols];
    let mut nb = vec![0.0f64; cols];
    for (ra, rb) in a.data.chunks_exact(cols).zip(b.data.chunks_exact(cols)) {
        for j in 0..cols {
            let x = f64::from(ra[j]);
            let y = f64::from(rb[j]);
            dot[j] += x * y;
            na[j] += x * x;
            nb[j] += y * y;
        }
    }
    Ok((0..cols)
        .map(|j| {
            let (na, nb) = (na[j].sqrt(), nb[j].sqrt());
            if na <= ZERO_NORM_EPS || nb <= ZERO_NORM_EPS {
                1.0
            } else {
                (dot[j] / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// Indices of `v` in ascending order of value; equal values keep index order.
pub(crate) fn ascending_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

/// Replaces each value by its ascending rank scaled into `{1/k, 2/k, ..., 1}`.
///
/// Ties are ordered by position, so the output is always a permutation.
pub fn ascending_rank_normalize(v: &[f64]) -> Vec<f64> {
    let k = v.len();
    let mut out = vec![0.0; k];
    for (pos, idx) in ascending_order(v).into_iter().enumerate() {
        out[idx] = (pos + 1) as f64 / k as f64;
    }
    out
}

/// Affine map of `v` onto `[0, 1]`. A constant input maps to all `0.5`.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![0.5; v.len()];
    }
    v.iter().map(|&x| (x - lo) / range).collect()
}

/// Softmax down each column of an `N × k` table (across models).
pub fn softmax_over_models(scores: &ScoreTable) -> ScoreTable {
    let mut out = scores.clone();
    for j in 0..scores.cols {
        let max = (0..scores.models)
            .map(|n| scores.get(n, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for n in 0..scores.models {
            let e = (scores.get(n, j) - max).exp();
            out.set(n, j, e);
            total += e;
        }
        for n in 0..scores.models {
            out.set(n, j, out.get(n, j) / total);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn norms_of_345_column_and_zero_column() {
        let w = Matrix::from_rows(&[&[3.0, 0.0], &[4.0, 0.0]]).unwrap();
        assert_eq!(column_norms(&w, NormOrder::L2).unwrap(), vec![5.0, 0.0]);
        assert_eq!(column_norms(&w, NormOrder::L1).unwrap(), vec![7.0, 0.0]);
        let eye = Matrix::identity(2);
        assert_eq!(column_norms(&eye, NormOrder::L2).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn norms_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_matrix(&mut rng, 4, 3);
        let got = column_norms(&w, NormOrder::L2).unwrap();
        for (j, norm) in got.iter().enumerate() {
            let mut s = 0.0f64;
            for i in 0..4 {
                s += f64::from(w.get(i, j)).powi(2);
            }
            assert!((norm - s.sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let w = Matrix::from_rows(&[&[f32::NAN, 1.0]]).unwrap();
        assert!(matches!(
            column_norms(&w, NormOrder::L2),
            Err(Error::InvalidTensor(_))
        ));
        assert!(normalize_columns(&w, NormOrder::L2).is_err());
    }

    #[test]
    fn disentangle_345_and_identity() {
        let w = Matrix::from_rows(&[&[3.0, 0.0], &[4.0, 0.0]]).unwrap();
        let d = normalize_columns(&w, NormOrder::L2).unwrap();
        assert_eq!(d.magnitudes, vec![5.0, 0.0]);
        assert_eq!(d.directions.as_slice(), &[0.6, 0.0, 0.8, 0.0]);

        let eye = Matrix::identity(2);
        let d = normalize_columns(&eye, NormOrder::L2).unwrap();
        assert_eq!(d.magnitudes, vec![1.0, 1.0]);
        assert_eq!(d.directions, eye);
    }

    #[test]
    fn disentangle_reconstructs_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_matrix(&mut rng, 5, 4);
        let back = normalize_columns(&w, NormOrder::L2).unwrap().recompose();
        let err = w
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1e-6, "reconstruction error {err}");
    }

    #[test]
    fn cosine_identity_antipodal_orthogonal() {
        let a = Matrix::from_rows(&[&[1.0, 1.0, 2.0], &[0.0, 2.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0, -1.0, 0.0], &[0.0, -2.0, 1.0]]).unwrap();
        let cos = column_cosine_similarity(&a, &b).unwrap();
        assert!((cos[0] - 1.0).abs() < 1e-12);
        assert!((cos[1] + 1.0).abs() < 1e-12);
        assert!(cos[2].abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_column_counts_as_unchanged() {
        let a = Matrix::from_rows(&[&[0.0], &[0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0], &[2.0]]).unwrap();
        assert_eq!(column_cosine_similarity(&a, &b).unwrap(), vec![1.0]);
    }

    #[test]
    fn cosine_shape_mismatch() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            column_cosine_similarity(&a, &b),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// Sort-and-index reference: for each position, count how many entries
    /// come before it in (value, index) order.
    fn rank_oracle(v: &[f64]) -> Vec<f64> {
        let k = v.len();
        (0..k)
            .map(|a| {
                let before = (0..k)
                    .filter(|&b| v[b] < v[a] || (v[b] == v[a] && b < a))
                    .count();
                (before + 1) as f64 / k as f64
            })
            .collect()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(
            ascending_rank_normalize(&[0.3, 0.1, 0.2]),
            vec![1.0, 1.0 / 3.0, 2.0 / 3.0]
        );
        assert_eq!(rank_oracle(&[0.3, 0.1, 0.2]), vec![1.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(ascending_rank_normalize(&[5.0, 7.0]), vec![0.5, 1.0]);
        assert_eq!(
            ascending_rank_normalize(&[0.0, 0.0, 0.0]),
            vec![1.0 / 3.0, 2.0 / 3.0, 1.0]
        );
    }

    #[test]
    fn min_max_examples() {
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max_normalize(&[4.0, 4.0]), vec![0.5, 0.5]);
        assert_eq!(min_max_normalize(&[-1.0, 1.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let t = ScoreTable::from_rows(vec![vec![0.3, 0.0], vec![0.3, 1.0]]).unwrap();
        let s = softmax_over_models(&t);
        assert_eq!(s.get(0, 0), 0.5);
        assert_eq!(s.get(1, 0), 0.5);
        let e = std::f64::consts::E;
        assert!((s.get(0, 1) - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((s.get(1, 1) - e / (1.0 + e)).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.26894).abs() < 1e-5);

        let single = ScoreTable::from_rows(vec![vec![0.2, 0.9, -3.0]]).unwrap();
        assert!(softmax_over_models(&single).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn norm_order_serde() {
        let o: NormOrder = serde_json::from_str("1").unwrap();
        assert_eq!(o, NormOrder::L1);
        assert!(serde_json::from_str::<NormOrder>("3").is_err());
    }

    proptest! {
        #[test]
        fn rank_matches_oracle_and_is_permutation(v in prop::collection::vec(-3i32..3, 1..40)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let got = ascending_rank_normalize(&v);
            prop_assert_eq!(&got, &rank_oracle(&v));
            let k = v.len();
            let mut sorted = got.clone();
            sorted.sort_by(f64::total_cmp);
            let expected: Vec<f64> = (1..=k).map(|j| j as f64 / k as f64).collect();
            prop_assert_eq!(sorted, expected);
        }

        #[test]
        fn softmax_columns_sum_to_one_and_shift_invariant(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..5),
            shift in -10.0f64..10.0,
        ) {
            let t = ScoreTable::from_rows(rows.clone()).unwrap();
            let s = softmax_over_models(&t);
            for j in 0..t.cols() {
                prop_assert!((s.column_sum(j) - 1.0).abs() <= 1e-6);
            }
            let shifted = ScoreTable::from_rows(
                rows.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect(),
            ).unwrap();
            let s2 = softmax_over_models(&shifted);
            for (a, b) in s.values().iter().zip(s2.values()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-1.0f32..1.0, 12),
            b in prop::collection::vec(-1.0f32..1.0, 12),
            alpha in 0.1f32..10.0,
            beta in 0.1f32..10.0,
        ) {
            let ma = Matrix::new(3, 4, a.clone()).unwrap();
            let mb = Matrix::new(3, 4, b.clone()).unwrap();
            let ab = column_cosine_similarity(&ma, &mb).unwrap();
            let ba = column_cosine_similarity(&mb, &ma).unwrap();
            prop_assert_eq!(&ab, &ba);
            let sa = Matrix::new(3, 4, a.iter().map(|x| x * alpha).collect()).unwrap();
            let sb = Matrix::new(3, 4, b.iter().map(|x| x * beta).collect()).unwrap();
            let scaled = column_cosine_similarity(&sa, &sb).unwrap();
            for (x, y) in ab.iter().zip(&scaled) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }

        #[test]
        fn disentangle_unit_columns(data in prop::collection::vec(-4.0f32..4.0, 20)) {
            let w = Matrix::new(5, 4, data).unwrap();
            let d = normalize_columns(&w, NormOrder::L2).unwrap();
            let norms = column_norms(&d.directions, NormOrder::L2).unwrap();
            for (j, n) in norms.iter().enumerate() {
                if d.magnitudes[j] > ZERO_NORM_EPS {
                    prop_assert!((n - 1.0).abs() <= 1e-6);
                }
            }
        }
    }
}
