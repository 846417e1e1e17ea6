//! Dense row-major kernels.
//!
//! Everything is `f32` in storage; dot products accumulate in `f64` and are
//! evaluated in a fixed left-to-right order so that a given output element
//! depends only on its own input row and column. The forward pass relies on
//! that property for bit-exact cache/no-cache and pruning no-op checks.

use crate::error::{shape_err, Result};

/// Norm floor below which a cosine similarity is reported as undefined.
pub const COSINE_EPS: f64 = 1e-12;

/// Row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Tensor2D::from_vec",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(shape_err(
                    "Tensor2D::from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(shape_err(
                "Tensor2D::push_row",
                format!("row of {} into {} columns", row.len(), self.cols),
            ));
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// New tensor made of the listed rows, in the listed order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..start + width` as a new tensor.
    pub fn col_slice(&self, start: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Multiply-accumulate counter. Only matmuls and elementwise products are
/// counted; softmax, normalization and activations are not.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounter {
    mul_adds: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, n: u64) {
        self.mul_adds += n;
    }

    pub fn mul_adds(&self) -> u64 {
        self.mul_adds
    }

    pub fn reset(&mut self) {
        self.mul_adds = 0;
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // fixed lane split: vectorizes and keeps a platform-independent order
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += xa[i] as f64 * xb[i] as f64;
        }
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

/// `a[m×k] · b[k×n]`, counting `m·k·n` mul-adds.
pub fn matmul(a: &Tensor2D, b: &Tensor2D, counter: &mut OpCounter) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(shape_err(
            "matmul",
            format!("{}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let bt = b.transpose();
    let mut out = Tensor2D::zeros(m, n);
    for i in 0..m {
        let ar = a.row(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(ar, &bt.data[j * k..(j + 1) * k]) as f32;
        }
    }
    counter.add((m * k * n) as u64);
    Ok(out)
}

/// Row vector times matrix: `x[k] · b[k×n]`.
pub fn vecmat(x: &[f32], b: &Tensor2D, counter: &mut OpCounter) -> Result<Vec<f32>> {
    if x.len() != b.rows {
        return Err(shape_err(
            "vecmat",
            format!("vector of {} by {}x{}", x.len(), b.rows, b.cols),
        ));
    }
    let mut acc = vec![0.0f64; b.cols];
    for (r, &xv) in x.iter().enumerate() {
        let xv = xv as f64;
        for (a, &bv) in acc.iter_mut().zip(b.row(r)) {
            *a += xv * bv as f64;
        }
    }
    counter.add((b.rows * b.cols) as u64);
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(crate::CapaError::InvalidArgument(
            "softmax of an empty vector".into(),
        ));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = v.iter().map(|&x| ((x - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / sum) as f32).collect())
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`; `None` when either vector has
/// norm below [`COSINE_EPS`].
pub fn cosine_sim(x: &[f32], y: &[f32]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(shape_err(
            "cosine_sim",
            format!("lengths {} and {}", x.len(), y.len()),
        ));
    }
    let (sxx, syy) = (dot(x, x), dot(y, y));
    if sxx.sqrt() < COSINE_EPS || syy.sqrt() < COSINE_EPS {
        return Ok(None);
    }
    // One square root of the product keeps cos(x, x) at exactly 1.
    Ok(Some((dot(x, y) / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// RMS normalization with a learned per-dimension scale.
pub fn rms_norm(x: &[f32], scale: &[f32], eps: f64) -> Vec<f32> {
    let ms = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter()
        .zip(scale)
        .map(|(&v, &s)| (v as f64 * inv * s as f64) as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f32]]) -> Tensor2D {
        Tensor2D::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = t(&[&[1.5, -2.0], &[0.25, 4.0]]);
        let mut c = OpCounter::new();
        assert_eq!(matmul(&Tensor2D::identity(2), &b, &mut c).unwrap(), b);
        let z = matmul(
            &Tensor2D::zeros(2, 3),
            &Tensor2D::from_vec(3, 4, vec![7.0; 12]).unwrap(),
            &mut c,
        )
        .unwrap();
        assert_eq!(z, Tensor2D::zeros(2, 4));
    }

    #[test]
    fn matmul_worked_example() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0], &[6.0]]);
        let mut c = OpCounter::new();
        let out = matmul(&a, &b, &mut c).unwrap();
        assert_eq!(out.data(), &[17.0, 39.0]);
        assert_eq!(c.mul_adds(), 4);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut c = OpCounter::new();
        assert!(matmul(&Tensor2D::zeros(2, 3), &Tensor2D::zeros(2, 3), &mut c).is_err());
        assert_eq!(c.mul_adds(), 0);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let c = 3.7f32;
        let p = softmax(&[c, c + std::f32::consts::LN_2]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-6);

        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-7 && p[1] < 1e-7);

        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn norm_and_cosine_examples() {
        assert_eq!(l2_norm(&[0.0; 5]), 0.0);
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), Some(0.0));
        let s = cosine_sim(&[1.0, 1.0], &[2.0, 2.0]).unwrap().unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), None);
        assert!(cosine_sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn l2_norm_matches_direct_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let v: Vec<f32> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut s = 0.0f64;
            for x in &v {
                s += (*x as f64).powi(2);
            }
            let oracle = s.sqrt();
            assert!((l2_norm(&v) - oracle).abs() <= 1e-6 * oracle);
        }
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2D> {
        prop::collection::vec(-2.0f32..2.0, rows * cols)
            .prop_map(move |d| Tensor2D::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in mat(3, 4), b in mat(4, 5), c in mat(5, 2)) {
            let mut k = OpCounter::new();
            let left = matmul(&matmul(&a, &b, &mut k).unwrap(), &c, &mut k).unwrap();
            let right = matmul(&a, &matmul(&b, &c, &mut k).unwrap(), &mut k).unwrap();
            let scale = left.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() <= 1e-4 * scale);
            }
        }

        #[test]
        fn matmul_counts_exactly(m in 1usize..6, k in 1usize..6, n in 1usize..6) {
            let mut c = OpCounter::new();
            matmul(&Tensor2D::zeros(m, k), &Tensor2D::zeros(k, n), &mut c).unwrap();
            prop_assert_eq!(c.mul_adds(), (m * k * n) as u64);
        }

        #[test]
        fn softmax_normalized_and_shift_invariant(
            grid in prop::collection::vec(-1280i32..1280, 1..32),
            shift in -50i32..50,
        ) {
            // Multiples of 1/64 so adding an integer shift is exact in f32.
            let v: Vec<f32> = grid.iter().map(|&g| g as f32 / 64.0).collect();
            let shift = shift as f32;
            let p = softmax(&v).unwrap();
            let sum: f64 = p.iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f32> = v.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn cosine_symmetric_and_bounded(
            x in prop::collection::vec(-5.0f32..5.0, 8),
            y in prop::collection::vec(-5.0f32..5.0, 8),
        ) {
            let a = cosine_sim(&x, &y).unwrap();
            let b = cosine_sim(&y, &x).unwrap();
            prop_assert_eq!(a, b);
            if let Some(s) = a {
                prop_assert!(s.abs() <= 1.0);
            }
            if let Some(s) = cosine_sim(&x, &x).unwrap() {
                prop_assert_eq!(s, 1.0);
            }
        }
    }
}
