//! Dense row-major matrices, stable softmax primitives and the seeded
//! random source every other module draws from.
//!
//! Everything is `f64`. Matrix products go through `matrixmultiply`'s
//! packed GEMM; transposed operands are expressed through strides so
//! backpropagation never materializes a transpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a 0-column matrix has no meaningful rows anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Adds `bias[c]` to every entry of column `c`.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias of length {} against {} columns",
                bias.len(),
                self.cols
            )));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        self.row_iter().map(argmax).collect()
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
) -> Matrix {
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: the strides describe in-bounds layouts of `a` (m×k) and `b`
    // (k×n) checked by the callers, and `out` is a fresh m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(gemm(
        a.rows,
        a.cols,
        b.cols,
        &a.data,
        (a.cols as isize, 1),
        &b.data,
        (b.cols as isize, 1),
    ))
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn of ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(gemm(
        a.cols,
        a.rows,
        b.cols,
        &a.data,
        (1, a.cols as isize),
        &b.data,
        (b.cols as isize, 1),
    ))
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt of {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(gemm(
        a.rows,
        a.cols,
        b.rows,
        &a.data,
        (a.cols as isize, 1),
        &b.data,
        (1, b.cols as isize),
    ))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what}: entry {i} is {}",
            values[i]
        )));
    }
    Ok(())
}

/// `log Σ exp(v)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Shape("log_sum_exp of an empty vector".into()));
    }
    check_finite(values, "log_sum_exp")?;
    Ok(log_sum_exp_unchecked(values))
}

/// Tolerates `-inf` entries; callers guarantee at least one finite value.
pub(crate) fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits, "softmax")?;
    let mut out = logits.to_vec();
    softmax_inplace(&mut out);
    Ok(out)
}

/// In-place softmax; inputs must be finite.
pub(crate) fn softmax_inplace(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax(logits)`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits, "log_softmax")?;
    let lse = log_sum_exp_unchecked(logits);
    Ok(logits.iter().map(|v| v - lse).collect())
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Matrix, temperature: f64) -> Result<Matrix> {
    check_finite(logits.as_slice(), "softmax_rows")?;
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(logits.cols.max(1)) {
        for v in row.iter_mut() {
            *v /= temperature;
        }
        softmax_inplace(row);
    }
    Ok(out)
}

/// Seed plus stream identifier of a ChaCha8 generator.
///
/// Child streams are derived from the parent's identity and a list of tags
/// (epoch, batch, purpose, ...) so the draws a component sees do not depend
/// on how much randomness any other component consumed before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, stream_id: 0 }
    }

    /// Derives an independent child stream keyed by `tags`.
    pub fn split(&self, tags: &[u64]) -> RngState {
        let mut h = splitmix64(self.stream_id ^ 0x5bd1_e995_7f4a_7c15);
        for &t in tags {
            h = splitmix64(h ^ splitmix64(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        RngState {
            seed: self.seed,
            stream_id: h,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream purposes, used as the first tag when splitting.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const DATA: u64 = 6;
    pub const MI_MEAN: u64 = 7;
    pub const MI_FRESH: u64 = 8;
    pub const SELECT: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn assert_close_rel(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / scale <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn identity_times_m_is_m() {
        let mut rng = RngState::new(3).rng();
        let m = random(3, 4, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn hand_expanded_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn five_by_seven_against_triple_loop() {
        let mut rng = RngState::new(11).rng();
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        assert_close_rel(&matmul(&a, &b).unwrap(), &naive(&a, &b), 1e-12);
    }

    #[test]
    fn hundred_random_shapes_against_triple_loop() {
        let mut rng = RngState::new(12).rng();
        for _ in 0..100 {
            let (m, k, n) = (
                rng.gen_range(1..40),
                rng.gen_range(1..40),
                rng.gen_range(1..40),
            );
            let a = random(m, k, &mut rng);
            let b = random(k, n, &mut rng);
            let want = naive(&a, &b);
            assert_close_rel(&matmul(&a, &b).unwrap(), &want, 1e-12);
            assert_close_rel(&matmul_tn(&a.transpose(), &b).unwrap(), &want, 1e-12);
            assert_close_rel(&matmul_nt(&a, &b.transpose()).unwrap(), &want, 1e-12);
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
        assert!(matches!(matmul_tn(&a, &Matrix::zeros(3, 1)), Err(Error::Shape(_))));
        assert!(matches!(matmul_nt(&a, &Matrix::zeros(2, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_and_overflow() {
        let p = softmax_stable(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_stable(&[1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        assert!(matches!(
            softmax_stable(&[f64::NAN, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn log_sum_exp_identities() {
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        let a = 3.25;
        assert!((log_sum_exp(&[a, a]).unwrap() - (a + 2f64.ln())).abs() < 1e-15);
        let v = log_sum_exp(&[-1000.0, -1000.0]).unwrap();
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(matches!(log_sum_exp(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn same_state_same_draws() {
        let s = RngState::new(42).split(&[purpose::DROPOUT, 3, 7]);
        let a: Vec<u64> = (0..16).map({
            let mut r = s.rng();
            move |_| r.gen()
        }).collect();
        let b: Vec<u64> = (0..16).map({
            let mut r = s.rng();
            move |_| r.gen()
        }).collect();
        assert_eq!(a, b);
        let other = RngState::new(42).split(&[purpose::DROPOUT, 3, 8]);
        assert_ne!(s, other);
        assert_ne!(other.rng().gen::<u64>(), a[0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-700.0f64..700.0, 1..20)) {
            let p = softmax_stable(&logits).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax_stable(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
            let q = softmax_stable(&shifted).unwrap();
            prop_assert_eq!(argmax(&p), argmax(&q));
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
