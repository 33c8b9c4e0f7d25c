//! Dense row-major matrices, the float-width abstraction, a splittable
//! deterministic RNG, and the stable softmax/log-softmax kernels everything
//! else is built on. No BLAS: plain loops are fast enough at the scales the
//! rest of the crate targets, and they keep results reproducible.

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt;

/// Float width selected for an engine run. Training defaults to `F32`;
/// gradient checking runs the whole engine in `F64` because central
/// finite differences cannot reach the required agreement in single
/// precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Usage(format!(
                "unknown precision '{other}', expected f32 or f64"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

/// Element type the engine is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + num_traits::NumAssignOps + Send + Sync + fmt::Debug + fmt::Display + Default + 'static
{
    const PRECISION: Precision;
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode from exactly `BYTE_WIDTH` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Counter-based pseudo-random generator (SplitMix64). Implemented in-repo so
/// the same seed reproduces the same stream on every platform, independent of
/// any external library's stream changes.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(SPLITMIX_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform<F: Scalar>(&mut self, lo: F, hi: F) -> F {
        lo + (hi - lo) * F::from_f64(self.next_f64())
    }

    /// Uniform in 0..n without modulo bias.
    pub fn gen_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_range needs a non-empty range");
        let n64 = n as u64;
        let bucket = u64::MAX / n64;
        let cap = bucket * n64;
        loop {
            let v = self.next_u64();
            if v < cap {
                return (v / bucket) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.gen_range(i + 1);
            xs.swap(i, j);
        }
    }

    /// Derive an independently-seeded generator from this stream.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<F>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Argument(format!(
                    "ragged matrix rows: row 0 has {c} columns, row {i} has {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    /// Matrix with entries drawn uniformly from [lo, hi), filled row by row.
    pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: F, hi: F) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.uniform(lo, hi);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut F {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn matmul(&self, rhs: &Matrix<F>) -> Result<Matrix<F>> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape_str(),
                rhs: rhs.shape_str(),
            });
        }
        let mut out: Matrix<F> = Matrix::zeros(self.rows, rhs.cols);
        // i-k-j order keeps the inner loop contiguous in both rhs and out.
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == F::zero() {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = out.row_mut(i);
                for j in 0..rrow.len() {
                    orow[j] += a * rrow[j];
                }
            }
        }
        debug_assert!(out.data.iter().all(|v| v.is_finite()));
        Ok(out)
    }

    pub fn matvec(&self, x: &[F]) -> Result<Vec<F>> {
        if self.cols != x.len() {
            return Err(Error::Shape {
                op: "matvec",
                lhs: self.shape_str(),
                rhs: format!("{}", x.len()),
            });
        }
        let mut out = vec![F::zero(); self.rows];
        self.matvec_acc(x, &mut out);
        Ok(out)
    }

    /// out += self * x. Dimensions are checked by debug assertions only: this
    /// sits on the training hot path and every caller validates shapes first.
    pub fn matvec_acc(&self, x: &[F], out: &mut [F]) {
        debug_assert_eq!(self.cols, x.len());
        debug_assert_eq!(self.rows, out.len());
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// out += transpose(self) * g, accumulated row by row so every inner loop
    /// walks contiguous memory.
    pub fn tr_matvec_acc(&self, g: &[F], out: &mut [F]) {
        debug_assert_eq!(self.rows, g.len());
        debug_assert_eq!(self.cols, out.len());
        for (r, &gr) in g.iter().enumerate() {
            if gr == F::zero() {
                continue;
            }
            axpy(out, gr, self.row(r));
        }
    }

    /// self += g (outer) x, the rank-one gradient update for weight matrices.
    pub fn outer_acc(&mut self, g: &[F], x: &[F]) {
        debug_assert_eq!(self.rows, g.len());
        debug_assert_eq!(self.cols, x.len());
        for (r, &gr) in g.iter().enumerate() {
            if gr == F::zero() {
                continue;
            }
            axpy(self.row_mut(r), gr, x);
        }
    }

    pub fn add(&self, rhs: &Matrix<F>) -> Result<Matrix<F>> {
        self.zip_with(rhs, "elementwise add", |a, b| a + b)
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, rhs: &Matrix<F>) -> Result<Matrix<F>> {
        self.zip_with(rhs, "elementwise mul", |a, b| a * b)
    }

    pub fn sigmoid(&self) -> Matrix<F> {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Matrix<F> {
        self.map(|v| v.tanh())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Matrix<F> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, rhs: &Matrix<F>, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Matrix<F>> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Shape {
                op,
                lhs: self.shape_str(),
                rhs: rhs.shape_str(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// self += a * rhs, used by the SGD update.
    pub fn axpy_mat(&mut self, a: F, rhs: &Matrix<F>) -> Result<()> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Shape {
                op: "axpy",
                lhs: self.shape_str(),
                rhs: rhs.shape_str(),
            });
        }
        axpy(&mut self.data, a, &rhs.data);
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| v.to_f64() * v.to_f64()).sum()
    }
}

/// A fixed-order collection of parameter tensors. Generic code that walks
/// every parameter of a container (SGD updates, serialization, finite
/// differences) goes through this instead of knowing the field layout.
pub trait TensorSet<F: Scalar> {
    fn tensor_count(&self) -> usize;
    fn tensor_at(&self, idx: usize) -> &[F];
    fn tensor_at_mut(&mut self, idx: usize) -> &mut [F];

    fn param_count(&self) -> usize {
        (0..self.tensor_count()).map(|i| self.tensor_at(i).len()).sum()
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Dot product with four independent accumulators; the fixed reassociation
/// keeps results deterministic while letting the compiler vectorize.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc0 = F::zero();
    let mut acc1 = F::zero();
    let mut acc2 = F::zero();
    let mut acc3 = F::zero();
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        acc0 += xa[0] * xb[0];
        acc1 += xa[1] * xb[1];
        acc2 += xa[2] * xb[2];
        acc3 += xa[3] * xb[3];
    }
    let mut tail = F::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc0 + acc1) + (acc2 + acc3) + tail
}

/// y += a * x.
#[inline]
pub fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn vec_add<F: Scalar>(a: &[F], b: &[F]) -> Result<Vec<F>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "vector add",
            lhs: format!("{}", a.len()),
            rhs: format!("{}", b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x + y).collect())
}

pub fn vec_mul<F: Scalar>(a: &[F], b: &[F]) -> Result<Vec<F>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "vector mul",
            lhs: format!("{}", a.len()),
            rhs: format!("{}", b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x * y).collect())
}

pub fn vec_sigmoid<F: Scalar>(a: &[F]) -> Vec<F> {
    a.iter().map(|&v| sigmoid(v)).collect()
}

pub fn vec_tanh<F: Scalar>(a: &[F]) -> Vec<F> {
    a.iter().map(|&v| v.tanh()).collect()
}

/// Log-softmax with max-shift; the exp sum and log run in f64 regardless of
/// the storage width, which keeps f32 runs stable for logits up to ~1e4.
pub fn log_softmax<F: Scalar>(logits: &[F]) -> Result<Vec<F>> {
    if logits.is_empty() {
        return Err(Error::Argument("log_softmax of an empty vector".into()));
    }
    let max = logits
        .iter()
        .fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
    if !max.is_finite() {
        return Err(Error::Numeric("non-finite logits in log_softmax".into()));
    }
    let mut sum = 0.0f64;
    for &v in logits {
        sum += (v - max).to_f64().exp();
    }
    let ln_sum = F::from_f64(sum.ln());
    Ok(logits.iter().map(|&v| v - max - ln_sum).collect())
}

/// Probabilities from a log-probability vector.
pub fn softmax_from_log<F: Scalar>(log_probs: &[F]) -> Vec<F> {
    log_probs.iter().map(|&v| v.exp()).collect()
}
