//! Dense kernels: a row-major matrix, the usual transformer building blocks,
//! and multi-head self-attention that also reports its head-averaged
//! attention map.
//!
//! Loop nests are fixed so that a given build produces bit-identical results
//! for identical inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EvadError, Result};
use crate::rng;
use crate::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EvadError::dim(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(EvadError::dim("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Convenience constructor for literals in tests and examples.
    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        let owned: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| T::lit(x)).collect())
            .collect();
        Self::from_rows(&owned)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics, and a zero-column matrix still has rows
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.iter_rows().map(<[T]>::to_vec).collect()
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

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|x| x * a)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(EvadError::dim(
                "add",
                format!("{:?} + {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    /// Gathers the given rows, in the given order.
    pub fn select_rows(&self, ids: &[usize]) -> Self {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &Self) -> Result<Self> {
        if self.cols != below.cols && self.rows > 0 && below.rows > 0 {
            return Err(EvadError::dim(
                "vstack",
                format!("{} vs {} columns", self.cols, below.cols),
            ));
        }
        let cols = if self.rows > 0 { self.cols } else { below.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&below.data);
        Ok(Matrix {
            rows: self.rows + below.rows,
            cols,
            data,
        })
    }

    /// Copies a column range `[start, start + width)`.
    pub fn col_block(&self, start: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }
}

/// Standard matrix product with an i-k-j loop nest.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(EvadError::dim(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
    out
}

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(0.044715) * x * x * x)).tanh())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Affine map `x W + b` with `W` stored as `d_in x d_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if weight.cols() != bias.len() {
            return Err(EvadError::dim(
                "linear",
                format!("weight {:?} with bias of {}", weight.shape(), bias.len()),
            ));
        }
        Ok(Linear { weight, bias })
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Matrix::zeros(d_in, d_out),
            bias: vec![T::zero(); d_out],
        }
    }

    pub fn random<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, scale: f64) -> Self {
        Linear {
            weight: rng::uniform_matrix(rng, d_in, d_out, scale),
            bias: rng::uniform_vec(rng, d_out, scale),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = matmul(x, &self.weight)?;
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o = *o + b;
            }
        }
        Ok(out)
    }
}

/// Per-row layer normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn unit(d: usize) -> Self {
        LayerNorm {
            gamma: vec![T::one(); d],
            beta: vec![T::zero(); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let d = x.cols();
        if d != self.gamma.len() || d != self.beta.len() {
            return Err(EvadError::dim(
                "layer_norm",
                format!("input width {d}, parameters {}", self.gamma.len()),
            ));
        }
        let n = T::lit(d as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for ((v, &g), &b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        Ok(out)
    }
}

/// Head-averaged post-softmax attention of one MHSA call; `N x N`,
/// row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats<T> {
    pub attn: Matrix<T>,
}

impl<T: Scalar> AttentionStats<T> {
    pub fn len(&self) -> usize {
        self.attn.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.attn.rows() == 0
    }

    /// Largest deviation of any row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        self.attn
            .iter_rows()
            .map(|r| (r.iter().copied().sum::<T>().as_f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Weights of one pre-norm transformer layer (MHSA followed by a 4x FFN).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub heads: usize,
    pub norm1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> LayerParams<T> {
    /// Seeded uniform weights and biases; layer norms start at unit scale and
    /// zero shift.
    pub fn random<R: Rng>(rng: &mut R, dim: usize, heads: usize, scale: f64) -> Self {
        LayerParams {
            heads,
            norm1: LayerNorm::unit(dim),
            qkv: Linear::random(rng, dim, 3 * dim, scale),
            proj: Linear::random(rng, dim, dim, scale),
            norm2: LayerNorm::unit(dim),
            fc1: Linear::random(rng, dim, 4 * dim, scale),
            fc2: Linear::random(rng, 4 * dim, dim, scale),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.d_out()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(EvadError::Config(format!(
                "model dim {d} is not divisible by {} heads",
                self.heads
            )));
        }
        let ok = self.norm1.dim() == d
            && self.norm2.dim() == d
            && self.qkv.weight.shape() == (d, 3 * d)
            && self.proj.weight.shape() == (d, d)
            && self.fc1.weight.shape() == (d, 4 * d)
            && self.fc2.weight.shape() == (4 * d, d)
            && self.qkv.bias.len() == 3 * d
            && self.proj.bias.len() == d
            && self.fc1.bias.len() == 4 * d
            && self.fc2.bias.len() == d;
        if !ok {
            return Err(EvadError::Config(format!(
                "layer parameter shapes inconsistent with dim {d}"
            )));
        }
        Ok(())
    }

    /// `x + MHSA(LN1(x))`, plus the attention map of that MHSA.
    pub fn attention_block(&self, x: &Matrix<T>) -> Result<(Matrix<T>, AttentionStats<T>)> {
        let (attn_out, stats) = mhsa(&self.norm1.forward(x)?, self)?;
        Ok((x.add(&attn_out)?, stats))
    }

    /// `x + FFN(LN2(x))`.
    pub fn ffn_block(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let h = self.fc1.forward(&self.norm2.forward(x)?)?.map(gelu);
        x.add(&self.fc2.forward(&h)?)
    }

    /// Full layer without any pruning in between.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let (x, _) = self.attention_block(x)?;
        self.ffn_block(&x)
    }
}

/// Multi-head self-attention over `tokens` (already normalized by the
/// caller). Returns the projected output and the post-softmax attention
/// averaged over heads.
pub fn mhsa<T: Scalar>(
    tokens: &Matrix<T>,
    params: &LayerParams<T>,
) -> Result<(Matrix<T>, AttentionStats<T>)> {
    params.validate()?;
    let d = params.dim();
    if tokens.cols() != d {
        return Err(EvadError::dim(
            "mhsa",
            format!("tokens have width {}, layer dim is {d}", tokens.cols()),
        ));
    }
    let n = tokens.rows();
    let heads = params.heads;
    let head_dim = d / heads;
    let scale = T::one() / T::lit(head_dim as f64).sqrt();
    let inv_heads = T::one() / T::lit(heads as f64);

    let qkv = params.qkv.forward(tokens)?;
    let mut context = Matrix::zeros(n, d);
    let mut avg = Matrix::zeros(n, n);
    for h in 0..heads {
        let q = qkv.col_block(h * head_dim, head_dim);
        let k = qkv.col_block(d + h * head_dim, head_dim);
        let v = qkv.col_block(2 * d + h * head_dim, head_dim);
        let probs = softmax_rows(&matmul(&q, &k.transpose())?.scale(scale));
        let head_out = matmul(&probs, &v)?;
        for r in 0..n {
            context.row_mut(r)[h * head_dim..(h + 1) * head_dim].copy_from_slice(head_out.row(r));
        }
        for (a, &p) in avg.data.iter_mut().zip(&probs.data) {
            *a = *a + p * inv_heads;
        }
    }
    Ok((params.proj.forward(&context)?, AttentionStats { attn: avg }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_f64_rows(rows).unwrap()
    }

    fn identity_params(d: usize, heads: usize) -> LayerParams<f64> {
        let mut qkv = Matrix::zeros(d, 3 * d);
        for i in 0..d {
            for b in 0..3 {
                qkv.set(i, b * d + i, 1.0);
            }
        }
        LayerParams {
            heads,
            norm1: LayerNorm::unit(d),
            qkv: Linear::new(qkv, vec![0.0; 3 * d]).unwrap(),
            proj: Linear::new(Matrix::identity(d), vec![0.0; d]).unwrap(),
            norm2: LayerNorm::unit(d),
            fc1: Linear::zeros(d, 4 * d),
            fc2: Linear::zeros(4 * d, d),
        }
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        let col = m(&[&[5.0], &[7.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &col).unwrap(), col);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &a),
            Err(EvadError::Dimension { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_rows(&m(&[&[0.0, 0.0]])), m(&[&[0.5, 0.5]]));
        let big = softmax_rows(&m(&[&[1000.0, 1000.0, 1000.0]]));
        for &v in big.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&m(&[&[0.0, 3f64.ln()]]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_f32() {
        let s = softmax_rows(&Matrix::<f32>::from_f64_rows(&[&[0.0, 3f64.ln()]]).unwrap());
        assert!((s.get(0, 1) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let out = LayerNorm::unit(4).forward(&m(&[&[5.0; 4]])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_moments() {
        let out = LayerNorm::unit(5)
            .forward(&m(&[&[1.0, -2.0, 3.5, 0.25, 7.0]]))
            .unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / 5.0;
        let var: f64 = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        // eps shifts the variance slightly below one
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_607_477_2).abs() < 1e-12);
        assert!(gelu(-10.0f64).abs() < 1e-12);
    }

    #[test]
    fn linear_zero_weight_gives_bias_rows() {
        let lin = Linear::new(Matrix::zeros(3, 2), vec![1.5, -2.0]).unwrap();
        let out = lin
            .forward(&m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]))
            .unwrap();
        assert_eq!(out, m(&[&[1.5, -2.0], &[1.5, -2.0]]));
        assert!(lin.forward(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn mhsa_single_token() {
        let mut rng = rng::seeded(1);
        let p = LayerParams::<f64>::random(&mut rng, 8, 2, 0.5);
        let (out, stats) = mhsa(&rng::uniform_matrix(&mut rng, 1, 8, 1.0), &p).unwrap();
        assert_eq!(out.shape(), (1, 8));
        assert_eq!(stats.attn, m(&[&[1.0]]));
    }

    #[test]
    fn mhsa_identical_tokens_split_evenly() {
        let p = identity_params(3, 1);
        let x = m(&[&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]]);
        let (out, stats) = mhsa(&x, &p).unwrap();
        assert_eq!(stats.attn, m(&[&[0.5, 0.5], &[0.5, 0.5]]));
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut rng = rng::seeded(0);
        let p = LayerParams::<f64>::random(&mut rng, 6, 4, 0.1);
        assert!(matches!(
            mhsa(&Matrix::zeros(2, 6), &p),
            Err(EvadError::Config(_))
        ));
    }

    fn arb_matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Matrix<f64>> {
        (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f64..50.0, r * c)
                .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn softmax_rows_are_stochastic(x in arb_matrix(6, 9)) {
            let s = softmax_rows(&x);
            prop_assert!(s.is_finite());
            for row in s.iter_rows() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>(), a in 1usize..5, b in 1usize..5, c in 1usize..5, d in 1usize..5) {
            let mut r = rng::seeded(seed);
            let x: Matrix<f64> = rng::uniform_matrix(&mut r, a, b, 1.0);
            let y = rng::uniform_matrix(&mut r, b, c, 1.0);
            let z = rng::uniform_matrix(&mut r, c, d, 1.0);
            let left = matmul(&matmul(&x, &y).unwrap(), &z).unwrap();
            let right = matmul(&x, &matmul(&y, &z).unwrap()).unwrap();
            // reference triple sum
            for i in 0..a {
                for l in 0..d {
                    let mut want = 0.0;
                    for j in 0..b { for k in 0..c { want += x.get(i, j) * y.get(j, k) * z.get(k, l); } }
                    let tol = 1e-9 * want.abs().max(1.0);
                    prop_assert!((left.get(i, l) - want).abs() <= tol);
                    prop_assert!((right.get(i, l) - want).abs() <= tol);
                }
            }
        }

        #[test]
        fn mhsa_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..7, rot in 0usize..7) {
            let mut r = rng::seeded(seed);
            let p = LayerParams::<f64>::random(&mut r, 8, 2, 0.5);
            let x: Matrix<f64> = rng::uniform_matrix(&mut r, n, 8, 1.0);
            let perm: Vec<usize> = (0..n).map(|i| (i * 5 + rot) % n).collect();
            let perm = if is_perm(&perm) { perm } else { (0..n).rev().collect() };
            let (out, stats) = mhsa(&x, &p).unwrap();
            let (pout, pstats) = mhsa(&x.select_rows(&perm), &p).unwrap();
            prop_assert!(pout.max_abs_diff(&out.select_rows(&perm)) < 1e-12);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((pstats.attn.get(i, j) - stats.attn.get(perm[i], perm[j])).abs() < 1e-12);
                }
            }
            prop_assert!(stats.row_sum_error() < 1e-12);
        }
    }

    fn is_perm(p: &[usize]) -> bool {
        let mut seen = vec![false; p.len()];
        p.iter().all(|&i| !std::mem::replace(&mut seen[i], true))
    }
}
