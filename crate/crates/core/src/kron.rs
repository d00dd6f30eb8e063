//! Kronecker-product linear algebra.
//!
//! Activations are rows, so a Kronecker-structured layer computes
//! `x·(A⊗B)` for each row `x`. With `A: a₁×a₂` and `B: b₁×b₂` the operator maps
//! `d_in = a₁b₁` features to `d_out = a₂b₂` features, and the product is formed
//! without building the `d_in×d_out` matrix:
//!
//! ```text
//! xᵀ(A⊗B) = γ( Bᵀ · (η_{b₁×a₁}(x) · A) )
//! ```
//!
//! where `η` reshapes a vector column-by-column and `γ` stacks columns. This is
//! the column-vector identity `(A⊗B)v = γ(B·η(v)·Aᵀ)` applied to the
//! transposed operator `Aᵀ⊗Bᵀ`.

use crate::error::{Error, Result};
use crate::matrix::{gemm_acc, Matrix};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Shapes of a Kronecker factor pair: `A: a.0×a.1`, `B: b.0×b.1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorShape {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

impl FactorShape {
    pub fn new(a: (usize, usize), b: (usize, usize)) -> Self {
        Self { a, b }
    }

    /// `A` shape `(a₁, a₂)` with `B` in reversed order `(a₂, a₁)`.
    pub fn reversed(a1: usize, a2: usize) -> Self {
        Self::new((a1, a2), (a2, a1))
    }

    pub fn d_in(&self) -> usize {
        self.a.0 * self.b.0
    }

    pub fn d_out(&self) -> usize {
        self.a.1 * self.b.1
    }

    /// `a₁a₂ + b₁b₂`.
    pub fn param_count(&self) -> usize {
        self.a.0 * self.a.1 + self.b.0 * self.b.1
    }

    pub fn validate_for(&self, d_in: usize, d_out: usize) -> Result<()> {
        let dims = [self.a.0, self.a.1, self.b.0, self.b.1];
        if dims.contains(&0) {
            return Err(Error::InvalidSpec(format!("zero factor dimension in {self}")));
        }
        if self.d_in() != d_in || self.d_out() != d_out {
            return Err(Error::InvalidSpec(format!(
                "{self} maps {}→{}, site needs {d_in}→{d_out}",
                self.d_in(),
                self.d_out()
            )));
        }
        Ok(())
    }

    /// Multiplications for one row (see [`count_mults`]).
    pub fn mult_count(&self) -> MultCount {
        count_mults(self)
    }
}

impl std::fmt::Display for FactorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})/({},{})", self.a.0, self.a.1, self.b.0, self.b.1)
    }
}

/// A pair of Kronecker factors acting as a `d_in → d_out` operator.
#[derive(Debug, Clone, PartialEq)]
pub struct KronFactorPair<T: Scalar> {
    a: Matrix<T>,
    b: Matrix<T>,
}

impl<T: Scalar> KronFactorPair<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::dim("KronFactorPair::new", "empty factor"));
        }
        Ok(Self { a, b })
    }

    /// Like [`new`](Self::new) but also checks `a₁b₁ = d_in` and `a₂b₂ = d_out`.
    pub fn with_dims(a: Matrix<T>, b: Matrix<T>, d_in: usize, d_out: usize) -> Result<Self> {
        let pair = Self::new(a, b)?;
        pair.shape().validate_for(d_in, d_out)?;
        Ok(pair)
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn into_parts(self) -> (Matrix<T>, Matrix<T>) {
        (self.a, self.b)
    }

    pub fn shape(&self) -> FactorShape {
        FactorShape::new(self.a.shape(), self.b.shape())
    }

    pub fn d_in(&self) -> usize {
        self.shape().d_in()
    }

    pub fn d_out(&self) -> usize {
        self.shape().d_out()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Materializes `A⊗B`.
    pub fn reconstruct(&self) -> Matrix<T> {
        kron(&self.a, &self.b)
    }
}

/// Explicit Kronecker product: block `(i, j)` of the result is `a_ij · B`.
pub fn kron<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let (m, n) = a.shape();
    let (p, q) = b.shape();
    let mut out = Matrix::zeros(m * p, n * q);
    for i in 0..m {
        for j in 0..n {
            let aij = a.get(i, j);
            for r in 0..p {
                for c in 0..q {
                    out.set(i * p + r, j * q + c, aij * b.get(r, c));
                }
            }
        }
    }
    out
}

/// Reshapes a length-`m·n` vector into an `m×n` matrix, filling column by column.
pub fn eta<T: Scalar>(x: &[T], m: usize, n: usize) -> Result<Matrix<T>> {
    if x.len() != m * n {
        return Err(Error::dim(
            "eta",
            format!("vector of length {} into {m}x{n}", x.len()),
        ));
    }
    Ok(Matrix::from_fn(m, n, |r, c| x[c * m + r]))
}

/// Stacks the columns of `y` into a vector.
pub fn gamma<T: Scalar>(y: &Matrix<T>) -> Vec<T> {
    let (m, n) = y.shape();
    let mut out = Vec::with_capacity(m * n);
    for c in 0..n {
        for r in 0..m {
            out.push(y.get(r, c));
        }
    }
    out
}

/// `xᵀ(A⊗B)` for a single vector, computed as `γ(Bᵀ·(η_{b₁×a₁}(x)·A))`.
pub fn kron_vec<T: Scalar>(pair: &KronFactorPair<T>, x: &[T]) -> Result<Vec<T>> {
    let (a1, _) = pair.a.shape();
    let (b1, _) = pair.b.shape();
    if x.len() != a1 * b1 {
        return Err(Error::dim(
            "kron_vec",
            format!("input of length {}, operator expects {}", x.len(), a1 * b1),
        ));
    }
    let reshaped = eta(x, b1, a1)?;
    let stage = reshaped.matmul(&pair.a)?;
    let out = pair.b.transpose().matmul(&stage)?;
    Ok(gamma(&out))
}

/// Reorders `X: n×(a₁b₁)` into `n·b₁ × a₁` so that rows `i·b₁..(i+1)·b₁` hold
/// `η_{b₁×a₁}(x_i)`.
pub(crate) fn gather_rows<T: Scalar>(x: &Matrix<T>, a1: usize, b1: usize) -> Matrix<T> {
    let n = x.rows();
    let mut out = Vec::with_capacity(n * a1 * b1);
    for i in 0..n {
        let row = x.row(i);
        for p in 0..b1 {
            for q in 0..a1 {
                out.push(row[q * b1 + p]);
            }
        }
    }
    Matrix::from_vec_unchecked(n * b1, a1, out)
}

/// Inverse of [`gather_rows`].
pub(crate) fn scatter_rows<T: Scalar>(g: &Matrix<T>, n: usize, a1: usize, b1: usize) -> Matrix<T> {
    let mut out = vec![T::zero(); n * a1 * b1];
    for i in 0..n {
        let dst = &mut out[i * a1 * b1..(i + 1) * a1 * b1];
        for p in 0..b1 {
            let src = g.row(i * b1 + p);
            for q in 0..a1 {
                dst[q * b1 + p] = src[q];
            }
        }
    }
    Matrix::from_vec_unchecked(n, a1 * b1, out)
}

/// Transposes each of the `n` stacked `r×c` blocks of a `(n·r)×c` matrix.
pub(crate) fn block_transpose<T: Scalar>(m: &Matrix<T>, n: usize, r: usize, c: usize) -> Matrix<T> {
    debug_assert_eq!(m.shape(), (n * r, c));
    let mut out = vec![T::zero(); n * r * c];
    let src = m.data();
    for i in 0..n {
        let base = i * r * c;
        for rr in 0..r {
            for cc in 0..c {
                out[base + cc * r + rr] = src[base + rr * c + cc];
            }
        }
    }
    Matrix::from_vec_unchecked(n * c, r, out)
}

/// Intermediate values of the batched reconstruction-free product.
pub(crate) struct KronStages<T> {
    /// `η(x_i)` blocks, `(n·b₁)×a₁`.
    pub gathered: Matrix<T>,
    /// `η(x_i)·A` blocks, `(n·b₁)×a₂`.
    pub first: Matrix<T>,
}

pub(crate) fn kron_first_stage<T: Scalar>(x: &Matrix<T>, a: &Matrix<T>, b1: usize) -> Result<KronStages<T>> {
    let (a1, a2) = a.shape();
    if x.cols() != a1 * b1 {
        return Err(Error::dim(
            "kron_matmul",
            format!("input has {} columns, operator expects {}", x.cols(), a1 * b1),
        ));
    }
    let n = x.rows();
    let gathered = gather_rows(x, a1, b1);
    let mut first = Matrix::zeros(n * b1, a2);
    gemm_acc(n * b1, a1, a2, gathered.data(), a.data(), first.data_mut());
    Ok(KronStages { gathered, first })
}

/// Second stage: from `H` blocks `(n·b₁)×a₂` to the output `n×(a₂b₂)`.
///
/// Returns the block-transposed input as well (needed for the `B` gradient).
pub(crate) fn kron_second_stage<T: Scalar>(
    h: &Matrix<T>,
    b: &Matrix<T>,
    n: usize,
) -> (Matrix<T>, Matrix<T>) {
    let (b1, b2) = b.shape();
    let a2 = h.cols();
    let ht = block_transpose(h, n, b1, a2);
    let mut out = Matrix::zeros(n * a2, b2);
    gemm_acc(n * a2, b1, b2, ht.data(), b.data(), out.data_mut());
    let out = out.reshaped(n, a2 * b2).expect("sizes agree");
    (out, ht)
}

/// `X·(A⊗B)` for a batch of rows without materializing `A⊗B`.
pub fn kron_matmul<T: Scalar>(x: &Matrix<T>, pair: &KronFactorPair<T>) -> Result<Matrix<T>> {
    let b1 = pair.b.rows();
    let stages = kron_first_stage(x, &pair.a, b1)?;
    let (out, _) = kron_second_stage(&stages.first, &pair.b, x.rows());
    Ok(out)
}

/// Every factorization of a `d_in → d_out` operator into `A: a₁×a₂`,
/// `B: b₁×b₂` with `a₁b₁ = d_in`, `a₂b₂ = d_out`, ordered by parameter count
/// and then by `a₁`, `a₂`.
pub fn enumerate_factor_shapes(d_in: usize, d_out: usize) -> Vec<FactorShape> {
    let mut shapes = Vec::new();
    for a1 in divisors(d_in) {
        for a2 in divisors(d_out) {
            shapes.push(FactorShape::new((a1, a2), (d_in / a1, d_out / a2)));
        }
    }
    shapes.sort_by_key(|s| (s.param_count(), s.a.0, s.a.1));
    shapes
}

/// Divisors of `n` in ascending order (empty for `n = 0`).
pub fn divisors(n: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// Scalar multiplications needed to push one row through a factor pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultCount {
    /// Dense product with the reconstructed `d_in×d_out` matrix.
    pub naive: u64,
    /// The two chained products of the reconstruction-free form.
    pub vec_trick: u64,
}

impl MultCount {
    pub fn reduction(&self) -> f64 {
        self.naive as f64 / self.vec_trick as f64
    }

    /// True when the reconstruction-free form is no cheaper than the dense one.
    pub fn is_degenerate(&self) -> bool {
        self.vec_trick >= self.naive
    }
}

/// `naive = d_in·d_out`, `vec_trick = b₁b₂a₂ + b₁a₂a₁`.
pub fn count_mults(shape: &FactorShape) -> MultCount {
    let (a1, a2) = (shape.a.0 as u64, shape.a.1 as u64);
    let (b1, b2) = (shape.b.0 as u64, shape.b.1 as u64);
    MultCount {
        naive: (a1 * b1) * (a2 * b2),
        vec_trick: b1 * b2 * a2 + b1 * a2 * a1,
    }
}

/// Singular values in descending order, by one-sided Jacobi rotations.
pub fn singular_values<T: Scalar>(m: &Matrix<T>) -> Result<Vec<T>> {
    // Work on the orientation with at least as many rows as columns.
    let work = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let (rows, cols) = work.shape();
    // Column-major copy so column pairs are contiguous.
    let mut u: Vec<Vec<T>> = (0..cols)
        .map(|c| (0..rows).map(|r| work.get(r, c)).collect())
        .collect();
    let eps = T::epsilon();
    const MAX_SWEEPS: usize = 60;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (up, uq) = (&u[p], &u[q]);
                    let mut a = T::zero();
                    let mut b = T::zero();
                    let mut g = T::zero();
                    for k in 0..rows {
                        a += up[k] * up[k];
                        b += uq[k] * uq[k];
                        g += up[k] * uq[k];
                    }
                    (a, b, g)
                };
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == T::zero() {
                    continue;
                }
                rotated = true;
                let two = T::lit(2.0);
                let zeta = (beta - alpha) / (two * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (left, right) = u.split_at_mut(q);
                let (up, uq) = (&mut left[p], &mut right[0]);
                for k in 0..rows {
                    let x = up[k];
                    let y = uq[k];
                    up[k] = c * x - s * y;
                    uq[k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
        )));
    }
    let mut sv: Vec<T> = u
        .iter()
        .map(|col| col.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(sv)
}

/// Number of singular values above `tol ×` the largest one.
pub fn numeric_rank<T: Scalar>(m: &Matrix<T>, tol: T) -> Result<usize> {
    if tol <= T::zero() {
        return Err(Error::Numerical("rank tolerance must be positive".into()));
    }
    let sv = singular_values(m)?;
    let Some(&largest) = sv.first() else {
        return Ok(0);
    };
    if largest == T::zero() {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * largest).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn kron_identity() {
        let k = kron(&Matrix::<f64>::identity(2), &Matrix::identity(3));
        assert_eq!(k, Matrix::identity(6));
    }

    #[test]
    fn kron_hand_expanded() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let expected = m(&[
            &[0.0, 1.0, 0.0, 2.0],
            &[1.0, 0.0, 2.0, 0.0],
            &[0.0, 3.0, 0.0, 4.0],
            &[3.0, 0.0, 4.0, 0.0],
        ]);
        assert_eq!(kron(&a, &b), expected);
    }

    #[test]
    fn kron_scalar_factor() {
        let b = m(&[&[1.5, -2.0, 0.25]]);
        assert_eq!(kron(&Matrix::scalar(2.0), &b), b.scale(2.0));
    }

    #[test]
    fn eta_fills_columns() {
        let y = eta(&[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(y, m(&[&[1.0, 3.0], &[2.0, 4.0]]));
        assert_eq!(gamma(&y), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eta(&[5.0], 1, 1).unwrap(), Matrix::scalar(5.0));
        let col = eta(&[1.0, 2.0, 3.0], 3, 1).unwrap();
        assert_eq!(col.shape(), (3, 1));
        assert_eq!(gamma(&col), vec![1.0, 2.0, 3.0]);
        assert!(eta(&[1.0, 2.0, 3.0], 2, 2).is_err());
    }

    #[test]
    fn kron_vec_trivial_cases() {
        let pair = KronFactorPair::new(Matrix::scalar(2.0), Matrix::<f64>::identity(2)).unwrap();
        assert_eq!(kron_vec(&pair, &[1.0, 3.0]).unwrap(), vec![2.0, 6.0]);
        let id = KronFactorPair::new(Matrix::<f64>::identity(2), Matrix::identity(2)).unwrap();
        let x = [0.5, -1.0, 2.0, 7.0];
        assert_eq!(kron_vec(&id, &x).unwrap(), x.to_vec());
        assert!(kron_vec(&id, &[1.0; 3]).is_err());
    }

    #[test]
    fn kron_vec_matches_reconstruction_non_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::<f64>::rand_normal(3, 5, 1.0, &mut rng);
        let b = Matrix::<f64>::rand_normal(2, 4, 1.0, &mut rng);
        let pair = KronFactorPair::new(a, b).unwrap();
        let x = Matrix::<f64>::rand_normal(1, 6, 1.0, &mut rng);
        let fast = kron_vec(&pair, x.data()).unwrap();
        let slow = x.matmul(&pair.reconstruct()).unwrap();
        assert_eq!(fast.len(), 20);
        for (f, s) in fast.iter().zip(slow.data()) {
            assert!((f - s).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn kron_matmul_identity_batch_recovers_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pair = KronFactorPair::new(
            Matrix::<f64>::rand_normal(2, 3, 1.0, &mut rng),
            Matrix::<f64>::rand_normal(3, 2, 1.0, &mut rng),
        )
        .unwrap();
        let out = kron_matmul(&Matrix::identity(6), &pair).unwrap();
        assert!(out.max_rel_diff(&pair.reconstruct()).unwrap() <= 1e-15);
    }

    #[test]
    fn gather_scatter_inverse() {
        let x = Matrix::<f64>::from_fn(3, 6, |r, c| (r * 10 + c) as f64);
        let g = gather_rows(&x, 2, 3);
        assert_eq!(scatter_rows(&g, 3, 2, 3), x);
        let bt = block_transpose(&g, 3, 3, 2);
        assert_eq!(block_transpose(&bt, 3, 2, 3), g);
    }

    #[test]
    fn divisor_lists() {
        assert_eq!(divisors(1), vec![1]);
        assert_eq!(divisors(12), vec![1, 2, 3, 4, 6, 12]);
        assert_eq!(divisors(64).len(), 7);
        assert_eq!(divisors(768).len(), 18);
    }

    #[test]
    fn enumerate_small_cases() {
        assert_eq!(
            enumerate_factor_shapes(1, 1),
            vec![FactorShape::new((1, 1), (1, 1))]
        );
        let four = enumerate_factor_shapes(4, 4);
        assert_eq!(four.len(), 9);
        let counts: Vec<usize> = four.iter().map(|s| s.param_count()).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        // (1,4)/(4,1) and (2,2)/(2,2) both need 8 parameters; a₁ breaks the tie
        assert_eq!(four[0], FactorShape::new((1, 4), (4, 1)));
        assert_eq!(four[1], FactorShape::new((2, 2), (2, 2)));
    }

    #[test]
    fn count_mults_formulas() {
        let c = count_mults(&FactorShape::reversed(32, 24));
        assert_eq!(c.naive, 589_824);
        assert_eq!(c.vec_trick, 36_864);
        assert_eq!(c.reduction(), 16.0);
        let d = 768u64;
        let left = count_mults(&FactorShape::new((1, 1), (768, 768)));
        assert_eq!((left.naive, left.vec_trick), (d * d, d * d + d));
        assert!(left.is_degenerate());
        let right = count_mults(&FactorShape::new((768, 768), (1, 1)));
        assert_eq!((right.naive, right.vec_trick), (d * d, d + d * d));
    }

    #[test]
    fn rank_basics() {
        assert_eq!(numeric_rank(&Matrix::<f64>::identity(5), 1e-9).unwrap(), 5);
        let u = Matrix::<f64>::from_rows(&[[1.0], [2.0], [-1.0]]).unwrap();
        let v = Matrix::<f64>::from_rows(&[[3.0, 0.5, 4.0, 1.0]]).unwrap();
        assert_eq!(numeric_rank(&u.matmul(&v).unwrap(), 1e-9).unwrap(), 1);
        assert_eq!(numeric_rank(&Matrix::<f64>::zeros(3, 3), 1e-9).unwrap(), 0);
        assert!(numeric_rank(&Matrix::<f64>::identity(2), 0.0).is_err());
    }

    #[test]
    fn singular_values_of_diagonal() {
        let d = m(&[&[3.0, 0.0], &[0.0, -5.0], &[0.0, 0.0]]);
        let sv = singular_values(&d).unwrap();
        assert!((sv[0] - 5.0).abs() < 1e-14 && (sv[1] - 3.0).abs() < 1e-14);
    }
}
