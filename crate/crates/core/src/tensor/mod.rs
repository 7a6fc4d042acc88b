//! Dense row-major tensors and the handful of operations the MPO code needs:
//! mixed-radix reshaping, axis permutation, pairwise contraction and a thin SVD.
//!
//! Index convention: a matrix of shape `(I, J)` with `I = i_1 * ... * i_n` and
//! `J = j_1 * ... * j_n` is viewed as a tensor of shape `(i_1, .., i_n, j_1, .., j_n)`
//! where the row index decomposes big-endian (i_1 most significant). Because the
//! storage is row-major this relabeling moves no data.

mod svd;

pub use svd::{svd, Svd};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// n-dimensional array of `f64` in row-major order (last axis fastest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_extents(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_extents(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        })
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        check_extents(shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let flat = index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum::<usize>();
        self.data[flat]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element `(r, c)` of a rank-2 tensor.
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        let cols = self.shape[1];
        &mut self.data[r * cols + c]
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if axes.len() != rank {
            return Err(Error::RankMismatch {
                expected: rank,
                actual: axes.len(),
            });
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::AxisMismatch(format!(
                    "{axes:?} is not a permutation of 0..{rank}"
                )));
            }
            seen[a] = true;
        }
        if axes.iter().enumerate().all(|(k, &a)| k == a) {
            return Ok(self.clone());
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = self.strides();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            // odometer increment over the output index
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                offset += src_strides[ax];
                if counter[ax] < new_shape[ax] {
                    break;
                }
                offset -= src_strides[ax] * new_shape[ax];
                counter[ax] = 0;
            }
        }
        Ok(Self {
            shape: new_shape,
            data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        self.expect_rank(2)?;
        self.permute(&[1, 0])
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::RankMismatch {
                expected: rank,
                actual: self.rank(),
            });
        }
        Ok(())
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::EmptyExtent(shape.to_vec()));
    }
    Ok(())
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

// ── matrix products ────────────────────────────────────────────────

/// `a · b` for rank-2 tensors.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.expect_rank(2)?;
    b.expect_rank(2)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    DenseTensor::new(vec![m, n], out)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.expect_rank(2)?;
    b.expect_rank(2)?;
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul_tn {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    DenseTensor::new(vec![m, n], out)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.expect_rank(2)?;
    b.expect_rank(2)?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul_nt {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out.push(arow.iter().zip(brow).map(|(x, y)| x * y).sum());
        }
    }
    DenseTensor::new(vec![m, n], out)
}

// ── factor plans and relabeling ────────────────────────────────────

/// Row and column factorizations `(i_1..i_n)`, `(j_1..j_n)` of a matrix shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorPlan {
    row_factors: Vec<usize>,
    col_factors: Vec<usize>,
}

impl FactorPlan {
    pub fn new(row_factors: Vec<usize>, col_factors: Vec<usize>) -> Result<Self> {
        if row_factors.is_empty() || row_factors.len() != col_factors.len() {
            return Err(Error::ShapeMismatch(format!(
                "factor lists must be non-empty and of equal length, got {row_factors:?} / {col_factors:?}"
            )));
        }
        if row_factors.contains(&0) || col_factors.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "factors must be positive, got {row_factors:?} / {col_factors:?}"
            )));
        }
        Ok(Self {
            row_factors,
            col_factors,
        })
    }

    pub fn order(&self) -> usize {
        self.row_factors.len()
    }

    pub fn row_factors(&self) -> &[usize] {
        &self.row_factors
    }

    pub fn col_factors(&self) -> &[usize] {
        &self.col_factors
    }

    pub fn rows(&self) -> usize {
        self.row_factors.iter().product()
    }

    pub fn cols(&self) -> usize {
        self.col_factors.iter().product()
    }

    /// `i_k * j_k` for every core.
    pub fn pair_dims(&self) -> Vec<usize> {
        self.row_factors
            .iter()
            .zip(&self.col_factors)
            .map(|(i, j)| i * j)
            .collect()
    }

    fn check_matrix(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.rows(), self.cols()] {
            return Err(Error::ShapeMismatch(format!(
                "matrix {:?} does not match plan {:?}/{:?} (products {}x{})",
                shape,
                self.row_factors,
                self.col_factors,
                self.rows(),
                self.cols()
            )));
        }
        Ok(())
    }
}

/// `(I, J)` matrix to the rank-2n tensor `(i_1..i_n, j_1..j_n)`.
pub fn reshape_mixed_radix(matrix: &DenseTensor, plan: &FactorPlan) -> Result<DenseTensor> {
    matrix.expect_rank(2)?;
    plan.check_matrix(matrix.shape())?;
    let shape: Vec<usize> = plan
        .row_factors
        .iter()
        .chain(&plan.col_factors)
        .copied()
        .collect();
    matrix.reshape(&shape)
}

/// Inverse of [`reshape_mixed_radix`].
pub fn merge_mixed_radix(tensor: &DenseTensor, plan: &FactorPlan) -> Result<DenseTensor> {
    let n = plan.order();
    tensor.expect_rank(2 * n)?;
    let expected: Vec<usize> = plan
        .row_factors
        .iter()
        .chain(&plan.col_factors)
        .copied()
        .collect();
    if tensor.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "tensor {:?} does not match plan layout {:?}",
            tensor.shape(),
            expected
        )));
    }
    tensor.reshape(&[plan.rows(), plan.cols()])
}

fn interleave_axes(n: usize) -> Vec<usize> {
    (0..n).flat_map(|k| [k, n + k]).collect()
}

fn deinterleave_axes(n: usize) -> Vec<usize> {
    (0..n).map(|k| 2 * k).chain((0..n).map(|k| 2 * k + 1)).collect()
}

/// Axis order `(i_1..i_n, j_1..j_n)` to `(i_1, j_1, .., i_n, j_n)`.
pub fn interleave(tensor: &DenseTensor, n: usize) -> Result<DenseTensor> {
    tensor.expect_rank(2 * n)?;
    tensor.permute(&interleave_axes(n))
}

/// Axis order `(i_1, j_1, .., i_n, j_n)` back to `(i_1..i_n, j_1..j_n)`.
pub fn deinterleave(tensor: &DenseTensor, n: usize) -> Result<DenseTensor> {
    tensor.expect_rank(2 * n)?;
    tensor.permute(&deinterleave_axes(n))
}

// ── contraction ────────────────────────────────────────────────────

/// Sums over the paired axes; the result keeps the free axes of `a`, then those
/// of `b`, in their original order. A full contraction yields shape `[1]`.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<DenseTensor> {
    if axes_a.len() != axes_b.len() {
        return Err(Error::AxisMismatch(format!(
            "{} axes of a paired with {} axes of b",
            axes_a.len(),
            axes_b.len()
        )));
    }
    for (&x, &y) in axes_a.iter().zip(axes_b) {
        if x >= a.rank() || y >= b.rank() {
            return Err(Error::AxisMismatch(format!(
                "axis pair ({x}, {y}) out of range for ranks {} and {}",
                a.rank(),
                b.rank()
            )));
        }
        if a.shape[x] != b.shape[y] {
            return Err(Error::AxisMismatch(format!(
                "a axis {x} has extent {} but b axis {y} has extent {}",
                a.shape[x], b.shape[y]
            )));
        }
    }
    let has_dup = |axes: &[usize]| {
        let mut v = axes.to_vec();
        v.sort_unstable();
        v.windows(2).any(|w| w[0] == w[1])
    };
    if has_dup(axes_a) || has_dup(axes_b) {
        return Err(Error::AxisMismatch("repeated contraction axis".into()));
    }

    let free_a: Vec<usize> = (0..a.rank()).filter(|x| !axes_a.contains(x)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|x| !axes_b.contains(x)).collect();

    let perm_a: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
    let perm_b: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();
    let m: usize = free_a.iter().map(|&x| a.shape[x]).product();
    let k: usize = axes_a.iter().map(|&x| a.shape[x]).product();
    let n: usize = free_b.iter().map(|&x| b.shape[x]).product();

    let a2 = a.permute(&perm_a)?.into_reshape(&[m, k])?;
    let b2 = b.permute(&perm_b)?.into_reshape(&[k, n])?;
    let prod = matmul(&a2, &b2)?;

    let mut out_shape: Vec<usize> = free_a
        .iter()
        .map(|&x| a.shape[x])
        .chain(free_b.iter().map(|&x| b.shape[x]))
        .collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    prod.into_reshape(&out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn rejects_empty_extents_and_bad_lengths() {
        assert!(matches!(
            DenseTensor::zeros(&[2, 0]),
            Err(Error::EmptyExtent(_))
        ));
        assert!(matches!(
            DenseTensor::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(DenseTensor::zeros(&[1, 1, 1]).is_ok());
    }

    #[test]
    fn identity_relabels_to_delta() {
        let plan = FactorPlan::new(vec![2, 2], vec![2, 2]).unwrap();
        let t = reshape_mixed_radix(&DenseTensor::identity(4).unwrap(), &plan).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 2]);
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        let want = if (a, b) == (c, d) { 1.0 } else { 0.0 };
                        assert_eq!(t.get(&[a, b, c, d]), want);
                    }
                }
            }
        }
    }

    #[test]
    fn order_one_plan_is_identity_reshape() {
        let m = random(&[2, 3], 1);
        let plan = FactorPlan::new(vec![2], vec![3]).unwrap();
        let t = reshape_mixed_radix(&m, &plan).unwrap();
        assert_eq!(t, m);
    }

    #[test]
    fn mixed_radix_round_trip_is_bit_exact() {
        let m = random(&[6, 6], 2);
        let plan = FactorPlan::new(vec![2, 3], vec![3, 2]).unwrap();
        let t = reshape_mixed_radix(&m, &plan).unwrap();
        assert_eq!(t.shape(), &[2, 3, 3, 2]);
        // row 4 = (1, 1) big-endian over (2, 3), col 5 = (2, 1) over (3, 2)
        assert_eq!(t.get(&[1, 1, 2, 1]), m.at(4, 5));
        assert_eq!(merge_mixed_radix(&t, &plan).unwrap(), m);
    }

    #[test]
    fn mixed_radix_rejects_wrong_products() {
        let m = random(&[6, 4], 3);
        let plan = FactorPlan::new(vec![2, 2], vec![2, 2]).unwrap();
        assert!(matches!(
            reshape_mixed_radix(&m, &plan),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn interleave_permutes_pairs() {
        let t = random(&[2, 3, 4, 5], 4);
        let p = interleave(&t, 2).unwrap();
        assert_eq!(p.shape(), &[2, 4, 3, 5]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    for d in 0..5 {
                        assert_eq!(p.get(&[a, c, b, d]), t.get(&[a, b, c, d]));
                    }
                }
            }
        }
        let one = random(&[3, 4], 5);
        assert_eq!(interleave(&one, 1).unwrap(), one);
        assert!(matches!(
            interleave(&t, 3),
            Err(Error::RankMismatch { .. })
        ));
    }

    #[test]
    fn interleave_round_trip_rank_six() {
        let t = random(&[2, 3, 1, 4, 2, 3], 6);
        let back = deinterleave(&interleave(&t, 3).unwrap(), 3).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn contract_matches_matrix_product() {
        let a = random(&[3, 4], 7);
        let b = random(&[4, 5], 8);
        let c = contract(&a, &b, &[1], &[0]).unwrap();
        let mut want = vec![0.0; 15];
        for i in 0..3 {
            for j in 0..5 {
                for k in 0..4 {
                    want[i * 5 + j] += a.at(i, k) * b.at(k, j);
                }
            }
        }
        assert_eq!(c.shape(), &[3, 5]);
        for (x, y) in c.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn contract_with_identity_returns_operand() {
        let a = random(&[3, 4], 9);
        let id = DenseTensor::identity(4).unwrap();
        assert_eq!(contract(&a, &id, &[1], &[0]).unwrap(), a);
        // contracting a's first axis against I leaves (cols, rows) order: a transposed
        let id3 = DenseTensor::identity(3).unwrap();
        let t = contract(&a, &id3, &[0], &[0]).unwrap();
        assert_eq!(t, a.transpose().unwrap());
    }

    #[test]
    fn contract_vectors_is_dot_product() {
        let a = DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = DenseTensor::new(vec![3], vec![4.0, -5.0, 6.0]).unwrap();
        let s = contract(&a, &b, &[0], &[0]).unwrap();
        assert_eq!(s.shape(), &[1]);
        assert_eq!(s.data()[0], 12.0);
    }

    #[test]
    fn contract_rejects_mismatched_axes() {
        let a = random(&[3, 4], 10);
        let b = random(&[5, 2], 11);
        assert!(matches!(
            contract(&a, &b, &[1], &[0]),
            Err(Error::AxisMismatch(_))
        ));
        assert!(matches!(
            contract(&a, &b, &[1], &[]),
            Err(Error::AxisMismatch(_))
        ));
    }

    #[test]
    fn contract_keeps_free_axis_order() {
        let a = random(&[2, 3, 4], 12);
        let b = random(&[4, 5, 3], 13);
        let c = contract(&a, &b, &[1, 2], &[2, 0]).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        for i in 0..2 {
            for j in 0..5 {
                let mut s = 0.0;
                for p in 0..3 {
                    for q in 0..4 {
                        s += a.get(&[i, p, q]) * b.get(&[q, j, p]);
                    }
                }
                assert!((c.get(&[i, j]) - s).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = random(&[4, 3], 14);
        let b = random(&[4, 5], 15);
        let c = random(&[6, 3], 16);
        let tn = matmul_tn(&a, &b).unwrap();
        let tn_ref = matmul(&a.transpose().unwrap(), &b).unwrap();
        let nt = matmul_nt(&a, &c).unwrap();
        let nt_ref = matmul(&a, &c.transpose().unwrap()).unwrap();
        assert!(tn.sub(&tn_ref).unwrap().max_abs() < 1e-14);
        assert!(nt.sub(&nt_ref).unwrap().max_abs() < 1e-14);
    }

    fn arb_plan() -> impl Strategy<Value = FactorPlan> {
        (1usize..=3).prop_flat_map(|n| {
            (
                prop::collection::vec(1usize..=3, n),
                prop::collection::vec(1usize..=3, n),
            )
                .prop_map(|(r, c)| FactorPlan::new(r, c).unwrap())
        })
    }

    proptest! {
        #[test]
        fn relabeling_round_trips(plan in arb_plan(), seed in any::<u64>()) {
            let m = random(&[plan.rows(), plan.cols()], seed);
            let t = reshape_mixed_radix(&m, &plan).unwrap();
            let n = plan.order();
            let back = deinterleave(&interleave(&t, n).unwrap(), n).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(merge_mixed_radix(&back, &plan).unwrap(), m);
        }

        #[test]
        fn contract_is_bilinear(alpha in -3.0f64..3.0, seed in any::<u64>()) {
            let a = random(&[3, 2, 4], seed);
            let b = random(&[4, 3], seed.wrapping_add(1));
            let lhs = contract(&a.scale(alpha), &b, &[2], &[0]).unwrap();
            let rhs = contract(&a, &b, &[2], &[0]).unwrap().scale(alpha);
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        }
    }
}
