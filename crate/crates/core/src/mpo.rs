//! Matrix product operator (tensor-train) decomposition of weight matrices.
//!
//! A matrix `W (I×J)` with plan `(i_1..i_n)/(j_1..j_n)` becomes `n` cores, core
//! `k` of shape `(d_{k-1}, i_k, j_k, d_k)` with `d_0 = d_n = 1`, such that
//! `W[i_1..i_n, j_1..j_n] = T1[i_1, j_1] · T2[i_2, j_2] ··· Tn[i_n, j_n]`.
//!
//! Decomposition is a left-to-right TT-SVD sweep over the interleaved tensor;
//! singular values are absorbed into the right factor at every cut.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    deinterleave, interleave, matmul, merge_mixed_radix, reshape_mixed_radix, svd, DenseTensor,
    FactorPlan,
};

/// Default MPO order used throughout the crate.
pub const DEFAULT_ORDER: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpoTensorSet {
    cores: Vec<DenseTensor>,
    plan: FactorPlan,
    /// Singular values dropped at each of the `n - 1` cuts.
    discarded: Vec<Vec<f64>>,
}

impl MpoTensorSet {
    /// Assembles a set from existing cores, checking every structural invariant.
    pub fn from_cores(cores: Vec<DenseTensor>, plan: FactorPlan) -> Result<Self> {
        let n = plan.order();
        let set = Self {
            cores,
            plan,
            discarded: vec![Vec::new(); n.saturating_sub(1)],
        };
        set.validate()?;
        Ok(set)
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn into_cores(self) -> Vec<DenseTensor> {
        self.cores
    }

    pub fn plan(&self) -> &FactorPlan {
        &self.plan
    }

    pub fn order(&self) -> usize {
        self.cores.len()
    }

    pub fn discarded(&self) -> &[Vec<f64>] {
        &self.discarded
    }

    /// `sqrt(Σ σ²)` over every discarded singular value.
    pub fn discarded_norm(&self) -> f64 {
        self.discarded
            .iter()
            .flatten()
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt()
    }

    /// `d_0 .. d_n`
    pub fn bonds(&self) -> Vec<usize> {
        let mut bonds = Vec::with_capacity(self.cores.len() + 1);
        bonds.push(self.cores[0].shape()[0]);
        bonds.extend(self.cores.iter().map(|c| c.shape()[3]));
        bonds
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.plan.order();
        if self.cores.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} cores for an order-{} plan",
                self.cores.len(),
                n
            )));
        }
        for (k, core) in self.cores.iter().enumerate() {
            core.expect_rank(4)?;
            let s = core.shape();
            if s[1] != self.plan.row_factors()[k] || s[2] != self.plan.col_factors()[k] {
                return Err(Error::ShapeMismatch(format!(
                    "core {k} has shape {s:?} but plan expects ({}, {})",
                    self.plan.row_factors()[k],
                    self.plan.col_factors()[k]
                )));
            }
        }
        let first = self.cores[0].shape()[0];
        if first != 1 {
            return Err(Error::BondMismatch {
                left: 0,
                right: 0,
                left_bond: 1,
                right_bond: first,
            });
        }
        let last = self.cores[n - 1].shape()[3];
        if last != 1 {
            return Err(Error::BondMismatch {
                left: n - 1,
                right: n - 1,
                left_bond: last,
                right_bond: 1,
            });
        }
        for k in 1..n {
            let l = self.cores[k - 1].shape()[3];
            let r = self.cores[k].shape()[0];
            if l != r {
                return Err(Error::BondMismatch {
                    left: k - 1,
                    right: k,
                    left_bond: l,
                    right_bond: r,
                });
            }
        }
        Ok(())
    }
}

// ── factor plans ───────────────────────────────────────────────────

/// `n` factors of `dim` minimizing the largest factor; among those, the
/// lexicographically smallest non-decreasing sequence.
pub fn factorize_dims(dim: usize, n: usize) -> Vec<usize> {
    assert!(dim >= 1 && n >= 1, "factorize_dims needs dim >= 1 and n >= 1");
    let mut bound = 1;
    loop {
        let mut seq = Vec::with_capacity(n);
        if smallest_bounded(dim, n, 1, bound, &mut seq) {
            return seq;
        }
        bound += 1;
    }
}

/// Depth-first search in increasing factor order, so the first hit is the
/// lexicographically smallest non-decreasing factorization with factors <= `bound`.
fn smallest_bounded(rem: usize, slots: usize, min: usize, bound: usize, out: &mut Vec<usize>) -> bool {
    if slots == 1 {
        if rem >= min && rem <= bound {
            out.push(rem);
            return true;
        }
        return false;
    }
    for f in min..=bound.min(rem) {
        if rem % f != 0 {
            continue;
        }
        // remaining slots each need a factor >= f, and at most `bound`
        let rest = rem / f;
        if (bound as f64).powi(slots as i32 - 1) < rest as f64 {
            continue;
        }
        out.push(f);
        if smallest_bounded(rest, slots - 1, f, bound, out) {
            return true;
        }
        out.pop();
    }
    false
}

/// Bond dimensions of an untruncated decomposition under `plan`:
/// `d_k = min(Π_{m<=k} i_m j_m, Π_{m>k} i_m j_m)`.
pub fn exact_bonds(plan: &FactorPlan) -> Vec<usize> {
    let pairs = plan.pair_dims();
    let n = pairs.len();
    let mut bonds = vec![1usize; n + 1];
    let total: u128 = pairs.iter().map(|&p| p as u128).product();
    let mut left: u128 = 1;
    for k in 1..n {
        left *= pairs[k - 1] as u128;
        let right = total / left;
        bonds[k] = left.min(right) as usize;
    }
    bonds
}

/// Balanced plan for an `rows × cols` matrix: the factors are those of
/// [`factorize_dims`], arranged so the middle core carries the largest share of
/// parameters in an untruncated decomposition. Ties prefer the smaller total,
/// then the lexicographically smallest arrangement. Orders above 6 keep the
/// sorted factor order.
pub fn balanced_plan(rows: usize, cols: usize, n: usize) -> FactorPlan {
    let row_f = factorize_dims(rows, n);
    let col_f = factorize_dims(cols, n);
    if n > 6 {
        return FactorPlan::new(row_f, col_f).expect("factorizations have equal length");
    }
    let row_perms = distinct_permutations(&row_f);
    let col_perms = distinct_permutations(&col_f);
    let mut best: Option<(FactorPlan, u128, u128)> = None;
    for r in &row_perms {
        for c in &col_perms {
            let plan = FactorPlan::new(r.clone(), c.clone()).expect("valid factors");
            let (central, total) = plan_counts(&plan);
            let better = match &best {
                None => true,
                Some((_, bc, bt)) => {
                    // central/total > bc/bt, compared exactly
                    let lhs = central * bt;
                    let rhs = bc * total;
                    lhs > rhs || (lhs == rhs && total < *bt)
                }
            };
            if better {
                best = Some((plan, central, total));
            }
        }
    }
    best.expect("at least one arrangement").0
}

fn plan_counts(plan: &FactorPlan) -> (u128, u128) {
    let bonds = exact_bonds(plan);
    let pairs = plan.pair_dims();
    let counts: Vec<u128> = (0..pairs.len())
        .map(|k| bonds[k] as u128 * pairs[k] as u128 * bonds[k + 1] as u128)
        .collect();
    (counts[central_index(pairs.len()) - 1], counts.iter().sum())
}

/// Distinct permutations in lexicographic order.
fn distinct_permutations(items: &[usize]) -> Vec<Vec<usize>> {
    let mut cur = items.to_vec();
    cur.sort_unstable();
    let mut out = vec![cur.clone()];
    loop {
        // next lexicographic permutation
        let Some(i) = (0..cur.len().saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            return out;
        };
        let j = (i + 1..cur.len()).rev().find(|&j| cur[j] > cur[i]).expect("pivot exists");
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(cur.clone());
    }
}

// ── decomposition and reconstruction ───────────────────────────────

pub fn mpo_decompose(
    w: &DenseTensor,
    plan: &FactorPlan,
    bond_cap: Option<usize>,
) -> Result<MpoTensorSet> {
    if let Some(cap) = bond_cap {
        if cap < 1 {
            return Err(Error::InvalidCap(cap));
        }
    }
    let n = plan.order();
    let pairs = plan.pair_dims();
    let tensor = interleave(&reshape_mixed_radix(w, plan)?, n)?;
    let total = tensor.len();

    let mut cores = Vec::with_capacity(n);
    let mut discarded = Vec::with_capacity(n.saturating_sub(1));
    let mut rest = tensor.into_data();
    let mut left_bond = 1usize;
    let mut remaining = total;
    for k in 0..n - 1 {
        let rows = left_bond * pairs[k];
        remaining /= pairs[k];
        let unfolding = DenseTensor::matrix(rows, remaining, rest)?;
        let f = svd(&unfolding)?;
        let full = f.rank();
        let keep = bond_cap.map_or(full, |c| c.min(full));
        discarded.push(f.s[keep..].to_vec());

        let u = DenseTensor::from_fn(&[rows, keep], |idx| f.u.at(idx / keep, idx % keep))?;
        cores.push(u.into_reshape(&[
            left_bond,
            plan.row_factors()[k],
            plan.col_factors()[k],
            keep,
        ])?);

        // diag(s) · Vᵀ carries on to the next cut
        let mut next = Vec::with_capacity(keep * remaining);
        for r in 0..keep {
            for c in 0..remaining {
                next.push(f.s[r] * f.v.at(c, r));
            }
        }
        rest = next;
        left_bond = keep;
    }
    cores.push(DenseTensor::new(
        vec![
            left_bond,
            plan.row_factors()[n - 1],
            plan.col_factors()[n - 1],
            1,
        ],
        rest,
    )?);
    let set = MpoTensorSet {
        cores,
        plan: plan.clone(),
        discarded,
    };
    debug_assert!(set.validate().is_ok());
    Ok(set)
}

/// Contracts a chain of cores over their bonds into the interleaved data vector
/// `(p_1, .., p_n)` flattened, `p_k = (i_k, j_k)`.
pub(crate) fn contract_chain(cores: &[&DenseTensor]) -> Result<DenseTensor> {
    let first = cores[0];
    let s = first.shape();
    let mut acc = first.reshape(&[s[0] * s[1] * s[2], s[3]])?;
    for (k, core) in cores.iter().enumerate().skip(1) {
        let cs = core.shape();
        if acc.cols() != cs[0] {
            return Err(Error::BondMismatch {
                left: k - 1,
                right: k,
                left_bond: acc.cols(),
                right_bond: cs[0],
            });
        }
        let core2 = core.reshape(&[cs[0], cs[1] * cs[2] * cs[3]])?;
        let prod = matmul(&acc, &core2)?;
        let p = prod.rows() * cs[1] * cs[2];
        acc = prod.into_reshape(&[p, cs[3]])?;
    }
    Ok(acc)
}

/// Reconstructs a matrix from cores given in chain order.
pub fn reconstruct_cores(cores: &[&DenseTensor], plan: &FactorPlan) -> Result<DenseTensor> {
    let n = plan.order();
    if cores.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} cores for an order-{n} plan",
            cores.len()
        )));
    }
    let lead = cores[0].shape()[0];
    let tail = cores[n - 1].shape()[3];
    if lead != 1 || tail != 1 {
        return Err(Error::BondMismatch {
            left: 0,
            right: n - 1,
            left_bond: lead,
            right_bond: tail,
        });
    }
    let chain = contract_chain(cores)?;
    let shape: Vec<usize> = plan
        .row_factors()
        .iter()
        .zip(plan.col_factors())
        .flat_map(|(&i, &j)| [i, j])
        .collect();
    let interleaved = chain.into_reshape(&shape)?;
    merge_mixed_radix(&deinterleave(&interleaved, n)?, plan)
}

pub fn mpo_reconstruct(set: &MpoTensorSet) -> Result<DenseTensor> {
    set.validate()?;
    let refs: Vec<&DenseTensor> = set.cores.iter().collect();
    reconstruct_cores(&refs, &set.plan)
}

/// Gradient of a scalar loss with respect to every core, given `grad_w`, the
/// gradient with respect to the reconstructed matrix. Cores are in chain order.
pub fn core_gradients(
    cores: &[&DenseTensor],
    plan: &FactorPlan,
    grad_w: &DenseTensor,
) -> Result<Vec<DenseTensor>> {
    let n = plan.order();
    if cores.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} cores for an order-{n} plan",
            cores.len()
        )));
    }
    let pairs = plan.pair_dims();
    let g = interleave(&reshape_mixed_radix(grad_w, plan)?, n)?.into_data();
    let total = g.len();

    // right[k]: cores k+1..n contracted, shape (d_k, P_>k)
    let mut right: Vec<DenseTensor> = vec![DenseTensor::scalar(1.0).into_reshape(&[1, 1])?; n];
    for k in (1..n).rev() {
        let s = cores[k].shape();
        let core = cores[k].reshape(&[s[0] * s[1] * s[2], s[3]])?;
        let prod = matmul(&core, &right[k])?;
        let p_right = prod.cols() * s[1] * s[2];
        right[k - 1] = prod.into_reshape(&[s[0], p_right])?;
    }

    let mut grads = Vec::with_capacity(n);
    // left: cores 0..k contracted, shape (P_<k, d_{k-1})
    let mut left = DenseTensor::scalar(1.0).into_reshape(&[1, 1])?;
    let mut p_left = 1usize;
    for k in 0..n {
        let s = cores[k].shape();
        let p_right = total / (p_left * pairs[k]);
        let gk = DenseTensor::matrix(p_left, pairs[k] * p_right, g.clone())?;
        let tmp = crate::tensor::matmul_tn(&left, &gk)?
            .into_reshape(&[s[0] * pairs[k], p_right])?;
        let grad = crate::tensor::matmul_nt(&tmp, &right[k])?;
        grads.push(grad.into_reshape(s)?);
        if k + 1 < n {
            let core = cores[k].reshape(&[s[0], pairs[k] * s[3]])?;
            let next = matmul(&left, &core)?;
            p_left *= pairs[k];
            left = next.into_reshape(&[p_left, s[3]])?;
        }
    }
    Ok(grads)
}

// ── truncation ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Truncation {
    /// Keep at most this many singular values per cut.
    BondCap(usize),
    /// Drop trailing singular values at a cut while their root-sum-square stays
    /// within this absolute Frobenius budget.
    Tolerance(f64),
}

/// TT rounding: right-orthogonalize, then truncate each cut left to right.
/// Returns the rounded set and `sqrt(Σ_cuts Σ discarded σ²)`, an upper bound on
/// the Frobenius distance between the two reconstructions.
pub fn truncate_bonds(set: &MpoTensorSet, truncation: Truncation) -> Result<(MpoTensorSet, f64)> {
    set.validate()?;
    if let Truncation::BondCap(cap) = truncation {
        if cap < 1 {
            return Err(Error::InvalidCap(cap));
        }
        if set.bonds().iter().all(|&d| d <= cap) {
            return Ok((set.clone(), 0.0));
        }
    }
    let n = set.order();
    let mut cores = set.cores.clone();

    // right-to-left: make cores 2..n right-orthonormal
    for k in (1..n).rev() {
        let s = cores[k].shape().to_vec();
        let unfolding = cores[k].reshape(&[s[0], s[1] * s[2] * s[3]])?;
        let f = svd(&unfolding)?;
        let r = f.rank();
        let vt = DenseTensor::from_fn(&[r, s[1] * s[2] * s[3]], |idx| {
            f.v.at(idx % (s[1] * s[2] * s[3]), idx / (s[1] * s[2] * s[3]))
        })?;
        cores[k] = vt.into_reshape(&[r, s[1], s[2], s[3]])?;
        let us = DenseTensor::from_fn(&[s[0], r], |idx| f.u.at(idx / r, idx % r) * f.s[idx % r])?;
        let ps = cores[k - 1].shape().to_vec();
        let prev = cores[k - 1].reshape(&[ps[0] * ps[1] * ps[2], ps[3]])?;
        cores[k - 1] = matmul(&prev, &us)?.into_reshape(&[ps[0], ps[1], ps[2], r])?;
    }

    // left-to-right: truncate each cut
    let mut discarded = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let s = cores[k].shape().to_vec();
        let unfolding = cores[k].reshape(&[s[0] * s[1] * s[2], s[3]])?;
        let f = svd(&unfolding)?;
        let full = f.rank();
        let keep = match truncation {
            Truncation::BondCap(cap) => cap.min(full),
            Truncation::Tolerance(tol) => {
                let mut keep = full;
                let mut energy = 0.0;
                while keep > 1 {
                    let next = energy + f.s[keep - 1] * f.s[keep - 1];
                    if next.sqrt() > tol {
                        break;
                    }
                    energy = next;
                    keep -= 1;
                }
                keep
            }
        };
        discarded.push(f.s[keep..].to_vec());
        let rows = s[0] * s[1] * s[2];
        let u = DenseTensor::from_fn(&[rows, keep], |idx| f.u.at(idx / keep, idx % keep))?;
        cores[k] = u.into_reshape(&[s[0], s[1], s[2], keep])?;
        // carry diag(s) · Vᵀ into the next core
        let svt = DenseTensor::from_fn(&[keep, s[3]], |idx| {
            let (r, c) = (idx / s[3], idx % s[3]);
            f.s[r] * f.v.at(c, r)
        })?;
        let ns = cores[k + 1].shape().to_vec();
        let next = cores[k + 1].reshape(&[ns[0], ns[1] * ns[2] * ns[3]])?;
        cores[k + 1] = matmul(&svt, &next)?.into_reshape(&[keep, ns[1], ns[2], ns[3]])?;
    }
    let bound = discarded
        .iter()
        .flatten()
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt();
    let out = MpoTensorSet {
        cores,
        plan: set.plan.clone(),
        discarded,
    };
    out.validate()?;
    Ok((out, bound))
}

// ── central / auxiliary split ──────────────────────────────────────

/// 1-based index of the central core: `ceil(n / 2)`.
pub fn central_index(n: usize) -> usize {
    n.div_ceil(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentralAuxSplit {
    pub central: DenseTensor,
    /// The other `n - 1` cores in chain order.
    pub auxiliaries: Vec<DenseTensor>,
    /// 1-based position of the central core in the chain.
    pub central_index: usize,
    pub plan: FactorPlan,
}

impl CentralAuxSplit {
    /// Cores back in chain order.
    pub fn chain(&self) -> Vec<&DenseTensor> {
        chain_with_central(&self.auxiliaries, &self.central, self.central_index)
    }

    pub fn reassemble(&self) -> Result<MpoTensorSet> {
        MpoTensorSet::from_cores(
            self.chain().into_iter().cloned().collect(),
            self.plan.clone(),
        )
    }
}

/// Interleaves auxiliaries and the central core into chain order.
pub fn chain_with_central<'a>(
    auxiliaries: &'a [DenseTensor],
    central: &'a DenseTensor,
    central_index: usize,
) -> Vec<&'a DenseTensor> {
    let pos = central_index - 1;
    let mut chain: Vec<&DenseTensor> = Vec::with_capacity(auxiliaries.len() + 1);
    chain.extend(auxiliaries[..pos].iter());
    chain.push(central);
    chain.extend(auxiliaries[pos..].iter());
    chain
}

pub fn split_central_aux(set: &MpoTensorSet) -> CentralAuxSplit {
    let idx = central_index(set.order());
    let mut auxiliaries = set.cores.clone();
    let central = auxiliaries.remove(idx - 1);
    CentralAuxSplit {
        central,
        auxiliaries,
        central_index: idx,
        plan: set.plan.clone(),
    }
}

// ── parameter accounting ───────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub bonds: Vec<usize>,
    pub per_core_counts: Vec<usize>,
    pub total: usize,
    pub central_index: usize,
    pub central_count: usize,
    pub central_fraction: f64,
    pub dense_count: usize,
    /// `total / dense_count`
    pub ratio: f64,
}

fn report_from_bonds(plan: &FactorPlan, bonds: Vec<usize>) -> ParamReport {
    let pairs = plan.pair_dims();
    let per_core_counts: Vec<usize> = (0..pairs.len())
        .map(|k| bonds[k] * pairs[k] * bonds[k + 1])
        .collect();
    let total: usize = per_core_counts.iter().sum();
    let idx = central_index(pairs.len());
    let central_count = per_core_counts[idx - 1];
    let dense_count = plan.rows() * plan.cols();
    ParamReport {
        bonds,
        central_index: idx,
        central_count,
        central_fraction: central_count as f64 / total as f64,
        dense_count,
        ratio: total as f64 / dense_count as f64,
        per_core_counts,
        total,
    }
}

pub fn param_report(set: &MpoTensorSet) -> ParamReport {
    report_from_bonds(&set.plan, set.bonds())
}

/// Report for an untruncated decomposition under `plan`, without decomposing.
pub fn param_report_for_plan(plan: &FactorPlan) -> ParamReport {
    report_from_bonds(plan, exact_bonds(plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(&[rows, cols], |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn rel_err(a: &DenseTensor, b: &DenseTensor) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    /// Every non-decreasing n-factorization of `dim`, by plain enumeration.
    fn all_factorizations(dim: usize, n: usize, min: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return if dim >= min { vec![vec![dim]] } else { vec![] };
        }
        let mut out = Vec::new();
        for f in min..=dim {
            if dim % f == 0 {
                for mut rest in all_factorizations(dim / f, n - 1, f) {
                    rest.insert(0, f);
                    out.push(rest);
                }
            }
        }
        out
    }

    fn brute_factorize(dim: usize, n: usize) -> Vec<usize> {
        let all = all_factorizations(dim, n, 1);
        let best_max = all.iter().map(|s| *s.iter().max().unwrap()).min().unwrap();
        all.into_iter()
            .filter(|s| *s.iter().max().unwrap() == best_max)
            .min()
            .unwrap()
    }

    #[test]
    fn factorize_examples() {
        assert_eq!(factorize_dims(16, 2), vec![4, 4]);
        assert_eq!(factorize_dims(7, 2), vec![1, 7]);
        assert_eq!(factorize_dims(1, 3), vec![1, 1, 1]);
        // oracle: exhaustive enumeration
        assert_eq!(factorize_dims(768, 5), brute_factorize(768, 5));
        assert_eq!(factorize_dims(768, 5), vec![3, 4, 4, 4, 4]);
        assert_eq!(factorize_dims(3072, 5), vec![1, 6, 8, 8, 8]);
        for dim in 1..=130 {
            for n in 1..=4 {
                assert_eq!(factorize_dims(dim, n), brute_factorize(dim, n), "{dim} {n}");
            }
        }
    }

    #[test]
    fn identity_and_zero_reconstruct() {
        let plan = FactorPlan::new(vec![2, 2], vec![2, 2]).unwrap();
        let id = DenseTensor::identity(4).unwrap();
        let set = mpo_decompose(&id, &plan, None).unwrap();
        assert!(mpo_reconstruct(&set).unwrap().sub(&id).unwrap().max_abs() < 1e-12);

        let plan = FactorPlan::new(vec![2, 2, 4], vec![2, 2, 4]).unwrap();
        let z = DenseTensor::zeros(&[16, 16]).unwrap();
        let set = mpo_decompose(&z, &plan, None).unwrap();
        assert!(mpo_reconstruct(&set).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(set.bonds(), vec![1, 4, 16, 1]);
    }

    #[test]
    fn random_8x12_is_exact() {
        let w = random(8, 12, 11);
        let plan = FactorPlan::new(vec![2, 2, 2], vec![2, 2, 3]).unwrap();
        let set = mpo_decompose(&w, &plan, None).unwrap();
        assert!(rel_err(&mpo_reconstruct(&set).unwrap(), &w) < 1e-12);
    }

    #[test]
    fn order_one_set_returns_matrix() {
        let w = random(3, 5, 12);
        let plan = FactorPlan::new(vec![3], vec![5]).unwrap();
        let core = w.reshape(&[1, 3, 5, 1]).unwrap();
        let set = MpoTensorSet::from_cores(vec![core], plan).unwrap();
        assert_eq!(mpo_reconstruct(&set).unwrap(), w);
    }

    #[test]
    fn kronecker_product_has_unit_bond() {
        let a = random(3, 2, 13);
        let b = random(4, 5, 14);
        // (A⊗B)[(i1,i2),(j1,j2)] = A[i1,j1]·B[i2,j2]
        let w = DenseTensor::from_fn(&[12, 10], |idx| {
            let (r, c) = (idx / 10, idx % 10);
            a.at(r / 4, c / 5) * b.at(r % 4, c % 5)
        })
        .unwrap();
        let plan = FactorPlan::new(vec![3, 4], vec![2, 5]).unwrap();
        let full = mpo_decompose(&w, &plan, None).unwrap();
        // the single cut has rank one: every other singular value vanishes
        let svals = &svd(
            &interleave(&reshape_mixed_radix(&w, &plan).unwrap(), 2)
                .unwrap()
                .into_reshape(&[6, 20])
                .unwrap(),
        )
        .unwrap()
        .s;
        assert!(svals[1..].iter().all(|&s| s < 1e-12 * svals[0]));
        assert_eq!(full.bonds(), vec![1, 6, 1]);
        let capped = mpo_decompose(&w, &plan, Some(1)).unwrap();
        assert_eq!(capped.bonds(), vec![1, 1, 1]);
        assert!(rel_err(&mpo_reconstruct(&capped).unwrap(), &w) < 1e-10);
    }

    #[test]
    fn bond_mismatch_is_reported() {
        let plan = FactorPlan::new(vec![2, 2], vec![2, 2]).unwrap();
        let c1 = DenseTensor::zeros(&[1, 2, 2, 3]).unwrap();
        let c2 = DenseTensor::zeros(&[2, 2, 2, 1]).unwrap();
        assert!(matches!(
            MpoTensorSet::from_cores(vec![c1, c2], plan),
            Err(Error::BondMismatch { .. })
        ));
    }

    #[test]
    fn decompose_rejects_wrong_shape_and_zero_cap() {
        let plan = FactorPlan::new(vec![2, 2], vec![2, 2]).unwrap();
        assert!(matches!(
            mpo_decompose(&random(4, 5, 1), &plan, None),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            mpo_decompose(&random(4, 4, 1), &plan, Some(0)),
            Err(Error::InvalidCap(0))
        ));
    }

    #[test]
    fn truncation_cap_above_bonds_is_noop() {
        let w = random(8, 8, 15);
        let plan = FactorPlan::new(vec![2, 2, 2], vec![2, 2, 2]).unwrap();
        let set = mpo_decompose(&w, &plan, None).unwrap();
        let (same, bound) = truncate_bonds(&set, Truncation::BondCap(64)).unwrap();
        assert_eq!(same, set);
        assert_eq!(bound, 0.0);
        assert!(matches!(
            truncate_bonds(&set, Truncation::BondCap(0)),
            Err(Error::InvalidCap(0))
        ));
    }

    #[test]
    fn rank_one_matrix_truncates_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = DenseTensor::from_fn(&[6, 4], |idx| a[idx / 4] * b[idx % 4]).unwrap();
        let plan = FactorPlan::new(vec![6], vec![4]).unwrap();
        let set = mpo_decompose(&w, &plan, None).unwrap();
        let (t, bound) = truncate_bonds(&set, Truncation::BondCap(1)).unwrap();
        assert!(bound < 1e-12);
        assert!(rel_err(&mpo_reconstruct(&t).unwrap(), &w) < 1e-12);
    }

    #[test]
    fn truncation_error_within_bound_32x32() {
        let w = random(32, 32, 17);
        let plan = balanced_plan(32, 32, 3);
        let set = mpo_decompose(&w, &plan, None).unwrap();
        let (t, bound) = truncate_bonds(&set, Truncation::BondCap(2)).unwrap();
        assert!(t.bonds().iter().all(|&d| d <= 2));
        let err = mpo_reconstruct(&t).unwrap().sub(&w).unwrap().frobenius_norm();
        assert!(err <= bound + 1e-9 * w.frobenius_norm(), "{err} > {bound}");
        assert!(bound > 0.0);
    }

    #[test]
    fn tolerance_truncation_respects_budget() {
        let w = random(16, 16, 18);
        let plan = balanced_plan(16, 16, 4);
        let set = mpo_decompose(&w, &plan, None).unwrap();
        let tol = 0.3 * w.frobenius_norm();
        let (t, bound) = truncate_bonds(&set, Truncation::Tolerance(tol)).unwrap();
        for cut in t.discarded() {
            assert!(cut.iter().map(|s| s * s).sum::<f64>().sqrt() <= tol);
        }
        let err = mpo_reconstruct(&t).unwrap().sub(&w).unwrap().frobenius_norm();
        assert!(err <= bound + 1e-9 * w.frobenius_norm());
    }

    #[test]
    fn central_index_and_split() {
        assert_eq!(central_index(5), 3);
        assert_eq!(central_index(3), 2);
        assert_eq!(central_index(1), 1);
        assert_eq!(central_index(4), 2);

        let w = random(32, 32, 19);
        let plan = balanced_plan(32, 32, 5);
        let set = mpo_decompose(&w, &plan, None).unwrap();
        let split = split_central_aux(&set);
        assert_eq!(split.central_index, 3);
        assert_eq!(split.auxiliaries.len(), 4);
        assert_eq!(split.reassemble().unwrap().cores(), set.cores());

        let one = mpo_decompose(&w, &FactorPlan::new(vec![32], vec![32]).unwrap(), None).unwrap();
        let split = split_central_aux(&one);
        assert_eq!(split.central_index, 1);
        assert!(split.auxiliaries.is_empty());
    }

    #[test]
    fn report_16x16_hand_count() {
        let plan = FactorPlan::new(vec![2, 2, 4], vec![2, 2, 4]).unwrap();
        let set = mpo_decompose(&random(16, 16, 20), &plan, None).unwrap();
        let r = param_report(&set);
        // d = (1, min(4, 64), min(16, 16), 1); counts d_{k-1} · i_k j_k · d_k
        assert_eq!(r.bonds, vec![1, 4, 16, 1]);
        assert_eq!(r.per_core_counts, vec![16, 256, 256]);
        assert_eq!(r.total, 528);
        assert_eq!(r.central_fraction, 256.0 / 528.0);
        assert_eq!(r.dense_count, 256);
        assert_eq!(param_report_for_plan(&plan), r);

        let one = FactorPlan::new(vec![16], vec![16]).unwrap();
        assert_eq!(param_report_for_plan(&one).central_fraction, 1.0);
    }

    #[test]
    fn balanced_plan_puts_weight_in_the_middle() {
        let plan = balanced_plan(768, 3072, 5);
        let mut rows = plan.row_factors().to_vec();
        rows.sort_unstable();
        assert_eq!(rows, factorize_dims(768, 5));
        let r = param_report_for_plan(&plan);
        assert!(r.central_fraction >= 0.85, "{}", r.central_fraction);
    }

    #[test]
    fn distinct_permutations_counts() {
        assert_eq!(distinct_permutations(&[1, 2, 3]).len(), 6);
        assert_eq!(distinct_permutations(&[4, 4, 4, 4, 3]).len(), 5);
        assert_eq!(distinct_permutations(&[2, 1]), vec![vec![1, 2], vec![2, 1]]);
    }

    fn arb_case() -> impl Strategy<Value = (FactorPlan, u64)> {
        (1usize..=4).prop_flat_map(|n| {
            (
                prop::collection::vec(1usize..=3, n),
                prop::collection::vec(1usize..=3, n),
                any::<u64>(),
            )
                .prop_map(|(r, c, s)| (FactorPlan::new(r, c).unwrap(), s))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exact_and_bond_bounded((plan, seed) in arb_case()) {
            let w = random(plan.rows(), plan.cols(), seed);
            let set = mpo_decompose(&w, &plan, None).unwrap();
            prop_assert!(rel_err(&mpo_reconstruct(&set).unwrap(), &w) < 1e-10);
            prop_assert_eq!(set.bonds(), exact_bonds(&plan));
            let r = param_report(&set);
            prop_assert_eq!(r.total, set.cores().iter().map(|c| c.len()).sum::<usize>());
        }

        #[test]
        fn truncation_sound_and_monotone((plan, seed) in arb_case(), c1 in 1usize..4) {
            let w = random(plan.rows(), plan.cols(), seed);
            let set = mpo_decompose(&w, &plan, None).unwrap();
            let (t1, b1) = truncate_bonds(&set, Truncation::BondCap(c1)).unwrap();
            let (_, b2) = truncate_bonds(&set, Truncation::BondCap(c1 + 1)).unwrap();
            let err = mpo_reconstruct(&t1).unwrap().sub(&w).unwrap().frobenius_norm();
            prop_assert!(err <= b1 + 1e-9 * w.frobenius_norm());
            prop_assert!(b1 + 1e-12 >= b2);
        }
    }
}
