//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use mposhare::tensor::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Relative error with a small floor so that two near-zero values compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Central finite difference of `f` in the coordinate that `set` writes.
pub fn central_difference(step: f64, mut eval_at: impl FnMut(f64) -> f64) -> f64 {
    (eval_at(step) - eval_at(-step)) / (2.0 * step)
}

pub fn rel_frobenius(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
}

/// Matrix of an MPO chain by explicit summation over every bond index.
/// Cores are `(d_{k-1}, i_k, j_k, d_k)`; row and column indices are big-endian
/// mixed-radix over the factors.
pub fn naive_mpo_matrix(cores: &[&DenseTensor], rows: &[usize], cols: &[usize]) -> DenseTensor {
    let m: usize = rows.iter().product();
    let n: usize = cols.iter().product();
    let digits = |mut x: usize, radix: &[usize]| {
        let mut d = vec![0; radix.len()];
        for k in (0..radix.len()).rev() {
            d[k] = x % radix[k];
            x /= radix[k];
        }
        d
    };
    let mut out = DenseTensor::zeros(&[m, n]).unwrap();
    for r in 0..m {
        let ri = digits(r, rows);
        for c in 0..n {
            let ci = digits(c, cols);
            // row vector over the current bond
            let mut vec = vec![1.0];
            for (k, core) in cores.iter().enumerate() {
                let s = core.shape();
                let mut next = vec![0.0; s[3]];
                for (a, &va) in vec.iter().enumerate() {
                    for (b, nb) in next.iter_mut().enumerate() {
                        *nb += va * core.get(&[a, ri[k], ci[k], b]);
                    }
                }
                vec = next;
            }
            *out.at_mut(r, c) = vec[0];
        }
    }
    out
}
