//! Masked-language-model corruption and loss.
//!
//! Token ids `0` and `1` are reserved for padding and `[MASK]`; ids from
//! [`FIRST_REGULAR_ID`] up are ordinary tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const FIRST_REGULAR_ID: usize = 2;

pub const SELECT_PROB: f64 = 0.15;
pub const MASK_PROB: f64 = 0.8;
pub const KEEP_PROB: f64 = 0.1;

/// A corrupted batch together with the positions that carry a label.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<Vec<usize>>,
    /// Original tokens; only meaningful where `selected` is set.
    pub labels: Vec<Vec<usize>>,
    pub selected: Vec<Vec<bool>>,
}

impl MaskedBatch {
    pub fn masked_count(&self) -> usize {
        self.selected.iter().flatten().filter(|&&s| s).count()
    }
}

/// Each position is selected with probability 0.15; a selected position
/// becomes `[MASK]` (0.8), stays unchanged (0.1) or becomes a uniformly random
/// regular token (0.1).
pub fn mlm_mask_with<R: Rng>(tokens: &[Vec<usize>], vocab_size: usize, rng: &mut R) -> Result<MaskedBatch> {
    if vocab_size <= FIRST_REGULAR_ID {
        return Err(Error::EmptyVocab);
    }
    let mut inputs = Vec::with_capacity(tokens.len());
    let mut selected = Vec::with_capacity(tokens.len());
    for seq in tokens {
        let mut inp = Vec::with_capacity(seq.len());
        let mut sel = Vec::with_capacity(seq.len());
        for &t in seq {
            if t >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: vocab_size,
                });
            }
            let pick = rng.random::<f64>() < SELECT_PROB;
            sel.push(pick);
            if !pick {
                inp.push(t);
                continue;
            }
            let r = rng.random::<f64>();
            inp.push(if r < MASK_PROB {
                MASK_ID
            } else if r < MASK_PROB + KEEP_PROB {
                t
            } else {
                rng.random_range(FIRST_REGULAR_ID..vocab_size)
            });
        }
        inputs.push(inp);
        selected.push(sel);
    }
    Ok(MaskedBatch {
        inputs,
        labels: tokens.to_vec(),
        selected,
    })
}

pub fn mlm_mask(tokens: &[Vec<usize>], vocab_size: usize, seed: u64) -> Result<MaskedBatch> {
    mlm_mask_with(tokens, vocab_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug)]
pub struct MlmLoss {
    pub loss: f64,
    /// `d loss / d logits`, same shape as the logits.
    pub grad: DenseTensor,
    pub masked: usize,
    /// Set when no position was selected; the loss is then defined as zero.
    pub no_masked_positions: bool,
}

/// Mean cross-entropy over the selected positions. `logits` is
/// `(batch·seq) × vocab`, row `b·seq + t` for position `t` of sequence `b`.
pub fn mlm_loss(logits: &DenseTensor, batch: &MaskedBatch) -> Result<MlmLoss> {
    logits.expect_rank(2)?;
    let vocab = logits.cols();
    let rows: usize = batch.labels.iter().map(Vec::len).sum();
    if rows != logits.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {} positions",
            logits.rows(),
            rows
        )));
    }
    let masked = batch.masked_count();
    let mut grad = DenseTensor::zeros(logits.shape())?;
    if masked == 0 {
        return Ok(MlmLoss {
            loss: 0.0,
            grad,
            masked: 0,
            no_masked_positions: true,
        });
    }
    let inv = 1.0 / masked as f64;
    let mut total = 0.0;
    let mut row = 0;
    for (labels, sel) in batch.labels.iter().zip(&batch.selected) {
        for (&label, &s) in labels.iter().zip(sel) {
            if s {
                let z = &logits.data()[row * vocab..(row + 1) * vocab];
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                let log_norm = max + sum.ln();
                total += log_norm - z[label];
                let g = &mut grad.data_mut()[row * vocab..(row + 1) * vocab];
                for (gv, zv) in g.iter_mut().zip(z) {
                    *gv = (zv - log_norm).exp() * inv;
                }
                g[label] -= inv;
            }
            row += 1;
        }
    }
    Ok(MlmLoss {
        loss: total * inv,
        grad,
        masked,
        no_masked_positions: false,
    })
}
