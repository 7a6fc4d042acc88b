//! Synthetic Markov corpus, the SGD loop, donor production and the
//! scratch-versus-donor convergence comparison.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{init_from_donor, scaled_xavier_init, xavier_init, DonorCheckpoint, Extension};
use crate::mlm::{mlm_mask_with, MaskedBatch, FIRST_REGULAR_ID, MASK_ID};
use crate::model::{Grads, ModelConfig, ToyTransformer};

/// Number of successors each token may transition to.
pub const SUCCESSORS: usize = 2;

// ── corpus ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpus {
    pub vocab_size: usize,
    pub sequences: Vec<Vec<usize>>,
    /// Row-stochastic `vocab × vocab` generator; rows of reserved ids are zero.
    pub transitions: Vec<Vec<f64>>,
}

/// Sequences from a seeded first-order Markov chain over the regular tokens.
/// Every token has [`SUCCESSORS`] possible successors (fewer if the vocabulary
/// is tiny) with random weights; the first token is uniform.
pub fn make_toy_corpus(seed: u64, num_sequences: usize, seq_len: usize, vocab_size: usize) -> Result<ToyCorpus> {
    if vocab_size < 4 {
        return Err(Error::VocabTooSmall(vocab_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regular: Vec<usize> = (FIRST_REGULAR_ID..vocab_size).collect();
    let k = SUCCESSORS.min(regular.len());
    let mut transitions = vec![vec![0.0; vocab_size]; vocab_size];
    for &t in &regular {
        let succ: Vec<usize> = regular.choose_multiple(&mut rng, k).cloned().collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let z: f64 = weights.iter().sum();
        for (s, w) in succ.into_iter().zip(weights) {
            transitions[t][s] = w / z;
        }
    }
    let mut sequences = Vec::with_capacity(num_sequences);
    for _ in 0..num_sequences {
        let mut seq = Vec::with_capacity(seq_len);
        if seq_len > 0 {
            seq.push(rng.random_range(FIRST_REGULAR_ID..vocab_size));
        }
        while seq.len() < seq_len {
            let row = &transitions[*seq.last().expect("non-empty")];
            let mut r = rng.random::<f64>();
            let mut next = FIRST_REGULAR_ID;
            for (j, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    next = j;
                    if r < p {
                        break;
                    }
                    r -= p;
                }
            }
            seq.push(next);
        }
        sequences.push(seq);
    }
    Ok(ToyCorpus {
        vocab_size,
        sequences,
        transitions,
    })
}

// ── training ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm cap.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 256,
            seq_len: 4,
            lr: 0.8,
            seed: 0,
            clip: Some(0.5),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len < 2 || !(self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "batch size {} (≥ 1), sequence length {} (≥ 2), learning rate {} (≥ 0)",
                self.batch_size, self.seq_len, self.lr
            )));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
    pub config: TrainConfig,
}

impl LossCurve {
    pub fn mean_first(&self, k: usize) -> f64 {
        mean(&self.losses[..k.min(self.losses.len())])
    }

    pub fn mean_last(&self, k: usize) -> f64 {
        mean(&self.losses[self.losses.len().saturating_sub(k)..])
    }

    /// First step whose loss is at or below `threshold`.
    pub fn first_crossing(&self, threshold: f64) -> Option<usize> {
        self.losses.iter().position(|&l| l <= threshold)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Seeded batch of windows from the corpus with MLM corruption. If no position
/// was selected, the first one is masked so every step carries a loss.
pub fn sample_batch<R: Rng>(corpus: &ToyCorpus, batch_size: usize, seq_len: usize, rng: &mut R) -> Result<MaskedBatch> {
    let candidates: Vec<&Vec<usize>> = corpus.sequences.iter().filter(|s| s.len() >= seq_len).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidConfig(format!("no corpus sequence has length {seq_len}")));
    }
    let tokens: Vec<Vec<usize>> = (0..batch_size)
        .map(|_| {
            let s = candidates[rng.random_range(0..candidates.len())];
            let start = rng.random_range(0..=s.len() - seq_len);
            s[start..start + seq_len].to_vec()
        })
        .collect();
    let mut batch = mlm_mask_with(&tokens, corpus.vocab_size, rng)?;
    if batch.masked_count() == 0 {
        batch.selected[0][0] = true;
        batch.inputs[0][0] = MASK_ID;
    }
    Ok(batch)
}

/// Rescales `grads` so their global norm is at most `cap`; returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut Grads, cap: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > cap {
        grads.scale(cap / norm);
    }
    norm
}

/// Plain SGD on the MLM loss. All parameters, including the shared centrals,
/// are updated every step.
pub fn train(model: &mut ToyTransformer, corpus: &ToyCorpus, config: &TrainConfig) -> Result<LossCurve> {
    config.validate()?;
    if corpus.vocab_size != model.config().vocab_size {
        return Err(Error::InvalidConfig(format!(
            "corpus vocabulary {} but model vocabulary {}",
            corpus.vocab_size,
            model.config().vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_batch(corpus, config.batch_size, config.seq_len, &mut rng)?;
        let (loss, mut grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        losses.push(loss);
        if let Some(cap) = config.clip {
            clip_gradients(&mut grads, cap);
        }
        model.apply_sgd(&grads, config.lr)?;
    }
    Ok(LossCurve {
        losses,
        config: config.clone(),
    })
}

// ── donor and comparison ───────────────────────────────────────────

/// Config of a fully shared, dense, adapter-free donor of depth `donor_depth`
/// with the target's widths.
pub fn donor_config(target: &ModelConfig, donor_depth: usize) -> ModelConfig {
    ModelConfig {
        layers: donor_depth,
        mpo_order: 1,
        num_groups: 1,
        use_adapters: false,
        share_all: true,
        ..target.clone()
    }
}

/// Trains a fully shared model from Xavier initialization and exports it.
pub fn train_donor(
    config: ModelConfig,
    corpus: &ToyCorpus,
    train_config: &TrainConfig,
    init_seed: u64,
) -> Result<(DonorCheckpoint, LossCurve)> {
    if !config.share_all {
        return Err(Error::InvalidConfig("a donor shares every layer".into()));
    }
    let mut model = xavier_init(config, init_seed)?;
    let curve = train(&mut model, corpus, train_config)?;
    Ok((DonorCheckpoint::from_model(&model)?, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scratch: LossCurve,
    pub donor: LossCurve,
    /// `0.8 ×` the scratch run's final loss (mean of its last [`FINAL_WINDOW`] steps).
    pub threshold: f64,
    pub scratch_crossing: Option<usize>,
    pub donor_crossing: Option<usize>,
}

pub const FINAL_WINDOW: usize = 20;
pub const THRESHOLD_FRACTION: f64 = 0.8;

impl Comparison {
    /// Donor crosses the threshold, and no later than the scratch run does.
    pub fn donor_not_slower(&self) -> bool {
        match (self.donor_crossing, self.scratch_crossing) {
            (Some(d), Some(s)) => d <= s,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }
}

/// Trains the target twice on identical batches: from scaled Xavier and from
/// the donor.
pub fn convergence_compare(
    target: &ModelConfig,
    donor: &DonorCheckpoint,
    extend: Extension,
    corpus: &ToyCorpus,
    train_config: &TrainConfig,
    init_seed: u64,
) -> Result<Comparison> {
    let mut scratch_model = scaled_xavier_init(target.clone(), init_seed, false)?;
    let scratch = train(&mut scratch_model, corpus, train_config)?;
    let mut donor_model = init_from_donor(donor, target.clone(), extend, init_seed)?;
    let donor_curve = train(&mut donor_model, corpus, train_config)?;
    let threshold = THRESHOLD_FRACTION * scratch.mean_last(FINAL_WINDOW);
    Ok(Comparison {
        scratch_crossing: scratch.first_crossing(threshold),
        donor_crossing: donor_curve.first_crossing(threshold),
        threshold,
        scratch,
        donor: donor_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_regular() {
        let a = make_toy_corpus(4, 20, 30, 12).unwrap();
        assert_eq!(a, make_toy_corpus(4, 20, 30, 12).unwrap());
        assert!(a.sequences.iter().flatten().all(|&t| t >= FIRST_REGULAR_ID && t < 12));
        for row in &a.transitions[FIRST_REGULAR_ID..] {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row.iter().filter(|&&p| p > 0.0).count(), SUCCESSORS);
        }
        assert!(matches!(make_toy_corpus(0, 1, 4, 3), Err(Error::VocabTooSmall(3))));
    }

    #[test]
    fn curve_statistics() {
        let curve = LossCurve {
            losses: vec![4.0, 3.0, 2.0, 1.0],
            config: TrainConfig::default(),
        };
        assert_eq!(curve.mean_first(2), 3.5);
        assert_eq!(curve.mean_last(2), 1.5);
        assert_eq!(curve.first_crossing(2.5), Some(2));
        assert_eq!(curve.first_crossing(0.5), None);
    }

    #[test]
    fn invalid_train_config() {
        let mut c = TrainConfig::default();
        c.seq_len = 1;
        assert!(c.validate().is_err());
        c.seq_len = 4;
        c.clip = Some(0.0);
        assert!(c.validate().is_err());
    }
}
