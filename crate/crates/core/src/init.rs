//! Initialization: Xavier with depth scaling, and MPO initialization from a
//! fully shared donor model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerNormParams, ModelConfig, ToyTransformer};
use crate::mpo::{mpo_decompose, split_central_aux, CentralAuxSplit};
use crate::shared::{Role, ADAPTER_INIT_STD};
use crate::tensor::{DenseTensor, FactorPlan};

/// Standard deviation of the token and position embeddings.
pub const EMBED_INIT_STD: f64 = 0.02;

/// `(2L)^(-1/4)`.
pub fn scaling_coefficient(layers: usize) -> f64 {
    (2.0 * layers as f64).powf(-0.25)
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite positive std")
}

/// Xavier-uniform over the `(d_{k-1}·i_k) × (j_k·d_k)` unfolding of a 4-D core.
pub fn xavier_core<R: Rng>(shape: &[usize], rng: &mut R) -> Result<DenseTensor> {
    if shape.len() != 4 {
        return Err(Error::RankMismatch {
            expected: 4,
            actual: shape.len(),
        });
    }
    let fan_in = (shape[0] * shape[1]) as f64;
    let fan_out = (shape[2] * shape[3]) as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    DenseTensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

fn init_dense_parts<R: Rng>(model: &mut ToyTransformer, rng: &mut R) -> Result<()> {
    let emb = normal(EMBED_INIT_STD);
    model
        .token_emb
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = emb.sample(rng));
    model
        .pos_emb
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = emb.sample(rng));
    let adapter = normal(ADAPTER_INIT_STD);
    for layer in model.layers.iter_mut() {
        for lin in layer.linears.iter_mut() {
            if let Some(a) = lin.adapter_mut() {
                a.u.scale_in_place(0.0);
                a.d.data_mut().iter_mut().for_each(|v| *v = adapter.sample(rng));
            }
        }
    }
    Ok(())
}

/// Xavier-initialized model; auxiliaries are multiplied by `aux_scale`, centrals
/// by `central_scale`. Embeddings `N(0, 0.02²)`, adapters `U = 0`, biases zero.
fn xavier_with_scales(config: ModelConfig, seed: u64, aux_scale: f64, central_scale: f64) -> Result<ToyTransformer> {
    let mut model = ToyTransformer::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in model.layers.iter_mut() {
        for lin in layer.linears.iter_mut() {
            for a in lin.auxiliaries_mut() {
                *a = xavier_core(a.shape(), &mut rng)?.scale(aux_scale);
            }
        }
    }
    for (_, c) in model.store.iter_mut() {
        *c = xavier_core(c.shape(), &mut rng)?.scale(central_scale);
    }
    init_dense_parts(&mut model, &mut rng)?;
    Ok(model)
}

/// Plain Xavier initialization of every MPO core.
pub fn xavier_init(config: ModelConfig, seed: u64) -> Result<ToyTransformer> {
    xavier_with_scales(config, seed, 1.0, 1.0)
}

/// Xavier followed by `(2L)^(-1/4)` on every auxiliary core, and on the
/// centrals too when `scale_centrals` is set. Draws are identical to
/// [`xavier_init`] with the same seed.
pub fn scaled_xavier_init(config: ModelConfig, seed: u64, scale_centrals: bool) -> Result<ToyTransformer> {
    let s = scaling_coefficient(config.layers);
    xavier_with_scales(config, seed, s, if scale_centrals { s } else { 1.0 })
}

// ── donor ──────────────────────────────────────────────────────────

/// Weights of a model whose single layer is reused at every depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DonorCheckpoint {
    /// Architecture of the donor; `layers` is the depth it was trained at.
    pub config: ModelConfig,
    /// One dense `d_in × d_out` matrix per role.
    pub weights: BTreeMap<Role, DenseTensor>,
    pub biases: BTreeMap<Role, DenseTensor>,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub token_emb: DenseTensor,
    pub pos_emb: DenseTensor,
    pub out_bias: DenseTensor,
}

impl DonorCheckpoint {
    pub fn donor_depth(&self) -> usize {
        self.config.layers
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        for role in Role::ALL {
            let (i, j) = c.dims(role);
            let w = self
                .weights
                .get(&role)
                .ok_or_else(|| Error::ShapeMismatch(format!("donor has no {role} matrix")))?;
            if w.shape() != [i, j] {
                return Err(Error::ShapeMismatch(format!(
                    "donor {role} matrix {:?}, expected [{i}, {j}]",
                    w.shape()
                )));
            }
            let b = self
                .biases
                .get(&role)
                .ok_or_else(|| Error::ShapeMismatch(format!("donor has no {role} bias")))?;
            if b.shape() != [j] {
                return Err(Error::ShapeMismatch(format!("donor {role} bias {:?}, expected [{j}]", b.shape())));
            }
        }
        let h = c.hidden;
        let expect = [
            ("ln1.gamma", &self.ln1.gamma, vec![h]),
            ("ln1.beta", &self.ln1.beta, vec![h]),
            ("ln2.gamma", &self.ln2.gamma, vec![h]),
            ("ln2.beta", &self.ln2.beta, vec![h]),
            ("token embedding", &self.token_emb, vec![c.vocab_size, h]),
            ("position embedding", &self.pos_emb, vec![c.max_seq_len, h]),
            ("output bias", &self.out_bias, vec![c.vocab_size]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!("donor {name} {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Exports a fully shared model. Each role's matrix is its effective
    /// weight (MPO product plus adapter).
    pub fn from_model(model: &ToyTransformer) -> Result<Self> {
        let c = model.config();
        if !c.share_all {
            return Err(Error::InvalidConfig("donor export needs a fully shared model".into()));
        }
        let layer = &model.layers[0];
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        for lin in &layer.linears {
            weights.insert(lin.role(), lin.effective_weight(&model.store)?);
            biases.insert(lin.role(), lin.bias().clone());
        }
        Ok(Self {
            config: c.clone(),
            weights,
            biases,
            ln1: layer.ln1.clone(),
            ln2: layer.ln2.clone(),
            token_emb: model.token_emb.clone(),
            pos_emb: model.pos_emb.clone(),
            out_bias: model.out_bias.clone(),
        })
    }

    /// Config of the dense (order-1), adapter-free, fully shared model that runs
    /// the donor weights at `depth`.
    pub fn runner_config(&self, depth: usize) -> ModelConfig {
        ModelConfig {
            layers: depth,
            mpo_order: 1,
            use_adapters: false,
            num_groups: 1,
            share_all: true,
            ..self.config.clone()
        }
    }

    /// The donor as a fully shared model run at `depth`.
    pub fn to_model(&self, depth: usize) -> Result<ToyTransformer> {
        self.validate()?;
        let mut model = ToyTransformer::zeros(self.runner_config(depth))?;
        for role in Role::ALL {
            let w = &self.weights[&role];
            let core = w.reshape(&[1, w.rows(), w.cols(), 1])?;
            *model.store.get_mut(role, 0)? = core;
            *model.layers[0].linear_mut(role).bias_mut() = self.biases[&role].clone();
        }
        model.layers[0].ln1 = self.ln1.clone();
        model.layers[0].ln2 = self.ln2.clone();
        model.token_emb = self.token_emb.clone();
        model.pos_emb = self.pos_emb.clone();
        model.out_bias = self.out_bias.clone();
        Ok(model)
    }
}

/// Decomposes every donor matrix with the target's factor plans.
pub fn decompose_donor(donor: &DonorCheckpoint, config: &ModelConfig) -> Result<BTreeMap<Role, CentralAuxSplit>> {
    donor.validate()?;
    check_compatible(donor, config)?;
    let mut out = BTreeMap::new();
    for role in Role::ALL {
        let plan: FactorPlan = config.plan(role);
        let set = mpo_decompose(&donor.weights[&role], &plan, None)?;
        out.insert(role, split_central_aux(&set));
    }
    Ok(out)
}

fn check_compatible(donor: &DonorCheckpoint, config: &ModelConfig) -> Result<()> {
    let d = &donor.config;
    let pairs = [
        ("hidden", d.hidden, config.hidden),
        ("ffn_dim", d.ffn_dim, config.ffn_dim),
        ("vocab_size", d.vocab_size, config.vocab_size),
        ("max_seq_len", d.max_seq_len, config.max_seq_len),
    ];
    for (name, a, b) in pairs {
        if a != b {
            return Err(Error::ShapeMismatch(format!("donor {name} {a} but target {name} {b}")));
        }
    }
    if config.share_all {
        return Err(Error::InvalidConfig("donor initialization targets a model with per-layer auxiliaries".into()));
    }
    Ok(())
}

/// How layers deeper than the donor get their auxiliaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extension {
    /// Donor auxiliaries times `(2L)^(-1/4)`.
    ScaledDonor,
    /// Fresh Xavier auxiliaries times `(2L)^(-1/4)`.
    ScaledRandom,
}

impl Extension {
    pub fn parse(s: &str) -> Option<Extension> {
        match s {
            "scaled-donor" => Some(Extension::ScaledDonor),
            "scaled-random" => Some(Extension::ScaledRandom),
            _ => None,
        }
    }
}

/// Builds a deep MPO model from a donor. Every central group receives the
/// donor central; layers `1..=D_d` (1-based) copy the donor auxiliaries and
/// deeper layers follow `extend`. Adapters start at `U = 0`, `D ~ N(0, 0.02²)`;
/// biases, layer norms and embeddings are copied.
pub fn init_from_donor(
    donor: &DonorCheckpoint,
    config: ModelConfig,
    extend: Extension,
    seed: u64,
) -> Result<ToyTransformer> {
    let splits = decompose_donor(donor, &config)?;
    let coef = scaling_coefficient(config.layers);
    let depth = donor.donor_depth();
    let mut model = ToyTransformer::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let keys: Vec<(Role, usize)> = model.store.iter().map(|(&k, _)| k).collect();
    for (role, g) in keys {
        *model.store.get_mut(role, g)? = splits[&role].central.clone();
    }
    let adapter = normal(ADAPTER_INIT_STD);
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let copy_branch = l < depth;
        for lin in layer.linears.iter_mut() {
            let split = &splits[&lin.role()];
            for (dst, src) in lin.auxiliaries_mut().iter_mut().zip(&split.auxiliaries) {
                *dst = match (copy_branch, extend) {
                    (true, _) => src.clone(),
                    (false, Extension::ScaledDonor) => src.scale(coef),
                    (false, Extension::ScaledRandom) => xavier_core(src.shape(), &mut rng)?.scale(coef),
                };
            }
            *lin.bias_mut() = donor.biases[&lin.role()].clone();
            if let Some(a) = lin.adapter_mut() {
                a.u.scale_in_place(0.0);
                a.d.data_mut().iter_mut().for_each(|v| *v = adapter.sample(&mut rng));
            }
        }
        layer.ln1 = donor.ln1.clone();
        layer.ln2 = donor.ln2.clone();
    }
    model.token_emb = donor.token_emb.clone();
    model.pos_emb = donor.pos_emb.clone();
    model.out_bias = donor.out_bias.clone();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_values() {
        assert_eq!(scaling_coefficient(8), 0.5);
        assert!((scaling_coefficient(2) - 0.5f64.sqrt()).abs() < 1e-15);
        // 96^(-1/4)
        assert!((scaling_coefficient(48) - 0.319_471_552_123_136_2).abs() < 1e-15);
        for l in 1..200 {
            assert!(scaling_coefficient(l + 1) < scaling_coefficient(l));
        }
    }

    #[test]
    fn eight_layers_halve_auxiliaries() {
        let c = ModelConfig::toy(8, 8, 2, 9, 4);
        let plain = xavier_init(c.clone(), 3).unwrap();
        let scaled = scaled_xavier_init(c, 3, false).unwrap();
        for (lp, ls) in plain.layers.iter().zip(&scaled.layers) {
            for (a, b) in lp.linears.iter().zip(&ls.linears) {
                for (x, y) in a.auxiliaries().iter().zip(b.auxiliaries()) {
                    assert_eq!(&x.scale(0.5), y);
                }
            }
        }
        for ((_, c1), (_, c2)) in plain.store.iter().zip(scaled.store.iter()) {
            assert_eq!(c1, c2);
        }
    }

    #[test]
    fn extension_parse() {
        assert_eq!(Extension::parse("scaled-donor"), Some(Extension::ScaledDonor));
        assert_eq!(Extension::parse("scaled-random"), Some(Extension::ScaledRandom));
        assert_eq!(Extension::parse("other"), None);
    }
}
