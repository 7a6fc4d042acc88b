//! Update-norm experiments: a scalar Post-LN chain with `θ_l = u_l · c · v_l`,
//! and the same measurement on the toy transformer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{scaled_xavier_init, xavier_init};
use crate::mlm::{mlm_mask, MaskedBatch};
use crate::model::{model_update_norm, ModelConfig};

// ── scalar chain ───────────────────────────────────────────────────

/// Depth-`N` chain `x_{l+1} = m(θ_l) · x_l` with `m(θ) = (1+θ)/√(1+θ²)`,
/// loss `½(F − y)²`. The factor `c` is shared by every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarChain {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub c: f64,
    pub x: f64,
    pub y: f64,
    pub lr: f64,
}

pub fn multiplier(theta: f64) -> f64 {
    (1.0 + theta) / (1.0 + theta * theta).sqrt()
}

pub fn multiplier_grad(theta: f64) -> f64 {
    (1.0 - theta) / (1.0 + theta * theta).powf(1.5)
}

impl ScalarChain {
    pub fn uniform(depth: usize, uv: f64, c: f64, x: f64, y: f64, lr: f64) -> Self {
        Self {
            u: vec![uv; depth],
            v: vec![uv; depth],
            c,
            x,
            y,
            lr,
        }
    }

    pub fn depth(&self) -> usize {
        self.u.len()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(u, v)| u * self.c * v).collect()
    }

    pub fn loss(&self) -> f64 {
        let r = scalar_forward(self, self.x) - self.y;
        0.5 * r * r
    }

    /// `(v_i² + u_i²) · u_N v_N`, maximized over `i`.
    pub fn corollary_quantity(&self) -> f64 {
        let n = self.depth();
        if n == 0 {
            return 0.0;
        }
        let tail = self.u[n - 1] * self.v[n - 1];
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| (u * u + v * v) * tail)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn scalar_forward(chain: &ScalarChain, x: f64) -> f64 {
    chain.thetas().into_iter().fold(x, |acc, t| multiplier(t) * acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainGrads {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Total over layers.
    pub c: f64,
    /// Contribution of each layer to `c`.
    pub c_per_layer: Vec<f64>,
}

/// Analytic gradients of `½(F − y)²`.
pub fn chain_gradients(chain: &ScalarChain) -> ChainGrads {
    let thetas = chain.thetas();
    let m: Vec<f64> = thetas.iter().map(|&t| multiplier(t)).collect();
    let n = m.len();
    // prefix[l] = Π_{k<l} m_k, suffix[l] = Π_{k>l} m_k
    let mut prefix = vec![1.0; n + 1];
    for l in 0..n {
        prefix[l + 1] = prefix[l] * m[l];
    }
    let mut suffix = vec![1.0; n + 1];
    for l in (0..n).rev() {
        suffix[l] = suffix[l + 1] * m[l];
    }
    let residual = chain.x * prefix[n] - chain.y;
    let mut g = ChainGrads {
        u: vec![0.0; n],
        v: vec![0.0; n],
        c: 0.0,
        c_per_layer: vec![0.0; n],
    };
    for l in 0..n {
        let d_theta = residual * chain.x * prefix[l] * suffix[l + 1] * multiplier_grad(thetas[l]);
        g.u[l] = d_theta * chain.c * chain.v[l];
        g.v[l] = d_theta * chain.c * chain.u[l];
        g.c_per_layer[l] = d_theta * chain.u[l] * chain.v[l];
    }
    g.c = g.c_per_layer.iter().sum();
    g
}

pub fn sgd_step(chain: &ScalarChain) -> ScalarChain {
    let g = chain_gradients(chain);
    let mut next = chain.clone();
    next.u.iter_mut().zip(&g.u).for_each(|(p, d)| *p -= chain.lr * d);
    next.v.iter_mut().zip(&g.v).for_each(|(p, d)| *p -= chain.lr * d);
    next.c -= chain.lr * g.c;
    next
}

/// `|F_after − F_before|` for one SGD step.
pub fn scalar_update_norm(chain: &ScalarChain) -> f64 {
    if chain.lr == 0.0 {
        return 0.0;
    }
    let before = scalar_forward(chain, chain.x);
    let after = scalar_forward(&sgd_step(chain), chain.x);
    (after - before).abs()
}

// ── sweeps ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// `u = v = 1` (scalar) or plain Xavier (transformer).
    Unit,
    /// `u = v = (2N)^(-1/4)` (scalar) or scaled Xavier (transformer).
    Scaled,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Unit => "unit",
            Scheme::Scaled => "scaled",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        match s {
            "unit" | "unscaled" => Some(Scheme::Unit),
            "scaled" => Some(Scheme::Scaled),
            _ => None,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub depth: usize,
    pub scheme: Scheme,
    pub delta_f: f64,
    /// Per-layer `θ` at initialization; empty for transformer sweeps.
    pub thetas: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    pub fn deltas(&self, scheme: Scheme) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.scheme == scheme)
            .map(|r| r.delta_f)
            .collect()
    }

    /// Last over first `|ΔF|` for `scheme`.
    pub fn growth_ratio(&self, scheme: Scheme) -> f64 {
        let d = self.deltas(scheme);
        match (d.first(), d.last()) {
            (Some(a), Some(b)) => b / a,
            _ => f64::NAN,
        }
    }

    pub fn max_min_ratio(&self, scheme: Scheme) -> f64 {
        let d = self.deltas(scheme);
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }

    pub fn extend(&mut self, other: SweepResult) {
        self.records.extend(other.records);
    }
}

fn check_depths(depths: &[usize]) -> Result<()> {
    if depths.is_empty() || depths.contains(&0) {
        return Err(Error::InvalidConfig("depths must be non-empty and positive".into()));
    }
    if depths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!("depths {depths:?} are not strictly ascending")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarSweepConfig {
    pub c: f64,
    pub x: f64,
    pub y: f64,
    pub lr: f64,
}

impl Default for ScalarSweepConfig {
    fn default() -> Self {
        Self {
            c: 0.5,
            x: 1.0,
            y: 0.0,
            lr: 1e-3,
        }
    }
}

pub fn scalar_chain_for(depth: usize, scheme: Scheme, cfg: &ScalarSweepConfig) -> ScalarChain {
    let uv = match scheme {
        Scheme::Unit => 1.0,
        Scheme::Scaled => (2.0 * depth as f64).powf(-0.25),
    };
    ScalarChain::uniform(depth, uv, cfg.c, cfg.x, cfg.y, cfg.lr)
}

pub fn depth_sweep(depths: &[usize], scheme: Scheme, cfg: &ScalarSweepConfig) -> Result<SweepResult> {
    check_depths(depths)?;
    let records = depths
        .iter()
        .map(|&depth| {
            let chain = scalar_chain_for(depth, scheme, cfg);
            SweepRecord {
                depth,
                scheme,
                delta_f: scalar_update_norm(&chain),
                thetas: chain.thetas(),
            }
        })
        .collect();
    Ok(SweepResult { records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerSweepConfig {
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub mpo_order: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TransformerSweepConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            heads: 2,
            vocab_size: 32,
            seq_len: 8,
            batch: 4,
            mpo_order: 5,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TransformerSweepConfig {
    pub fn model_config(&self, depth: usize) -> ModelConfig {
        let mut c = ModelConfig::toy(depth, self.hidden, self.heads, self.vocab_size, self.seq_len);
        c.mpo_order = self.mpo_order;
        c
    }

    /// Seeded batch of regular tokens with MLM corruption; at least one position is selected.
    pub fn batch(&self) -> Result<MaskedBatch> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let first = crate::mlm::FIRST_REGULAR_ID;
        let tokens: Vec<Vec<usize>> = (0..self.batch)
            .map(|_| {
                (0..self.seq_len)
                    .map(|_| rng.random_range(first..self.vocab_size))
                    .collect()
            })
            .collect();
        let mut batch = mlm_mask(&tokens, self.vocab_size, self.seed)?;
        if batch.masked_count() == 0 {
            batch.selected[0][0] = true;
        }
        Ok(batch)
    }
}

/// `‖ΔF‖` (Frobenius norm of the logit change after one SGD step) per depth.
pub fn transformer_depth_sweep(
    depths: &[usize],
    scheme: Scheme,
    cfg: &TransformerSweepConfig,
) -> Result<SweepResult> {
    check_depths(depths)?;
    let batch = cfg.batch()?;
    let mut records = Vec::with_capacity(depths.len());
    for &depth in depths {
        let config = cfg.model_config(depth);
        let model = match scheme {
            Scheme::Unit => xavier_init(config, cfg.seed)?,
            Scheme::Scaled => scaled_xavier_init(config, cfg.seed, false)?,
        };
        records.push(SweepRecord {
            depth,
            scheme,
            delta_f: model_update_norm(&model, &batch, cfg.lr)?,
            thetas: Vec::new(),
        });
    }
    Ok(SweepResult { records })
}
