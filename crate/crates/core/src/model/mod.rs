//! Post-LN transformer encoder in which every weight matrix is an [`MpoLinear`].
//!
//! Each layer computes `x ← LN(x + MHA(x))`, `x ← LN(x + FF2(gelu(FF1(x))))`.
//! Token and position embeddings are dense; the MLM head is tied to the token
//! embedding (`logits = h · Eᵀ + b`). Forward and backward are written by hand.

pub mod ops;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlm::{mlm_loss, MaskedBatch};
use crate::mpo::{balanced_plan, exact_bonds, param_report_for_plan, DEFAULT_ORDER};
use crate::shared::{
    linear_backward, linear_forward, AdapterPair, CentralGrads, LinearCache, MpoLinear,
    ParamBreakdown, Role, RoleShape, SharedCentralStore, DEFAULT_ADAPTER_RANK,
};
use crate::tensor::{matmul, matmul_tn, DenseTensor, FactorPlan};
use ops::{attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mpo_order: usize,
    pub adapter_rank: usize,
    pub num_groups: usize,
    pub use_adapters: bool,
    pub use_sharing: bool,
    /// Every layer reuses one full set of layer parameters (the donor layout).
    #[serde(default)]
    pub share_all: bool,
}

impl ModelConfig {
    /// Defaults: `d_ff = 4H`, order 5, adapter rank 8, one group, adapters and sharing on.
    pub fn toy(layers: usize, hidden: usize, heads: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            ffn_dim: 4 * hidden,
            vocab_size,
            max_seq_len,
            mpo_order: DEFAULT_ORDER,
            adapter_rank: DEFAULT_ADAPTER_RANK,
            num_groups: 1,
            use_adapters: true,
            use_sharing: true,
            share_all: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("mpo_order", self.mpo_order),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.num_groups == 0 || self.num_groups > self.layers {
            return Err(Error::InvalidGroupCount {
                layers: self.layers,
                groups: self.num_groups,
            });
        }
        Ok(())
    }

    /// Number of distinct central groups actually used.
    pub fn effective_groups(&self) -> usize {
        if self.share_all {
            1
        } else if !self.use_sharing {
            self.layers
        } else {
            self.num_groups
        }
    }

    /// Number of stored per-layer parameter sets.
    pub fn param_layers(&self) -> usize {
        if self.share_all {
            1
        } else {
            self.layers
        }
    }

    pub fn adapter_rank(&self) -> Option<usize> {
        (self.use_adapters && self.adapter_rank > 0).then_some(self.adapter_rank)
    }

    pub fn dims(&self, role: Role) -> (usize, usize) {
        match role {
            Role::FfnIn => (self.hidden, self.ffn_dim),
            Role::FfnOut => (self.ffn_dim, self.hidden),
            _ => (self.hidden, self.hidden),
        }
    }

    pub fn plan(&self, role: Role) -> FactorPlan {
        let (i, j) = self.dims(role);
        balanced_plan(i, j, self.mpo_order)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: DenseTensor,
    pub beta: DenseTensor,
}

impl LayerNormParams {
    fn identity(h: usize) -> Result<Self> {
        Ok(Self {
            gamma: DenseTensor::from_fn(&[h], |_| 1.0)?,
            beta: DenseTensor::zeros(&[h])?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    /// Indexed in [`Role::ALL`] order.
    pub linears: Vec<MpoLinear>,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl EncoderLayer {
    pub fn linear(&self, role: Role) -> &MpoLinear {
        &self.linears[role_slot(role)]
    }

    pub fn linear_mut(&mut self, role: Role) -> &mut MpoLinear {
        &mut self.linears[role_slot(role)]
    }
}

fn role_slot(role: Role) -> usize {
    Role::ALL.iter().position(|&r| r == role).expect("role in ALL")
}

// ── parameter names ────────────────────────────────────────────────

pub const TOKEN_EMBEDDING: &str = "embed.token";
pub const POSITION_EMBEDDING: &str = "embed.position";
pub const OUTPUT_BIAS: &str = "head.bias";

pub fn aux_name(layer: usize, role: Role, k: usize) -> String {
    format!("layer.{layer}.{role}.aux.{k}")
}

pub fn adapter_u_name(layer: usize, role: Role) -> String {
    format!("layer.{layer}.{role}.adapter.u")
}

pub fn adapter_d_name(layer: usize, role: Role) -> String {
    format!("layer.{layer}.{role}.adapter.d")
}

pub fn bias_name(layer: usize, role: Role) -> String {
    format!("layer.{layer}.{role}.bias")
}

pub fn ln_name(layer: usize, which: usize, part: &str) -> String {
    format!("layer.{layer}.ln{which}.{part}")
}

pub fn central_name(role: Role, group: usize) -> String {
    format!("central.{role}.{group}")
}

/// Named gradients, keyed like the model's parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, DenseTensor>,
}

impl Grads {
    pub fn add(&mut self, name: String, grad: DenseTensor) -> Result<()> {
        match self.map.get_mut(&name) {
            Some(acc) => acc.axpy(1.0, &grad),
            None => {
                self.map.insert(name, grad);
                Ok(())
            }
        }
    }

    fn add_slice(&mut self, name: String, grad: Vec<f64>) -> Result<()> {
        let len = grad.len();
        self.add(name, DenseTensor::new(vec![len], grad)?)
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseTensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.map.values_mut().for_each(|t| t.scale_in_place(factor));
    }
}

// ── the model ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer {
    config: ModelConfig,
    pub token_emb: DenseTensor,
    pub pos_emb: DenseTensor,
    pub out_bias: DenseTensor,
    pub layers: Vec<EncoderLayer>,
    pub store: SharedCentralStore,
}

struct LayerCache {
    q: DenseTensor,
    k: DenseTensor,
    v: DenseTensor,
    attn: ops::AttentionCache,
    lin: Vec<LinearCache>,
    ln1: ops::LayerNormCache,
    ff_pre: DenseTensor,
    ln2: ops::LayerNormCache,
}

/// Activations retained by [`ToyTransformer::forward`] for the backward pass.
pub struct ForwardCache {
    tokens: Vec<Vec<usize>>,
    batch: usize,
    seq: usize,
    layers: Vec<LayerCache>,
    hidden: DenseTensor,
}

impl ForwardCache {
    pub fn final_hidden(&self) -> &DenseTensor {
        &self.hidden
    }
}

impl ToyTransformer {
    /// Correctly shaped model with zero weights (`γ = 1`).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let group_of = if config.share_all {
            vec![0; config.layers]
        } else {
            crate::shared::assign_groups(config.layers, config.effective_groups())?
        };
        let mut store = SharedCentralStore::new(group_of);
        let plans: Vec<FactorPlan> = Role::ALL.iter().map(|&r| config.plan(r)).collect();
        let core_shapes: Vec<Vec<Vec<usize>>> = plans
            .iter()
            .map(|p| {
                let bonds = exact_bonds(p);
                (0..p.order())
                    .map(|k| vec![bonds[k], p.row_factors()[k], p.col_factors()[k], bonds[k + 1]])
                    .collect()
            })
            .collect();

        let mut layers = Vec::with_capacity(config.param_layers());
        for l in 0..config.param_layers() {
            let group = store.group_of(l);
            let mut linears = Vec::with_capacity(Role::ALL.len());
            for (slot, &role) in Role::ALL.iter().enumerate() {
                let plan = &plans[slot];
                let ci = crate::mpo::central_index(plan.order());
                let mut aux = Vec::with_capacity(plan.order() - 1);
                for (k, shape) in core_shapes[slot].iter().enumerate() {
                    if k + 1 == ci {
                        if store.get(role, group).is_err() {
                            store.insert(role, group, DenseTensor::zeros(shape)?);
                        }
                    } else {
                        aux.push(DenseTensor::zeros(shape)?);
                    }
                }
                let adapter = match config.adapter_rank() {
                    Some(r) => Some(AdapterPair {
                        u: DenseTensor::zeros(&[plan.rows(), r])?,
                        d: DenseTensor::zeros(&[r, plan.cols()])?,
                    }),
                    None => None,
                };
                let bias = DenseTensor::zeros(&[plan.cols()])?;
                linears.push(MpoLinear::new(role, l, group, plan.clone(), aux, adapter, bias)?);
            }
            layers.push(EncoderLayer {
                linears,
                ln1: LayerNormParams::identity(h)?,
                ln2: LayerNormParams::identity(h)?,
            });
        }
        Ok(Self {
            token_emb: DenseTensor::zeros(&[config.vocab_size, h])?,
            pos_emb: DenseTensor::zeros(&[config.max_seq_len, h])?,
            out_bias: DenseTensor::zeros(&[config.vocab_size])?,
            layers,
            store,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter set used at `depth`.
    pub fn layer_at(&self, depth: usize) -> &EncoderLayer {
        &self.layers[if self.config.share_all { 0 } else { depth }]
    }

    fn param_index(&self, depth: usize) -> usize {
        if self.config.share_all {
            0
        } else {
            depth
        }
    }

    // ── parameter traversal ────────────────────────────────────────

    pub fn visit(&self, f: &mut dyn FnMut(&str, &DenseTensor)) {
        f(TOKEN_EMBEDDING, &self.token_emb);
        f(POSITION_EMBEDDING, &self.pos_emb);
        f(OUTPUT_BIAS, &self.out_bias);
        for (l, layer) in self.layers.iter().enumerate() {
            for lin in &layer.linears {
                let role = lin.role();
                for (k, a) in lin.auxiliaries().iter().enumerate() {
                    f(&aux_name(l, role, k), a);
                }
                if let Some(a) = lin.adapter() {
                    f(&adapter_u_name(l, role), &a.u);
                    f(&adapter_d_name(l, role), &a.d);
                }
                f(&bias_name(l, role), lin.bias());
            }
            f(&ln_name(l, 1, "gamma"), &layer.ln1.gamma);
            f(&ln_name(l, 1, "beta"), &layer.ln1.beta);
            f(&ln_name(l, 2, "gamma"), &layer.ln2.gamma);
            f(&ln_name(l, 2, "beta"), &layer.ln2.beta);
        }
        for (&(role, g), c) in self.store.iter() {
            f(&central_name(role, g), c);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor)) {
        f(TOKEN_EMBEDDING, &mut self.token_emb);
        f(POSITION_EMBEDDING, &mut self.pos_emb);
        f(OUTPUT_BIAS, &mut self.out_bias);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for lin in layer.linears.iter_mut() {
                let role = lin.role();
                for (k, a) in lin.auxiliaries_mut().iter_mut().enumerate() {
                    f(&aux_name(l, role, k), a);
                }
                if let Some(a) = lin.adapter_mut() {
                    f(&adapter_u_name(l, role), &mut a.u);
                    f(&adapter_d_name(l, role), &mut a.d);
                }
                f(&bias_name(l, role), lin.bias_mut());
            }
            f(&ln_name(l, 1, "gamma"), &mut layer.ln1.gamma);
            f(&ln_name(l, 1, "beta"), &mut layer.ln1.beta);
            f(&ln_name(l, 2, "gamma"), &mut layer.ln2.gamma);
            f(&ln_name(l, 2, "beta"), &mut layer.ln2.beta);
        }
        for (&(role, g), c) in self.store.iter_mut() {
            f(&central_name(role, g), c);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn param(&self, name: &str) -> Option<DenseTensor> {
        let mut out = None;
        self.visit(&mut |n, t| {
            if n == name {
                out = Some(t.clone());
            }
        });
        out
    }

    /// Applies `f` to the named parameter; errors if no such parameter exists.
    pub fn with_param_mut(&mut self, name: &str, f: impl FnOnce(&mut DenseTensor)) -> Result<()> {
        let mut f = Some(f);
        self.visit_mut(&mut |n, t| {
            if n == name {
                if let Some(f) = f.take() {
                    f(t);
                }
            }
        });
        if f.is_some() {
            return Err(Error::UnknownParameter(name.to_string()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// `θ ← θ − lr · g` for every parameter with a gradient.
    pub fn apply_sgd(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        let mut result = Ok(());
        self.visit_mut(&mut |name, t| {
            if let Some(g) = grads.get(name) {
                if let Err(e) = t.axpy(-lr, g) {
                    result = Err(e);
                }
            }
        });
        result
    }

    // ── forward ────────────────────────────────────────────────────

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<(usize, usize)> {
        let batch = tokens.len();
        let seq = tokens.first().map_or(0, Vec::len);
        if batch == 0 || seq == 0 {
            return Err(Error::ShapeMismatch("empty token batch".into()));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {seq} exceeds maximum {}",
                self.config.max_seq_len
            )));
        }
        for s in tokens {
            if s.len() != seq {
                return Err(Error::ShapeMismatch(format!(
                    "ragged batch: lengths {} and {}",
                    seq,
                    s.len()
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok((batch, seq))
    }

    /// Token plus position embedding, `(batch·seq) × hidden`.
    pub fn embed(&self, tokens: &[Vec<usize>]) -> Result<DenseTensor> {
        let (batch, seq) = self.check_tokens(tokens)?;
        let h = self.config.hidden;
        let mut x = DenseTensor::zeros(&[batch * seq, h])?;
        for (b, s) in tokens.iter().enumerate() {
            for (t, &tok) in s.iter().enumerate() {
                let row = &mut x.data_mut()[(b * seq + t) * h..][..h];
                let e = &self.token_emb.data()[tok * h..][..h];
                let p = &self.pos_emb.data()[t * h..][..h];
                for ((r, a), c) in row.iter_mut().zip(e).zip(p) {
                    *r = a + c;
                }
            }
        }
        Ok(x)
    }

    /// One encoder layer on `x: (batch·seq) × hidden`.
    pub fn layer_forward(&self, x: &DenseTensor, batch: usize, seq: usize, depth: usize) -> Result<DenseTensor> {
        Ok(self.layer_forward_cached(x, batch, seq, depth)?.0)
    }

    fn layer_forward_cached(
        &self,
        x: &DenseTensor,
        batch: usize,
        seq: usize,
        depth: usize,
    ) -> Result<(DenseTensor, LayerCache)> {
        if depth >= self.config.layers {
            return Err(Error::ShapeMismatch(format!(
                "layer {depth} of a {}-layer model",
                self.config.layers
            )));
        }
        if x.rank() != 2 || x.rows() != batch * seq || x.cols() != self.config.hidden {
            return Err(Error::ShapeMismatch(format!(
                "layer input {:?} for batch {batch}, seq {seq}, hidden {}",
                x.shape(),
                self.config.hidden
            )));
        }
        let layer = self.layer_at(depth);
        let store = &self.store;
        let (q, cq) = linear_forward(x, layer.linear(Role::Query), store)?;
        let (k, ck) = linear_forward(x, layer.linear(Role::Key), store)?;
        let (v, cv) = linear_forward(x, layer.linear(Role::Value), store)?;
        let (ctx, attn) = attention(&q, &k, &v, batch, seq, self.config.heads)?;
        let (a, co) = linear_forward(&ctx, layer.linear(Role::Output), store)?;
        let (x1, ln1) = layer_norm(&x.add(&a)?, layer.ln1.gamma.data(), layer.ln1.beta.data())?;

        let (ff_pre, c1) = linear_forward(&x1, layer.linear(Role::FfnIn), store)?;
        let mut act = ff_pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let (f2, c2) = linear_forward(&act, layer.linear(Role::FfnOut), store)?;
        let (x2, ln2) = layer_norm(&x1.add(&f2)?, layer.ln2.gamma.data(), layer.ln2.beta.data())?;
        Ok((
            x2,
            LayerCache {
                q,
                k,
                v,
                attn,
                lin: vec![cq, ck, cv, co, c1, c2],
                ln1,
                ff_pre,
                ln2,
            },
        ))
    }

    /// Logits `(batch·seq) × vocab` plus the cache for [`Self::backward`].
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<(DenseTensor, ForwardCache)> {
        let (batch, seq) = self.check_tokens(tokens)?;
        let mut h = self.embed(tokens)?;
        let mut caches = Vec::with_capacity(self.config.layers);
        for depth in 0..self.config.layers {
            let (next, cache) = self.layer_forward_cached(&h, batch, seq, depth)?;
            caches.push(cache);
            h = next;
        }
        let logits = self.head(&h)?;
        Ok((
            logits,
            ForwardCache {
                tokens: tokens.to_vec(),
                batch,
                seq,
                layers: caches,
                hidden: h,
            },
        ))
    }

    pub fn logits(&self, tokens: &[Vec<usize>]) -> Result<DenseTensor> {
        Ok(self.forward(tokens)?.0)
    }

    /// Tied output projection `h · Eᵀ + b`.
    pub fn head(&self, hidden: &DenseTensor) -> Result<DenseTensor> {
        let mut logits = crate::tensor::matmul_nt(hidden, &self.token_emb)?;
        let v = self.config.vocab_size;
        for row in logits.data_mut().chunks_mut(v) {
            row.iter_mut().zip(self.out_bias.data()).for_each(|(z, b)| *z += b);
        }
        Ok(logits)
    }

    // ── backward ───────────────────────────────────────────────────

    pub fn backward(&self, cache: &ForwardCache, grad_logits: &DenseTensor) -> Result<Grads> {
        let h = self.config.hidden;
        let vocab = self.config.vocab_size;
        let (batch, seq) = (cache.batch, cache.seq);
        if grad_logits.shape() != [batch * seq, vocab] {
            return Err(Error::ShapeMismatch(format!(
                "logit gradient {:?} for ({}, {vocab})",
                grad_logits.shape(),
                batch * seq
            )));
        }
        let mut grads = Grads::default();
        let mut centrals = CentralGrads::new();

        // head: logits = H · Eᵀ + b
        let mut d_out_bias = vec![0.0; vocab];
        for row in grad_logits.data().chunks(vocab) {
            d_out_bias.iter_mut().zip(row).for_each(|(a, g)| *a += g);
        }
        grads.add_slice(OUTPUT_BIAS.into(), d_out_bias)?;
        grads.add(TOKEN_EMBEDDING.into(), matmul_tn(grad_logits, &cache.hidden)?)?;
        let mut dx = matmul(grad_logits, &self.token_emb)?;

        for depth in (0..self.config.layers).rev() {
            dx = self.layer_backward(&dx, &cache.layers[depth], depth, batch, seq, &mut grads, &mut centrals)?;
        }

        // embeddings
        let mut d_tok = DenseTensor::zeros(self.token_emb.shape())?;
        let mut d_pos = DenseTensor::zeros(self.pos_emb.shape())?;
        for (b, s) in cache.tokens.iter().enumerate() {
            for (t, &tok) in s.iter().enumerate() {
                let g = &dx.data()[(b * seq + t) * h..][..h];
                d_tok.data_mut()[tok * h..][..h].iter_mut().zip(g).for_each(|(a, v)| *a += v);
                d_pos.data_mut()[t * h..][..h].iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
        grads.add(TOKEN_EMBEDDING.into(), d_tok)?;
        grads.add(POSITION_EMBEDDING.into(), d_pos)?;

        for ((role, g), t) in centrals.into_inner() {
            grads.add(central_name(role, g), t)?;
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        dx2: &DenseTensor,
        cache: &LayerCache,
        depth: usize,
        batch: usize,
        seq: usize,
        grads: &mut Grads,
        centrals: &mut CentralGrads,
    ) -> Result<DenseTensor> {
        let layer = self.layer_at(depth);
        let p = self.param_index(depth);
        let store = &self.store;

        let (ds2, dg2, db2) = layer_norm_backward(dx2, &cache.ln2, layer.ln2.gamma.data())?;
        grads.add_slice(ln_name(p, 2, "gamma"), dg2)?;
        grads.add_slice(ln_name(p, 2, "beta"), db2)?;

        let mut linear_grads = |role: Role, gy: &DenseTensor, grads: &mut Grads| -> Result<DenseTensor> {
            let lin = layer.linear(role);
            let g = linear_backward(gy, &cache.lin[role_slot(role)], lin, store, centrals)?;
            for (k, a) in g.auxiliaries.into_iter().enumerate() {
                grads.add(aux_name(p, role, k), a)?;
            }
            if let (Some(u), Some(d)) = (g.adapter_u, g.adapter_d) {
                grads.add(adapter_u_name(p, role), u)?;
                grads.add(adapter_d_name(p, role), d)?;
            }
            grads.add(bias_name(p, role), g.bias)?;
            Ok(g.x)
        };

        let mut d_act = linear_grads(Role::FfnOut, &ds2, grads)?;
        d_act
            .data_mut()
            .iter_mut()
            .zip(cache.ff_pre.data())
            .for_each(|(d, &z)| *d *= gelu_grad(z));
        let dx1_ff = linear_grads(Role::FfnIn, &d_act, grads)?;
        let dx1 = ds2.add(&dx1_ff)?;

        let (ds1, dg1, db1) = layer_norm_backward(&dx1, &cache.ln1, layer.ln1.gamma.data())?;
        grads.add_slice(ln_name(p, 1, "gamma"), dg1)?;
        grads.add_slice(ln_name(p, 1, "beta"), db1)?;

        let dctx = linear_grads(Role::Output, &ds1, grads)?;
        let (dq, dk, dv) = attention_backward(
            &dctx,
            &cache.q,
            &cache.k,
            &cache.v,
            &cache.attn,
            batch,
            seq,
            self.config.heads,
        )?;
        let mut dx = ds1;
        dx.axpy(1.0, &linear_grads(Role::Query, &dq, grads)?)?;
        dx.axpy(1.0, &linear_grads(Role::Key, &dk, grads)?)?;
        dx.axpy(1.0, &linear_grads(Role::Value, &dv, grads)?)?;
        Ok(dx)
    }

    /// Forward, MLM loss and backward on one masked batch.
    pub fn loss_and_grads(&self, batch: &MaskedBatch) -> Result<(f64, Grads)> {
        let (logits, cache) = self.forward(&batch.inputs)?;
        let loss = mlm_loss(&logits, batch)?;
        let grads = self.backward(&cache, &loss.grad)?;
        Ok((loss.loss, grads))
    }

    // ── accounting ─────────────────────────────────────────────────

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let roles: Vec<RoleShape> = Role::ALL
            .iter()
            .map(|&role| {
                let plan = self.config.plan(role);
                let (d_in, d_out) = self.config.dims(role);
                RoleShape {
                    role,
                    report: param_report_for_plan(&plan),
                    d_in,
                    d_out,
                }
            })
            .collect();
        let h = self.config.hidden;
        let other = self.token_emb.len()
            + self.pos_emb.len()
            + self.out_bias.len()
            + self.config.layers * 4 * h;
        crate::shared::param_breakdown(
            &roles,
            self.config.layers,
            self.config.effective_groups(),
            self.config.adapter_rank(),
            other,
        )
    }
}

/// One SGD step on a clone of `model`; returns the Frobenius norm of the
/// change in logits on the same batch.
pub fn model_update_norm(model: &ToyTransformer, batch: &MaskedBatch, lr: f64) -> Result<f64> {
    let (logits, cache) = model.forward(&batch.inputs)?;
    if lr == 0.0 {
        return Ok(0.0);
    }
    let loss = mlm_loss(&logits, batch)?;
    let grads = model.backward(&cache, &loss.grad)?;
    let mut stepped = model.clone();
    stepped.apply_sgd(&grads, lr)?;
    let after = stepped.logits(&batch.inputs)?;
    Ok(after.sub(&logits)?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy(2, 8, 3, 11, 4);
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        c.heads = 2;
        assert!(c.validate().is_ok());
        c.num_groups = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidGroupCount { .. })));
    }

    #[test]
    fn zero_model_layout() {
        let c = ModelConfig::toy(3, 8, 2, 11, 4);
        let m = ToyTransformer::zeros(c.clone()).unwrap();
        assert_eq!(m.layers.len(), 3);
        assert_eq!(m.store.len(), 6);
        let names = m.param_names();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());

        let mut unshared = c.clone();
        unshared.use_sharing = false;
        assert_eq!(ToyTransformer::zeros(unshared).unwrap().store.len(), 18);

        let mut albert = c;
        albert.share_all = true;
        albert.mpo_order = 1;
        let m = ToyTransformer::zeros(albert).unwrap();
        assert_eq!(m.layers.len(), 1);
        assert!(m.layers[0].linears.iter().all(|l| l.auxiliaries().is_empty()));
    }

    #[test]
    fn unknown_parameter_is_an_error() {
        let mut m = ToyTransformer::zeros(ModelConfig::toy(1, 4, 2, 5, 3)).unwrap();
        assert!(matches!(
            m.with_param_mut("nope", |_| {}),
            Err(Error::UnknownParameter(_))
        ));
        m.with_param_mut(OUTPUT_BIAS, |t| t.data_mut()[0] = 3.0).unwrap();
        assert_eq!(m.out_bias.data()[0], 3.0);
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = ToyTransformer::zeros(ModelConfig::toy(1, 4, 2, 5, 3)).unwrap();
        assert!(matches!(m.logits(&[vec![1, 9]]), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(m.logits(&[vec![1, 2, 3, 4]]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(m.logits(&[vec![1], vec![1, 2]]), Err(Error::ShapeMismatch(_))));
    }
}
