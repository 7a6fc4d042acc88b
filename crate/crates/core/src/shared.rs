//! MPO linear layers whose central cores are shared across a group of layers.
//!
//! Each layer keeps its own auxiliary cores, a low-rank adapter `U·D` and a
//! bias; the central core lives once per `(role, group)` in a
//! [`SharedCentralStore`]. The effective weight of layer `l` is
//! `reconstruct(aux_l ∘ C_group(l) ∘ aux_l) + U_l · D_l`, applied as `y = x·W + b`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpo::{chain_with_central, core_gradients, reconstruct_cores, MpoTensorSet, ParamReport};
use crate::tensor::{matmul, matmul_nt, matmul_tn, DenseTensor, FactorPlan};

/// Standard deviation of the Gaussian used for adapter `D` at initialization.
pub const ADAPTER_INIT_STD: f64 = 0.02;
pub const DEFAULT_ADAPTER_RANK: usize = 8;

/// The six weight matrices of a transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Query,
        Role::Key,
        Role::Value,
        Role::Output,
        Role::FfnIn,
        Role::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Query => "q",
            Role::Key => "k",
            Role::Value => "v",
            Role::Output => "o",
            Role::FfnIn => "ff1",
            Role::FfnOut => "ff2",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == s)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ── layer groups ───────────────────────────────────────────────────

/// Contiguous layer blocks whose sizes differ by at most one, larger blocks first.
pub fn assign_groups(num_layers: usize, num_groups: usize) -> Result<Vec<usize>> {
    if num_groups == 0 || num_groups > num_layers {
        return Err(Error::InvalidGroupCount {
            layers: num_layers,
            groups: num_groups,
        });
    }
    let base = num_layers / num_groups;
    let extra = num_layers % num_groups;
    let mut group_of = Vec::with_capacity(num_layers);
    for g in 0..num_groups {
        let size = base + usize::from(g < extra);
        group_of.extend(std::iter::repeat_n(g, size));
    }
    Ok(group_of)
}

// ── central store ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct SharedCentralStore {
    entries: BTreeMap<(Role, usize), DenseTensor>,
    group_of: Vec<usize>,
    generation: u64,
}

impl SharedCentralStore {
    pub fn new(group_of: Vec<usize>) -> Self {
        Self {
            entries: BTreeMap::new(),
            group_of,
            generation: 0,
        }
    }

    pub fn with_groups(num_layers: usize, num_groups: usize) -> Result<Self> {
        Ok(Self::new(assign_groups(num_layers, num_groups)?))
    }

    pub fn group_of(&self, layer: usize) -> usize {
        self.group_of[layer]
    }

    pub fn group_map(&self) -> &[usize] {
        &self.group_of
    }

    pub fn num_groups(&self) -> usize {
        self.group_of.iter().max().map_or(0, |g| g + 1)
    }

    pub fn insert(&mut self, role: Role, group: usize, central: DenseTensor) {
        self.generation += 1;
        self.entries.insert((role, group), central);
    }

    pub fn get(&self, role: Role, group: usize) -> Result<&DenseTensor> {
        self.entries
            .get(&(role, group))
            .ok_or_else(|| Error::MissingCentral(format!("role {role}, group {group}")))
    }

    pub fn get_mut(&mut self, role: Role, group: usize) -> Result<&mut DenseTensor> {
        self.generation += 1;
        self.entries
            .get_mut(&(role, group))
            .ok_or_else(|| Error::MissingCentral(format!("role {role}, group {group}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(Role, usize), &DenseTensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&(Role, usize), &mut DenseTensor)> {
        self.generation += 1;
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}

// ── adapter ────────────────────────────────────────────────────────

/// Additive low-rank correction `U · D`, `U: d_in × r`, `D: r × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair {
    pub u: DenseTensor,
    pub d: DenseTensor,
}

impl AdapterPair {
    /// `U = 0`, `D ~ N(0, std²)`.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rank: usize, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidConfig(format!("adapter std {std}: {e}")))?;
        Ok(Self {
            u: DenseTensor::zeros(&[d_in, rank])?,
            d: DenseTensor::from_fn(&[rank, d_out], |_| normal.sample(rng))?,
        })
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn product(&self) -> Result<DenseTensor> {
        matmul(&self.u, &self.d)
    }

    pub fn param_count(&self) -> usize {
        self.u.len() + self.d.len()
    }
}

/// `L · r · (d_in + d_out)`
pub fn adapter_param_count(layers: usize, rank: usize, d_in: usize, d_out: usize) -> usize {
    layers * rank * (d_in + d_out)
}

// ── the layer ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct MpoLinear {
    role: Role,
    layer: usize,
    group: usize,
    plan: FactorPlan,
    central_index: usize,
    auxiliaries: Vec<DenseTensor>,
    adapter: Option<AdapterPair>,
    bias: DenseTensor,
    generation: u64,
}

impl MpoLinear {
    pub fn new(
        role: Role,
        layer: usize,
        group: usize,
        plan: FactorPlan,
        auxiliaries: Vec<DenseTensor>,
        adapter: Option<AdapterPair>,
        bias: DenseTensor,
    ) -> Result<Self> {
        let n = plan.order();
        if auxiliaries.len() + 1 != n {
            return Err(Error::ShapeMismatch(format!(
                "{} auxiliaries for an order-{n} plan",
                auxiliaries.len()
            )));
        }
        if bias.shape() != [plan.cols()] {
            return Err(Error::ShapeMismatch(format!(
                "bias {:?} for output width {}",
                bias.shape(),
                plan.cols()
            )));
        }
        if let Some(a) = &adapter {
            if a.u.rows() != plan.rows() || a.d.cols() != plan.cols() || a.u.cols() != a.d.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "adapter {:?}·{:?} for a {}x{} weight",
                    a.u.shape(),
                    a.d.shape(),
                    plan.rows(),
                    plan.cols()
                )));
            }
        }
        Ok(Self {
            role,
            layer,
            group,
            central_index: crate::mpo::central_index(n),
            plan,
            auxiliaries,
            adapter,
            bias,
            generation: 0,
        })
    }

    /// Splits a full MPO set into layer-owned auxiliaries (returned layer) and the
    /// central core (returned separately, for the store).
    pub fn from_set(
        role: Role,
        layer: usize,
        group: usize,
        set: &MpoTensorSet,
        adapter: Option<AdapterPair>,
        bias: DenseTensor,
    ) -> Result<(Self, DenseTensor)> {
        let split = crate::mpo::split_central_aux(set);
        let lin = Self::new(
            role,
            layer,
            group,
            set.plan().clone(),
            split.auxiliaries,
            adapter,
            bias,
        )?;
        Ok((lin, split.central))
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn plan(&self) -> &FactorPlan {
        &self.plan
    }

    pub fn d_in(&self) -> usize {
        self.plan.rows()
    }

    pub fn d_out(&self) -> usize {
        self.plan.cols()
    }

    pub fn central_index(&self) -> usize {
        self.central_index
    }

    pub fn auxiliaries(&self) -> &[DenseTensor] {
        &self.auxiliaries
    }

    pub fn auxiliaries_mut(&mut self) -> &mut [DenseTensor] {
        self.generation += 1;
        &mut self.auxiliaries
    }

    pub fn adapter(&self) -> Option<&AdapterPair> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut AdapterPair> {
        self.generation += 1;
        self.adapter.as_mut()
    }

    pub fn bias(&self) -> &DenseTensor {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut DenseTensor {
        self.generation += 1;
        &mut self.bias
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Cores in chain order with the shared central slotted in.
    pub fn chain<'a>(&'a self, store: &'a SharedCentralStore) -> Result<Vec<&'a DenseTensor>> {
        let central = store.get(self.role, self.group)?;
        Ok(chain_with_central(&self.auxiliaries, central, self.central_index))
    }

    /// MPO part of the weight, without the adapter.
    pub fn mpo_weight(&self, store: &SharedCentralStore) -> Result<DenseTensor> {
        reconstruct_cores(&self.chain(store)?, &self.plan)
    }

    pub fn effective_weight(&self, store: &SharedCentralStore) -> Result<DenseTensor> {
        let w = self.mpo_weight(store)?;
        match &self.adapter {
            Some(a) => w.add(&a.product()?),
            None => Ok(w),
        }
    }

    /// Parameters owned by this layer (auxiliaries, adapter, bias).
    pub fn owned_param_count(&self) -> usize {
        self.auxiliaries.iter().map(DenseTensor::len).sum::<usize>()
            + self.adapter.as_ref().map_or(0, AdapterPair::param_count)
            + self.bias.len()
    }
}

/// What [`linear_forward`] keeps for the matching backward pass.
#[derive(Clone, Debug)]
pub struct LinearCache {
    role: Role,
    layer: usize,
    layer_generation: u64,
    store_generation: u64,
    x: DenseTensor,
    w_eff: DenseTensor,
}

impl LinearCache {
    pub fn input(&self) -> &DenseTensor {
        &self.x
    }

    pub fn weight(&self) -> &DenseTensor {
        &self.w_eff
    }
}

/// `y = x · W_eff + b` for `x: batch × d_in`.
pub fn linear_forward(
    x: &DenseTensor,
    layer: &MpoLinear,
    store: &SharedCentralStore,
) -> Result<(DenseTensor, LinearCache)> {
    x.expect_rank(2)?;
    if x.cols() != layer.d_in() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} for a layer expecting {}",
            x.cols(),
            layer.d_in()
        )));
    }
    let w_eff = layer.effective_weight(store)?;
    let mut y = matmul(x, &w_eff)?;
    let d_out = layer.d_out();
    let bias = layer.bias.data();
    for row in y.data_mut().chunks_mut(d_out) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    let cache = LinearCache {
        role: layer.role,
        layer: layer.layer,
        layer_generation: layer.generation,
        store_generation: store.generation(),
        x: x.clone(),
        w_eff,
    };
    Ok((y, cache))
}

/// Gradients from one backward call through an [`MpoLinear`].
#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub x: DenseTensor,
    /// This call's contribution to the shared central (also added to the accumulator).
    pub central: DenseTensor,
    pub auxiliaries: Vec<DenseTensor>,
    pub adapter_u: Option<DenseTensor>,
    pub adapter_d: Option<DenseTensor>,
    pub bias: DenseTensor,
}

/// Shared-central gradients summed over every layer that references them.
#[derive(Clone, Debug, Default)]
pub struct CentralGrads {
    entries: BTreeMap<(Role, usize), DenseTensor>,
}

impl CentralGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, role: Role, group: usize, grad: &DenseTensor) -> Result<()> {
        match self.entries.get_mut(&(role, group)) {
            Some(acc) => acc.axpy(1.0, grad),
            None => {
                self.entries.insert((role, group), grad.clone());
                Ok(())
            }
        }
    }

    pub fn get(&self, role: Role, group: usize) -> Option<&DenseTensor> {
        self.entries.get(&(role, group))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(Role, usize), &DenseTensor)> {
        self.entries.iter()
    }

    pub fn into_inner(self) -> BTreeMap<(Role, usize), DenseTensor> {
        self.entries
    }
}

pub fn linear_backward(
    grad_y: &DenseTensor,
    cache: &LinearCache,
    layer: &MpoLinear,
    store: &SharedCentralStore,
    central_grads: &mut CentralGrads,
) -> Result<LinearGrads> {
    if cache.role != layer.role
        || cache.layer != layer.layer
        || cache.layer_generation != layer.generation
        || cache.store_generation != store.generation()
    {
        return Err(Error::StaleCache(format!(
            "cache from {} layer {} does not match the current {} layer {}",
            cache.role, cache.layer, layer.role, layer.layer
        )));
    }
    grad_y.expect_rank(2)?;
    if grad_y.rows() != cache.x.rows() || grad_y.cols() != layer.d_out() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} for output ({}, {})",
            grad_y.shape(),
            cache.x.rows(),
            layer.d_out()
        )));
    }

    let grad_w = matmul_tn(&cache.x, grad_y)?;
    let grad_x = matmul_nt(grad_y, &cache.w_eff)?;

    let mut core_grads = core_gradients(&layer.chain(store)?, &layer.plan, &grad_w)?;
    let central = core_grads.remove(layer.central_index - 1);
    central_grads.add(layer.role, layer.group, &central)?;

    let (adapter_u, adapter_d) = match &layer.adapter {
        Some(a) => (
            Some(matmul_nt(&grad_w, &a.d)?),
            Some(matmul_tn(&a.u, &grad_w)?),
        ),
        None => (None, None),
    };

    let d_out = layer.d_out();
    let mut bias = vec![0.0; d_out];
    for row in grad_y.data().chunks(d_out) {
        bias.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }

    Ok(LinearGrads {
        x: grad_x,
        central,
        auxiliaries: core_grads,
        adapter_u,
        adapter_d,
        bias: DenseTensor::new(vec![d_out], bias)?,
    })
}

// ── parameter accounting ───────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingMode {
    /// One central per (role, group); auxiliaries, adapters and biases per layer.
    SharedCentral,
    /// Every layer holds a full MPO set.
    Unshared,
    /// Centrals and auxiliaries both shared per group; adapters and biases per layer.
    AllShared,
}

impl SharingMode {
    pub fn parse(s: &str) -> Option<SharingMode> {
        match s {
            "shared" | "shared-central" => Some(SharingMode::SharedCentral),
            "unshared" => Some(SharingMode::Unshared),
            "all-shared" => Some(SharingMode::AllShared),
            _ => None,
        }
    }
}

/// Per-role inputs for [`param_breakdown`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleShape {
    pub role: Role,
    pub report: ParamReport,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleBreakdown {
    pub role: Role,
    pub central_count: usize,
    pub aux_count: usize,
    pub adapter_count: usize,
    pub bias_count: usize,
    pub shared_central: usize,
    pub unshared: usize,
    pub all_shared: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub layers: usize,
    pub groups: usize,
    pub roles: Vec<RoleBreakdown>,
    /// Parameters outside the MPO linears (embeddings, layer norms, output bias);
    /// identical under every mode.
    pub other: usize,
    pub shared_central_total: usize,
    pub unshared_total: usize,
    pub all_shared_total: usize,
}

impl ParamBreakdown {
    pub fn total(&self, mode: SharingMode) -> usize {
        match mode {
            SharingMode::SharedCentral => self.shared_central_total,
            SharingMode::Unshared => self.unshared_total,
            SharingMode::AllShared => self.all_shared_total,
        }
    }
}

pub fn param_breakdown(
    roles: &[RoleShape],
    layers: usize,
    groups: usize,
    adapter_rank: Option<usize>,
    other: usize,
) -> ParamBreakdown {
    let mut out = ParamBreakdown {
        layers,
        groups,
        roles: Vec::with_capacity(roles.len()),
        other,
        shared_central_total: other,
        unshared_total: other,
        all_shared_total: other,
    };
    for r in roles {
        let central = r.report.central_count;
        let aux = r.report.total - central;
        let adapter = adapter_rank.map_or(0, |rank| adapter_param_count(1, rank, r.d_in, r.d_out));
        let bias = r.d_out;
        let per_layer_owned = adapter + bias;
        let rb = RoleBreakdown {
            role: r.role,
            central_count: central,
            aux_count: aux,
            adapter_count: adapter,
            bias_count: bias,
            shared_central: groups * central + layers * (aux + per_layer_owned),
            unshared: layers * (central + aux + per_layer_owned),
            all_shared: groups * (central + aux) + layers * per_layer_owned,
        };
        out.shared_central_total += rb.shared_central;
        out.unshared_total += rb.unshared;
        out.all_shared_total += rb.all_shared;
        out.roles.push(rb);
    }
    out
}
