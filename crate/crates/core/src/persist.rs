//! On-disk formats: a checkpoint directory holding `manifest.json` and one
//! blob of little-endian `f64`, plus CSV writers for experiment output.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::DonorCheckpoint;
use crate::model::{LayerNormParams, ModelConfig, ToyTransformer};
use crate::mpo::MpoTensorSet;
use crate::shared::Role;
use crate::stability::SweepResult;
use crate::tensor::{DenseTensor, FactorPlan};
use crate::train::LossCurve;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
pub const ENDIANNESS: &str = "little";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Model,
    Donor,
    Matrix,
    Mpo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: Option<Role>,
    pub layer: Option<usize>,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub endianness: String,
    #[serde(default)]
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub plan: Option<FactorPlan>,
    pub tensors: Vec<TensorEntry>,
}

/// Role and layer encoded in a parameter name, where present.
fn name_tags(name: &str) -> (Option<Role>, Option<usize>) {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["layer", l, r, ..] => (Role::parse(r), l.parse().ok()),
        ["central", r, ..] | ["donor", r, ..] => (Role::parse(r), None),
        _ => (None, None),
    }
}

// ── raw tensor files ───────────────────────────────────────────────

/// Writes `tensors` under `dir` atomically: everything goes to a sibling
/// temporary directory which is then renamed into place.
pub fn save_tensors(
    dir: &Path,
    kind: CheckpointKind,
    config: Option<&ModelConfig>,
    plan: Option<&FactorPlan>,
    tensors: &[(String, &DenseTensor)],
) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::CorruptManifest(format!("duplicate tensor name {name}")));
        }
        let (role, layer) = name_tags(name);
        entries.push(TensorEntry {
            name: name.clone(),
            role,
            layer,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            length: 8 * t.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        endianness: ENDIANNESS.into(),
        config: config.cloned(),
        plan: plan.cloned(),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::CorruptManifest(format!("serializing manifest: {e}")))?;

    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join(MANIFEST_FILE), json)?;
    let mut f = fs::File::create(tmp.join(BLOB_FILE))?;
    f.write_all(&blob)?;
    f.sync_all()?;
    drop(f);
    if dir.exists() {
        let old = sibling(dir, "old");
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, dir)?;
    }
    Ok(())
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let probe: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(format!("manifest is not JSON: {e}")))?;
    if let Some(v) = probe.get("format_version").and_then(|v| v.as_u64()) {
        if v != FORMAT_VERSION as u64 {
            return Err(Error::VersionUnsupported {
                found: v as u32,
                supported: FORMAT_VERSION,
            });
        }
    }
    let manifest: Manifest =
        serde_json::from_value(probe).map_err(|e| Error::CorruptManifest(format!("invalid manifest: {e}")))?;
    if manifest.endianness != ENDIANNESS {
        return Err(Error::CorruptManifest(format!(
            "unsupported endianness {:?}",
            manifest.endianness
        )));
    }
    let mut names = BTreeSet::new();
    for e in &manifest.tensors {
        if !names.insert(e.name.as_str()) {
            return Err(Error::CorruptManifest(format!("duplicate tensor name {}", e.name)));
        }
        let expected = 8 * e.shape.iter().product::<usize>() as u64;
        if e.length != expected {
            return Err(Error::CorruptManifest(format!(
                "tensor {} has byte length {} but shape {:?} needs {expected}",
                e.name, e.length, e.shape
            )));
        }
    }
    Ok(manifest)
}

/// Reads every tensor, in manifest order.
pub fn load_tensors(dir: &Path) -> Result<(Manifest, Vec<(String, DenseTensor)>)> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let end = e.offset.checked_add(e.length).unwrap_or(u64::MAX);
        if end > blob.len() as u64 {
            return Err(Error::CorruptManifest(format!(
                "tensor {} needs bytes {}..{end} but the blob has {} bytes",
                e.name,
                e.offset,
                blob.len()
            )));
        }
        let bytes = &blob[e.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let shape = if e.shape.is_empty() { vec![1] } else { e.shape.clone() };
        out.push((e.name.clone(), DenseTensor::new(shape, data)?));
    }
    Ok((manifest, out))
}

fn expect_kind(manifest: &Manifest, kind: CheckpointKind) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::CorruptManifest(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            manifest.kind
        )));
    }
    Ok(())
}

fn take(map: &mut BTreeMap<String, DenseTensor>, name: &str, shape: &[usize]) -> Result<DenseTensor> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::CorruptManifest(format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

fn no_leftovers(map: BTreeMap<String, DenseTensor>) -> Result<()> {
    match map.keys().next() {
        Some(name) => Err(Error::UnknownParameter(name.clone())),
        None => Ok(()),
    }
}

// ── models ─────────────────────────────────────────────────────────

pub fn save_model(model: &ToyTransformer, dir: &Path) -> Result<()> {
    let mut owned = Vec::new();
    model.visit(&mut |n, t| owned.push((n.to_string(), t.clone())));
    let refs: Vec<(String, &DenseTensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    save_tensors(dir, CheckpointKind::Model, Some(model.config()), None, &refs)
}

pub fn load_model(dir: &Path) -> Result<ToyTransformer> {
    let (manifest, tensors) = load_tensors(dir)?;
    expect_kind(&manifest, CheckpointKind::Model)?;
    let config = manifest
        .config
        .clone()
        .ok_or_else(|| Error::CorruptManifest("model checkpoint without a config".into()))?;
    let mut model = ToyTransformer::zeros(config)?;
    let mut map: BTreeMap<String, DenseTensor> = tensors.into_iter().collect();
    let mut err = None;
    model.visit_mut(&mut |name, slot| {
        if err.is_some() {
            return;
        }
        match take(&mut map, name, &slot.shape().to_vec()) {
            Ok(t) => *slot = t,
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    no_leftovers(map)?;
    Ok(model)
}

// ── donors ─────────────────────────────────────────────────────────

pub fn save_donor(donor: &DonorCheckpoint, dir: &Path) -> Result<()> {
    donor.validate()?;
    let mut list: Vec<(String, &DenseTensor)> = Vec::new();
    for role in Role::ALL {
        list.push((format!("donor.{role}.weight"), &donor.weights[&role]));
        list.push((format!("donor.{role}.bias"), &donor.biases[&role]));
    }
    list.push(("ln1.gamma".into(), &donor.ln1.gamma));
    list.push(("ln1.beta".into(), &donor.ln1.beta));
    list.push(("ln2.gamma".into(), &donor.ln2.gamma));
    list.push(("ln2.beta".into(), &donor.ln2.beta));
    list.push(("embed.token".into(), &donor.token_emb));
    list.push(("embed.position".into(), &donor.pos_emb));
    list.push(("head.bias".into(), &donor.out_bias));
    save_tensors(dir, CheckpointKind::Donor, Some(&donor.config), None, &list)
}

pub fn load_donor(dir: &Path) -> Result<DonorCheckpoint> {
    let (manifest, tensors) = load_tensors(dir)?;
    expect_kind(&manifest, CheckpointKind::Donor)?;
    let config = manifest
        .config
        .clone()
        .ok_or_else(|| Error::CorruptManifest("donor checkpoint without a config".into()))?;
    config.validate()?;
    let mut map: BTreeMap<String, DenseTensor> = tensors.into_iter().collect();
    let h = config.hidden;
    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    for role in Role::ALL {
        let (i, j) = config.dims(role);
        weights.insert(role, take(&mut map, &format!("donor.{role}.weight"), &[i, j])?);
        biases.insert(role, take(&mut map, &format!("donor.{role}.bias"), &[j])?);
    }
    let donor = DonorCheckpoint {
        weights,
        biases,
        ln1: LayerNormParams {
            gamma: take(&mut map, "ln1.gamma", &[h])?,
            beta: take(&mut map, "ln1.beta", &[h])?,
        },
        ln2: LayerNormParams {
            gamma: take(&mut map, "ln2.gamma", &[h])?,
            beta: take(&mut map, "ln2.beta", &[h])?,
        },
        token_emb: take(&mut map, "embed.token", &[config.vocab_size, h])?,
        pos_emb: take(&mut map, "embed.position", &[config.max_seq_len, h])?,
        out_bias: take(&mut map, "head.bias", &[config.vocab_size])?,
        config,
    };
    no_leftovers(map)?;
    Ok(donor)
}

// ── matrices and MPO sets ──────────────────────────────────────────

pub fn save_matrix(matrix: &DenseTensor, dir: &Path) -> Result<()> {
    matrix.expect_rank(2)?;
    save_tensors(dir, CheckpointKind::Matrix, None, None, &[("matrix".into(), matrix)])
}

pub fn load_matrix(dir: &Path) -> Result<DenseTensor> {
    let (manifest, tensors) = load_tensors(dir)?;
    expect_kind(&manifest, CheckpointKind::Matrix)?;
    let mut map: BTreeMap<String, DenseTensor> = tensors.into_iter().collect();
    let shape = manifest.tensors.first().map(|e| e.shape.clone()).unwrap_or_default();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("tensor matrix has shape {shape:?}, expected a matrix")));
    }
    let m = take(&mut map, "matrix", &shape)?;
    no_leftovers(map)?;
    Ok(m)
}

pub fn save_mpo(set: &MpoTensorSet, dir: &Path) -> Result<()> {
    let list: Vec<(String, &DenseTensor)> = set
        .cores()
        .iter()
        .enumerate()
        .map(|(k, c)| (format!("core.{k}"), c))
        .collect();
    save_tensors(dir, CheckpointKind::Mpo, None, Some(set.plan()), &list)
}

pub fn load_mpo(dir: &Path) -> Result<MpoTensorSet> {
    let (manifest, tensors) = load_tensors(dir)?;
    expect_kind(&manifest, CheckpointKind::Mpo)?;
    let plan = manifest
        .plan
        .as_ref()
        .ok_or_else(|| Error::CorruptManifest("MPO checkpoint without a factor plan".into()))?;
    let plan = FactorPlan::new(plan.row_factors().to_vec(), plan.col_factors().to_vec())?;
    let mut map: BTreeMap<String, DenseTensor> = tensors.into_iter().collect();
    let mut cores = Vec::with_capacity(plan.order());
    for k in 0..plan.order() {
        let name = format!("core.{k}");
        let core = map
            .remove(&name)
            .ok_or_else(|| Error::CorruptManifest(format!("missing tensor {name}")))?;
        cores.push(core);
    }
    no_leftovers(map)?;
    MpoTensorSet::from_cores(cores, plan)
}

// ── CSV ────────────────────────────────────────────────────────────

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub key: String,
    pub value: f64,
    pub units: String,
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut s = String::from("depth,scheme,delta_f\n");
    for r in &result.records {
        s.push_str(&format!("{},{},{}\n", r.depth, r.scheme, format_f64(r.delta_f)));
    }
    s
}

pub fn loss_curve_csv(curve: &LossCurve) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in curve.losses.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", format_f64(*l)));
    }
    s
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut s = String::from("experiment,key,value,units\n");
    for r in rows {
        if !r.value.is_finite() {
            return Err(Error::InvalidConfig(format!("report value {}/{} is not finite", r.experiment, r.key)));
        }
        s.push_str(&format!("{},{},{},{}\n", r.experiment, r.key, format_f64(r.value), r.units));
    }
    Ok(s)
}

/// Writes `contents` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = sibling(path, "tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_from_names() {
        assert_eq!(name_tags("layer.3.ff1.aux.0"), (Some(Role::FfnIn), Some(3)));
        assert_eq!(name_tags("central.q.1"), (Some(Role::Query), None));
        assert_eq!(name_tags("embed.token"), (None, None));
    }

    #[test]
    fn floats_round_trip_through_text() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, std::f64::consts::PI] {
            assert_eq!(format_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
