//! Single-file checkpoints: a JSON manifest followed by little-endian f32
//! buffers, one per named tensor.
//!
//! Layout: `PNNHCKPT`, u32 format version, u64 manifest length, manifest
//! bytes, tensor data in manifest order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coder::{make_coder, CoderSpec, CoderWeights};
use crate::net::{build_network, ConvBn, Network, NetworkSpec};
use crate::tensor::BatchNorm;
use crate::{Error, Result, Rng, Tensor};

const MAGIC: &[u8; 8] = b"PNNHCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub spec: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

type Visitor<'a> = dyn FnMut(String, &mut Tensor<f32>) -> Result<()> + 'a;

fn visit_bn(prefix: &str, bn: &mut BatchNorm<f32>, f: &mut Visitor) -> Result<()> {
    f(format!("{prefix}.gamma"), &mut bn.gamma)?;
    f(format!("{prefix}.beta"), &mut bn.beta)?;
    f(format!("{prefix}.running_mean"), &mut bn.running_mean)?;
    f(format!("{prefix}.running_var"), &mut bn.running_var)
}

fn visit_conv_bn(prefix: &str, cb: &mut ConvBn<f32>, f: &mut Visitor) -> Result<()> {
    f(format!("{prefix}.conv"), cb.conv.weight_mut())?;
    match &mut cb.bn {
        Some(bn) => visit_bn(&format!("{prefix}.bn"), bn, f),
        None => Ok(()),
    }
}

fn visit_coder(prefix: &str, c: &mut CoderWeights<f32>, f: &mut Visitor) -> Result<()> {
    f(format!("{prefix}.enc"), c.enc.weight_mut())?;
    if let Some(mid) = &mut c.mid {
        f(format!("{prefix}.mid"), mid.weight_mut())?;
    }
    f(format!("{prefix}.dec"), c.dec.weight_mut())
}

fn visit_network(net: &mut Network<f32>, f: &mut Visitor) -> Result<()> {
    visit_conv_bn("stem", &mut net.stem, f)?;
    for (i, b) in net.blocks.iter_mut().enumerate() {
        visit_conv_bn(&format!("blocks.{i}.first"), &mut b.first, f)?;
        visit_conv_bn(&format!("blocks.{i}.second"), &mut b.second, f)?;
    }
    f("head.weight".into(), &mut net.head.weight)?;
    f("head.bias".into(), &mut net.head.bias)?;
    for (w, c) in net.coders.iter_mut() {
        visit_coder(&format!("coders.{w}"), c, f)?;
    }
    Ok(())
}

fn write_file(
    path: &Path,
    kind: &str,
    meta: &CheckpointMeta,
    spec: serde_json::Value,
    tensors: Vec<(String, Tensor<f32>)>,
) -> Result<()> {
    let manifest = Manifest {
        kind: kind.into(),
        meta: meta.clone(),
        spec,
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(text.len() as u64).to_le_bytes())?;
    out.write_all(&text)?;
    for (_, t) in &tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(Manifest, BTreeMap<String, Tensor<f32>>)> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + mlen).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut pos = 20 + mlen;
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad(&format!("truncated tensor {}", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((manifest, tensors))
}

fn fill(tensors: &mut BTreeMap<String, Tensor<f32>>) -> impl FnMut(String, &mut Tensor<f32>) -> Result<()> + '_ {
    move |name, slot| {
        let t = tensors.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        Ok(())
    }
}

fn expect_kind(m: &Manifest, kind: &'static str) -> Result<()> {
    if m.kind != kind {
        return Err(Error::CheckpointKind { expected: kind, found: m.kind.clone() });
    }
    Ok(())
}

fn leftover(tensors: BTreeMap<String, Tensor<f32>>) -> Result<()> {
    match tensors.keys().next() {
        Some(name) => Err(Error::Checkpoint(format!("unexpected tensor {name}"))),
        None => Ok(()),
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(read_file(path)?.0)
}

pub fn save_network(path: &Path, net: &Network<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut copy = net.clone();
    let mut tensors = Vec::new();
    visit_network(&mut copy, &mut |name, t| {
        tensors.push((name, t.clone()));
        Ok(())
    })?;
    let spec = serde_json::to_value(&net.spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_file(path, "network", meta, spec, tensors)
}

pub fn load_network(path: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    let (manifest, mut tensors) = read_file(path)?;
    expect_kind(&manifest, "network")?;
    let spec: NetworkSpec =
        serde_json::from_value(manifest.spec.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut rng = Rng::new(0);
    let coders = spec
        .coder_widths()
        .into_iter()
        .map(|w| Ok((w, make_coder(spec.coder_spec(w), &mut rng)?)))
        .collect::<Result<_>>()?;
    let mut net = build_network(&spec, coders, &mut rng)?;
    visit_network(&mut net, &mut fill(&mut tensors))?;
    leftover(tensors)?;
    Ok((net, manifest.meta))
}

pub fn save_coder(path: &Path, coder: &CoderWeights<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut copy = coder.clone();
    let mut tensors = Vec::new();
    visit_coder("coder", &mut copy, &mut |name, t| {
        tensors.push((name, t.clone()));
        Ok(())
    })?;
    let spec = serde_json::to_value(coder.spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_file(path, "coder", meta, spec, tensors)
}

pub fn load_coder(path: &Path) -> Result<(CoderWeights<f32>, CheckpointMeta)> {
    let (manifest, mut tensors) = read_file(path)?;
    expect_kind(&manifest, "coder")?;
    let spec: CoderSpec =
        serde_json::from_value(manifest.spec.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut coder = make_coder(spec, &mut Rng::new(0))?;
    visit_coder("coder", &mut coder, &mut fill(&mut tensors))?;
    leftover(tensors)?;
    Ok((coder, manifest.meta))
}
