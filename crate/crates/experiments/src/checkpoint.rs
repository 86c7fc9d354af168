//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! JSON manifest, then every array as raw little-endian `f64` in manifest
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stochnorm::{Architecture, Network, NoiseMode, NormKind, NormStats, Tensor};

use crate::error::{ExpError, ExpResult};
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"SNORMCKP";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    arch_hash: String,
    arch: Architecture,
    norm: NormKind,
    noise: NoiseMode,
    prior: stochnorm::variational::PriorConfig,
    eps: f64,
    momentum: f64,
    epoch: usize,
    rng: Option<RngState>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub epoch: usize,
    pub rng: Option<RngState>,
}

/// SHA-256 of the architecture's canonical JSON together with the
/// normalization and noise kinds.
pub fn architecture_hash(arch: &Architecture, norm: NormKind, noise: &NoiseMode) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(arch, norm, noise_tag(noise))).expect("serializable"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn noise_tag(noise: &NoiseMode) -> &'static str {
    match noise {
        NoiseMode::None => "none",
        NoiseMode::Injected(_) => "injected",
        NoiseMode::Variational { .. } => "variational",
    }
}

fn arrays(net: &Network) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, b) in net.blocks.iter().enumerate() {
        out.push((format!("blocks.{i}.w"), b.w.clone()));
        out.push((format!("blocks.{i}.s"), b.s.clone()));
        out.push((format!("blocks.{i}.b"), b.b.clone()));
        if let Some(u) = &b.u {
            out.push((format!("blocks.{i}.u"), u.clone()));
        }
        if let Some(r) = &b.running {
            out.push((format!("blocks.{i}.running_mu"), Tensor::from_vec(r.mu.clone())));
            out.push((format!("blocks.{i}.running_sigma"), Tensor::from_vec(r.sigma.clone())));
        }
    }
    if let Some(m) = &net.moments {
        out.push(("moments.mean".into(), Tensor::from_vec(m.mean.clone())));
        out.push(("moments.var".into(), Tensor::from_vec(m.var.clone())));
    }
    out
}

pub fn to_bytes(net: &Network, epoch: usize, rng: Option<&RngState>) -> Vec<u8> {
    let arrays = arrays(net);
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        arch_hash: architecture_hash(&net.arch, net.norm, &net.noise),
        arch: net.arch.clone(),
        norm: net.norm,
        noise: net.noise.clone(),
        prior: net.prior,
        eps: net.eps,
        momentum: net.momentum,
        epoch,
        rng: rng.cloned(),
        arrays: arrays
            .iter()
            .map(|(name, t)| ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("serializable manifest");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> ExpResult<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ExpError::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Parses a checkpoint. With `expected`, the stored architecture hash must
/// match it.
pub fn from_bytes(bytes: &[u8], expected: Option<(&Architecture, NormKind, &NoiseMode)>) -> ExpResult<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(ExpError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ExpError::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| ExpError::Checkpoint("manifest too large".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(r.take(len)?).map_err(|e| ExpError::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.schema_version != MANIFEST_SCHEMA {
        return Err(ExpError::Checkpoint(format!(
            "manifest schema {}, expected {MANIFEST_SCHEMA}",
            manifest.schema_version
        )));
    }
    let stored_hash = architecture_hash(&manifest.arch, manifest.norm, &manifest.noise);
    if stored_hash != manifest.arch_hash {
        return Err(ExpError::Checkpoint(
            "architecture hash does not match the manifest".into(),
        ));
    }
    if let Some((arch, norm, noise)) = expected {
        if architecture_hash(arch, norm, noise) != manifest.arch_hash {
            return Err(ExpError::Checkpoint(
                "schema mismatch: checkpoint was written for a different architecture".into(),
            ));
        }
    }
    let mut arrays = std::collections::BTreeMap::new();
    for e in &manifest.arrays {
        let n: usize = e.shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| ExpError::Checkpoint("array too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    if r.pos != bytes.len() {
        return Err(ExpError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let network = rebuild(&manifest, &mut arrays)?;
    Ok(Checkpoint {
        network,
        epoch: manifest.epoch,
        rng: manifest.rng,
    })
}

fn rebuild(m: &Manifest, arrays: &mut std::collections::BTreeMap<String, Tensor>) -> ExpResult<Network> {
    let mut take = |name: String| {
        arrays
            .remove(&name)
            .ok_or_else(|| ExpError::Checkpoint(format!("missing array {name}")))
    };
    let mut rng = crate::rng::stream(0, crate::rng::Stream::Init);
    let mut net = Network::new(m.arch.clone(), m.norm, m.noise.clone(), &mut rng)?;
    net.prior = m.prior;
    net.eps = m.eps;
    net.momentum = m.momentum;
    for i in 0..net.blocks.len() {
        let has_u = net.blocks[i].u.is_some();
        let has_running = m.arrays.iter().any(|e| e.name == format!("blocks.{i}.running_mu"));
        let block = &mut net.blocks[i];
        for (slot, name) in [(&mut block.w, "w"), (&mut block.s, "s"), (&mut block.b, "b")] {
            let t = take(format!("blocks.{i}.{name}"))?;
            if t.shape() != slot.shape() {
                return Err(ExpError::Checkpoint(format!(
                    "blocks.{i}.{name} has shape {:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        if has_u {
            block.u = Some(take(format!("blocks.{i}.u"))?);
        }
        if has_running {
            let mu = take(format!("blocks.{i}.running_mu"))?.into_data();
            let sigma = take(format!("blocks.{i}.running_sigma"))?.into_data();
            block.running = Some(NormStats::new(mu, sigma)?);
        }
    }
    if m.arrays.iter().any(|e| e.name == "moments.mean") {
        net.moments = Some(stochnorm::DatasetMoments {
            mean: take("moments.mean".into())?.into_data(),
            var: take("moments.var".into())?.into_data(),
        });
    }
    Ok(net)
}

pub fn save(path: &Path, net: &Network, epoch: usize, rng: Option<&RngState>) -> ExpResult<()> {
    std::fs::write(path, to_bytes(net, epoch, rng)).map_err(|e| ExpError::io(path, e))
}

pub fn load(path: &Path, expected: Option<(&Architecture, NormKind, &NoiseMode)>) -> ExpResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| ExpError::io(path, e))?;
    from_bytes(&bytes, expected)
}
