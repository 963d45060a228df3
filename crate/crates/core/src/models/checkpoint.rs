//! Checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ECGCKPT\0"
//! 8       4     format version (u32 LE)
//! 12      4     number of blobs B (u32 LE)
//! 16      8     metadata length M (u64 LE)
//! 24      M     metadata, UTF-8 JSON
//! ...           B times: element count n (u64 LE), then n f64 LE values
//! ```
//!
//! Network checkpoints keep one blob per parameter tensor in parameter order;
//! names and shapes are listed in the metadata. Ridge checkpoints keep the
//! PCA mean and the row-major component matrix.

use std::io::{Read, Write};
use std::path::Path;

use autograd::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::network::{BackboneConfig, Network, RunningStats};
use super::ridge::Ridge;
use super::train::{TrainLog, TrainedNetwork};
use super::HeadKind;
use crate::error::{Error, Result};
use crate::features::PcaModel;
use crate::io::atomic_write;
use crate::targets::TargetCodec;
use crate::uncertainty::LaplacePosterior;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ECGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_container<M: Serialize>(path: &Path, meta: &M, blobs: &[&[f64]]) -> Result<()> {
    let json = serde_json::to_vec(meta).map_err(|e| Error::format("checkpoint metadata", e.to_string()))?;
    let total: usize = blobs.iter().map(|b| 8 + 8 * b.len()).sum();
    let mut buf = Vec::with_capacity(24 + json.len() + total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let io = |e: std::io::Error| Error::io(path, e);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    buf.write_u32::<LittleEndian>(blobs.len() as u32).map_err(io)?;
    buf.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
    buf.write_all(&json).map_err(io)?;
    for b in blobs {
        buf.write_u64::<LittleEndian>(b.len() as u64).map_err(io)?;
        for &v in *b {
            buf.write_f64::<LittleEndian>(v).map_err(io)?;
        }
    }
    atomic_write(path, &buf)
}

pub fn read_container<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<Vec<f64>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: String| Error::format("checkpoint", d);
    if bytes.len() < 24 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic".into()));
    }
    let mut r = &bytes[8..];
    let trunc = |_| bad("truncated".into());
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n_blobs = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let meta_len = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
    if meta_len > r.len() {
        return Err(bad("truncated metadata".into()));
    }
    let meta = serde_json::from_slice(&r[..meta_len]).map_err(|e| bad(e.to_string()))?;
    r = &r[meta_len..];
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let n = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
        if n.checked_mul(8).map_or(true, |b| b > r.len()) {
            return Err(bad("truncated blob".into()));
        }
        let mut v = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut v).map_err(trunc)?;
        blobs.push(v);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(trunc)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok((meta, blobs))
}

/// Ridge regression on PCA features of the flattened record.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    /// Averaging factor applied to the record before projection.
    pub input_pool: usize,
    pub pca: PcaModel,
    pub ridge: Ridge,
    pub codec: TargetCodec,
}

impl RidgeModel {
    /// Prediction in concentration units from a full-resolution record.
    pub fn predict(&self, flat: &[f64]) -> Result<f64> {
        let pooled = super::pool_input(flat, self.input_pool);
        let z = super::ridge_predict(&self.ridge, &self.pca.transform(&pooled)?)?;
        Ok(self.codec.normalizer.invert(z))
    }
}

#[derive(Clone, Debug)]
pub enum Checkpoint {
    Network(Box<TrainedNetwork>),
    Ridge(Box<RidgeModel>),
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Meta {
    Network {
        config_hash: String,
        version: String,
        backbone: BackboneConfig,
        head: HeadKind,
        n_classes: Option<usize>,
        seed: u64,
        params: Vec<ParamEntry>,
        running: RunningStats,
        codec: TargetCodec,
        log: TrainLog,
        laplace: Option<LaplacePosterior>,
    },
    Ridge {
        config_hash: String,
        version: String,
        ridge: Ridge,
        codec: TargetCodec,
        input_pool: usize,
        pca_dim: usize,
        pca_eigenvalues: Vec<f64>,
        pca_total_variance: f64,
    },
}

/// Provenance stored alongside every checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub version: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let version = env!("CARGO_PKG_VERSION").to_string();
        match self {
            Self::Network(t) => {
                let net = &t.network;
                let params = net
                    .params()
                    .iter()
                    .map(|(_, p)| ParamEntry {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                    })
                    .collect();
                let meta = Meta::Network {
                    config_hash: config_hash.to_string(),
                    version,
                    backbone: net.config().clone(),
                    head: net.head(),
                    n_classes: net.n_classes(),
                    seed: t.seed,
                    params,
                    running: net.running_stats(),
                    codec: t.codec.clone(),
                    log: t.log.clone(),
                    laplace: t.laplace.clone(),
                };
                let blobs: Vec<&[f64]> = net.params().iter().map(|(_, p)| p.value.data()).collect();
                write_container(path, &meta, &blobs)
            }
            Self::Ridge(m) => {
                let meta = Meta::Ridge {
                    config_hash: config_hash.to_string(),
                    version,
                    ridge: m.ridge.clone(),
                    codec: m.codec.clone(),
                    input_pool: m.input_pool,
                    pca_dim: m.pca.dim,
                    pca_eigenvalues: m.pca.eigenvalues.clone(),
                    pca_total_variance: m.pca.total_variance,
                };
                write_container(path, &meta, &[&m.pca.mean, &m.pca.components])
            }
        }
    }

    pub fn load(path: &Path) -> Result<(Self, Stamp)> {
        let (meta, blobs): (Meta, _) = read_container(path)?;
        let bad = |d: String| Error::format("checkpoint", d);
        match meta {
            Meta::Network {
                config_hash,
                version,
                backbone,
                head,
                n_classes,
                seed,
                params,
                running,
                codec,
                log,
                laplace,
            } => {
                let mut net = Network::new(backbone, head, n_classes, 0)?;
                if params.len() != net.params().len() || blobs.len() != params.len() {
                    return Err(bad("parameter count does not match the architecture".into()));
                }
                let mut values = Vec::with_capacity(blobs.len());
                for ((entry, blob), (_, p)) in params.iter().zip(blobs).zip(net.params().iter()) {
                    if entry.name != p.name || entry.shape != p.value.shape() {
                        return Err(bad(format!("parameter {} does not match {}", entry.name, p.name)));
                    }
                    values.push(Tensor::new(&entry.shape, blob)?);
                }
                net.params_mut().load_values(values)?;
                net.set_running_stats(running)?;
                let t = TrainedNetwork {
                    network: net,
                    codec,
                    log,
                    seed,
                    laplace,
                };
                Ok((Self::Network(Box::new(t)), Stamp { config_hash, version }))
            }
            Meta::Ridge {
                config_hash,
                version,
                ridge,
                codec,
                input_pool,
                pca_dim,
                pca_eigenvalues,
                pca_total_variance,
            } => {
                let [mean, components]: [Vec<f64>; 2] = blobs.try_into().map_err(|_| bad("ridge checkpoint needs two blobs".into()))?;
                if mean.len() != pca_dim || components.len() != pca_dim * pca_eigenvalues.len() {
                    return Err(bad("PCA blob sizes do not match".into()));
                }
                let pca = PcaModel {
                    dim: pca_dim,
                    mean,
                    components,
                    eigenvalues: pca_eigenvalues,
                    total_variance: pca_total_variance,
                };
                Ok((Self::Ridge(Box::new(RidgeModel {
                    input_pool,
                    pca,
                    ridge,
                    codec,
                })), Stamp { config_hash, version }))
            }
        }
    }
}
