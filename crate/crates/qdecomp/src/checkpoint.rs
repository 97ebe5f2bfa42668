//! Binary ensemble checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "QDCK" | version u32
//! n_states u64 | n_actions u64 | n_quantiles u64 | n_members u64
//! anchor_strength f64 | prior_mean f64 | prior_std f64
//! taus [f64; N]
//! anchors [f64; K * S * A * N] | members [f64; K * S * A * N]
//! metadata length u64 | metadata JSON (train config, optional experiment)
//! sha256 of everything above
//! ```

use std::path::Path;

use qdecomp_core::quantile::{taus, QuantileTable};
use qdecomp_core::{AnchoredEnsemble, TabularMdp, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CheckpointError, Result, RunError};

const MAGIC: &[u8; 4] = b"QDCK";
pub const FORMAT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub ensemble: AnchoredEnsemble,
    pub train: TrainConfig,
    /// The experiment that produced the ensemble, if any. Needed to rebuild
    /// the environment for maps and rollouts.
    pub experiment: Option<ExperimentConfig>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    train: TrainConfig,
    experiment: Option<ExperimentConfig>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let ens = &self.ensemble;
        let cells = ens.n_states() * ens.n_actions() * ens.n_quantiles();
        let mut out = Vec::with_capacity(80 + 8 * (ens.n_quantiles() + 2 * ens.n_members() * cells));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for n in [ens.n_states(), ens.n_actions(), ens.n_quantiles(), ens.n_members()] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for x in [ens.anchor_strength(), ens.prior_mean(), ens.prior_std()] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for t in ens.taus() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for table in ens.anchors().iter().chain(ens.members()) {
            for v in table.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = Metadata { train: self.train.clone(), experiment: self.experiment.clone() };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let corrupt = |msg: &str| CheckpointError::CorruptFile(msg.into());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::FormatVersionMismatch(format!(
                "file has version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        if bytes.len() < 8 + HASH_LEN {
            return Err(corrupt("truncated"));
        }
        let (body, hash) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != hash {
            return Err(corrupt("content hash mismatch"));
        }

        let mut r = Reader { bytes: body, pos: 8 };
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?;
        }
        let [ns, na, nq, k] = dims;
        let (anchor_strength, prior_mean, prior_std) = (r.f64()?, r.f64()?, r.f64()?);
        let stored_taus = r.f64s(nq)?;
        if stored_taus != taus(nq) {
            return Err(corrupt("quantile levels do not match the header"));
        }
        let cells = ns.checked_mul(na).and_then(|x| x.checked_mul(nq)).ok_or_else(|| corrupt("dimension overflow"))?;
        let mut tables = Vec::with_capacity(2 * k);
        for _ in 0..2 * k {
            let values = r.f64s(cells)?;
            tables.push(QuantileTable::from_values(ns, na, nq, values).map_err(|e| corrupt(&e.to_string()))?);
        }
        let members = tables.split_off(k);
        let anchors = tables;
        let meta_len = usize::try_from(r.u64()?).map_err(|_| corrupt("metadata length overflow"))?;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(&e.to_string()))?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let ensemble = AnchoredEnsemble::from_parts(members, anchors, anchor_strength, prior_mean, prior_std)
            .map_err(|e| corrupt(&e.to_string()))?;
        Ok(Self { ensemble, train: meta.train, experiment: meta.experiment })
    }

    /// Fails with `FormatVersionMismatch` if the ensemble was trained for a
    /// differently shaped environment.
    pub fn check_shape(&self, mdp: &TabularMdp) -> std::result::Result<(), CheckpointError> {
        let e = &self.ensemble;
        if e.n_states() != mdp.n_states() || e.n_actions() != mdp.n_actions() {
            return Err(CheckpointError::FormatVersionMismatch(format!(
                "checkpoint is for {}x{} state-actions, environment has {}x{}",
                e.n_states(),
                e.n_actions(),
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::CorruptFile("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, CheckpointError> {
        let len = n.checked_mul(8).ok_or_else(|| CheckpointError::CorruptFile("length overflow".into()))?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn export_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ck.encode()).map_err(|e| RunError::io(path, e))
}

pub fn import_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| RunError::io(path, e))?;
    Ok(Checkpoint::decode(&bytes)?)
}
