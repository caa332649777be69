//! Model bundle file: magic bytes, a length-prefixed JSON header, then every
//! parameter tensor as little-endian f64 in header order.
//!
//! The header holds the model structures with empty parameter values plus a
//! tensor table; values are refilled on load with shape checks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::Autoencoder;
use crate::autograd::{Mat, ParamStore};
use crate::data::Schema;
use crate::error::{Error, Result};
use crate::missing::MissingAutoencoder;
use crate::model::SequenceModel;
use crate::wgan::LatentGan;

const MAGIC: &[u8; 8] = b"LTSBNDL1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AeBlock {
    Complete(Autoencoder),
    Incomplete(MissingAutoencoder),
}

impl AeBlock {
    pub fn model(&self) -> &dyn SequenceModel {
        match self {
            AeBlock::Complete(m) => m,
            AeBlock::Incomplete(m) => m,
        }
    }

    pub fn model_mut(&mut self) -> &mut dyn SequenceModel {
        match self {
            AeBlock::Complete(m) => m,
            AeBlock::Incomplete(m) => m,
        }
    }

    pub fn schema(&self) -> &Schema {
        match self {
            AeBlock::Complete(m) => &m.schema,
            AeBlock::Incomplete(m) => &m.schema,
        }
    }
}

impl From<Autoencoder> for AeBlock {
    fn from(m: Autoencoder) -> Self {
        AeBlock::Complete(m)
    }
}

impl From<MissingAutoencoder> for AeBlock {
    fn from(m: MissingAutoencoder) -> Self {
        AeBlock::Incomplete(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub provenance: Provenance,
    pub ae: AeBlock,
    pub gan: Option<LatentGan>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    block: String,
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_digest: String,
    latent_dim: usize,
    tensors: Vec<TensorEntry>,
    bundle: ModelBundle,
}

fn stores_mut(b: &mut ModelBundle) -> Vec<(&'static str, &mut ParamStore)> {
    let mut out: Vec<(&'static str, &mut ParamStore)> = vec![("ae", b.ae.model_mut().params_mut())];
    if let Some(gan) = b.gan.as_mut() {
        let [gen, critic] = gan.stores_mut();
        out.push(("generator", gen));
        out.push(("critic", critic));
    }
    out
}

impl ModelBundle {
    pub fn latent_dim(&self) -> usize {
        self.ae.model().latent_dim()
    }

    /// Checks that the blocks fit together.
    pub fn check(&self) -> Result<()> {
        if let Some(gan) = &self.gan {
            if gan.dim != self.latent_dim() {
                return Err(Error::Bundle(format!(
                    "GAN width {} does not match latent width {}",
                    gan.dim,
                    self.latent_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut skeleton = self.clone();
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        for (block, store) in stores_mut(&mut skeleton) {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let name = store.name(id).to_string();
                let m = store.get_mut(id);
                tensors.push(TensorEntry {
                    block: block.into(),
                    name,
                    shape: [m.nrows(), m.ncols()],
                });
                for v in m.iter() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                *m = Mat::zeros((0, 0));
            }
        }
        let header = Header {
            schema_digest: self.ae.schema().digest(),
            latent_dim: self.latent_dim(),
            tensors,
            bundle: skeleton,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Bundle(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Bundle("not a model bundle".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Bundle("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Bundle(format!("header: {e}")))?;
        let mut bundle = header.bundle;
        let mut blob = &bytes[16 + len..];
        let mut entries = header.tensors.iter();
        for (block, store) in stores_mut(&mut bundle) {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let e = entries
                    .next()
                    .ok_or_else(|| Error::Bundle("tensor table is shorter than the model".into()))?;
                if e.block != block || e.name != store.name(id) {
                    return Err(Error::Bundle(format!("tensor {}/{} out of place", e.block, e.name)));
                }
                let n = e.shape[0] * e.shape[1];
                if blob.len() < 8 * n {
                    return Err(Error::Bundle("truncated tensor data".into()));
                }
                let values: Vec<f64> = blob[..8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                blob = &blob[8 * n..];
                *store.get_mut(id) = Mat::from_shape_vec((e.shape[0], e.shape[1]), values).expect("shape matches length");
            }
        }
        if entries.next().is_some() || !blob.is_empty() {
            return Err(Error::Bundle("trailing tensor data".into()));
        }
        if bundle.ae.schema().digest() != header.schema_digest {
            return Err(Error::Bundle("schema digest mismatch".into()));
        }
        if bundle.latent_dim() != header.latent_dim {
            return Err(Error::Bundle(format!(
                "latent width {} does not match the recorded {}",
                bundle.latent_dim(),
                header.latent_dim
            )));
        }
        bundle.check()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Bundle(format!("bundle {} does not exist", path.display())));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Bundle(m) => Error::Bundle(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
