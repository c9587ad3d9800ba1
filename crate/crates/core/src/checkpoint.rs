//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "IPCGCKPT" | version u32 | kind u8 | metadata length u32 | metadata JSON
//! net count u32 | per net: layer count u32, sizes u32..., hidden tag u8,
//!                 output tag u8, parameter count u64, parameters f64...
//! SHA-256 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::neural::{Activation, DenseNet};
use crate::ppo::{PolicyBundle, PpoConfig};

pub const MAGIC: &[u8; 8] = b"IPCGCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Encoder,
    Policy,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Encoder => 1,
            ModelKind::Policy => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::Encoder),
            2 => Some(ModelKind::Policy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub metadata: Value,
    pub nets: Vec<DenseNet>,
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    info: Value,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    env: EnvConfig,
    ppo: PpoConfig,
    info: Value,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated payload".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn activation(tag: u8) -> Result<Activation> {
    Activation::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {tag}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.nets.len() as u32).to_le_bytes());
        for net in &self.nets {
            out.extend_from_slice(&(net.sizes().len() as u32).to_le_bytes());
            for s in net.sizes() {
                out.extend_from_slice(&(*s as u32).to_le_bytes());
            }
            out.push(net.hidden_activation().tag());
            out.push(net.output_activation().tag());
            let params = net.params();
            out.extend_from_slice(&(params.len() as u64).to_le_bytes());
            for p in params {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let tag = r.u8()?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown model kind {tag}")))?;
        let meta_len = r.u32()? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len)?)?;
        let n_nets = r.u32()?;
        let mut nets = Vec::new();
        for _ in 0..n_nets {
            let n_sizes = r.u32()? as usize;
            let sizes = (0..n_sizes).map(|_| r.u32().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
            let hidden = activation(r.u8()?)?;
            let output = activation(r.u8()?)?;
            let n_params = r.u64()? as usize;
            let raw = r.take(n_params.checked_mul(8).ok_or_else(|| Error::Checkpoint("parameter count overflow".into()))?)?;
            let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            nets.push(DenseNet::from_params(&sizes, hidden, output, &params)?);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self { kind, metadata, nets })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::file(path, e))
    }

    pub fn from_encoder(model: &EncoderModel, info: Value) -> Self {
        let meta = EncoderMeta {
            config: model.config.clone(),
            info,
        };
        Self {
            kind: ModelKind::Encoder,
            metadata: serde_json::to_value(meta).expect("metadata serializes"),
            nets: vec![model.encoder.clone(), model.classifier.clone(), model.decoder.clone()],
        }
    }

    pub fn from_policy(bundle: &PolicyBundle, info: Value) -> Self {
        let meta = PolicyMeta {
            env: bundle.env.clone(),
            ppo: bundle.ppo.clone(),
            info,
        };
        Self {
            kind: ModelKind::Policy,
            metadata: serde_json::to_value(meta).expect("metadata serializes"),
            nets: vec![bundle.actor.clone(), bundle.critic.clone()],
        }
    }

    /// Caller-supplied metadata stored alongside the model.
    pub fn info(&self) -> &Value {
        self.metadata.get("info").unwrap_or(&Value::Null)
    }

    fn expect(&self, kind: ModelKind, nets: usize) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        if self.nets.len() != nets {
            return Err(Error::Checkpoint(format!("expected {nets} networks, found {}", self.nets.len())));
        }
        Ok(())
    }

    pub fn into_encoder(self) -> Result<EncoderModel> {
        self.expect(ModelKind::Encoder, 3)?;
        let meta: EncoderMeta = serde_json::from_value(self.metadata)?;
        let mut nets = self.nets.into_iter();
        let (e, c, d) = (nets.next().expect("3 nets"), nets.next().expect("3 nets"), nets.next().expect("3 nets"));
        EncoderModel::from_parts(meta.config, e, c, d)
    }

    pub fn into_policy(self) -> Result<PolicyBundle> {
        self.expect(ModelKind::Policy, 2)?;
        let meta: PolicyMeta = serde_json::from_value(self.metadata)?;
        let mut nets = self.nets.into_iter();
        let bundle = PolicyBundle {
            actor: nets.next().expect("2 nets"),
            critic: nets.next().expect("2 nets"),
            ppo: meta.ppo,
            env: meta.env,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}
