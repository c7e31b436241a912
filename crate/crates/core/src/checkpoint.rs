//! Binary checkpoint archive.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "TRIBYOL\0" | u32 version | u64 manifest length | manifest JSON
//! | u8 weight-set count | weight sets... | optimizer buffers
//! | SHA-256 of every preceding byte
//! ```
//!
//! Values are stored as raw `f64` bit patterns, so a round trip is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{Mode, RunConfig};
use crate::networks::TripletState;
use crate::updates::SgdState;
use crate::weights::{Branch, Entry, Kind, Role, WeightSet};

const MAGIC: &[u8; 8] = b"TRIBYOL\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint digest mismatch; file is corrupt")]
    Digest,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

/// Provenance and resume information stored ahead of the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Pretraining hash of `config`.
    pub config_hash: String,
    pub config: RunConfig,
    pub mode: Mode,
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// True only for the checkpoint written after the last epoch.
    pub complete: bool,
    /// Result of the end-of-run collapse check, when it ran.
    pub collapsed: Option<bool>,
    pub online_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub state: TripletState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
    fn values(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend(x.to_bits().to_le_bytes());
        }
    }
    fn weights(&mut self, ws: &WeightSet) {
        self.u8(ws.branch.code());
        self.u32(ws.len() as u32);
        for (name, e) in ws.iter() {
            self.str(name);
            self.u8(e.role.code());
            self.u8(matches!(e.kind, Kind::Learnable) as u8);
            self.u32(e.shape.len() as u32);
            for &d in &e.shape {
                self.u64(d as u64);
            }
            self.values(&e.data);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| malformed("truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.bytes.len()).ok_or_else(|| malformed("length out of range"))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("name is not UTF-8"))
    }
    fn values(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| malformed("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect())
    }
    fn weights(&mut self) -> Result<WeightSet, CheckpointError> {
        let branch = Branch::from_code(self.u8()?).ok_or_else(|| malformed("unknown branch"))?;
        let count = self.u32()?;
        let mut ws = WeightSet::new(branch);
        for _ in 0..count {
            let name = self.str()?;
            let role = Role::from_code(self.u8()?).ok_or_else(|| malformed("unknown role"))?;
            let kind = if self.u8()? == 1 { Kind::Learnable } else { Kind::RunningStatistic };
            let ndim = self.u32()?;
            let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let data = self.values()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(malformed(format!("entry `{name}` shape does not match its data")));
            }
            ws.insert(name, Entry { role, kind, shape, data });
        }
        Ok(ws)
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let manifest = serde_json::to_vec(&ckpt.manifest).expect("manifest serializes");
    w.u64(manifest.len() as u64);
    w.0.extend(&manifest);
    let s = &ckpt.state;
    let sets: Vec<&WeightSet> = [Some(&s.online), s.target2.as_ref(), s.target3.as_ref()].into_iter().flatten().collect();
    w.u8(sets.len() as u8);
    for ws in sets {
        w.weights(ws);
    }
    w.u64(s.iteration);
    w.u32(s.optimizer.buffers.len() as u32);
    for (name, buf) in &s.optimizer.buffers {
        w.str(name);
        w.values(buf);
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend(digest);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Digest);
    }
    let mut r = Reader { bytes: body, at: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let n = r.len()?;
    let mut manifest: CheckpointManifest =
        serde_json::from_slice(r.take(n)?).map_err(|e| malformed(format!("manifest: {e}")))?;
    manifest.config.augment.resolution = manifest.config.model.input_resolution;
    let count = r.u8()?;
    let mut online = None;
    let mut target2 = None;
    let mut target3 = None;
    for _ in 0..count {
        let ws = r.weights()?;
        let slot = match ws.branch {
            Branch::Online => &mut online,
            Branch::Target2 => &mut target2,
            Branch::Target3 => &mut target3,
        };
        if slot.replace(ws).is_some() {
            return Err(malformed("duplicate branch"));
        }
    }
    let online = online.ok_or_else(|| malformed("online weights missing"))?;
    let iteration = r.u64()?;
    let mut optimizer = SgdState::default();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        optimizer.buffers.insert(name, r.values()?);
    }
    if r.at != body.len() {
        return Err(malformed("trailing bytes"));
    }
    Ok(Checkpoint { manifest, state: TripletState { online, target2, target3, iteration, optimizer } })
}

/// Writes through a temporary file so readers never see a partial archive.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode_checkpoint(ckpt)).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{init_triplet, ArchitectureSpec};

    fn sample() -> Checkpoint {
        let (_, mut state) = init_triplet(ArchitectureSpec::toy().with_resolution(16), 3).unwrap();
        state.iteration = 7;
        state.optimizer.buffers.insert("encoder.block0.conv.weight".into(), vec![0.1, -0.0, f64::MIN_POSITIVE]);
        let mut config = RunConfig::minimal("toy-shapes");
        config.model.input_resolution = 16;
        config.refresh().unwrap();
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_VERSION,
                config_hash: config.pretrain_hash(),
                config,
                mode: Mode::Tribyol,
                iteration: 7,
                epoch: 1,
                complete: false,
                collapsed: None,
                online_hash: state.online.content_hash(),
            },
            state,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.state.online.content_hash(), ckpt.state.online.content_hash());
        assert_eq!(
            back.state.target3.as_ref().unwrap().content_hash(),
            ckpt.state.target3.as_ref().unwrap().content_hash()
        );
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_checkpoint(&sample());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Digest)));
        assert!(matches!(decode_checkpoint(b"nonsense-but-long-enough-to-check-magic-here"), Err(CheckpointError::Magic)));
    }

    #[test]
    fn missing_targets_round_trip() {
        let mut ckpt = sample();
        ckpt.state.target3 = None;
        ckpt.state.target2 = None;
        assert_eq!(decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap(), ckpt);
    }
}
