//! Checkpoint directories: `weights.bin` (little-endian f32, groups and
//! parameters in registration order), `arch.json` (layout and config echo)
//! and `meta.json` (step, seed, schedule state, weight hash).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::synthgen::sha256_hex;
use crate::tensor::Tensor;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const ARCH_FILE: &str = "arch.json";
pub const META_FILE: &str = "meta.json";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into `weights.bin`, in floats.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchGroup {
    pub name: String,
    pub params: Vec<ArchEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub format: u32,
    pub groups: Vec<ArchGroup>,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    pub total_steps: u64,
    pub seed: u64,
    /// Learning rate used for the last completed step.
    pub lr: f64,
    pub weights_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arch: Arch,
    pub meta: CheckpointMeta,
    pub groups: Vec<(String, ParamStore<f32>)>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Config(format!("checkpoint has no parameter group `{name}`")))
    }

    /// Copies group `name` into `store`, whose layout must match.
    pub fn restore(&self, name: &str, store: &mut ParamStore<f32>) -> Result<()> {
        store.copy_from(self.group(name)?)
    }
}

/// Progress fields of [`CheckpointMeta`]; the hash is filled in on save.
#[derive(Clone, Copy, Debug)]
pub struct Progress {
    pub step: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub lr: f64,
}

fn encode(groups: &[(&str, &ParamStore<f32>)]) -> (Vec<u8>, Vec<ArchGroup>) {
    let mut bytes = Vec::new();
    let mut offset = 0;
    let mut arch = Vec::new();
    for (gname, store) in groups {
        let mut params = Vec::new();
        for (name, t) in store.iter() {
            params.push(ArchEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        arch.push(ArchGroup {
            name: gname.to_string(),
            params,
        });
    }
    (bytes, arch)
}

/// Writes a checkpoint into `dir`, replacing any previous one. The meta
/// file is written last, so a directory with a readable meta whose hash
/// matches is complete.
pub fn save(dir: &Path, groups: &[(&str, &ParamStore<f32>)], config: &impl Serialize, progress: Progress) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bytes, arch_groups) = encode(groups);
    let arch = Arch {
        format: FORMAT,
        groups: arch_groups,
        config: serde_json::to_value(config)?,
    };
    let meta = CheckpointMeta {
        step: progress.step,
        total_steps: progress.total_steps,
        seed: progress.seed,
        lr: progress.lr,
        weights_sha256: sha256_hex(&bytes),
    };
    let write = |name: &str, data: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, data).map_err(|e| Error::io(&path, e))
    };
    write(WEIGHTS_FILE, &bytes)?;
    write(ARCH_FILE, &serde_json::to_vec_pretty(&arch)?)?;
    write(META_FILE, &serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| Error::io(&path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta =
        serde_json::from_slice(&read(dir, META_FILE)?).map_err(|e| corrupt(format!("{META_FILE}: {e}")))?;
    let arch: Arch = serde_json::from_slice(&read(dir, ARCH_FILE)?).map_err(|e| corrupt(format!("{ARCH_FILE}: {e}")))?;
    let bytes = read(dir, WEIGHTS_FILE)?;
    let hash = sha256_hex(&bytes);
    if hash != meta.weights_sha256 {
        return Err(corrupt(format!("{WEIGHTS_FILE} hash {hash} != recorded {}", meta.weights_sha256)));
    }
    if arch.format != FORMAT {
        return Err(corrupt(format!("unknown checkpoint format {}", arch.format)));
    }
    if bytes.len() % 4 != 0 {
        return Err(corrupt(format!("{WEIGHTS_FILE} length {} is not a multiple of 4", bytes.len())));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut expected = 0;
    let mut groups = Vec::new();
    for g in &arch.groups {
        let mut store = ParamStore::new();
        for e in &g.params {
            let len: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + len > floats.len() {
                return Err(corrupt(format!("parameter `{}` lies outside {WEIGHTS_FILE}", e.name)));
            }
            let t = Tensor::new(&e.shape, floats[e.offset..e.offset + len].to_vec())?;
            store.add(e.name.clone(), t);
            expected += len;
        }
        groups.push((g.name.clone(), store));
    }
    if expected != floats.len() {
        return Err(corrupt(format!("{WEIGHTS_FILE} holds {} floats, layout needs {expected}", floats.len())));
    }
    Ok(Checkpoint { arch, meta, groups })
}

/// Hash of the weight blob as it sits on disk.
pub fn weights_hash(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&read(dir, WEIGHTS_FILE)?))
}
