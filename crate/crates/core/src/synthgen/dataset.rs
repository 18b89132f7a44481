//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/samples/<id>/{hr,ref,lr,ref_lr}.png
//! <root>/samples/<id>/{depth_lr,depth_reflr}.f32
//! <root>/samples/<id>/meta.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SampleRecord, SceneParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub hr: [usize; 2],
    pub lr: [usize; 2],
    /// File name to lowercase hex sha256.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    id: String,
    hr: [usize; 2],
    lr: [usize; 2],
    params: SceneParams,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(Error::Png(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            rgb.push((img.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&rgb).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(out)
}

/// Writes a 3-channel image in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_png(img: &Tensor<f32>, path: &Path) -> Result<()> {
    write_file(path, &encode_png(img)?)
}

fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("expected 8-bit RGB, got {:?}/{:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = buf[i * 3 + ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn encode_f32(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_f32(bytes: &[u8], (h, w): (usize, usize)) -> Result<Tensor<f32>> {
    if bytes.len() != 4 * h * w {
        return Err(Error::CorruptDataset(format!(
            "depth file holds {} bytes, expected {}",
            bytes.len(),
            4 * h * w
        )));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Tensor::new(&[1, h, w], data)
}

/// Writes `records` under `root` (created if needed) and returns the manifest.
pub fn dataset_write(records: &[SampleRecord], root: &Path) -> Result<Manifest> {
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let dir = root.join("samples").join(&r.sample_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (hr, lr) = (r.hr_hw(), r.lr_hw());
        let meta = SampleMeta {
            id: r.sample_id.clone(),
            hr: [hr.0, hr.1],
            lr: [lr.0, lr.1],
            params: r.params.clone(),
        };
        let blobs = [
            ("hr.png", encode_png(&r.hr)?),
            ("ref.png", encode_png(&r.reference)?),
            ("lr.png", encode_png(&r.lr)?),
            ("ref_lr.png", encode_png(&r.ref_down)?),
            ("depth_lr.f32", encode_f32(&r.depth_lr)),
            ("depth_reflr.f32", encode_f32(&r.depth_ref_down)),
            ("meta.json", serde_json::to_vec_pretty(&meta)?),
        ];
        let mut files = BTreeMap::new();
        for (name, bytes) in blobs {
            write_file(&dir.join(name), &bytes)?;
            files.insert(name.to_string(), sha256_hex(&bytes));
        }
        samples.push(ManifestEntry {
            id: r.sample_id.clone(),
            hr: meta.hr,
            lr: meta.lr,
            files,
        });
    }
    let manifest = Manifest { format: 1, samples };
    write_file(&root.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    if !path.is_file() {
        return Err(Error::MissingManifest(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::CorruptDataset(format!("manifest: {e}")))
}

/// Reads every sample, verifying each file against its manifest checksum.
pub fn dataset_read(root: &Path) -> Result<Vec<SampleRecord>> {
    let manifest = read_manifest(root)?;
    manifest.samples.iter().map(|e| read_sample(root, e)).collect()
}

fn read_sample(root: &Path, entry: &ManifestEntry) -> Result<SampleRecord> {
    let dir = root.join("samples").join(&entry.id);
    let load = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        let want = entry
            .files
            .get(name)
            .ok_or_else(|| Error::CorruptDataset(format!("{}: no checksum for {name}", entry.id)))?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if &sha256_hex(&bytes) != want {
            return Err(Error::CorruptDataset(format!("{}: checksum mismatch for {name}", entry.id)));
        }
        Ok(bytes)
    };
    let meta: SampleMeta = serde_json::from_slice(&load("meta.json")?)
        .map_err(|e| Error::CorruptDataset(format!("{}: meta.json: {e}", entry.id)))?;
    let lr_hw = (meta.lr[0], meta.lr[1]);
    let png = |name: &str, hw: [usize; 2]| -> Result<Tensor<f32>> {
        let t = decode_png(&load(name)?)?;
        if t.shape()[1..] != hw {
            return Err(Error::CorruptDataset(format!("{}: {name} is {:?}, meta says {hw:?}", entry.id, t.shape())));
        }
        Ok(t)
    };
    Ok(SampleRecord {
        sample_id: meta.id.clone(),
        hr: png("hr.png", meta.hr)?,
        reference: png("ref.png", meta.hr)?,
        lr: png("lr.png", meta.lr)?,
        ref_down: png("ref_lr.png", meta.lr)?,
        depth_lr: decode_f32(&load("depth_lr.f32")?, lr_hw)?,
        depth_ref_down: decode_f32(&load("depth_reflr.f32")?, lr_hw)?,
        params: meta.params,
    })
}
