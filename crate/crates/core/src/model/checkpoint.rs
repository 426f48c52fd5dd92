//! On-disk model format: `manifest.json` describing the config and every
//! parameter (name, shape, byte offset), plus `weights.bin` holding the
//! values as little-endian f64 in manifest order. Loading rebuilds the
//! parameter skeleton from the config and refuses any disagreement with the
//! manifest or a weights file of the wrong length.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamMeta>,
    pub total_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

pub fn save(model: &Model, dir: &Path) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let weights_path = dir.join(WEIGHTS_FILE);
    let mut w = BufWriter::new(File::create(&weights_path).map_err(io_err(&weights_path))?);
    let mut params = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for (name, t) in model.params.iter() {
        params.push(ParamMeta { name: name.to_string(), shape: t.shape().to_vec(), offset });
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err(&weights_path))?;
        }
        offset += (t.numel() * 8) as u64;
    }
    w.flush().map_err(io_err(&weights_path))?;

    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: model.cfg.clone(),
        params,
        total_bytes: offset,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut m = BufWriter::new(File::create(&manifest_path).map_err(io_err(&manifest_path))?);
    serde_json::to_writer_pretty(&mut m, &manifest)
        .map_err(|e| ModelError::Checkpoint(format!("manifest serialization: {e}")))?;
    m.write_all(b"\n").map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Model, ModelError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = File::open(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_reader(file)
        .map_err(|e| ModelError::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "format_version {} unsupported, this build reads {CHECKPOINT_VERSION}",
            manifest.format_version
        )));
    }

    // The skeleton defines the authoritative parameter inventory; the
    // manifest must agree exactly (seed is irrelevant, values get replaced).
    let mut model = Model::new(manifest.config.clone(), 0)?;
    if manifest.params.len() != model.params.len() {
        return Err(ModelError::Checkpoint(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    let mut expect_offset = 0u64;
    for (meta, (name, t)) in manifest.params.iter().zip(model.params.iter()) {
        if meta.name != name || meta.shape != t.shape() {
            return Err(ModelError::Checkpoint(format!(
                "parameter mismatch: manifest has {} {:?}, config implies {} {:?}",
                meta.name,
                meta.shape,
                name,
                t.shape()
            )));
        }
        if meta.offset != expect_offset {
            return Err(ModelError::Checkpoint(format!(
                "parameter {} at offset {}, expected {expect_offset}",
                meta.name, meta.offset
            )));
        }
        expect_offset += (t.numel() * 8) as u64;
    }
    if manifest.total_bytes != expect_offset {
        return Err(ModelError::Checkpoint(format!(
            "manifest total_bytes {} disagrees with parameter shapes ({expect_offset})",
            manifest.total_bytes
        )));
    }

    let weights_path = dir.join(WEIGHTS_FILE);
    let mut file = File::open(&weights_path).map_err(io_err(&weights_path))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err(&weights_path))?;
    if bytes.len() as u64 != expect_offset {
        return Err(ModelError::Checkpoint(format!(
            "weights file holds {} bytes, manifest implies {expect_offset}",
            bytes.len()
        )));
    }

    let mut cursor = 0usize;
    for t in model.params.tensors_mut() {
        let n = t.numel();
        for v in t.data_mut() {
            *v = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().expect("8 bytes"));
            cursor += 8;
        }
        debug_assert_eq!(cursor % 8, 0);
        let _ = n;
    }
    Ok(model)
}

impl Model {
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        save(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Model, ModelError> {
        load(dir)
    }
}
