//! Binary model checkpoints: magic, version, raw little-endian `f64`
//! parameters, then a JSON metadata trailer. The trailer carries the round,
//! the algorithm tag, and a hash of the producing config so stale
//! checkpoints cannot be silently resumed against a different setup.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use fedema_core::ParamVector;

use crate::{CliError, CliResult};

const MAGIC: &[u8; 4] = b"FEMA";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub round: usize,
    pub algorithm: String,
    pub config_hash: u64,
}

pub fn save_checkpoint(path: &Path, params: &ParamVector, meta: &CheckpointMeta) -> CliResult<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    let trailer =
        serde_json::to_vec(meta).map_err(|e| CliError::Runtime(format!("meta encode: {e}")))?;
    out.write_all(&trailer)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> CliResult<(ParamVector, CheckpointMeta)> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);

    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| CliError::Runtime("checkpoint truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(CliError::Runtime("not a checkpoint file (bad magic)".into()));
    }

    let mut v4 = [0u8; 4];
    input
        .read_exact(&mut v4)
        .map_err(|_| CliError::Runtime("checkpoint truncated before version".into()))?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(CliError::Runtime(format!(
            "unsupported checkpoint version {version} (this binary supports {FORMAT_VERSION})"
        )));
    }

    let mut v8 = [0u8; 8];
    input
        .read_exact(&mut v8)
        .map_err(|_| CliError::Runtime("checkpoint truncated before parameter count".into()))?;
    let count = u64::from_le_bytes(v8) as usize;

    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        input.read_exact(&mut v8).map_err(|_| {
            CliError::Runtime(format!("checkpoint truncated at parameter {i} of {count}"))
        })?;
        values.push(f64::from_le_bytes(v8));
    }
    let params = ParamVector::new(values).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut trailer = Vec::new();
    input.read_to_end(&mut trailer)?;
    let meta: CheckpointMeta = serde_json::from_slice(&trailer)
        .map_err(|e| CliError::Runtime(format!("checkpoint metadata unreadable: {e}")))?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamVector, CheckpointMeta) {
        (
            ParamVector::new(vec![1.0, -2.5, 0.125, 1e-9]).unwrap(),
            CheckpointMeta {
                round: 7,
                algorithm: "fedema".into(),
                config_hash: 0xdead_beef,
            },
        )
    }

    #[test]
    fn round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fema");
        let (params, meta) = sample();
        save_checkpoint(&path, &params, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.as_slice(), params.as_slice());
        assert_eq!(loaded_meta, meta);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fema");
        std::fs::write(&path, b"NOPE1234567890").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fema");
        let (params, meta) = sample();
        save_checkpoint(&path, &params, &meta).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn rejects_truncated_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fema");
        let (params, meta) = sample();
        save_checkpoint(&path, &params, &meta).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..20]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
