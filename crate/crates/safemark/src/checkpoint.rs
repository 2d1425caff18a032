//! Checkpoint container.
//!
//! Layout: magic bytes `SAFESD1\0`, a 4-byte little-endian metadata
//! length, UTF-8 JSON metadata (kind, run config, array names + shapes),
//! then the named raw little-endian f32 arrays in metadata order.
//! Parameters are held in f64 at runtime and quantized to f32 on save.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Module, PTensor};

pub const MAGIC: &[u8; 8] = b"SAFESD1\0";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Which model this is: "stage1", "stage2", "trigger".
    pub kind: String,
    pub config: RunConfig,
    pub arrays: Vec<ArrayInfo>,
}

/// Serialize a module's parameters under the given kind tag.
pub fn save(path: impl AsRef<Path>, kind: &str, config: &RunConfig, module: &dyn Module) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    module.visit("", &mut |name, p| {
        arrays.push(ArrayInfo {
            name: name.to_string(),
            shape: p.shape.clone(),
        });
        for v in &p.data {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    });
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        config: config.clone(),
        arrays,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
    let mut file = std::fs::File::create(path.as_ref())?;
    file.write_all(MAGIC)?;
    file.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    file.write_all(&meta_json)?;
    file.write_all(&payload)?;
    Ok(())
}

/// Read a container into metadata plus named arrays.
pub fn load(path: impl AsRef<Path>) -> Result<(CheckpointMeta, HashMap<String, PTensor>)> {
    let mut file = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::state(format!(
            "checkpoint {} not readable: {e}",
            path.as_ref().display()
        ))
    })?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".to_string()));
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len)?;
    let meta_len = u32::from_le_bytes(len) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    file.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| Error::Checkpoint(format!("meta decode: {e}")))?;
    let mut arrays = HashMap::new();
    for info in &meta.arrays {
        let numel: usize = info.shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        file.read_exact(&mut bytes).map_err(|_| {
            Error::Checkpoint(format!("truncated array data for {}", info.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        arrays.insert(
            info.name.clone(),
            PTensor {
                shape: info.shape.clone(),
                data,
            },
        );
    }
    Ok((meta, arrays))
}

/// Load a container into an existing module; every module parameter
/// must be present with a matching shape.
pub fn load_module(
    path: impl AsRef<Path>,
    expected_kind: &str,
    module: &mut dyn Module,
) -> Result<RunConfig> {
    let (meta, arrays) = load(path)?;
    if meta.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "expected kind '{expected_kind}', found '{}'",
            meta.kind
        )));
    }
    let mut missing = Vec::new();
    module.visit_mut("", &mut |name, p| match arrays.get(name) {
        Some(src) if src.shape == p.shape => p.data.copy_from_slice(&src.data),
        Some(src) => missing.push(format!("{name}: shape {:?} != {:?}", src.shape, p.shape)),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "incompatible checkpoint: {}",
            missing.join(", ")
        )));
    }
    Ok(meta.config)
}

/// Content digest of a checkpoint file (determinism checks).
pub fn digest_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path.as_ref())?;
    Ok(crate::image::digest_bytes(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, ParamVisit, ParamVisitMut};
    use crate::rng::SeedRng;

    struct Pair {
        a: Linear,
        b: Linear,
    }
    impl Module for Pair {
        fn visit(&self, prefix: &str, f: &mut ParamVisit) {
            self.a.visit(&format!("{prefix}a"), f);
            self.b.visit(&format!("{prefix}b"), f);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
            self.a.visit_mut(&format!("{prefix}a"), f);
            self.b.visit_mut(&format!("{prefix}b"), f);
        }
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = SeedRng::new(5, 0);
        let pair = Pair {
            a: Linear::new(3, 2, &mut rng),
            b: Linear::new(2, 2, &mut rng),
        };
        save(&path, "stage1", &RunConfig::default(), &pair).unwrap();

        let mut fresh = Pair {
            a: Linear::new(3, 2, &mut rng),
            b: Linear::new(2, 2, &mut rng),
        };
        let cfg = load_module(&path, "stage1", &mut fresh).unwrap();
        assert_eq!(cfg.t_steps, 50);
        // f32 quantization bounds the round-trip error
        for (x, y) in pair.flat_params().iter().zip(fresh.flat_params()) {
            assert!((x - y).abs() < 1e-6);
        }

        assert!(load_module(&path, "stage2", &mut fresh).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTMAGIC____").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_state_error() {
        assert!(matches!(
            load("/nonexistent/x.ckpt"),
            Err(Error::State(_))
        ));
    }
}
