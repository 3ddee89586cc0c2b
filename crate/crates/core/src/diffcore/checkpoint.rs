//! Checkpoint file: one JSON manifest line (parameter names, shapes, seed,
//! step, free-form metadata), then each parameter's raw little-endian f32
//! payload concatenated in manifest order. Roundtrips are bit-exact.

use super::{DiffError, ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    step: usize,
    params: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

/// Everything a checkpoint carries besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub step: usize,
    pub meta: serde_json::Value,
}

pub fn save(
    path: &Path,
    params: &ParamSet<f32>,
    info: &CheckpointInfo,
) -> Result<(), DiffError> {
    let manifest = Manifest {
        format: "mokit-checkpoint".into(),
        version: 1,
        seed: info.seed,
        step: info.step,
        params: params
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        meta: info.meta.clone(),
    };
    let mut buf =
        serde_json::to_vec(&manifest).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
    buf.push(b'\n');
    for (_, tensor) in params.iter() {
        for &v in &tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet<f32>, CheckpointInfo), DiffError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DiffError::Checkpoint("missing manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| DiffError::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format != "mokit-checkpoint" {
        return Err(DiffError::Checkpoint(format!(
            "unknown format {}",
            manifest.format
        )));
    }
    let payload = &bytes[newline + 1..];
    let total: usize = manifest
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if payload.len() != total * 4 {
        return Err(DiffError::Checkpoint(format!(
            "payload is {} bytes, manifest declares {}",
            payload.len(),
            total * 4
        )));
    }
    let mut params = ParamSet::new();
    let mut at = 0usize;
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let data: Vec<f32> = payload[at..at + numel * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += numel * 4;
        params.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((
        params,
        CheckpointInfo {
            seed: manifest.seed,
            step: manifest.step,
            meta: manifest.meta,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        for (i, shape) in [vec![3, 4], vec![7], vec![2, 2, 2]].into_iter().enumerate() {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-2.0..2.0)).collect();
            params.insert(&format!("layer{i}.w"), Tensor::new(shape, data).unwrap());
        }
        let info = CheckpointInfo {
            seed: 99,
            step: 1234,
            meta: serde_json::json!({"kind": "test", "width": 4}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &params, &info).unwrap();
        let (back, binfo) = load(&path).unwrap();
        assert_eq!(binfo, info);
        assert_eq!(back.len(), params.len());
        for ((n1, t1), (n2, t2)) in back.iter().zip(params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            for (a, b) in t1.data.iter().zip(&t2.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Saving the reloaded set reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save(&path2, &back, &binfo).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(
            &path,
            &params,
            &CheckpointInfo {
                seed: 0,
                step: 0,
                meta: serde_json::Value::Null,
            },
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load(&path), Err(DiffError::Checkpoint(_))));
    }
}
