//! Versioned binary checkpoint container.
//!
//! Layout: magic `IMIH`, format version, config snapshot (the canonical
//! RunConfig text), training iteration, data-stream state, named f32
//! parameter blocks, Adam moment blocks, and a trailing SHA-256 over
//! everything before it. Truncated or corrupted files fail the checksum
//! before any parameter is trusted.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{InvMihError, Result};
use crate::iih::IihModel;
use crate::iir::IirModel;

pub const MAGIC: &[u8; 4] = b"IMIH";
pub const FORMAT_VERSION: u32 = 1;

/// A complete training state: models, optimizer moments, and progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub iteration: u64,
    /// Seed of the deterministic batch stream; together with `iteration`
    /// this pins the exact next batch on resume.
    pub data_seed: u64,
    pub params: BTreeMap<String, ArrayD<f32>>,
    pub adam_m: BTreeMap<String, ArrayD<f32>>,
    pub adam_v: BTreeMap<String, ArrayD<f32>>,
    pub adam_t: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_block_map(out: &mut Vec<u8>, map: &BTreeMap<String, ArrayD<f32>>) {
    put_u32(out, map.len() as u32);
    for (name, arr) in map {
        put_bytes(out, name.as_bytes());
        put_u32(out, arr.ndim() as u32);
        for d in arr.shape() {
            put_u64(out, *d as u64);
        }
        put_u64(out, arr.len() as u64);
        for v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(InvMihError::CheckpointShape(
                "unexpected end of checkpoint data".to_string(),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn block_map(&mut self) -> Result<BTreeMap<String, ArrayD<f32>>> {
        let count = self.u32()?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let name = String::from_utf8(self.bytes()?.to_vec())
                .map_err(|_| InvMihError::CheckpointShape("non-UTF-8 block name".into()))?;
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let len = self.u64()? as usize;
            if shape.iter().product::<usize>() != len {
                return Err(InvMihError::CheckpointShape(format!(
                    "block {name}: shape {shape:?} does not match element count {len}"
                )));
            }
            let raw = self.take(len * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(shape, data)
                .map_err(|e| InvMihError::CheckpointShape(format!("block {name}: {e}")))?;
            map.insert(name, arr);
        }
        Ok(map)
    }
}

impl Checkpoint {
    /// Capture model parameters into a fresh checkpoint (empty optimizer).
    pub fn capture(
        iir: &IirModel<f32>,
        iih: &IihModel<f32>,
        config: &RunConfig,
        iteration: u64,
    ) -> Checkpoint {
        let mut params = BTreeMap::new();
        iir.visit_params("iir", &mut |name, v| {
            params.insert(name.to_string(), v.to_owned());
        });
        iih.visit_params("iih", &mut |name, v| {
            params.insert(name.to_string(), v.to_owned());
        });
        Checkpoint {
            config_text: config.to_text(),
            iteration,
            data_seed: config.seed,
            params,
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            adam_t: 0,
        }
    }

    /// Copy stored parameters back into the models; every block must exist
    /// with the exact stored shape.
    pub fn restore(&self, iir: &mut IirModel<f32>, iih: &mut IihModel<f32>) -> Result<()> {
        let mut missing: Vec<String> = Vec::new();
        let mut bad_shape: Vec<String> = Vec::new();
        let mut seen = 0usize;
        {
            let mut apply = |name: &str, mut view: ndarray::ArrayViewMutD<'_, f32>| {
                match self.params.get(name) {
                    Some(stored) if stored.shape() == view.shape() => {
                        view.assign(stored);
                        seen += 1;
                    }
                    Some(stored) => bad_shape.push(format!(
                        "{name}: model {:?} vs checkpoint {:?}",
                        view.shape(),
                        stored.shape()
                    )),
                    None => missing.push(name.to_string()),
                }
            };
            iir.visit_params_mut("iir", &mut apply);
            iih.visit_params_mut("iih", &mut apply);
        }
        if !bad_shape.is_empty() {
            return Err(InvMihError::CheckpointShape(bad_shape.join("; ")));
        }
        if !missing.is_empty() {
            return Err(InvMihError::CheckpointShape(format!(
                "missing parameter blocks: {}",
                missing.join(", ")
            )));
        }
        if seen != self.params.len() {
            return Err(InvMihError::CheckpointShape(format!(
                "checkpoint has {} blocks but the model consumed {seen}",
                self.params.len()
            )));
        }
        Ok(())
    }

    /// The RunConfig recorded at save time.
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    /// Reject use of this checkpoint with a different mosaic capacity.
    pub fn check_layout(&self, requested_n_secrets: usize) -> Result<()> {
        let cfg = self.config()?;
        if cfg.n_secrets != requested_n_secrets {
            return Err(InvMihError::LayoutMismatch(format!(
                "checkpoint was trained for N = {} secrets, requested N = {}",
                cfg.n_secrets, requested_n_secrets
            )));
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_bytes(&mut out, self.config_text.as_bytes());
        put_u64(&mut out, self.iteration);
        put_u64(&mut out, self.data_seed);
        put_block_map(&mut out, &self.params);
        put_block_map(&mut out, &self.adam_m);
        put_block_map(&mut out, &self.adam_v);
        put_u64(&mut out, self.adam_t);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < MAGIC.len() + 4 + 32 {
            return Err(InvMihError::CheckpointChecksum);
        }
        let (body, stored_digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != stored_digest {
            return Err(InvMihError::CheckpointChecksum);
        }
        let mut cur = Cursor { buf: body, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(InvMihError::CheckpointShape(
                "not a checkpoint file (bad magic)".to_string(),
            ));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(InvMihError::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config_text = String::from_utf8(cur.bytes()?.to_vec())
            .map_err(|_| InvMihError::CheckpointShape("non-UTF-8 config snapshot".into()))?;
        let iteration = cur.u64()?;
        let data_seed = cur.u64()?;
        let params = cur.block_map()?;
        let adam_m = cur.block_map()?;
        let adam_v = cur.block_map()?;
        let adam_t = cur.u64()?;
        Ok(Checkpoint {
            config_text,
            iteration,
            data_seed,
            params,
            adam_m,
            adam_v,
            adam_t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SubnetConfig;
    use crate::transforms::MosaicLayout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn models(seed: u64, init: f64) -> (IirModel<f32>, IihModel<f32>) {
        let cfg = SubnetConfig {
            n_layers: 2,
            growth_channels: 4,
            final_init_scale: init,
            ..SubnetConfig::default()
        };
        let layout = MosaicLayout::new(2, 2, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            IirModel::new(2, layout, cfg, 3, &mut rng),
            IihModel::new(2, cfg, 3, &mut rng),
        )
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let (iir, iih) = models(1, 0.05);
        let cfg = RunConfig::default();
        let mut ckpt = Checkpoint::capture(&iir, &iih, &cfg, 123);
        ckpt.adam_t = 7;
        ckpt.adam_m = ckpt.params.clone();
        ckpt.adam_v = ckpt.params.clone();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn restore_overwrites_model_parameters() {
        let (iir_a, iih_a) = models(1, 0.05);
        let (mut iir_b, mut iih_b) = models(2, 0.05);
        let ckpt = Checkpoint::capture(&iir_a, &iih_a, &RunConfig::default(), 0);
        ckpt.restore(&mut iir_b, &mut iih_b).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        iir_a.visit_params("iir", &mut |_, v| a.extend(v.iter().copied()));
        iih_a.visit_params("iih", &mut |_, v| a.extend(v.iter().copied()));
        iir_b.visit_params("iir", &mut |_, v| b.extend(v.iter().copied()));
        iih_b.visit_params("iih", &mut |_, v| b.extend(v.iter().copied()));
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let (iir, iih) = models(3, 0.05);
        let ckpt = Checkpoint::capture(&iir, &iih, &RunConfig::default(), 5);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match Checkpoint::load(&path) {
            Err(InvMihError::CheckpointChecksum) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let (iir, iih) = models(3, 0.05);
        let ckpt = Checkpoint::capture(&iir, &iih, &RunConfig::default(), 5);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(InvMihError::CheckpointChecksum)
        ));
    }

    #[test]
    fn version_mismatch_detected() {
        let (iir, iih) = models(4, 0.05);
        let ckpt = Checkpoint::capture(&iir, &iih, &RunConfig::default(), 0);
        let mut bytes = ckpt.encode();
        // Bump the version field and re-seal the checksum.
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(InvMihError::CheckpointVersion { found: 99, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn restore_into_wrong_architecture_is_shape_error() {
        let (iir, iih) = models(5, 0.05);
        let ckpt = Checkpoint::capture(&iir, &iih, &RunConfig::default(), 0);
        let cfg = SubnetConfig {
            n_layers: 2,
            growth_channels: 6,
            ..SubnetConfig::default()
        };
        let layout = MosaicLayout::new(2, 2, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut iir_b = IirModel::<f32>::new(2, layout, cfg, 3, &mut rng);
        let mut iih_b = IihModel::<f32>::new(2, cfg, 3, &mut rng);
        assert!(matches!(
            ckpt.restore(&mut iir_b, &mut iih_b),
            Err(InvMihError::CheckpointShape(_))
        ));
    }

    #[test]
    fn layout_mismatch_detected() {
        let (iir, iih) = models(6, 0.05);
        let mut cfg = RunConfig::default();
        cfg.n_secrets = 4;
        let ckpt = Checkpoint::capture(&iir, &iih, &cfg, 0);
        ckpt.check_layout(4).unwrap();
        assert!(matches!(
            ckpt.check_layout(16),
            Err(InvMihError::LayoutMismatch(_))
        ));
    }
}
