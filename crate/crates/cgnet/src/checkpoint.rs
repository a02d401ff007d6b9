//! Checkpoint format: `CGNZ` magic, u32 version, u32 tensor count, then per
//! tensor a length-prefixed UTF-8 name, u32 rank, little-endian u32 extents
//! and a little-endian f32 payload; the file ends with a 64-bit FNV-1a
//! checksum over everything between the version field and the checksum.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{build, Model, NetworkConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"CGNZ";
pub const VERSION: u32 = 1;

struct Fnv1a64(u64);

impl Fnv1a64 {
    fn new() -> Self {
        Fnv1a64(0xcbf29ce484222325)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
}

struct HashingWriter<W: Write> {
    inner: W,
    hash: Fnv1a64,
}

impl<W: Write> HashingWriter<W> {
    fn write_hashed(&mut self, bytes: &[u8]) -> Result<()> {
        self.hash.update(bytes);
        self.inner.write_all(bytes)?;
        Ok(())
    }
}

pub fn save_named(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hash: Fnv1a64::new(),
    };
    w.inner.write_all(MAGIC)?;
    w.inner.write_all(&VERSION.to_le_bytes())?;
    w.write_hashed(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let bytes = name.as_bytes();
        w.write_hashed(&(bytes.len() as u32).to_le_bytes())?;
        w.write_hashed(bytes)?;
        let s = tensor.shape();
        w.write_hashed(&4u32.to_le_bytes())?;
        for extent in [s.n, s.c, s.h, s.w] {
            w.write_hashed(&(extent as u32).to_le_bytes())?;
        }
        let data = tensor.data();
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_hashed(&buf)?;
    }
    let digest = w.hash.0;
    w.inner.write_all(&digest.to_le_bytes())?;
    w.inner.flush()?;
    Ok(())
}

struct HashingReader<R: Read> {
    inner: R,
    hash: Fnv1a64,
}

impl<R: Read> HashingReader<R> {
    fn read_hashed(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::CheckpointCorrupt("file truncated".into()))?;
        self.hash.update(buf);
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_hashed(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

fn read_header<R: Read>(inner: &mut R) -> Result<()> {
    let mut magic = [0u8; 4];
    inner
        .read_exact(&mut magic)
        .map_err(|_| Error::CheckpointCorrupt("file truncated".into()))?;
    if &magic != MAGIC {
        return Err(Error::CheckpointCorrupt("bad magic".into()));
    }
    let mut v = [0u8; 4];
    inner
        .read_exact(&mut v)
        .map_err(|_| Error::CheckpointCorrupt("file truncated".into()))?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    Ok(())
}

/// Load every tensor, verifying the trailing checksum.
pub fn load_named(path: &Path) -> Result<Vec<(String, Shape, Vec<f32>)>> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    read_header(&mut reader)?;
    let mut r = HashingReader {
        inner: reader,
        hash: Fnv1a64::new(),
    };
    let count = r.read_u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.read_u32()? as usize;
        if name_len > 1 << 20 {
            return Err(Error::CheckpointCorrupt("implausible name length".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_hashed(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::CheckpointCorrupt("tensor name is not UTF-8".into()))?;
        let rank = r.read_u32()?;
        if rank != 4 {
            return Err(Error::CheckpointCorrupt(format!(
                "unsupported tensor rank {rank}"
            )));
        }
        let mut extents = [0usize; 4];
        for e in &mut extents {
            *e = r.read_u32()? as usize;
        }
        let shape = Shape::new(extents[0], extents[1], extents[2], extents[3]);
        let mut payload = vec![0u8; shape.numel() * 4];
        r.read_hashed(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, shape, data));
    }
    let digest = r.hash.0;
    let mut trailer = [0u8; 8];
    r.inner
        .read_exact(&mut trailer)
        .map_err(|_| Error::CheckpointCorrupt("file truncated".into()))?;
    if u64::from_le_bytes(trailer) != digest {
        return Err(Error::CheckpointCorrupt("payload checksum mismatch".into()));
    }
    Ok(out)
}

/// Names and extents only; payloads are skipped, not verified.
pub fn read_inventory(path: &Path) -> Result<Vec<(String, Shape)>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_header(&mut r)?;
    let read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::CheckpointCorrupt("file truncated".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::CheckpointCorrupt("file truncated".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::CheckpointCorrupt("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank != 4 {
            return Err(Error::CheckpointCorrupt(format!(
                "unsupported tensor rank {rank}"
            )));
        }
        let mut extents = [0usize; 4];
        for e in &mut extents {
            *e = read_u32(&mut r)? as usize;
        }
        let shape = Shape::new(extents[0], extents[1], extents[2], extents[3]);
        r.seek(SeekFrom::Current(shape.numel() as i64 * 4))?;
        out.push((name, shape));
    }
    Ok(out)
}

impl Model<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_named(path, &self.named_params())
    }

    /// Build a model for `cfg` and fill it with the tensors stored at `path`.
    /// The file inventory must match the config-derived inventory exactly.
    pub fn load(cfg: &NetworkConfig, path: &Path) -> Result<Model<f32>> {
        let model = build::<f32>(cfg, 0)?;
        let stored = load_named(path)?;
        let mut by_name: std::collections::HashMap<String, (Shape, Vec<f32>)> = stored
            .into_iter()
            .map(|(name, shape, data)| (name, (shape, data)))
            .collect();
        for (name, tensor) in model.named_params() {
            let (shape, data) = by_name.remove(&name).ok_or_else(|| {
                Error::CheckpointInventory(format!("missing tensor '{name}'"))
            })?;
            if shape != tensor.shape() {
                return Err(Error::CheckpointInventory(format!(
                    "tensor '{name}' has shape {shape}, model expects {}",
                    tensor.shape()
                )));
            }
            tensor.set_data(data)?;
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::CheckpointInventory(format!(
                "unexpected tensor '{name}' not in the model inventory"
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("cgnet-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = NetworkConfig::desk(4);
        let model = build::<f32>(&cfg, 17).unwrap();
        let path = tmpdir().join("roundtrip.ckpt");
        model.save(&path).unwrap();
        let loaded = Model::load(&cfg, &path).unwrap();
        for ((na, ta), (nb, tb)) in model.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(*na, nb);
            let da = ta.data();
            let db = tb.data();
            assert!(da.iter().zip(db.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let cfg = NetworkConfig::desk(4);
        let model = build::<f32>(&cfg, 17).unwrap();
        let path = tmpdir().join("truncated.ckpt");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match Model::load(&cfg, &path) {
            Err(Error::CheckpointCorrupt(_)) => {}
            Err(other) => panic!("expected corrupt-checkpoint error, got {other}"),
            Ok(_) => panic!("expected corrupt-checkpoint error, got a model"),
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn flipped_payload_fails_checksum() {
        let cfg = NetworkConfig::desk(4);
        let model = build::<f32>(&cfg, 17).unwrap();
        let path = tmpdir().join("flipped.ckpt");
        model.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Model::load(&cfg, &path).err(),
            Some(Error::CheckpointCorrupt(_)) | Some(Error::NonFinite { .. })
        ));
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let cfg = NetworkConfig::desk(4);
        let model = build::<f32>(&cfg, 17).unwrap();
        let path = tmpdir().join("version.ckpt");
        model.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Model::load(&cfg, &path).err(),
            Some(Error::CheckpointVersion { found: 9, .. })
        ));
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn mismatched_config_names_first_missing_tensor() {
        let cfg = NetworkConfig::desk(4);
        let model = build::<f32>(&cfg, 17).unwrap();
        let path = tmpdir().join("mismatch.ckpt");
        model.save(&path).unwrap();
        let mut bigger = cfg.clone();
        bigger.enc_blocks = [2, 1, 1, 1];
        match Model::load(&bigger, &path) {
            Err(Error::CheckpointInventory(msg)) => {
                assert!(msg.contains("enc0.cg1"), "unexpected message: {msg}");
            }
            Err(other) => panic!("expected inventory error, got {other}"),
            Ok(_) => panic!("expected inventory error, got a model"),
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn inventory_matches_named_params() {
        let cfg = NetworkConfig::desk(4);
        let model = build::<f32>(&cfg, 17).unwrap();
        let path = tmpdir().join("inventory.ckpt");
        model.save(&path).unwrap();
        let inv = read_inventory(&path).unwrap();
        let named = model.named_params();
        assert_eq!(inv.len(), named.len());
        for ((ni, si), (nm, tm)) in inv.iter().zip(&named) {
            assert_eq!(ni, nm);
            assert_eq!(*si, tm.shape());
        }
        std::fs::remove_file(path).ok();
    }
}
