//! Versioned binary checkpoints.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic    8 bytes  "FSEDCKP1"
//! version  u32
//! config   in_bins, c0, c1, c2, pool_t, pool_f as u32; slope, bn_momentum, bn_eps as f64
//! cfg_hash u64      fingerprint of the canonical config string
//! count    u64      number of f32 payload values (trainable + running stats)
//! payload  count * f32
//! rng_flag u8       1 if an RNG state follows
//! rng      32-byte seed + u128 word position   (if rng_flag == 1)
//! checksum u64      FNV-1a over every preceding byte
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Embedder, EmbedderConfig, Scalar};
use crate::hash::Fnv1a64;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FSEDCKP1";
const VERSION: u32 = 1;

/// Serialized training RNG state so runs can resume deterministically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

/// Write a checkpoint. Parameters are stored as f32 regardless of the
/// engine's element type.
pub fn save_checkpoint<F: Scalar>(
    embedder: &Embedder<F>,
    rng: Option<&RngState>,
    path: &Path,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = &embedder.cfg;
    for v in [
        cfg.in_bins as u32,
        cfg.channels[0] as u32,
        cfg.channels[1] as u32,
        cfg.channels[2] as u32,
        cfg.pool_t as u32,
        cfg.pool_f as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [cfg.leaky_slope, cfg.bn_momentum, cfg.bn_eps] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&cfg.hash().to_le_bytes());
    buf.extend_from_slice(&(embedder.total_count() as u64).to_le_bytes());
    embedder.for_each_trainable(|p| {
        for &v in p.iter() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    });
    embedder.for_each_running(|p| {
        for &v in p.iter() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    });
    match rng {
        Some(state) => {
            buf.push(1);
            buf.extend_from_slice(&state.seed);
            buf.extend_from_slice(&state.word_pos.to_le_bytes());
        }
        None => buf.push(0),
    }
    let mut hasher = Fnv1a64::new();
    hasher.update(&buf);
    buf.extend_from_slice(&hasher.finish().to_le_bytes());

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint back. When `expected` is given, a config mismatch is a
/// shape error (the caller's pipeline would feed incompatible inputs).
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
    expected: Option<&EmbedderConfig>,
) -> Result<(Embedder<F>, Option<RngState>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Format(format!("{}: truncated checkpoint", path.display())));
    }

    // checksum covers everything before the trailing u64
    let (body, tail) = buf.split_at(buf.len() - 8);
    let mut hasher = Fnv1a64::new();
    hasher.update(body);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if hasher.finish() != stored {
        return Err(Error::Checksum(path.to_path_buf()));
    }

    let mut cur = Cursor { buf: body, pos: 0, path };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let in_bins = cur.u32()? as usize;
    let c0 = cur.u32()? as usize;
    let c1 = cur.u32()? as usize;
    let c2 = cur.u32()? as usize;
    let pool_t = cur.u32()? as usize;
    let pool_f = cur.u32()? as usize;
    let leaky_slope = cur.f64()?;
    let bn_momentum = cur.f64()?;
    let bn_eps = cur.f64()?;
    let cfg = EmbedderConfig {
        in_bins,
        channels: [c0, c1, c2],
        pool_t,
        pool_f,
        leaky_slope,
        bn_momentum,
        bn_eps,
    };
    let cfg_hash = cur.u64()?;
    if cfg_hash != cfg.hash() {
        return Err(Error::Format(format!("{}: config hash mismatch", path.display())));
    }
    if let Some(exp) = expected {
        if *exp != cfg {
            return Err(Error::Shape(format!(
                "checkpoint config {} does not match expected {}",
                cfg.canonical(),
                exp.canonical()
            )));
        }
    }

    // Build a zero-valued embedder with the right shapes, then fill it.
    let mut seed_rng = crate::rng::substream(0, "checkpoint-shape");
    let mut emb = Embedder::<F>::init(cfg, &mut seed_rng)?;
    let count = cur.u64()? as usize;
    if count != emb.total_count() {
        return Err(Error::Format(format!(
            "{}: payload holds {count} values, config implies {}",
            path.display(),
            emb.total_count()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(cur.f32()?);
    }
    let mut it = values.into_iter();
    emb.for_each_trainable_mut(|mut p| {
        for v in p.iter_mut() {
            *v = F::from_f64(f64::from(it.next().expect("payload length checked")));
        }
    });
    emb.for_each_running_mut(|mut p| {
        for v in p.iter_mut() {
            *v = F::from_f64(f64::from(it.next().expect("payload length checked")));
        }
    });

    let rng = match cur.u8()? {
        0 => None,
        1 => {
            let seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
            let word_pos = u128::from_le_bytes(cur.take(16)?.try_into().unwrap());
            Some(RngState { seed, word_pos })
        }
        other => {
            return Err(Error::Format(format!(
                "{}: bad rng flag {other}",
                path.display()
            )))
        }
    };
    Ok((emb, rng))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::Array2;

    fn tiny_cfg() -> EmbedderConfig {
        EmbedderConfig {
            in_bins: 6,
            channels: [2, 3, 2],
            pool_t: 2,
            pool_f: 2,
            ..EmbedderConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = substream(21, "init");
        let emb = Embedder::<f32>::init(tiny_cfg(), &mut rng).unwrap();
        let state = RngState { seed: [7u8; 32], word_pos: 12345 };
        save_checkpoint(&emb, Some(&state), &path).unwrap();
        let (loaded, rng_state) = load_checkpoint::<f32>(&path, Some(&tiny_cfg())).unwrap();
        assert_eq!(rng_state, Some(state));

        let mut orig = Vec::new();
        emb.for_each_trainable(|p| orig.extend(p.iter().copied()));
        emb.for_each_running(|p| orig.extend(p.iter().copied()));
        let mut back = Vec::new();
        loaded.for_each_trainable(|p| back.extend(p.iter().copied()));
        loaded.for_each_running(|p| back.extend(p.iter().copied()));
        assert_eq!(orig.len(), back.len());
        for (a, b) in orig.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // save(load(x)) is byte-stable
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, Some(&RngState { seed: [7u8; 32], word_pos: 12345 }), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn forward_identical_after_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = substream(22, "init");
        let emb = Embedder::<f32>::init(tiny_cfg(), &mut rng).unwrap();
        let seg = Array2::from_shape_fn((9, 6), |(i, j)| ((i + 2 * j) as f32 * 0.21).cos());
        let before = emb.embed_segment(&seg).unwrap();
        save_checkpoint(&emb, None, &path).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(&path, None).unwrap();
        let after = loaded.embed_segment(&seg).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn config_mismatch_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = substream(23, "init");
        let emb = Embedder::<f32>::init(tiny_cfg(), &mut rng).unwrap();
        save_checkpoint(&emb, None, &path).unwrap();
        let other = EmbedderConfig { in_bins: 7, ..tiny_cfg() };
        assert!(matches!(
            load_checkpoint::<f32>(&path, Some(&other)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn corruption_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = substream(24, "init");
        let emb = Embedder::<f32>::init(tiny_cfg(), &mut rng).unwrap();
        save_checkpoint(&emb, None, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path, None),
            Err(Error::Checksum(_))
        ));
    }
}
