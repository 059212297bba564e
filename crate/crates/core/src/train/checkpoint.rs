//! Versioned little-endian checkpoint files with a trailing CRC32.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::optim::AdamW;
use crate::nn::{Group, Param, ParamStore};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"VISTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint holds {found:?} values, expected {expected:?}")]
    DType { found: DType, expected: DType },
    #[error("checkpoint does not match the model layout: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Full position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    /// Resolved config the run was started with, as key-value text.
    pub config: String,
    pub store: ParamStore<T>,
    pub opt: Option<AdamW<T>>,
    pub rng: RngState,
}

impl<T: Real> Checkpoint<T> {
    /// Fails unless names and shapes line up one to one with `expected`.
    pub fn check_manifest(&self, expected: &ParamStore<T>) -> Result<(), CheckpointError> {
        if self.store.len() != expected.len() {
            return Err(CheckpointError::Manifest(format!(
                "{} parameters in file, {} in model",
                self.store.len(),
                expected.len()
            )));
        }
        for (a, b) in self.store.iter().zip(expected.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(CheckpointError::Manifest(format!(
                    "{} {:?} in file, {} {:?} in model",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_bytes(&mut out, self.config.as_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for p in self.store.iter() {
            put_bytes(&mut out, p.name.as_bytes());
            out.push(p.group.tag());
            out.push(p.frozen as u8);
            out.push(p.value.ndim() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        match &self.opt {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.t.to_le_bytes());
                for x in [o.beta1, o.beta2, o.weight_decay, o.eps] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                for buf in o.m.iter().chain(&o.v) {
                    for &v in buf {
                        v.write_le(&mut out);
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Corrupt("missing header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(CheckpointError::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let tag = r.byte()?;
        let found = DType::from_tag(tag).ok_or_else(|| CheckpointError::Corrupt(format!("dtype tag {tag}")))?;
        if found != T::DTYPE {
            return Err(CheckpointError::DType { found, expected: T::DTYPE });
        }
        let step = u64::from_le_bytes(r.array()?);
        let config = String::from_utf8(r.sized()?.to_vec()).map_err(|_| CheckpointError::Corrupt("config is not utf-8".into()))?;
        let rng = RngState {
            seed: r.array()?,
            stream: u64::from_le_bytes(r.array()?),
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(r.sized()?.to_vec()).map_err(|_| CheckpointError::Corrupt("name is not utf-8".into()))?;
            let g = r.byte()?;
            let group = Group::from_tag(g).ok_or_else(|| CheckpointError::Corrupt(format!("group tag {g}")))?;
            let frozen = r.byte()? != 0;
            let ndim = r.byte()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(r.array()?) as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.values::<T>(n)?;
            let value = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            params.push(Param { name, group, value, frozen });
        }
        let store = ParamStore::from_params(params);
        let opt = match r.byte()? {
            0 => None,
            1 => {
                let t = u64::from_le_bytes(r.array()?);
                let mut h = [0.0; 4];
                for x in h.iter_mut() {
                    *x = f64::from_le_bytes(r.array()?);
                }
                let lens: Vec<usize> = store.iter().map(|p| p.value.len()).collect();
                let mut m = Vec::with_capacity(lens.len());
                for &n in &lens {
                    m.push(r.values::<T>(n)?);
                }
                let mut v = Vec::with_capacity(lens.len());
                for &n in &lens {
                    v.push(r.values::<T>(n)?);
                }
                Some(AdamW {
                    beta1: h[0],
                    beta2: h[1],
                    weight_decay: h[2],
                    eps: h[3],
                    t,
                    m,
                    v,
                })
            }
            b => return Err(CheckpointError::Corrupt(format!("optimizer flag {b}"))),
        };
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            step,
            config,
            store,
            opt,
            rng,
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn byte(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn sized(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = u32::from_le_bytes(self.array()?) as usize;
        self.take(n)
    }

    fn values<T: Real>(&mut self, n: usize) -> Result<Vec<T>, CheckpointError> {
        let w = T::DTYPE.size_bytes();
        let raw = self.take(n.checked_mul(w).ok_or_else(|| CheckpointError::Corrupt("size overflow".into()))?)?;
        Ok(raw.chunks_exact(w).map(T::read_le).collect())
    }
}

/// Writes through a temporary sibling and renames, so a crash never leaves
/// a half-written checkpoint under the final name.
pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Element type of a checkpoint file, read from its header alone.
pub fn checkpoint_dtype(path: &Path) -> Result<DType, CheckpointError> {
    use std::io::Read;
    let mut head = [0u8; MAGIC.len() + 5];
    std::fs::File::open(path)?
        .read_exact(&mut head)
        .map_err(|_| CheckpointError::Corrupt("missing header".into()))?;
    if &head[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Corrupt("missing header".into()));
    }
    let tag = head[MAGIC.len() + 4];
    DType::from_tag(tag).ok_or_else(|| CheckpointError::Corrupt(format!("dtype tag {tag}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add_normal("a", Group::Resampler, &[2, 3], 1.0, &mut rng);
        store.add_const("b", Group::Gate, &[1], 0.5);
        store.set_frozen(Group::Gate, true);
        let mut opt = AdamW::new(&store, 0.9, 0.99, 0.1);
        opt.t = 7;
        opt.m[0][1] = 0.25;
        rng.next_u64();
        Checkpoint {
            step: 7,
            config: "seed = 4\n".into(),
            store,
            opt: Some(opt),
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::<f32>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let mut a = c.rng.restore();
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn truncation_and_flips_are_detected() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..cut]), Err(CheckpointError::Corrupt(_))));
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&flipped), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(CheckpointError::DType { .. })));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(CheckpointError::Version { found: 9, .. })));
    }

    #[test]
    fn manifest_mismatch() {
        let c = sample();
        let mut other = ParamStore::<f32>::new();
        other.add_const("a", Group::Resampler, &[3, 2], 0.0);
        other.add_const("b", Group::Gate, &[1], 0.0);
        assert!(matches!(c.check_manifest(&other), Err(CheckpointError::Manifest(_))));
        assert!(c.check_manifest(&c.store).is_ok());
    }
}
