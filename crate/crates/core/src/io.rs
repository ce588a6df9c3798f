//! Binary tensor files, checkpoints and PGM previews.
//!
//! All integers are little-endian `u32`, payloads little-endian `f32` in
//! row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"FSRT";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSRW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("length fits in u32");
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<F: Real>(buf: &mut Vec<u8>, t: &Tensor<F>) {
    put_u32(buf, t.rank());
    for &d in t.shape() {
        put_u32(buf, d);
    }
    buf.reserve(4 * t.numel());
    for &v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Cursor over a file's bytes that reports short reads as [`Error::Truncated`].
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.saturating_add(n);
        if end > self.bytes.len() {
            return Err(Error::Truncated { path: self.path.to_path_buf(), expected: end, actual: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn parse_err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), msg: msg.into() }
    }

    fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.parse_err(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let v = self.u32()?;
        if v != version as usize {
            return Err(self.parse_err(format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| self.parse_err(format!("invalid utf-8: {e}")))
    }

    fn tensor<F: Real>(&mut self) -> Result<Tensor<F>> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(self.parse_err(format!("implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| self.parse_err(format!("shape {shape:?} overflows")))?;
        let payload = self.take(n)?;
        let data =
            payload.chunks_exact(4).map(|c| F::cst(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        Tensor::new(shape, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.parse_err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ten<F: Real>(t: &Tensor<F>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut buf, TENSOR_VERSION as usize);
    put_tensor(&mut buf, t);
    buf
}

pub fn decode_ten<F: Real>(path: &Path, bytes: &[u8]) -> Result<Tensor<F>> {
    let mut r = Reader::new(path, bytes);
    r.header(TENSOR_MAGIC, TENSOR_VERSION)?;
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn save_ten<F: Real>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    write(path.as_ref(), &encode_ten(t))
}

pub fn load_ten<F: Real>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    decode_ten(path, &read(path)?)
}

/// 8-bit binary PGM of a `[1, H, W]` or `[H, W]` image in `[0, 1]`.
pub fn encode_pgm<F: Real>(t: &Tensor<F>) -> Result<Vec<u8>> {
    let (h, w) = match *t.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::dim("save_pgm", format!("expected [1, H, W], got {:?}", t.shape()))),
    };
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(t.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(buf)
}

pub fn save_pgm<F: Real>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    write(path.as_ref(), &encode_pgm(t)?)
}

/// Configuration text plus named tensors, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub records: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION as usize);
        put_u32(&mut buf, self.config.len());
        buf.extend_from_slice(self.config.as_bytes());
        put_u32(&mut buf, self.records.len());
        for (name, t) in &self.records {
            put_u32(&mut buf, name.len());
            buf.extend_from_slice(name.as_bytes());
            put_tensor(&mut buf, t);
        }
        buf
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let config = r.string()?;
        let n = r.u32()?;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            records.push((name, r.tensor()?));
        }
        r.finish()?;
        Ok(Self { config, records })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = PathBuf::from(path);
        tmp.as_mut_os_string().push(".tmp");
        write(&tmp, &self.to_bytes())?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(path, &read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
