//! Little-endian binary files: float tensors, codebooks and key-code caches.
//!
//! | file     | header                                                              | payload                         |
//! |----------|---------------------------------------------------------------------|---------------------------------|
//! | tensor   | `NMTF`, version u32, n_vectors u64, dim u32                         | n_vectors x dim f32             |
//! | codebook | `NMCB`, version u32, d u32, d_sub u32, n_centroids u32, layer, head | S x 16 x d_sub f32              |
//! | cache    | `NMKC`, version u32, S u32, num_keys u64                            | ceil(num_keys/32) x S x 16 u8   |
//!
//! Codebook layer/head labels are u32; `0xFFFF_FFFF` means unset.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatErrorKind, Result};
use crate::keycache::KeyCodeCache;
use crate::quantizer::{Codebook, PqConfig, NUM_CENTROIDS};

pub const VERSION: u32 = 1;
pub const TENSOR_MAGIC: [u8; 4] = *b"NMTF";
pub const CODEBOOK_MAGIC: [u8; 4] = *b"NMCB";
pub const CACHE_MAGIC: [u8; 4] = *b"NMKC";
const NO_LABEL: u32 = u32::MAX;

/// Row-major `n_vectors x dim` matrix of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::InvalidInput(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn n_vectors(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }
}

fn fmt_err(offset: usize, kind: FormatErrorKind) -> Error {
    Error::Format {
        offset: offset as u64,
        kind,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(fmt_err(self.buf.len(), FormatErrorKind::TruncatedHeader));
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

    fn preamble(&mut self, magic: [u8; 4]) -> Result<()> {
        if self.buf.len() < 4 {
            return Err(fmt_err(self.buf.len(), FormatErrorKind::TruncatedHeader));
        }
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != magic {
            return Err(fmt_err(
                0,
                FormatErrorKind::BadMagic {
                    expected: magic,
                    found,
                },
            ));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(fmt_err(4, FormatErrorKind::UnsupportedVersion(v)));
        }
        Ok(())
    }

    /// The rest of the buffer, which must be exactly `len` bytes.
    fn payload(&mut self, len: u64) -> Result<&'a [u8]> {
        let have = (self.buf.len() - self.pos) as u64;
        if have < len {
            return Err(fmt_err(
                self.buf.len(),
                FormatErrorKind::TruncatedPayload {
                    expected: len,
                    found: have,
                },
            ));
        }
        if have > len {
            return Err(fmt_err(
                self.pos + len as usize,
                FormatErrorKind::TrailingBytes(have - len),
            ));
        }
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        Ok(s)
    }
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn bad_header(offset: usize, msg: impl Into<String>) -> Error {
    fmt_err(offset, FormatErrorKind::BadHeader(msg.into()))
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + t.data.len() * 4);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.n_vectors() as u64).to_le_bytes());
    out.extend_from_slice(&(t.dim as u32).to_le_bytes());
    put_f32s(&mut out, &t.data);
    out
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(buf);
    r.preamble(TENSOR_MAGIC)?;
    let n = r.u64()?;
    let dim = r.u32()?;
    if dim == 0 {
        return Err(bad_header(16, "dim is zero"));
    }
    let len = n
        .checked_mul(dim as u64)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| bad_header(8, "n_vectors x dim overflows"))?;
    let payload = r.payload(len)?;
    Ok(Tensor {
        dim: dim as usize,
        data: f32s(payload),
    })
}

pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let cfg = cb.config();
    let mut out = Vec::with_capacity(28 + cb.centroids().len() * 4);
    out.extend_from_slice(&CODEBOOK_MAGIC);
    for v in [
        VERSION,
        cfg.head_dim() as u32,
        cfg.sub_dim() as u32,
        NUM_CENTROIDS as u32,
        cb.layer.unwrap_or(NO_LABEL),
        cb.head.unwrap_or(NO_LABEL),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_f32s(&mut out, cb.centroids());
    out
}

pub fn decode_codebook(buf: &[u8]) -> Result<Codebook> {
    let mut r = Reader::new(buf);
    r.preamble(CODEBOOK_MAGIC)?;
    let d = r.u32()? as usize;
    let d_sub = r.u32()? as usize;
    let k = r.u32()? as usize;
    let layer = r.u32()?;
    let head = r.u32()?;
    if k != NUM_CENTROIDS {
        return Err(bad_header(16, format!("n_centroids is {k}, must be 16")));
    }
    let cfg = PqConfig::new(d, d_sub).map_err(|e| bad_header(8, e.to_string()))?;
    let payload = r.payload((cfg.num_sub() * NUM_CENTROIDS * d_sub * 4) as u64)?;
    let label = |v: u32| (v != NO_LABEL).then_some(v);
    Ok(Codebook::from_centroids(cfg, f32s(payload))
        .map_err(|e| bad_header(28, e.to_string()))?
        .with_labels(label(layer), label(head)))
}

pub fn encode_cache(cache: &KeyCodeCache) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + cache.bytes_used());
    out.extend_from_slice(&CACHE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cache.num_sub() as u32).to_le_bytes());
    out.extend_from_slice(&(cache.num_keys() as u64).to_le_bytes());
    out.extend_from_slice(cache.as_bytes());
    out
}

pub fn decode_cache(buf: &[u8]) -> Result<KeyCodeCache> {
    let mut r = Reader::new(buf);
    r.preamble(CACHE_MAGIC)?;
    let s = r.u32()? as usize;
    let n = r.u64()?;
    let n = usize::try_from(n).map_err(|_| bad_header(12, "num_keys too large"))?;
    if s == 0 {
        return Err(bad_header(8, "zero sub-quantizers"));
    }
    let payload = r.payload(KeyCodeCache::bytes_for(s, n) as u64)?;
    KeyCodeCache::from_raw(s, n, payload.to_vec()).map_err(|e| bad_header(8, e.to_string()))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_tensor(t))?)
}

pub fn read_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    decode_codebook(&fs::read(path)?)
}

pub fn write_codebook(path: impl AsRef<Path>, cb: &Codebook) -> Result<()> {
    Ok(fs::write(path, encode_codebook(cb))?)
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<KeyCodeCache> {
    decode_cache(&fs::read(path)?)
}

pub fn write_cache(path: impl AsRef<Path>, cache: &KeyCodeCache) -> Result<()> {
    Ok(fs::write(path, encode_cache(cache))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::KeyCodes;
    use proptest::prelude::*;

    fn kind(e: Error) -> FormatErrorKind {
        match e {
            Error::Format { kind, .. } => kind,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn tensor_layout_is_fixed() {
        let t = Tensor::new(2, vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"NMTF");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..16], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[16..20], &[2, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn tensor_rejections_are_distinct() {
        let good = encode_tensor(&Tensor::new(3, vec![0.5; 6]).unwrap());

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(
            kind(decode_tensor(&magic).unwrap_err()),
            FormatErrorKind::BadMagic { .. }
        ));

        let mut version = good.clone();
        version[4] = 9;
        assert_eq!(
            kind(decode_tensor(&version).unwrap_err()),
            FormatErrorKind::UnsupportedVersion(9)
        );

        let short = &good[..good.len() - 3];
        let err = decode_tensor(short).unwrap_err();
        assert!(err.to_string().contains("truncated payload"));
        assert_eq!(
            kind(err),
            FormatErrorKind::TruncatedPayload {
                expected: 24,
                found: 21
            }
        );

        assert_eq!(
            kind(decode_tensor(&good[..10]).unwrap_err()),
            FormatErrorKind::TruncatedHeader
        );

        let mut long = good.clone();
        long.push(0);
        assert_eq!(
            kind(decode_tensor(&long).unwrap_err()),
            FormatErrorKind::TrailingBytes(1)
        );
    }

    #[test]
    fn empty_tensor_ok() {
        let t = Tensor::new(4, vec![]).unwrap();
        assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
    }

    #[test]
    fn codebook_round_trip_and_checks() {
        let cfg = PqConfig::new(4, 2).unwrap();
        let cents: Vec<f32> = (0..2 * 16 * 2).map(|i| i as f32 * 0.5).collect();
        let cb = Codebook::from_centroids(cfg, cents)
            .unwrap()
            .with_labels(Some(3), None);
        let bytes = encode_codebook(&cb);
        assert_eq!(bytes.len(), 28 + 64 * 4);
        assert_eq!(decode_codebook(&bytes).unwrap(), cb);

        let mut bad_k = bytes.clone();
        bad_k[16] = 8;
        assert!(matches!(
            kind(decode_codebook(&bad_k).unwrap_err()),
            FormatErrorKind::BadHeader(_)
        ));
        let mut bad_sub = bytes.clone();
        bad_sub[12] = 3;
        assert!(matches!(
            kind(decode_codebook(&bad_sub).unwrap_err()),
            FormatErrorKind::BadHeader(_)
        ));
        assert!(matches!(
            kind(decode_codebook(&encode_tensor(&Tensor::new(1, vec![]).unwrap())).unwrap_err()),
            FormatErrorKind::BadMagic { .. }
        ));
    }

    #[test]
    fn cache_payload_is_raw_blocks() {
        let mut c = KeyCodeCache::new(2).unwrap();
        c.append(&KeyCodes::new(vec![5, 9]).unwrap()).unwrap();
        let b = encode_cache(&c);
        assert_eq!(&b[..4], b"NMKC");
        assert_eq!(b.len(), 20 + 32);
        assert_eq!(b[20], 0x50);
        assert_eq!(b[36], 0x90);
        assert_eq!(decode_cache(&b).unwrap(), c);
        assert!(matches!(
            kind(decode_cache(&b[..40]).unwrap_err()),
            FormatErrorKind::TruncatedPayload { .. }
        ));
    }

    proptest! {
        #[test]
        fn tensor_round_trip(dim in 1usize..8, vals in prop::collection::vec(-1e6f32..1e6, 0..64)) {
            let n = vals.len() / dim * dim;
            let t = Tensor::new(dim, vals[..n].to_vec()).unwrap();
            prop_assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
        }

        #[test]
        fn cache_round_trip(s in 1usize..5, keys in prop::collection::vec(prop::collection::vec(0u8..16, 4), 0..70)) {
            let mut c = KeyCodeCache::new(s).unwrap();
            for k in &keys {
                c.append(&KeyCodes::new(k[..s].to_vec()).unwrap()).unwrap();
            }
            prop_assert_eq!(decode_cache(&encode_cache(&c)).unwrap(), c);
        }
    }
}
