//! Transposed, blocked, nibble-packed key-code cache.
//!
//! Keys are grouped in blocks of 32. A block holds one 16-byte row per
//! sub-quantizer; byte `j` of row `s` carries the code of local key `j` in its
//! high nibble and local key `j + 16` in its low nibble:
//!
//! ```text
//! row s:  byte      | 0         | 1         | ... | 15         |
//!         bits 4..7 | key 0     | key 1     | ... | key 15     |
//!         bits 0..3 | key 16    | key 17    | ... | key 31     |
//! ```
//!
//! Shifting a row right by four yields the first 16 codes; masking with 0x0F
//! yields the last 16, each ready to index a 16-entry byte table.

use crate::error::{invalid, Error, Result};
use crate::quantizer::{KeyCodes, MAX_SUB_QUANTIZERS};

pub const BLOCK_KEYS: usize = 32;
pub const ROW_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyCodeCache {
    num_sub: usize,
    num_keys: usize,
    data: Vec<u8>,
}

/// Read-only view of one block: `num_sub` rows of 16 bytes.
#[derive(Debug, Clone, Copy)]
pub struct BlockView<'a> {
    bytes: &'a [u8],
}

impl<'a> BlockView<'a> {
    /// Wraps raw block bytes; length must be a non-zero multiple of 16.
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.is_empty() || bytes.len() % ROW_BYTES != 0 {
            return Err(invalid(format!(
                "block of {} bytes is not a whole number of rows",
                bytes.len()
            )));
        }
        Ok(Self { bytes })
    }

    pub fn num_rows(&self) -> usize {
        self.bytes.len() / ROW_BYTES
    }

    pub fn row(&self, s: usize) -> &'a [u8; ROW_BYTES] {
        self.bytes[s * ROW_BYTES..(s + 1) * ROW_BYTES]
            .try_into()
            .expect("row is 16 bytes")
    }

    pub fn as_bytes(&self) -> &'a [u8] {
        self.bytes
    }
}

impl KeyCodeCache {
    pub fn new(num_sub: usize) -> Result<Self> {
        if num_sub == 0 || num_sub > MAX_SUB_QUANTIZERS {
            return Err(Error::Config(format!(
                "cache needs 1..={MAX_SUB_QUANTIZERS} sub-quantizers, got {num_sub}"
            )));
        }
        Ok(Self {
            num_sub,
            num_keys: 0,
            data: Vec::new(),
        })
    }

    /// Rebuilds a cache from serialized block bytes.
    ///
    /// Padding nibbles in the tail block are kept as given; kernels never
    /// read them into a returned score.
    pub fn from_raw(num_sub: usize, num_keys: usize, data: Vec<u8>) -> Result<Self> {
        let mut cache = Self::new(num_sub)?;
        let want = Self::bytes_for(num_sub, num_keys);
        if data.len() != want {
            return Err(invalid(format!(
                "{num_keys} keys x {num_sub} sub-quantizers need {want} bytes, got {}",
                data.len()
            )));
        }
        cache.num_keys = num_keys;
        cache.data = data;
        Ok(cache)
    }

    pub fn bytes_for(num_sub: usize, num_keys: usize) -> usize {
        num_keys.div_ceil(BLOCK_KEYS) * num_sub * ROW_BYTES
    }

    pub fn num_sub(&self) -> usize {
        self.num_sub
    }

    pub fn num_keys(&self) -> usize {
        self.num_keys
    }

    pub fn is_empty(&self) -> bool {
        self.num_keys == 0
    }

    pub fn num_blocks(&self) -> usize {
        self.num_keys.div_ceil(BLOCK_KEYS)
    }

    pub fn bytes_used(&self) -> usize {
        self.data.len()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    fn block_bytes(&self) -> usize {
        self.num_sub * ROW_BYTES
    }

    pub fn block(&self, i: usize) -> BlockView<'_> {
        let w = self.block_bytes();
        BlockView {
            bytes: &self.data[i * w..(i + 1) * w],
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockView<'_>> {
        self.data
            .chunks_exact(self.block_bytes())
            .map(|bytes| BlockView { bytes })
    }

    /// Appends one key's codes; touches exactly `num_sub` bytes.
    pub fn append(&mut self, codes: &KeyCodes) -> Result<()> {
        if codes.len() != self.num_sub {
            return Err(invalid(format!(
                "expected {} codes, got {}",
                self.num_sub,
                codes.len()
            )));
        }
        let local = self.num_keys % BLOCK_KEYS;
        if local == 0 {
            self.data.resize(self.data.len() + self.block_bytes(), 0);
        }
        let base = (self.num_keys / BLOCK_KEYS) * self.block_bytes();
        let (byte, high) = if local < ROW_BYTES {
            (local, true)
        } else {
            (local - ROW_BYTES, false)
        };
        for (s, &c) in codes.as_slice().iter().enumerate() {
            let slot = &mut self.data[base + s * ROW_BYTES + byte];
            *slot = if high {
                (*slot & 0x0F) | (c << 4)
            } else {
                (*slot & 0xF0) | c
            };
        }
        self.num_keys += 1;
        Ok(())
    }

    pub fn read_code(&self, key_index: usize, s: usize) -> Result<u8> {
        if key_index >= self.num_keys {
            return Err(Error::Index {
                what: "key",
                index: key_index,
                len: self.num_keys,
            });
        }
        if s >= self.num_sub {
            return Err(Error::Index {
                what: "sub-quantizer",
                index: s,
                len: self.num_sub,
            });
        }
        let local = key_index % BLOCK_KEYS;
        let byte = self.block(key_index / BLOCK_KEYS).row(s)[local % ROW_BYTES];
        Ok(if local < ROW_BYTES {
            byte >> 4
        } else {
            byte & 0x0F
        })
    }

    /// All codes of one key.
    pub fn read_key(&self, key_index: usize) -> Result<KeyCodes> {
        let codes = (0..self.num_sub)
            .map(|s| self.read_code(key_index, s))
            .collect::<Result<Vec<_>>>()?;
        KeyCodes::new(codes)
    }
}

/// Splits a row into 32 codes in block-local key order.
pub fn unpack_row(row: &[u8; ROW_BYTES]) -> [u8; BLOCK_KEYS] {
    let mut out = [0u8; BLOCK_KEYS];
    for (j, &b) in row.iter().enumerate() {
        out[j] = b >> 4;
        out[j + ROW_BYTES] = b & 0x0F;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn codes(v: &[u8]) -> KeyCodes {
        KeyCodes::new(v.to_vec()).unwrap()
    }

    #[test]
    fn first_append_goes_high() {
        let mut c = KeyCodeCache::new(2).unwrap();
        c.append(&codes(&[5, 9])).unwrap();
        assert_eq!(c.block(0).row(0)[0], 0x50);
        assert_eq!(c.block(0).row(1)[0], 0x90);
        assert_eq!(c.bytes_used(), 32);
    }

    #[test]
    fn seventeenth_key_goes_low_nibble_of_byte_zero() {
        let mut c = KeyCodeCache::new(1).unwrap();
        c.append(&codes(&[12])).unwrap();
        for _ in 1..16 {
            c.append(&codes(&[1])).unwrap();
        }
        c.append(&codes(&[3])).unwrap();
        assert_eq!(c.block(0).row(0)[0], 0xC3);
    }

    #[test]
    fn thirty_third_key_opens_block() {
        let mut c = KeyCodeCache::new(3).unwrap();
        for _ in 0..32 {
            c.append(&codes(&[1, 2, 3])).unwrap();
        }
        assert_eq!(c.num_blocks(), 1);
        c.append(&codes(&[7, 8, 9])).unwrap();
        assert_eq!(c.num_blocks(), 2);
        assert_eq!(c.block(1).row(0)[0], 0x70);
        assert_eq!(c.block(1).row(2)[0], 0x90);
        assert!(c.block(1).row(1)[1..].iter().all(|&b| b == 0));
    }

    #[test]
    fn append_rejects_wrong_length() {
        let mut c = KeyCodeCache::new(3).unwrap();
        assert!(matches!(
            c.append(&codes(&[1, 2])),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn read_code_errors() {
        let c = KeyCodeCache::new(2).unwrap();
        assert!(matches!(c.read_code(0, 0), Err(Error::Index { .. })));
        let mut c = c;
        c.append(&codes(&[1, 2])).unwrap();
        assert_eq!(c.read_code(0, 1).unwrap(), 2);
        assert!(matches!(c.read_code(0, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn unpack_examples() {
        assert_eq!(&unpack_row(&[0xAB; 16])[..16], &[0xA; 16]);
        assert_eq!(&unpack_row(&[0xAB; 16])[16..], &[0xB; 16]);
        assert_eq!(unpack_row(&[0; 16]), [0; 32]);
    }

    #[test]
    fn unpack_after_sequential_appends() {
        // codes 0..31 in order; the code range is 0..15, so key l gets l % 16
        let mut c = KeyCodeCache::new(1).unwrap();
        for l in 0..32u8 {
            c.append(&codes(&[l % 16])).unwrap();
        }
        let want: Vec<u8> = (0..32u8).map(|l| l % 16).collect();
        assert_eq!(unpack_row(c.block(0).row(0)).to_vec(), want);
    }

    #[test]
    fn footprint_is_four_bits_per_code() {
        let mut c = KeyCodeCache::new(128).unwrap();
        let k = codes(&[3; 128]);
        for _ in 0..100 {
            c.append(&k).unwrap();
        }
        assert_eq!(c.bytes_used(), 4 * 128 * 16);
    }

    #[test]
    fn from_raw_checks_size() {
        assert!(KeyCodeCache::from_raw(2, 33, vec![0; 32]).is_err());
        assert!(KeyCodeCache::from_raw(2, 33, vec![0; 64]).is_ok());
        assert!(KeyCodeCache::from_raw(2, 0, vec![]).is_ok());
    }

    proptest! {
        #[test]
        fn round_trip_matches_shadow(s in 1usize..6, seq in prop::collection::vec(prop::collection::vec(0u8..16, 6), 0..120)) {
            let mut c = KeyCodeCache::new(s).unwrap();
            let mut shadow: Vec<Vec<u8>> = Vec::new();
            for key in &seq {
                let k = key[..s].to_vec();
                c.append(&codes(&k)).unwrap();
                shadow.push(k);
            }
            prop_assert_eq!(c.num_blocks(), seq.len().div_ceil(32));
            for (i, k) in shadow.iter().enumerate() {
                for (sq, &code) in k.iter().enumerate() {
                    prop_assert_eq!(c.read_code(i, sq).unwrap(), code);
                }
            }
            for sq in 0..s {
                let unpacked: Vec<u8> = c.blocks().flat_map(|b| unpack_row(b.row(sq))).collect();
                for (i, &u) in unpacked.iter().enumerate() {
                    let want = shadow.get(i).map_or(0, |k| k[sq]);
                    prop_assert_eq!(u, want);
                }
            }
        }
    }
}
