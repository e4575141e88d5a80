//! Lookup-accumulate attention scoring over the key-code cache.
//!
//! For every 32-key block and every sub-quantizer, the 16-entry 8-bit table of
//! that sub-quantizer is loaded into one 128-bit register and indexed with a
//! byte shuffle: once with the high nibbles of the code row (keys 0..16) and
//! once with the low nibbles (keys 16..32). The looked-up bytes are widened and
//! summed into 32 unsigned 16-bit accumulators.
//!
//! The scalar path performs the same integer arithmetic, so both paths are
//! bit-identical.

use std::fmt;

use crate::error::{invalid, Result};
use crate::keycache::{unpack_row, BlockView, KeyCodeCache, BLOCK_KEYS, ROW_BYTES};
use crate::lut::{build_lut, QuantizedLut, QueryView};
use crate::quantizer::Codebook;

/// Environment variable that forces the scalar path when set to `1`.
pub const FORCE_SCALAR_ENV: &str = "NOMAD_FORCE_SCALAR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelPath {
    Scalar,
    /// x86-64 `pshufb`.
    Ssse3,
    /// aarch64 `tbl`.
    Neon,
}

impl KernelPath {
    pub fn name(self) -> &'static str {
        match self {
            KernelPath::Scalar => "scalar",
            KernelPath::Ssse3 => "ssse3",
            KernelPath::Neon => "neon",
        }
    }

    pub fn is_simd(self) -> bool {
        self != KernelPath::Scalar
    }

    /// Whether this path can run on the current processor.
    pub fn is_available(self) -> bool {
        match self {
            KernelPath::Scalar => true,
            #[cfg(target_arch = "x86_64")]
            KernelPath::Ssse3 => std::arch::is_x86_feature_detected!("ssse3"),
            #[cfg(target_arch = "aarch64")]
            KernelPath::Neon => std::arch::is_aarch64_feature_detected!("neon"),
            #[allow(unreachable_patterns)]
            _ => false,
        }
    }
}

impl fmt::Display for KernelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Picks the 128-bit shuffle path when the processor has one, unless
/// `force_scalar` is set.
pub fn detect_fast_path(force_scalar: bool) -> KernelPath {
    if force_scalar {
        return KernelPath::Scalar;
    }
    [KernelPath::Ssse3, KernelPath::Neon]
        .into_iter()
        .find(|p| p.is_available())
        .unwrap_or(KernelPath::Scalar)
}

/// True when `NOMAD_FORCE_SCALAR=1`.
pub fn force_scalar_from_env() -> bool {
    std::env::var(FORCE_SCALAR_ENV).is_ok_and(|v| v.trim() == "1")
}

/// 32 unsigned 16-bit accumulators for one block, in block-local key order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccumulatorBatch(pub [u16; BLOCK_KEYS]);

fn check_shapes(num_rows: usize, lut: &QuantizedLut) -> Result<()> {
    if num_rows != lut.num_sub() {
        return Err(invalid(format!(
            "block has {num_rows} rows but LUT has {} tables",
            lut.num_sub()
        )));
    }
    Ok(())
}

/// Sums `lut.tables[s][code(l, s)]` over sub-quantizers for each of the 32 keys.
pub fn accumulate_block(
    block: BlockView<'_>,
    lut: &QuantizedLut,
    path: KernelPath,
) -> Result<AccumulatorBatch> {
    check_shapes(block.num_rows(), lut)?;
    let mut out = [0u16; BLOCK_KEYS];
    accumulate_raw(block.as_bytes(), lut.tables(), path, &mut out);
    Ok(AccumulatorBatch(out))
}

/// Accumulates every block of `cache`; returns `num_blocks * 32` values,
/// including padding slots past `num_keys`.
pub fn accumulate_cache(
    cache: &KeyCodeCache,
    lut: &QuantizedLut,
    path: KernelPath,
) -> Result<Vec<u16>> {
    check_shapes(cache.num_sub(), lut)?;
    let mut out = vec![0u16; cache.num_blocks() * BLOCK_KEYS];
    accumulate_raw(cache.as_bytes(), lut.tables(), path, &mut out);
    Ok(out)
}

fn accumulate_raw(data: &[u8], tables: &[[u8; 16]], path: KernelPath, out: &mut [u16]) {
    debug_assert_eq!(
        data.len() / (tables.len() * ROW_BYTES) * BLOCK_KEYS,
        out.len()
    );
    match path {
        #[cfg(target_arch = "x86_64")]
        KernelPath::Ssse3 if path.is_available() => unsafe { x86::accumulate(data, tables, out) },
        #[cfg(target_arch = "aarch64")]
        KernelPath::Neon if path.is_available() => unsafe { arm::accumulate(data, tables, out) },
        _ => accumulate_scalar(data, tables, out),
    }
}

fn accumulate_scalar(data: &[u8], tables: &[[u8; 16]], out: &mut [u16]) {
    let block_bytes = tables.len() * ROW_BYTES;
    for (block, acc) in data
        .chunks_exact(block_bytes)
        .zip(out.chunks_exact_mut(BLOCK_KEYS))
    {
        acc.fill(0);
        for (row, table) in block.chunks_exact(ROW_BYTES).zip(tables) {
            let codes = unpack_row(row.try_into().expect("16-byte row"));
            for (a, &c) in acc.iter_mut().zip(&codes) {
                *a = a.wrapping_add(table[c as usize] as u16);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::{BLOCK_KEYS, ROW_BYTES};
    use std::arch::x86_64::*;

    #[target_feature(enable = "ssse3")]
    pub(super) unsafe fn accumulate(data: &[u8], tables: &[[u8; 16]], out: &mut [u16]) {
        let block_bytes = tables.len() * ROW_BYTES;
        let nibble = _mm_set1_epi8(0x0F);
        let zero = _mm_setzero_si128();
        for (block, acc) in data
            .chunks_exact(block_bytes)
            .zip(out.chunks_exact_mut(BLOCK_KEYS))
        {
            // Table bytes are added as 16-bit lanes: `lo_*` gets even + 256 * odd,
            // `odd_*` gets odd alone. Both wrap mod 2^16, so the even sums are
            // recovered exactly at the end of the block.
            let mut lo_first = zero;
            let mut odd_first = zero;
            let mut lo_last = zero;
            let mut odd_last = zero;
            for (row, table) in block.chunks_exact(ROW_BYTES).zip(tables) {
                let lut = _mm_loadu_si128(table.as_ptr().cast());
                let codes = _mm_loadu_si128(row.as_ptr().cast());
                // no byte-wise shift on SSE: shift 16-bit lanes, then mask
                let first = _mm_and_si128(_mm_srli_epi16(codes, 4), nibble);
                let last = _mm_and_si128(codes, nibble);
                let v_first = _mm_shuffle_epi8(lut, first);
                let v_last = _mm_shuffle_epi8(lut, last);
                lo_first = _mm_add_epi16(lo_first, v_first);
                odd_first = _mm_add_epi16(odd_first, _mm_srli_epi16(v_first, 8));
                lo_last = _mm_add_epi16(lo_last, v_last);
                odd_last = _mm_add_epi16(odd_last, _mm_srli_epi16(v_last, 8));
            }
            let even_first = _mm_sub_epi16(lo_first, _mm_slli_epi16(odd_first, 8));
            let even_last = _mm_sub_epi16(lo_last, _mm_slli_epi16(odd_last, 8));
            let p = acc.as_mut_ptr().cast::<__m128i>();
            _mm_storeu_si128(p, _mm_unpacklo_epi16(even_first, odd_first));
            _mm_storeu_si128(p.add(1), _mm_unpackhi_epi16(even_first, odd_first));
            _mm_storeu_si128(p.add(2), _mm_unpacklo_epi16(even_last, odd_last));
            _mm_storeu_si128(p.add(3), _mm_unpackhi_epi16(even_last, odd_last));
        }
    }
}

#[cfg(target_arch = "aarch64")]
mod arm {
    use super::{BLOCK_KEYS, ROW_BYTES};
    use std::arch::aarch64::*;

    #[target_feature(enable = "neon")]
    pub(super) unsafe fn accumulate(data: &[u8], tables: &[[u8; 16]], out: &mut [u16]) {
        let block_bytes = tables.len() * ROW_BYTES;
        let nibble = vdupq_n_u8(0x0F);
        for (block, acc) in data
            .chunks_exact(block_bytes)
            .zip(out.chunks_exact_mut(BLOCK_KEYS))
        {
            let mut a0 = vdupq_n_u16(0);
            let mut a1 = vdupq_n_u16(0);
            let mut a2 = vdupq_n_u16(0);
            let mut a3 = vdupq_n_u16(0);
            for (row, table) in block.chunks_exact(ROW_BYTES).zip(tables) {
                let lut = vld1q_u8(table.as_ptr());
                let codes = vld1q_u8(row.as_ptr());
                let v_first = vqtbl1q_u8(lut, vshrq_n_u8::<4>(codes));
                let v_last = vqtbl1q_u8(lut, vandq_u8(codes, nibble));
                a0 = vaddw_u8(a0, vget_low_u8(v_first));
                a1 = vaddw_high_u8(a1, v_first);
                a2 = vaddw_u8(a2, vget_low_u8(v_last));
                a3 = vaddw_high_u8(a3, v_last);
            }
            let p = acc.as_mut_ptr();
            vst1q_u16(p, a0);
            vst1q_u16(p.add(8), a1);
            vst1q_u16(p.add(16), a2);
            vst1q_u16(p.add(24), a3);
        }
    }
}

/// Attention probabilities over cached positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self(softmax(logits))
    }

    /// Like [`ScoreVector::from_logits`], reusing the logit buffer.
    pub fn from_logit_vec(mut logits: Vec<f64>) -> Self {
        softmax_in_place(&mut logits);
        Self(logits)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    // Four independent lanes so the reductions vectorize.
    let mut max4 = [f64::NEG_INFINITY; 4];
    let mut chunks = v.chunks_exact_mut(4);
    for c in &mut chunks {
        for (m, &x) in max4.iter_mut().zip(c.iter()) {
            *m = if x > *m { x } else { *m };
        }
    }
    let max = chunks
        .into_remainder()
        .iter()
        .chain(&max4)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);

    let mut sum4 = [0.0f64; 4];
    let mut chunks = v.chunks_exact_mut(4);
    for c in &mut chunks {
        for i in 0..4 {
            c[i] = exp_non_positive(c[i] - max);
            sum4[i] += c[i];
        }
    }
    let mut sum = (sum4[0] + sum4[1]) + (sum4[2] + sum4[3]);
    for x in chunks.into_remainder() {
        *x = exp_non_positive(*x - max);
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// `e^x` for `x <= 0`, branch-free so the softmax loop vectorizes. Arguments
/// below -700 are clamped (the result is then ~1e-304 instead of smaller).
/// Relative error is below 1e-14.
#[inline(always)]
pub(crate) fn exp_non_positive(x: f64) -> f64 {
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = if x < -700.0 { -700.0 } else { x };
    // n = round(x / ln 2), kept in the low mantissa bits of `shifted`
    let shifted = x * std::f64::consts::LOG2_E + ROUND;
    let n = shifted - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor series to r^11; |r| <= ln(2)/2
    let mut p = 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let n_int = shifted.to_bits().wrapping_sub(ROUND.to_bits());
    let scale = f64::from_bits(n_int.wrapping_add(1023) << 52);
    p * scale
}

/// Dequantized, `1/sqrt(d)`-scaled logits for the first `num_keys` positions.
pub fn logits_from_accumulators(
    acc: &[u16],
    num_keys: usize,
    lut: &QuantizedLut,
    head_dim: usize,
) -> Vec<f64> {
    let inv_sqrt_d = 1.0 / (head_dim as f64).sqrt();
    acc[..num_keys]
        .iter()
        .map(|&a| lut.dequantize_sum(a) * inv_sqrt_d)
        .collect()
}

/// Scores `query` against every key already in `cache`, without appending.
/// Returns the logits together with the LUT used to produce them.
pub fn nomad_logits(
    query: &[f32],
    cache: &KeyCodeCache,
    codebook: &Codebook,
    path: KernelPath,
) -> Result<(Vec<f64>, QuantizedLut)> {
    let d = codebook.config().head_dim();
    if cache.num_sub() != codebook.config().num_sub() {
        return Err(invalid(format!(
            "cache has {} sub-quantizers, codebook has {}",
            cache.num_sub(),
            codebook.config().num_sub()
        )));
    }
    let lut = build_lut(QueryView::new(query, d)?, codebook)?;
    let acc = accumulate_cache(cache, &lut, path)?;
    Ok((
        logits_from_accumulators(&acc, cache.num_keys(), &lut, d),
        lut,
    ))
}

/// Softmax of [`nomad_logits`].
pub fn score_cached(
    query: &[f32],
    cache: &KeyCodeCache,
    codebook: &Codebook,
    path: KernelPath,
) -> Result<ScoreVector> {
    let (logits, _) = nomad_logits(query, cache, codebook, path)?;
    Ok(ScoreVector::from_logit_vec(logits))
}

/// One decoding step: encodes and appends `key`, then scores `query` against
/// all `t` cached keys including the new one.
pub fn nomad_scores(
    query: &[f32],
    key: &[f32],
    cache: &mut KeyCodeCache,
    codebook: &Codebook,
    path: KernelPath,
) -> Result<ScoreVector> {
    let d = codebook.config().head_dim();
    QueryView::new(query, d)?;
    let codes = codebook.encode_key(key)?;
    cache.append(&codes)?;
    score_cached(query, cache, codebook, path)
}
