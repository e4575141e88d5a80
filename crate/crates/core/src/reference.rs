//! Baselines: exact multiply-add attention and 8-bit product-quantized
//! attention with a full-precision, memory-resident lookup table.

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::kernel::ScoreVector;
use crate::kmeans::{nearest, KMeansParams};
use crate::quantizer::train_subspaces;

/// Row-major float key cache, append-only.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatKeyCache {
    dim: usize,
    rows: Vec<f32>,
}

impl FloatKeyCache {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self {
            dim,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(invalid(format!(
                "{} values do not form rows of {dim}",
                rows.len()
            )));
        }
        ensure_finite(&rows, "keys")?;
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_keys(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn bytes_used(&self) -> usize {
        self.rows.len() * std::mem::size_of::<f32>()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn append(&mut self, key: &[f32]) -> Result<()> {
        check_dim(key, self.dim, "key")?;
        self.rows.extend_from_slice(key);
        Ok(())
    }
}

fn check_dim(v: &[f32], dim: usize, what: &str) -> Result<()> {
    if v.len() != dim {
        return Err(invalid(format!(
            "{what} has dimension {}, expected {dim}",
            v.len()
        )));
    }
    ensure_finite(v, what)
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ac, ar) = a.split_at(a.len() / 8 * 8);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `q . k_i / sqrt(d)` for every cached key.
pub fn exact_logits(query: &[f32], cache: &FloatKeyCache) -> Result<Vec<f64>> {
    check_dim(query, cache.dim, "query")?;
    let inv_sqrt_d = 1.0 / (cache.dim as f64).sqrt();
    Ok(cache
        .rows
        .chunks_exact(cache.dim)
        .map(|k| dot(query, k) as f64 * inv_sqrt_d)
        .collect())
}

pub fn exact_scores_cached(query: &[f32], cache: &FloatKeyCache) -> Result<ScoreVector> {
    Ok(ScoreVector::from_logit_vec(exact_logits(query, cache)?))
}

/// One decoding step of standard attention: append `key`, then softmax over
/// scaled dot products with every cached key.
pub fn exact_scores(query: &[f32], key: &[f32], cache: &mut FloatKeyCache) -> Result<ScoreVector> {
    check_dim(query, cache.dim, "query")?;
    cache.append(key)?;
    exact_scores_cached(query, cache)
}

/// Score-weighted sum of value rows (`values` is `t x d_v`, row-major).
pub fn attention_output(
    scores: &ScoreVector,
    values: &[f32],
    value_dim: usize,
) -> Result<Vec<f64>> {
    if value_dim == 0 || values.len() != scores.len() * value_dim {
        return Err(invalid(format!(
            "{} scores do not match {} values of width {value_dim}",
            scores.len(),
            values.len()
        )));
    }
    let mut out = vec![0f64; value_dim];
    for (&w, row) in scores.as_slice().iter().zip(values.chunks_exact(value_dim)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += w * v as f64;
        }
    }
    Ok(out)
}

pub const PQ8_CENTROIDS: usize = 256;
pub const PQ8_SUB_DIM: usize = 2;

/// 256 two-dimensional centroids per sub-quantizer, `[sub][centroid][2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pq8Codebook {
    head_dim: usize,
    centroids: Vec<f32>,
}

impl Pq8Codebook {
    pub fn from_centroids(head_dim: usize, centroids: Vec<f32>) -> Result<Self> {
        if head_dim == 0 || head_dim % PQ8_SUB_DIM != 0 {
            return Err(invalid(format!(
                "8-bit PQ needs an even head dimension, got {head_dim}"
            )));
        }
        let want = head_dim / PQ8_SUB_DIM * PQ8_CENTROIDS * PQ8_SUB_DIM;
        if centroids.len() != want {
            return Err(invalid(format!(
                "expected {want} centroid values, got {}",
                centroids.len()
            )));
        }
        ensure_finite(&centroids, "codebook")?;
        Ok(Self {
            head_dim,
            centroids,
        })
    }

    pub fn learn(keys: &[f32], head_dim: usize, seed: u64) -> Result<Self> {
        if head_dim == 0 || head_dim % PQ8_SUB_DIM != 0 {
            return Err(invalid(format!(
                "8-bit PQ needs an even head dimension, got {head_dim}"
            )));
        }
        if keys.len() % head_dim != 0 {
            return Err(invalid("key buffer is not a whole number of rows"));
        }
        let n = keys.len() / head_dim;
        if n < PQ8_CENTROIDS {
            return Err(Error::InsufficientData {
                needed: PQ8_CENTROIDS,
                got: n,
            });
        }
        ensure_finite(keys, "keys")?;
        let c = train_subspaces(
            keys,
            head_dim,
            PQ8_SUB_DIM,
            PQ8_CENTROIDS,
            seed,
            &KMeansParams::default(),
        );
        Self::from_centroids(head_dim, c)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn num_sub(&self) -> usize {
        self.head_dim / PQ8_SUB_DIM
    }

    fn table(&self, s: usize) -> &[f32] {
        let w = PQ8_CENTROIDS * PQ8_SUB_DIM;
        &self.centroids[s * w..(s + 1) * w]
    }

    pub fn centroid(&self, s: usize, c: usize) -> &[f32] {
        &self.table(s)[c * PQ8_SUB_DIM..(c + 1) * PQ8_SUB_DIM]
    }

    pub fn encode_key(&self, key: &[f32]) -> Result<Vec<u8>> {
        let mut ops = 0;
        self.encode_key_counted(key, &mut ops)
    }

    /// Encodes and adds the number of centroid distance evaluations to `distance_ops`.
    pub fn encode_key_counted(&self, key: &[f32], distance_ops: &mut u64) -> Result<Vec<u8>> {
        check_dim(key, self.head_dim, "key")?;
        let codes = key
            .chunks_exact(PQ8_SUB_DIM)
            .enumerate()
            .map(|(s, sub)| nearest(sub, self.table(s), PQ8_SUB_DIM).0 as u8)
            .collect();
        *distance_ops += (self.num_sub() * PQ8_CENTROIDS) as u64;
        Ok(codes)
    }

    /// Full-precision `[s][c]` table of query/centroid dot products.
    pub fn build_lut(&self, query: &[f32]) -> Result<Vec<f32>> {
        check_dim(query, self.head_dim, "query")?;
        let mut lut = Vec::with_capacity(self.num_sub() * PQ8_CENTROIDS);
        for (s, q) in query.chunks_exact(PQ8_SUB_DIM).enumerate() {
            lut.extend(
                self.table(s)
                    .chunks_exact(PQ8_SUB_DIM)
                    .map(|c| q[0] * c[0] + q[1] * c[1]),
            );
        }
        Ok(lut)
    }
}

/// Row-major 8-bit code store: one key's codes are contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pq8Cache {
    num_sub: usize,
    codes: Vec<u8>,
}

impl Pq8Cache {
    pub fn new(num_sub: usize) -> Self {
        assert!(num_sub > 0);
        Self {
            num_sub,
            codes: Vec::new(),
        }
    }

    pub fn num_keys(&self) -> usize {
        self.codes.len() / self.num_sub
    }

    pub fn bytes_used(&self) -> usize {
        self.codes.len()
    }

    pub fn key_codes(&self, i: usize) -> &[u8] {
        &self.codes[i * self.num_sub..(i + 1) * self.num_sub]
    }

    pub fn append(&mut self, codes: &[u8]) -> Result<()> {
        if codes.len() != self.num_sub {
            return Err(invalid(format!(
                "expected {} codes, got {}",
                self.num_sub,
                codes.len()
            )));
        }
        self.codes.extend_from_slice(codes);
        Ok(())
    }
}

/// Gather-accumulate logits over every cached key.
pub fn pq8_logits(query: &[f32], cache: &Pq8Cache, codebook: &Pq8Codebook) -> Result<Vec<f64>> {
    if cache.num_sub != codebook.num_sub() {
        return Err(invalid(
            "cache and codebook disagree on sub-quantizer count",
        ));
    }
    let lut = codebook.build_lut(query)?;
    let inv_sqrt_d = 1.0 / (codebook.head_dim as f64).sqrt();
    let s = cache.num_sub;
    let s8 = s / 8 * 8;
    let (lut8, lut_tail) = lut.split_at(s8 * PQ8_CENTROIDS);
    let gather = |codes: &[u8]| -> f32 {
        lut_tail
            .chunks_exact(PQ8_CENTROIDS)
            .zip(codes)
            .map(|(row, &c)| row[c as usize])
            .sum()
    };
    let mut out = Vec::with_capacity(cache.num_keys());
    for codes in cache.codes.chunks_exact(s) {
        // eight codes per load, four independent sums
        let mut acc = [0f32; 4];
        for (rows, c8) in lut8
            .chunks_exact(8 * PQ8_CENTROIDS)
            .zip(codes.chunks_exact(8))
        {
            let w = u64::from_le_bytes(c8.try_into().expect("8 codes"));
            for b in 0..8 {
                let c = ((w >> (8 * b)) & 0xFF) as usize;
                acc[b & 3] += rows[b * PQ8_CENTROIDS + c];
            }
        }
        let sum = (acc[0] + acc[1]) + (acc[2] + acc[3]) + gather(&codes[s8..]);
        out.push(sum as f64 * inv_sqrt_d);
    }
    Ok(out)
}

pub fn pq8_scores_cached(
    query: &[f32],
    cache: &Pq8Cache,
    codebook: &Pq8Codebook,
) -> Result<ScoreVector> {
    Ok(ScoreVector::from_logit_vec(pq8_logits(
        query, cache, codebook,
    )?))
}

/// One decoding step of the 8-bit PQ baseline.
pub fn pq8_scores(
    query: &[f32],
    key: &[f32],
    cache: &mut Pq8Cache,
    codebook: &Pq8Codebook,
) -> Result<ScoreVector> {
    check_dim(query, codebook.head_dim, "query")?;
    let codes = codebook.encode_key(key)?;
    cache.append(&codes)?;
    pq8_scores_cached(query, cache, codebook)
}
