//! Per-query 8-bit lookup tables of query/centroid dot products.
//!
//! Each sub-quantizer keeps its own minimum while all sub-quantizers share one
//! step (the widest per-sub range over 256 buckets), so a single 16-bit sum of
//! table entries dequantizes as `sum * step + sum_of_minima`.

use crate::error::{ensure_finite, invalid, Result};
use crate::quantizer::{Codebook, NUM_CENTROIDS};

/// Ranges narrower than this are treated as zero width.
pub const RANGE_EPSILON: f64 = 1e-12;

/// Validated query vector.
#[derive(Debug, Clone, Copy)]
pub struct QueryView<'a>(&'a [f32]);

impl<'a> QueryView<'a> {
    pub fn new(query: &'a [f32], head_dim: usize) -> Result<Self> {
        if query.len() != head_dim {
            return Err(invalid(format!(
                "query has dimension {}, expected {head_dim}",
                query.len()
            )));
        }
        ensure_finite(query, "query")?;
        Ok(Self(query))
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLut {
    tables: Vec<[u8; NUM_CENTROIDS]>,
    per_sub_min: Vec<f64>,
    shared_step: f64,
    min_sum: f64,
}

impl QuantizedLut {
    pub fn tables(&self) -> &[[u8; NUM_CENTROIDS]] {
        &self.tables
    }

    pub fn per_sub_min(&self) -> &[f64] {
        &self.per_sub_min
    }

    pub fn shared_step(&self) -> f64 {
        self.shared_step
    }

    pub fn min_sum(&self) -> f64 {
        self.min_sum
    }

    pub fn num_sub(&self) -> usize {
        self.tables.len()
    }

    /// Dequantized value of a single entry.
    pub fn dequantize_entry(&self, s: usize, c: usize) -> f64 {
        self.tables[s][c] as f64 * self.shared_step + self.per_sub_min[s]
    }

    /// Maps a sum of exactly `S` table entries back to a dot-product estimate.
    #[inline]
    pub fn dequantize_sum(&self, accumulated: u16) -> f64 {
        accumulated as f64 * self.shared_step + self.min_sum
    }

    /// Builds a table from raw parts. Used by tests and tools that need a
    /// specific LUT without going through a codebook.
    pub fn from_parts(
        tables: Vec<[u8; NUM_CENTROIDS]>,
        per_sub_min: Vec<f64>,
        shared_step: f64,
    ) -> Result<Self> {
        if tables.len() != per_sub_min.len() {
            return Err(invalid("tables and minima differ in length"));
        }
        if !(shared_step >= 0.0 && shared_step.is_finite()) {
            return Err(invalid("shared step must be finite and non-negative"));
        }
        let min_sum = per_sub_min.iter().sum();
        Ok(Self {
            tables,
            per_sub_min,
            shared_step,
            min_sum,
        })
    }
}

/// Exact `pi_s(query) . b_{s,c}` for every sub-quantizer and centroid, `[s][c]`.
pub fn exact_dot_table(query: &[f32], codebook: &Codebook) -> Vec<[f64; NUM_CENTROIDS]> {
    let ds = codebook.config().sub_dim();
    query
        .chunks_exact(ds)
        .enumerate()
        .map(|(s, q)| {
            let mut row = [0f64; NUM_CENTROIDS];
            for (c, slot) in row.iter_mut().enumerate() {
                *slot = q
                    .iter()
                    .zip(codebook.centroid(s, c))
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
            }
            row
        })
        .collect()
}

pub fn build_lut(query: QueryView<'_>, codebook: &Codebook) -> Result<QuantizedLut> {
    if query.as_slice().len() != codebook.config().head_dim() {
        return Err(invalid(format!(
            "query has dimension {}, codebook expects {}",
            query.as_slice().len(),
            codebook.config().head_dim()
        )));
    }
    let dots = exact_dot_table(query.as_slice(), codebook);

    let per_sub_min: Vec<f64> = dots
        .iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let widest = dots
        .iter()
        .zip(&per_sub_min)
        .map(|(row, &lo)| row.iter().copied().fold(f64::NEG_INFINITY, f64::max) - lo)
        .fold(0.0, f64::max);

    let shared_step = if widest < RANGE_EPSILON {
        0.0
    } else {
        widest / 256.0
    };

    let tables = dots
        .iter()
        .zip(&per_sub_min)
        .map(|(row, &lo)| {
            let mut t = [0u8; NUM_CENTROIDS];
            if shared_step > 0.0 {
                for (slot, &dp) in t.iter_mut().zip(row) {
                    // the operand is non-negative, so truncation is floor; the
                    // global maximum lands on 256 and is clamped
                    *slot = ((dp - lo) / shared_step).min(255.0) as u8;
                }
            }
            t
        })
        .collect();

    let min_sum = per_sub_min.iter().sum();
    Ok(QuantizedLut {
        tables,
        per_sub_min,
        shared_step,
        min_sum,
    })
}
