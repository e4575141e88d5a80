//! Per-head product quantization of attention keys into 4-bit codes.

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::kmeans::{kmeans, nearest, sq_dist, KMeansParams};

/// Centroids per sub-quantizer. Sixteen 8-bit LUT entries fill one 128-bit register.
pub const NUM_CENTROIDS: usize = 16;

/// Upper bound on sub-quantizers so that `S * 255` fits a 16-bit accumulator.
pub const MAX_SUB_QUANTIZERS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PqConfig {
    head_dim: usize,
    sub_dim: usize,
}

impl PqConfig {
    pub fn new(head_dim: usize, sub_dim: usize) -> Result<Self> {
        if head_dim == 0 || sub_dim == 0 {
            return Err(Error::Config(
                "head_dim and sub_dim must be positive".into(),
            ));
        }
        if head_dim % sub_dim != 0 {
            return Err(Error::Config(format!(
                "sub_dim {sub_dim} does not divide head_dim {head_dim}"
            )));
        }
        if head_dim / sub_dim > MAX_SUB_QUANTIZERS {
            return Err(Error::Config(format!(
                "{} sub-quantizers exceeds the 16-bit accumulator limit of {MAX_SUB_QUANTIZERS}",
                head_dim / sub_dim
            )));
        }
        Ok(Self { head_dim, sub_dim })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn num_sub(&self) -> usize {
        self.head_dim / self.sub_dim
    }

    pub fn num_centroids(&self) -> usize {
        NUM_CENTROIDS
    }
}

/// One code per sub-quantizer, each in `0..16`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeyCodes(Vec<u8>);

impl KeyCodes {
    pub fn new(codes: Vec<u8>) -> Result<Self> {
        if let Some(i) = codes.iter().position(|&c| c as usize >= NUM_CENTROIDS) {
            return Err(invalid(format!(
                "code {} at sub-quantizer {i} exceeds 15",
                codes[i]
            )));
        }
        Ok(Self(codes))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }
}

/// Learned centroid tables for one (layer, head).
///
/// Centroids are stored `[sub][centroid][sub_dim]`, row-major. Immutable once
/// built, so one codebook can back many concurrent LUT builds.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    config: PqConfig,
    centroids: Vec<f32>,
    pub layer: Option<u32>,
    pub head: Option<u32>,
}

impl Codebook {
    pub fn from_centroids(config: PqConfig, centroids: Vec<f32>) -> Result<Self> {
        let want = config.num_sub() * NUM_CENTROIDS * config.sub_dim();
        if centroids.len() != want {
            return Err(invalid(format!(
                "expected {want} centroid values, got {}",
                centroids.len()
            )));
        }
        ensure_finite(&centroids, "codebook")?;
        Ok(Self {
            config,
            centroids,
            layer: None,
            head: None,
        })
    }

    pub fn with_labels(mut self, layer: Option<u32>, head: Option<u32>) -> Self {
        self.layer = layer;
        self.head = head;
        self
    }

    pub fn config(&self) -> &PqConfig {
        &self.config
    }

    /// All centroid values, `[sub][centroid][sub_dim]`.
    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// The 16 centroids of sub-quantizer `s`, contiguous.
    pub fn table(&self, s: usize) -> &[f32] {
        let w = NUM_CENTROIDS * self.config.sub_dim();
        &self.centroids[s * w..(s + 1) * w]
    }

    pub fn centroid(&self, s: usize, c: usize) -> &[f32] {
        let ds = self.config.sub_dim();
        &self.table(s)[c * ds..(c + 1) * ds]
    }

    fn check_dim(&self, v: &[f32], what: &str) -> Result<()> {
        if v.len() != self.config.head_dim() {
            return Err(invalid(format!(
                "{what} has dimension {}, codebook expects {}",
                v.len(),
                self.config.head_dim()
            )));
        }
        ensure_finite(v, what)
    }

    /// Nearest centroid per sub-quantizer; ties go to the lowest index.
    pub fn encode_key(&self, key: &[f32]) -> Result<KeyCodes> {
        let mut ops = 0;
        self.encode_key_counted(key, &mut ops)
    }

    /// [`Codebook::encode_key`] that also adds the number of centroid
    /// distance evaluations performed to `distance_ops`.
    pub fn encode_key_counted(&self, key: &[f32], distance_ops: &mut u64) -> Result<KeyCodes> {
        self.check_dim(key, "key")?;
        let ds = self.config.sub_dim();
        let codes = key
            .chunks_exact(ds)
            .enumerate()
            .map(|(s, sub)| nearest(sub, self.table(s), ds).0 as u8)
            .collect();
        *distance_ops += (self.config.num_sub() * NUM_CENTROIDS) as u64;
        Ok(KeyCodes(codes))
    }

    /// Concatenates the centroids selected by `codes`.
    pub fn decode(&self, codes: &KeyCodes) -> Result<Vec<f32>> {
        if codes.len() != self.config.num_sub() {
            return Err(invalid(format!(
                "expected {} codes, got {}",
                self.config.num_sub(),
                codes.len()
            )));
        }
        let mut out = Vec::with_capacity(self.config.head_dim());
        for (s, &c) in codes.as_slice().iter().enumerate() {
            out.extend_from_slice(self.centroid(s, c as usize));
        }
        Ok(out)
    }

    /// Mean over keys of the summed squared sub-vector reconstruction error.
    pub fn distortion(&self, keys: &[f32]) -> Result<f64> {
        let d = self.config.head_dim();
        if keys.len() % d != 0 {
            return Err(invalid(format!(
                "key buffer of {} values is not a multiple of dimension {d}",
                keys.len()
            )));
        }
        let n = keys.len() / d;
        if n == 0 {
            return Ok(0.0);
        }
        ensure_finite(keys, "keys")?;
        let ds = self.config.sub_dim();
        let total: f64 = keys
            .chunks_exact(d)
            .map(|key| {
                key.chunks_exact(ds)
                    .enumerate()
                    .map(|(s, sub)| nearest(sub, self.table(s), ds).1)
                    .sum::<f64>()
            })
            .sum();
        Ok(total / n as f64)
    }
}

/// Learns a codebook by running k-means independently on each sub-quantizer's
/// slice of `keys` (row-major `n x head_dim`).
pub fn learn_codebook(keys: &[f32], config: PqConfig, seed: u64) -> Result<Codebook> {
    learn_with_params(keys, config, seed, &KMeansParams::default())
}

pub fn learn_with_params(
    keys: &[f32],
    config: PqConfig,
    seed: u64,
    params: &KMeansParams,
) -> Result<Codebook> {
    let d = config.head_dim();
    if keys.len() % d != 0 {
        return Err(invalid(format!(
            "key buffer of {} values is not a multiple of dimension {d}",
            keys.len()
        )));
    }
    let n = keys.len() / d;
    if n < NUM_CENTROIDS {
        return Err(Error::InsufficientData {
            needed: NUM_CENTROIDS,
            got: n,
        });
    }
    ensure_finite(keys, "keys")?;

    let centroids = train_subspaces(keys, d, config.sub_dim(), NUM_CENTROIDS, seed, params);
    Codebook::from_centroids(config, centroids)
}

/// Shared by the 4-bit and 8-bit quantizers: k-means on every `sub_dim`
/// slice, with the seed mixed per sub-quantizer.
pub(crate) fn train_subspaces(
    keys: &[f32],
    head_dim: usize,
    sub_dim: usize,
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Vec<f32> {
    let n = keys.len() / head_dim;
    let num_sub = head_dim / sub_dim;
    let mut out = Vec::with_capacity(num_sub * k * sub_dim);
    let mut buf = Vec::with_capacity(n * sub_dim);
    for s in 0..num_sub {
        buf.clear();
        for key in keys.chunks_exact(head_dim) {
            buf.extend_from_slice(&key[s * sub_dim..(s + 1) * sub_dim]);
        }
        let sub_seed = seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        out.extend(kmeans(&buf, sub_dim, k, sub_seed, params));
    }
    out
}

/// Squared distance between `key`'s sub-vector `s` and centroid `c`.
pub fn sub_distance(codebook: &Codebook, key: &[f32], s: usize, c: usize) -> f64 {
    let ds = codebook.config().sub_dim();
    sq_dist(&key[s * ds..(s + 1) * ds], codebook.centroid(s, c))
}
