//! Quality evaluation against exact attention, and latency benchmarking of
//! the exact, 8-bit PQ and 4-bit lookup backends.

use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernel::{nomad_logits, score_cached, softmax, KernelPath, ScoreVector};
use crate::keycache::KeyCodeCache;
use crate::quantizer::{learn_codebook, Codebook, PqConfig, NUM_CENTROIDS};
use crate::reference::{
    exact_scores_cached, pq8_scores_cached, FloatKeyCache, Pq8Cache, Pq8Codebook, PQ8_CENTROIDS,
    PQ8_SUB_DIM,
};

/// Seeded Gaussian mixture: `modes` centers with i.i.d. `N(0, center_scale^2)`
/// coordinates, samples spread around them with standard deviation `spread`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    centers: Vec<f32>,
    spread: f32,
}

impl GaussianMixture {
    pub fn new(dim: usize, modes: usize, center_scale: f32, spread: f32, seed: u64) -> Self {
        assert!(dim > 0 && modes > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, center_scale).expect("finite scale");
        let centers = (0..dim * modes).map(|_| normal.sample(&mut rng)).collect();
        Self {
            dim,
            centers,
            spread,
        }
    }

    pub fn modes(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn center(&self, m: usize) -> &[f32] {
        &self.centers[m * self.dim..(m + 1) * self.dim]
    }

    /// `n` row-major samples with uniformly chosen modes.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<f32> {
        let noise = Normal::new(0.0f32, self.spread).expect("finite spread");
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let m = rng.random_range(0..self.modes());
            out.extend(self.center(m).iter().map(|&c| c + noise.sample(rng)));
        }
        out
    }
}

/// Agreement and error statistics of lookup-based scores versus exact attention.
///
/// Top-k agreement is tie-inclusive on the estimate side: keys whose codes
/// coincide get identical estimated logits, and any of them counts as a hit.
/// Top-1 agreement is the fraction of queries whose exact arg-max key attains
/// the maximum estimated logit; top-8 agreement is the mean fraction of the
/// exact top-8 keys whose estimated logit is at least the 8th-largest estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityReport {
    pub head_dim: usize,
    pub sub_dim: usize,
    pub num_sub: usize,
    pub learn_keys: usize,
    pub test_keys: usize,
    pub queries: usize,
    pub seed: u64,
    pub path: KernelPath,
    /// Mean squared reconstruction error of test keys.
    pub test_distortion: f64,
    /// Mean over queries of the mean |estimated - exact| logit.
    pub mean_abs_logit_error: f64,
    pub max_abs_logit_error: f64,
    /// Largest |estimated - exact| logit against the quantized keys, which
    /// isolates the 8-bit table error.
    pub max_abs_table_error: f64,
    /// Largest `S * 2 * step / sqrt(d)` over queries.
    pub max_table_error_bound: f64,
    pub table_bound_violations: usize,
    pub mean_score_l1: f64,
    pub max_score_l1: f64,
    pub top1_agreement: f64,
    pub top8_agreement: f64,
    /// Float key-cache bits over key-code bits, `8 * d_sub`.
    pub compression_factor: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct QualityConfig {
    pub pq: PqConfig,
    /// Fraction of keys used to learn the codebook; the rest are scored.
    pub learn_frac: f64,
    pub seed: u64,
    pub path: KernelPath,
}

/// Key-cache compression of 4-bit codes versus f32 keys.
pub fn compression_factor(pq: &PqConfig) -> f64 {
    (32 * pq.head_dim()) as f64 / (4 * pq.num_sub()) as f64
}

/// Shuffled disjoint split of `0..n` into learn and test indices.
pub fn split_indices(n: usize, learn_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(learn_frac > 0.0 && learn_frac < 1.0) {
        return Err(invalid(format!(
            "learn fraction {learn_frac} is outside (0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_learn = (n as f64 * learn_frac).floor() as usize;
    if n_learn == 0 || n_learn == n {
        return Err(invalid(format!(
            "learn fraction {learn_frac} of {n} keys leaves an empty split"
        )));
    }
    let test = idx.split_off(n_learn);
    Ok((idx, test))
}

fn gather(rows: &[f32], dim: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&rows[i * dim..(i + 1) * dim]);
    }
    out
}

/// Learns a codebook on a random learn split of `keys` and compares lookup
/// scores of every query over the held-out keys with exact attention.
pub fn run_quality(keys: &[f32], queries: &[f32], cfg: &QualityConfig) -> Result<QualityReport> {
    let d = cfg.pq.head_dim();
    if keys.len() % d != 0 || queries.len() % d != 0 {
        return Err(invalid(format!("inputs are not rows of dimension {d}")));
    }
    if queries.is_empty() {
        return Err(invalid("no queries"));
    }
    let (learn_idx, test_idx) = split_indices(keys.len() / d, cfg.learn_frac, cfg.seed)?;
    let learn = gather(keys, d, &learn_idx);
    let test = gather(keys, d, &test_idx);
    let codebook = learn_codebook(&learn, cfg.pq, cfg.seed)?;
    evaluate_codebook(&codebook, &test, queries, cfg.path).map(|mut r| {
        r.learn_keys = learn_idx.len();
        r.seed = cfg.seed;
        r
    })
}

/// Quality of `codebook` on `test_keys` for every query.
pub fn evaluate_codebook(
    codebook: &Codebook,
    test_keys: &[f32],
    queries: &[f32],
    path: KernelPath,
) -> Result<QualityReport> {
    let pq = *codebook.config();
    let d = pq.head_dim();
    let s = pq.num_sub();
    let float_cache = FloatKeyCache::from_rows(d, test_keys.to_vec())?;
    let t = float_cache.num_keys();
    if t == 0 {
        return Err(invalid("no test keys"));
    }
    let mut code_cache = KeyCodeCache::new(s)?;
    let mut decoded = Vec::with_capacity(test_keys.len());
    for key in test_keys.chunks_exact(d) {
        let codes = codebook.encode_key(key)?;
        decoded.extend(codebook.decode(&codes)?);
        code_cache.append(&codes)?;
    }
    let decoded_cache = FloatKeyCache::from_rows(d, decoded)?;

    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let k = 8.min(t);
    let mut acc = QualityAcc::default();
    for q in queries.chunks_exact(d) {
        let (est, lut) = nomad_logits(q, &code_cache, codebook, path)?;
        let exact = exact_logits_f64(q, &float_cache);
        let on_codes = exact_logits_f64(q, &decoded_cache);
        let bound = s as f64 * 2.0 * lut.shared_step() * inv_sqrt_d;
        acc.max_bound = acc.max_bound.max(bound);

        let mut sum_err = 0.0;
        for i in 0..t {
            let err = (est[i] - exact[i]).abs();
            sum_err += err;
            acc.max_err = acc.max_err.max(err);
            let table_err = (est[i] - on_codes[i]).abs();
            acc.max_table_err = acc.max_table_err.max(table_err);
            if table_err > bound * (1.0 + 1e-9) + 1e-12 {
                acc.violations += 1;
            }
        }
        acc.sum_mean_err += sum_err / t as f64;

        let l1: f64 = softmax(&est)
            .iter()
            .zip(softmax(&exact))
            .map(|(a, b)| (a - b).abs())
            .sum();
        acc.sum_l1 += l1;
        acc.max_l1 = acc.max_l1.max(l1);

        let top_exact = argmax(&exact);
        let est_max = est.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if est[top_exact] >= est_max {
            acc.top1 += 1;
        }
        let est_kth = kth_largest(&est, k);
        let hits = top_k(&exact, k)
            .iter()
            .filter(|&&i| est[i] >= est_kth)
            .count();
        acc.sum_top8 += hits as f64 / k as f64;
        acc.queries += 1;
    }
    let nq = acc.queries as f64;
    Ok(QualityReport {
        head_dim: d,
        sub_dim: pq.sub_dim(),
        num_sub: s,
        learn_keys: 0,
        test_keys: t,
        queries: acc.queries,
        seed: 0,
        path,
        test_distortion: codebook.distortion(test_keys)?,
        mean_abs_logit_error: acc.sum_mean_err / nq,
        max_abs_logit_error: acc.max_err,
        max_abs_table_error: acc.max_table_err,
        max_table_error_bound: acc.max_bound,
        table_bound_violations: acc.violations,
        mean_score_l1: acc.sum_l1 / nq,
        max_score_l1: acc.max_l1,
        top1_agreement: acc.top1 as f64 / nq,
        top8_agreement: acc.sum_top8 / nq,
        compression_factor: compression_factor(&pq),
    })
}

#[derive(Default)]
struct QualityAcc {
    queries: usize,
    sum_mean_err: f64,
    max_err: f64,
    max_table_err: f64,
    max_bound: f64,
    violations: usize,
    sum_l1: f64,
    max_l1: f64,
    top1: usize,
    sum_top8: f64,
}

/// Exact logits accumulated in f64; the quality oracle should not share the
/// benchmark backend's f32 summation.
fn exact_logits_f64(q: &[f32], cache: &FloatKeyCache) -> Vec<f64> {
    let inv = 1.0 / (cache.dim() as f64).sqrt();
    (0..cache.num_keys())
        .map(|i| {
            cache
                .row(i)
                .iter()
                .zip(q)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                * inv
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn kth_largest(v: &[f64], k: usize) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[k - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Exact,
    Pq8,
    Nomad,
}

impl BackendKind {
    pub const ALL: [BackendKind; 3] = [BackendKind::Exact, BackendKind::Pq8, BackendKind::Nomad];

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Exact => "exact",
            BackendKind::Pq8 => "pq8",
            BackendKind::Nomad => "nomad",
        }
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "exact" => Ok(BackendKind::Exact),
            "pq8" => Ok(BackendKind::Pq8),
            "nomad" => Ok(BackendKind::Nomad),
            other => Err(Error::Config(format!("unsupported backend '{other}'"))),
        }
    }
}

/// A single attention head's key store plus its scoring routine.
pub trait AttentionBackend {
    fn kind(&self) -> BackendKind;
    fn cache_key(&mut self, key: &[f32]) -> Result<()>;
    fn score(&self, query: &[f32]) -> Result<ScoreVector>;
    fn num_keys(&self) -> usize;
    fn cache_bytes(&self) -> usize;
}

pub struct ExactBackend {
    cache: FloatKeyCache,
}

impl ExactBackend {
    pub fn new(head_dim: usize) -> Self {
        Self {
            cache: FloatKeyCache::new(head_dim),
        }
    }
}

impl AttentionBackend for ExactBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Exact
    }
    fn cache_key(&mut self, key: &[f32]) -> Result<()> {
        self.cache.append(key)
    }
    fn score(&self, query: &[f32]) -> Result<ScoreVector> {
        exact_scores_cached(query, &self.cache)
    }
    fn num_keys(&self) -> usize {
        self.cache.num_keys()
    }
    fn cache_bytes(&self) -> usize {
        self.cache.bytes_used()
    }
}

pub struct Pq8Backend {
    codebook: Pq8Codebook,
    cache: Pq8Cache,
}

impl Pq8Backend {
    pub fn new(codebook: Pq8Codebook) -> Self {
        let cache = Pq8Cache::new(codebook.num_sub());
        Self { codebook, cache }
    }
}

impl AttentionBackend for Pq8Backend {
    fn kind(&self) -> BackendKind {
        BackendKind::Pq8
    }
    fn cache_key(&mut self, key: &[f32]) -> Result<()> {
        let codes = self.codebook.encode_key(key)?;
        self.cache.append(&codes)
    }
    fn score(&self, query: &[f32]) -> Result<ScoreVector> {
        pq8_scores_cached(query, &self.cache, &self.codebook)
    }
    fn num_keys(&self) -> usize {
        self.cache.num_keys()
    }
    fn cache_bytes(&self) -> usize {
        self.cache.bytes_used()
    }
}

pub struct NomadBackend {
    codebook: Codebook,
    cache: KeyCodeCache,
    path: KernelPath,
}

impl NomadBackend {
    pub fn new(codebook: Codebook, path: KernelPath) -> Result<Self> {
        let cache = KeyCodeCache::new(codebook.config().num_sub())?;
        Ok(Self {
            codebook,
            cache,
            path,
        })
    }
}

impl AttentionBackend for NomadBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Nomad
    }
    fn cache_key(&mut self, key: &[f32]) -> Result<()> {
        let codes = self.codebook.encode_key(key)?;
        self.cache.append(&codes)
    }
    fn score(&self, query: &[f32]) -> Result<ScoreVector> {
        score_cached(query, &self.cache, &self.codebook, self.path)
    }
    fn num_keys(&self) -> usize {
        self.cache.num_keys()
    }
    fn cache_bytes(&self) -> usize {
        self.cache.bytes_used()
    }
}

#[derive(Debug, Clone)]
pub struct LatencyConfig {
    pub context_lengths: Vec<usize>,
    pub head_dim: usize,
    /// Sub-vector width of the 4-bit backend; the 8-bit baseline always uses 2.
    pub sub_dim: usize,
    pub backends: Vec<BackendKind>,
    pub repetitions: usize,
    pub warmup: usize,
    /// Independent heads timed concurrently, one per thread.
    pub threads: usize,
    /// Alternate backends on every repetition instead of timing each backend
    /// back to back. Each backend then runs under the same machine conditions
    /// and with caches disturbed by the others, as in a real decoder.
    pub interleave: bool,
    pub path: KernelPath,
    pub seed: u64,
}

impl LatencyConfig {
    pub fn new(
        context_lengths: Vec<usize>,
        head_dim: usize,
        sub_dim: usize,
        path: KernelPath,
    ) -> Self {
        Self {
            context_lengths,
            head_dim,
            sub_dim,
            backends: BackendKind::ALL.to_vec(),
            repetitions: 20,
            warmup: 3,
            threads: 1,
            interleave: true,
            path,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub backend: BackendKind,
    pub context_len: usize,
    pub head_dim: usize,
    pub sub_dim: usize,
    pub threads: usize,
    pub interleaved: bool,
    pub path: KernelPath,
    pub repetitions: usize,
    /// Median per-query score computation latency, microseconds.
    pub score_us: f64,
    /// Median per-key caching latency, microseconds.
    pub caching_us: f64,
    pub cache_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn get(&self, backend: BackendKind, context_len: usize) -> Option<&LatencyRow> {
        self.rows
            .iter()
            .find(|r| r.backend == backend && r.context_len == context_len)
    }
}

pub fn median(samples: &mut [f64]) -> f64 {
    assert!(!samples.is_empty());
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Codebook whose centroids are sub-vectors of random sample keys. Latency
/// does not depend on codebook quality, so benchmarks skip k-means.
fn sampled_centroids(
    keys: &[f32],
    dim: usize,
    sub_dim: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let n = keys.len() / dim;
    let mut out = Vec::with_capacity(dim * k);
    for s in 0..dim / sub_dim {
        for _ in 0..k {
            let i = rng.random_range(0..n);
            out.extend_from_slice(&keys[i * dim + s * sub_dim..i * dim + (s + 1) * sub_dim]);
        }
    }
    out
}

pub fn make_backend(
    kind: BackendKind,
    cfg: &LatencyConfig,
    sample: &[f32],
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn AttentionBackend + Send>> {
    let d = cfg.head_dim;
    Ok(match kind {
        BackendKind::Exact => Box::new(ExactBackend::new(d)),
        BackendKind::Pq8 => {
            let c = sampled_centroids(sample, d, PQ8_SUB_DIM, PQ8_CENTROIDS, rng);
            Box::new(Pq8Backend::new(Pq8Codebook::from_centroids(d, c)?))
        }
        BackendKind::Nomad => {
            let pq = PqConfig::new(d, cfg.sub_dim)?;
            let c = sampled_centroids(sample, d, cfg.sub_dim, NUM_CENTROIDS, rng);
            Box::new(NomadBackend::new(
                Codebook::from_centroids(pq, c)?,
                cfg.path,
            )?)
        }
    })
}

/// Score and caching samples (microseconds) plus cache bytes, per backend.
type HeadTimings = Vec<(Vec<f64>, Vec<f64>, usize)>;

/// Times every configured backend on one synthetic head.
fn time_head(len: usize, cfg: &LatencyConfig, seed: u64) -> Result<HeadTimings> {
    let d = cfg.head_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let vec = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..n * d).map(|_| normal.sample(rng)).collect()
    };

    let sample = vec(PQ8_CENTROIDS.max(64), &mut rng);
    let prefill = vec(len, &mut rng);
    let queries = vec(cfg.warmup + cfg.repetitions, &mut rng);
    let new_keys = vec(cfg.repetitions, &mut rng);

    let mut backends = Vec::with_capacity(cfg.backends.len());
    for &kind in &cfg.backends {
        let mut backend = make_backend(kind, cfg, &sample, &mut rng)?;
        for key in prefill.chunks_exact(d) {
            backend.cache_key(key)?;
        }
        backends.push(backend);
    }
    let bytes: Vec<usize> = backends.iter().map(|b| b.cache_bytes()).collect();

    let mut score = vec![Vec::with_capacity(cfg.repetitions); backends.len()];
    let mut caching = vec![Vec::with_capacity(cfg.repetitions); backends.len()];
    let warm = queries.chunks_exact(d).take(cfg.warmup);
    let timed = || {
        queries
            .chunks_exact(d)
            .skip(cfg.warmup)
            .zip(new_keys.chunks_exact(d))
    };
    let mut measure = |b: usize,
                       backend: &mut Box<dyn AttentionBackend + Send>,
                       q: &[f32],
                       k: &[f32]|
     -> Result<()> {
        let t0 = Instant::now();
        black_box(backend.score(black_box(q))?);
        score[b].push(t0.elapsed().as_secs_f64() * 1e6);

        let t0 = Instant::now();
        backend.cache_key(black_box(k))?;
        caching[b].push(t0.elapsed().as_secs_f64() * 1e6);
        Ok(())
    };
    if cfg.interleave {
        for q in warm {
            for backend in &backends {
                black_box(backend.score(q)?);
            }
        }
        for (q, k) in timed() {
            for (b, backend) in backends.iter_mut().enumerate() {
                measure(b, backend, q, k)?;
            }
        }
    } else {
        for (b, backend) in backends.iter_mut().enumerate() {
            for q in warm.clone() {
                black_box(backend.score(q)?);
            }
            for (q, k) in timed() {
                measure(b, backend, q, k)?;
            }
        }
    }
    Ok(score
        .into_iter()
        .zip(caching)
        .zip(bytes)
        .map(|((s, c), by)| (s, c, by))
        .collect())
}

/// For each context length: pre-fill one cache per backend, then time score
/// computation per query and caching per key separately, reporting medians.
pub fn run_latency(cfg: &LatencyConfig) -> Result<LatencyReport> {
    if cfg.context_lengths.iter().any(|&l| l == 0) {
        return Err(invalid("context lengths must be positive"));
    }
    if cfg.repetitions == 0 || cfg.threads == 0 {
        return Err(Error::Config(
            "repetitions and threads must be positive".into(),
        ));
    }
    if cfg.backends.is_empty() {
        return Err(Error::Config("no backends selected".into()));
    }
    PqConfig::new(cfg.head_dim, cfg.sub_dim)?;
    if cfg.backends.contains(&BackendKind::Pq8) && cfg.head_dim % PQ8_SUB_DIM != 0 {
        return Err(Error::Config(
            "pq8 backend needs an even head dimension".into(),
        ));
    }
    if cfg.path.is_simd() && !cfg.path.is_available() {
        return Err(Error::Config(format!(
            "kernel path {} is not available here",
            cfg.path
        )));
    }

    let mut rows = Vec::new();
    for &len in &cfg.context_lengths {
        let base = cfg.seed ^ ((len as u64) << 20);
        let per_head: Vec<Result<HeadTimings>> = if cfg.threads == 1 {
            vec![time_head(len, cfg, base)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..cfg.threads)
                    .map(|h| {
                        scope.spawn(move || time_head(len, cfg, base.wrapping_add(h as u64 + 1)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("timing thread panicked"))
                    .collect()
            })
        };
        let mut score = vec![Vec::new(); cfg.backends.len()];
        let mut caching = vec![Vec::new(); cfg.backends.len()];
        let mut bytes = vec![0; cfg.backends.len()];
        for head in per_head {
            for (b, (s, c, by)) in head?.into_iter().enumerate() {
                score[b].extend(s);
                caching[b].extend(c);
                bytes[b] = by;
            }
        }
        for (b, &kind) in cfg.backends.iter().enumerate() {
            rows.push(LatencyRow {
                backend: kind,
                context_len: len,
                head_dim: cfg.head_dim,
                sub_dim: if kind == BackendKind::Pq8 {
                    PQ8_SUB_DIM
                } else {
                    cfg.sub_dim
                },
                threads: cfg.threads,
                interleaved: cfg.interleave,
                path: cfg.path,
                repetitions: cfg.repetitions,
                score_us: median(&mut score[b]),
                caching_us: median(&mut caching[b]),
                cache_bytes: bytes[b],
            });
        }
    }
    Ok(LatencyReport { rows })
}
