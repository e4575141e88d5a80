use std::path::{Path, PathBuf};

use nomad_core::evalbench::{run_latency, run_quality, BackendKind, LatencyConfig, QualityConfig};
use nomad_core::format::{self, Tensor};
use nomad_core::kernel::softmax;
use nomad_core::reference::{
    exact_logits, pq8_logits, FloatKeyCache, Pq8Cache, Pq8Codebook, PQ8_SUB_DIM,
};
use nomad_core::{
    learn_codebook, nomad_logits, Codebook, Error, KernelPath, KeyCodeCache, PqConfig,
};

use crate::error::{CliError, CliResult};

fn read_tensor(path: &Path) -> CliResult<Tensor> {
    format::read_tensor(path).map_err(CliError::file(path))
}

fn read_codebook(path: &Path) -> CliResult<Codebook> {
    format::read_codebook(path).map_err(CliError::file(path))
}

fn read_cache(path: &Path) -> CliResult<KeyCodeCache> {
    format::read_cache(path).map_err(CliError::file(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn check_dim(what: &str, got: usize, want: usize) -> CliResult<()> {
    if got != want {
        return Err(Error::Config(format!("{what} has dimension {got}, expected {want}")).into());
    }
    Ok(())
}

pub struct LearnArgs {
    pub keys: PathBuf,
    pub sub_dim: usize,
    pub seed: u64,
    pub layer: Option<u32>,
    pub head: Option<u32>,
    pub out: PathBuf,
}

pub fn learn(args: &LearnArgs) -> CliResult<String> {
    let keys = read_tensor(&args.keys)?;
    let cfg = PqConfig::new(keys.dim, args.sub_dim)?;
    let codebook = learn_codebook(&keys.data, cfg, args.seed)?.with_labels(args.layer, args.head);
    let distortion = codebook.distortion(&keys.data)?;
    write_bytes(&args.out, &format::encode_codebook(&codebook))?;
    Ok(format!(
        "learned {} sub-quantizers x 16 centroids (d={}, d_sub={}) from {} keys\nmean distortion {:.6e} (per dimension {:.6e})",
        cfg.num_sub(),
        cfg.head_dim(),
        cfg.sub_dim(),
        keys.n_vectors(),
        distortion,
        distortion / cfg.head_dim() as f64
    ))
}

pub fn encode(keys: &Path, codebook: &Path, out: &Path) -> CliResult<String> {
    let keys = read_tensor(keys)?;
    let codebook = read_codebook(codebook)?;
    let cfg = *codebook.config();
    check_dim("key file", keys.dim, cfg.head_dim())?;
    let mut cache = KeyCodeCache::new(cfg.num_sub())?;
    for key in keys.rows() {
        cache.append(&codebook.encode_key(key)?)?;
    }
    write_bytes(out, &format::encode_cache(&cache))?;
    Ok(format!(
        "encoded {} keys into {} blocks ({} bytes)",
        cache.num_keys(),
        cache.num_blocks(),
        cache.bytes_used()
    ))
}

pub struct ScoreArgs {
    pub query: PathBuf,
    pub backend: BackendKind,
    pub codebook: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub keys: Option<PathBuf>,
    pub seed: u64,
    pub logits: bool,
    pub bounds: Option<PathBuf>,
    pub path: KernelPath,
    pub out: PathBuf,
}

fn require<'a>(flag: &str, v: &'a Option<PathBuf>, backend: BackendKind) -> CliResult<&'a Path> {
    v.as_deref().ok_or_else(|| {
        Error::Config(format!("backend {} requires --{flag}", backend.name())).into()
    })
}

/// Per-query logits plus, for the lookup backend, `(shared_step, logit bound)`.
type Scored = (Vec<Vec<f64>>, Option<Vec<(f64, f64)>>);

fn score_nomad(args: &ScoreArgs, queries: &Tensor) -> CliResult<Scored> {
    let codebook = read_codebook(require("codebook", &args.codebook, args.backend)?)?;
    let cache = read_cache(require("cache", &args.cache, args.backend)?)?;
    let cfg = codebook.config();
    check_dim("query file", queries.dim, cfg.head_dim())?;
    if cache.num_sub() != cfg.num_sub() {
        return Err(Error::Config(format!(
            "cache has {} sub-quantizers, codebook has {}",
            cache.num_sub(),
            cfg.num_sub()
        ))
        .into());
    }
    let inv_sqrt_d = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut rows = Vec::new();
    let mut bounds = Vec::new();
    for q in queries.rows() {
        let (logits, lut) = nomad_logits(q, &cache, &codebook, args.path)?;
        let step = lut.shared_step();
        bounds.push((step, cfg.num_sub() as f64 * 2.0 * step * inv_sqrt_d));
        rows.push(logits);
    }
    Ok((rows, Some(bounds)))
}

fn score_exact(args: &ScoreArgs, queries: &Tensor) -> CliResult<Scored> {
    let keys = read_tensor(require("keys", &args.keys, args.backend)?)?;
    check_dim("query file", queries.dim, keys.dim)?;
    let cache = FloatKeyCache::from_rows(keys.dim, keys.data)?;
    let rows = queries
        .rows()
        .map(|q| exact_logits(q, &cache))
        .collect::<Result<_, _>>()?;
    Ok((rows, None))
}

fn score_pq8(args: &ScoreArgs, queries: &Tensor) -> CliResult<Scored> {
    let keys = read_tensor(require("keys", &args.keys, args.backend)?)?;
    check_dim("query file", queries.dim, keys.dim)?;
    let codebook = Pq8Codebook::learn(&keys.data, keys.dim, args.seed)?;
    let mut cache = Pq8Cache::new(keys.dim / PQ8_SUB_DIM);
    for key in keys.rows() {
        cache.append(&codebook.encode_key(key)?)?;
    }
    let rows = queries
        .rows()
        .map(|q| pq8_logits(q, &cache, &codebook))
        .collect::<Result<_, _>>()?;
    Ok((rows, None))
}

pub fn score(args: &ScoreArgs) -> CliResult<String> {
    let queries = read_tensor(&args.query)?;
    let (rows, bounds) = match args.backend {
        BackendKind::Nomad => score_nomad(args, &queries)?,
        BackendKind::Exact => score_exact(args, &queries)?,
        BackendKind::Pq8 => score_pq8(args, &queries)?,
    };
    let t = rows.first().map_or(0, Vec::len);

    let mut w = csv::Writer::from_path(&args.out)?;
    let mut header = vec!["query".to_string()];
    header.extend((0..t).map(|i| format!("pos_{i}")));
    w.write_record(&header)?;
    for (i, logits) in rows.iter().enumerate() {
        let values = if args.logits {
            logits.clone()
        } else {
            softmax(logits)
        };
        let mut record = vec![i.to_string()];
        record.extend(values.iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.flush().map_err(|source| CliError::Write {
        path: args.out.clone(),
        source,
    })?;

    if let Some(path) = &args.bounds {
        let Some(bounds) = bounds else {
            return Err(
                Error::Config("--bounds is only reported by the nomad backend".into()).into(),
            );
        };
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["query", "shared_step", "logit_bound"])?;
        for (i, (step, bound)) in bounds.iter().enumerate() {
            w.write_record([i.to_string(), step.to_string(), bound.to_string()])?;
        }
        w.flush().map_err(|source| CliError::Write {
            path: path.clone(),
            source,
        })?;
    }
    Ok(format!(
        "scored {} queries over {t} keys with backend {}",
        rows.len(),
        args.backend.name()
    ))
}

pub struct BenchArgs {
    pub config: LatencyConfig,
    pub out: PathBuf,
    pub json: Option<PathBuf>,
}

pub fn bench(args: &BenchArgs) -> CliResult<String> {
    let report = run_latency(&args.config)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|source| CliError::Write {
        path: args.out.clone(),
        source,
    })?;
    if let Some(path) = &args.json {
        write_bytes(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    let mut summary = format!(
        "{:<8}{:>10}{:>14}{:>14}{:>14}",
        "backend", "context", "score_us", "caching_us", "cache_bytes"
    );
    for row in &report.rows {
        summary.push_str(&format!(
            "\n{:<8}{:>10}{:>14.2}{:>14.3}{:>14}",
            row.backend.name(),
            row.context_len,
            row.score_us,
            row.caching_us,
            row.cache_bytes
        ));
    }
    Ok(summary)
}

pub struct EvalArgs {
    pub keys: PathBuf,
    pub queries: PathBuf,
    pub sub_dim: usize,
    pub learn_frac: f64,
    pub seed: u64,
    pub path: KernelPath,
    pub out: PathBuf,
}

pub fn eval(args: &EvalArgs) -> CliResult<String> {
    let keys = read_tensor(&args.keys)?;
    let queries = read_tensor(&args.queries)?;
    check_dim("query file", queries.dim, keys.dim)?;
    let cfg = QualityConfig {
        pq: PqConfig::new(keys.dim, args.sub_dim)?,
        learn_frac: args.learn_frac,
        seed: args.seed,
        path: args.path,
    };
    let report = run_quality(&keys.data, &queries.data, &cfg)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_bytes(&args.out, json.as_bytes())?;
    Ok(format!(
        "top-1 agreement {:.4}, top-8 agreement {:.4}, mean score L1 {:.4e}, table bound violations {}",
        report.top1_agreement, report.top8_agreement, report.mean_score_l1, report.table_bound_violations
    ))
}
