use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nomad_core::format::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn nomad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nomad"))
        .args(args)
        .env_remove("NOMAD_FORCE_SCALAR")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(n: usize, d: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let queries: Vec<f32> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        format::write_tensor(dir.path().join("keys.bin"), &Tensor::new(d, keys).unwrap()).unwrap();
        format::write_tensor(dir.path().join("q.bin"), &Tensor::new(d, queries).unwrap()).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn learn(&self, out: &str) -> Output {
        nomad(&[
            "learn",
            "--keys",
            &self.p("keys.bin"),
            "--d-sub",
            "1",
            "--seed",
            "4",
            "--out",
            &self.p(out),
        ])
    }
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.unwrap()
                .iter()
                .skip(1)
                .map(|v| v.parse().unwrap())
                .collect()
        })
        .collect();
    (header, rows)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&nomad(&["--help"])), 0);
    assert_eq!(code(&nomad(&["--version"])), 0);
    assert_eq!(code(&nomad(&[])), 1);
    assert_eq!(code(&nomad(&["frobnicate"])), 1);
}

#[test]
fn learn_writes_one_table_per_dimension() {
    let f = Fixture::new(200, 8, 1);
    let out = f.learn("cb.bin");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("distortion"));
    let cb = format::read_codebook(f.path("cb.bin")).unwrap();
    assert_eq!(cb.config().num_sub(), 8);
    assert_eq!(cb.config().head_dim(), 8);
}

#[test]
fn learn_is_byte_deterministic_and_labels_round_trip() {
    let f = Fixture::new(200, 8, 2);
    assert_eq!(code(&f.learn("a.bin")), 0);
    assert_eq!(code(&f.learn("b.bin")), 0);
    assert_eq!(
        std::fs::read(f.path("a.bin")).unwrap(),
        std::fs::read(f.path("b.bin")).unwrap()
    );

    let out = nomad(&[
        "learn",
        "--keys",
        &f.p("keys.bin"),
        "--layer",
        "3",
        "--head",
        "7",
        "--out",
        &f.p("c.bin"),
    ]);
    assert_eq!(code(&out), 0);
    let cb = format::read_codebook(f.path("c.bin")).unwrap();
    assert_eq!((cb.layer, cb.head), (Some(3), Some(7)));
}

#[test]
fn malformed_files_have_distinct_diagnostics() {
    let f = Fixture::new(100, 4, 3);
    let bytes = std::fs::read(f.path("keys.bin")).unwrap();

    std::fs::write(f.path("trunc.bin"), &bytes[..bytes.len() - 5]).unwrap();
    let out = nomad(&[
        "learn",
        "--keys",
        &f.p("trunc.bin"),
        "--out",
        &f.p("cb.bin"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("truncated payload"),
        "{}",
        stderr(&out)
    );

    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(f.path("magic.bin"), &magic).unwrap();
    let out = nomad(&[
        "learn",
        "--keys",
        &f.p("magic.bin"),
        "--out",
        &f.p("cb.bin"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad magic"));

    let mut version = bytes.clone();
    version[4] = 9;
    std::fs::write(f.path("version.bin"), &version).unwrap();
    let out = nomad(&[
        "learn",
        "--keys",
        &f.p("version.bin"),
        "--out",
        &f.p("cb.bin"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unsupported version"));

    std::fs::write(f.path("short.bin"), &bytes[..10]).unwrap();
    let out = nomad(&[
        "learn",
        "--keys",
        &f.p("short.bin"),
        "--out",
        &f.p("cb.bin"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("truncated header"));

    let out = nomad(&[
        "learn",
        "--keys",
        &f.p("missing.bin"),
        "--out",
        &f.p("cb.bin"),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_errors_exit_three() {
    let f = Fixture::new(100, 6, 4);
    let out = nomad(&[
        "learn",
        "--keys",
        &f.p("keys.bin"),
        "--d-sub",
        "4",
        "--out",
        &f.p("cb.bin"),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("does not divide"));

    let tiny = Fixture::new(5, 6, 5);
    let out = nomad(&[
        "learn",
        "--keys",
        &tiny.p("keys.bin"),
        "--out",
        &tiny.p("cb.bin"),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn encode_matches_in_memory_encoding() {
    let f = Fixture::new(77, 8, 6);
    assert_eq!(code(&f.learn("cb.bin")), 0);
    let out = nomad(&[
        "encode",
        "--keys",
        &f.p("keys.bin"),
        "--codebook",
        &f.p("cb.bin"),
        "--out",
        &f.p("cache.bin"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let cb = format::read_codebook(f.path("cb.bin")).unwrap();
    let keys = format::read_tensor(f.path("keys.bin")).unwrap();
    let cache = format::read_cache(f.path("cache.bin")).unwrap();
    assert_eq!(cache.num_keys(), 77);
    for (i, key) in keys.rows().enumerate() {
        assert_eq!(cache.read_key(i).unwrap(), cb.encode_key(key).unwrap());
    }
}

#[test]
fn encode_empty_and_mismatched() {
    let f = Fixture::new(50, 8, 7);
    assert_eq!(code(&f.learn("cb.bin")), 0);
    format::write_tensor(f.path("empty.bin"), &Tensor::new(8, vec![]).unwrap()).unwrap();
    let out = nomad(&[
        "encode",
        "--keys",
        &f.p("empty.bin"),
        "--codebook",
        &f.p("cb.bin"),
        "--out",
        &f.p("cache.bin"),
    ]);
    assert_eq!(code(&out), 0);
    let cache = format::read_cache(f.path("cache.bin")).unwrap();
    assert_eq!((cache.num_keys(), cache.num_sub()), (0, 8));

    format::write_tensor(f.path("wide.bin"), &Tensor::new(4, vec![0.0; 8]).unwrap()).unwrap();
    let out = nomad(&[
        "encode",
        "--keys",
        &f.p("wide.bin"),
        "--codebook",
        &f.p("cb.bin"),
        "--out",
        &f.p("x.bin"),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn single_key_scores_one_on_every_backend() {
    let f = Fixture::new(300, 4, 8);
    assert_eq!(code(&f.learn("cb.bin")), 0);
    let key = format::read_tensor(f.path("keys.bin"))
        .unwrap()
        .row(0)
        .to_vec();
    format::write_tensor(f.path("one.bin"), &Tensor::new(4, key).unwrap()).unwrap();
    let out = nomad(&[
        "encode",
        "--keys",
        &f.p("one.bin"),
        "--codebook",
        &f.p("cb.bin"),
        "--out",
        &f.p("one_cache.bin"),
    ]);
    assert_eq!(code(&out), 0);

    let out = nomad(&[
        "score",
        "--query",
        &f.p("q.bin"),
        "--codebook",
        &f.p("cb.bin"),
        "--cache",
        &f.p("one_cache.bin"),
        "--out",
        &f.p("s.csv"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = csv_rows(&f.path("s.csv"));
    assert_eq!(header, vec!["query", "pos_0"]);
    assert_eq!(rows, vec![vec![1.0]; 3]);

    let out = nomad(&[
        "score",
        "--query",
        &f.p("q.bin"),
        "--backend",
        "exact",
        "--keys",
        &f.p("one.bin"),
        "--out",
        &f.p("e.csv"),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(csv_rows(&f.path("e.csv")).1, vec![vec![1.0]; 3]);
}

#[test]
fn score_rows_sum_to_one_and_backends_agree_roughly() {
    let f = Fixture::new(300, 8, 9);
    assert_eq!(code(&f.learn("cb.bin")), 0);
    assert_eq!(
        code(&nomad(&[
            "encode",
            "--keys",
            &f.p("keys.bin"),
            "--codebook",
            &f.p("cb.bin"),
            "--out",
            &f.p("c.bin")
        ])),
        0
    );
    let runs = [
        ("nomad", vec!["--codebook", "cb.bin", "--cache", "c.bin"]),
        ("exact", vec!["--keys", "keys.bin"]),
        ("pq8", vec!["--keys", "keys.bin"]),
    ];
    let mut all = Vec::new();
    for (backend, extra) in &runs {
        let out_name = format!("{backend}.csv");
        let mut args = vec![
            "score".to_string(),
            "--query".into(),
            f.p("q.bin"),
            "--backend".into(),
            backend.to_string(),
        ];
        for pair in extra.chunks(2) {
            args.push(pair[0].into());
            args.push(f.p(pair[1]));
        }
        args.extend(["--out".into(), f.p(&out_name)]);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = nomad(&args);
        assert_eq!(code(&out), 0, "{backend}: {}", stderr(&out));
        let (header, rows) = csv_rows(&f.path(&out_name));
        assert_eq!(header.len(), 301);
        for row in &rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        all.push(rows);
    }
    for other in &all[1..] {
        for (a, b) in all[0].iter().zip(other) {
            let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            assert!(l1 < 0.5, "l1 {l1}");
        }
    }
}

#[test]
fn score_input_errors() {
    let f = Fixture::new(300, 8, 10);
    let out = nomad(&[
        "score",
        "--query",
        &f.p("q.bin"),
        "--backend",
        "fast",
        "--out",
        &f.p("s.csv"),
    ]);
    assert_eq!(code(&out), 1);
    let out = nomad(&[
        "score",
        "--query",
        &f.p("q.bin"),
        "--backend",
        "exact",
        "--out",
        &f.p("s.csv"),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("--keys"));
    let out = nomad(&["score", "--query", &f.p("q.bin"), "--out", &f.p("s.csv")]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("--codebook"));
    let out = nomad(&[
        "score",
        "--query",
        &f.p("q.bin"),
        "--backend",
        "exact",
        "--keys",
        &f.p("keys.bin"),
        "--bounds",
        &f.p("b.csv"),
        "--out",
        &f.p("s.csv"),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn bench_smoke_schema_and_scalar_override() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("bench.csv");
    let json_path = dir.path().join("bench.json");
    let out = nomad(&[
        "bench",
        "--lengths",
        "32,40",
        "--d",
        "16",
        "--reps",
        "3",
        "--force-scalar",
        "--out",
        csv_path.to_str().unwrap(),
        "--json",
        json_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "backend",
            "context_len",
            "head_dim",
            "sub_dim",
            "threads",
            "interleaved",
            "path",
            "repetitions",
            "score_us",
            "caching_us",
            "cache_bytes"
        ]
    );
    let records: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|rec| &rec[6] == "scalar"));
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&json_path).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 6);

    let out = Command::new(env!("CARGO_BIN_EXE_nomad"))
        .args([
            "bench",
            "--lengths",
            "32",
            "--d",
            "8",
            "--reps",
            "2",
            "--backends",
            "nomad",
            "--sequential",
            "--out",
            csv_path.to_str().unwrap(),
        ])
        .env("NOMAD_FORCE_SCALAR", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    let rec = r.records().next().unwrap().unwrap();
    assert_eq!((&rec[0], &rec[5], &rec[6]), ("nomad", "false", "scalar"));

    let out = nomad(&[
        "bench",
        "--lengths",
        "0",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    let out = nomad(&[
        "bench",
        "--lengths",
        "32",
        "--d",
        "12",
        "--d-sub",
        "5",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_is_deterministic_and_validates_fraction() {
    let f = Fixture::new(400, 8, 11);
    let run = |out: &str| {
        nomad(&[
            "eval",
            "--keys",
            &f.p("keys.bin"),
            "--queries",
            &f.p("q.bin"),
            "--learn-frac",
            "0.6",
            "--seed",
            "2",
            "--out",
            &f.p(out),
        ])
    };
    assert_eq!(code(&run("a.json")), 0);
    assert_eq!(code(&run("b.json")), 0);
    let a = std::fs::read(f.path("a.json")).unwrap();
    assert_eq!(a, std::fs::read(f.path("b.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["learn_keys"], 240);
    assert_eq!(report["test_keys"], 160);
    assert_eq!(report["compression_factor"], 8.0);
    assert_eq!(report["table_bound_violations"], 0);

    for bad in ["1.5", "0", "1", "abc"] {
        let out = nomad(&[
            "eval",
            "--keys",
            &f.p("keys.bin"),
            "--queries",
            &f.p("q.bin"),
            "--learn-frac",
            bad,
            "--out",
            &f.p("c.json"),
        ]);
        assert_eq!(code(&out), 1, "learn-frac {bad}");
    }
}
