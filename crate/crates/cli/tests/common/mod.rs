#![allow(dead_code)]

use std::path::{Path, PathBuf};

use attnscope::Cli;
use attnscope_core::model::{EncoderConfig, ModelWeights};
use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Toy {
    pub config: PathBuf,
    pub weights: PathBuf,
    pub data: PathBuf,
}

pub fn toy_config() -> EncoderConfig {
    EncoderConfig::toy(2, 2, 8, 4, 16)
}

/// Writes a toy model plus a dataset of `(id, token_ids)` sequences.
pub fn write_toy(dir: &Path, std: f64, seqs: &[(&str, Vec<usize>)]) -> Toy {
    let config = toy_config();
    let weights =
        ModelWeights::<f64>::random_dense(&config, std, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let toy = Toy {
        config: dir.join("config.json"),
        weights: dir.join("weights.hta"),
        data: dir.join("data.jsonl"),
    };
    std::fs::write(&toy.config, serde_json::to_string(&config).unwrap()).unwrap();
    weights.to_archive(&config).write(&toy.weights).unwrap();
    let lines: Vec<String> = seqs
        .iter()
        .map(|(id, ids)| {
            serde_json::json!({"id": id, "token_ids": ids, "segment_ids": vec![0; ids.len()]})
                .to_string()
        })
        .collect();
    std::fs::write(&toy.data, lines.join("\n")).unwrap();
    toy
}

pub fn default_seqs() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("a", vec![1, 7, 9, 2]),
        ("b", vec![1, 4, 2]),
        ("c", vec![1, 30, 12, 5, 2]),
        ("d", vec![3]),
    ]
}

pub fn cli(args: &[&str]) -> anyhow::Result<()> {
    let mut full = vec!["attnscope"];
    full.extend_from_slice(args);
    attnscope::run(Cli::try_parse_from(full)?)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Extracts every kind for the toy dataset into `out`.
pub fn extract_all(toy: &Toy, out: &Path, threads: &str) -> anyhow::Result<()> {
    cli(&[
        "extract",
        "--config",
        s(&toy.config),
        "--weights",
        s(&toy.weights),
        "--data",
        s(&toy.data),
        "--out",
        s(out),
        "--max-len",
        "5",
        "--allow-nonidentifiable",
        "--kind",
        "attention,prev-contribution,input-contribution,hidden-contribution",
        "--threads",
        threads,
    ])
}

/// Runs every report command over an extraction directory.
pub fn report_all(out: &Path, threads: &str) -> anyhow::Result<()> {
    let o = s(out);
    cli(&[
        "histogram",
        "--out",
        o,
        "--kind",
        "attention",
        "--threads",
        threads,
    ])?;
    cli(&[
        "histogram",
        "--out",
        o,
        "--kind",
        "input-contribution",
        "--threads",
        threads,
    ])?;
    cli(&[
        "histogram",
        "--out",
        o,
        "--kind",
        "hidden-contribution",
        "--threads",
        threads,
    ])?;
    cli(&["com", "--out", o, "--threads", threads])?;
    cli(&[
        "correlate",
        "--out",
        o,
        "--kind",
        "prev-contribution",
        "--threads",
        threads,
    ])?;
    cli(&[
        "correlate",
        "--out",
        o,
        "--kind",
        "input-contribution",
        "--threads",
        threads,
    ])?;
    cli(&[
        "maps", "--out", o, "--seq-id", "a", "--layer", "2", "--head", "1",
    ])
}

/// All regular files under `dir`, relative and sorted.
pub fn tree(dir: &Path) -> Vec<PathBuf> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push(p.strip_prefix(base).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Writes an extraction directory by hand: one matrix per sequence, layer 1,
/// head 0, for each kind, with rows from `row(len, p)`.
pub fn write_synthetic(
    dir: &Path,
    lens: &[usize],
    max_len: usize,
    kinds: &[attnscope::Kind],
    row: impl Fn(usize, usize) -> Vec<f64>,
) {
    use attnscope::artifacts::*;
    use attnscope_core::archive::Archive;
    use attnscope_core::TensorF64;

    let mut config = toy_config();
    config.n_layers = 1;
    config.n_heads = 1;
    let sequences: Vec<SequenceEntry> = lens
        .iter()
        .enumerate()
        .map(|(i, &len)| SequenceEntry {
            id: format!("syn{i}"),
            len,
            token_ids: (0..len).collect(),
            tokens: None,
        })
        .collect();
    for seq in &sequences {
        std::fs::create_dir_all(dir.join(&seq.id)).unwrap();
        let data: Vec<f64> = (0..seq.len).flat_map(|p| row(seq.len, p)).collect();
        let mut a = Archive::new();
        a.insert(VALUES, &TensorF64::matrix(seq.len, seq.len, data).unwrap());
        for &k in kinds {
            let head = k.per_head().then_some(0);
            a.write(matrix_path(dir, &seq.id, k, 1, head)).unwrap();
        }
    }
    let manifest = ExtractManifest {
        tool: "attnscope".into(),
        version: "test".into(),
        csv_schema: CSV_SCHEMA,
        config_path: String::new(),
        weights_path: String::new(),
        data_path: String::new(),
        model: config,
        flags: ExtractFlags {
            max_len,
            kinds: kinds.to_vec(),
            layers: vec![1],
            heads: vec![0],
            input_anchor: Default::default(),
            allow_nonidentifiable: true,
            jacobian_mode: "reverse".into(),
            precision: "f64".into(),
        },
        dataset: DatasetSummary {
            n_read: lens.len(),
            n_filtered_long: 0,
            n_kept: lens.len(),
            lengths: None,
        },
        sequences,
        undefined_rows: vec![],
    };
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string(&manifest).unwrap(),
    )
    .unwrap();
}

/// Left-neighbor rows: token p attends to p-1, the first token to itself.
pub fn left_neighbor(len: usize, p: usize) -> Vec<f64> {
    let mut r = vec![0.0; len];
    r[p.saturating_sub(1)] = 1.0;
    r
}

pub fn uniform(len: usize, _p: usize) -> Vec<f64> {
    vec![1.0 / len as f64; len]
}

pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}
