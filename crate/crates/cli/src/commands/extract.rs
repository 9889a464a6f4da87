use std::path::PathBuf;

use anyhow::{bail, Context};
use attnscope_core::archive::Archive;
use attnscope_core::attribution::{
    hidden_contribution, input_contribution, previous_layer_contribution, AttributionOptions,
    ContributionMatrix, InputAnchor,
};
use attnscope_core::model::{forward, load_weights, EncoderConfig, TokenizedSequence};
use attnscope_core::{ModelWeightsF64, TensorF64};
use rayon::prelude::*;

use crate::args::ExtractArgs;
use crate::artifacts::{
    matrix_path, resolve, units, DatasetSummary, ExtractFlags, ExtractManifest, SequenceEntry,
    UndefinedRows, CSV_SCHEMA, MANIFEST_FILE, VALUES,
};
use crate::dataset::load_sequences;
use crate::kind::Kind;
use crate::report::write_json;

struct Plan<'a> {
    config: &'a EncoderConfig,
    weights: &'a ModelWeightsF64,
    kinds: &'a [Kind],
    layers: &'a [usize],
    heads: &'a [usize],
    opts: AttributionOptions,
    root: &'a std::path::Path,
}

struct SequenceOutput {
    files: Vec<(PathBuf, Vec<u8>)>,
    undefined: Vec<UndefinedRows>,
}

fn archive_bytes(values: &TensorF64) -> anyhow::Result<Vec<u8>> {
    let mut a = Archive::new();
    a.insert(VALUES, values);
    Ok(a.to_bytes()?)
}

fn extract_sequence(seq: &TokenizedSequence, plan: &Plan) -> anyhow::Result<SequenceOutput> {
    let trace = forward(seq, plan.weights, plan.config)?;
    let mut out = SequenceOutput {
        files: Vec::new(),
        undefined: Vec::new(),
    };
    for &kind in plan.kinds {
        for (l, h) in units(kind, plan.layers, plan.heads) {
            let matrix: Option<ContributionMatrix<f64>> = match (kind, h) {
                (Kind::Attention, _) => None,
                (Kind::PrevContribution, Some(h)) => {
                    Some(previous_layer_contribution(&trace, l, h, plan.opts)?)
                }
                (Kind::InputContribution, Some(h)) => {
                    Some(input_contribution(&trace, l, h, plan.opts)?)
                }
                (Kind::HiddenContribution, None) => {
                    Some(hidden_contribution(&trace, l, plan.opts)?)
                }
                _ => unreachable!("units() pairs head-less kinds with None"),
            };
            let values = match &matrix {
                None => trace
                    .attention(l, h.expect("attention is per head"))?
                    .clone(),
                Some(m) => m.values.clone(),
            };
            if let Some(m) = matrix.filter(|m| !m.undefined_rows.is_empty()) {
                out.undefined.push(UndefinedRows {
                    seq_id: seq.id.clone(),
                    kind,
                    layer: l,
                    head: h,
                    rows: m.undefined_rows,
                });
            }
            out.files.push((
                matrix_path(plan.root, &seq.id, kind, l, h),
                archive_bytes(&values)?,
            ));
        }
    }
    Ok(out)
}

pub fn run(a: &ExtractArgs) -> anyhow::Result<()> {
    let config = EncoderConfig::from_json_file(&a.config)
        .with_context(|| format!("loading model config {}", a.config.display()))?;
    if a.max_len > config.d_v && !a.allow_nonidentifiable {
        bail!(
            "--max-len {} exceeds the per-head value width d_v = {}, so attention is not identifiable from head outputs; \
             lower --max-len or pass --allow-nonidentifiable",
            a.max_len,
            config.d_v
        );
    }
    let weights: ModelWeightsF64 = load_weights(&a.weights, &config)
        .with_context(|| format!("loading weights {}", a.weights.display()))?;
    let dataset = load_sequences(&a.data, a.max_len)?;
    for s in &dataset.sequences {
        s.validate(&config)?;
    }
    let layers = resolve(
        &a.selection.layers,
        &(1..=config.n_layers).collect::<Vec<_>>(),
        "layer",
    )?;
    let heads = resolve(
        &a.selection.heads,
        &(0..config.n_heads).collect::<Vec<_>>(),
        "head",
    )?;
    let mut kinds = a.kind.clone();
    kinds.sort_unstable();
    kinds.dedup();
    let opts = AttributionOptions {
        input_anchor: if a.e0_post_norm {
            InputAnchor::PostNorm
        } else {
            InputAnchor::PreNorm
        },
        ..AttributionOptions::default()
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let plan = Plan {
        config: &config,
        weights: &weights,
        kinds: &kinds,
        layers: &layers,
        heads: &heads,
        opts,
        root: &a.out,
    };

    let total = dataset.sequences.len();
    let undefined = crate::with_pool(
        a.selection.threads,
        || -> anyhow::Result<Vec<UndefinedRows>> {
            // Compute a bounded batch in parallel, then write it in dataset order.
            let batch = 2 * rayon::current_num_threads();
            let mut undefined = Vec::new();
            let mut done = 0;
            for chunk in dataset.sequences.chunks(batch) {
                let results: Vec<_> = chunk
                    .par_iter()
                    .map(|s| (s, extract_sequence(s, &plan)))
                    .collect();
                for (seq, result) in results {
                    let output = result.with_context(|| format!("sequence {:?}", seq.id))?;
                    let dir = a.out.join(&seq.id);
                    std::fs::create_dir_all(&dir)
                        .with_context(|| format!("creating {}", dir.display()))?;
                    for (path, bytes) in output.files {
                        std::fs::write(&path, bytes).with_context(|| {
                            format!("sequence {:?}: writing {}", seq.id, path.display())
                        })?;
                    }
                    undefined.extend(output.undefined);
                }
                done += chunk.len();
                log::info!("extracted {done}/{total} sequences");
            }
            Ok(undefined)
        },
    )??;
    if !undefined.is_empty() {
        let n: usize = undefined.iter().map(|u| u.rows.len()).sum();
        log::warn!("{n} contribution rows were undefined (target independent of every source)");
    }

    let manifest = ExtractManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        csv_schema: CSV_SCHEMA,
        config_path: a.config.display().to_string(),
        weights_path: a.weights.display().to_string(),
        data_path: a.data.display().to_string(),
        model: config.clone(),
        flags: ExtractFlags {
            max_len: a.max_len,
            kinds: kinds.clone(),
            layers: layers.clone(),
            heads: heads.clone(),
            input_anchor: opts.input_anchor,
            allow_nonidentifiable: a.allow_nonidentifiable,
            jacobian_mode: "reverse".into(),
            precision: "f64".into(),
        },
        dataset: DatasetSummary {
            n_read: dataset.n_read,
            n_filtered_long: dataset.n_filtered,
            n_kept: total,
            lengths: dataset.length_stats(),
        },
        sequences: dataset
            .sequences
            .iter()
            .map(|s| SequenceEntry {
                id: s.id.clone(),
                len: s.len(),
                token_ids: s.token_ids.clone(),
                tokens: s.display_tokens.clone(),
            })
            .collect(),
        undefined_rows: undefined,
    };
    write_json(&a.out.join(MANIFEST_FILE), &manifest)
}
