use anyhow::{bail, Context as _};
use attnscope_core::analysis::{Averaging, CorrelationAccumulator};
use attnscope_core::HeadCorrelationSummaryF64;
use rayon::prelude::*;
use serde::Serialize;

use super::{AnalysisFlags, Context};
use crate::args::CorrelateArgs;
use crate::artifacts::read_matrix;
use crate::kind::Kind;
use crate::report::{fmt_opt, report_dir, write_csv, write_json, write_text, ToolInfo};
use crate::svg::strip_chart;

pub const CSV_HEADER: [&str; 6] = [
    "layer",
    "head",
    "mean_pearson",
    "mean_spearman",
    "n_pairs",
    "n_skipped",
];

pub struct CorrelationResult {
    pub summaries: Vec<HeadCorrelationSummaryF64>,
    pub n_excluded: usize,
}

/// Per-head correlation summaries between attention and `kind`, built from
/// per-sequence accumulators merged in dataset order.
pub fn compute(
    ctx: &Context,
    kind: Kind,
    averaging: Averaging,
) -> anyhow::Result<CorrelationResult> {
    if !kind.is_contribution() || !kind.per_head() {
        bail!("correlate needs a per-head contribution kind (prev-contribution or input-contribution), got {kind}");
    }
    ctx.manifest.require_kind(Kind::Attention)?;
    ctx.manifest.require_kind(kind)?;
    let heads: Vec<(usize, usize)> = ctx
        .layers
        .iter()
        .flat_map(|&l| ctx.heads.iter().map(move |&h| (l, h)))
        .collect();
    let partials = crate::with_pool(ctx.threads, || {
        ctx.manifest
            .sequences
            .par_iter()
            .map(
                |seq| -> anyhow::Result<(Vec<CorrelationAccumulator<f64>>, usize)> {
                    let keep: Vec<usize> = (0..seq.len).filter(|&j| ctx.keeps(seq, j)).collect();
                    let mut accs = Vec::with_capacity(heads.len());
                    for &(l, h) in &heads {
                        let att =
                            read_matrix(&ctx.root, &seq.id, Kind::Attention, l, Some(h), seq.len)?;
                        let con = read_matrix(&ctx.root, &seq.id, kind, l, Some(h), seq.len)?;
                        let mut acc = CorrelationAccumulator::new(l, h, averaging);
                        acc.push_sequence(keep.iter().map(|&j| (att.values.row(j), con.row(j))))?;
                        accs.push(acc);
                    }
                    Ok((accs, (seq.len - keep.len()) * heads.len()))
                },
            )
            .collect::<Vec<_>>()
    })?;
    let mut totals: Vec<CorrelationAccumulator<f64>> = heads
        .iter()
        .map(|&(l, h)| CorrelationAccumulator::new(l, h, averaging))
        .collect();
    let mut n_excluded = 0;
    for (seq, p) in ctx.manifest.sequences.iter().zip(partials) {
        let (accs, excluded) = p.with_context(|| format!("sequence {:?}", seq.id))?;
        for (t, a) in totals.iter_mut().zip(&accs) {
            t.merge(a)?;
        }
        n_excluded += excluded;
    }
    let summaries = totals
        .iter()
        .map(|t| t.finish())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CorrelationResult {
        summaries,
        n_excluded,
    })
}

#[derive(Serialize)]
struct CorrelationReport {
    #[serde(flatten)]
    tool: ToolInfo,
    command: &'static str,
    kind: Kind,
    averaging: Averaging,
    flags: AnalysisFlags,
    n_sequences: usize,
    n_pairs: usize,
    n_skipped: usize,
    n_rows_excluded_special: usize,
    files: Vec<String>,
}

pub fn run(a: &CorrelateArgs) -> anyhow::Result<()> {
    let ctx = Context::open(&a.common)?;
    let averaging = if a.per_sequence_mean {
        Averaging::PerSequence
    } else {
        Averaging::PerToken
    };
    let result = compute(&ctx, a.kind, averaging)?;
    let records: Vec<Vec<String>> = result
        .summaries
        .iter()
        .map(|s| {
            vec![
                s.layer.to_string(),
                s.head.to_string(),
                fmt_opt(s.mean_pearson),
                fmt_opt(s.mean_spearman),
                s.n_pairs.to_string(),
                s.n_skipped.to_string(),
            ]
        })
        .collect();
    let dir = report_dir(&ctx.root)?;
    let stem = format!("correlation_{}", a.kind);
    write_csv(&dir.join(format!("{stem}.csv")), &CSV_HEADER, &records)?;
    let groups: Vec<Vec<f64>> = ctx
        .layers
        .iter()
        .map(|&l| {
            result
                .summaries
                .iter()
                .filter(|s| s.layer == l)
                .filter_map(|s| s.mean_pearson)
                .collect()
        })
        .collect();
    write_text(
        &dir.join(format!("{stem}.svg")),
        &strip_chart(
            &format!("Pearson correlation: attention vs {}", a.kind),
            &ctx.layers,
            &groups,
            "mean Pearson per head",
        ),
    )?;
    let report = CorrelationReport {
        tool: ToolInfo::default(),
        command: "correlate",
        kind: a.kind,
        averaging,
        flags: ctx.flags(),
        n_sequences: ctx.manifest.sequences.len(),
        n_pairs: result.summaries.iter().map(|s| s.n_pairs).sum(),
        n_skipped: result.summaries.iter().map(|s| s.n_skipped).sum(),
        n_rows_excluded_special: result.n_excluded,
        files: vec![format!("{stem}.csv"), format!("{stem}.svg")],
    };
    write_json(&dir.join(format!("{stem}.json")), &report)?;
    log::info!(
        "wrote {} head summaries to {}",
        result.summaries.len(),
        dir.display()
    );
    Ok(())
}
