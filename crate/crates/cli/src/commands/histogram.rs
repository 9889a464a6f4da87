use anyhow::Context as _;
use attnscope_core::analysis::RelPosHistogram;
use attnscope_core::RelPosHistogramF64;
use rayon::prelude::*;
use serde::Serialize;

use super::{AnalysisFlags, Context};
use crate::args::HistogramArgs;
use crate::artifacts::{read_matrix, units};
use crate::kind::Kind;
use crate::report::{fmt_f64, fmt_opt, report_dir, write_csv, write_json, write_text, ToolInfo};
use crate::svg::histogram_grid;

pub const CSV_HEADER: [&str; 7] = [
    "layer",
    "head",
    "offset",
    "weight",
    "count",
    "normalized",
    "display",
];

/// One histogram per `(layer, head)` unit of a kind.
pub struct HistogramSet {
    pub kind: Kind,
    pub units: Vec<(usize, Option<usize>)>,
    pub histograms: Vec<RelPosHistogramF64>,
    /// Rows accumulated per unit, summed over units.
    pub n_rows: usize,
    pub n_excluded: usize,
    pub n_undefined: usize,
}

struct Partial {
    histograms: Vec<RelPosHistogramF64>,
    n_rows: usize,
    n_excluded: usize,
    n_undefined: usize,
}

/// Accumulates every selected unit over every sequence. Sequences are
/// processed in parallel and merged in dataset order.
pub fn accumulate(ctx: &Context, kind: Kind) -> anyhow::Result<HistogramSet> {
    ctx.manifest.require_kind(kind)?;
    let unit_list = units(kind, &ctx.layers, &ctx.heads);
    let max_len = ctx.manifest.flags.max_len;
    let partials = crate::with_pool(ctx.threads, || {
        ctx.manifest
            .sequences
            .par_iter()
            .map(|seq| -> anyhow::Result<Partial> {
                let mut p = Partial {
                    histograms: vec![RelPosHistogram::new(max_len); unit_list.len()],
                    n_rows: 0,
                    n_excluded: 0,
                    n_undefined: 0,
                };
                for (u, &(l, h)) in unit_list.iter().enumerate() {
                    let m = read_matrix(&ctx.root, &seq.id, kind, l, h, seq.len)?;
                    for j in 0..seq.len {
                        if !ctx.keeps(seq, j) {
                            p.n_excluded += 1;
                            continue;
                        }
                        match m.row(j) {
                            Some(row) => {
                                p.histograms[u].add_row(j, row)?;
                                p.n_rows += 1;
                            }
                            None => p.n_undefined += 1,
                        }
                    }
                }
                Ok(p)
            })
            .collect::<Vec<_>>()
    })?;
    let mut set = HistogramSet {
        kind,
        histograms: vec![RelPosHistogram::new(max_len); unit_list.len()],
        units: unit_list,
        n_rows: 0,
        n_excluded: 0,
        n_undefined: 0,
    };
    for (seq, p) in ctx.manifest.sequences.iter().zip(partials) {
        let p = p.with_context(|| format!("sequence {:?}", seq.id))?;
        for (acc, h) in set.histograms.iter_mut().zip(&p.histograms) {
            acc.merge(h)?;
        }
        set.n_rows += p.n_rows;
        set.n_excluded += p.n_excluded;
        set.n_undefined += p.n_undefined;
    }
    Ok(set)
}

fn head_field(h: Option<usize>) -> String {
    h.map(|h| h.to_string()).unwrap_or_default()
}

pub fn csv_records(set: &HistogramSet) -> Vec<Vec<String>> {
    let mut records = Vec::new();
    for (&(l, h), hist) in set.units.iter().zip(&set.histograms) {
        let norm = hist.normalized();
        let disp = hist.display();
        for (i, x) in hist.offsets().enumerate() {
            records.push(vec![
                l.to_string(),
                head_field(h),
                x.to_string(),
                fmt_f64(hist.weights()[i]),
                hist.counts()[i].to_string(),
                fmt_opt(norm[i]),
                fmt_opt(disp[i]),
            ]);
        }
    }
    records
}

#[derive(Serialize)]
struct HistogramReport {
    #[serde(flatten)]
    tool: ToolInfo,
    command: &'static str,
    kind: Kind,
    flags: AnalysisFlags,
    n_sequences: usize,
    n_rows: usize,
    n_rows_excluded_special: usize,
    n_rows_undefined: usize,
    files: Vec<String>,
}

pub fn run(a: &HistogramArgs) -> anyhow::Result<()> {
    let ctx = Context::open(&a.common)?;
    let set = accumulate(&ctx, a.kind)?;
    let dir = report_dir(&ctx.root)?;
    let stem = format!("histogram_{}", a.kind);
    let mut files = vec![format!("{stem}.csv")];
    write_csv(&dir.join(&files[0]), &CSV_HEADER, &csv_records(&set))?;
    let offsets: Vec<i64> = RelPosHistogramF64::new(ctx.manifest.flags.max_len)
        .offsets()
        .collect();
    for &l in &ctx.layers {
        let panels: Vec<(String, Vec<Option<f64>>)> = set
            .units
            .iter()
            .zip(&set.histograms)
            .filter(|((ul, _), _)| *ul == l)
            .map(|((_, h), hist)| {
                let label = h
                    .map(|h| format!("head {h}"))
                    .unwrap_or_else(|| format!("layer {l}"));
                (label, hist.display())
            })
            .collect();
        let name = format!("{stem}_l{l}.svg");
        write_text(
            &dir.join(&name),
            &histogram_grid(
                &format!("{} histograms, layer {l}", a.kind),
                &offsets,
                &panels,
            ),
        )?;
        files.push(name);
    }
    let report = HistogramReport {
        tool: ToolInfo::default(),
        command: "histogram",
        kind: a.kind,
        flags: ctx.flags(),
        n_sequences: ctx.manifest.sequences.len(),
        n_rows: set.n_rows,
        n_rows_excluded_special: set.n_excluded,
        n_rows_undefined: set.n_undefined,
        files,
    };
    write_json(&dir.join(format!("{stem}.json")), &report)?;
    log::info!(
        "wrote {} histograms to {}",
        set.histograms.len(),
        dir.display()
    );
    Ok(())
}
