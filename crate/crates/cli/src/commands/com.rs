use attnscope_core::analysis::{center_of_mass, layer_center_of_mass};
use serde::Serialize;

use super::histogram::accumulate;
use super::{AnalysisFlags, Context};
use crate::args::ComArgs;
use crate::kind::Kind;
use crate::report::{fmt_opt, report_dir, write_csv, write_json, write_text, ToolInfo};
use crate::svg::line_chart;

pub const CSV_HEADER: [&str; 4] = ["kind", "layer", "head", "center_of_mass"];

/// Per-unit centers of mass and their per-layer means for one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ComSeries {
    pub kind: Kind,
    pub per_unit: Vec<(usize, Option<usize>, Option<f64>)>,
    pub per_layer: Vec<(usize, Option<f64>)>,
}

pub fn compute(ctx: &Context, kind: Kind) -> anyhow::Result<ComSeries> {
    let set = accumulate(ctx, kind)?;
    let per_unit: Vec<_> = set
        .units
        .iter()
        .zip(&set.histograms)
        .map(|(&(l, h), hist)| (l, h, center_of_mass(hist)))
        .collect();
    let per_layer = ctx
        .layers
        .iter()
        .map(|&l| {
            let heads: Option<Vec<f64>> =
                per_unit.iter().filter(|u| u.0 == l).map(|u| u.2).collect();
            (l, heads.and_then(|v| layer_center_of_mass(&v)))
        })
        .collect();
    Ok(ComSeries {
        kind,
        per_unit,
        per_layer,
    })
}

#[derive(Serialize)]
struct ComReport {
    #[serde(flatten)]
    tool: ToolInfo,
    command: &'static str,
    kinds: Vec<Kind>,
    flags: AnalysisFlags,
    n_sequences: usize,
    files: Vec<String>,
}

pub fn run(a: &ComArgs) -> anyhow::Result<()> {
    let ctx = Context::open(&a.common)?;
    let mut kinds = a.kind.clone();
    kinds.sort_unstable();
    kinds.dedup();
    let series = kinds
        .iter()
        .map(|&k| compute(&ctx, k))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for s in &series {
        for &(l, h, cm) in &s.per_unit {
            if let Some(h) = h {
                records.push(vec![
                    s.kind.to_string(),
                    l.to_string(),
                    h.to_string(),
                    fmt_opt(cm),
                ]);
            }
        }
        for &(l, cm) in &s.per_layer {
            records.push(vec![
                s.kind.to_string(),
                l.to_string(),
                "mean".into(),
                fmt_opt(cm),
            ]);
        }
    }
    let dir = report_dir(&ctx.root)?;
    write_csv(&dir.join("com.csv"), &CSV_HEADER, &records)?;
    let chart: Vec<(String, Vec<Option<f64>>)> = series
        .iter()
        .map(|s| {
            (
                s.kind.to_string(),
                s.per_layer.iter().map(|p| p.1).collect(),
            )
        })
        .collect();
    write_text(
        &dir.join("com.svg"),
        &line_chart(
            "Mean center of mass per layer",
            &ctx.layers,
            &chart,
            "center of mass",
        ),
    )?;
    let report = ComReport {
        tool: ToolInfo::default(),
        command: "com",
        kinds,
        flags: ctx.flags(),
        n_sequences: ctx.manifest.sequences.len(),
        files: vec!["com.csv".into(), "com.svg".into()],
    };
    write_json(&dir.join("com.json"), &report)?;
    log::info!("wrote centers of mass to {}", dir.display());
    Ok(())
}
