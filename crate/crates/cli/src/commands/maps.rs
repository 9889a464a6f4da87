use anyhow::bail;

use crate::args::MapsArgs;
use crate::artifacts::{read_matrix, ExtractManifest};
use crate::kind::Kind;
use crate::report::{report_dir, write_text};
use crate::svg::heatmap_pair;

/// Renders the attention and input-contribution maps of one head; returns
/// the SVG file name inside the report directory.
pub fn render(a: &MapsArgs) -> anyhow::Result<String> {
    let manifest = ExtractManifest::load(&a.out)?;
    let seq = manifest.sequence(&a.seq_id)?;
    if !manifest.flags.layers.contains(&a.layer) || !manifest.flags.heads.contains(&a.head) {
        bail!("layer {} head {} was not extracted", a.layer, a.head);
    }
    manifest.require_kind(Kind::Attention)?;
    manifest.require_kind(Kind::InputContribution)?;
    let att = read_matrix(
        &a.out,
        &seq.id,
        Kind::Attention,
        a.layer,
        Some(a.head),
        seq.len,
    )?;
    let con = read_matrix(
        &a.out,
        &seq.id,
        Kind::InputContribution,
        a.layer,
        Some(a.head),
        seq.len,
    )?;
    let labels: Vec<String> = (0..seq.len).map(|i| seq.label(i)).collect();
    let svg = heatmap_pair(
        &format!("{}: layer {}, head {}", seq.id, a.layer, a.head),
        &labels,
        [
            ("attention", &att.values),
            ("input contribution", &con.values),
        ],
        a.shared_scale,
    );
    let name = format!("maps_{}_l{}_h{}.svg", seq.id, a.layer, a.head);
    write_text(&report_dir(&a.out)?.join(&name), &svg)?;
    Ok(name)
}

pub fn run(a: &MapsArgs) -> anyhow::Result<()> {
    let name = render(a)?;
    log::info!("wrote {name}");
    Ok(())
}
