//! Dependency-free SVG figures. Coordinates are printed with fixed
//! precision so output is byte-stable.

use std::fmt::Write;

use attnscope_core::TensorF64;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];
const FONT: &str = "font-family=\"sans-serif\"";

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn n(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

struct Doc {
    buf: String,
}

impl Doc {
    fn new(w: f64, h: f64) -> Self {
        let mut buf = String::new();
        let _ = writeln!(
            buf,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">",
            n(w),
            n(h),
            n(w),
            n(h)
        );
        let _ = writeln!(
            buf,
            "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>",
            n(w),
            n(h)
        );
        Self { buf }
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.buf,
            "<text x=\"{}\" y=\"{}\" font-size=\"{}\" text-anchor=\"{anchor}\" {FONT}>{}</text>",
            n(x),
            n(y),
            n(size),
            escape(s)
        );
    }

    fn rotated_text(&mut self, x: f64, y: f64, size: f64, s: &str) {
        let _ = writeln!(
            self.buf,
            "<text x=\"{}\" y=\"{}\" font-size=\"{}\" text-anchor=\"start\" transform=\"rotate(-60 {} {})\" {FONT}>{}</text>",
            n(x),
            n(y),
            n(size),
            n(x),
            n(y),
            escape(s)
        );
    }

    fn vertical_text(&mut self, x: f64, y: f64, size: f64, s: &str) {
        let _ = writeln!(
            self.buf,
            "<text x=\"{}\" y=\"{}\" font-size=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 {} {})\" {FONT}>{}</text>",
            n(x),
            n(y),
            n(size),
            n(x),
            n(y),
            escape(s)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.buf,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"{}\"/>",
            n(x1),
            n(y1),
            n(x2),
            n(y2),
            n(width)
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: Option<&str>) {
        let stroke = stroke
            .map(|s| format!(" stroke=\"{s}\" stroke-width=\"0.5\""))
            .unwrap_or_default();
        let _ = writeln!(
            self.buf,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\"{stroke}/>",
            n(x),
            n(y),
            n(w),
            n(h)
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.buf,
            "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"{fill}\" fill-opacity=\"0.7\"/>",
            n(x),
            n(y),
            n(r)
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let p: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{},{}", n(x), n(y)))
            .collect();
        let _ = writeln!(
            self.buf,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"/>",
            p.join(" ")
        );
    }

    fn finish(mut self) -> String {
        self.buf.push_str("</svg>\n");
        self.buf
    }
}

/// Maps `v` in `[lo, hi]` onto `[a, b]`.
fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi == lo {
        (a + b) / 2.0
    } else {
        a + (v - lo) / (hi - lo) * (b - a)
    }
}

/// One bar panel per head over relative offsets; values are expected in
/// `[0, 1]` and missing bins are left empty.
pub fn histogram_grid(
    title: &str,
    offsets: &[i64],
    panels: &[(String, Vec<Option<f64>>)],
) -> String {
    let (pw, ph, margin) = (260.0, 150.0, 36.0);
    let cols = panels.len().clamp(1, 4);
    let rows = panels.len().div_ceil(cols).max(1);
    let w = cols as f64 * (pw + margin) + margin;
    let h = rows as f64 * (ph + margin + 14.0) + 40.0;
    let mut d = Doc::new(w, h);
    d.text(w / 2.0, 22.0, 14.0, "middle", title);
    let (lo, hi) = match (offsets.first(), offsets.last()) {
        (Some(&a), Some(&b)) => (a as f64 - 0.5, b as f64 + 0.5),
        _ => (-0.5, 0.5),
    };
    for (idx, (label, values)) in panels.iter().enumerate() {
        let x0 = margin + (idx % cols) as f64 * (pw + margin);
        let y0 = 40.0 + (idx / cols) as f64 * (ph + margin + 14.0) + 14.0;
        d.text(x0 + pw / 2.0, y0 - 4.0, 11.0, "middle", label);
        d.rect(x0, y0, pw, ph, "none", Some("#888"));
        let bw = pw / offsets.len().max(1) as f64;
        for (&x, v) in offsets.iter().zip(values) {
            if let Some(v) = *v {
                let bh = v.clamp(0.0, 1.0) * ph;
                d.rect(
                    scale(x as f64, lo, hi, x0, x0 + pw) - bw / 2.0,
                    y0 + ph - bh,
                    bw,
                    bh,
                    PALETTE[0],
                    None,
                );
            }
        }
        for tick in [offsets.first().copied(), Some(0), offsets.last().copied()]
            .into_iter()
            .flatten()
        {
            let tx = scale(tick as f64, lo, hi, x0, x0 + pw);
            d.line(tx, y0 + ph, tx, y0 + ph + 4.0, "#444", 1.0);
            d.text(tx, y0 + ph + 14.0, 9.0, "middle", &tick.to_string());
        }
        for (ty, t) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
            let yy = y0 + ph - ty * ph;
            d.line(x0 - 4.0, yy, x0, yy, "#444", 1.0);
            d.text(x0 - 6.0, yy + 3.0, 9.0, "end", t);
        }
    }
    d.finish()
}

fn legend(d: &mut Doc, x: f64, y: f64, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let yy = y + i as f64 * 16.0;
        d.rect(x, yy - 8.0, 10.0, 10.0, PALETTE[i % PALETTE.len()], None);
        d.text(x + 14.0, yy, 11.0, "start", name);
    }
}

/// Plot area: left, top, width, height.
type Area = (f64, f64, f64, f64);

fn plot_frame(d: &mut Doc, (x0, y0, pw, ph): Area, (y_lo, y_hi): (f64, f64), y_label: &str) {
    d.rect(x0, y0, pw, ph, "none", Some("#888"));
    for i in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let yy = scale(v, y_lo, y_hi, y0 + ph, y0);
        d.line(x0 - 4.0, yy, x0, yy, "#444", 1.0);
        d.text(x0 - 6.0, yy + 3.0, 10.0, "end", &format!("{v:.2}"));
    }
    if y_lo < 0.0 && y_hi > 0.0 {
        let yy = scale(0.0, y_lo, y_hi, y0 + ph, y0);
        d.line(x0, yy, x0 + pw, yy, "#bbb", 1.0);
    }
    d.vertical_text(18.0, y0 + ph / 2.0, 11.0, y_label);
}

/// Series over layers; `None` values break the line.
pub fn line_chart(
    title: &str,
    layers: &[usize],
    series: &[(String, Vec<Option<f64>>)],
    y_label: &str,
) -> String {
    let (x0, y0, pw, ph) = (70.0, 40.0, 440.0, 260.0);
    let mut d = Doc::new(x0 + pw + 180.0, y0 + ph + 50.0);
    d.text((x0 + pw) / 2.0 + 35.0, 22.0, 14.0, "middle", title);
    let vals: Vec<f64> = series
        .iter()
        .flat_map(|(_, v)| v.iter().flatten().copied())
        .collect();
    let mut y_lo = vals.iter().copied().fold(0.0, f64::min);
    let mut y_hi = vals.iter().copied().fold(0.0, f64::max);
    let pad = ((y_hi - y_lo) * 0.1).max(0.05);
    y_lo -= pad;
    y_hi += pad;
    plot_frame(&mut d, (x0, y0, pw, ph), (y_lo, y_hi), y_label);
    let (lo, hi) = (
        *layers.first().unwrap_or(&1) as f64 - 0.5,
        *layers.last().unwrap_or(&1) as f64 + 0.5,
    );
    for &l in layers {
        let xx = scale(l as f64, lo, hi, x0, x0 + pw);
        d.text(xx, y0 + ph + 16.0, 10.0, "middle", &l.to_string());
    }
    d.text(x0 + pw / 2.0, y0 + ph + 34.0, 11.0, "middle", "layer");
    for (si, (_, values)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut run = Vec::new();
        for (&l, v) in layers.iter().zip(values) {
            match v {
                Some(v) => {
                    let p = (
                        scale(l as f64, lo, hi, x0, x0 + pw),
                        scale(*v, y_lo, y_hi, y0 + ph, y0),
                    );
                    d.circle(p.0, p.1, 3.0, color);
                    run.push(p);
                }
                None => {
                    if run.len() > 1 {
                        d.polyline(&run, color);
                    }
                    run.clear();
                }
            }
        }
        if run.len() > 1 {
            d.polyline(&run, color);
        }
    }
    let names: Vec<&str> = series.iter().map(|(s, _)| s.as_str()).collect();
    legend(&mut d, x0 + pw + 16.0, y0 + 10.0, &names);
    d.finish()
}

/// Per-layer strip of head values on `[-1, 1]` with a median tick.
pub fn strip_chart(title: &str, layers: &[usize], groups: &[Vec<f64>], y_label: &str) -> String {
    let (x0, y0, pw, ph) = (70.0, 40.0, (40.0 * layers.len() as f64).max(360.0), 260.0);
    let mut d = Doc::new(x0 + pw + 30.0, y0 + ph + 50.0);
    d.text((x0 + pw) / 2.0 + 35.0, 22.0, 14.0, "middle", title);
    plot_frame(&mut d, (x0, y0, pw, ph), (-1.0, 1.0), y_label);
    let slot = pw / layers.len().max(1) as f64;
    for (i, (&l, vals)) in layers.iter().zip(groups).enumerate() {
        let cx = x0 + slot * (i as f64 + 0.5);
        d.text(cx, y0 + ph + 16.0, 10.0, "middle", &l.to_string());
        for (k, &v) in vals.iter().enumerate() {
            // Deterministic horizontal spread of the points.
            let jitter = ((k * 7) % 11) as f64 / 10.0 - 0.5;
            d.circle(
                cx + jitter * slot * 0.5,
                scale(v, -1.0, 1.0, y0 + ph, y0),
                2.5,
                PALETTE[0],
            );
        }
        if let Some(m) = median(vals) {
            let yy = scale(m, -1.0, 1.0, y0 + ph, y0);
            d.line(cx - slot * 0.35, yy, cx + slot * 0.35, yy, PALETTE[1], 2.0);
        }
    }
    d.text(x0 + pw / 2.0, y0 + ph + 34.0, 11.0, "middle", "layer");
    d.finish()
}

pub fn median(vals: &[f64]) -> Option<f64> {
    let mut v = vals.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    match k {
        0 => None,
        _ if k % 2 == 1 => Some(v[k / 2]),
        _ => Some((v[k / 2 - 1] + v[k / 2]) / 2.0),
    }
}

/// White to dark blue.
fn color(t: f64) -> String {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(255.0, 8.0),
        mix(255.0, 48.0),
        mix(255.0, 107.0)
    )
}

/// Two square heatmaps stacked vertically with shared token labels. Each
/// map is scaled to its own maximum unless `shared_scale` is set.
pub fn heatmap_pair(
    title: &str,
    labels: &[String],
    maps: [(&str, &TensorF64); 2],
    shared_scale: bool,
) -> String {
    let len = labels.len();
    let cell = (480.0 / len.max(1) as f64).clamp(6.0, 24.0);
    let label_w = 90.0;
    let side = cell * len as f64;
    let panel_h = side + 110.0;
    let w = label_w + side + 40.0;
    let mut d = Doc::new(w.max(360.0), 40.0 + 2.0 * panel_h);
    d.text(w.max(360.0) / 2.0, 22.0, 14.0, "middle", title);
    let max_of = |t: &TensorF64| {
        t.data()
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
    };
    let shared = maps.iter().map(|(_, t)| max_of(t)).fold(0.0, f64::max);
    for (p, (name, t)) in maps.iter().enumerate() {
        let top = 40.0 + p as f64 * panel_h;
        let max = if shared_scale { shared } else { max_of(t) };
        let scale_note = if shared_scale {
            "shared scale"
        } else {
            "own scale"
        };
        d.text(
            label_w,
            top + 12.0,
            12.0,
            "start",
            &format!("{name} ({scale_note}, max {max:.4})"),
        );
        let y0 = top + 80.0;
        for (k, lab) in labels.iter().enumerate() {
            d.rotated_text(label_w + (k as f64 + 0.5) * cell, y0 - 4.0, 9.0, lab);
            d.text(label_w - 4.0, y0 + (k as f64 + 0.7) * cell, 9.0, "end", lab);
        }
        for j in 0..len {
            for i in 0..len {
                let v = t.get(j, i);
                let fill = if max > 0.0 {
                    color(v / max)
                } else {
                    color(0.0)
                };
                d.rect(
                    label_w + i as f64 * cell,
                    y0 + j as f64 * cell,
                    cell,
                    cell,
                    &fill,
                    None,
                );
            }
        }
        d.rect(label_w, y0, side, side, "none", Some("#888"));
    }
    d.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("<a&b>"), "&lt;a&amp;b&gt;");
    }

    #[test]
    fn negative_zero_prints_as_zero() {
        assert_eq!(n(-0.0001), "0.00");
    }

    #[test]
    fn heatmap_is_well_formed() {
        let t = TensorF64::identity(2);
        let s = heatmap_pair(
            "x",
            &["[CLS]".into(), "a".into()],
            [("attention", &t), ("input", &t)],
            false,
        );
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("[CLS]"));
        assert_eq!(s.matches("fill=\"#08306b\"").count(), 4);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[1.0, 2.0]), Some(1.5));
        assert_eq!(median(&[]), None);
    }
}
