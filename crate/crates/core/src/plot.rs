//! Standalone SVG charts: a per-method scatter of experiment rows and a line
//! chart for MIA ratio sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::{write_file, ExperimentReport, ExperimentRow};
use crate::mia::{Channel, MiaReport};

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub const METRICS: [&str; 8] = ["iom", "uom", "iou", "kl", "ta", "ua", "sparsity", "wall_time_s"];

/// Rows named like this are references, not plotted methods.
const REFERENCE_METHODS: [&str; 2] = ["oracle", "original"];

pub fn row_metric(row: &ExperimentRow, name: &str) -> Result<Option<f64>> {
    Ok(match name {
        "iom" => row.iom,
        "uom" => row.uom,
        "iou" => row.iou,
        "kl" => row.kl,
        "ta" => row.ta,
        "ua" => row.ua,
        "sparsity" => Some(row.sparsity),
        "wall_time_s" => row.wall_time_s,
        other => {
            return Err(Error::Config(format!("unknown metric '{other}', expected one of {}", METRICS.join(", "))));
        }
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for &(px, py) in points {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        let pad = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        Self { x: pad(x), y: pad(y) }
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + (v - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, svg: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
        let _ = writeln!(svg, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, (x0 + x1) / 2.0, escape(title));
        let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
        let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (vx, vy) = (self.x.0 + f * (self.x.1 - self.x.0), self.y.0 + f * (self.y.1 - self.y.0));
            let (tx, ty) = (self.px(vx), self.py(vy));
            let _ = writeln!(svg, r#"<line x1="{tx:.2}" y1="{y0}" x2="{tx:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 5.0);
            let _ = writeln!(svg, r#"<text x="{tx:.2}" y="{:.2}" text-anchor="middle" font-size="11">{vx:.3}</text>"#, y0 + 18.0);
            let _ = writeln!(svg, r#"<line x1="{:.2}" y1="{ty:.2}" x2="{x0}" y2="{ty:.2}" stroke="black"/>"#, x0 - 5.0);
            let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">{vy:.3}</text>"#, x0 - 8.0, ty + 4.0);
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, (x0 + x1) / 2.0, H - 18.0, escape(x_label));
        let _ = writeln!(
            svg,
            r#"<text x="18" y="{0}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {0})">{1}</text>"#,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }
}

fn legend_entry(svg: &mut String, i: usize, color: &str, label: &str) {
    let y = TOP + 10.0 + 20.0 * i as f64;
    let x = W - RIGHT + 20.0;
    let _ = writeln!(svg, r#"<rect x="{x}" y="{:.1}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{y:.1}" font-size="12">{}</text>"#, x + 18.0, escape(label));
}

fn open_svg() -> String {
    format!("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n")
}

/// One point per (method, seed) row, coloured by method, plus a single oracle
/// marker at the mean of the oracle rows. Rows with errors or missing values
/// are skipped.
pub fn scatter_svg(report: &ExperimentReport, x_metric: &str, y_metric: &str) -> Result<String> {
    for m in [x_metric, y_metric] {
        if !METRICS.contains(&m) {
            return Err(Error::Config(format!("unknown metric '{m}', expected one of {}", METRICS.join(", "))));
        }
    }
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    let mut oracle = Vec::new();
    for row in report.rows.iter().filter(|r| r.error.is_none()) {
        let (Some(x), Some(y)) = (row_metric(row, x_metric)?, row_metric(row, y_metric)?) else { continue };
        match row.method.as_str() {
            "oracle" => oracle.push((x, y)),
            m if REFERENCE_METHODS.contains(&m) => {}
            m => groups.entry(m).or_default().push((x, y)),
        }
    }
    let oracle_mean = (!oracle.is_empty()).then(|| {
        let k = oracle.len() as f64;
        (oracle.iter().map(|p| p.0).sum::<f64>() / k, oracle.iter().map(|p| p.1).sum::<f64>() / k)
    });
    let frame = Frame::fit(groups.values().flatten().chain(oracle_mean.iter()));
    let mut svg = open_svg();
    frame.axes(&mut svg, &format!("{y_metric} vs {x_metric}"), x_metric, y_metric);
    for (i, (method, pts)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for &(x, y) in pts {
            let _ = writeln!(
                svg,
                r#"<circle class="point" data-method="{}" cx="{:.2}" cy="{:.2}" r="4" fill="{color}" fill-opacity="0.8"/>"#,
                escape(method),
                frame.px(x),
                frame.py(y)
            );
        }
        legend_entry(&mut svg, i, color, method);
    }
    if let Some((x, y)) = oracle_mean {
        let (cx, cy) = (frame.px(x), frame.py(y));
        let _ = writeln!(
            svg,
            r#"<path class="oracle" d="M {cx:.2} {:.2} L {:.2} {cy:.2} L {cx:.2} {:.2} L {:.2} {cy:.2} Z" fill="black"/>"#,
            cy - 7.0,
            cx + 7.0,
            cy + 7.0,
            cx - 7.0
        );
        legend_entry(&mut svg, groups.len(), "black", "oracle");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_scatter(report: &ExperimentReport, x_metric: &str, y_metric: &str, path: &Path) -> Result<()> {
    write_file(path, scatter_svg(report, x_metric, y_metric)?.as_bytes())
}

/// Line chart of named `(x, y)` series.
pub fn line_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|(_, p)| p.iter()));
    let mut svg = open_svg();
    frame.axes(&mut svg, title, x_label, y_label);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        legend_entry(&mut svg, i, color, name);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Score vs ratio for each attack channel.
pub fn mia_sweep_svg(reports: &[MiaReport]) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = Channel::ALL
        .iter()
        .map(|&c| (c.as_str().to_string(), reports.iter().map(|r| (r.ratio, r.scores.get(c))).collect()))
        .collect();
    line_svg("MIA score vs member/non-member ratio", "ratio", "score", &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, method: &str, iom: f64, ua: f64) -> ExperimentRow {
        ExperimentRow {
            seed,
            method: method.into(),
            sparsity: 0.6,
            iom: Some(iom),
            uom: Some(iom + 0.1),
            iou: Some(0.9),
            kl: Some(0.01),
            ta: Some(0.9),
            ua: Some(ua),
            wall_time_s: Some(0.1),
            achieved_sparsity: Some(0.6),
            kl_floored: false,
            vs_original: None,
            trace: None,
            error: None,
        }
    }

    fn parse(svg: &str) -> roxmltree::Document<'_> {
        roxmltree::Document::parse(svg).expect("well-formed SVG")
    }

    fn count(doc: &roxmltree::Document<'_>, class: &str) -> usize {
        doc.descendants().filter(|n| n.attribute("class") == Some(class)).count()
    }

    #[test]
    fn fifteen_points_and_one_oracle_marker() {
        let mut rows = Vec::new();
        for seed in 0..5 {
            for (k, m) in ["gradient_ascent", "finetune", "fisher_forgetting"].iter().enumerate() {
                rows.push(row(seed, m, 0.3 + 0.01 * seed as f64 + 0.02 * k as f64, 0.9));
            }
            rows.push(row(seed, "oracle", 0.4, 0.85));
            rows.push(row(seed, "original", 0.35, 0.95));
        }
        let svg = scatter_svg(&ExperimentReport { rows }, "iom", "ua").unwrap();
        let doc = parse(&svg);
        assert_eq!(count(&doc, "point"), 15);
        assert_eq!(count(&doc, "oracle"), 1);
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }

    #[test]
    fn empty_report_still_draws_axes() {
        let svg = scatter_svg(&ExperimentReport::default(), "iou", "ua").unwrap();
        let doc = parse(&svg);
        assert_eq!(count(&doc, "point"), 0);
        assert!(doc.descendants().any(|n| n.has_tag_name("line")));
    }

    #[test]
    fn unknown_metric_is_a_config_error() {
        let r = ExperimentReport { rows: vec![row(0, "finetune", 0.3, 0.9)] };
        assert!(matches!(scatter_svg(&r, "accuracy", "ua"), Err(Error::Config(_))));
        assert!(matches!(scatter_svg(&ExperimentReport::default(), "iom", "nope"), Err(Error::Config(_))));
    }

    #[test]
    fn method_names_are_escaped() {
        let r = ExperimentReport { rows: vec![row(0, "a<b&c", 0.3, 0.9)] };
        parse(&scatter_svg(&r, "iom", "ua").unwrap());
    }

    #[test]
    fn sweep_chart_has_one_line_per_channel() {
        let reports: Vec<MiaReport> = [0.8, 1.0, 1.2]
            .iter()
            .map(|&ratio| MiaReport {
                ratio,
                scores: Default::default(),
                balanced: Default::default(),
                n_member: 1,
                n_nonmember: 1,
                resampled: false,
            })
            .collect();
        let svg = mia_sweep_svg(&reports);
        assert_eq!(count(&parse(&svg), "series"), 5);
    }
}
