use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use chrono::NaiveDateTime;
use pedflow::ingest::TIMESTAMP_FORMAT;

#[derive(Debug, Clone, Copy)]
pub struct PlotPoint {
    pub timestamp: NaiveDateTime,
    pub truth: f64,
    pub prediction: f64,
}

pub fn write_plot_csv(path: &Path, points: &[PlotPoint]) -> Result<()> {
    let mut out = String::from("timestamp,truth,prediction\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.timestamp.format(TIMESTAMP_FORMAT), p.truth, p.prediction);
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

/// Line chart of truth (blue) against prediction (red).
pub fn render_svg(title: &str, points: &[PlotPoint]) -> String {
    let values = points.iter().flat_map(|p| [p.truth, p.prediction]).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo.min(0.0), hi) } else { (0.0, 1.0) };
    let n = points.len().max(2) - 1;
    let x = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / n as f64;
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let polyline = |get: fn(&PlotPoint) -> f64, colour: &str| {
        let mut pts = String::new();
        for (i, p) in points.iter().enumerate() {
            let v = get(p);
            if v.is_finite() {
                let _ = write!(pts, "{:.2},{:.2} ", x(i), y(v));
            }
        }
        format!(
            "  <polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.2\" points=\"{}\"/>\n",
            pts.trim_end()
        )
    };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    );
    svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = writeln!(
        svg,
        "  <text x=\"{MARGIN}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
        MARGIN / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{MARGIN}\" y1=\"{b:.2}\" x2=\"{r:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>\n  <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{b:.2}\" stroke=\"black\"/>",
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
    );
    for (v, anchor) in [(lo, HEIGHT - MARGIN), (hi, MARGIN)] {
        let _ = writeln!(
            svg,
            "  <text x=\"{:.0}\" y=\"{anchor:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.0}</text>",
            MARGIN - 4.0
        );
    }
    if let (Some(first), Some(last)) = (points.first(), points.last()) {
        for (ts, px, anchor) in [(first.timestamp, MARGIN, "start"), (last.timestamp, WIDTH - MARGIN, "end")] {
            let _ = writeln!(
                svg,
                "  <text x=\"{px:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{}</text>",
                HEIGHT - MARGIN + 16.0,
                ts.format("%Y-%m-%d %H:%M")
            );
        }
    }
    svg.push_str(&polyline(|p| p.truth, "blue"));
    svg.push_str(&polyline(|p| p.prediction, "red"));
    let _ = writeln!(
        svg,
        "  <text x=\"{r:.0}\" y=\"{t:.0}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\"><tspan fill=\"blue\">truth</tspan> <tspan fill=\"red\">1 h ahead</tspan></text>",
        r = WIDTH - MARGIN,
        t = MARGIN / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

pub fn write_plot_svg(path: &Path, title: &str, points: &[PlotPoint]) -> Result<()> {
    std::fs::write(path, render_svg(title, points)).with_context(|| format!("writing {}", path.display()))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
