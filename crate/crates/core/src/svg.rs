//! Minimal SVG emitters: line charts and circle panels.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, xr: (f64, f64), yr: (f64, f64), xlabel: &str, ylabel: &str) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 1.5);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let px = x0 + f * (x1 - x0);
        let py = y0 - f * (y0 - y1);
        let _ = writeln!(out, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{:.4}</text>"#, y0 + 16.0, xr.0 + f * (xr.1 - xr.0));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{py:.1}" text-anchor="end">{:.4}</text>"#, x0 - 4.0, yr.0 + f * (yr.1 - yr.0));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 18.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn project(v: f64, range: (f64, f64), lo: f64, hi: f64) -> f64 {
    lo + (v - range.0) / (range.1 - range.0) * (hi - lo)
}

/// Line chart of one or more series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let xr = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, xr, yr, xlabel, ylabel);
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    project(x, xr, MARGIN, WIDTH - MARGIN / 2.0),
                    project(y, yr, HEIGHT - MARGIN, MARGIN / 1.5)
                )
            })
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#, pts.join(" "));
        let ly = MARGIN + 16.0 * k as f64;
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/>"#, WIDTH - 200.0, WIDTH - 175.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, WIDTH - 170.0, ly + 4.0, escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

/// One panel of circles `(cx, cy, r)`.
#[derive(Debug, Clone)]
pub struct CirclePanel {
    pub title: String,
    pub circles: Vec<(f64, f64, f64)>,
}

/// Panels side by side sharing one coordinate frame.
pub fn circle_panels(title: &str, panels: &[CirclePanel]) -> String {
    let all = panels.iter().flat_map(|p| p.circles.iter());
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, r) in all {
        lo_x = lo_x.min(x - r);
        hi_x = hi_x.max(x + r);
        lo_y = lo_y.min(y - r);
        hi_y = hi_y.max(y + r);
    }
    if !lo_x.is_finite() {
        (lo_x, hi_x, lo_y, hi_y) = (-1.0, 1.0, -1.0, 1.0);
    }
    let side = (hi_x - lo_x).max(hi_y - lo_y).max(1e-6) * 1.1;
    let (cx, cy) = ((lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0);
    let panel = 260.0;
    let width = panel * panels.len().max(1) as f64 + 40.0;
    let height = panel + 80.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, width / 2.0, escape(title));
    for (k, p) in panels.iter().enumerate() {
        let ox = 20.0 + panel * k as f64;
        let oy = 50.0;
        let scale = (panel - 20.0) / side;
        let _ = writeln!(out, r#"<rect x="{:.1}" y="{oy}" width="{:.1}" height="{:.1}" fill="none" stroke="gray"/>"#, ox + 10.0, panel - 20.0, panel - 20.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, ox + panel / 2.0, oy + panel, escape(&p.title));
        for (i, &(x, y, r)) in p.circles.iter().enumerate() {
            let px = ox + 10.0 + (x - cx + side / 2.0) * scale;
            let py = oy + (panel - 20.0) - (y - cy + side / 2.0) * scale;
            let color = if i == 0 { COLORS[1] } else { COLORS[0] };
            let _ = writeln!(
                out,
                r#"<circle cx="{px:.2}" cy="{py:.2}" r="{:.2}" fill="{color}" fill-opacity="0.15" stroke="{color}"/>"#,
                (r * scale).max(1.0)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_has_one_polyline_per_series() {
        let s = |name: &str| Series { name: name.into(), points: vec![(0.0, 1.0), (1.0, 0.5)], dashed: false };
        let svg = line_chart("t", "x", "y", &[s("a"), s("b<")]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn circle_panels_draw_every_circle() {
        let panels = vec![
            CirclePanel { title: "n=1".into(), circles: vec![(0.0, 0.0, 1.0)] },
            CirclePanel { title: "n=2".into(), circles: vec![(0.0, 0.0, 1.0), (1.0, 1.0, 0.5)] },
        ];
        assert_eq!(circle_panels("f", &panels).matches("<circle").count(), 3);
    }
}
