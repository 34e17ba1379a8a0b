//! Static SVG line chart of proxy CER against α.

use std::fmt::Write as _;

use super::eval::{parse_metrics, MetricsRow};
use super::Result;

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Render parsed rows; one series per `run_id`, in first-seen order, points
/// sorted by α. A single-point series draws a marker only.
pub fn render(rows: &[MetricsRow]) -> String {
    let (x0, x1) = span(rows.iter().map(|r| r.alpha));
    let y1 = rows.iter().map(|r| r.proxy_cer).fold(0.0, f64::max);
    let (y0, y1) = (0.0, if y1 > 0.0 { y1 * 1.1 } else { 1.0 });
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (bx, by) = (H - BOTTOM, LEFT);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{bx}" x2="{}" y2="{bx}" stroke="black"/>"#, W - RIGHT);
    let _ = writeln!(s, r#"<line x1="{by}" y1="{TOP}" x2="{by}" y2="{bx}" stroke="black"/>"#);
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (x, y) = (px(xv), py(yv));
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{bx}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, bx + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{xv:.2}</text>"#, bx + 17.0);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{yv:.3}</text>"#, LEFT - 7.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">alpha</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">proxy_CER</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0
    );

    let mut ids: Vec<&str> = Vec::new();
    for r in rows {
        if !ids.contains(&r.run_id.as_str()) {
            ids.push(&r.run_id);
        }
    }
    for (k, id) in ids.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.run_id == *id).map(|r| (r.alpha, r.proxy_cer)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        }
        for &(x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = TOP + 14.0 * k as f64 + 6.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" font-size="11" text-anchor="end" fill="{color}">{id}</text>"#,
            W - RIGHT - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn plot(csv: &str, origin: &str) -> Result<String> {
    Ok(render(&parse_metrics(csv, origin)?))
}

#[cfg(test)]
mod tests {
    use super::super::eval::METRICS_HEADER;
    use super::*;

    #[test]
    fn deterministic_with_axis_labels() {
        let csv = format!("{METRICS_HEADER}\nr,0,0.2,0.9,1,1,0\nr,1,0.1,0.9,1,1,0\nr,0.5,0.05,0.9,1,1,0\n");
        let a = plot(&csv, "m").unwrap();
        assert_eq!(a, plot(&csv, "m").unwrap());
        assert!(a.contains(">alpha</text>") && a.contains(">proxy_CER</text>"));
        assert_eq!(a.matches("<polyline").count(), 1);
        assert_eq!(a.matches("<circle").count(), 3);
    }

    #[test]
    fn single_row_is_a_marker() {
        let csv = format!("{METRICS_HEADER}\nr,0.5,0.2,0.9,1,1,0\n");
        let svg = plot(&csv, "m").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert_eq!(svg.matches("<circle").count(), 1);
    }
}
