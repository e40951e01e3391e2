//! Minimal static SVG charts: line plots of metric series and bar charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, lo: f64, hi: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - PAD, W - PAD / 2.0, H - PAD);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{}" x2="{PAD}" y2="{}" stroke="black"/>"#, PAD / 2.0, H - PAD);
    for (v, y) in [(hi, PAD / 2.0), (lo, H - PAD)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#, PAD - 4.0, y + 4.0, fmt(v));
    }
    s
}

fn fmt(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One polyline per named series of `(x, y)` points.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x0, x1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 1.5 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 1.5 * PAD);
    let mut s = frame(title, y0, y1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#, PAD, H - PAD + 14.0, fmt(x0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#, W - PAD / 2.0, H - PAD + 14.0, fmt(x1));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#, PAD + 8.0, PAD / 2.0 + 14.0 * (i + 1) as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars with optional error whiskers `(label, value, lo, hi)`.
pub fn bar_chart(title: &str, bars: &[(String, f64, Option<(f64, f64)>)]) -> String {
    let (_, y1) = range(bars.iter().flat_map(|b| [b.1, b.2.map_or(b.1, |e| e.1)]));
    let (y0, y1) = (0.0f64.min(range(bars.iter().map(|b| b.1)).0), y1.max(1e-9));
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 1.5 * PAD);
    let mut s = frame(title, y0, y1);
    let slot = (W - 1.5 * PAD) / bars.len().max(1) as f64;
    for (i, (label, v, err)) in bars.iter().enumerate() {
        let x = PAD + slot * i as f64 + slot * 0.15;
        let bw = slot * 0.7;
        let (top, base) = (sy(*v), sy(0.0f64.max(y0)));
        let _ = writeln!(s, r#"<rect x="{x:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="{}"/>"#, top.min(base), (base - top).abs(), COLORS[i % COLORS.len()]);
        if let Some((lo, hi)) = err {
            let cx = x + bw / 2.0;
            let _ = writeln!(s, r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#, sy(*lo), sy(*hi));
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#, x + bw / 2.0, H - PAD + 14.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_has_one_polyline_per_series() {
        let svg = line_chart("t<1>", &[("a".into(), vec![(0.0, 1.0), (1.0, 2.0)]), ("b".into(), vec![(0.0, 0.5)])]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("t&lt;1&gt;"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn bar_chart_draws_bars_and_whiskers() {
        let svg = bar_chart("sr", &[("x".into(), 0.5, Some((0.4, 0.6))), ("y".into(), 0.2, None)]);
        assert_eq!(svg.matches("<rect").count(), 3);
        assert_eq!(svg.matches("<line").count(), 3);
    }

    #[test]
    fn constant_series_still_renders() {
        let svg = line_chart("c", &[("a".into(), vec![(1.0, 3.0), (2.0, 3.0)])]);
        assert!(!svg.contains("NaN"));
    }
}
