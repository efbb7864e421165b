//! Minimal SVG line plots read back from CSV files.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;

/// Extracts the `(x, y)` pairs of two named columns; rows with an empty or
/// non-finite entry are skipped.
pub fn columns(csv: &str, x: &str, y: &str) -> Result<Vec<(f64, f64)>, String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty CSV")?.split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| format!("column `{name}` not found"))
    };
    let (ix, iy) = (col(x)?, col(y)?);
    let mut pts = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let get = |i: usize| cells.get(i).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
        if let (Some(a), Some(b)) = (get(ix), get(iy)) {
            pts.push((a, b));
        }
    }
    Ok(pts)
}

fn axis(values: impl Iterator<Item = f64>, log: bool) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| !log || *v > 0.0)
        .map(|v| if log { v.log10() } else { v })
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    Some((lo - pad, hi + pad))
}

/// Renders `y` against `x` with a log-scaled x axis and an optionally
/// log-scaled y axis.
pub fn svg(pts: &[(f64, f64)], x_label: &str, y_label: &str, log_y: bool) -> String {
    let (xr, yr) = match (axis(pts.iter().map(|p| p.0), true), axis(pts.iter().map(|p| p.1), log_y)) {
        (Some(a), Some(b)) => (a, b),
        _ => ((0.0, 1.0), (0.0, 1.0)),
    };
    let sx = |x: f64| PAD + (x.log10() - xr.0) / (xr.1 - xr.0) * (W - 2.0 * PAD);
    let sy = |y: f64| {
        let v = if log_y { y.log10() } else { y };
        H - PAD - (v - yr.0) / (yr.1 - yr.0) * (H - 2.0 * PAD)
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let path: Vec<String> = pts
        .iter()
        .filter(|p| p.0 > 0.0 && (!log_y || p.1 > 0.0))
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    if !path.is_empty() {
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="steelblue"/>"#);
        }
    }
    let ylab = if log_y { format!("log10 {y_label}") } else { y_label.to_string() };
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">log10 {x_label}</text>"#,
        W / 2.0,
        H - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{ylab}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, anchor, x, y) in [
        (xr.0, "start", PAD, H - PAD + 16.0),
        (xr.1, "end", W - PAD, H - PAD + 16.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="11">{v:.2}</text>"#);
    }
    for (v, y) in [(yr.0, H - PAD), (yr.1, PAD + 10.0)] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end" font-size="11">{v:.3}</text>"#, PAD - 4.0);
    }
    s.push_str("</svg>\n");
    s
}
