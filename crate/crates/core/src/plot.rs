//! Line graphs of per-center metrics as standalone SVG files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::metrics::EvalReport;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn nice_range(vals: &[f64]) -> (f64, f64) {
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// SVG line graph of `(x, y)` points; `None` values break the line.
pub fn line_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, Option<f64>)]) -> String {
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().filter_map(|p| p.1).collect();
    let (x0, x1) = nice_range(&xs);
    let (y0, y1) = nice_range(&ys);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, px(fx), H - MARGIN + 18.0, fmt_tick(fx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN - 6.0, py(fy) + 4.0, fmt_tick(fy));
        let _ = writeln!(
            s,
            r##"<line x1="{m}" x2="{r}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            m = MARGIN,
            r = W - MARGIN,
            y = py(fy)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = H / 2.0
    );
    let mut segment: Vec<String> = Vec::new();
    let flush = |seg: &mut Vec<String>, s: &mut String| {
        if seg.len() > 1 {
            let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, seg.join(" "));
        }
        seg.clear();
    };
    for &(x, y) in points {
        match y {
            Some(y) => {
                segment.push(format!("{:.1},{:.1}", px(x), py(y)));
                let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4"/>"##, px(x), py(y));
            }
            None => flush(&mut segment, &mut s),
        }
    }
    flush(&mut segment, &mut s);
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `fid.svg`, `label_score.svg` and (when present) `diversity.svg`
/// against the raw center label.
pub fn write_report_plots(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let xs: Vec<f64> = report.per_center.iter().map(|c| c.center_raw).collect();
    let mut panels: Vec<(&str, &str, Vec<Option<f64>>)> = vec![
        ("fid", "FID", report.per_center.iter().map(|c| c.fid).collect()),
        ("label_score", "Label Score", report.per_center.iter().map(|c| c.label_score).collect()),
    ];
    if report.diversity_mean.is_some() {
        panels.push(("diversity", "Diversity", report.per_center.iter().map(|c| c.diversity).collect()));
    }
    let mut out = Vec::new();
    for (file, name, ys) in panels {
        let pts: Vec<(f64, Option<f64>)> = xs.iter().copied().zip(ys).collect();
        let path = dir.join(format!("{file}.svg"));
        std::fs::write(&path, line_svg(&format!("{name} vs label"), "label", name, &pts))?;
        out.push(path);
    }
    Ok(out)
}
