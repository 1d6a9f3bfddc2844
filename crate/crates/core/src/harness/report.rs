//! CSV and SVG output for harness reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn rows_to_csv<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

pub fn rows_from_csv<R: DeserializeOwned>(text: &str) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<R>, _>>()?)
}

/// Write `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Minimal multi-series line chart with a log-scale option.
pub fn line_chart_svg(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)], log_y: bool) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let tf = |v: f64| if log_y { v.max(1e-30).log10() } else { v };
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().map(|&(x, y)| (x, tf(y)))).collect();
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let px = |x: f64| m + (x - x0) / span(x0, x1) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / span(y0, y1) * (h - 2.0 * m);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    if !pts.is_empty() {
        let lbl = |v: f64| if log_y { format!("1e{v:.1}") } else { format!("{v:.3}") };
        let _ = writeln!(s, r#"<text x="5" y="{}">{}</text>"#, py(y1) + 4.0, lbl(y1));
        let _ = writeln!(s, r#"<text x="5" y="{}">{}</text>"#, py(y0) + 4.0, lbl(y0));
    }
    for (i, (name, data)) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let path: Vec<String> = data.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(tf(y)))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" points="{}"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#, w - m + 5.0, m + 15.0 * (i as f64 + 1.0));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, serde::Serialize, serde::Deserialize)]
    struct Row {
        a: f64,
        b: String,
    }

    #[test]
    fn float_round_trip() {
        let rows = vec![
            Row { a: 0.1 + 0.2, b: "x".into() },
            Row { a: 1.234e-17, b: "y,z".into() },
        ];
        let text = rows_to_csv(&rows).unwrap();
        assert!(text.starts_with("a,b\n"));
        assert_eq!(rows_from_csv::<Row>(&text).unwrap(), rows);
        assert_eq!(rows_to_csv(&rows).unwrap(), text);
    }

    #[test]
    fn svg_is_well_formed() {
        let s = line_chart_svg("t", "x", &[("s".into(), vec![(0.0, 1e-6), (1.0, 1e-3)])], true);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    }
}
