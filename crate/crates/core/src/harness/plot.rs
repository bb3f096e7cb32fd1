//! Target-vs-achieved SNRi chart: one line per (method, input SNR) with a
//! shaded 99% interval.

use std::fmt::Write as _;
use std::path::Path;

use super::control::read_csv;
use super::{HarnessError, SummaryRow, SUMMARY_HEADER};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Reads a summary CSV; an empty table is a schema error.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let rows: Vec<SummaryRow> = read_csv(path, &SUMMARY_HEADER)?;
    if rows.is_empty() {
        return Err(HarnessError::SchemaMismatch(format!("{} has no rows", path.display())));
    }
    if rows.iter().any(|r| ![r.input_snr_db, r.target_snri_db, r.mean_db, r.ci99_lo_db, r.ci99_hi_db].iter().all(|v| v.is_finite())) {
        return Err(HarnessError::SchemaMismatch("non-finite value".into()));
    }
    Ok(rows)
}

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>) -> Self {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let pad = ((hi - lo) * 0.05).max(0.5);
        Self { lo: (lo - pad).floor(), hi: (hi + pad).ceil() }
    }

    fn map(&self, v: f64, from: f64, to: f64) -> f64 {
        from + (v - self.lo) / (self.hi - self.lo) * (to - from)
    }

    fn ticks(&self) -> Vec<f64> {
        let step = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0].into_iter().find(|s| (self.hi - self.lo) / s <= 10.0).unwrap_or(100.0);
        let mut t = (self.lo / step).ceil() * step;
        let mut out = Vec::new();
        while t <= self.hi + 1e-9 {
            out.push(t);
            t += step;
        }
        out
    }
}

/// Renders a standalone SVG. Output bytes depend only on `rows`.
pub fn render_svg(rows: &[SummaryRow]) -> String {
    let mut series: Vec<(String, Vec<&SummaryRow>)> = Vec::new();
    for r in rows {
        let name = format!("{} @ {} dB", r.method.name(), r.input_snr_db);
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => v.push(r),
            None => series.push((name, vec![r])),
        }
    }
    series.sort_by(|a, b| a.0.cmp(&b.0));
    for (_, v) in series.iter_mut() {
        v.sort_by(|a, b| a.target_snri_db.total_cmp(&b.target_snri_db));
    }
    let x = Axis::new(rows.iter().map(|r| r.target_snri_db));
    let y = Axis::new(rows.iter().flat_map(|r| [r.ci99_lo_db, r.ci99_hi_db, r.target_snri_db]));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN / 2.0, HEIGHT - MARGIN);
    let px = |v: f64| x.map(v, left, right);
    let py = |v: f64| y.map(v, bottom, top);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for t in x.ticks() {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#, px(t), bottom + 16.0);
    }
    for t in y.ticks() {
        let _ = writeln!(s, r##"<line x1="{left:.2}" y1="{0:.2}" x2="{right:.2}" y2="{0:.2}" stroke="#eeeeee"/>"##, py(t));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text>"#, left - 6.0, py(t) + 4.0);
    }
    let _ = writeln!(s, r#"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, right - left, bottom - top);
    let (a, b) = (x.lo.max(y.lo), x.hi.min(y.hi));
    if a < b {
        let _ = writeln!(s, r##"<line class="identity" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888888" stroke-dasharray="4 4"/>"##, px(a), py(a), px(b), py(b));
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = pts.iter().map(|r| format!("{:.2},{:.2}", px(r.target_snri_db), py(r.ci99_hi_db)));
        let lower = pts.iter().rev().map(|r| format!("{:.2},{:.2}", px(r.target_snri_db), py(r.ci99_lo_db)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(s, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.join(" "));
        let line: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", px(r.target_snri_db), py(r.mean_db))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = top + 16.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, left + 10.0, left + 30.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{name}</text>"#, left + 36.0, ly + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">target SNRi (dB)</text>"#, (left + right) / 2.0, HEIGHT - 12.0);
    let _ = writeln!(s, r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">achieved SNRi (dB)</text>"#, (top + bottom) / 2.0);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{write_summary, ControlMethod};

    fn rows() -> Vec<SummaryRow> {
        let mut v = Vec::new();
        for method in [ControlMethod::SnriNet, ControlMethod::Postmix] {
            for t in [3.0, 6.0, 9.0, 12.0] {
                v.push(SummaryRow { method, input_snr_db: 5.0, target_snri_db: t, mean_db: t - 1.0, ci99_lo_db: t - 2.0, ci99_hi_db: t });
            }
        }
        v
    }

    #[test]
    fn two_methods_give_two_lines_and_bands() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_summary(&path, &rows()).unwrap();
        let svg = render_svg(&read_summary(&path).unwrap());
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches(r#"class="band""#).count(), 2);
        assert_eq!(svg, render_svg(&read_summary(&path).unwrap()));
    }

    #[test]
    fn empty_or_foreign_tables_are_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("e.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(read_summary(&empty), Err(HarnessError::SchemaMismatch(_))));
        write_summary(&empty, &[]).unwrap();
        assert!(matches!(read_summary(&empty), Err(HarnessError::SchemaMismatch(_))));
        let other = dir.path().join("o.csv");
        std::fs::write(&other, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_summary(&other), Err(HarnessError::SchemaMismatch(_))));
    }
}
