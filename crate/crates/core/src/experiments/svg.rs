//! Minimal deterministic SVG charts rendered from CSV text.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SvgStyle {
    pub title: String,
    pub x_column: String,
    pub y_column: String,
    /// Rows are coloured (and, for line charts, joined) per value of this
    /// column.
    pub group_column: Option<String>,
    pub width: u32,
    pub height: u32,
}

impl SvgStyle {
    pub fn new(title: &str, x: &str, y: &str, group: Option<&str>) -> Self {
        SvgStyle {
            title: title.to_string(),
            x_column: x.to_string(),
            y_column: y.to_string(),
            group_column: group.map(String::from),
            width: 640,
            height: 480,
        }
    }
}

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const MARGIN: f64 = 50.0;

type Series = BTreeMap<String, Vec<(f64, f64)>>;

/// Reads the x/y (and group) columns; lines starting with `#` are skipped.
fn read_series(csv_text: &str, style: &SvgStyle) -> Result<Series> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(csv_text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::format("csv.header", e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format("csv.header", format!("missing column '{name}'")))
    };
    let xi = col(&style.x_column)?;
    let yi = col(&style.y_column)?;
    let gi = style.group_column.as_deref().map(col).transpose()?;
    let mut out = Series::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(format!("csv.row[{}]", n + 1), e.to_string()))?;
        let value = |i: usize, name: &str| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("");
            match raw.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::format(
                    format!("csv.row[{}].{name}", n + 1),
                    format!("'{raw}' is not a finite number"),
                )),
            }
        };
        let x = value(xi, &style.x_column)?;
        let y = value(yi, &style.y_column)?;
        let g = gi.map(|i| rec.get(i).unwrap_or("").to_string()).unwrap_or_default();
        out.entry(g).or_default().push((x, y));
    }
    Ok(out)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    w: f64,
    h: f64,
}

impl Frame {
    fn new(series: &Series, style: &SvgStyle) -> Self {
        let pts = series.values().flatten();
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for &(px, py) in pts {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        let widen = |r: (f64, f64)| {
            if !r.0.is_finite() {
                (0.0, 1.0)
            } else if r.1 - r.0 < 1e-12 {
                (r.0 - 1.0, r.1 + 1.0)
            } else {
                r
            }
        };
        Frame {
            x: widen(x),
            y: widen(y),
            w: style.width as f64,
            h: style.height as f64,
        }
    }

    fn map(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let px = MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (self.w - 2.0 * MARGIN);
        let py = self.h - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (self.h - 2.0 * MARGIN);
        (px, py)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, frame: &Frame, style: &SvgStyle) {
    let (w, h) = (style.width, style.height);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w as f64 / 2.0,
        escape(&style.title)
    );
    let (x0, y0) = (MARGIN, frame.h - MARGIN);
    let (x1, y1) = (frame.w - MARGIN, MARGIN);
    let _ = writeln!(
        out,
        r#"<g class="axes" stroke="black"><line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}"/><line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}"/></g>"#
    );
    let _ = writeln!(
        out,
        r#"<g font-size="10"><text x="{x0:.2}" y="{:.2}">{}</text><text x="{x1:.2}" y="{:.2}" text-anchor="end">{}</text><text x="{:.2}" y="{y0:.2}" text-anchor="end">{}</text><text x="{:.2}" y="{y1:.2}" text-anchor="end">{}</text></g>"#,
        y0 + 14.0,
        fmt_tick(frame.x.0),
        y0 + 14.0,
        fmt_tick(frame.x.1),
        x0 - 4.0,
        fmt_tick(frame.y.0),
        x0 - 4.0,
        fmt_tick(frame.y.1),
    );
    let _ = writeln!(
        out,
        r#"<g font-size="12"><text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text><text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text></g>"#,
        frame.w / 2.0,
        frame.h - 10.0,
        escape(&style.x_column),
        frame.h / 2.0,
        frame.h / 2.0,
        escape(&style.y_column),
    );
}

fn fmt_tick(v: f64) -> String {
    format!("{v:.4}")
}

fn legend(out: &mut String, series: &Series, frame: &Frame) {
    if series.len() < 2 {
        return;
    }
    out.push_str("<g class=\"legend\" font-size=\"10\">\n");
    for (i, name) in series.keys().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{y:.2}" fill="{}">{}</text>"#,
            frame.w - MARGIN + 4.0,
            PALETTE[i % PALETTE.len()],
            escape(name)
        );
    }
    out.push_str("</g>\n");
}

/// One circle marker per CSV row.
pub fn emit_svg_scatter(csv_text: &str, style: &SvgStyle) -> Result<String> {
    let series = read_series(csv_text, style)?;
    let frame = Frame::new(&series, style);
    let mut out = String::new();
    header(&mut out, &frame, style);
    for (i, pts) in series.values().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<g class="series" fill="{color}" fill-opacity="0.7">"#);
        for &p in pts {
            let (px, py) = frame.map(p);
            let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="2.5"/>"#);
        }
        out.push_str("</g>\n");
    }
    legend(&mut out, &series, &frame);
    out.push_str("</svg>\n");
    Ok(out)
}

/// A polyline per group through its points in x order, plus a marker per
/// row.
pub fn emit_svg_lines(csv_text: &str, style: &SvgStyle) -> Result<String> {
    let mut series = read_series(csv_text, style)?;
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let frame = Frame::new(&series, style);
    let mut out = String::new();
    header(&mut out, &frame, style);
    for (i, pts) in series.values().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mapped: Vec<(f64, f64)> = pts.iter().map(|&p| frame.map(p)).collect();
        let path = mapped
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(out, r#"<g class="series" stroke="{color}" fill="{color}">"#);
        let _ = writeln!(out, r#"<polyline points="{path}" fill="none" stroke-width="1.5"/>"#);
        for (px, py) in mapped {
            let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="2.5"/>"#);
        }
        out.push_str("</g>\n");
    }
    legend(&mut out, &series, &frame);
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn style() -> SvgStyle {
        SvgStyle::new("t", "x", "y", Some("g"))
    }

    #[test]
    fn one_marker_per_row() {
        let svg = emit_svg_scatter("x,y,g\n0,0,a\n1,2,a\n3,1,b\n", &style()).unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_series_has_axes_only() {
        let svg = emit_svg_lines("x,y,g\n", &style()).unwrap();
        assert_eq!(svg.matches("<circle").count(), 0);
        assert!(svg.contains("class=\"axes\""));
    }

    #[test]
    fn output_is_deterministic() {
        let csv = "x,y,g\n0.5,0.1,b\n0.1,0.3,a\n0.2,0.9,b\n";
        assert_eq!(emit_svg_lines(csv, &style()).unwrap(), emit_svg_lines(csv, &style()).unwrap());
    }

    #[test]
    fn comments_are_skipped() {
        let svg = emit_svg_scatter("# note\nx,y,g\n# more\n1,1,a\n", &style()).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
    }

    #[test]
    fn malformed_csv_is_a_format_error() {
        for bad in ["x,y,g\n1,oops,a\n", "a,b\n1,2\n", "x,y,g\n1,2\n", "x,y,g\n1,inf,a\n"] {
            assert!(matches!(emit_svg_scatter(bad, &style()), Err(Error::Format { .. })), "{bad}");
        }
    }

    #[test]
    fn titles_are_escaped() {
        let s = SvgStyle::new("a<b & c", "x", "y", None);
        let svg = emit_svg_scatter("x,y\n1,2\n", &s).unwrap();
        assert!(svg.contains("a&lt;b &amp; c"));
    }
}
