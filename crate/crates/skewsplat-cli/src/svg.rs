//! Dependency-free SVG line plots, just enough for result inspection.

use std::fmt::Write as _;
use std::path::Path;

use skewsplat::SplatError;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Writes a fixed-size line chart with a legend. Axes are linear and fitted
/// to the joint data range with a small margin.
pub fn write_line_plot(path: &Path, title: &str, series: &[Series]) -> Result<(), SplatError> {
    let (w, h, pad) = (640.0, 400.0, 46.0);
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !(xmin.is_finite() && ymin.is_finite()) {
        return Err(SplatError::Config("plot has no finite points".into()));
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let yspan = ymax - ymin;
    ymin -= 0.05 * yspan;
    ymax += 0.05 * yspan;

    let sx = |x: f64| pad + (x - xmin) / (xmax - xmin) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - ymin) / (ymax - ymin) * (h - 2.0 * pad);

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(out, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<rect x=\"{pad}\" y=\"{pad}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>",
        w / 2.0
    );
    for (t, v) in [(xmin, "start"), (xmax, "end")] {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"{v}\" font-family=\"sans-serif\" font-size=\"11\">{t:.3}</text>",
            sx(t),
            h - pad + 16.0
        );
    }
    for t in [ymin, ymax] {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{t:.3}</text>",
            pad - 6.0,
            sy(t) + 4.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let mut d = String::new();
        for (j, &(x, y)) in s.points.iter().enumerate() {
            let _ = write!(
                d,
                "{}{:.2},{:.2} ",
                if j == 0 { "M" } else { "L" },
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            d.trim_end(),
            s.color
        );
        let ly = pad + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{2}\" stroke-width=\"2\"/>\
             <text x=\"{3}\" y=\"{4}\" font-family=\"sans-serif\" font-size=\"11\">{5}</text>",
            w - pad - 150.0,
            w - pad - 126.0,
            s.color,
            w - pad - 120.0,
            ly + 4.0,
            s.label
        );
    }
    let _ = writeln!(out, "</svg>");
    std::fs::write(path, out)?;
    Ok(())
}
