//! SVG 1.1 scatter plots of 2-D embeddings.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

pub const PALETTE: [&str; 20] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94",
    "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5",
];

const CANVAS: f64 = 800.0;

pub fn color_for(label: u32) -> &'static str {
    PALETTE[label as usize % PALETTE.len()]
}

/// Renders one circle per point. Labels pick colors from [`PALETTE`] and add a
/// legend; without labels every point uses the first color.
pub fn render_svg(embedding: ArrayView2<'_, f64>, labels: Option<&[u32]>) -> Result<String> {
    if embedding.ncols() != 2 {
        return Err(Error::DimensionNot2(embedding.ncols()));
    }
    if let Some(l) = labels {
        if l.len() != embedding.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} points",
                l.len(),
                embedding.nrows()
            )));
        }
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in embedding.rows() {
        x0 = x0.min(r[0]);
        x1 = x1.max(r[0]);
        y0 = y0.min(r[1]);
        y1 = y1.max(r[1]);
    }
    if !(x0.is_finite() && x1.is_finite() && y0.is_finite() && y1.is_finite()) {
        (x0, x1, y0, y1) = (0.0, 0.0, 0.0, 0.0);
    }
    let expand = |lo: f64, hi: f64| if hi - lo > 0.0 { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let (x0, x1) = expand(x0, x1);
    let (y0, y1) = expand(y0, y1);
    let (w, h) = (x1 - x0, y1 - y0);
    let (mx, my) = (0.05 * w, 0.05 * h);
    let (vx, vy, vw, vh) = (x0 - mx, y0 - my, w + 2.0 * mx, h + 2.0 * my);
    let radius = 0.004 * vw.max(vh);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{CANVAS}" height="{CANVAS}" viewBox="{vx} {vy} {vw} {vh}" preserveAspectRatio="xMidYMid meet">"#
    );
    let _ = writeln!(svg, r#"<rect x="{vx}" y="{vy}" width="{vw}" height="{vh}" fill="white"/>"#);
    // flip so larger y is drawn higher
    let _ = writeln!(svg, r#"<g transform="translate(0 {}) scale(1 -1)">"#, 2.0 * vy + vh);
    for (i, r) in embedding.rows().into_iter().enumerate() {
        let fill = labels.map_or(PALETTE[0], |l| color_for(l[i]));
        let _ = writeln!(svg, r#"<circle cx="{}" cy="{}" r="{radius}" fill="{fill}"/>"#, r[0], r[1]);
    }
    let _ = writeln!(svg, "</g>");
    if let Some(l) = labels {
        let distinct: BTreeSet<u32> = l.iter().copied().collect();
        let step = vh / 40.0;
        let _ = writeln!(svg, r#"<g class="legend" font-family="sans-serif" font-size="{}">"#, 0.8 * step);
        for (row, label) in distinct.iter().enumerate() {
            let y = vy + step * (row as f64 + 1.0);
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{s}" height="{s}" fill="{}"/><text x="{}" y="{}">{label}</text>"#,
                vx + step * 0.5,
                y - 0.7 * step,
                color_for(*label),
                vx + step * 1.5,
                y,
                s = 0.7 * step
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn plot_svg(embedding: ArrayView2<'_, f64>, labels: Option<&[u32]>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let svg = render_svg(embedding, labels)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
