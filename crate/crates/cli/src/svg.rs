//! Scatter plots of 2-D generations as standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const VIEWBOX: f64 = 800.0;
/// Data coordinates shown on each axis: `[-EXTENT, EXTENT]`.
pub const EXTENT: f64 = 8.0;
pub const MAX_POINTS: usize = 100_000;

#[derive(Clone, Debug, Default)]
pub struct Overlays {
    /// Drawn as crosses.
    pub exemplars: Vec<[f64; 2]>,
    /// Drawn as rings.
    pub centers: Vec<[f64; 2]>,
}

/// Data point to viewbox pixels, y pointing up.
pub fn to_view(p: [f64; 2]) -> (f64, f64) {
    let scale = VIEWBOX / (2.0 * EXTENT);
    ((p[0] + EXTENT) * scale, (EXTENT - p[1]) * scale)
}

fn num(v: f64) -> String {
    // Fixed precision keeps the bytes stable; normalise negative zero.
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

pub fn scatter_svg(points: &[[f64; 2]], overlays: &Overlays) -> Result<String> {
    if points.len() > MAX_POINTS {
        bail!(
            "{} points exceeds the plot limit of {MAX_POINTS}",
            points.len()
        );
    }
    let all = points
        .iter()
        .chain(&overlays.exemplars)
        .chain(&overlays.centers);
    if let Some(p) = all
        .into_iter()
        .find(|p| !p[0].is_finite() || !p[1].is_finite())
    {
        bail!("cannot plot non-finite point {p:?}");
    }

    let mut s = String::new();
    let v = num(VIEWBOX);
    let mid = num(VIEWBOX / 2.0);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{v}" height="{v}" viewBox="0 0 {v} {v}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{v}" height="{v}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<g id="axes" stroke="black" stroke-width="1"><line x1="0" y1="{mid}" x2="{v}" y2="{mid}"/><line x1="{mid}" y1="0" x2="{mid}" y2="{v}"/></g>"#
    );

    let _ = writeln!(
        s,
        r##"<g id="generations" fill="#1f77b4" fill-opacity="0.6">"##
    );
    for p in points {
        let (x, y) = to_view(*p);
        let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="2"/>"#, num(x), num(y));
    }
    s.push_str("</g>\n");

    let _ = writeln!(
        s,
        r##"<g id="centers" fill="none" stroke="#2ca02c" stroke-width="2">"##
    );
    for p in &overlays.centers {
        let (x, y) = to_view(*p);
        let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="12"/>"#, num(x), num(y));
    }
    s.push_str("</g>\n");

    let _ = writeln!(
        s,
        r##"<g id="exemplars" stroke="#d62728" stroke-width="2">"##
    );
    for p in &overlays.exemplars {
        let (x, y) = to_view(*p);
        let _ = writeln!(
            s,
            r#"<path d="M{} {}L{} {}M{} {}L{} {}"/>"#,
            num(x - 6.0),
            num(y - 6.0),
            num(x + 6.0),
            num(y + 6.0),
            num(x - 6.0),
            num(y + 6.0),
            num(x + 6.0),
            num(y - 6.0)
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

pub fn emit_scatter_svg(points: &[[f64; 2]], overlays: &Overlays, path: &Path) -> Result<()> {
    let svg = scatter_svg(points, overlays)?;
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}
