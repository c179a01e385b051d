//! Minimal scatter-plot SVG writer for 2D point sets.

use std::fmt::Write;

use flowcond::Tensor;

pub struct Layer<'a> {
    pub points: &'a Tensor,
    pub color: &'a str,
    pub radius: f64,
    pub opacity: f64,
}

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;

/// Layers are drawn in order; the first sets the bottom of the stack.
/// Bounds cover every finite point across all layers.
pub fn scatter(title: &str, layers: &[Layer<'_>]) -> String {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for layer in layers {
        for r in layer.points.iter_rows().filter(|r| r.len() >= 2 && r[0].is_finite() && r[1].is_finite()) {
            for k in 0..2 {
                lo[k] = lo[k].min(r[k]);
                hi[k] = hi[k].max(r[k]);
            }
        }
    }
    if !lo[0].is_finite() {
        lo = [-1.0; 2];
        hi = [1.0; 2];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |x: f64| MARGIN + (x - lo[0]) * scale;
    // SVG y grows downward.
    let py = |y: f64| SIZE - MARGIN - (y - lo[1]) * scale;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="16" font-family="sans-serif" font-size="12">{}</text>"#,
        escape(title)
    );
    for layer in layers {
        let _ = writeln!(s, r#"<g fill="{}" fill-opacity="{}">"#, escape(layer.color), layer.opacity);
        for r in layer.points.iter_rows() {
            if r.len() < 2 || !r[0].is_finite() || !r[1].is_finite() {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{}"/>"#,
                px(r[0]),
                py(r[1]),
                layer.radius
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
