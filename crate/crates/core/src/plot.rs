//! Static SVG of the per-epoch training loss and validation Dice.

use std::fmt::Write as _;

use crate::trainer::EpochRecord;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;

fn polyline(values: &[(f64, f64)], x0: f64, (xmin, xmax): (f64, f64), (ymin, ymax): (f64, f64)) -> String {
    let sx = |x: f64| x0 + MARGIN + (x - xmin) / (xmax - xmin).max(1e-12) * (PANEL_W - 2.0 * MARGIN);
    let sy = |y: f64| PANEL_H - MARGIN - (y - ymin) / (ymax - ymin).max(1e-12) * (PANEL_H - 2.0 * MARGIN);
    values
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn panel(svg: &mut String, x0: f64, title: &str, points: &[(f64, f64)], yrange: (f64, f64), colour: &str) {
    let xr = (
        points.first().map_or(0.0, |p| p.0),
        points.last().map_or(1.0, |p| p.0),
    );
    let _ = write!(
        svg,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        x0 + MARGIN,
        MARGIN,
        PANEL_W - 2.0 * MARGIN,
        PANEL_H - 2.0 * MARGIN
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{title}</text>"#,
        x0 + PANEL_W / 2.0,
        MARGIN - 12.0
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{:.3}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{:.3}</text>"#,
        x0 + MARGIN - 4.0,
        MARGIN + 4.0,
        yrange.1,
        x0 + MARGIN - 4.0,
        PANEL_H - MARGIN,
        yrange.0
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">epoch</text>"#,
        x0 + PANEL_W / 2.0,
        PANEL_H - MARGIN + 16.0
    );
    if !points.is_empty() {
        let _ = write!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            polyline(points, x0, xr, yrange)
        );
    }
}

/// Two side-by-side panels: mean training loss and validation mean Dice.
pub fn training_curves_svg(title: &str, log: &[EpochRecord]) -> String {
    let loss: Vec<(f64, f64)> = log.iter().map(|r| (r.epoch as f64, r.losses.total)).collect();
    let dice: Vec<(f64, f64)> = log.iter().map(|r| (r.epoch as f64, r.mean_dice)).collect();
    let finite = |v: &[(f64, f64)]| v.iter().map(|p| p.1).filter(|y| y.is_finite()).collect::<Vec<_>>();
    let ls = finite(&loss);
    let lmin = ls.iter().copied().fold(f64::INFINITY, f64::min);
    let lmax = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lrange = if ls.is_empty() { (0.0, 1.0) } else { (lmin.min(0.0), lmax) };

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif">"#,
        2.0 * PANEL_W,
        PANEL_H + 20.0
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="14" font-size="14" text-anchor="middle">{}</text>"#,
        PANEL_W,
        escape(title)
    );
    svg.push_str(r#"<g transform="translate(0,20)">"#);
    panel(&mut svg, 0.0, "training loss", &loss, lrange, "#c0392b");
    panel(&mut svg, PANEL_W, "validation mean Dice", &dice, (0.0, 1.0), "#2e86c1");
    svg.push_str("</g></svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_log_still_renders() {
        let svg = training_curves_svg("a<b", &[]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
    }
}
