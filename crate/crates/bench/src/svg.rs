use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use hpn_core::tsp::check_permutation;
use hpn_core::Instance;

const SIZE: f64 = 600.0;
const MARGIN: f64 = 30.0;
const TITLE_SPACE: f64 = 30.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Closed tour over the city markers, with `title` above the plot. The
/// bounding box of the cities is fitted to the canvas, y pointing up.
pub fn render_tour_svg(inst: &Instance, order: &[usize], title: &str) -> Result<String> {
    check_permutation(order, inst.len())?;
    let pts = inst.coords();
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let span = (max_x - min_x).max(max_y - min_y);
    let span = if span > 0.0 { span } else { 1.0 };
    let inner = SIZE - 2.0 * MARGIN;
    let map = |i: usize| {
        let p = pts[i];
        let x = MARGIN + (p.x - min_x) / span * inner;
        let y = TITLE_SPACE + MARGIN + inner - (p.y - min_y) / span * inner;
        (x, y)
    };
    let height = SIZE + TITLE_SPACE;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{height}" viewBox="0 0 {SIZE} {height}">"#
    )?;
    writeln!(s, "<title>{}</title>", escape(title))?;
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    )?;
    if order.len() > 1 {
        let mut d = String::new();
        for (k, &c) in order.iter().enumerate() {
            let (x, y) = map(c);
            write!(d, "{}{x:.2} {y:.2} ", if k == 0 { "M" } else { "L" })?;
        }
        d.push('Z');
        writeln!(
            s,
            r#"<path class="tour" d="{d}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#
        )?;
    }
    for i in 0..pts.len() {
        let (x, y) = map(i);
        writeln!(s, r#"<circle class="city" cx="{x:.2}" cy="{y:.2}" r="3" fill="black"/>"#)?;
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_tour_svg(path: impl AsRef<Path>, inst: &Instance, order: &[usize], title: &str) -> Result<()> {
    let path = path.as_ref();
    let svg = render_tour_svg(inst, order, title)?;
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}
