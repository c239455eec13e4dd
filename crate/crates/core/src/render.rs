//! SVG previews and ASCII PLY export of single objects.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::objects::{Point, PointSet};

const PANEL: f64 = 320.0;
const MARGIN: f64 = 16.0;

/// Blue to yellow through magenta, for intensities in `[0, 1]`.
pub fn intensity_color(i: f64) -> String {
    let t = if i.is_finite() { i.clamp(0.0, 1.0) } else { 0.0 };
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (40.0 + 180.0 * u, 40.0, 200.0 - 40.0 * u)
    } else {
        let u = (t - 0.5) / 0.5;
        (220.0 + 35.0 * u, 40.0 + 190.0 * u, 160.0 - 120.0 * u)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

fn refuse_empty(ps: &PointSet) -> Result<()> {
    if ps.is_empty() {
        return Err(Error::Domain("cannot render an object with no points".into()));
    }
    Ok(())
}

/// Top (x, y) and side (x, z) orthographic views side by side, sharing one scale.
pub fn render_svg(ps: &PointSet, title: &str) -> Result<String> {
    refuse_empty(ps)?;
    let max_abs = ps
        .points
        .iter()
        .flat_map(|p| [p.x.abs(), p.y.abs(), p.z.abs()])
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let scale = (PANEL / 2.0 - MARGIN) / max_abs;
    let width = 2.0 * PANEL;
    let height = PANEL + 24.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#111"/>"##);
    let esc = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let _ = writeln!(s, r##"<text x="8" y="16" fill="#ddd" font-family="monospace" font-size="12">{esc} (n={})</text>"##, ps.len());
    for (k, label) in ["top x-y", "side x-z"].iter().enumerate() {
        let ox = k as f64 * PANEL + PANEL / 2.0;
        let oy = 24.0 + PANEL / 2.0;
        let _ = writeln!(
            s,
            r##"<g><rect x="{}" y="24" width="{PANEL}" height="{PANEL}" fill="none" stroke="#444"/><text x="{}" y="{}" fill="#888" font-family="monospace" font-size="11">{label}</text>"##,
            k as f64 * PANEL,
            k as f64 * PANEL + 6.0,
            24.0 + PANEL - 6.0
        );
        for p in &ps.points {
            let v = if k == 0 { p.y } else { p.z };
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="{}"/>"#,
                ox + p.x * scale,
                oy - v * scale,
                intensity_color(p.i)
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// ASCII PLY with float `x y z intensity` vertex properties.
pub fn write_ply(ps: &PointSet) -> Result<String> {
    refuse_empty(ps)?;
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n",
        ps.len()
    );
    for p in &ps.points {
        let _ = writeln!(s, "{} {} {} {}", p.x as f32, p.y as f32, p.z as f32, p.i as f32);
    }
    Ok(s)
}

/// Reads the vertex block written by [`write_ply`].
pub fn read_ply(text: &str) -> Result<PointSet> {
    let bad = |m: &str| Error::InvalidData(format!("PLY: {m}"));
    let (header, body) = text.split_once("end_header\n").ok_or_else(|| bad("missing end_header"))?;
    if !header.starts_with("ply\nformat ascii 1.0\n") {
        return Err(bad("not an ASCII PLY file"));
    }
    let n: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .ok_or_else(|| bad("missing vertex count"))?
        .trim()
        .parse()
        .map_err(|_| bad("bad vertex count"))?;
    let points = body
        .lines()
        .take(n)
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(|t| t.parse::<f32>().map(f64::from)).collect::<Result<_, _>>().map_err(|_| bad("bad vertex"))?;
            match v[..] {
                [x, y, z, i] => Ok(Point::new(x, y, z, i)),
                _ => Err(bad("vertex needs four values")),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if points.len() != n {
        return Err(bad("fewer vertices than declared"));
    }
    Ok(PointSet::new(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointSet {
        PointSet::new(vec![
            Point::new(1.25, -0.5, 0.3, 0.0),
            Point::new(-2.0, 0.75, -0.1, 1.0),
            Point::new(0.1234567, 0.2, 0.9, 0.42),
        ])
    }

    #[test]
    fn ply_vertex_count_and_round_trip() {
        let ps = sample();
        let text = write_ply(&ps).unwrap();
        assert!(text.contains("element vertex 3\n"));
        let back = read_ply(&text).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in ps.points.iter().zip(&back.points) {
            for (u, v) in a.to_array().iter().zip(b.to_array()) {
                assert_eq!(*u as f32, v as f32);
            }
        }
    }

    #[test]
    fn empty_objects_are_refused() {
        let e = PointSet::new(vec![]);
        assert!(render_svg(&e, "x").is_err());
        assert!(write_ply(&e).is_err());
    }

    #[test]
    fn svg_draws_every_point_twice() {
        let svg = render_svg(&sample(), "a<b").unwrap();
        assert_eq!(svg.matches("<circle").count(), 6);
        assert!(svg.contains("a&lt;b") && svg.starts_with("<svg"));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(intensity_color(0.0), "#2828c8");
        assert_eq!(intensity_color(1.0), "#ffe628");
        assert_eq!(intensity_color(f64::NAN), intensity_color(0.0));
    }
}
