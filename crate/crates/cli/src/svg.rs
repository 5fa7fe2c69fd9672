//! DET curves rendered as SVG with log-scaled APCER (x) and BPCER (y) axes.

use std::fmt::Write as _;

use voxatn::padeval::DetPoint;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 520.0;
pub const MARGIN_LEFT: f64 = 70.0;
pub const MARGIN_TOP: f64 = 30.0;
pub const PLOT_W: f64 = 440.0;
pub const PLOT_H: f64 = 420.0;
/// Smallest rate shown, in percent; lower rates (including 0) sit on the axis.
pub const RATE_FLOOR: f64 = 0.1;
pub const RATE_CEIL: f64 = 100.0;

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn unit(rate: f64) -> f64 {
    let r = rate.clamp(RATE_FLOOR, RATE_CEIL);
    (r.log10() - RATE_FLOOR.log10()) / (RATE_CEIL.log10() - RATE_FLOOR.log10())
}

/// Pixel position of an `(apcer, bpcer)` pair.
pub fn to_pixels(apcer: f64, bpcer: f64) -> (f64, f64) {
    (
        MARGIN_LEFT + unit(apcer) * PLOT_W,
        MARGIN_TOP + (1.0 - unit(bpcer)) * PLOT_H,
    )
}

/// Inverse of [`to_pixels`] for rates inside the plotted range.
pub fn from_pixels(x: f64, y: f64) -> (f64, f64) {
    let span = RATE_CEIL.log10() - RATE_FLOOR.log10();
    let rate = |u: f64| 10f64.powf(RATE_FLOOR.log10() + u * span);
    (
        rate((x - MARGIN_LEFT) / PLOT_W),
        rate(1.0 - (y - MARGIN_TOP) / PLOT_H),
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn det_svg(curves: &[(String, Vec<DetPoint>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{PLOT_W}" height="{PLOT_H}" fill="none" stroke="black"/>"#
    );
    for tick in [0.1, 1.0, 10.0, 100.0] {
        let (x, _) = to_pixels(tick, RATE_FLOOR);
        let (_, y) = to_pixels(RATE_FLOOR, tick);
        let bottom = MARGIN_TOP + PLOT_H;
        let right = MARGIN_LEFT + PLOT_W;
        let _ = writeln!(s, r##"<line x1="{x:.3}" y1="{MARGIN_TOP}" x2="{x:.3}" y2="{bottom}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r##"<line x1="{MARGIN_LEFT}" y1="{y:.3}" x2="{right}" y2="{y:.3}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{x:.3}" y="{:.3}" text-anchor="middle">{tick}</text>"#, bottom + 16.0);
        let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}" text-anchor="end">{tick}</text>"#, MARGIN_LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">APCER (%)</text>"#,
        MARGIN_LEFT + PLOT_W / 2.0,
        MARGIN_TOP + PLOT_H + 36.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.3}" text-anchor="middle" transform="rotate(-90 16 {:.3})">BPCER (%)</text>"#,
        MARGIN_TOP + PLOT_H / 2.0,
        MARGIN_TOP + PLOT_H / 2.0
    );
    for (i, (label, points)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|p| {
                let (x, y) = to_pixels(p.apcer, p.bpcer);
                format!("{x:.4},{y:.4}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = MARGIN_TOP + 14.0 + 18.0 * i as f64;
        let lx = MARGIN_LEFT + PLOT_W + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_transform_inverts() {
        for (a, b) in [(0.1, 100.0), (1.0, 10.0), (37.5, 0.25)] {
            let (x, y) = to_pixels(a, b);
            let (a2, b2) = from_pixels(x, y);
            assert!((a - a2).abs() < 1e-9 * a.max(1.0) && (b - b2).abs() < 1e-9 * b.max(1.0));
        }
        assert_eq!(to_pixels(0.0, 0.0), to_pixels(RATE_FLOOR, RATE_FLOOR));
        assert_eq!(to_pixels(100.0, 0.0), (MARGIN_LEFT + PLOT_W, MARGIN_TOP + PLOT_H));
    }

    #[test]
    fn one_polyline_per_curve() {
        let pts = vec![
            DetPoint { threshold: 0.0, apcer: 0.0, bpcer: 100.0 },
            DetPoint { threshold: 1.0, apcer: 100.0, bpcer: 0.0 },
        ];
        let one = det_svg(&[("a".into(), pts.clone())]);
        assert_eq!(one.matches("<polyline").count(), 1);
        let two = det_svg(&[("a<b".into(), pts.clone()), ("c".into(), pts)]);
        assert_eq!(two.matches("<polyline").count(), 2);
        assert!(two.contains("a&lt;b"));
    }
}
