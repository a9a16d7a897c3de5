//! Minimal self-contained SVG line plots with a log-scale y axis.

use std::fmt::Write as _;

const W: f64 = 720.0;
const H: f64 = 460.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct LogPlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed vertical lines at these x positions.
    pub markers: Vec<(f64, String)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Step of roughly `span/5` rounded to 1, 2 or 5 times a power of ten.
fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let m = if r < 1.5 {
        1.0
    } else if r < 3.5 {
        2.0
    } else if r < 7.5 {
        5.0
    } else {
        10.0
    };
    m * mag
}

impl LogPlot {
    /// Decades `[lo, hi]` (exponents of ten) covering every positive y.
    pub fn y_decades(&self) -> Option<(i32, i32)> {
        let ys = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).filter(|y| *y > 0.0 && y.is_finite());
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
        if !lo.is_finite() {
            return None;
        }
        let lo = lo.log10().floor() as i32;
        let hi = (hi.log10().ceil() as i32).max(lo + 1);
        Some((lo, hi))
    }

    pub fn render(&self) -> String {
        let (lo, hi) = self.y_decades().unwrap_or((-1, 0));
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .chain(self.markers.iter().map(|m| m.0))
            .filter(|x| x.is_finite());
        let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if !x0.is_finite() {
            x0 = 0.0;
            x1 = 1.0;
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (hi as f64 - y.log10()) / (hi - lo) as f64 * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, esc(&self.title));

        // y ticks, one per power of ten
        for e in lo..=hi {
            let y = sy(10f64.powi(e));
            let _ = writeln!(s, r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e0e0e0"/>"##, LEFT + pw);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">1e{e}</text>"#, LEFT - 6.0, y + 4.0);
        }
        let step = nice_step(x1 - x0);
        let decimals = (-step.log10().floor()).max(0.0) as usize;
        for i in (x0 / step).ceil() as i64..=(x1 / step + 1e-9).floor() as i64 {
            let xt = i as f64 * step;
            let x = sx(xt);
            let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#000"/>"##, TOP + ph, TOP + ph + 5.0);
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{:.*}</text>"#, TOP + ph + 18.0, decimals, xt);
        }
        let _ = writeln!(s, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>"##);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 15.0, esc(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );

        for (x, label) in &self.markers {
            let px = sx(*x);
            let _ = writeln!(
                s,
                r##"<line x1="{px:.1}" y1="{TOP:.1}" x2="{px:.1}" y2="{:.1}" stroke="#444" stroke-dasharray="6,4"/>"##,
                TOP + ph
            );
            let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" fill="#444">{}</text>"##, px + 4.0, TOP + 14.0, esc(label));
        }

        for (i, ser) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = ser
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1 > 0.0 && p.1.is_finite())
                .map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1.clamp(10f64.powi(lo), 10f64.powi(hi)))))
                .collect();
            if !pts.is_empty() {
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#, pts.join(" "));
            }
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = W - RIGHT + 15.0;
            let _ = writeln!(s, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, esc(&ser.label));
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plot() -> LogPlot {
        LogPlot {
            title: "errors".into(),
            x_label: "t".into(),
            y_label: "error".into(),
            series: vec![
                Series { label: "a".into(), points: (1..=20).map(|t| (t as f64, 0.5f64.powi(t))).collect() },
                Series { label: "b<c".into(), points: vec![(1.0, 0.0), (2.0, f64::INFINITY), (3.0, 1e-3)] },
            ],
            markers: vec![(7.0, "support".into())],
        }
    }

    #[test]
    fn decades_cover_data() {
        assert_eq!(plot().y_decades(), Some((-7, 0)));
        assert_eq!(LogPlot::default().y_decades(), None);
    }

    #[test]
    fn power_of_ten_ticks_and_marker() {
        let svg = plot().render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        for e in -7..=0 {
            assert!(svg.contains(&format!(">1e{e}<")), "missing tick 1e{e}");
        }
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("b&lt;c"));
        assert!(!svg.contains("href"));
    }

    #[test]
    fn byte_stable() {
        assert_eq!(plot().render(), plot().render());
    }

    #[test]
    fn nice_steps() {
        assert_eq!(nice_step(100.0), 20.0);
        assert_eq!(nice_step(10.0), 2.0);
        assert_eq!(nice_step(3.0), 0.5);
    }
}
