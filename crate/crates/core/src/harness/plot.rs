//! Minimal static SVG line plots.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 120.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 45.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

pub struct Plot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub series: Vec<Series<'a>>,
    /// Dashed horizontal lines, e.g. constraint bounds.
    pub bounds: Vec<f64>,
    pub log_y: bool,
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-300);
    let raw = span / count as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= count as f64).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot<'_> {
    pub fn to_svg(&self) -> String {
        let tf = |y: f64| if self.log_y { y.max(1e-300).log10() } else { y };
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &(x, y) in &s.points {
                if !x.is_finite() || !y.is_finite() || (self.log_y && y <= 0.0) {
                    continue;
                }
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(tf(y));
                y1 = y1.max(tf(y));
            }
        }
        for &b in &self.bounds {
            y0 = y0.min(tf(b));
            y1 = y1.max(tf(b));
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad, y1 + pad);
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| MARGIN_T + (y1 - tf(y)) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(self.title));
        let _ = writeln!(s, r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
        for t in nice_ticks(x0, x1, 8) {
            let x = px(t);
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#eee"/>"##, MARGIN_T, MARGIN_T + ph);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{t}</text>"#, MARGIN_T + ph + 16.0);
        }
        for t in nice_ticks(y0, y1, 6) {
            let y = MARGIN_T + (y1 - t) / (y1 - y0) * ph;
            let label = if self.log_y { format!("1e{t}") } else { format!("{t}") };
            let _ = writeln!(s, r##"<line x1="{MARGIN_L}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#eee"/>"##, MARGIN_L + pw);
            let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{label}</text>"#, MARGIN_L - 6.0, y + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, MARGIN_L + pw / 2.0, HEIGHT - 8.0, escape(self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            escape(self.y_label)
        );
        for &b in &self.bounds {
            let y = py(b);
            let _ = writeln!(s, r##"<line x1="{MARGIN_L}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#000" stroke-dasharray="6,4"/>"##, MARGIN_L + pw);
        }
        for (i, ser) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut d = String::new();
            for &(x, y) in &ser.points {
                if !x.is_finite() || !y.is_finite() || (self.log_y && y <= 0.0) {
                    continue;
                }
                let _ = write!(d, "{}{:.2},{:.2}", if d.is_empty() { "M" } else { " L" }, px(x), py(y));
            }
            let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
            let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
            let lx = MARGIN_L + pw + 10.0;
            let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(ser.name));
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_range() {
        assert_eq!(nice_ticks(0.0, 25.0, 8), vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0]);
        let t = nice_ticks(-0.53, 0.53, 6);
        assert!(t.first().unwrap() >= &-0.53 && t.last().unwrap() <= &0.53 && t.len() >= 3);
    }

    #[test]
    fn svg_has_one_path_per_series() {
        let p = Plot {
            title: "a < b",
            x_label: "t",
            y_label: "y",
            series: vec![
                Series { name: "x", points: vec![(0.0, 1.0), (1.0, 2.0)] },
                Series { name: "y", points: vec![(0.0, 0.5), (1.0, -1.0)] },
            ],
            bounds: vec![1.5],
            log_y: false,
        };
        let svg = p.to_svg();
        assert_eq!(svg.matches("<path").count(), 2);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.contains("stroke-dasharray"));
    }
}
