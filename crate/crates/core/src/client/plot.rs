//! Validation-curve rendering to SVG or PNG.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::{ClientError, MetricRecord};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: f64 = 48.0;
const COLORS: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    /// Validation mean against step.
    pub fn validation(label: &str, records: &[MetricRecord]) -> Self {
        let points = records.iter().filter(|r| r.kind == "val").map(|r| (r.step as f64, r.mean)).collect();
        Series { label: label.to_string(), points }
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(series: &[Series]) -> Frame {
        let pts = series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-9 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-9 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        Frame { x0, x1, y0, y1 }
    }

    fn map(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let px = MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W as f64 - 2.0 * MARGIN);
        let py = H as f64 - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H as f64 - 2.0 * MARGIN);
        (px, py)
    }
}

pub fn render_svg(series: &[Series]) -> String {
    let f = Frame::fit(series);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (l, b) = (MARGIN, H as f64 - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {MARGIN} L{l} {b} L{} {b}" stroke="black" fill="none"/>"#, W as f64 - MARGIN);
    let _ = writeln!(s, r#"<text x="{l}" y="{}" >{:.3}</text>"#, b + 16.0, f.x0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.0}</text>"#, W as f64 - MARGIN, b + 16.0, f.x1);
    let _ = writeln!(s, r#"<text x="4" y="{b}">{:.2}</text>"#, f.y0);
    let _ = writeln!(s, r#"<text x="4" y="{}">{:.2}</text>"#, MARGIN + 4.0, f.y1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, W / 2, H - 8);
    for (i, series) in series.iter().enumerate() {
        let [r, g, bl] = COLORS[i % COLORS.len()];
        let d: Vec<String> = series
            .points
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let (x, y) = f.map(p);
                format!("{}{x:.1} {y:.1}", if k == 0 { "M" } else { "L" })
            })
            .collect();
        let _ = writeln!(s, r#"<path d="{}" stroke="rgb({r},{g},{bl})" stroke-width="2" fill="none"/>"#, d.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="rgb({r},{g},{bl})">{}</text>"#,
            MARGIN + 8.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            escape(&series.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

pub fn render_png(series: &[Series]) -> RgbImage {
    let f = Frame::fit(series);
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let b = H as f64 - MARGIN;
    line(&mut img, (MARGIN, MARGIN), (MARGIN, b), black);
    line(&mut img, (MARGIN, b), (W as f64 - MARGIN, b), black);
    for (i, series) in series.iter().enumerate() {
        let color = Rgb(COLORS[i % COLORS.len()]);
        for w in series.points.windows(2) {
            line(&mut img, f.map(w[0]), f.map(w[1]), color);
        }
        if let [p] = series.points[..] {
            line(&mut img, f.map(p), f.map(p), color);
        }
    }
    img
}

/// Writes an SVG or PNG depending on `out`'s extension.
pub fn plot(series: &[Series], out: &Path) -> Result<(), ClientError> {
    match out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("svg") => std::fs::write(out, render_svg(series))?,
        Some("png") => render_png(series)
            .save(out)
            .map_err(|e| ClientError::Io(std::io::Error::other(e.to_string())))?,
        _ => return Err(ClientError::InvalidSpec(format!("{}: output must end in .svg or .png", out.display()))),
    }
    Ok(())
}
