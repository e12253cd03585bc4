//! Small raster plotter writing PNG files.
//!
//! Plots carry no text; every figure is written next to the CSV it was drawn
//! from, which holds the labels and exact values.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

pub const PALETTE: [Rgb; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [127, 127, 127],
];

const WHITE: Rgb = [255, 255, 255];
const BLACK: Rgb = [0, 0, 0];
const MARGIN: usize = 20;

#[derive(Debug, Clone)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![WHITE; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Bresenham line.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Image(format!("{}: {e}", path.display()));
        let mut w = enc.write_header().map_err(png_err)?;
        let data: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        w.write_image_data(&data).map_err(png_err)?;
        Ok(())
    }
}

/// Maps data coordinates into the plot area of a canvas.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    width: usize,
    height: usize,
}

impl Frame {
    pub fn new(canvas: &Canvas, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Self {
            x_range: pad(x_range),
            y_range: pad(y_range),
            width: canvas.width,
            height: canvas.height,
        }
    }

    pub fn to_pixel(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (self.width - 2 * MARGIN) as f64;
        let h = (self.height - 2 * MARGIN) as f64;
        let u = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        let v = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        let px = MARGIN as f64 + u.clamp(-1.0, 2.0) * w;
        let py = (self.height - MARGIN) as f64 - v.clamp(-1.0, 2.0) * h;
        (px.round() as i64, py.round() as i64)
    }

    /// Bounding box, plus the y = 0 axis when it is in range.
    pub fn draw_axes(&self, canvas: &mut Canvas) {
        let (l, r) = (MARGIN as i64, (self.width - MARGIN) as i64);
        let (t, b) = (MARGIN as i64, (self.height - MARGIN) as i64);
        canvas.line((l, t), (r, t), BLACK);
        canvas.line((l, b), (r, b), BLACK);
        canvas.line((l, t), (l, b), BLACK);
        canvas.line((r, t), (r, b), BLACK);
        if self.y_range.0 < 0.0 && self.y_range.1 > 0.0 {
            let (_, y0) = self.to_pixel(self.x_range.0, 0.0);
            for x in (l..r).step_by(4) {
                canvas.set(x, y0, [160, 160, 160]);
            }
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn padded((lo, hi): (f64, f64)) -> (f64, f64) {
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = 0.05 * (hi - lo).max(1e-12);
    (lo - pad, hi + pad)
}

/// Overlaid polylines, one colour per series.
pub fn line_plot(path: &Path, series: &[&[(f64, f64)]]) -> Result<()> {
    let mut c = Canvas::new(640, 400);
    let xr = range(series.iter().flat_map(|s| s.iter().map(|p| p.0)));
    let yr = padded(range(series.iter().flat_map(|s| s.iter().map(|p| p.1))));
    let f = Frame::new(&c, xr, yr);
    f.draw_axes(&mut c);
    for (i, s) in series.iter().enumerate() {
        let col = PALETTE[i % PALETTE.len()];
        for w in s.windows(2) {
            if w[0].1.is_finite() && w[1].1.is_finite() {
                c.line(f.to_pixel(w[0].0, w[0].1), f.to_pixel(w[1].0, w[1].1), col);
            }
        }
    }
    c.save_png(path)
}

/// 2D scatter of row-major `(x, y)` pairs; each set gets its own colour.
pub fn scatter_plot(path: &Path, sets: &[&[f64]], x_range: (f64, f64), y_range: (f64, f64)) -> Result<()> {
    let mut c = Canvas::new(500, 500);
    let f = Frame::new(&c, x_range, y_range);
    f.draw_axes(&mut c);
    for (i, s) in sets.iter().enumerate() {
        let col = PALETTE[i % PALETTE.len()];
        for p in s.chunks_exact(2) {
            let (x, y) = f.to_pixel(p[0], p[1]);
            c.set(x, y, col);
        }
    }
    c.save_png(path)
}

/// Overlaid step histograms, each given as bin heights over `[lo, hi]`.
pub fn histogram_plot(path: &Path, hists: &[&[f64]], lo: f64, hi: f64) -> Result<()> {
    let mut c = Canvas::new(640, 400);
    let top = hists.iter().flat_map(|h| h.iter().copied()).fold(0.0, f64::max);
    let f = Frame::new(&c, (lo, hi), (0.0, top * 1.05));
    f.draw_axes(&mut c);
    for (i, h) in hists.iter().enumerate() {
        let col = PALETTE[i % PALETTE.len()];
        let w = (hi - lo) / h.len() as f64;
        let mut prev = f.to_pixel(lo, 0.0);
        for (b, &v) in h.iter().enumerate() {
            let a = f.to_pixel(lo + b as f64 * w, v);
            let z = f.to_pixel(lo + (b + 1) as f64 * w, v);
            c.line(prev, a, col);
            c.line(a, z, col);
            prev = z;
        }
        c.line(prev, f.to_pixel(hi, 0.0), col);
    }
    c.save_png(path)
}

/// Row-major grid drawn with a dark-to-bright colour ramp, `scale` pixels per cell.
pub fn heatmap(path: &Path, values: &[f64], rows: usize, cols: usize, scale: usize) -> Result<()> {
    let mut c = Canvas::new(cols * scale, rows * scale);
    let (lo, hi) = range(values.iter().copied());
    let span = if hi > lo { hi - lo } else { 1.0 };
    for r in 0..rows {
        for col in 0..cols {
            let v = values[r * cols + col];
            let u = if v.is_finite() { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
            let x = (col * scale) as i64;
            let y = (r * scale) as i64;
            c.fill_rect(x, y, x + scale as i64 - 1, y + scale as i64 - 1, ramp(u));
        }
    }
    c.save_png(path)
}

/// Grayscale image grid: `images` are `h*w` tiles laid out `per_row` across.
pub fn image_grid(path: &Path, images: &[&[f64]], h: usize, w: usize, per_row: usize, scale: usize) -> Result<()> {
    let per_row = per_row.max(1);
    let rows = images.len().div_ceil(per_row).max(1);
    let gap = 1;
    let mut c = Canvas::new(per_row * (w * scale + gap) + gap, rows * (h * scale + gap) + gap);
    c.fill_rect(0, 0, c.width as i64 - 1, c.height as i64 - 1, [90, 90, 90]);
    for (k, img) in images.iter().enumerate() {
        let ox = gap + (k % per_row) * (w * scale + gap);
        let oy = gap + (k / per_row) * (h * scale + gap);
        for y in 0..h {
            for x in 0..w {
                let v = (img[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                let (px, py) = ((ox + x * scale) as i64, (oy + y * scale) as i64);
                c.fill_rect(px, py, px + scale as i64 - 1, py + scale as i64 - 1, [v, v, v]);
            }
        }
    }
    c.save_png(path)
}

/// Black through purple and orange to yellow.
pub fn ramp(u: f64) -> Rgb {
    const STOPS: [(f64, Rgb); 4] = [(0.0, [0, 0, 4]), (0.4, [120, 28, 109]), (0.7, [237, 105, 37]), (1.0, [252, 255, 164])];
    let u = u.clamp(0.0, 1.0);
    let i = STOPS.iter().rposition(|s| s.0 <= u).unwrap_or(0).min(STOPS.len() - 2);
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let w = (u - a.0) / (b.0 - a.0);
    let mix = |k: usize| (a.1[k] as f64 + w * (b.1[k] as f64 - a.1[k] as f64)).round() as u8;
    [mix(0), mix(1), mix(2)]
}
