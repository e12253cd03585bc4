//! Synthetic polygon images and a rule-based classifier for them.
//!
//! Images are grayscale, filled white polygons on black. Each generated image
//! holds a nonempty subset of {triangle, square, pentagon}, one of each at
//! most. The classifier binarizes, splits into 8-connected components,
//! reduces each component to a simplified convex polygon and counts vertices.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Triangle,
    Square,
    Pentagon,
    /// Never produced by the regular generator; used for adversarial inputs.
    Hexagon,
}

impl ShapeKind {
    pub const VALID: [ShapeKind; 3] = [ShapeKind::Triangle, ShapeKind::Square, ShapeKind::Pentagon];

    pub fn vertices(self) -> usize {
        match self {
            ShapeKind::Triangle => 3,
            ShapeKind::Square => 4,
            ShapeKind::Pentagon => 5,
            ShapeKind::Hexagon => 6,
        }
    }

    pub fn from_vertices(n: usize) -> Option<Self> {
        match n {
            3 => Some(ShapeKind::Triangle),
            4 => Some(ShapeKind::Square),
            5 => Some(ShapeKind::Pentagon),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Triangle => "triangle",
            ShapeKind::Square => "square",
            ShapeKind::Pentagon => "pentagon",
            ShapeKind::Hexagon => "hexagon",
        }
    }
}

/// A regular polygon placed on the canvas. `diameter` is twice the circumradius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub diameter: f64,
    pub rotation: f64,
}

impl Shape {
    pub fn corners(&self) -> Vec<(f64, f64)> {
        let n = self.kind.vertices();
        let r = self.diameter / 2.0;
        (0..n)
            .map(|i| {
                let a = self.rotation + std::f64::consts::TAU * i as f64 / n as f64;
                (self.cx + r * a.cos(), self.cy + r * a.sin())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesImage {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities, nominally in `[0, 1]`.
    pub pixels: Vec<f64>,
    /// Ground truth; empty for images that were not generated.
    pub shapes: Vec<Shape>,
}

impl ShapesImage {
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension {
                expected: height * width,
                got: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
            shapes: Vec::new(),
        })
    }

    /// Label implied by the ground-truth annotation.
    pub fn expected_label(&self) -> Label {
        expected_label(&self.shapes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Good,
    Hallucinated,
    UnknownShape,
    Blank,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Good, Label::Hallucinated, Label::UnknownShape, Label::Blank];
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Good => "Good",
            Label::Hallucinated => "Hallucinated",
            Label::UnknownShape => "Unknown Shape",
            Label::Blank => "Blank",
        })
    }
}

/// Hallucinated beats unknown beats good; blank only when nothing was detected.
pub fn label_for(kinds: impl IntoIterator<Item = Option<ShapeKind>>) -> Label {
    let mut counts: BTreeMap<ShapeKind, usize> = BTreeMap::new();
    let mut unknown = false;
    let mut any = false;
    for k in kinds {
        any = true;
        match k {
            Some(k) => *counts.entry(k).or_default() += 1,
            None => unknown = true,
        }
    }
    if counts.values().any(|&c| c > 1) {
        Label::Hallucinated
    } else if unknown {
        Label::UnknownShape
    } else if any {
        Label::Good
    } else {
        Label::Blank
    }
}

pub fn expected_label(shapes: &[Shape]) -> Label {
    label_for(shapes.iter().map(|s| ShapeKind::from_vertices(s.kind.vertices())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub min_diameter: f64,
    pub max_diameter: f64,
    /// Minimum gap in pixels between the circumcircles of two shapes.
    pub separation: f64,
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            min_diameter: 8.0,
            max_diameter: 14.0,
            separation: 2.0,
            max_attempts: 100,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config(format!(
                "canvas must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.min_diameter > 0.0 && self.min_diameter <= self.max_diameter) {
            return Err(Error::config("need 0 < min_diameter <= max_diameter"));
        }
        if self.max_diameter + 2.0 > self.height.min(self.width) as f64 {
            return Err(Error::config("max_diameter does not fit on the canvas"));
        }
        if self.separation < 0.0 || self.max_attempts == 0 {
            return Err(Error::config("separation must be >= 0 and max_attempts > 0"));
        }
        Ok(())
    }
}

/// Places the given shapes without overlap. Each shape is retried up to
/// `max_attempts` times; if one cannot be placed the whole layout starts over
/// with fresh sizes.
pub fn layout<R: Rng + ?Sized>(kinds: &[ShapeKind], cfg: &GeneratorConfig, rng: &mut R) -> Vec<Shape> {
    'layout: loop {
        let mut placed: Vec<Shape> = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let mut ok = false;
            for _ in 0..cfg.max_attempts {
                let diameter = rng.random_range(cfg.min_diameter..=cfg.max_diameter);
                let r = diameter / 2.0;
                let cx = rng.random_range(r + 1.0..=cfg.width as f64 - r - 1.0);
                let cy = rng.random_range(r + 1.0..=cfg.height as f64 - r - 1.0);
                let clear = placed.iter().all(|p| {
                    let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
                    d >= r + p.diameter / 2.0 + cfg.separation
                });
                if clear {
                    let rotation = rng.random_range(0.0..std::f64::consts::TAU);
                    placed.push(Shape {
                        kind,
                        cx,
                        cy,
                        diameter,
                        rotation,
                    });
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'layout;
            }
        }
        return placed;
    }
}

/// Anti-aliased fill: each pixel takes the fraction of a 4x4 grid of
/// subsamples that falls inside one of the polygons.
pub fn render(shapes: &[Shape], height: usize, width: usize) -> Vec<f64> {
    const SUB: usize = 4;
    let mut px = vec![0.0; height * width];
    for s in shapes {
        let c = s.corners();
        let r = s.diameter / 2.0;
        let y0 = (s.cy - r).floor().max(0.0) as usize;
        let y1 = ((s.cy + r).ceil() as usize).min(height);
        let x0 = (s.cx - r).floor().max(0.0) as usize;
        let x1 = ((s.cx + r).ceil() as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let fx = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                        let fy = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                        if inside_convex(&c, fx, fy) {
                            hits += 1;
                        }
                    }
                }
                let v = &mut px[y * width + x];
                *v = (*v + hits as f64 / (SUB * SUB) as f64).min(1.0);
            }
        }
    }
    px
}

fn inside_convex(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = poly.len();
    (0..n).all(|i| {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % n];
        (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
    })
}

pub fn generate_image<R: Rng + ?Sized>(kinds: &[ShapeKind], cfg: &GeneratorConfig, rng: &mut R) -> ShapesImage {
    let shapes = layout(kinds, cfg, rng);
    ShapesImage {
        height: cfg.height,
        width: cfg.width,
        pixels: render(&shapes, cfg.height, cfg.width),
        shapes,
    }
}

/// A uniformly chosen nonempty subset of the three valid kinds.
pub fn random_subset<R: Rng + ?Sized>(rng: &mut R) -> Vec<ShapeKind> {
    let mask = rng.random_range(1..8u32);
    ShapeKind::VALID
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, k)| *k)
        .collect()
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `n` training images. Image `i` depends only on `(seed, i)`.
pub fn generate_dataset(n: usize, cfg: &GeneratorConfig, seed: u64) -> Result<Vec<ShapesImage>> {
    cfg.validate()?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = image_rng(seed, i);
            let kinds = random_subset(&mut rng);
            generate_image(&kinds, cfg, &mut rng)
        })
        .collect())
}

/// Labelled test corpus: regular images mixed with injected repeats
/// (a valid kind drawn twice) and hexagons. About a fifth of the images are
/// of each adversarial type.
pub fn generate_adversarial(n: usize, cfg: &GeneratorConfig, seed: u64) -> Result<Vec<ShapesImage>> {
    cfg.validate()?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = image_rng(seed, i);
            let mut kinds = random_subset(&mut rng);
            match rng.random_range(0..5u32) {
                0 => {
                    let k = ShapeKind::VALID[rng.random_range(0..3)];
                    if !kinds.contains(&k) {
                        kinds.push(k);
                    }
                    kinds.push(k);
                }
                1 => {
                    kinds.truncate(2);
                    kinds.push(ShapeKind::Hexagon);
                }
                _ => {}
            }
            generate_image(&kinds, cfg, &mut rng)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Components with fewer pixels are treated as noise.
    pub min_component: usize,
    /// Corner grouping reach as a fraction of the hull perimeter.
    pub tolerance: f64,
    /// Smallest total turn, in degrees, that counts as a corner.
    pub min_turn_deg: f64,
    /// Images whose Otsu class means differ by less than this have no foreground.
    pub min_contrast: f64,
    /// Sub-pixel factor used when tracing component outlines.
    pub upscale: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            min_component: 8,
            tolerance: 0.1,
            min_turn_deg: 30.0,
            min_contrast: 0.25,
            upscale: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub pixels: usize,
    pub vertices: usize,
    pub kind: Option<ShapeKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: Label,
    pub components: Vec<Component>,
}

/// Otsu threshold over 256 bins on `[0, 1]` (values are clamped), together
/// with the gap between the two class means.
pub fn otsu(pixels: &[f64]) -> (f64, f64) {
    let mut hist = [0usize; 256];
    for &p in pixels {
        let v = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
        hist[((v * 255.0).round()) as usize] += 1;
    }
    let total = pixels.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var, mut gap) = (0usize, -1.0, 0.0);
    for (i, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = i;
            gap = (m1 - m0) / 255.0;
        }
    }
    ((best as f64 + 0.5) / 255.0, gap)
}

/// 8-connected components of `mask`, as lists of `(x, y)`.
pub fn components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % width, i / width);
            comp.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
pub fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

pub fn perimeter(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        })
        .sum()
}

/// Corners of a convex polygon whose outline is only approximately
/// straight between them. Hull vertices are grouped around the sharpest
/// remaining turn, absorbing every vertex within `reach` arc length on either
/// side; a group whose total turn is at least `min_turn` radians is a corner.
pub fn hull_corners(hull: &[(f64, f64)], reach: f64, min_turn: f64) -> Vec<(f64, f64)> {
    let n = hull.len();
    if n < 3 {
        return hull.to_vec();
    }
    let turn: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b, c) = (hull[(i + n - 1) % n], hull[i], hull[(i + 1) % n]);
            let d1 = (b.1 - a.1).atan2(b.0 - a.0);
            let d2 = (c.1 - b.1).atan2(c.0 - b.0);
            (d2 - d1).rem_euclid(std::f64::consts::TAU)
        })
        .collect();
    let mut arc = vec![0.0; n];
    for i in 1..n {
        let (a, b) = (hull[i - 1], hull[i]);
        arc[i] = arc[i - 1] + ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    }
    let total = perimeter(hull);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| turn[b].total_cmp(&turn[a]).then(a.cmp(&b)));
    let mut taken = vec![false; n];
    let mut corners = Vec::new();
    for seed in order {
        if taken[seed] {
            continue;
        }
        let mut sum = 0.0;
        for j in 0..n {
            let d = (arc[j] - arc[seed]).abs();
            if !taken[j] && d.min(total - d) <= reach {
                taken[j] = true;
                sum += turn[j];
            }
        }
        if sum >= min_turn {
            corners.push((seed, hull[seed]));
        }
    }
    corners.sort_by_key(|c| c.0);
    corners.into_iter().map(|c| c.1).collect()
}

/// Corner count of the convex hull of a set of points.
pub fn hull_vertices(points: Vec<(f64, f64)>, tolerance: f64, min_turn: f64) -> usize {
    let hull = convex_hull(points);
    let reach = tolerance * perimeter(&hull);
    hull_corners(&hull, reach, min_turn).len()
}

fn bilinear(pixels: &[f64], height: usize, width: usize, x: f64, y: f64) -> f64 {
    let fx = (x - 0.5).clamp(0.0, (width - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let at = |x: usize, y: usize| pixels[y * width + x];
    (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x1, y0)) + ay * ((1.0 - ax) * at(x0, y1) + ax * at(x1, y1))
}

/// Sub-pixel outline of one component: the image is bilinearly upsampled by
/// `upscale` around the component (and its one-pixel border) and
/// thresholded again; the corners of the surviving sub-cells are returned.
fn outline(img: &ShapesImage, comp: &[(usize, usize)], owner: &[usize], id: usize, threshold: f64, upscale: usize) -> Vec<(f64, f64)> {
    let (h, w) = (img.height, img.width);
    let near = |x: usize, y: usize| {
        (y.saturating_sub(1)..(y + 2).min(h)).any(|ny| (x.saturating_sub(1)..(x + 2).min(w)).any(|nx| owner[ny * w + nx] == id))
    };
    let mut cells: Vec<(usize, usize)> = comp.to_vec();
    for &(x, y) in comp {
        for ny in y.saturating_sub(1)..(y + 2).min(h) {
            for nx in x.saturating_sub(1)..(x + 2).min(w) {
                if owner[ny * w + nx] == usize::MAX && near(nx, ny) {
                    cells.push((nx, ny));
                }
            }
        }
    }
    cells.sort_unstable();
    cells.dedup();
    let step = 1.0 / upscale as f64;
    let mut pts = Vec::new();
    for (x, y) in cells {
        for sy in 0..upscale {
            for sx in 0..upscale {
                let u = x as f64 + sx as f64 * step;
                let v = y as f64 + sy as f64 * step;
                if bilinear(&img.pixels, h, w, u + step / 2.0, v + step / 2.0) > threshold {
                    pts.extend([(u, v), (u + step, v), (u, v + step), (u + step, v + step)]);
                }
            }
        }
    }
    pts
}

pub fn classify(img: &ShapesImage, cfg: &ClassifierConfig) -> Classification {
    let (threshold, gap) = otsu(&img.pixels);
    let comps: Vec<_> = if gap < cfg.min_contrast {
        Vec::new()
    } else {
        let mask: Vec<bool> = img.pixels.iter().map(|&p| p > threshold).collect();
        components(&mask, img.height, img.width)
            .into_iter()
            .filter(|c| c.len() >= cfg.min_component)
            .collect()
    };
    let mut owner = vec![usize::MAX; img.pixels.len()];
    for (id, c) in comps.iter().enumerate() {
        for &(x, y) in c {
            owner[y * img.width + x] = id;
        }
    }
    let components: Vec<Component> = comps
        .iter()
        .enumerate()
        .map(|(id, c)| {
            let pts = outline(img, c, &owner, id, threshold, cfg.upscale.max(1));
            let vertices = hull_vertices(pts, cfg.tolerance, cfg.min_turn_deg.to_radians());
            Component {
                pixels: c.len(),
                vertices,
                kind: ShapeKind::from_vertices(vertices),
            }
        })
        .collect();
    Classification {
        label: label_for(components.iter().map(|c| c.kind)),
        components,
    }
}

/// Count of each label, in `Label::ALL` order.
pub fn label_counts(labels: &[Label]) -> [usize; 4] {
    let mut out = [0; 4];
    for l in labels {
        out[Label::ALL.iter().position(|a| a == l).expect("known label")] += 1;
    }
    out
}

/// Binary 8-bit graymap.
pub fn write_pgm(path: &Path, img: &ShapesImage) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<ShapesImage> {
    let bad = |msg: &str| Error::Image(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut fields = Vec::new();
    let mut line = String::new();
    while fields.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        let content = line.split('#').next().unwrap_or("");
        fields.extend(content.split_whitespace().map(str::to_owned));
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 graymaps are supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    let mut bytes = vec![0u8; width * height];
    r.read_exact(&mut bytes).map_err(|_| bad("truncated pixel data"))?;
    let pixels = bytes.iter().map(|&b| b as f64 / maxval as f64).collect();
    ShapesImage::from_pixels(height, width, pixels)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRow {
    file: String,
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    diameter: f64,
    rotation: f64,
}

/// Writes `img_00000.pgm`, ... and `manifest.csv` (one row per shape).
pub fn save_dataset(dir: &Path, images: &[ShapesImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    for (i, img) in images.iter().enumerate() {
        let file = format!("img_{i:05}.pgm");
        write_pgm(&dir.join(&file), img)?;
        for s in &img.shapes {
            w.serialize(ManifestRow {
                file: file.clone(),
                kind: s.kind,
                cx: s.cx,
                cy: s.cy,
                diameter: s.diameter,
                rotation: s.rotation,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads every `.pgm` in `dir` (sorted by name), attaching annotations from
/// `manifest.csv` when present.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, ShapesImage)>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    names.sort();
    let mut annotations: BTreeMap<String, Vec<Shape>> = BTreeMap::new();
    let manifest = dir.join("manifest.csv");
    if manifest.exists() {
        for row in csv::Reader::from_path(&manifest)?.deserialize() {
            let row: ManifestRow = row?;
            annotations.entry(row.file).or_default().push(Shape {
                kind: row.kind,
                cx: row.cx,
                cy: row.cy,
                diameter: row.diameter,
                rotation: row.rotation,
            });
        }
    }
    names
        .into_iter()
        .map(|n| {
            let mut img = read_pgm(&dir.join(&n))?;
            img.shapes = annotations.remove(&n).unwrap_or_default();
            Ok((n, img))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig::default()
    }

    #[test]
    fn no_repeats_and_deterministic() {
        let a = generate_dataset(300, &cfg(), 5).unwrap();
        let b = generate_dataset(300, &cfg(), 5).unwrap();
        assert_eq!(a, b);
        for img in &a {
            let mut kinds: Vec<_> = img.shapes.iter().map(|s| s.kind).collect();
            assert!(!kinds.is_empty());
            kinds.sort();
            kinds.dedup();
            assert_eq!(kinds.len(), img.shapes.len());
            assert_eq!(img.expected_label(), Label::Good);
        }
    }

    #[test]
    fn subset_sizes_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut counts = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(random_subset(&mut rng)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 7);
        let p = 1.0 / 7.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn rule_examples() {
        let c = ClassifierConfig::default();
        let blank = ShapesImage::from_pixels(32, 32, vec![0.0; 1024]).unwrap();
        assert_eq!(classify(&blank, &c).label, Label::Blank);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use ShapeKind::*;
        for (kinds, want) in [
            (vec![Triangle, Square], Label::Good),
            (vec![Square, Square], Label::Hallucinated),
            (vec![Hexagon], Label::UnknownShape),
            (vec![Hexagon, Pentagon, Pentagon], Label::Hallucinated),
        ] {
            let img = generate_image(&kinds, &cfg(), &mut rng);
            assert_eq!(img.expected_label(), want);
            assert_eq!(classify(&img, &c).label, want, "{kinds:?}");
        }
    }

    #[test]
    fn speckle_is_ignored() {
        let mut px = vec![0.0; 1024];
        px[40] = 1.0;
        px[41] = 1.0;
        px[500] = 1.0;
        let img = ShapesImage::from_pixels(32, 32, px).unwrap();
        assert_eq!(classify(&img, &ClassifierConfig::default()).label, Label::Blank);
    }

    #[test]
    fn low_contrast_noise_is_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let px = (0..1024).map(|_| rng.random_range(0.0..0.1)).collect();
        let img = ShapesImage::from_pixels(32, 32, px).unwrap();
        assert_eq!(classify(&img, &ClassifierConfig::default()).label, Label::Blank);
    }

    #[test]
    fn corners_of_clean_polygons() {
        for kind in [ShapeKind::Triangle, ShapeKind::Square, ShapeKind::Pentagon, ShapeKind::Hexagon] {
            let s = Shape {
                kind,
                cx: 0.0,
                cy: 0.0,
                diameter: 10.0,
                rotation: 0.4,
            };
            let hull = convex_hull(s.corners());
            assert_eq!(hull_corners(&hull, 0.1 * perimeter(&hull), 0.5).len(), kind.vertices());
            let dense: Vec<_> = hull
                .iter()
                .zip(hull.iter().cycle().skip(1))
                .flat_map(|(a, b)| (0..10).map(move |i| {
                    let u = i as f64 / 10.0;
                    (a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1))
                }))
                .collect();
            assert_eq!(hull_vertices(dense, 0.1, 0.5), kind.vertices());
        }
    }

    #[test]
    fn corner_count_is_start_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = layout(&[ShapeKind::Pentagon], &cfg(), &mut rng)[0];
        let img = ShapesImage {
            height: 32,
            width: 32,
            pixels: render(&[s], 32, 32),
            shapes: vec![s],
        };
        let pts: Vec<(f64, f64)> = (0..1024)
            .filter(|&i| img.pixels[i] > 0.5)
            .map(|i| ((i % 32) as f64 + 0.5, (i / 32) as f64 + 0.5))
            .collect();
        let hull = convex_hull(pts);
        let reach = 0.1 * perimeter(&hull);
        let base = hull_corners(&hull, reach, 0.5).len();
        for r in 1..hull.len() {
            let mut h = hull.clone();
            h.rotate_left(r);
            assert_eq!(hull_corners(&h, reach, 0.5).len(), base);
        }
    }

    #[test]
    fn adversarial_corpus_is_classified_exactly() {
        let imgs = generate_adversarial(500, &cfg(), 21).unwrap();
        let c = ClassifierConfig::default();
        let labels: Vec<Label> = imgs.iter().map(|i| i.expected_label()).collect();
        assert!(labels.contains(&Label::Hallucinated) && labels.contains(&Label::UnknownShape));
        for (img, want) in imgs.iter().zip(labels) {
            assert_eq!(classify(img, &c).label, want);
        }
    }

    #[test]
    fn pgm_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_dataset(5, &cfg(), 11).unwrap();
        save_dataset(dir.path(), &imgs).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        for ((name, b), a) in back.iter().zip(&imgs) {
            assert!(name.ends_with(".pgm"));
            assert!(b.pixels.iter().zip(&a.pixels).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
            assert_eq!(b.shapes, a.shapes);
        }
    }
}
