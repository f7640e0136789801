//! Model clouds from images and meshes, plus built-in synthetic targets.

use crate::cloud::{CloudPoint, PointCloud};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::Vec3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const MM_PER_INCH: f64 = 25.4;
/// Height (mm) of the plane carrying an image target in its own frame.
pub const IMAGE_PLANE_Z: f64 = 1.0;
pub const DEFAULT_INTENSITY_MIN: f64 = 0.5;
const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Row-major grayscale image; pixel `(u, v)` is column `u`, row `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub dpi: f64,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, dpi: f64, pixels: Vec<f64>) -> Result<Self> {
        if width * height != pixels.len() {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if !(dpi > 0.0 && dpi.is_finite()) {
            return Err(Error::InvalidArgument(format!("dpi must be positive, got {dpi}")));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixel intensities must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            dpi,
            pixels,
        })
    }

    pub fn mm_per_pixel(&self) -> f64 {
        MM_PER_INCH / self.dpi
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.pixels[v * self.width + u]
    }

    /// Intensity at a metric position on the image plane. Pixel `(u, v)` is
    /// centred on `(u, v)·mm/px`; positions outside the image return `None`.
    pub fn sample_mm(&self, x: f64, y: f64) -> Option<f64> {
        let s = self.mm_per_pixel();
        let u = (x / s + 0.5).floor();
        let v = (y / s + 0.5).floor();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some(self.get(u as usize, v as usize))
    }

    /// Metric extent `[(xmin, ymin), (xmax, ymax)]` of the printed image.
    pub fn extent_mm(&self) -> ((f64, f64), (f64, f64)) {
        let s = self.mm_per_pixel();
        (
            (-0.5 * s, -0.5 * s),
            ((self.width as f64 - 0.5) * s, (self.height as f64 - 0.5) * s),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            triangles,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.triangles.is_empty() {
            return Err(Error::InvalidArgument("mesh has no triangles".into()));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= self.vertices.len()) {
                return Err(Error::InvalidArgument(format!("triangle {t} has an out-of-range index")));
            }
            if self.triangle_area(t) <= MIN_TRIANGLE_AREA {
                return Err(Error::InvalidArgument(format!("triangle {t} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let first = self.vertices[0];
        self.vertices
            .iter()
            .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v)))
    }

    fn push_quad(&mut self, q: [Vec3; 4]) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&q);
        self.triangles.push([base, base + 1, base + 2]);
        self.triangles.push([base, base + 2, base + 3]);
    }
}

/// Model cloud from an image: one point per pixel with intensity ≥ `intensity_min`.
pub fn image_to_model_cloud(img: &GrayImage, intensity_min: f64) -> PointCloud {
    let s = img.mm_per_pixel();
    let mut points = Vec::new();
    for v in 0..img.height {
        for u in 0..img.width {
            let i = img.get(u, v);
            if i >= intensity_min {
                points.push(CloudPoint::with_intensity(
                    Vec3::new(u as f64 * s, v as f64 * s, IMAGE_PLANE_Z),
                    i,
                ));
            }
        }
    }
    PointCloud::new("C", points).expect("static frame label")
}

/// Area-weighted uniform surface sampling with `samples_per_mm2` expected density.
///
/// Each triangle draws from its own RNG substream `(seed, triangle index)`: it
/// emits `floor(area·density)` points plus one more with probability equal to
/// the fractional part.
pub fn mesh_to_model_cloud(mesh: &TriMesh, samples_per_mm2: f64, seed: u64) -> Result<PointCloud> {
    mesh.validate()?;
    if !(samples_per_mm2 > 0.0 && samples_per_mm2.is_finite()) {
        return Err(Error::InvalidArgument("sampling density must be positive".into()));
    }
    let mut points = Vec::new();
    for t in 0..mesh.triangles.len() {
        let mut rng = substream(seed, &[0x5EED_u64, t as u64]);
        let expected = mesh.triangle_area(t) * samples_per_mm2;
        let mut n = expected.floor() as usize;
        if rng.gen::<f64>() < expected - expected.floor() {
            n += 1;
        }
        let [a, b, c] = mesh.corners(t);
        for _ in 0..n {
            let r1: f64 = rng.gen::<f64>().sqrt();
            let r2: f64 = rng.gen();
            let p = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
            points.push(CloudPoint::with_intensity(p, 1.0));
        }
    }
    PointCloud::new("C", points)
}

/// Built-in synthetic targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticTarget {
    /// High-contrast binary image, asymmetric under every rotation and flip.
    FlatLogo { size_px: usize, dpi: f64 },
    /// Corner staircase on a `base_x × base_y` footprint: an `steps × steps`
    /// grid of cells whose top height drops by `step_height` with
    /// `max(i, j)`. The footprint is centred on the target origin, bottom at z = 0.
    StepBlock {
        base_x: f64,
        base_y: f64,
        steps: usize,
        step_height: f64,
    },
    /// Ramp rising along x with `slope`, centred on the origin in x and y.
    Wedge { length: f64, width: f64, slope: f64 },
}

impl Default for SyntheticTarget {
    fn default() -> Self {
        SyntheticTarget::StepBlock {
            base_x: 100.0,
            base_y: 100.0,
            steps: 3,
            step_height: 10.0,
        }
    }
}

/// A target's geometry: a triangle mesh or a printed image.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetGeometry {
    Mesh(TriMesh),
    Image(GrayImage),
}

impl TargetGeometry {
    pub fn is_image(&self) -> bool {
        matches!(self, TargetGeometry::Image(_))
    }
}

pub fn synth_target(kind: &SyntheticTarget) -> Result<TargetGeometry> {
    match *kind {
        SyntheticTarget::FlatLogo { size_px, dpi } => flat_logo(size_px, dpi).map(TargetGeometry::Image),
        SyntheticTarget::StepBlock {
            base_x,
            base_y,
            steps,
            step_height,
        } => step_block(base_x, base_y, steps, step_height).map(TargetGeometry::Mesh),
        SyntheticTarget::Wedge {
            length,
            width,
            slope,
        } => wedge(length, width, slope).map(TargetGeometry::Mesh),
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

fn step_block(base_x: f64, base_y: f64, steps: usize, step_height: f64) -> Result<TriMesh> {
    check_positive("base_x", base_x)?;
    check_positive("base_y", base_y)?;
    check_positive("step_height", step_height)?;
    if !(1..=64).contains(&steps) {
        return Err(Error::InvalidArgument(format!("steps must be in 1..=64, got {steps}")));
    }
    let n = steps;
    let xs: Vec<f64> = (0..=n).map(|i| -0.5 * base_x + base_x * i as f64 / n as f64).collect();
    let ys: Vec<f64> = (0..=n).map(|j| -0.5 * base_y + base_y * j as f64 / n as f64).collect();
    let height = |i: usize, j: usize| step_height * (n - i.max(j)) as f64;

    let mut mesh = TriMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
    };
    let v = Vec3::new;
    // Bottom, facing -z.
    let (x0, x1, y0, y1) = (xs[0], xs[n], ys[0], ys[n]);
    mesh.push_quad([v(x0, y0, 0.0), v(x0, y1, 0.0), v(x1, y1, 0.0), v(x1, y0, 0.0)]);
    for i in 0..n {
        for j in 0..n {
            let h = height(i, j);
            let (xa, xb, ya, yb) = (xs[i], xs[i + 1], ys[j], ys[j + 1]);
            mesh.push_quad([v(xa, ya, h), v(xb, ya, h), v(xb, yb, h), v(xa, yb, h)]);
            // Wall on the +x side of the cell, down to the neighbour (or the floor).
            let hx = if i + 1 < n { height(i + 1, j) } else { 0.0 };
            if h > hx {
                mesh.push_quad([v(xb, ya, hx), v(xb, yb, hx), v(xb, yb, h), v(xb, ya, h)]);
            }
            let hy = if j + 1 < n { height(i, j + 1) } else { 0.0 };
            if h > hy {
                mesh.push_quad([v(xa, yb, hy), v(xa, yb, h), v(xb, yb, h), v(xb, yb, hy)]);
            }
            if i == 0 {
                mesh.push_quad([v(xa, ya, 0.0), v(xa, ya, h), v(xa, yb, h), v(xa, yb, 0.0)]);
            }
            if j == 0 {
                mesh.push_quad([v(xa, ya, 0.0), v(xb, ya, 0.0), v(xb, ya, h), v(xa, ya, h)]);
            }
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

fn wedge(length: f64, width: f64, slope: f64) -> Result<TriMesh> {
    check_positive("length", length)?;
    check_positive("width", width)?;
    check_positive("slope", slope)?;
    let (x0, x1) = (-0.5 * length, 0.5 * length);
    let (y0, y1) = (-0.5 * width, 0.5 * width);
    let top = slope * length;
    let v = Vec3::new;
    let mut mesh = TriMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
    };
    mesh.push_quad([v(x0, y0, 0.0), v(x0, y1, 0.0), v(x1, y1, 0.0), v(x1, y0, 0.0)]);
    mesh.push_quad([v(x0, y0, 0.0), v(x1, y0, top), v(x1, y1, top), v(x0, y1, 0.0)]);
    mesh.push_quad([v(x1, y0, 0.0), v(x1, y1, 0.0), v(x1, y1, top), v(x1, y0, top)]);
    let base = mesh.vertices.len();
    mesh.vertices
        .extend_from_slice(&[v(x0, y0, 0.0), v(x1, y0, 0.0), v(x1, y0, top)]);
    mesh.vertices
        .extend_from_slice(&[v(x0, y1, 0.0), v(x1, y1, top), v(x1, y1, 0.0)]);
    mesh.triangles.push([base, base + 1, base + 2]);
    mesh.triangles.push([base + 3, base + 4, base + 5]);
    mesh.validate()?;
    Ok(mesh)
}

fn flat_logo(size_px: usize, dpi: f64) -> Result<GrayImage> {
    if !(16..=4096).contains(&size_px) {
        return Err(Error::InvalidArgument(format!("logo size must be in 16..=4096 px, got {size_px}")));
    }
    check_positive("dpi", dpi)?;
    let n = size_px as f64;
    // Normalized coordinates in [0, 1).
    let bright = |x: f64, y: f64| -> bool {
        // Letter "F": stem plus two arms of unequal length.
        let stem = (0.10..0.24).contains(&x) && (0.10..0.90).contains(&y);
        let top_arm = (0.10..0.70).contains(&x) && (0.10..0.24).contains(&y);
        let mid_arm = (0.10..0.50).contains(&x) && (0.44..0.56).contains(&y);
        // Disc off to one side.
        let disc = (x - 0.70).powi(2) + (y - 0.72).powi(2) < 0.15f64.powi(2);
        // Small square near the top-right corner.
        let dot = (0.80..0.90).contains(&x) && (0.34..0.44).contains(&y);
        stem || top_arm || mid_arm || disc || dot
    };
    let mut pixels = Vec::with_capacity(size_px * size_px);
    for v in 0..size_px {
        for u in 0..size_px {
            let on = bright((u as f64 + 0.5) / n, (v as f64 + 0.5) / n);
            pixels.push(if on { 1.0 } else { 0.0 });
        }
    }
    GrayImage::new(size_px, size_px, dpi, pixels)
}

/// ASCII PGM (P2) with a `# dpi <value>` comment.
pub fn write_pgm(img: &GrayImage) -> String {
    let maxval = 255u32;
    let mut s = format!("P2\n# dpi {}\n{} {}\n{}\n", img.dpi, img.width, img.height, maxval);
    for v in 0..img.height {
        let row: Vec<String> = (0..img.width)
            .map(|u| ((img.get(u, v) * maxval as f64).round() as u32).to_string())
            .collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn parse_pgm(text: &str) -> Result<GrayImage> {
    let mut dpi = None;
    let mut tokens: Vec<(usize, &str)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (content, comment) = match line.find('#') {
            Some(k) => (&line[..k], Some(&line[k + 1..])),
            None => (line, None),
        };
        if let Some(c) = comment {
            let mut it = c.split_whitespace();
            if it.next() == Some("dpi") {
                let v = it
                    .next()
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| Error::parse(i + 1, "malformed dpi comment"))?;
                dpi = Some(v);
            }
        }
        tokens.extend(content.split_whitespace().map(|t| (i + 1, t)));
    }
    let mut it = tokens.into_iter();
    match it.next() {
        Some((_, "P2")) => {}
        Some((ln, _)) => return Err(Error::parse(ln, "only ASCII PGM (P2) is supported")),
        None => return Err(Error::parse(1, "empty file")),
    }
    let mut num = |what: &str| -> Result<(usize, u64)> {
        let (ln, t) = it
            .next()
            .ok_or_else(|| Error::parse(0, format!("unexpected end of file reading {what}")))?;
        t.parse::<u64>()
            .map(|v| (ln, v))
            .map_err(|_| Error::parse(ln, format!("non-numeric {what} '{t}'")))
    };
    let (_, w) = num("width")?;
    let (_, h) = num("height")?;
    let (ln, maxval) = num("maxval")?;
    if maxval == 0 {
        return Err(Error::parse(ln, "maxval must be positive"));
    }
    let mut pixels = Vec::with_capacity((w * h) as usize);
    for _ in 0..w * h {
        let (ln, p) = num("pixel")?;
        if p > maxval {
            return Err(Error::parse(ln, "pixel exceeds maxval"));
        }
        pixels.push(p as f64 / maxval as f64);
    }
    let dpi = dpi.ok_or_else(|| Error::parse(0, "missing '# dpi <value>' comment"))?;
    GrayImage::new(w as usize, h as usize, dpi, pixels)
}

pub fn write_off(mesh: &TriMesh) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertices.len(), mesh.triangles.len());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

pub fn parse_off(text: &str) -> Result<TriMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, "OFF")) => {}
        Some((ln, _)) => return Err(Error::parse(ln, "missing OFF magic")),
        None => return Err(Error::parse(1, "empty file")),
    }
    let (ln, counts) = lines
        .next()
        .ok_or_else(|| Error::parse(0, "missing counts line"))?;
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(ln, format!("bad count '{t}'"))))
        .collect::<Result<_>>()?;
    if counts.len() < 2 {
        return Err(Error::parse(ln, "counts line needs vertex and face counts"));
    }
    let mut vertices = Vec::with_capacity(counts[0]);
    for _ in 0..counts[0] {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| Error::parse(0, "missing vertex rows"))?;
        let c: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::parse(ln, format!("non-numeric '{t}'"))))
            .collect::<Result<_>>()?;
        if c.len() < 3 {
            return Err(Error::parse(ln, "vertex needs 3 coordinates"));
        }
        vertices.push(Vec3::new(c[0], c[1], c[2]));
    }
    let mut triangles = Vec::new();
    for _ in 0..counts[1] {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| Error::parse(0, "missing face rows"))?;
        let idx: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::parse(ln, format!("bad index '{t}'"))))
            .collect::<Result<_>>()?;
        if idx.is_empty() || idx[0] < 3 || idx.len() != idx[0] + 1 {
            return Err(Error::parse(ln, "malformed face row"));
        }
        // Fan-triangulate polygons.
        for k in 1..idx[0] - 1 {
            triangles.push([idx[1], idx[k + 1], idx[k + 2]]);
        }
    }
    TriMesh::new(vertices, triangles)
}

pub fn load_image(path: &Path) -> Result<GrayImage> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&text).map_err(|e| e.with_path(path))
}

pub fn save_image(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, write_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_off(&text).map_err(|e| e.with_path(path))
}

pub fn save_mesh(mesh: &TriMesh, path: &Path) -> Result<()> {
    fs::write(path, write_off(mesh)).map_err(|e| Error::io(path, e))
}
