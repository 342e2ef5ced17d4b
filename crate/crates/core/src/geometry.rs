//! Slice images and toolpath pairs: a minimal STL slicer plus a parametric
//! generator of simple layer shapes with perimeter and infill toolpaths.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gcode::{Keypoint, LayerToolpath};

/// Side length of every slice image, in pixels.
pub const IMAGE_SIZE: usize = 224;
/// Fraction of the image's side covered by the contour's larger extent.
pub const FRAME_FILL: f64 = 0.9;
/// Endpoint matching tolerance when chaining slice segments, in mm.
pub const CHAIN_EPS: f64 = 1e-6;
/// Filament advanced per mm of deposited path in synthetic toolpaths.
pub const EXTRUSION_PER_MM: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("STL file truncated: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("not an STL file: {0}")]
    BadMagic(String),
    #[error("slice height {z} outside mesh range [{min}, {max}]")]
    ZOutOfRange { z: f64, min: f64, max: f64 },
    #[error("open contour: gap of {gap} mm could not be closed")]
    OpenContour { gap: f64 },
    #[error("empty contour")]
    EmptyContour,
    #[error("unknown shape `{0}`")]
    UnknownShape(String),
    #[error("invalid shape parameters: {0}")]
    InvalidShape(String),
    #[error("PGM: {0}")]
    Pgm(String),
}

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub triangles: Vec<[Point3; 3]>,
}

impl TriangleMesh {
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for tri in &self.triangles {
            for v in tri {
                for i in 0..3 {
                    lo[i] = lo[i].min(v[i]);
                    hi[i] = hi[i].max(v[i]);
                }
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StlLoad {
    pub mesh: TriangleMesh,
    /// Zero-area triangles that were dropped.
    pub degenerate: usize,
}

fn tri_area2(t: &[Point3; 3]) -> f64 {
    let a = sub3(t[1], t[0]);
    let b = sub3(t[2], t[0]);
    let c = cross3(a, b);
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

fn sub3(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn parse_ascii_stl(text: &str) -> Option<Vec<[Point3; 3]>> {
    let mut tris = Vec::new();
    let mut verts: Vec<Point3> = Vec::with_capacity(3);
    let mut saw_facet = false;
    for line in text.lines() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("facet") => {
                saw_facet = true;
                verts.clear();
            }
            Some("vertex") => {
                let mut v: Point3 = [0.0; 3];
                for c in &mut v {
                    *c = it.next()?.parse().ok()?;
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return None;
                }
                verts.push(v);
            }
            Some("endfacet") => {
                if verts.len() != 3 {
                    return None;
                }
                tris.push([verts[0], verts[1], verts[2]]);
            }
            _ => {}
        }
    }
    saw_facet.then_some(tris)
}

/// Loads a binary or ASCII STL.
pub fn parse_stl(bytes: &[u8]) -> Result<StlLoad, GeometryError> {
    let looks_ascii = bytes.len() >= 5 && bytes[..5].eq_ignore_ascii_case(b"solid");
    if looks_ascii {
        if let Ok(text) = std::str::from_utf8(bytes) {
            if let Some(tris) = parse_ascii_stl(text) {
                return Ok(finish_load(tris));
            }
        }
        // Some binary exporters also start their header with "solid".
    }
    if bytes.len() < 84 {
        if looks_ascii {
            return Err(GeometryError::BadMagic("malformed ASCII STL".into()));
        }
        return Err(GeometryError::TruncatedFile {
            needed: 84,
            have: bytes.len(),
        });
    }
    let count = u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]]) as usize;
    let needed = 84usize.saturating_add(count.saturating_mul(50));
    if bytes.len() < needed {
        if looks_ascii {
            return Err(GeometryError::BadMagic("malformed ASCII STL".into()));
        }
        return Err(GeometryError::TruncatedFile {
            needed,
            have: bytes.len(),
        });
    }
    if bytes.len() > needed + 1024 {
        return Err(GeometryError::BadMagic(format!(
            "binary record count {count} inconsistent with {} bytes",
            bytes.len()
        )));
    }
    let mut tris = Vec::with_capacity(count);
    for i in 0..count {
        let rec = &bytes[84 + i * 50..84 + (i + 1) * 50];
        let f = |k: usize| {
            let o = 12 + 4 * k;
            f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64
        };
        let tri = [[f(0), f(1), f(2)], [f(3), f(4), f(5)], [f(6), f(7), f(8)]];
        if tri.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::BadMagic(format!("non-finite vertex in record {i}")));
        }
        tris.push(tri);
    }
    Ok(finish_load(tris))
}

fn finish_load(tris: Vec<[Point3; 3]>) -> StlLoad {
    let total = tris.len();
    let triangles: Vec<_> = tris.into_iter().filter(|t| tri_area2(t) > 1e-12).collect();
    let degenerate = total - triangles.len();
    StlLoad {
        mesh: TriangleMesh { triangles },
        degenerate,
    }
}

/// Serializes a mesh as binary STL (normals computed from winding).
pub fn write_binary_stl(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = vec![0u8; 80];
    out[..14].copy_from_slice(b"pathdiff mesh ");
    out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for t in &mesh.triangles {
        let n = cross3(sub3(t[1], t[0]), sub3(t[2], t[0]));
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-30);
        for c in n {
            out.extend_from_slice(&((c / len) as f32).to_le_bytes());
        }
        for v in t {
            for c in v {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&[0, 0]);
    }
    out
}

/// Closed planar loops; each loop repeats its first vertex at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceContour {
    pub loops: Vec<Vec<Point2>>,
}

pub fn signed_area(lp: &[Point2]) -> f64 {
    lp.windows(2)
        .map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1])
        .sum::<f64>()
        * 0.5
}

pub fn loop_length(lp: &[Point2]) -> f64 {
    lp.windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}

/// Even-odd point-in-polygon over all loops.
pub fn point_in_loops(loops: &[Vec<Point2>], p: Point2) -> bool {
    let mut inside = false;
    for lp in loops {
        for w in lp.windows(2) {
            let (a, b) = (w[0], w[1]);
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
    }
    inside
}

impl SliceContour {
    pub fn bounds(&self) -> Option<(Point2, Point2)> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut any = false;
        for p in self.loops.iter().flatten() {
            any = true;
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        any.then_some((lo, hi))
    }

    pub fn perimeter(&self) -> f64 {
        self.loops.iter().map(|l| loop_length(l)).sum()
    }

    /// Net enclosed area (holes subtract when oriented clockwise).
    pub fn area(&self) -> f64 {
        self.loops.iter().map(|l| signed_area(l)).sum()
    }

    /// Reorients loops so outer boundaries are counter-clockwise and holes
    /// clockwise, based on nesting depth.
    pub fn normalize_orientation(&mut self) {
        let snapshot = self.loops.clone();
        for (i, lp) in self.loops.iter_mut().enumerate() {
            let probe = lp[0];
            let depth = snapshot
                .iter()
                .enumerate()
                .filter(|(j, other)| *j != i && point_in_loops(std::slice::from_ref(*other), probe))
                .count();
            let want_positive = depth % 2 == 0;
            if (signed_area(lp) > 0.0) != want_positive {
                lp.reverse();
            }
        }
    }
}

/// Intersects a mesh with the plane `Z = z` and chains the segments into
/// closed loops.
pub fn slice_mesh(mesh: &TriangleMesh, z: f64) -> Result<SliceContour, GeometryError> {
    if mesh.triangles.is_empty() {
        return Err(GeometryError::EmptyContour);
    }
    let (lo, hi) = mesh.bounds();
    if !(z > lo[2] && z < hi[2]) {
        return Err(GeometryError::ZOutOfRange {
            z,
            min: lo[2],
            max: hi[2],
        });
    }

    let mut segments: Vec<(Point2, Point2)> = Vec::new();
    for tri in &mesh.triangles {
        let mut pts: Vec<Point2> = Vec::with_capacity(2);
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            // vertices on the plane count as above it
            let (ba, bb) = (a[2] < z, b[2] < z);
            if ba != bb {
                let s = (z - a[2]) / (b[2] - a[2]);
                pts.push([a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]);
            }
        }
        if pts.len() != 2 {
            continue;
        }
        let (mut p, mut q) = (pts[0], pts[1]);
        if (q[0] - p[0]).hypot(q[1] - p[1]) <= CHAIN_EPS {
            continue;
        }
        // Tangent of a CCW outer boundary is z x n.
        let n = cross3(sub3(tri[1], tri[0]), sub3(tri[2], tri[0]));
        let tangent = [-n[1], n[0]];
        if (q[0] - p[0]) * tangent[0] + (q[1] - p[1]) * tangent[1] < 0.0 {
            std::mem::swap(&mut p, &mut q);
        }
        segments.push((p, q));
    }
    if segments.is_empty() {
        return Err(GeometryError::EmptyContour);
    }

    let key = |p: Point2| ((p[0] / CHAIN_EPS).round() as i64, (p[1] / CHAIN_EPS).round() as i64);
    let mut by_start: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_start.entry(key(s.0)).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let find_next = |p: Point2, used: &[bool], by_start: &HashMap<(i64, i64), Vec<usize>>| {
        let (kx, ky) = key(p);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = by_start.get(&(kx + dx, ky + dy)) {
                    for &j in list {
                        if used[j] {
                            continue;
                        }
                        let s = segments[j].0;
                        let d = (s[0] - p[0]).hypot(s[1] - p[1]);
                        if d <= CHAIN_EPS && best.is_none_or(|(_, bd)| d < bd) {
                            best = Some((j, d));
                        }
                    }
                }
            }
        }
        best.map(|(j, _)| j)
    };

    let mut loops = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let first = segments[start].0;
        let mut lp = vec![first, segments[start].1];
        loop {
            let end = *lp.last().expect("loop has points");
            if lp.len() > 2 && (end[0] - first[0]).hypot(end[1] - first[1]) <= CHAIN_EPS {
                *lp.last_mut().expect("loop has points") = first;
                break;
            }
            match find_next(end, &used, &by_start) {
                Some(j) => {
                    used[j] = true;
                    lp.push(segments[j].1);
                }
                None => {
                    let gap = (end[0] - first[0]).hypot(end[1] - first[1]);
                    return Err(GeometryError::OpenContour { gap });
                }
            }
        }
        if lp.len() >= 4 {
            loops.push(lp);
        }
    }
    if loops.is_empty() {
        return Err(GeometryError::EmptyContour);
    }
    let mut contour = SliceContour { loops };
    contour.normalize_orientation();
    Ok(contour)
}

/// A square grayscale raster with its placement in the layer plane.
/// Row 0 is the top of the image (largest Y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    /// Row-major values in `[0, 1]`.
    pub pixels: Vec<f64>,
    /// mm per pixel.
    pub pixel_pitch: f64,
    /// Layer-plane coordinate of the image's bottom-left corner, in mm.
    pub origin: Point2,
}

impl SliceImage {
    pub fn blank() -> Self {
        Self {
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            pixels: vec![0.0; IMAGE_SIZE * IMAGE_SIZE],
            pixel_pitch: 1.0,
            origin: [0.0, 0.0],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn filled_fraction(&self) -> f64 {
        self.pixels.iter().filter(|&&v| v >= 0.5).count() as f64 / self.pixels.len() as f64
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        let _ = write!(out, "P5\n{} {}\n255\n", self.width, self.height);
        out.extend(
            self.pixels
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    /// Reads a binary PGM. Pitch and origin are not stored in the file and
    /// default to 1 mm and (0, 0).
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, GeometryError> {
        let (w, h, maxval, data) = parse_pgm(bytes)?;
        let pixels = data.iter().map(|&v| v as f64 / maxval as f64).collect();
        Ok(Self {
            width: w,
            height: h,
            pixels,
            pixel_pitch: 1.0,
            origin: [0.0, 0.0],
        })
    }
}

/// Parses a binary 8-bit PGM into (width, height, maxval, samples).
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, u32, Vec<u8>), GeometryError> {
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(GeometryError::Pgm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(GeometryError::Pgm(format!("unsupported magic `{}`", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| GeometryError::Pgm(format!("bad number `{s}`")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(GeometryError::Pgm(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let n = w * h;
    if bytes.len() < pos + n {
        return Err(GeometryError::Pgm("truncated pixel data".into()));
    }
    Ok((w, h, maxval as u32, bytes[pos..pos + n].to_vec()))
}

/// Placement used by [`rasterize`]: pitch and bottom-left origin that center
/// the bounding box and scale its larger side to [`FRAME_FILL`] of the image.
pub fn frame_for(lo: Point2, hi: Point2) -> Option<(f64, Point2)> {
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if !(extent > 0.0 && extent.is_finite()) {
        return None;
    }
    let pitch = extent / (FRAME_FILL * IMAGE_SIZE as f64);
    let cx = 0.5 * (lo[0] + hi[0]);
    let cy = 0.5 * (lo[1] + hi[1]);
    let half = 0.5 * IMAGE_SIZE as f64 * pitch;
    Some((pitch, [cx - half, cy - half]))
}

/// Even-odd scanline fill of the contour onto a 224x224 grid. A pixel is
/// filled when its center lies inside.
pub fn rasterize(contour: &SliceContour) -> Result<SliceImage, GeometryError> {
    let (lo, hi) = contour.bounds().ok_or(GeometryError::EmptyContour)?;
    let (pitch, origin) = frame_for(lo, hi).ok_or(GeometryError::EmptyContour)?;
    let n = IMAGE_SIZE;
    let mut pixels = vec![0.0; n * n];
    let mut xs: Vec<f64> = Vec::new();
    for row in 0..n {
        let y = origin[1] + (n - row) as f64 * pitch - 0.5 * pitch;
        xs.clear();
        for lp in &contour.loops {
            for w in lp.windows(2) {
                let (a, b) = (w[0], w[1]);
                if (a[1] > y) != (b[1] > y) {
                    xs.push(a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
                }
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks_exact(2) {
            // pixel centers x_c = origin + (col + 0.5) pitch inside [pair0, pair1)
            let c0 = ((pair[0] - origin[0]) / pitch - 0.5).ceil().max(0.0) as usize;
            let c1 = ((pair[1] - origin[0]) / pitch - 0.5).ceil().clamp(0.0, n as f64) as usize;
            for col in c0..c1.min(n) {
                pixels[row * n + col] = 1.0;
            }
        }
    }
    Ok(SliceImage {
        width: n,
        height: n,
        pixels,
        pixel_pitch: pitch,
        origin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Square { side: f64 },
    Rectangle { width: f64, height: f64 },
    Circle { radius: f64 },
    Annulus { outer: f64, inner: f64 },
    /// Annular sector with an opening of `gap` radians centered on +X.
    CShape { outer: f64, inner: f64, gap: f64 },
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Square { .. } => ShapeKind::Square,
            Shape::Rectangle { .. } => ShapeKind::Rectangle,
            Shape::Circle { .. } => ShapeKind::Circle,
            Shape::Annulus { .. } => ShapeKind::Annulus,
            Shape::CShape { .. } => ShapeKind::CShape,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Rectangle,
    Circle,
    Annulus,
    CShape,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Result<Self, GeometryError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "square" => Ok(Self::Square),
            "rectangle" | "rect" => Ok(Self::Rectangle),
            "circle" => Ok(Self::Circle),
            "annulus" | "ring" => Ok(Self::Annulus),
            "c-shape" | "cshape" | "c" => Ok(Self::CShape),
            other => Err(GeometryError::UnknownShape(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Rectangle => "rectangle",
            Self::Circle => "circle",
            Self::Annulus => "annulus",
            Self::CShape => "c-shape",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Infill {
    /// Serpentine hatch; `angle` in radians from +X.
    Rectilinear { angle: f64 },
    Concentric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfillKind {
    Rectilinear,
    Concentric,
}

impl InfillKind {
    pub fn parse(s: &str) -> Result<Self, GeometryError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rectilinear" | "hatch" | "lines" => Ok(Self::Rectilinear),
            "concentric" | "shells" => Ok(Self::Concentric),
            other => Err(GeometryError::UnknownShape(format!("infill `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Rectilinear => "rectilinear",
            Self::Concentric => "concentric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub infill: Infill,
    /// Infill density in (0, 1]; line spacing is `line_width / density`.
    pub density: f64,
    pub line_width: f64,
    /// Polygon segments used for a full circle.
    pub circle_segments: usize,
    /// Layer height assigned to the toolpath.
    pub z: f64,
}

impl ShapeSpec {
    pub fn new(shape: Shape, infill: Infill, density: f64, line_width: f64) -> Self {
        Self {
            shape,
            infill,
            density,
            line_width,
            circle_segments: 64,
            z: 0.2,
        }
    }

    pub fn spacing(&self) -> f64 {
        self.line_width / self.density
    }

    fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidShape(m.to_string()));
        if !(self.density > 0.0 && self.density <= 1.0) {
            return bad("density must be in (0, 1]");
        }
        if !(self.line_width > 0.0) || self.circle_segments < 3 {
            return bad("line width must be positive and circles need >= 3 segments");
        }
        match self.shape {
            Shape::Square { side } if side > 0.0 => Ok(()),
            Shape::Rectangle { width, height } if width > 0.0 && height > 0.0 => Ok(()),
            Shape::Circle { radius } if radius > 0.0 => Ok(()),
            Shape::Annulus { outer, inner } if outer > inner && inner > 0.0 => Ok(()),
            Shape::CShape { outer, inner, gap } if outer > inner && inner > 0.0 && gap > 0.0 && gap < 2.0 * PI => {
                Ok(())
            }
            _ => bad("non-positive or inconsistent dimensions"),
        }
    }
}

fn circle_loop(r: f64, segments: usize, ccw: bool) -> Vec<Point2> {
    let mut lp: Vec<Point2> = (0..=segments)
        .map(|i| {
            let a = 2.0 * PI * (i % segments) as f64 / segments as f64;
            [r * a.cos(), r * a.sin()]
        })
        .collect();
    if !ccw {
        lp.reverse();
    }
    lp
}

fn rect_loop(hw: f64, hh: f64) -> Vec<Point2> {
    vec![[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh], [-hw, -hh]]
}

/// Annular sector from angle `a0` to `a1` (CCW, a0 < a1), with straight
/// caps offset inward by `d` from the radial edges.
fn sector_loop(outer: f64, inner: f64, a0: f64, a1: f64, d: f64, segments: usize) -> Option<Vec<Point2>> {
    if outer <= inner || d >= inner {
        return None;
    }
    // A point at radius r on the line parallel to the edge at angle a, offset
    // by d into the sector, sits at angle a ± asin(d / r).
    let (o0, o1) = (a0 + (d / outer).asin(), a1 - (d / outer).asin());
    let (i0, i1) = (a0 + (d / inner).asin(), a1 - (d / inner).asin());
    if o1 <= o0 || i1 <= i0 {
        return None;
    }
    let arc = |r: f64, s: f64, e: f64| -> Vec<Point2> {
        let n = (((e - s) / (2.0 * PI)) * segments as f64).ceil().max(1.0) as usize;
        (0..=n)
            .map(|k| {
                let a = s + (e - s) * k as f64 / n as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect()
    };
    let mut lp = arc(outer, o0, o1);
    let mut inner_arc = arc(inner, i0, i1);
    inner_arc.reverse();
    lp.extend(inner_arc);
    lp.push(lp[0]);
    Some(lp)
}

fn boundary_loops(spec: &ShapeSpec) -> Vec<Vec<Point2>> {
    let n = spec.circle_segments;
    match spec.shape {
        Shape::Square { side } => vec![rect_loop(side / 2.0, side / 2.0)],
        Shape::Rectangle { width, height } => vec![rect_loop(width / 2.0, height / 2.0)],
        Shape::Circle { radius } => vec![circle_loop(radius, n, true)],
        Shape::Annulus { outer, inner } => vec![circle_loop(outer, n, true), circle_loop(inner, n, false)],
        Shape::CShape { outer, inner, gap } => {
            vec![sector_loop(outer, inner, gap / 2.0, 2.0 * PI - gap / 2.0, 0.0, n).expect("validated sector")]
        }
    }
}

/// Nested inner loops for concentric infill, outermost first.
fn concentric_loops(spec: &ShapeSpec) -> Vec<Vec<Point2>> {
    let s = spec.spacing();
    let n = spec.circle_segments;
    let tol = 1e-9;
    let mut out = Vec::new();
    for k in 1.. {
        let d = k as f64 * s;
        let lp = match spec.shape {
            Shape::Square { side } => {
                let h = side / 2.0 - d;
                (h > tol).then(|| rect_loop(h, h))
            }
            Shape::Rectangle { width, height } => {
                let (hw, hh) = (width / 2.0 - d, height / 2.0 - d);
                (hw > tol && hh > tol).then(|| rect_loop(hw, hh))
            }
            Shape::Circle { radius } => {
                let r = radius - d;
                (r > tol).then(|| circle_loop(r, n, true))
            }
            Shape::Annulus { outer, inner } => {
                let r = outer - d;
                (r > inner + 0.5 * s).then(|| circle_loop(r, n, true))
            }
            Shape::CShape { outer, inner, gap } => {
                let (ro, ri) = (outer - d, inner + d);
                if ro - ri > tol {
                    sector_loop(ro, ri, gap / 2.0, 2.0 * PI - gap / 2.0, d, n)
                } else {
                    None
                }
            }
        };
        match lp {
            Some(lp) => out.push(lp),
            None => break,
        }
    }
    out
}

fn rotate(p: Point2, a: f64) -> Point2 {
    let (s, c) = a.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Serpentine hatch passes: each pass is a list of (start, end) deposition
/// intervals along one scanline, in travel order.
fn hatch_passes(loops: &[Vec<Point2>], spacing: f64, angle: f64) -> Vec<Vec<(Point2, Point2)>> {
    let rotated: Vec<Vec<Point2>> = loops
        .iter()
        .map(|lp| lp.iter().map(|&p| rotate(p, -angle)).collect())
        .collect();
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in rotated.iter().flatten() {
        ymin = ymin.min(p[1]);
        ymax = ymax.max(p[1]);
    }
    let extent = ymax - ymin;
    let nudge = 1e-9 * extent.max(1.0);
    let count = (extent / spacing + 1e-9).floor() as usize + 1;
    let mut passes = Vec::new();
    for k in 0..count {
        let y = (ymin + k as f64 * spacing).clamp(ymin + nudge, ymax - nudge);
        let mut xs: Vec<f64> = Vec::new();
        for lp in &rotated {
            for w in lp.windows(2) {
                let (a, b) = (w[0], w[1]);
                if (a[1] > y) != (b[1] > y) {
                    xs.push(a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
                }
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        let mut intervals: Vec<(f64, f64)> = xs
            .chunks_exact(2)
            .map(|c| (c[0], c[1]))
            .filter(|(a, b)| b - a > 1e-9)
            .collect();
        if intervals.is_empty() {
            continue;
        }
        let forward = passes.len() % 2 == 0;
        if !forward {
            intervals.reverse();
        }
        let pass = intervals
            .into_iter()
            .map(|(a, b)| {
                let (s, e) = if forward { (a, b) } else { (b, a) };
                (rotate([s, y], angle), rotate([e, y], angle))
            })
            .collect();
        passes.push(pass);
    }
    passes
}

struct PathBuilder {
    points: Vec<Keypoint>,
    offset: Point2,
}

impl PathBuilder {
    fn dist(&self, p: Point2) -> f64 {
        let last = self.points.last().expect("builder started");
        (p[0] + self.offset[0] - last.x).hypot(p[1] + self.offset[1] - last.y)
    }

    fn start(&mut self, p: Point2) {
        self.points
            .push(Keypoint::new(p[0] + self.offset[0], p[1] + self.offset[1], 0.0));
    }

    /// Moves to `p`, extruding along the way when `extrude` is set.
    fn to(&mut self, p: Point2, extrude: bool) {
        if self.points.is_empty() {
            self.start(p);
            return;
        }
        let d = self.dist(p);
        if d <= 1e-12 {
            return;
        }
        let e = self.points.last().expect("builder started").e + if extrude { EXTRUSION_PER_MM * d } else { 0.0 };
        self.points
            .push(Keypoint::new(p[0] + self.offset[0], p[1] + self.offset[1], e));
    }

    fn trace(&mut self, lp: &[Point2]) {
        self.to(lp[0], false);
        for &p in &lp[1..] {
            self.to(p, true);
        }
    }
}

/// Generates a (contour, toolpath) pair for a parametric layer shape. The
/// toolpath traces every boundary loop, then fills the interior. The seed
/// only translates the part, so geometry is fully determined by `spec`.
pub fn synth_sample(spec: &ShapeSpec, seed: u64) -> Result<(SliceContour, LayerToolpath), GeometryError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = [100.0 + rng.random_range(-10.0..10.0), 100.0 + rng.random_range(-10.0..10.0)];

    let loops = boundary_loops(spec);
    let mut b = PathBuilder {
        points: Vec::new(),
        offset,
    };
    for lp in &loops {
        b.trace(lp);
    }
    match spec.infill {
        Infill::Rectilinear { angle } => {
            for pass in hatch_passes(&loops, spec.spacing(), angle) {
                for (i, (s, e)) in pass.into_iter().enumerate() {
                    // first interval of a pass joins along the boundary, later
                    // ones jump across a hole
                    b.to(s, i == 0);
                    b.to(e, true);
                }
            }
        }
        Infill::Concentric => {
            for lp in concentric_loops(spec) {
                b.to(lp[0], true);
                for &p in &lp[1..] {
                    b.to(p, true);
                }
            }
        }
    }
    let contour = SliceContour {
        loops: loops
            .into_iter()
            .map(|lp| lp.into_iter().map(|p| [p[0] + offset[0], p[1] + offset[1]]).collect())
            .collect(),
    };
    Ok((
        contour,
        LayerToolpath {
            z: spec.z,
            keypoints: b.points,
        },
    ))
}

/// Draws a random spec of the given kinds with dimensions in a desk-scale
/// range (tens of mm).
pub fn random_spec<R: Rng>(rng: &mut R, shape: ShapeKind, infill: InfillKind) -> ShapeSpec {
    let size = rng.random_range(15.0..40.0);
    let shape = match shape {
        ShapeKind::Square => Shape::Square { side: size },
        ShapeKind::Rectangle => Shape::Rectangle {
            width: size,
            height: size * rng.random_range(0.4..0.8),
        },
        ShapeKind::Circle => Shape::Circle { radius: size / 2.0 },
        ShapeKind::Annulus => Shape::Annulus {
            outer: size / 2.0,
            inner: size / 2.0 * rng.random_range(0.3..0.6),
        },
        ShapeKind::CShape => Shape::CShape {
            outer: size / 2.0,
            inner: size / 2.0 * rng.random_range(0.35..0.6),
            gap: rng.random_range(0.6..1.4),
        },
    };
    let infill = match infill {
        InfillKind::Rectilinear => Infill::Rectilinear {
            angle: [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0][rng.random_range(0..4)],
        },
        InfillKind::Concentric => Infill::Concentric,
    };
    let mut spec = ShapeSpec::new(shape, infill, rng.random_range(0.15..0.3), 0.4 * size / 8.0);
    spec.circle_segments = 24;
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcode::{travel_length, validate_layer, PrinterProfile};

    fn cube_ascii() -> String {
        // 12 facets of the unit cube, outward winding
        let v = |x: u8, y: u8, z: u8| format!("vertex {x} {y} {z}");
        let quads = [
            ((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)),
            ((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)),
            ((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)),
            ((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)),
            ((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)),
            ((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)),
        ];
        let mut s = String::from("solid cube\n");
        for (a, b, c, d) in quads {
            for (p, q, r) in [(a, b, c), (a, c, d)] {
                s.push_str("facet normal 0 0 0\nouter loop\n");
                for (x, y, z) in [p, q, r] {
                    s.push_str(&v(x, y, z));
                    s.push('\n');
                }
                s.push_str("endloop\nendfacet\n");
            }
        }
        s.push_str("endsolid cube\n");
        s
    }

    #[test]
    fn ascii_cube_loads() {
        let load = parse_stl(cube_ascii().as_bytes()).unwrap();
        assert_eq!(load.mesh.triangles.len(), 12);
        assert_eq!(load.degenerate, 0);
        assert_eq!(load.mesh.bounds(), ([0.0; 3], [1.0; 3]));
    }

    #[test]
    fn binary_single_triangle_and_truncation() {
        let mesh = TriangleMesh {
            triangles: vec![[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]],
        };
        let bytes = write_binary_stl(&mesh);
        assert_eq!(bytes.len(), 134);
        assert_eq!(parse_stl(&bytes).unwrap().mesh, mesh);
        assert!(matches!(parse_stl(&bytes[..120]), Err(GeometryError::TruncatedFile { .. })));
        assert!(matches!(parse_stl(&bytes[..40]), Err(GeometryError::TruncatedFile { .. })));
    }

    #[test]
    fn degenerate_triangles_dropped() {
        let mesh = TriangleMesh {
            triangles: vec![
                [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]],
            ],
        };
        let load = parse_stl(&write_binary_stl(&mesh)).unwrap();
        assert_eq!(load.mesh.triangles.len(), 1);
        assert_eq!(load.degenerate, 1);
    }

    #[test]
    fn cube_slice_is_unit_square() {
        let mesh = parse_stl(cube_ascii().as_bytes()).unwrap().mesh;
        let c = slice_mesh(&mesh, 0.5).unwrap();
        assert_eq!(c.loops.len(), 1);
        assert!((c.perimeter() - 4.0).abs() < 1e-12);
        assert!((c.area() - 1.0).abs() < 1e-12);
        assert!(matches!(slice_mesh(&mesh, -0.1), Err(GeometryError::ZOutOfRange { .. })));
        assert!(matches!(slice_mesh(&mesh, 1.0), Err(GeometryError::ZOutOfRange { .. })));
    }

    #[test]
    fn open_mesh_reports_gap() {
        let mut mesh = parse_stl(cube_ascii().as_bytes()).unwrap().mesh;
        // drop one side face (two triangles)
        mesh.triangles.drain(4..6);
        assert!(matches!(slice_mesh(&mesh, 0.5), Err(GeometryError::OpenContour { .. })));
    }

    fn square_contour(side: f64) -> SliceContour {
        SliceContour {
            loops: vec![rect_loop(side / 2.0, side / 2.0)],
        }
    }

    #[test]
    fn rasterized_square_area() {
        let img = rasterize(&square_contour(10.0)).unwrap();
        let expected = FRAME_FILL * FRAME_FILL;
        assert!((img.filled_fraction() - expected).abs() / expected < 0.02);
        assert!(matches!(
            rasterize(&SliceContour { loops: vec![] }),
            Err(GeometryError::EmptyContour)
        ));
    }

    fn cylinder_mesh(r: f64, h: f64, facets: usize) -> TriangleMesh {
        let ring: Vec<[f64; 2]> = (0..facets)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / facets as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        let mut triangles = Vec::new();
        for i in 0..facets {
            let (a, b) = (ring[i], ring[(i + 1) % facets]);
            triangles.push([[a[0], a[1], 0.0], [b[0], b[1], 0.0], [b[0], b[1], h]]);
            triangles.push([[a[0], a[1], 0.0], [b[0], b[1], h], [a[0], a[1], h]]);
            triangles.push([[0.0, 0.0, 0.0], [b[0], b[1], 0.0], [a[0], a[1], 0.0]]);
            triangles.push([[0.0, 0.0, h], [a[0], a[1], h], [b[0], b[1], h]]);
        }
        TriangleMesh { triangles }
    }

    #[test]
    fn cylinder_slice_is_inscribed_polygon() {
        // f64 vertices; a binary STL would round them to f32
        let mesh = cylinder_mesh(1.0, 2.0, 64);
        let c = slice_mesh(&mesh, 0.7).unwrap();
        assert_eq!(c.loops.len(), 1);
        let expected = 2.0 * 64.0 * (PI / 64.0).sin();
        assert!((c.perimeter() - expected).abs() < 1e-9, "{}", c.perimeter());
    }

    #[test]
    fn rasterize_commutes_with_quarter_turn() {
        // L-shaped outline, no symmetry
        let l = vec![[0.0, 0.0], [6.0, 0.0], [6.0, 2.0], [2.0, 2.0], [2.0, 5.0], [0.0, 5.0], [0.0, 0.0]];
        let turned: Vec<Point2> = l.iter().map(|p| [-p[1], p[0]]).collect();
        let a = rasterize(&SliceContour { loops: vec![l] }).unwrap();
        let b = rasterize(&SliceContour { loops: vec![turned] }).unwrap();
        let n = IMAGE_SIZE;
        let differ = (0..n)
            .flat_map(|r| (0..n).map(move |c| (r, c)))
            .filter(|&(r, c)| b.at(r, c) != a.at(c, n - 1 - r))
            .count();
        assert!((differ as f64) < 0.005 * (n * n) as f64, "{differ} pixels differ");
        assert!((a.filled_fraction() - b.filled_fraction()).abs() < 0.005);
    }

    #[test]
    fn annulus_center_is_empty() {
        let c = SliceContour {
            loops: vec![circle_loop(10.0, 64, true), circle_loop(4.0, 64, false)],
        };
        let img = rasterize(&c).unwrap();
        assert_eq!(img.at(112, 112), 0.0);
        assert_eq!(img.at(112, 112 + 70), 1.0);
    }

    #[test]
    fn pgm_round_trip() {
        let img = rasterize(&square_contour(3.0)).unwrap();
        let back = SliceImage::from_pgm(&img.to_pgm()).unwrap();
        assert_eq!(back.pixels, img.pixels);
        assert!(SliceImage::from_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn synthetic_square_rectilinear_length() {
        let spec = ShapeSpec::new(Shape::Square { side: 1.0 }, Infill::Rectilinear { angle: 0.0 }, 1.0, 0.25);
        let (_, path) = synth_sample(&spec, 7).unwrap();
        assert!((travel_length(&path.keypoints) - 10.0).abs() < 1e-8);
    }

    #[test]
    fn synthetic_circle_concentric_shells() {
        let spec = ShapeSpec::new(Shape::Circle { radius: 1.0 }, Infill::Concentric, 1.0, 0.2);
        let shells = concentric_loops(&spec);
        assert_eq!(shells.len(), 4);
        let total: f64 = boundary_loops(&spec).iter().chain(&shells).map(|l| loop_length(l)).sum();
        let six_pi = 6.0 * PI;
        assert!((total - six_pi).abs() / six_pi < 0.01);
        let (_, path) = synth_sample(&spec, 1).unwrap();
        // loops plus four radial connectors of 0.2
        assert!((travel_length(&path.keypoints) - (total + 0.8)).abs() < 1e-9);
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let profile = PrinterProfile::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in [
            ShapeKind::Square,
            ShapeKind::Rectangle,
            ShapeKind::Circle,
            ShapeKind::Annulus,
            ShapeKind::CShape,
        ] {
            for infill in [InfillKind::Rectilinear, InfillKind::Concentric] {
                let spec = random_spec(&mut rng, shape, infill);
                let a = synth_sample(&spec, 11).unwrap();
                let b = synth_sample(&spec, 11).unwrap();
                assert_eq!(a, b);
                assert!(a.1.keypoints.len() > 4, "{shape:?} {infill:?}");
                assert!(validate_layer(&a.1.keypoints, &profile).is_valid(), "{shape:?} {infill:?}");
                rasterize(&a.0).unwrap();
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let spec = ShapeSpec::new(Shape::Circle { radius: -1.0 }, Infill::Concentric, 0.5, 0.4);
        assert!(synth_sample(&spec, 0).is_err());
        assert!(matches!(ShapeKind::parse("hexagon"), Err(GeometryError::UnknownShape(_))));
    }
}
