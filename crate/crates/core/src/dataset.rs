//! Fixed-length normalized training records, their on-disk format, and
//! silhouette extraction from photographs.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gcode::{Keypoint, LayerToolpath};
use crate::geometry::{GeometryError, SliceImage, FRAME_FILL, IMAGE_SIZE};
use crate::model::Tensor;

pub const DEFAULT_N_MAX: usize = 512;
pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const SCHEMA_VERSION: u32 = 1;
pub const FORMAT_NAME: &str = "pathdiff-records";
/// Below this E range a layer is treated as pure travel.
pub const DEGENERATE_E: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("layer has no keypoints")]
    EmptyLayer,
    #[error("mask selects no positions")]
    MaskEmpty,
    #[error("x0 has shape {0:?}, mask has {1} entries")]
    ShapeMismatch((usize, usize), usize),
    #[error("no contour found in photo")]
    NoContourFound,
    #[error("manifest schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u64, expected: u32 },
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("malformed manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub xy_mid: [f64; 2],
    /// Half of the larger bounding-box side, in mm.
    pub xy_scale: f64,
    pub e_min: f64,
    pub e_max: f64,
    pub degenerate_e: bool,
}

/// A normalized toolpath with its conditioning image. `x0` is `[n_max][3]`
/// (X, Y, E), zero past `true_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub image: SliceImage,
    pub x0: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    pub norm: NormalizationParams,
    pub true_len: usize,
    /// Free-form provenance label, e.g. `"circle/concentric"`.
    #[serde(default)]
    pub label: String,
}

impl TrainingRecord {
    pub fn n_max(&self) -> usize {
        self.x0.len()
    }

    /// `[3, n_max]` tensor, channels as rows.
    pub fn x0_tensor(&self) -> Tensor {
        let n = self.x0.len();
        let mut t = Tensor::zeros(3, n);
        for (i, p) in self.x0.iter().enumerate() {
            for c in 0..3 {
                t.data[c * n + i] = p[c];
            }
        }
        t
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Rounds `x0` to single precision, the precision of the on-disk blobs.
    pub fn quantized(mut self) -> Self {
        for p in self.x0.iter_mut() {
            for v in p.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        self
    }
}

/// Centers XY on the bounding-box midpoint and divides by half the larger
/// side; maps E linearly onto `[-1, 1]`. Only the first `n_max` keypoints are
/// kept and they alone determine the parameters.
pub fn normalize(layer: &LayerToolpath, n_max: usize) -> Result<(Vec<[f64; 3]>, Vec<bool>, NormalizationParams), DatasetError> {
    if layer.keypoints.is_empty() || n_max == 0 {
        return Err(DatasetError::EmptyLayer);
    }
    let kept = &layer.keypoints[..layer.keypoints.len().min(n_max)];
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for k in kept {
        for (i, v) in [k.x, k.y, k.e].into_iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let half = 0.5 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let xy_scale = if half > 0.0 { half } else { 1.0 };
    let degenerate_e = hi[2] - lo[2] < DEGENERATE_E;
    let norm = NormalizationParams {
        xy_mid: mid,
        xy_scale,
        e_min: lo[2],
        e_max: hi[2],
        degenerate_e,
    };
    let mut x0 = vec![[0.0; 3]; n_max];
    let mut mask = vec![false; n_max];
    for (i, k) in kept.iter().enumerate() {
        let e = if degenerate_e {
            0.0
        } else {
            2.0 * (k.e - norm.e_min) / (norm.e_max - norm.e_min) - 1.0
        };
        x0[i] = [(k.x - mid[0]) / xy_scale, (k.y - mid[1]) / xy_scale, e];
        mask[i] = true;
    }
    Ok((x0, mask, norm))
}

/// Builds a record from a layer and its image.
pub fn make_record(image: SliceImage, layer: &LayerToolpath, n_max: usize, label: &str) -> Result<TrainingRecord, DatasetError> {
    let (x0, mask, norm) = normalize(layer, n_max)?;
    let true_len = mask.iter().filter(|&&m| m).count();
    Ok(TrainingRecord {
        image,
        x0,
        mask,
        norm,
        true_len,
        label: label.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DenormalizeOptions {
    /// Replaces `xy_scale`: half the larger side of the output, in mm.
    pub target_scale_mm: Option<f64>,
    /// Replaces `xy_mid`.
    pub target_center: Option<[f64; 2]>,
    /// Multiplies every E increment.
    pub extrusion_multiplier: Option<f64>,
}

/// Inverse of [`normalize`] on the masked-in positions.
pub fn denormalize(
    x0: &[[f64; 3]],
    mask: &[bool],
    norm: &NormalizationParams,
    opts: &DenormalizeOptions,
) -> Result<Vec<Keypoint>, DatasetError> {
    if x0.len() != mask.len() {
        return Err(DatasetError::ShapeMismatch((x0.len(), 3), mask.len()));
    }
    let scale = opts.target_scale_mm.unwrap_or(norm.xy_scale);
    let mid = opts.target_center.unwrap_or(norm.xy_mid);
    let mult = opts.extrusion_multiplier.unwrap_or(1.0);
    let mut out = Vec::new();
    let mut first_e = None;
    for (p, _) in x0.iter().zip(mask).filter(|(_, &m)| m) {
        let e = if norm.degenerate_e {
            norm.e_min
        } else {
            norm.e_min + (p[2] + 1.0) * 0.5 * (norm.e_max - norm.e_min)
        };
        let e0 = *first_e.get_or_insert(e);
        let e = if mult == 1.0 { e } else { e0 + mult * (e - e0) };
        out.push(Keypoint::new(mid[0] + p[0] * scale, mid[1] + p[1] * scale, e));
    }
    if out.is_empty() {
        return Err(DatasetError::MaskEmpty);
    }
    Ok(out)
}

/// Converts a `[3, L]` tensor back to rows.
pub fn rows_from_tensor(t: &Tensor) -> Vec<[f64; 3]> {
    (0..t.cols)
        .map(|i| [t.data[i], t.data[t.cols + i], t.data[2 * t.cols + i]])
        .collect()
}

/// Mask of the first `len` positions.
pub fn prefix_mask(n: usize, len: usize) -> Vec<bool> {
    (0..n).map(|i| i < len).collect()
}

/// Scale for a generated sequence that has no source layer: XY spans
/// `scale_mm` around `center` and E spans the extrusion of the whole path.
pub fn inference_norm(x0: &[[f64; 3]], mask: &[bool], scale_mm: f64, center: [f64; 2]) -> NormalizationParams {
    let pts: Vec<&[f64; 3]> = x0.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| p).collect();
    let length: f64 = pts
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) * scale_mm)
        .sum();
    let span = crate::geometry::EXTRUSION_PER_MM * length;
    NormalizationParams {
        xy_mid: center,
        xy_scale: scale_mm,
        e_min: 0.0,
        e_max: span,
        degenerate_e: span <= DEGENERATE_E,
    }
}

/// Replaces every E by the running maximum so the sequence never retracts.
/// Returns the number of keypoints changed.
pub fn monotone_extrusion(keypoints: &mut [Keypoint]) -> usize {
    let mut changed = 0;
    let mut top = f64::NEG_INFINITY;
    for k in keypoints.iter_mut() {
        if k.e < top {
            k.e = top;
            changed += 1;
        } else {
            top = k.e;
        }
    }
    changed
}

pub const KEYPOINTS_FORMAT: &str = "pathdiff-keypoints";

/// A normalized keypoint sequence on disk, as written by generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub format: String,
    pub version: u32,
    /// Root seed and stream of the sampler that produced the sequence.
    pub seed: Option<u64>,
    pub stream: Option<u64>,
    /// Normalized (X, Y, E) rows, valid positions only.
    pub keypoints: Vec<[f64; 3]>,
    /// Source normalization, when the sequence came from a known layer.
    pub norm: Option<NormalizationParams>,
}

impl KeypointFile {
    pub fn new(keypoints: Vec<[f64; 3]>) -> Self {
        Self {
            format: KEYPOINTS_FORMAT.into(),
            version: SCHEMA_VERSION,
            seed: None,
            stream: None,
            keypoints,
            norm: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let body = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, body).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let f: Self = serde_json::from_str(&text)?;
        if f.format != KEYPOINTS_FORMAT {
            return Err(DatasetError::Manifest {
                line: 1,
                msg: format!("unexpected format `{}`", f.format),
            });
        }
        if f.version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersionMismatch {
                found: f.version as u64,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(f)
    }
}

// ---------------------------------------------------------------------------
// Photo silhouettes

fn gaussian_blur(w: usize, h: usize, src: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

fn sobel_magnitude(w: usize, h: usize, src: &[f64]) -> Vec<f64> {
    let at = |x: isize, y: isize| src[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            out[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    out
}

/// Otsu threshold over a 256-bin histogram of `values` in `[0, max]`.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let mut hist = [0usize; 256];
    for v in values {
        hist[((v / max) * 255.0).round().clamp(0.0, 255.0) as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_t) = (0.0, 0.0, -1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f64 + 0.5) / 255.0 * max
}

/// Connected components (8-neighbourhood) of `on` pixels; returns labels and
/// component sizes.
fn components(w: usize, h: usize, on: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let mut label = vec![usize::MAX; w * h];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !on[start] || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        label[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if on[q] && label[q] == usize::MAX {
                        label[q] = id;
                        queue.push_back(q);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (label, sizes)
}

/// Pixels reachable from the border through non-wall pixels (4-neighbourhood).
fn exterior(w: usize, h: usize, wall: &[bool]) -> Vec<bool> {
    let mut out = vec![false; w * h];
    let mut queue = VecDeque::new();
    for x in 0..w {
        for y in [0, h - 1] {
            queue.push_back(y * w + x);
        }
    }
    for y in 0..h {
        for x in [0, w - 1] {
            queue.push_back(y * w + x);
        }
    }
    while let Some(p) = queue.pop_front() {
        if wall[p] || out[p] {
            continue;
        }
        out[p] = true;
        let (x, y) = (p % w, p / w);
        if x > 0 {
            queue.push_back(p - 1);
        }
        if x + 1 < w {
            queue.push_back(p + 1);
        }
        if y > 0 {
            queue.push_back(p - w);
        }
        if y + 1 < h {
            queue.push_back(p + w);
        }
    }
    out
}

/// Smallest edge component accepted as a contour, as a fraction of pixels.
pub const MIN_CONTOUR_FRACTION: f64 = 0.002;
pub const PHOTO_BLUR_SIGMA: f64 = 1.5;

/// Extracts the dominant closed outline from a grayscale photo or sketch and
/// returns its filled silhouette framed like [`crate::geometry::rasterize`].
pub fn silhouette_from_photo(photo: &SliceImage) -> Result<SliceImage, DatasetError> {
    let (w, h) = (photo.width, photo.height);
    if w < 3 || h < 3 || photo.pixels.len() != w * h {
        return Err(DatasetError::NoContourFound);
    }
    let blurred = gaussian_blur(w, h, &photo.pixels, PHOTO_BLUR_SIGMA);
    let mag = sobel_magnitude(w, h, &blurred);
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max < 1e-6 {
        return Err(DatasetError::NoContourFound);
    }
    let thr = otsu_threshold(&mag);
    let edges: Vec<bool> = mag.iter().map(|&m| m > thr).collect();
    let (labels, sizes) = components(w, h, &edges);
    let min_size = ((w * h) as f64 * MIN_CONTOUR_FRACTION).ceil() as usize;
    let Some((best, _)) = sizes
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= min_size)
        .max_by_key(|(i, &s)| (s, std::cmp::Reverse(*i)))
    else {
        return Err(DatasetError::NoContourFound);
    };
    let wall: Vec<bool> = labels.iter().map(|&l| l == best).collect();
    let outside = exterior(w, h, &wall);
    // Inside the outline, keep the edge band only where the blurred image
    // sits on the same side of the local midpoint as the enclosed region.
    let enclosed: Vec<bool> = (0..w * h).map(|p| !outside[p] && !wall[p]).collect();
    if !enclosed.iter().any(|&b| b) {
        return Err(DatasetError::NoContourFound);
    }
    let (mut inner_sum, mut inner_n, mut outer_sum, mut outer_n) = (0.0, 0.0, 0.0, 0.0);
    for p in 0..w * h {
        if enclosed[p] {
            inner_sum += blurred[p];
            inner_n += 1.0;
        } else if outside[p] {
            outer_sum += blurred[p];
            outer_n += 1.0;
        }
    }
    let inner = inner_sum / inner_n;
    let outer = if outer_n > 0.0 { outer_sum / outer_n } else { 1.0 - inner };
    let cut = 0.5 * (inner + outer);
    let filled: Vec<bool> = (0..w * h)
        .map(|p| enclosed[p] || (wall[p] && ((blurred[p] - cut) * (inner - outer) >= 0.0)))
        .collect();
    Ok(reframe_mask(w, h, &filled, photo.pixel_pitch))
}

/// Resamples a binary mask so its bounding box is centered and spans
/// [`FRAME_FILL`] of a square [`IMAGE_SIZE`] frame.
pub fn reframe_mask(w: usize, h: usize, mask: &[bool], src_pitch: f64) -> SliceImage {
    let (mut c0, mut c1, mut r0, mut r1) = (usize::MAX, 0, usize::MAX, 0);
    for p in 0..w * h {
        if mask[p] {
            let (x, y) = (p % w, p / w);
            c0 = c0.min(x);
            c1 = c1.max(x);
            r0 = r0.min(y);
            r1 = r1.max(y);
        }
    }
    let n = IMAGE_SIZE;
    let mut out = SliceImage::blank();
    if c0 == usize::MAX {
        return out;
    }
    let bw = (c1 + 1 - c0) as f64;
    let bh = (r1 + 1 - r0) as f64;
    let step = bw.max(bh) / (FRAME_FILL * n as f64);
    let cx = 0.5 * (c0 as f64 + c1 as f64 + 1.0);
    let cy = 0.5 * (r0 as f64 + r1 as f64 + 1.0);
    for row in 0..n {
        let sy = cy + (row as f64 + 0.5 - 0.5 * n as f64) * step;
        if sy < 0.0 || sy >= h as f64 {
            continue;
        }
        for col in 0..n {
            let sx = cx + (col as f64 + 0.5 - 0.5 * n as f64) * step;
            if sx < 0.0 || sx >= w as f64 {
                continue;
            }
            if mask[sy as usize * w + sx as usize] {
                out.pixels[row * n + col] = 1.0;
            }
        }
    }
    out.pixel_pitch = src_pitch * step;
    out
}

/// Intersection over union of the `>= 0.5` pixels of two equally sized images.
pub fn image_iou(a: &SliceImage, b: &SliceImage) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height), "image sizes differ");
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        let (p, q) = (*x >= 0.5, *y >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u64,
    count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checksums {
    image: String,
    x0: String,
    mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    id: usize,
    label: String,
    n_max: usize,
    true_len: usize,
    norm: NormalizationParams,
    pixel_pitch: f64,
    origin: [f64; 2],
    image: String,
    x0: String,
    mask: String,
    sha256: Checksums,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes `records` under `dir`: `manifest.jsonl`, `images/*.pgm` and
/// `blobs/*.f32`. `x0` is stored in single precision, see
/// [`TrainingRecord::quantized`].
pub fn write_records(dir: &Path, records: &[TrainingRecord]) -> Result<(), DatasetError> {
    for sub in ["images", "blobs"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    let mut manifest = Vec::new();
    let header = ManifestHeader {
        format: FORMAT_NAME.to_string(),
        version: SCHEMA_VERSION as u64,
        count: records.len(),
    };
    serde_json::to_writer(&mut manifest, &header)?;
    manifest.push(b'\n');
    for (id, r) in records.iter().enumerate() {
        let image = format!("images/{id:06}.pgm");
        let x0 = format!("blobs/{id:06}.x0.f32");
        let mask = format!("blobs/{id:06}.mask.f32");
        let pgm = r.image.to_pgm();
        let x0_bytes: Vec<u8> = r.x0.iter().flatten().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        let mask_bytes: Vec<u8> = r
            .mask
            .iter()
            .flat_map(|&m| (if m { 1.0f32 } else { 0.0 }).to_le_bytes())
            .collect();
        write_file(&dir.join(&image), &pgm)?;
        write_file(&dir.join(&x0), &x0_bytes)?;
        write_file(&dir.join(&mask), &mask_bytes)?;
        let entry = ManifestEntry {
            id,
            label: r.label.clone(),
            n_max: r.n_max(),
            true_len: r.true_len,
            norm: r.norm,
            pixel_pitch: r.image.pixel_pitch,
            origin: r.image.origin,
            image,
            x0,
            mask,
            sha256: Checksums {
                image: sha_hex(&pgm),
                x0: sha_hex(&x0_bytes),
                mask: sha_hex(&mask_bytes),
            },
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.push(b'\n');
    }
    let mut f = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    f.write_all(&manifest).map_err(io_err(&manifest_path))
}

fn read_checked(dir: &Path, rel: &str, expected: &str) -> Result<Vec<u8>, DatasetError> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if sha_hex(&bytes) != expected {
        return Err(DatasetError::ChecksumMismatch(rel.to_string()));
    }
    Ok(bytes)
}

fn f32_blob(bytes: &[u8], expected: usize, rel: &str, line: usize) -> Result<Vec<f64>, DatasetError> {
    if bytes.len() != expected * 4 {
        return Err(DatasetError::Manifest {
            line,
            msg: format!("{rel} has {} bytes, expected {}", bytes.len(), expected * 4),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reads a directory written by [`write_records`], verifying checksums.
pub fn read_records(dir: &Path) -> Result<Vec<TrainingRecord>, DatasetError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let f = fs::File::open(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or(DatasetError::Manifest {
            line: 1,
            msg: "missing header".into(),
        })?
        .map_err(io_err(&manifest_path))?;
    let header: serde_json::Value = serde_json::from_str(&header_line)?;
    let version = header.get("version").and_then(|v| v.as_u64()).ok_or(DatasetError::Manifest {
        line: 1,
        msg: "header lacks an integer `version`".into(),
    })?;
    if version != SCHEMA_VERSION as u64 {
        return Err(DatasetError::SchemaVersionMismatch {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let header: ManifestHeader = serde_json::from_value(header)?;
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(io_err(&manifest_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line).map_err(|err| DatasetError::Manifest {
            line: line_no,
            msg: err.to_string(),
        })?;
        let pgm = read_checked(dir, &e.image, &e.sha256.image)?;
        let x0_bytes = read_checked(dir, &e.x0, &e.sha256.x0)?;
        let mask_bytes = read_checked(dir, &e.mask, &e.sha256.mask)?;
        let mut image = SliceImage::from_pgm(&pgm)?;
        image.pixel_pitch = e.pixel_pitch;
        image.origin = e.origin;
        let flat = f32_blob(&x0_bytes, e.n_max * 3, &e.x0, line_no)?;
        let mask_vals = f32_blob(&mask_bytes, e.n_max, &e.mask, line_no)?;
        out.push(TrainingRecord {
            image,
            x0: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            mask: mask_vals.iter().map(|&m| m != 0.0).collect(),
            norm: e.norm,
            true_len: e.true_len,
            label: e.label,
        });
    }
    if out.len() != header.count {
        return Err(DatasetError::Manifest {
            line: 1,
            msg: format!("header declares {} records, found {}", header.count, out.len()),
        });
    }
    Ok(out)
}

/// SHA-256 over the manifest bytes, which pin every blob by checksum.
pub fn dataset_checksum(dir: &Path) -> Result<String, DatasetError> {
    let p = dir.join(MANIFEST_NAME);
    Ok(sha_hex(&fs::read(&p).map_err(io_err(&p))?))
}
