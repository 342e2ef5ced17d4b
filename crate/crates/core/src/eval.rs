//! Travel-distance statistics, deposition overlap and plot artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gcode::{travel_length, Keypoint};

pub const DEFAULT_LINE_WIDTH: f64 = 0.4;
pub const DEFAULT_GRID_PITCH: f64 = 0.1;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const DEFAULT_KDE_POINTS: usize = 512;
/// Upper bound on overlap raster cells.
pub const MAX_GRID_CELLS: usize = 50_000_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sample has zero variance")]
    DegenerateSample,
    #[error("truth mean is zero")]
    ZeroTruthMean,
    #[error("path has no extruding segment")]
    EmptyPath,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("run {run} has {found} layers, truth has {expected}")]
    LayerCountMismatch { run: usize, found: usize, expected: usize },
    #[error("overlap grid of {0} cells is too large")]
    GridTooLarge(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn mean(xs: &[f64]) -> f64 {
    // shifted so that a constant sample returns its value exactly
    let x0 = xs[0];
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn require(xs: &[f64], needed: usize) -> Result<(), EvalError> {
    if xs.len() < needed {
        return Err(EvalError::TooFewSamples { needed, got: xs.len() });
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(EvalError::InvalidArgument("sample contains non-finite values".into()));
    }
    Ok(())
}

/// Per-layer travel distances of the ground truth and of each generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub truth: Vec<f64>,
    pub runs: Vec<Vec<f64>>,
}

impl DistanceSample {
    pub fn from_layers(truth: &[Vec<Keypoint>], runs: &[Vec<Vec<Keypoint>>]) -> Result<Self, EvalError> {
        for (run, layers) in runs.iter().enumerate() {
            if layers.len() != truth.len() {
                return Err(EvalError::LayerCountMismatch {
                    run,
                    found: layers.len(),
                    expected: truth.len(),
                });
            }
        }
        let dist = |ls: &[Vec<Keypoint>]| ls.iter().map(|l| travel_length(l)).collect::<Vec<_>>();
        Ok(Self {
            truth: dist(truth),
            runs: runs.iter().map(|r| dist(r)).collect(),
        })
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for (run, r) in self.runs.iter().enumerate() {
            if r.len() != self.truth.len() {
                return Err(EvalError::LayerCountMismatch {
                    run,
                    found: r.len(),
                    expected: self.truth.len(),
                });
            }
        }
        let all = self.truth.iter().chain(self.runs.iter().flatten());
        if all.into_iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(EvalError::InvalidArgument("distances must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// All generated distances, run after run.
    pub fn pooled(&self) -> Vec<f64> {
        self.runs.iter().flatten().copied().collect()
    }
}

/// A density evaluated on an even grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    /// Trapezoid integral of the density.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }
}

pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64, EvalError> {
    require(samples, 2)?;
    let sd = std_dev(samples);
    if sd == 0.0 {
        return Err(EvalError::DegenerateSample);
    }
    Ok(1.06 * sd * (samples.len() as f64).powf(-0.2))
}

pub fn kde_at(samples: &[f64], bandwidth: f64, x: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    samples
        .iter()
        .map(|s| {
            let u = (x - s) / bandwidth;
            (-0.5 * u * u).exp()
        })
        .sum::<f64>()
        * norm
}

/// Even grid reaching four bandwidths past the sample range.
pub fn kde_grid(samples: &[f64], bandwidth: f64, points: usize) -> Vec<f64> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * bandwidth;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * bandwidth;
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + i as f64 * step).collect()
}

/// Gaussian kernel density estimate. The bandwidth defaults to Silverman's
/// rule `1.06 σ n^(-1/5)`.
pub fn kde(samples: &[f64], bandwidth: Option<f64>, points: usize) -> Result<KdeCurve, EvalError> {
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => {
            require(samples, 2)?;
            h
        }
        Some(_) => return Err(EvalError::InvalidArgument("bandwidth must be positive".into())),
        None => silverman_bandwidth(samples)?,
    };
    if points < 2 {
        return Err(EvalError::InvalidArgument("KDE grid needs at least 2 points".into()));
    }
    let grid = kde_grid(samples, h, points);
    kde_on_grid(samples, h, grid)
}

pub fn kde_on_grid(samples: &[f64], bandwidth: f64, grid: Vec<f64>) -> Result<KdeCurve, EvalError> {
    require(samples, 1)?;
    let density = grid.iter().map(|&x| kde_at(samples, bandwidth, x)).collect();
    Ok(KdeCurve {
        grid,
        density,
        bandwidth,
    })
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let f = pos - i as f64;
    if f == 0.0 {
        sorted[i]
    } else {
        sorted[i] + f * (sorted[j] - sorted[i])
    }
}

/// Percentile bootstrap interval of `statistic` over `resamples` resamples.
pub fn bootstrap_ci_with<F>(
    samples: &[f64],
    statistic: F,
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64), EvalError>
where
    F: Fn(&[f64]) -> f64,
{
    require(samples, 2)?;
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(EvalError::InvalidArgument("level must be in (0, 1) and resamples positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let mut buf = vec![0.0; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = samples[rng.random_range(0..n)];
            }
            statistic(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile_sorted(&stats, alpha), percentile_sorted(&stats, 1.0 - alpha)))
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(samples: &[f64], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64), EvalError> {
    bootstrap_ci_with(samples, mean, level, resamples, seed)
}

/// Pointwise percentile band of the KDE over bootstrap resamples, with the
/// bandwidth held fixed.
pub fn kde_band(
    samples: &[f64],
    bandwidth: f64,
    grid: &[f64],
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    require(samples, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let mut curves: Vec<Vec<f64>> = vec![Vec::with_capacity(resamples); grid.len()];
    let mut buf = vec![0.0; n];
    for _ in 0..resamples {
        for b in buf.iter_mut() {
            *b = samples[rng.random_range(0..n)];
        }
        for (k, &x) in grid.iter().enumerate() {
            curves[k].push(kde_at(&buf, bandwidth, x));
        }
    }
    let alpha = (1.0 - level) / 2.0;
    let mut lo = Vec::with_capacity(grid.len());
    let mut hi = Vec::with_capacity(grid.len());
    for mut c in curves {
        c.sort_by(f64::total_cmp);
        lo.push(percentile_sorted(&c, alpha));
        hi.push(percentile_sorted(&c, 1.0 - alpha));
    }
    Ok((lo, hi))
}

/// `100 (mean(truth) - mean(generated)) / mean(truth)`.
pub fn mean_reduction(truth: &[f64], generated: &[f64]) -> Result<f64, EvalError> {
    require(truth, 1)?;
    require(generated, 1)?;
    let mt = mean(truth);
    if mt == 0.0 {
        return Err(EvalError::ZeroTruthMean);
    }
    Ok(100.0 * (mt - mean(generated)) / mt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapResult {
    pub iou: f64,
    /// Share of the truth deposition also covered by the generated one.
    pub truth_coverage: f64,
    /// Share of the generated deposition lying on the truth deposition.
    pub gen_coverage: f64,
}

/// Extruding segments of a keypoint path: consecutive pairs with rising E.
pub fn deposited_segments(path: &[Keypoint]) -> Vec<[(f64, f64); 2]> {
    path.windows(2)
        .filter(|w| w[1].e > w[0].e)
        .map(|w| [(w[0].x, w[0].y), (w[1].x, w[1].y)])
        .collect()
}

/// Boolean raster of stroked segments.
#[derive(Debug, Clone, PartialEq)]
pub struct DepositionRaster {
    pub origin: (f64, f64),
    pub pitch: f64,
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<bool>,
}

impl DepositionRaster {
    fn covering(segs: &[[(f64, f64); 2]], half_width: f64, pitch: f64) -> Result<Self, EvalError> {
        let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
        for s in segs {
            for p in s {
                lo = (lo.0.min(p.0), lo.1.min(p.1));
                hi = (hi.0.max(p.0), hi.1.max(p.1));
            }
        }
        let origin = (lo.0 - half_width - pitch, lo.1 - half_width - pitch);
        let cols = ((hi.0 - origin.0 + half_width + pitch) / pitch).ceil() as usize + 1;
        let rows = ((hi.1 - origin.1 + half_width + pitch) / pitch).ceil() as usize + 1;
        let n = cols.saturating_mul(rows);
        if n > MAX_GRID_CELLS {
            return Err(EvalError::GridTooLarge(n));
        }
        Ok(Self {
            origin,
            pitch,
            cols,
            rows,
            cells: vec![false; n],
        })
    }

    /// Center of cell `(col, row)`.
    pub fn center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.pitch,
            self.origin.1 + (row as f64 + 0.5) * self.pitch,
        )
    }

    /// Marks every cell whose center lies within `half_width` of a segment.
    fn stroke(&mut self, segs: &[[(f64, f64); 2]], half_width: f64) {
        let r2 = half_width * half_width;
        for [a, b] in segs {
            let c0 = (((a.0.min(b.0) - half_width - self.origin.0) / self.pitch).floor().max(0.0)) as usize;
            let c1 = (((a.0.max(b.0) + half_width - self.origin.0) / self.pitch).ceil() as usize).min(self.cols - 1);
            let r0 = (((a.1.min(b.1) - half_width - self.origin.1) / self.pitch).floor().max(0.0)) as usize;
            let r1 = (((a.1.max(b.1) + half_width - self.origin.1) / self.pitch).ceil() as usize).min(self.rows - 1);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    if point_segment_dist2(self.center(col, row), *a, *b) <= r2 {
                        self.cells[row * self.cols + col] = true;
                    }
                }
            }
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

pub fn point_segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Rasterizes both paths as strokes of `line_width` on one shared grid and
/// compares the inked cells.
pub fn deposition_overlap(
    truth: &[Keypoint],
    generated: &[Keypoint],
    line_width: f64,
    grid_pitch: f64,
) -> Result<OverlapResult, EvalError> {
    let (_, _, r) = overlap_rasters(truth, generated, line_width, grid_pitch)?;
    Ok(r)
}

/// Like [`deposition_overlap`], also returning the two rasters.
pub fn overlap_rasters(
    truth: &[Keypoint],
    generated: &[Keypoint],
    line_width: f64,
    grid_pitch: f64,
) -> Result<(DepositionRaster, DepositionRaster, OverlapResult), EvalError> {
    if !(line_width > 0.0 && grid_pitch > 0.0) {
        return Err(EvalError::InvalidArgument("line width and grid pitch must be positive".into()));
    }
    let ts = deposited_segments(truth);
    let gs = deposited_segments(generated);
    if ts.is_empty() || gs.is_empty() {
        return Err(EvalError::EmptyPath);
    }
    let all: Vec<_> = ts.iter().chain(&gs).copied().collect();
    if all.iter().flatten().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return Err(EvalError::InvalidArgument("path contains non-finite coordinates".into()));
    }
    let hw = line_width / 2.0;
    let mut rt = DepositionRaster::covering(&all, hw, grid_pitch)?;
    let mut rg = rt.clone();
    rt.stroke(&ts, hw);
    rg.stroke(&gs, hw);
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in rt.cells.iter().zip(&rg.cells) {
        inter += (*a && *b) as usize;
        union += (*a || *b) as usize;
    }
    let (nt, ng) = (rt.count(), rg.count());
    let r = OverlapResult {
        iou: inter as f64 / union as f64,
        truth_coverage: inter as f64 / nt as f64,
        gen_coverage: inter as f64 / ng as f64,
    };
    Ok((rt, rg, r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub line_width: f64,
    pub grid_pitch: f64,
    pub level: f64,
    pub resamples: usize,
    /// Resamples for the pointwise KDE band.
    pub band_resamples: usize,
    pub kde_points: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            line_width: DEFAULT_LINE_WIDTH,
            grid_pitch: DEFAULT_GRID_PITCH,
            level: 0.95,
            resamples: DEFAULT_BOOTSTRAP,
            band_resamples: 200,
            kde_points: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverlap {
    pub layer: usize,
    pub run: usize,
    pub result: OverlapResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeOverlay {
    pub grid: Vec<f64>,
    /// Absent when the truth sample has fewer than two distinct values.
    pub truth: Option<KdeCurve>,
    pub generated: Option<KdeCurve>,
    /// Pointwise band of the generated curve; empty without one.
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub layers: usize,
    pub runs: usize,
    pub truth_mean: f64,
    pub generated_mean: f64,
    pub run_means: Vec<f64>,
    pub truth_ci: Option<(f64, f64)>,
    pub generated_ci: Option<(f64, f64)>,
    pub reduction_percent: f64,
    pub mean_iou: Option<f64>,
    pub level: f64,
}

/// Everything the plots and tables are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub distances: DistanceSample,
    pub summary: Option<Summary>,
    pub kde: Option<KdeOverlay>,
    pub overlaps: Vec<LayerOverlap>,
    /// First truth layer and its first-run counterpart, for the overlay plots.
    pub example: Option<(Vec<Keypoint>, Vec<Keypoint>)>,
    pub line_width: f64,
    pub grid_pitch: f64,
}

/// Compares generated layers with the truth layer by layer.
pub fn evaluate(truth: &[Vec<Keypoint>], runs: &[Vec<Vec<Keypoint>>], opts: &EvalOptions) -> Result<EvalResults, EvalError> {
    let distances = DistanceSample::from_layers(truth, runs)?;
    distances.validate()?;
    let mut results = EvalResults {
        distances,
        summary: None,
        kde: None,
        overlaps: Vec::new(),
        example: None,
        line_width: opts.line_width,
        grid_pitch: opts.grid_pitch,
    };
    if runs.is_empty() || truth.is_empty() {
        return Ok(results);
    }
    let d = &results.distances;
    let pooled = d.pooled();
    let ci = |xs: &[f64], salt: u64| {
        if xs.len() >= 2 {
            bootstrap_ci(xs, opts.level, opts.resamples, opts.seed ^ salt).ok()
        } else {
            None
        }
    };
    let run_means: Vec<f64> = d.runs.iter().map(|r| mean(r)).collect();
    let summary = Summary {
        layers: truth.len(),
        runs: runs.len(),
        truth_mean: mean(&d.truth),
        generated_mean: mean(&pooled),
        run_means,
        truth_ci: ci(&d.truth, 1),
        generated_ci: ci(&pooled, 2),
        reduction_percent: mean_reduction(&d.truth, &pooled)?,
        mean_iou: None,
        level: opts.level,
    };

    let mut overlaps = Vec::new();
    for (r, layers) in runs.iter().enumerate() {
        for (l, (t, g)) in truth.iter().zip(layers).enumerate() {
            match deposition_overlap(t, g, opts.line_width, opts.grid_pitch) {
                Ok(result) => overlaps.push(LayerOverlap { layer: l, run: r, result }),
                Err(EvalError::EmptyPath) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let mean_iou = (!overlaps.is_empty()).then(|| overlaps.iter().map(|o| o.result.iou).sum::<f64>() / overlaps.len() as f64);

    // a curve needs at least two distinct values
    let ht = silverman_bandwidth(&d.truth).ok();
    let hg = silverman_bandwidth(&pooled).ok();
    if let Some(h) = ht.into_iter().chain(hg).reduce(f64::max) {
        let joined: Vec<f64> = d.truth.iter().chain(&pooled).copied().collect();
        let grid = kde_grid(&joined, h, opts.kde_points.max(2));
        let (band_lo, band_hi) = match hg {
            Some(hg) => kde_band(&pooled, hg, &grid, opts.level, opts.band_resamples.max(1), opts.seed ^ 3)?,
            None => (Vec::new(), Vec::new()),
        };
        results.kde = Some(KdeOverlay {
            truth: ht.map(|h| kde_on_grid(&d.truth, h, grid.clone())).transpose()?,
            generated: hg.map(|h| kde_on_grid(&pooled, h, grid.clone())).transpose()?,
            grid,
            band_lo,
            band_hi,
        });
    }
    results.summary = Some(Summary { mean_iou, ..summary });
    results.overlaps = overlaps;
    results.example = Some((truth[0].clone(), runs[0][0].clone()));
    Ok(results)
}

/// Decimal form with 17 significant digits; parses back to the same bits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub const DISTANCES_CSV: &str = "distances.csv";
pub const KDE_CSV: &str = "kde.csv";
pub const OVERLAP_CSV: &str = "overlap.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const KDE_SVG: &str = "kde.svg";
pub const SCATTER_SVG: &str = "scatter.svg";
pub const OVERLAP_SVG: &str = "overlap.svg";

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf, EvalError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|source| EvalError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn distances_csv(r: &EvalResults) -> String {
    let d = &r.distances;
    let mut s = String::from("layer,truth");
    for k in 0..d.runs.len() {
        let _ = write!(s, ",run_{k}");
    }
    s.push('\n');
    if d.runs.is_empty() {
        return s;
    }
    for (l, t) in d.truth.iter().enumerate() {
        let _ = write!(s, "{l},{}", num(*t));
        for run in &d.runs {
            let _ = write!(s, ",{}", num(run[l]));
        }
        s.push('\n');
    }
    s
}

fn kde_csv(r: &EvalResults) -> String {
    let mut s = String::from("x,truth_density,generated_density,band_lo,band_hi\n");
    if let Some(k) = &r.kde {
        let cell = |v: Option<&f64>| v.map(|x| num(*x)).unwrap_or_default();
        for i in 0..k.grid.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                num(k.grid[i]),
                cell(k.truth.as_ref().map(|c| &c.density[i])),
                cell(k.generated.as_ref().map(|c| &c.density[i])),
                cell(k.band_lo.get(i)),
                cell(k.band_hi.get(i))
            );
        }
    }
    s
}

fn overlap_csv(r: &EvalResults) -> String {
    let mut s = String::from("layer,run,iou,truth_coverage,gen_coverage\n");
    for o in &r.overlaps {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            o.layer,
            o.run,
            num(o.result.iou),
            num(o.result.truth_coverage),
            num(o.result.gen_coverage)
        );
    }
    s
}

fn summary_csv(r: &EvalResults) -> String {
    let mut s = String::from("key,value\n");
    if let Some(m) = &r.summary {
        let mut row = |k: &str, v: f64| {
            let _ = writeln!(s, "{k},{}", num(v));
        };
        row("truth_mean", m.truth_mean);
        row("generated_mean", m.generated_mean);
        for (i, v) in m.run_means.iter().enumerate() {
            row(&format!("run_{i}_mean"), *v);
        }
        if let Some((lo, hi)) = m.truth_ci {
            row("truth_ci_lo", lo);
            row("truth_ci_hi", hi);
        }
        if let Some((lo, hi)) = m.generated_ci {
            row("generated_ci_lo", lo);
            row("generated_ci_hi", hi);
        }
        row("reduction_percent", m.reduction_percent);
        if let Some(v) = m.mean_iou {
            row("mean_iou", v);
        }
    }
    s
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const MARGIN: f64 = 50.0;

fn svg_open(title: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n<title>{title}</title>\n<rect x=\"0\" y=\"0\" width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"
    )
}

/// Maps data coordinates into the plot area.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, equal: bool) -> Self {
        let (mut x0, mut x1) = xs.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        if equal {
            let sx = (x1 - x0) / (SVG_W - 2.0 * MARGIN);
            let sy = (y1 - y0) / (SVG_H - 2.0 * MARGIN);
            let s = sx.max(sy);
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            x0 = cx - s * (SVG_W - 2.0 * MARGIN) / 2.0;
            x1 = cx + s * (SVG_W - 2.0 * MARGIN) / 2.0;
            y0 = cy - s * (SVG_H - 2.0 * MARGIN) / 2.0;
            y1 = cy + s * (SVG_H - 2.0 * MARGIN) / 2.0;
        }
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (SVG_W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        SVG_H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (SVG_H - 2.0 * MARGIN)
    }

    fn points(&self, xs: &[f64], ys: &[f64]) -> String {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| format!("{:.2},{:.2}", self.px(*x), self.py(*y)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn axes(&self, xlabel: &str, ylabel: &str) -> String {
        let (l, r, b, t) = (MARGIN, SVG_W - MARGIN, SVG_H - MARGIN, MARGIN);
        format!(
            "<g stroke=\"black\" stroke-width=\"1\"><line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\"/><line x1=\"{l}\" y1=\"{b}\" x2=\"{l}\" y2=\"{t}\"/></g>\n\
             <g font-family=\"sans-serif\" font-size=\"11\">\
             <text x=\"{l}\" y=\"{}\">{:.4}</text><text x=\"{r}\" y=\"{}\" text-anchor=\"end\">{:.4}</text>\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>\
             <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{ylabel}</text></g>\n",
            b + 15.0,
            self.x0,
            b + 15.0,
            self.x1,
            SVG_W / 2.0,
            SVG_H - 10.0,
            SVG_H / 2.0,
            SVG_H / 2.0
        )
    }
}

fn kde_svg(k: &KdeOverlay) -> String {
    let grid = &k.grid;
    let curves = k.truth.iter().chain(&k.generated).flat_map(|c| c.density.iter());
    let ys = curves.chain(&k.band_hi).copied().chain([0.0]);
    let f = Frame::fit(grid.iter().copied(), ys, false);
    let mut s = svg_open("Travel distance density");
    s.push_str(&f.axes("travel distance", "density"));
    if !k.band_hi.is_empty() {
        let mut band = f.points(grid, &k.band_hi);
        let rev_x: Vec<f64> = grid.iter().rev().copied().collect();
        let rev_lo: Vec<f64> = k.band_lo.iter().rev().copied().collect();
        band.push(' ');
        band.push_str(&f.points(&rev_x, &rev_lo));
        let _ = writeln!(s, "<polygon class=\"ci-band\" points=\"{band}\" fill=\"#2a7ab0\" fill-opacity=\"0.2\" stroke=\"none\"/>");
    }
    if let Some(g) = &k.generated {
        let _ = writeln!(
            s,
            "<polyline class=\"generated\" points=\"{}\" fill=\"none\" stroke=\"#2a7ab0\" stroke-width=\"2\"/>",
            f.points(grid, &g.density)
        );
    }
    if let Some(t) = &k.truth {
        let _ = writeln!(
            s,
            "<polyline class=\"truth\" points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>",
            f.points(grid, &t.density)
        );
    }
    s.push_str(
        "<g font-family=\"sans-serif\" font-size=\"12\"><text x=\"460\" y=\"30\">- - ground truth</text><text x=\"460\" y=\"46\" fill=\"#2a7ab0\">--- generated</text></g>\n</svg>\n",
    );
    s
}

/// Blue-to-red ramp over `[0, 1]`.
fn ramp(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v).round() as u8;
    let b = (255.0 * (1.0 - v)).round() as u8;
    format!("#{r:02x}40{b:02x}")
}

fn scatter_svg(path: &[Keypoint]) -> String {
    let f = Frame::fit(path.iter().map(|k| k.x), path.iter().map(|k| k.y), true);
    let (emin, emax) = path.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), k| (a.min(k.e), b.max(k.e)));
    let span = if emax > emin { emax - emin } else { 1.0 };
    let mut s = svg_open("Keypoints colored by normalized extrusion");
    s.push_str(&f.axes("x", "y"));
    for k in path {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>",
            f.px(k.x),
            f.py(k.y),
            ramp((k.e - emin) / span)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn overlap_svg(truth: &[Keypoint], generated: &[Keypoint], line_width: f64) -> String {
    let all = truth.iter().chain(generated);
    let f = Frame::fit(all.clone().map(|k| k.x), all.map(|k| k.y), true);
    let stroke = (line_width * (SVG_W - 2.0 * MARGIN) / (f.x1 - f.x0)).max(1.0);
    let mut s = svg_open("Deposition overlap");
    s.push_str(&f.axes("x", "y"));
    for (class, color, path) in [("truth", "red", truth), ("generated", "green", generated)] {
        let _ = writeln!(s, "<g class=\"{class}\" stroke=\"{color}\" stroke-width=\"{stroke:.2}\" stroke-opacity=\"0.6\" stroke-linecap=\"round\">");
        for [a, b] in deposited_segments(path) {
            let _ = writeln!(
                s,
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\"/>",
                f.px(a.0),
                f.py(a.1),
                f.px(b.0),
                f.py(b.1)
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("<g font-family=\"sans-serif\" font-size=\"12\"><text x=\"500\" y=\"30\" fill=\"red\">ground truth</text><text x=\"500\" y=\"46\" fill=\"green\">generated</text></g>\n</svg>\n");
    s
}

/// Writes the CSV tables, the JSON summary and, when there is at least one
/// run, the SVG plots. Returns the written paths.
pub fn emit_plots(results: &EvalResults, out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = vec![
        write_file(out_dir, DISTANCES_CSV, &distances_csv(results))?,
        write_file(out_dir, KDE_CSV, &kde_csv(results))?,
        write_file(out_dir, OVERLAP_CSV, &overlap_csv(results))?,
        write_file(out_dir, SUMMARY_CSV, &summary_csv(results))?,
    ];
    if results.distances.runs.is_empty() {
        return Ok(written);
    }
    let json = serde_json::to_string_pretty(&results.summary)?;
    written.push(write_file(out_dir, SUMMARY_JSON, &(json + "\n"))?);
    if let Some(k) = &results.kde {
        written.push(write_file(out_dir, KDE_SVG, &kde_svg(k))?);
    }
    if let Some((t, g)) = &results.example {
        if !g.is_empty() {
            written.push(write_file(out_dir, SCATTER_SVG, &scatter_svg(g))?);
        }
        written.push(write_file(out_dir, OVERLAP_SVG, &overlap_svg(t, g, results.line_width))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn kde_two_points_symmetric() {
        let c = kde(&[-1.0, 1.0], None, 2001).unwrap();
        let n = c.density.len();
        for i in 0..n {
            assert!((c.density[i] - c.density[n - 1 - i]).abs() < 1e-9);
        }
        assert!((c.integral() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn kde_matches_normal_pdf() {
        let xs = normal_sample(10_000, 11);
        let c = kde(&xs, None, DEFAULT_KDE_POINTS).unwrap();
        let sup = c
            .grid
            .iter()
            .zip(&c.density)
            .map(|(x, d)| (d - (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
            .fold(0.0, f64::max);
        assert!(sup < 0.02, "sup error {sup}");
        assert!((c.integral() - 1.0).abs() < 1e-3);
        assert!(c.density.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn kde_errors() {
        assert!(matches!(kde(&[2.0, 2.0, 2.0], None, 64), Err(EvalError::DegenerateSample)));
        assert!(matches!(kde(&[2.0], None, 64), Err(EvalError::TooFewSamples { .. })));
        assert!(kde(&[1.0, 2.0], Some(-1.0), 64).is_err());
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let c = vec![0.1; 37];
        assert_eq!(bootstrap_ci(&c, 0.95, 1000, 5).unwrap(), (0.1, 0.1));
        let xs = normal_sample(200, 1);
        assert_eq!(bootstrap_ci(&xs, 0.95, 1000, 9).unwrap(), bootstrap_ci(&xs, 0.95, 1000, 9).unwrap());
        assert_ne!(bootstrap_ci(&xs, 0.95, 1000, 9).unwrap(), bootstrap_ci(&xs, 0.95, 1000, 10).unwrap());
    }

    #[test]
    fn bootstrap_coverage_of_normal_mean() {
        let covered = (0..200)
            .filter(|&trial| {
                let (lo, hi) = bootstrap_ci(&normal_sample(500, 1000 + trial), 0.95, 1000, trial).unwrap();
                lo <= 0.0 && 0.0 <= hi
            })
            .count();
        assert!((180..=198).contains(&covered), "{covered}/200");
    }

    #[test]
    fn bootstrap_width_shrinks_with_n() {
        for seed in 0..5 {
            let w = |n: usize| {
                let (lo, hi) = bootstrap_ci(&normal_sample(n, 100 + seed), 0.95, 1000, seed).unwrap();
                hi - lo
            };
            assert!(w(4000) < 0.6 * w(1000));
        }
    }

    #[test]
    fn mean_reduction_examples() {
        let r = mean_reduction(&[427.98], &[417.73]).unwrap();
        assert!((r - 2.3950).abs() < 5e-5, "{r}");
        assert_eq!(format!("{r:.4}"), "2.3950");
        let t = [1.0, 2.5, 3.25];
        assert_eq!(mean_reduction(&t, &t).unwrap(), 0.0);
        assert!(mean_reduction(&[1.0], &[2.0]).unwrap() < 0.0);
        assert!(matches!(mean_reduction(&[1.0, -1.0], &[2.0]), Err(EvalError::ZeroTruthMean)));
    }

    fn hatch(n: usize, side: f64, vertical: bool) -> Vec<Keypoint> {
        let mut out = Vec::new();
        let mut e = 0.0;
        for i in 0..n {
            let c = (i as f64 + 0.5) * side / n as f64;
            let (a, b) = if vertical { ((c, 0.0), (c, side)) } else { ((0.0, c), (side, c)) };
            out.push(Keypoint::new(a.0, a.1, e));
            e += 1.0;
            out.push(Keypoint::new(b.0, b.1, e));
        }
        out
    }

    #[test]
    fn overlap_identical_and_disjoint() {
        let p = hatch(5, 4.0, false);
        let r = deposition_overlap(&p, &p, 0.4, 0.1).unwrap();
        assert!(r.iou >= 0.99);
        let q: Vec<Keypoint> = p.iter().map(|k| Keypoint::new(k.x + 10.0, k.y, k.e)).collect();
        let r = deposition_overlap(&p, &q, 0.4, 0.1).unwrap();
        assert_eq!(r.iou, 0.0);
        assert!(matches!(
            deposition_overlap(&[Keypoint::new(0.0, 0.0, 0.0)], &p, 0.4, 0.1),
            Err(EvalError::EmptyPath)
        ));
    }

    #[test]
    fn crossed_hatch_matches_brute_force() {
        let (side, n) = (4.0, 5);
        let w = side / n as f64;
        let h = hatch(n, side, false);
        let v = hatch(n, side, true);
        let (rt, rg, r) = overlap_rasters(&h, &v, w, 0.05).unwrap();
        // brute force over the same cell centers
        let (mut i, mut u, mut a, mut b) = (0, 0, 0, 0);
        let near = |p: (f64, f64), path: &[Keypoint]| {
            deposited_segments(path)
                .iter()
                .any(|[s, t]| point_segment_dist2(p, *s, *t) <= (w / 2.0) * (w / 2.0))
        };
        for row in 0..rt.rows {
            for col in 0..rt.cols {
                let c = rt.center(col, row);
                let (x, y) = (near(c, &h), near(c, &v));
                i += (x && y) as usize;
                u += (x || y) as usize;
                a += x as usize;
                b += y as usize;
            }
        }
        assert_eq!((a, b), (rt.count(), rg.count()));
        assert_eq!(r.iou, i as f64 / u as f64);
        // both fill the square; only the round end caps differ
        let caps = n as f64 * std::f64::consts::PI * (w / 2.0) * (w / 2.0);
        let expected = side * side / (side * side + 2.0 * caps);
        assert!((r.iou - expected).abs() < 0.02, "{} vs {expected}", r.iou);
    }

    #[test]
    fn csv_numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, 427.98, 1e-300, -2.5e17, std::f64::consts::PI] {
            assert_eq!(num(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn empty_run_list_writes_headers_only() {
        let truth = vec![hatch(3, 2.0, false)];
        let res = evaluate(&truth, &[], &EvalOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&res, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        for f in files {
            assert_eq!(fs::read_to_string(f).unwrap().lines().count(), 1);
        }
    }

    #[test]
    fn layer_count_mismatch() {
        let truth = vec![hatch(3, 2.0, false), hatch(3, 2.0, true)];
        let runs = vec![vec![hatch(3, 2.0, false)]];
        assert!(matches!(
            evaluate(&truth, &runs, &EvalOptions::default()),
            Err(EvalError::LayerCountMismatch { .. })
        ));
    }

    /// Minimal XML check: balanced tags, quoted attributes, one root.
    pub(crate) fn well_formed(xml: &str) -> bool {
        let body = xml.trim_start().strip_prefix("<?xml").and_then(|r| r.split_once("?>")).map_or(xml, |(_, r)| r);
        let mut stack: Vec<String> = Vec::new();
        let mut roots = 0;
        let mut rest = body;
        while let Some(i) = rest.find('<') {
            let Some(j) = rest[i..].find('>') else { return false };
            let tag = &rest[i + 1..i + j];
            rest = &rest[i + j + 1..];
            if tag.matches('"').count() % 2 != 0 {
                return false;
            }
            if let Some(name) = tag.strip_prefix('/') {
                if stack.pop().as_deref() != Some(name.trim()) {
                    return false;
                }
            } else if !tag.ends_with('/') {
                if stack.is_empty() {
                    roots += 1;
                }
                stack.push(tag.split_whitespace().next().unwrap_or("").to_string());
            } else if stack.is_empty() {
                roots += 1;
            }
        }
        stack.is_empty() && roots == 1
    }

    fn jitter(path: &[Keypoint], d: f64) -> Vec<Keypoint> {
        path.iter().map(|k| Keypoint::new(k.x + d, k.y - d, k.e)).collect()
    }

    #[test]
    fn one_run_plots_are_well_formed() {
        let truth = vec![hatch(3, 2.0, false), hatch(4, 3.0, true), hatch(5, 2.5, false)];
        let run: Vec<Vec<Keypoint>> = truth.iter().map(|l| jitter(l, 0.05)).collect();
        let res = evaluate(&truth, &[run], &EvalOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&res, dir.path()).unwrap();
        let svgs: Vec<_> = files.iter().filter(|f| f.extension().is_some_and(|e| e == "svg")).collect();
        assert_eq!(svgs.len(), 3);
        for f in svgs {
            assert!(well_formed(&fs::read_to_string(f).unwrap()), "{}", f.display());
        }
        assert!(!well_formed("<svg><g></svg>"));
    }

    #[test]
    fn three_runs_draw_band_and_csv_matches_memory() {
        let truth = vec![hatch(3, 2.0, false), hatch(4, 3.0, true), hatch(5, 2.5, false)];
        let runs: Vec<Vec<Vec<Keypoint>>> = (0..3)
            .map(|r| truth.iter().map(|l| jitter(l, 0.03 * (r + 1) as f64)).collect())
            .collect();
        let res = evaluate(&truth, &runs, &EvalOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_plots(&res, dir.path()).unwrap();
        let svg = fs::read_to_string(dir.path().join(KDE_SVG)).unwrap();
        assert!(svg.contains("class=\"ci-band\""));
        assert!(svg.contains("stroke-dasharray"));

        let csv = fs::read_to_string(dir.path().join(DISTANCES_CSV)).unwrap();
        for (l, line) in csv.lines().skip(1).enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[1].parse::<f64>().unwrap().to_bits(), res.distances.truth[l].to_bits());
            for r in 0..3 {
                assert_eq!(cells[2 + r].parse::<f64>().unwrap().to_bits(), res.distances.runs[r][l].to_bits());
            }
        }
        let overlap = fs::read_to_string(dir.path().join(OVERLAP_CSV)).unwrap();
        for (line, o) in overlap.lines().skip(1).zip(&res.overlaps) {
            let iou: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert_eq!(iou.to_bits(), o.result.iou.to_bits());
        }
    }

    #[test]
    fn identical_runs_give_zero_reduction_and_full_overlap() {
        let truth = vec![hatch(3, 2.0, false), hatch(4, 3.0, true)];
        let res = evaluate(&truth, &[truth.clone()], &EvalOptions::default()).unwrap();
        let s = res.summary.unwrap();
        assert_eq!(s.reduction_percent, 0.0);
        assert_eq!(s.mean_iou, Some(1.0));
    }

    proptest! {
        #[test]
        fn overlap_iou_symmetric_and_bounded(
            pts in proptest::collection::vec((0.0..5.0f64, 0.0..5.0f64), 2..6),
            shift in 0.0..1.0f64,
        ) {
            let a: Vec<Keypoint> = pts.iter().enumerate().map(|(i, p)| Keypoint::new(p.0, p.1, i as f64)).collect();
            let b: Vec<Keypoint> = pts.iter().enumerate().map(|(i, p)| Keypoint::new(p.0 + shift, p.1, i as f64)).collect();
            let ab = deposition_overlap(&a, &b, 0.4, 0.1).unwrap();
            let ba = deposition_overlap(&b, &a, 0.4, 0.1).unwrap();
            prop_assert_eq!(ab.iou, ba.iou);
            prop_assert!(ab.iou <= ab.truth_coverage.min(ab.gen_coverage) + 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab.iou));
        }

        #[test]
        fn reduction_of_identical_sets_is_zero(xs in proptest::collection::vec(0.1..1e4f64, 1..50)) {
            prop_assert_eq!(mean_reduction(&xs, &xs).unwrap(), 0.0);
        }
    }
}
