//! Forward noising, the masked x0-prediction loss and the ancestral sampler.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Graph, ModelConfig, ModelError, ParamStore, Tensor, Var};

pub const CHANNEL_WEIGHTS: [f64; 3] = [1.3, 1.3, 0.4];
pub const SNR_GAMMA: f64 = 5.0;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("timestep {t} outside schedule of {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every position is masked out")]
    AllMasked,
    #[error("sampler state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub snr: Vec<f64>,
    /// Per-step loss weight `min(snr, gamma)` divided by its mean over steps.
    pub loss_weights: Vec<f64>,
}

fn cosine_f(t: f64, steps: f64, s: f64) -> f64 {
    (((t / steps + s) / (1.0 + s)) * FRAC_PI_2).cos().powi(2)
}

/// Cosine schedule. Step `t` (0-based) uses the cumulative signal level at
/// continuous time `(t + 1) / T`, so every step adds noise and the last one
/// reaches (clipped) pure noise.
pub fn make_cosine_schedule(steps: usize, s: f64) -> Result<DiffusionSchedule, DiffusionError> {
    if steps < 2 {
        return Err(DiffusionError::TooFewSteps(steps));
    }
    let tf = steps as f64;
    let f0 = cosine_f(0.0, tf, s);
    let mut betas = Vec::with_capacity(steps);
    let mut prev = 1.0;
    for t in 0..steps {
        let ab = cosine_f((t + 1) as f64, tf, s) / f0;
        let beta = (1.0 - ab / prev).clamp(0.0, MAX_BETA);
        betas.push(beta);
        prev *= 1.0 - beta;
    }
    Ok(DiffusionSchedule::from_betas(betas))
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let snr: Vec<f64> = alpha_bars.iter().map(|ab| ab / (1.0 - ab)).collect();
        let clipped: Vec<f64> = snr.iter().map(|s| s.min(SNR_GAMMA)).collect();
        let mean = clipped.iter().sum::<f64>() / clipped.len() as f64;
        let loss_weights = clipped.iter().map(|w| w / mean).collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            snr,
            loss_weights,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t >= self.steps() {
            return Err(DiffusionError::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    /// `ᾱ_{t-1}`, with `ᾱ_{-1} = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Coefficients `(c_x0, c_xt, variance)` of the posterior q(x_{t-1} | x_t, x0).
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (ab, abp, beta, alpha) = (self.alpha_bars[t], self.alpha_bar_prev(t), self.betas[t], self.alphas[t]);
        let denom = 1.0 - ab;
        let c0 = abp.sqrt() * beta / denom;
        let ct = alpha.sqrt() * (1.0 - abp) / denom;
        let var = beta * (1.0 - abp) / denom;
        (c0, ct, var)
    }
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) noise`.
pub fn q_sample(
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
) -> Result<Tensor, DiffusionError> {
    schedule.check(t)?;
    Ok(q_sample_with(schedule.alpha_bars[t], x0, noise))
}

/// Forward corruption at an explicit signal level.
pub fn q_sample_with(alpha_bar: f64, x0: &Tensor, noise: &Tensor) -> Tensor {
    assert_eq!(x0.shape(), noise.shape(), "noise must match x0");
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Tensor::from_vec(
        x0.rows,
        x0.cols,
        x0.data.iter().zip(&noise.data).map(|(x, n)| a * x + b * n).collect(),
    )
}

pub fn standard_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub channel: [f64; 3],
    /// Apply the schedule's SNR-based per-step weight.
    pub snr_weighting: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            channel: CHANNEL_WEIGHTS,
            snr_weighting: true,
        }
    }
}

impl LossWeights {
    pub fn unweighted() -> Self {
        Self {
            channel: [1.0; 3],
            snr_weighting: false,
        }
    }

    fn time_weight(&self, schedule: &DiffusionSchedule, t: usize) -> f64 {
        if self.snr_weighting {
            schedule.loss_weights[t]
        } else {
            1.0
        }
    }
}

fn check_loss_shapes(x0: &Tensor, x0_hat: (usize, usize), mask: &[f64]) -> Result<f64, DiffusionError> {
    if x0.rows != 3 || x0.shape() != x0_hat || mask.len() != x0.cols {
        return Err(DiffusionError::ShapeMismatch(format!(
            "x0 {:?}, prediction {:?}, mask {}",
            x0.shape(),
            x0_hat,
            mask.len()
        )));
    }
    let total: f64 = mask.iter().sum();
    if total <= 0.0 {
        return Err(DiffusionError::AllMasked);
    }
    Ok(total)
}

/// Masked, channel-weighted squared error averaged over valid positions and
/// scaled by the per-step weight. `x0` and `x0_hat` are `[3, L]`.
pub fn loss(
    x0: &Tensor,
    x0_hat: &Tensor,
    mask: &[f64],
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
    t: usize,
) -> Result<f64, DiffusionError> {
    schedule.check(t)?;
    let total = check_loss_shapes(x0, x0_hat.shape(), mask)?;
    let l = x0.cols;
    let mut acc = 0.0;
    for (c, w) in weights.channel.iter().enumerate() {
        for (i, m) in mask.iter().enumerate() {
            if *m != 0.0 {
                let d = x0.data[c * l + i] - x0_hat.data[c * l + i];
                acc += m * w * d * d;
            }
        }
    }
    Ok(weights.time_weight(schedule, t) * acc / total)
}

/// Per-element weight matrix `w_snr * w_c * m_i / Σm` used by [`loss_graph`].
pub fn loss_weight_matrix(
    mask: &[f64],
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
    t: usize,
) -> Result<Tensor, DiffusionError> {
    schedule.check(t)?;
    let total: f64 = mask.iter().sum();
    if total <= 0.0 {
        return Err(DiffusionError::AllMasked);
    }
    let tw = weights.time_weight(schedule, t);
    let l = mask.len();
    let mut out = Tensor::zeros(3, l);
    for (c, w) in weights.channel.iter().enumerate() {
        for (i, m) in mask.iter().enumerate() {
            out.data[c * l + i] = tw * w * m / total;
        }
    }
    Ok(out)
}

/// Differentiable form of [`loss`]; masked positions get exactly zero gradient.
pub fn loss_graph(
    g: &mut Graph,
    x0: &Tensor,
    x0_hat: Var,
    mask: &[f64],
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
    t: usize,
) -> Result<Var, DiffusionError> {
    check_loss_shapes(x0, g.value(x0_hat).shape(), mask)?;
    let w = loss_weight_matrix(mask, weights, schedule, t)?;
    let target = g.constant(x0.clone());
    let d = g.sub(x0_hat, target);
    let sq = g.mul(d, d);
    let wv = g.constant(w);
    let weighted = g.mul(sq, wv);
    Ok(g.sum_all(weighted))
}

/// Plain masked mean squared error over valid positions and channels.
pub fn masked_mse(x0: &Tensor, x0_hat: &Tensor, mask: &[f64]) -> Result<f64, DiffusionError> {
    let total = check_loss_shapes(x0, x0_hat.shape(), mask)?;
    let l = x0.cols;
    let mut acc = 0.0;
    for c in 0..3 {
        for (i, m) in mask.iter().enumerate() {
            if *m != 0.0 {
                let d = x0.data[c * l + i] - x0_hat.data[c * l + i];
                acc += m * d * d;
            }
        }
    }
    Ok(acc / (3.0 * total))
}

/// Per-channel mean absolute error over valid positions.
pub fn masked_channel_mae(x0: &Tensor, x0_hat: &Tensor, mask: &[f64]) -> Result<[f64; 3], DiffusionError> {
    let total = check_loss_shapes(x0, x0_hat.shape(), mask)?;
    let l = x0.cols;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        for (i, m) in mask.iter().enumerate() {
            if *m != 0.0 {
                *o += m * (x0.data[c * l + i] - x0_hat.data[c * l + i]).abs();
            }
        }
        *o /= total;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub xt_norm: f64,
    pub x0_hat_norm: f64,
}

pub fn write_trace_csv<W: Write>(mut w: W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "t,xt_norm,x0_hat_norm")?;
    for r in rows {
        writeln!(w, "{},{:e},{:e}", r.t, r.xt_norm, r.x0_hat_norm)?;
    }
    Ok(())
}

fn clamp_unit(t: &mut Tensor) {
    for v in t.data.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Ancestral sampling with posterior variance. `denoise(x_t, t)` returns the
/// predicted clean sequence; predictions are clamped to `[-1, 1]` before
/// each posterior step.
pub fn sample<F, R>(
    mut denoise: F,
    rows: usize,
    len: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Tensor, DiffusionError>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor, DiffusionError>,
    R: Rng,
{
    let mut x = standard_normal(rng, rows, len);
    for t in (0..schedule.steps()).rev() {
        let mut x0_hat = denoise(&x, t)?;
        if x0_hat.shape() != x.shape() {
            return Err(DiffusionError::ShapeMismatch(format!(
                "denoiser returned {:?} for {:?}",
                x0_hat.shape(),
                x.shape()
            )));
        }
        if !x0_hat.all_finite() {
            return Err(DiffusionError::NonFiniteState { step: t });
        }
        clamp_unit(&mut x0_hat);
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                t,
                xt_norm: x.sq_norm().sqrt(),
                x0_hat_norm: x0_hat.sq_norm().sqrt(),
            });
        }
        if t == 0 {
            return Ok(x0_hat);
        }
        let (c0, ct, var) = schedule.posterior(t);
        let sigma = var.sqrt();
        for (xv, x0v) in x.data.iter_mut().zip(&x0_hat.data) {
            let z: f64 = rng.sample(StandardNormal);
            *xv = c0 * x0v + ct * *xv + sigma * z;
        }
        if !x.all_finite() {
            return Err(DiffusionError::NonFiniteState { step: t });
        }
    }
    unreachable!("schedule has at least one step")
}

/// Independent generator for batch item `index` under a root seed.
pub fn item_rng(root_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(index);
    rng
}

/// Samples a `[3, len]` sequence from a trained model given encoder tokens.
pub fn sample_model<R: Rng>(
    cfg: &ModelConfig,
    params: &ParamStore,
    tokens: &Tensor,
    len: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<Tensor, DiffusionError> {
    sample(
        |x, t| Ok(cfg.denoise_value(params, x, t, tokens)?),
        3,
        len,
        schedule,
        rng,
        trace,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn schedule_invariants_for_several_lengths() {
        for steps in [10, 50, 100, 500] {
            let s = make_cosine_schedule(steps, COSINE_OFFSET).unwrap();
            assert_eq!(s.steps(), steps);
            // with fewer than ~80 steps the first step alone removes more than 0.1% of the signal
            if steps >= 100 {
                assert!(s.alpha_bars[0] >= 0.999, "{steps}: {}", s.alpha_bars[0]);
            } else {
                assert!(s.alpha_bars[0] > 0.97 && s.alpha_bars[0] < 1.0);
            }
            assert!(s.alpha_bars[steps - 1] <= 1e-4, "{steps}: {}", s.alpha_bars[steps - 1]);
            assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
            assert!(s.betas.iter().all(|&b| b > 0.0 && b <= MAX_BETA));
            let mean: f64 = s.loss_weights.iter().sum::<f64>() / steps as f64;
            assert!((mean - 1.0).abs() < 1e-12);
        }
        assert!(make_cosine_schedule(1, COSINE_OFFSET).is_err());
    }

    #[test]
    fn schedule_matches_closed_form() {
        let s = make_cosine_schedule(500, COSINE_OFFSET).unwrap();
        let f = |t: f64| (((t / 500.0 + 0.008) / 1.008) * FRAC_PI_2).cos().powi(2);
        for t in [0usize, 10, 250, 497] {
            let expected = f((t + 1) as f64) / f(0.0);
            assert!((s.alpha_bars[t] - expected).abs() < 1e-12 * expected.max(1e-3));
        }
    }

    #[test]
    fn q_sample_special_cases() {
        let s = make_cosine_schedule(50, COSINE_OFFSET).unwrap();
        let x0 = Tensor::from_vec(3, 2, vec![0.5, -1.0, 0.25, 0.0, 1.0, -0.5]);
        let zero = Tensor::zeros(3, 2);
        let xt = q_sample(&s, &x0, 20, &zero).unwrap();
        let a = s.alpha_bars[20].sqrt();
        for (o, x) in xt.data.iter().zip(&x0.data) {
            assert_eq!(*o, a * x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = standard_normal(&mut rng, 3, 2);
        assert_eq!(q_sample_with(1.0, &x0, &noise), x0);
        assert!(q_sample(&s, &x0, 50, &noise).is_err());
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        let s = make_cosine_schedule(100, COSINE_OFFSET).unwrap();
        let t = 40;
        let n = 100_000;
        let x0 = Tensor::from_vec(1, 1, vec![0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let noise = standard_normal(&mut rng, 1, 1);
            let v = q_sample(&s, &x0, t, &noise).unwrap().data[0];
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let target_var = 1.0 - s.alpha_bars[t];
        assert!((mean - s.alpha_bars[t].sqrt() * 0.7).abs() < 3.0 * target_var.sqrt() / (n as f64).sqrt());
        assert!((var - target_var).abs() / target_var < 0.02);
    }

    #[test]
    fn loss_examples() {
        let s = make_cosine_schedule(10, COSINE_OFFSET).unwrap();
        let w = LossWeights {
            snr_weighting: false,
            ..LossWeights::default()
        };
        let x0 = Tensor::from_vec(3, 1, vec![1.0, 0.0, 0.0]);
        let pred = Tensor::zeros(3, 1);
        assert!((loss(&x0, &pred, &[1.0], &w, &s, 3).unwrap() - 1.3).abs() < 1e-15);
        assert_eq!(loss(&x0, &x0, &[1.0], &w, &s, 3).unwrap(), 0.0);
        assert!(matches!(loss(&x0, &pred, &[0.0], &w, &s, 3), Err(DiffusionError::AllMasked)));
        assert!(loss(&x0, &Tensor::zeros(3, 2), &[1.0], &w, &s, 3).is_err());
    }

    #[test]
    fn snr_weight_scales_loss() {
        let s = make_cosine_schedule(10, COSINE_OFFSET).unwrap();
        let x0 = Tensor::from_vec(3, 1, vec![1.0, 0.0, 0.0]);
        let pred = Tensor::zeros(3, 1);
        let l = loss(&x0, &pred, &[1.0], &LossWeights::default(), &s, 9).unwrap();
        assert!((l - 1.3 * s.loss_weights[9]).abs() < 1e-15);
        assert!(s.loss_weights[0] > s.loss_weights[9]);
    }

    #[test]
    fn graph_loss_matches_and_ignores_padding() {
        let s = make_cosine_schedule(20, COSINE_OFFSET).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = standard_normal(&mut rng, 3, 6);
        let pred = standard_normal(&mut rng, 3, 6);
        let mask = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let w = LossWeights::default();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let p = g.input(pred.clone());
        let root = loss_graph(&mut g, &x0, p, &mask, &w, &s, 7).unwrap();
        let direct = loss(&x0, &pred, &mask, &w, &s, 7).unwrap();
        assert!((g.value(root).data[0] - direct).abs() < 1e-12);
        let grads = g.backward(root);
        let gp = grads.get(p).unwrap();
        for c in 0..3 {
            assert_eq!(gp.at(c, 4), 0.0);
            assert_eq!(gp.at(c, 5), 0.0);
            assert!(gp.at(c, 0) != 0.0);
        }
    }

    #[test]
    fn identity_oracle_sampler_returns_target() {
        let s = make_cosine_schedule(30, COSINE_OFFSET).unwrap();
        let target = Tensor::from_vec(3, 4, vec![0.1, -0.2, 0.3, 1.0, -1.0, 0.0, 0.5, 0.25, -0.75, 0.9, 0.05, -0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut trace = Vec::new();
        let out = sample(|_, _| Ok(target.clone()), 3, 4, &s, &mut rng, Some(&mut trace)).unwrap();
        assert_eq!(out, target);
        assert_eq!(trace.len(), 30);
        assert_eq!(trace.last().unwrap().t, 0);
        let mut csv = Vec::new();
        write_trace_csv(&mut csv, &trace).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 31);
    }

    #[test]
    fn sampler_is_deterministic_and_reports_non_finite() {
        let s = make_cosine_schedule(10, COSINE_OFFSET).unwrap();
        let run = |seed| {
            let mut rng = item_rng(seed, 0);
            sample(|x, _| Ok(x.clone()), 3, 5, &s, &mut rng, None).unwrap()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample(|x, _| Ok(Tensor::filled(x.rows, x.cols, f64::NAN)), 3, 5, &s, &mut rng, None);
        assert!(matches!(err, Err(DiffusionError::NonFiniteState { step: 9 })));
        assert_ne!(item_rng(1, 0).next_u64(), item_rng(1, 1).next_u64());
    }

    proptest! {
        #[test]
        fn masked_values_never_change_loss(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            junk in proptest::collection::vec(-50.0f64..50.0, 12),
            t in 0usize..20,
        ) {
            let s = make_cosine_schedule(20, COSINE_OFFSET).unwrap();
            let x0 = Tensor::from_vec(3, 4, vec![0.0; 12]);
            let mut pred = Tensor::from_vec(3, 4, vals);
            let mask = [1.0, 1.0, 0.0, 0.0];
            let base = loss(&x0, &pred, &mask, &LossWeights::default(), &s, t).unwrap();
            for c in 0..3 {
                for i in 2..4 {
                    *pred.at_mut(c, i) = junk[c * 4 + i];
                }
            }
            let changed = loss(&x0, &pred, &mask, &LossWeights::default(), &s, t).unwrap();
            prop_assert_eq!(base, changed);
        }
    }
}
