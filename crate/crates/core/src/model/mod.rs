//! Differentiable forward computation: a patch-token image encoder and a
//! conditional 1-D U-Net that predicts clean keypoint sequences.

mod encoder;
pub mod graph;
pub mod params;
pub mod tensor;
mod unet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{Gradients, Graph, Var};
pub use params::{Checkpoint, DType, ParamClass, ParamStore};
pub use tensor::Tensor;

use crate::geometry::{SliceImage, IMAGE_SIZE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: IMAGE_SIZE,
            patch_size: 14,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "image side {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig("embed_dim must be divisible by heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub multipliers: Vec<usize>,
    pub head_dim: usize,
    /// Resolution levels (0 = full length) that carry cross-attention in
    /// both the encoder and decoder paths.
    pub attn_levels: Vec<usize>,
    pub max_groups: usize,
}

impl UNetConfig {
    pub fn new(base_channels: usize, multipliers: Vec<usize>) -> Self {
        let n = multipliers.len();
        Self {
            in_channels: 3,
            base_channels,
            attn_levels: (n.saturating_sub(3)..n).collect(),
            multipliers,
            head_dim: 32,
            max_groups: 8,
        }
    }

    pub fn paper() -> Self {
        Self::new(128, vec![2, 2, 4, 6, 8])
    }

    pub fn desk() -> Self {
        Self::new(32, vec![2, 2, 4])
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.multipliers[level]
    }

    pub fn time_dim(&self) -> usize {
        self.base_channels * 4
    }

    /// Length granularity required by the strided downsampling.
    pub fn length_multiple(&self) -> usize {
        let down = 1usize << (self.multipliers.len().saturating_sub(1));
        lcm(down, 16)
    }

    pub fn padded_len(&self, len: usize) -> usize {
        let m = self.length_multiple();
        len.div_ceil(m) * m
    }

    pub fn heads_for(&self, channels: usize) -> usize {
        (channels / self.head_dim).max(1)
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        let mut g = self.max_groups.min(channels).max(1);
        while channels % g != 0 {
            g -= 1;
        }
        g
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.base_channels == 0 || self.multipliers.is_empty() {
            return Err(ModelError::InvalidConfig("empty U-Net configuration".into()));
        }
        if self.base_channels % 2 != 0 {
            return Err(ModelError::InvalidConfig("base_channels must be even".into()));
        }
        for l in 0..self.multipliers.len() {
            let c = self.channels(l);
            if c % self.heads_for(c) != 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "channels {c} not divisible into heads of {}",
                    self.head_dim
                )));
            }
        }
        if self.attn_levels.iter().any(|&l| l >= self.multipliers.len()) {
            return Err(ModelError::InvalidConfig("attention level out of range".into()));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub unet: UNetConfig,
    /// Fixed keypoint sequence length (N_max).
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.unet.validate()?;
        if self.seq_len == 0 {
            return Err(ModelError::InvalidConfig("seq_len must be positive".into()));
        }
        Ok(())
    }

    /// Allocates and randomly initializes every parameter.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore, ModelError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        encoder::init(&self.encoder, &mut store, &mut rng)?;
        unet::init(&self.unet, self.encoder.embed_dim, &mut store, &mut rng)?;
        let d = self.encoder.embed_dim;
        store.insert_weight(&mut rng, "len.w", ParamClass::Linear, d, 1, d)?;
        store.insert("len.b", ParamClass::Linear, Tensor::filled(1, 1, 0.5))?;
        Ok(store)
    }

    /// Patch tokens `[P, D]` for an image.
    pub fn encode(&self, g: &mut Graph, image: &SliceImage) -> Result<Var, ModelError> {
        encoder::forward(&self.encoder, g, image)
    }

    /// Predicted clean sequence `[3, L]` from a noisy `[3, L]` sequence.
    pub fn denoise(&self, g: &mut Graph, x_t: Var, t: usize, tokens: Var) -> Result<Var, ModelError> {
        unet::forward(&self.unet, self.encoder.embed_dim, g, x_t, t, tokens)
    }

    /// Predicted valid length as a fraction of `seq_len`, shape `[1, 1]`.
    pub fn length_fraction(&self, g: &mut Graph, tokens: Var) -> Var {
        let pooled = g.mean_rows(tokens);
        let w = g.param("len.w");
        let b = g.param("len.b");
        let y = g.matmul(pooled, w);
        g.add(y, b)
    }

    /// Forward-only convenience wrappers.
    pub fn encode_value(&self, params: &ParamStore, image: &SliceImage) -> Result<Tensor, ModelError> {
        let mut g = Graph::new(params);
        let v = self.encode(&mut g, image)?;
        Ok(g.value(v).clone())
    }

    pub fn denoise_value(
        &self,
        params: &ParamStore,
        x_t: &Tensor,
        t: usize,
        tokens: &Tensor,
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new(params);
        let x = g.constant(x_t.clone());
        let c = g.constant(tokens.clone());
        let y = self.denoise(&mut g, x, t, c)?;
        Ok(g.value(y).clone())
    }

    /// Valid length rounded and clamped to `[1, seq_len]`.
    pub fn predict_length(&self, params: &ParamStore, tokens: &Tensor) -> usize {
        let mut g = Graph::new(params);
        let c = g.constant(tokens.clone());
        let f = self.length_fraction(&mut g, c);
        let raw = g.value(f).data[0] * self.seq_len as f64;
        if raw.is_finite() {
            (raw.round() as i64).clamp(1, self.seq_len as i64) as usize
        } else {
            self.seq_len
        }
    }

    pub fn desk(seq_len: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                embed_dim: 32,
                depth: 2,
                heads: 2,
                ..EncoderConfig::default()
            },
            unet: UNetConfig::desk(),
            seq_len,
        }
    }

    pub fn paper(seq_len: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                embed_dim: 384,
                depth: 12,
                heads: 6,
                ..EncoderConfig::default()
            },
            unet: UNetConfig::paper(),
            seq_len,
        }
    }

    /// Tiny network used for gradient checks.
    pub fn reduced(seq_len: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                embed_dim: 16,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                ..EncoderConfig::default()
            },
            unet: UNetConfig::new(8, vec![2, 2, 4]),
            seq_len,
        }
    }
}

/// Multi-head scaled dot-product attention inside a graph. `q` is `[N, H*dh]`,
/// `k` and `v` are `[P, H*dh]`.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, ModelError> {
    let (qn, qd) = g.value(q).shape();
    let (kp, kd) = g.value(k).shape();
    let (vp, vd) = g.value(v).shape();
    if qd != kd || kp != vp || vd != qd || heads == 0 || qd % heads != 0 || qn == 0 || kp == 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "attention q {qn}x{qd}, k {kp}x{kd}, v {vp}x{vd}, heads {heads}"
        )));
    }
    let dh = qd / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let scores = g.matmul_t(qh, false, kh, true);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, vh));
    }
    Ok(if heads == 1 { outs[0] } else { g.concat_cols(&outs) })
}

/// `softmax(Q Kᵀ / sqrt(d)) V` for a single head.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, ModelError> {
    if q.cols != k.cols || k.rows != v.rows {
        return Err(ModelError::ShapeMismatch(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let scale = 1.0 / (q.cols as f64).sqrt();
    let s = g.matmul_t(qv, false, kv, true);
    let s = g.scale(s, scale);
    let a = g.softmax_rows(s);
    let o = g.matmul(a, vv);
    Ok(g.value(o).clone())
}

/// Evaluates `loss_fn` on a fresh graph over `params` and returns the loss
/// and the gradient of every parameter.
pub fn grad<F>(params: &ParamStore, loss_fn: F) -> Result<(f64, Vec<Tensor>), ModelError>
where
    F: FnOnce(&mut Graph) -> Result<Var, ModelError>,
{
    let mut g = Graph::new(params);
    let root = loss_fn(&mut g)?;
    let loss = g.value(root).data[0];
    let grads = g.backward(root).param_grads(params);
    for (i, t) in grads.iter().enumerate() {
        if !t.all_finite() {
            return Err(ModelError::NonFiniteGradient(params.name(i).to_string()));
        }
    }
    Ok((loss, grads))
}

/// One finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub param: String,
    pub class: ParamClass,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a - n| / max(|a|, |n|, 1e-6)`
    pub rel_error: f64,
}

/// Picks `count` random scalar coordinates `(tensor, element)` among the
/// parameters of `class`, uniformly over scalars.
pub fn sample_coordinates<R: Rng>(
    params: &ParamStore,
    class: ParamClass,
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let members: Vec<usize> = (0..params.len()).filter(|&i| params.class(i) == class).collect();
    let total: usize = members.iter().map(|&i| params.get_index(i).data.len()).sum();
    if total == 0 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let mut r = rng.random_range(0..total);
            for &i in &members {
                let n = params.get_index(i).data.len();
                if r < n {
                    return (i, r);
                }
                r -= n;
            }
            unreachable!("index within total")
        })
        .collect()
}

/// Compares reverse-mode gradients with central differences of step `h` at
/// the given coordinates.
pub fn gradient_check<F>(
    params: &ParamStore,
    coords: &[(usize, usize)],
    h: f64,
    loss_fn: F,
) -> Result<Vec<GradCheck>, ModelError>
where
    F: Fn(&mut Graph) -> Result<Var, ModelError>,
{
    let (_, grads) = grad(params, |g| loss_fn(g))?;
    let eval = |p: &ParamStore| -> Result<f64, ModelError> {
        let mut g = Graph::new(p);
        let root = loss_fn(&mut g)?;
        Ok(g.value(root).data[0])
    };
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &(ti, ei) in coords {
        let orig = work.get_index(ti).data[ei];
        work.get_index_mut(ti).data[ei] = orig + h;
        let up = eval(&work)?;
        work.get_index_mut(ti).data[ei] = orig - h;
        let down = eval(&work)?;
        work.get_index_mut(ti).data[ei] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[ti].data[ei];
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        out.push(GradCheck {
            param: params.name(ti).to_string(),
            class: params.class(ti),
            index: ei,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(out)
}

/// Sinusoidal timestep features `[sin(t w_k) .., cos(t w_k) ..]` with
/// `w_k = 10000^(-2k/dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out[k] = (t as f64 * w).sin();
        out[half + k] = (t as f64 * w).cos();
    }
    Tensor::row_vector(out)
}

#[cfg(test)]
mod tests;
