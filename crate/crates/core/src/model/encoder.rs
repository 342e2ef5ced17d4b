use rand::Rng;

use super::{multi_head_attention, EncoderConfig, Graph, ModelError, ParamClass, ParamStore, Tensor, Var};
use crate::geometry::SliceImage;

pub(super) fn init<R: Rng>(cfg: &EncoderConfig, s: &mut ParamStore, rng: &mut R) -> Result<(), ModelError> {
    let d = cfg.embed_dim;
    let pix = cfg.patch_size * cfg.patch_size;
    s.insert_weight(rng, "enc.patch.w", ParamClass::Embedding, pix, d, pix)?;
    s.insert("enc.patch.b", ParamClass::Embedding, Tensor::zeros(1, d))?;
    s.insert_random(rng, "enc.pos", ParamClass::Embedding, cfg.num_tokens(), d, 0.02)?;
    for b in 0..cfg.depth {
        let p = format!("enc.blk{b}");
        layer_norm_params(s, &format!("{p}.ln1"), d)?;
        s.insert_weight(rng, &format!("{p}.qkv.w"), ParamClass::AttentionProj, d, 3 * d, d)?;
        s.insert(&format!("{p}.qkv.b"), ParamClass::AttentionProj, Tensor::zeros(1, 3 * d))?;
        s.insert_weight(rng, &format!("{p}.proj.w"), ParamClass::AttentionProj, d, d, d)?;
        s.insert(&format!("{p}.proj.b"), ParamClass::AttentionProj, Tensor::zeros(1, d))?;
        layer_norm_params(s, &format!("{p}.ln2"), d)?;
        let hidden = d * cfg.mlp_ratio;
        s.insert_weight(rng, &format!("{p}.fc1.w"), ParamClass::Linear, d, hidden, d)?;
        s.insert(&format!("{p}.fc1.b"), ParamClass::Linear, Tensor::zeros(1, hidden))?;
        s.insert_weight(rng, &format!("{p}.fc2.w"), ParamClass::Linear, hidden, d, hidden)?;
        s.insert(&format!("{p}.fc2.b"), ParamClass::Linear, Tensor::zeros(1, d))?;
    }
    layer_norm_params(s, "enc.ln_f", d)
}

fn layer_norm_params(s: &mut ParamStore, prefix: &str, d: usize) -> Result<(), ModelError> {
    s.insert(&format!("{prefix}.g"), ParamClass::NormAffine, Tensor::filled(1, d, 1.0))?;
    s.insert(&format!("{prefix}.b"), ParamClass::NormAffine, Tensor::zeros(1, d))
}

fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let n = g.layer_norm_rows(x);
    let gamma = g.param(&format!("{prefix}.g"));
    let beta = g.param(&format!("{prefix}.b"));
    let y = g.mul_row(n, gamma);
    g.add_row(y, beta)
}

fn linear(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Rearranges an image into `[num_patches, patch*patch]`, patches in row-major
/// grid order, pixels row-major within each patch.
pub(crate) fn patchify(cfg: &EncoderConfig, image: &SliceImage) -> Result<Tensor, ModelError> {
    if image.width != cfg.image_size || image.height != cfg.image_size {
        return Err(ModelError::ShapeMismatch(format!(
            "encoder expects {0}x{0} images, got {1}x{2}",
            cfg.image_size, image.width, image.height
        )));
    }
    let (ps, grid) = (cfg.patch_size, cfg.grid());
    let mut out = Tensor::zeros(grid * grid, ps * ps);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for py in 0..ps {
                for px in 0..ps {
                    let v = image.pixels[(gy * ps + py) * image.width + gx * ps + px];
                    out.data[row * ps * ps + py * ps + px] = v;
                }
            }
        }
    }
    Ok(out)
}

pub(super) fn forward(cfg: &EncoderConfig, g: &mut Graph, image: &SliceImage) -> Result<Var, ModelError> {
    let patches = g.constant(patchify(cfg, image)?);
    let emb = linear(g, patches, "enc.patch");
    let pos = g.param("enc.pos");
    let mut h = g.add(emb, pos);
    let d = cfg.embed_dim;
    for b in 0..cfg.depth {
        let p = format!("enc.blk{b}");
        let n = layer_norm(g, h, &format!("{p}.ln1"));
        let qkv = linear(g, n, &format!("{p}.qkv"));
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, d);
        let v = g.slice_cols(qkv, 2 * d, d);
        let a = multi_head_attention(g, q, k, v, cfg.heads)?;
        let a = linear(g, a, &format!("{p}.proj"));
        h = g.add(h, a);
        let n = layer_norm(g, h, &format!("{p}.ln2"));
        let m = linear(g, n, &format!("{p}.fc1"));
        let m = g.gelu(m);
        let m = linear(g, m, &format!("{p}.fc2"));
        h = g.add(h, m);
    }
    Ok(layer_norm(g, h, "enc.ln_f"))
}
