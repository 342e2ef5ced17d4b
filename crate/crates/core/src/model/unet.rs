use rand::Rng;

use super::{multi_head_attention, timestep_embedding, Graph, ModelError, ParamClass, ParamStore, Tensor, UNetConfig, Var};

const KERNEL: usize = 3;

pub(super) fn init<R: Rng>(
    cfg: &UNetConfig,
    token_dim: usize,
    s: &mut ParamStore,
    rng: &mut R,
) -> Result<(), ModelError> {
    let base = cfg.base_channels;
    let td = cfg.time_dim();
    let n = cfg.multipliers.len();

    s.insert_weight(rng, "time.l1.w", ParamClass::FilmMlp, base, td, base)?;
    s.insert("time.l1.b", ParamClass::FilmMlp, Tensor::zeros(1, td))?;
    s.insert_weight(rng, "time.l2.w", ParamClass::FilmMlp, td, td, td)?;
    s.insert("time.l2.b", ParamClass::FilmMlp, Tensor::zeros(1, td))?;

    conv_params(s, rng, "in", cfg.in_channels, base, 1)?;
    let mut ch = base;
    for l in 0..n {
        let c = cfg.channels(l);
        res_params(cfg, s, rng, &format!("down{l}.res"), ch, c)?;
        if cfg.attn_levels.contains(&l) {
            xattn_params(cfg, s, rng, &format!("down{l}.xattn"), c, token_dim)?;
        }
        if l + 1 < n {
            conv_params(s, rng, &format!("down{l}.ds"), c, c, KERNEL)?;
        }
        ch = c;
    }
    res_params(cfg, s, rng, "mid.res1", ch, ch)?;
    xattn_params(cfg, s, rng, "mid.xattn", ch, token_dim)?;
    res_params(cfg, s, rng, "mid.res2", ch, ch)?;
    for l in (0..n).rev() {
        let c = cfg.channels(l);
        res_params(cfg, s, rng, &format!("up{l}.res"), 2 * c, c)?;
        if cfg.attn_levels.contains(&l) {
            xattn_params(cfg, s, rng, &format!("up{l}.xattn"), c, token_dim)?;
        }
        if l > 0 {
            conv_params(s, rng, &format!("up{l}.us"), c, cfg.channels(l - 1), KERNEL)?;
        }
    }
    let c0 = cfg.channels(0);
    gn_params(s, "out.gn", c0)?;
    conv_params(s, rng, "out", c0, cfg.in_channels, 1)
}

fn conv_params<R: Rng>(
    s: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
) -> Result<(), ModelError> {
    s.insert_weight(rng, &format!("{prefix}.w"), ParamClass::Conv, cout, cin * kernel, cin * kernel)?;
    s.insert(&format!("{prefix}.b"), ParamClass::Conv, Tensor::zeros(cout, 1))
}

fn gn_params(s: &mut ParamStore, prefix: &str, c: usize) -> Result<(), ModelError> {
    s.insert(&format!("{prefix}.g"), ParamClass::NormAffine, Tensor::filled(c, 1, 1.0))?;
    s.insert(&format!("{prefix}.b"), ParamClass::NormAffine, Tensor::zeros(c, 1))
}

fn res_params<R: Rng>(
    cfg: &UNetConfig,
    s: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
) -> Result<(), ModelError> {
    gn_params(s, &format!("{prefix}.gn1"), cin)?;
    conv_params(s, rng, &format!("{prefix}.conv1"), cin, cout, KERNEL)?;
    let td = cfg.time_dim();
    s.insert_random(rng, &format!("{prefix}.film.w"), ParamClass::FilmMlp, td, 2 * cout, 0.1 / (td as f64).sqrt())?;
    s.insert(&format!("{prefix}.film.b"), ParamClass::FilmMlp, Tensor::zeros(1, 2 * cout))?;
    gn_params(s, &format!("{prefix}.gn2"), cout)?;
    conv_params(s, rng, &format!("{prefix}.conv2"), cout, cout, KERNEL)?;
    if cin != cout {
        conv_params(s, rng, &format!("{prefix}.skip"), cin, cout, 1)?;
    }
    Ok(())
}

fn xattn_params<R: Rng>(
    _cfg: &UNetConfig,
    s: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    c: usize,
    token_dim: usize,
) -> Result<(), ModelError> {
    gn_params(s, &format!("{prefix}.gn"), c)?;
    for (name, fan_in) in [("q", c), ("k", token_dim), ("v", token_dim), ("o", c)] {
        s.insert_weight(rng, &format!("{prefix}.{name}.w"), ParamClass::AttentionProj, fan_in, c, fan_in)?;
        s.insert(&format!("{prefix}.{name}.b"), ParamClass::AttentionProj, Tensor::zeros(1, c))?;
    }
    Ok(())
}

fn conv(g: &mut Graph, x: Var, prefix: &str, kernel: usize, stride: usize) -> Var {
    let cols = if kernel == 1 && stride == 1 {
        x
    } else {
        g.im2col(x, kernel, stride, kernel / 2)
    };
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let y = g.matmul(w, cols);
    g.add_col(y, b)
}

fn group_norm(cfg: &UNetConfig, g: &mut Graph, x: Var, prefix: &str) -> Var {
    let c = g.value(x).rows;
    let n = g.group_norm(x, cfg.groups_for(c));
    let gamma = g.param(&format!("{prefix}.g"));
    let beta = g.param(&format!("{prefix}.b"));
    let y = g.mul_col(n, gamma);
    g.add_col(y, beta)
}

/// Residual block with FiLM modulation by the timestep embedding.
fn res_block(cfg: &UNetConfig, g: &mut Graph, x: Var, temb_act: Var, prefix: &str) -> Var {
    let h = group_norm(cfg, g, x, &format!("{prefix}.gn1"));
    let h = g.silu(h);
    let h = conv(g, h, &format!("{prefix}.conv1"), KERNEL, 1);
    let cout = g.value(h).rows;

    let fw = g.param(&format!("{prefix}.film.w"));
    let fb = g.param(&format!("{prefix}.film.b"));
    let f = g.matmul(temb_act, fw);
    let f = g.add(f, fb);
    let scale = g.slice_cols(f, 0, cout);
    let scale = g.transpose(scale);
    let scale = g.add_scalar(scale, 1.0);
    let shift = g.slice_cols(f, cout, cout);
    let shift = g.transpose(shift);

    let h = group_norm(cfg, g, h, &format!("{prefix}.gn2"));
    let h = g.mul_col(h, scale);
    let h = g.add_col(h, shift);
    let h = g.silu(h);
    let h = conv(g, h, &format!("{prefix}.conv2"), KERNEL, 1);
    let skip = if g.params().index_of(&format!("{prefix}.skip.w")).is_some() {
        conv(g, x, &format!("{prefix}.skip"), 1, 1)
    } else {
        x
    };
    g.add(h, skip)
}

/// Sequence features `[C, L]` attend to image tokens `[P, D]`.
fn cross_attention(
    cfg: &UNetConfig,
    g: &mut Graph,
    x: Var,
    tokens: Var,
    prefix: &str,
) -> Result<Var, ModelError> {
    let c = g.value(x).rows;
    let n = group_norm(cfg, g, x, &format!("{prefix}.gn"));
    let seq = g.transpose(n);
    let proj = |g: &mut Graph, input: Var, name: &str| {
        let w = g.param(&format!("{prefix}.{name}.w"));
        let b = g.param(&format!("{prefix}.{name}.b"));
        let y = g.matmul(input, w);
        g.add_row(y, b)
    };
    let q = proj(g, seq, "q");
    let k = proj(g, tokens, "k");
    let v = proj(g, tokens, "v");
    let a = multi_head_attention(g, q, k, v, cfg.heads_for(c))?;
    let o = proj(g, a, "o");
    let o = g.transpose(o);
    Ok(g.add(x, o))
}

pub(super) fn forward(
    cfg: &UNetConfig,
    token_dim: usize,
    g: &mut Graph,
    x_t: Var,
    t: usize,
    tokens: Var,
) -> Result<Var, ModelError> {
    let (rows, len) = g.value(x_t).shape();
    if rows != cfg.in_channels || len == 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "denoiser expects [{}, L] input, got [{rows}, {len}]",
            cfg.in_channels
        )));
    }
    let (_, tok_d) = g.value(tokens).shape();
    if tok_d != token_dim {
        return Err(ModelError::ShapeMismatch(format!(
            "tokens have width {tok_d}, expected {token_dim}"
        )));
    }
    let padded = cfg.padded_len(len);
    let x = if padded != len { g.pad_cols(x_t, padded) } else { x_t };

    let temb = g.constant(timestep_embedding(t, cfg.base_channels));
    let w1 = g.param("time.l1.w");
    let b1 = g.param("time.l1.b");
    let w2 = g.param("time.l2.w");
    let b2 = g.param("time.l2.b");
    let e = g.matmul(temb, w1);
    let e = g.add(e, b1);
    let e = g.silu(e);
    let e = g.matmul(e, w2);
    let e = g.add(e, b2);
    let temb_act = g.silu(e);

    let n = cfg.multipliers.len();
    let mut h = conv(g, x, "in", 1, 1);
    let mut skips = Vec::with_capacity(n);
    for l in 0..n {
        h = res_block(cfg, g, h, temb_act, &format!("down{l}.res"));
        if cfg.attn_levels.contains(&l) {
            h = cross_attention(cfg, g, h, tokens, &format!("down{l}.xattn"))?;
        }
        skips.push(h);
        if l + 1 < n {
            h = conv(g, h, &format!("down{l}.ds"), KERNEL, 2);
        }
    }
    h = res_block(cfg, g, h, temb_act, "mid.res1");
    h = cross_attention(cfg, g, h, tokens, "mid.xattn")?;
    h = res_block(cfg, g, h, temb_act, "mid.res2");
    for l in (0..n).rev() {
        h = g.concat_rows(h, skips[l]);
        h = res_block(cfg, g, h, temb_act, &format!("up{l}.res"));
        if cfg.attn_levels.contains(&l) {
            h = cross_attention(cfg, g, h, tokens, &format!("up{l}.xattn"))?;
        }
        if l > 0 {
            h = g.upsample2(h);
            h = conv(g, h, &format!("up{l}.us"), KERNEL, 1);
        }
    }
    let h = group_norm(cfg, g, h, "out.gn");
    let h = g.silu(h);
    let out = conv(g, h, "out", 1, 1);
    Ok(if padded != len { g.slice_cols(out, 0, len) } else { out })
}
