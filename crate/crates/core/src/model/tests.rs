use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

fn test_image(seed: u64) -> SliceImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = SliceImage::blank();
    for p in img.pixels.iter_mut() {
        *p = rng.random::<f64>();
    }
    img
}

#[test]
fn attention_single_key_returns_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = randn(&mut rng, 5, 4);
    let k = randn(&mut rng, 1, 4);
    let v = randn(&mut rng, 1, 4);
    let o = attention(&q, &k, &v).unwrap();
    for r in 0..5 {
        for c in 0..4 {
            assert!((o.at(r, c) - v.at(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_orthogonal_keys_average_values() {
    let q = Tensor::from_vec(1, 2, vec![1.0, 0.0]);
    let k = Tensor::from_vec(3, 2, vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0]);
    let v = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
    let o = attention(&q, &k, &v).unwrap();
    assert!((o.at(0, 0) - 3.0).abs() < 1e-12);
    assert!((o.at(0, 1) - 5.0).abs() < 1e-12);
}

#[test]
fn attention_saturates_on_dominant_logit() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 4;
    let q = Tensor::from_vec(1, d, vec![1.0, 0.0, 0.0, 0.0]);
    let mut k = Tensor::zeros(6, d);
    // logit of key 3 is 20 above the others after the 1/sqrt(d) scale
    *k.at_mut(3, 0) = 20.0 * (d as f64).sqrt();
    let v = randn(&mut rng, 6, d);
    let o = attention(&q, &k, &v).unwrap();
    for c in 0..d {
        assert!((o.at(0, c) - v.at(3, c)).abs() < 1e-6);
    }
}

#[test]
fn attention_rows_sum_to_one_and_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = randn(&mut rng, 7, 8);
    let k = randn(&mut rng, 12, 8);
    let v = randn(&mut rng, 12, 8);
    let ones = Tensor::filled(12, 1, 1.0);
    let sums = attention(&q, &k, &ones).unwrap();
    for r in 0..7 {
        assert!((sums.at(r, 0) - 1.0).abs() < 1e-12);
    }
    let perm: Vec<usize> = (0..12).rev().collect();
    let permute = |t: &Tensor| {
        let mut out = Tensor::zeros(t.rows, t.cols);
        for (dst, &src) in perm.iter().enumerate() {
            out.data[dst * t.cols..(dst + 1) * t.cols].copy_from_slice(t.row(src));
        }
        out
    };
    let a = attention(&q, &k, &v).unwrap();
    let b = attention(&q, &permute(&k), &permute(&v)).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
    assert!(attention(&q, &randn(&mut rng, 12, 5), &v).is_err());
}

#[test]
fn group_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x = randn(&mut rng, 16, 40);
    x.scale(3.0);
    for v in x.data.iter_mut() {
        *v += 7.0;
    }
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let xv = g.constant(x);
    let y = g.group_norm(xv, 8);
    let y = g.value(y);
    for grp in 0..8 {
        let vals: Vec<f64> = y.data[grp * 80..(grp + 1) * 80].to_vec();
        let mean = vals.iter().sum::<f64>() / 80.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 80.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn linear_layer_gradient_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, 6, 3);
    let y = randn(&mut rng, 6, 2);
    let mut store = ParamStore::new();
    store.insert("w", ParamClass::Linear, randn(&mut rng, 3, 2)).unwrap();
    let (_, grads) = grad(&store, |g| {
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let w = g.param("w");
        let p = g.matmul(xv, w);
        let r = g.sub(p, yv);
        let sq = g.mul(r, r);
        Ok(g.sum_all(sq))
    })
    .unwrap();
    let resid = {
        let mut p = tensor::matmul(&x, false, store.get("w").unwrap(), false);
        for (a, b) in p.data.iter_mut().zip(&y.data) {
            *a -= b;
        }
        p
    };
    let mut expected = tensor::matmul(&x, true, &resid, false);
    expected.scale(2.0);
    assert!(grads[0].max_abs_diff(&expected) < 1e-12);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let cfg = ModelConfig::reduced(16);
    let store = cfg.init_params(0).unwrap();
    let (loss, grads) = grad(&store, |g| {
        let c = g.constant(Tensor::filled(1, 1, 3.5));
        let w = g.param("len.w");
        let z = g.scale(w, 0.0);
        let z = g.sum_all(z);
        Ok(g.add(c, z))
    })
    .unwrap();
    assert_eq!(loss, 3.5);
    assert!(grads.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
}

fn full_loss(cfg: &ModelConfig, image: &SliceImage, x_t: &Tensor, x0: &Tensor, t: usize, g: &mut Graph) -> Result<Var, ModelError> {
    let tokens = cfg.encode(g, image)?;
    let xv = g.constant(x_t.clone());
    let pred = cfg.denoise(g, xv, t, tokens)?;
    let target = g.constant(x0.clone());
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    let l = g.sum_all(sq);
    let f = cfg.length_fraction(g, tokens);
    let f = g.add_scalar(f, -0.3);
    let f2 = g.mul(f, f);
    let f2 = g.sum_all(f2);
    Ok(g.add(l, f2))
}

#[test]
fn finite_differences_cover_every_parameter_class() {
    let cfg = ModelConfig::reduced(16);
    let store = cfg.init_params(11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let image = test_image(13);
    let x_t = randn(&mut rng, 3, 13);
    let x0 = randn(&mut rng, 3, 13);
    for class in ParamClass::ALL {
        let coords = sample_coordinates(&store, class, 20, &mut rng);
        assert_eq!(coords.len(), 20, "{class:?}");
        let checks = gradient_check(&store, &coords, 1e-5, |g| full_loss(&cfg, &image, &x_t, &x0, 7, g)).unwrap();
        for c in checks {
            assert!(c.rel_error < 1e-4, "{c:?}");
        }
    }
}

#[test]
fn denoiser_preserves_shape_for_many_lengths() {
    let cfg = ModelConfig::reduced(16);
    let store = cfg.init_params(1).unwrap();
    let tokens = cfg.encode_value(&store, &test_image(2)).unwrap();
    assert_eq!(tokens.shape(), (256, 16));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for len in [1, 5, 16, 17, 40] {
        let x = randn(&mut rng, 3, len);
        let y = cfg.denoise_value(&store, &x, 3, &tokens).unwrap();
        assert_eq!(y.shape(), (3, len));
        assert!(y.all_finite());
    }
    assert!(cfg.denoise_value(&store, &Tensor::zeros(2, 8), 0, &tokens).is_err());
    assert!(cfg.denoise_value(&store, &Tensor::zeros(3, 8), 0, &Tensor::zeros(256, 5)).is_err());
}

#[test]
fn timestep_changes_output() {
    let cfg = ModelConfig::reduced(16);
    let store = cfg.init_params(4).unwrap();
    let tokens = cfg.encode_value(&store, &test_image(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, 3, 16);
    let a = cfg.denoise_value(&store, &x, 0, &tokens).unwrap();
    let b = cfg.denoise_value(&store, &x, 99, &tokens).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn encoder_is_deterministic_and_content_sensitive() {
    let cfg = ModelConfig::reduced(16);
    let store = cfg.init_params(7).unwrap();
    let blank = SliceImage::blank();
    let a = cfg.encode_value(&store, &blank).unwrap();
    let b = cfg.encode_value(&store, &blank).unwrap();
    assert_eq!(a, b);
    let mut img = blank.clone();
    for r in 0..14 {
        for c in 0..14 {
            img.pixels[r * 224 + c] = 1.0;
        }
    }
    let c = cfg.encode_value(&store, &img).unwrap();
    assert!(a.max_abs_diff(&c) > 1e-6);
    let mut small = blank;
    small.width = 112;
    small.height = 112;
    small.pixels.truncate(112 * 112);
    assert!(cfg.encode_value(&store, &small).is_err());
}

#[test]
fn predicted_length_is_clamped() {
    let cfg = ModelConfig::reduced(16);
    let mut store = cfg.init_params(8).unwrap();
    let tokens = cfg.encode_value(&store, &test_image(9)).unwrap();
    let i = store.index_of("len.b").unwrap();
    store.get_index_mut(i).data[0] = 50.0;
    assert_eq!(cfg.predict_length(&store, &tokens), 16);
    store.get_index_mut(i).data[0] = -50.0;
    assert_eq!(cfg.predict_length(&store, &tokens), 1);
}

#[test]
fn timestep_embedding_layout() {
    let e = timestep_embedding(0, 8);
    assert_eq!(e.data, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let e = timestep_embedding(3, 8);
    assert!((e.data[0] - 3f64.sin()).abs() < 1e-15);
    assert!((e.data[5] - (3.0 * 10000f64.powf(-0.25)).cos()).abs() < 1e-15);
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::reduced(16);
    cfg.encoder.patch_size = 15;
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::reduced(16);
    cfg.unet.attn_levels = vec![5];
    assert!(cfg.validate().is_err());
    assert_eq!(UNetConfig::paper().heads_for(256), 8);
    assert_eq!(UNetConfig::paper().length_multiple(), 16);
}
