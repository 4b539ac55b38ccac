use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::asm::{compose_unclamped, kb_from_t, smoke_mask_from_t, AtmosphericLight, TransmissionMap};
use crate::image::Plane;
use crate::nn::check_gradients;

fn random_image(rng: &mut ChaCha8Rng, (h, w): (usize, usize)) -> ImageRgb {
    ImageRgb::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
}

/// Parameter count written out layer by layer.
fn expected_params(c: &ModelConfig) -> usize {
    let s = &c.sae;
    let (h, w) = c.image_size;
    let p = s.patch_size;
    let d = s.embed_dims;
    let ca = s.attention_channels_out;
    let g0 = (h / p) * (w / p);
    let g1 = g0 / 4;
    let mut n = p * p * 3 * d[0] + d[0];
    if !c.ablations.no_le {
        n += p * p * d[0] + d[0] + 2 * g0 * d[0];
    }
    let side = [h / p, h / (2 * p), h / (4 * p), h / (2 * p), h / p];
    for st in 0..5 {
        let (ch, heads) = (d[st], s.num_heads[st]);
        let inner = heads * ch.div_ceil(heads);
        let win = s.window_size.min(side[st]);
        let hid = (ch as f64 * s.mlp_ratio) as usize;
        let block = 2 * ch
            + ch * 3 * inner
            + 3 * inner
            + (2 * win - 1) * (2 * win - 1) * heads
            + inner * ch
            + ch
            + 2 * ch
            + ch * hid
            + hid
            + hid * ch
            + ch;
        n += s.blocks_per_stage[st] * block;
    }
    n += 2 * 4 * d[0] + 4 * d[0] * d[1];
    n += 2 * 4 * d[1] + 4 * d[1] * d[2];
    if c.ablations.no_spe {
        n += d[2] * d[3] * 4 + 2 * d[3];
        n += d[3] * d[4] * 4 + 2 * d[4];
        n += d[4] * ca * p * p + 2 * ca;
    } else {
        let k = s.spe_kernels;
        n += k[0] * k[0] * d[2] * d[3] * 4 + d[3] * 4 + 2 * g1 * d[3];
        n += k[1] * k[1] * d[3] * d[4] * 4 + d[4] * 4 + 2 * g0 * d[4];
        n += k[2] * k[2] * d[4] * ca * p * p + ca * p * p + 2 * h * w * ca;
    }
    n += (d[3] + d[1]) * d[3] + d[3];
    n += (d[4] + d[0]) * d[4] + d[4];
    let rh = c.rft_hidden;
    n += ca * rh + rh + rh * 6 + 6 + ca + 1 + 3 + 3;
    n
}

#[test]
fn reference_parameter_count() {
    let cfg = ModelConfig::reference();
    let m = Model::new(cfg.clone(), 0).unwrap();
    assert_eq!(m.num_params(), expected_params(&cfg));
    assert_eq!(m.num_params(), 4_392_787);
    assert!((4_090_000..=5_540_000).contains(&m.num_params()));
}

#[test]
fn ablated_parameter_counts() {
    let full = Model::new(ModelConfig::desk(), 0).unwrap().num_params();
    for a in Ablation::ALL {
        let cfg = ModelConfig::desk().with_ablations(Ablations::only(a));
        let m = Model::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.num_params(), expected_params(&cfg), "{a}");
        if a == Ablation::NoRft {
            assert_eq!(m.num_params(), full);
        } else {
            assert!(m.num_params() < full, "{a}");
        }
    }
}

#[test]
fn desk_shape_chain() {
    let m = Model::new(ModelConfig::desk(), 0).unwrap();
    assert_eq!(
        m.shape_chain().unwrap(),
        vec![
            ((16, 16), 48),
            ((8, 8), 96),
            ((4, 4), 192),
            ((8, 8), 96),
            ((16, 16), 8),
            ((64, 64), 8),
        ]
    );
}

#[test]
fn identity_at_initialisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for ablations in [Ablations::NONE, Ablations::only(Ablation::NoSpe)] {
        let m = Model::new(ModelConfig::tiny().with_ablations(ablations), 9).unwrap();
        let img = random_image(&mut rng, (16, 16));
        let out = m.forward(&img).unwrap();
        assert_eq!(out.desmoked_unclamped, img);
        assert_eq!(out.desmoked, img);
        assert!(out.smoke_mask.image().data().iter().all(|&v| v == 0.0));
    }
    // the zero final conv makes the initial attention uniform softplus(0)
    let m = Model::new(ModelConfig::tiny(), 9).unwrap();
    let attn = m.sae_forward(&random_image(&mut rng, (16, 16))).unwrap();
    assert!(attn.data().iter().all(|&v| (v - 2f64.ln()).abs() < 1e-12));
}

#[test]
fn forward_is_deterministic_and_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = Model::new(ModelConfig::tiny(), 1).unwrap();
    perturb(&mut m, 5, 0.3);
    let img = random_image(&mut rng, (16, 16));
    let a = m.forward(&img).unwrap();
    let b = m.forward(&img).unwrap();
    assert_eq!(a, b);
    let attn = m.sae_forward(&img).unwrap();
    assert!(attn.data().iter().all(|&v| v >= 0.0));
    let fresh = || Model::new(ModelConfig::tiny(), 1).unwrap();
    assert_eq!(fresh().params(), fresh().params());
}

#[test]
fn rejects_mismatched_input() {
    let m = Model::new(ModelConfig::tiny(), 0).unwrap();
    assert!(matches!(
        m.forward(&ImageRgb::filled(32, 16, 0.5)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn lightness_embedding_ignores_hue() {
    let m = Model::new(ModelConfig::tiny(), 2).unwrap();
    // equal lightness, different hue
    let a = ImageRgb::from_fn(16, 16, |y, x| [0.2 + 0.03 * y as f64, 0.2, 0.2 + 0.02 * x as f64]);
    let b = ImageRgb::from_fn(16, 16, |y, x| [0.2 + 0.02 * x as f64, 0.2 + 0.03 * y as f64, 0.2]);
    let embed = |img: &ImageRgb| {
        let mut g = Graph::new(m.params());
        let x = Model::image_input(&mut g, img);
        let p = m.patch_embed_graph(&mut g, x).unwrap();
        let l = m.lightness_embed_graph(&mut g, img).unwrap().unwrap();
        (g.value(p).clone(), g.value(l).clone())
    };
    let (pa, la) = embed(&a);
    let (pb, lb) = embed(&b);
    assert_eq!(la, lb);
    assert_ne!(pa, pb);
    assert_eq!(pa.shape(), la.shape());
    assert_eq!(pa.shape(), &[16, 8]);
}

#[test]
fn block_with_zero_output_projections_is_identity() {
    let mut m = Model::new(ModelConfig::tiny(), 3).unwrap();
    let b = &m.stages[0][0];
    let ids = [b.proj_w, b.proj_b, b.fc2_w, b.fc2_b];
    for id in ids {
        m.store.get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new(&m.store);
    let t = Tensor::new(&[16, 8], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let x = g.input(t.clone());
    let y = Model::block(&mut g, x, &m.stages[0][0]).unwrap();
    assert_eq!(g.value(y), &t);
}

/// Moves every parameter off its initial value so no gradient is trivially zero.
fn perturb(m: &mut Model, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let airlight = m.head.airlight;
    for id in m.store.ids().collect::<Vec<_>>() {
        for v in m.store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    // keep the clamped airlight away from its kinks
    m.store
        .get_mut(airlight)
        .data_mut()
        .copy_from_slice(&[0.9, 0.8, 0.85]);
}

fn gradient_case(cfg: ModelConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::new(cfg.clone(), seed).unwrap();
    perturb(&mut m, seed + 1, 0.2);
    let img = random_image(&mut rng, cfg.image_size);
    let n = img.data().len();
    let target = Tensor::new(&[n / 3, 3], (0..n).map(|_| rng.random()).collect()).unwrap();
    let mask_target = Tensor::new(&[n / 3, 3], (0..n).map(|_| rng.random()).collect()).unwrap();
    let model = &m;
    let mut store = m.store.clone();
    let r = check_gradients(&mut store, 1e-5, 1e-6, |g| {
        let v = model.forward_graph(g, &img)?;
        let a = g.mse(v.desmoked, &target)?;
        let b = g.mse(v.mask, &mask_target)?;
        g.weighted_sum(&[(a, 1.0), (b, 1.0)])
    })
    .unwrap();
    assert_eq!(r.checked, m.num_params());
    assert!(r.worst_rel_error < 1e-3, "{r:?}");
}

#[test]
fn tiny_network_gradients() {
    gradient_case(ModelConfig::tiny(), 10);
}

#[test]
fn tiny_network_gradients_with_shifted_windows() {
    let mut cfg = ModelConfig::tiny();
    cfg.sae.blocks_per_stage = [2, 1, 1, 1, 2];
    gradient_case(cfg, 20);
}

#[test]
fn ablated_network_gradients() {
    let cfg = ModelConfig::tiny().with_ablations(Ablations::from_list(&Ablation::ALL));
    gradient_case(cfg, 30);
}

#[test]
fn rft_output_respects_row_sum_bound() {
    let mut m = Model::new(ModelConfig::tiny(), 4).unwrap();
    perturb(&mut m, 6, 1.0);
    let w = m.store.get(m.head.rft_out.w).clone();
    let b = m.store.get(m.head.rft_out.b).clone();
    let bound: Vec<f64> = (0..6)
        .map(|o| (0..w.rows()).map(|h| w.data()[h * 6 + o].abs()).sum::<f64>() + b.data()[o].abs())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for scale in [1.0, 100.0, 1e6] {
        let data: Vec<f64> = (0..16 * 16 * 4).map(|_| rng.random::<f64>() * scale).collect();
        let attn = AttentionMap::new(16, 16, 4, data).unwrap();
        let out = m.hge_forward(&attn, &ImageRgb::filled(16, 16, 0.5)).unwrap();
        let c = &out.coefficients;
        for (i, (k, bb)) in c.k().iter().zip(c.b()).enumerate() {
            assert!(k.abs() <= bound[i % 3] + 1e-12);
            assert!(bb.abs() <= bound[3 + i % 3] + 1e-12);
        }
    }
}

#[test]
fn zero_attention_gives_zero_coefficients() {
    let mut m = Model::new(ModelConfig::tiny(), 4).unwrap();
    perturb(&mut m, 8, 1.0);
    for l in [&m.head.rft_in, &m.head.rft_out] {
        let id = l.b;
        m.store.get_mut(id).data_mut().fill(0.0);
    }
    let attn = AttentionMap::new(16, 16, 4, vec![0.0; 1024]).unwrap();
    let out = m.hge_forward(&attn, &ImageRgb::filled(16, 16, 0.3)).unwrap();
    assert!(out.coefficients.k().iter().chain(out.coefficients.b()).all(|&v| v == 0.0));
}

#[test]
fn mask_channels_follow_the_airlight() {
    let mut m = Model::new(ModelConfig::tiny(), 4).unwrap();
    perturb(&mut m, 9, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let attn = AttentionMap::new(16, 16, 4, (0..1024).map(|_| rng.random::<f64>()).collect()).unwrap();
    let out = m.hge_forward(&attn, &ImageRgb::filled(16, 16, 0.3)).unwrap();
    let a = m.airlight();
    for px in out.smoke_mask.image().pixels() {
        let s = px[0] / a[0];
        assert!((px[1] - s * a[1]).abs() < 1e-12 && (px[2] - s * a[2]).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&s));
    }
    // saturated transmission head: the mask reaches the airlight
    let id = m.head.mask.b;
    m.store.get_mut(id).data_mut()[0] = 1e3;
    let out = m.hge_forward(&attn, &ImageRgb::filled(16, 16, 0.3)).unwrap();
    for px in out.smoke_mask.image().pixels() {
        for c in 0..3 {
            assert!((px[c] - a[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn reconstruction_path_inverts_the_scattering_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (8, 8);
    let clean = random_image(&mut rng, (h, w));
    let t = TransmissionMap::new(
        Plane::new(h, w, (0..h * w).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap(),
    )
    .unwrap();
    let a = AtmosphericLight::new([0.9, 0.95, 1.0]).unwrap();
    let smoke = compose_unclamped(&clean, &t, a).unwrap();
    let kb = kb_from_t(&t).unwrap();
    let mask = smoke_mask_from_t(&t, a);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let n = h * w;
    let ev = g.input(Tensor::zeros(&[3]));
    let mut input = |d: &[f64]| g.input(Tensor::new(&[n, 3], d.to_vec()).unwrap());
    let (iv, kv, bv, mv) = (
        input(smoke.data()),
        input(kb.k()),
        input(kb.b()),
        input(mask.image().data()),
    );
    let j = reconstruct_graph(&mut g, iv, kv, bv, mv, ev).unwrap();
    for (x, y) in g.value(j).data().iter().zip(clean.data()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn reload_reproduces_forward_bitwise() {
    let mut m = Model::new(ModelConfig::tiny(), 12).unwrap();
    perturb(&mut m, 13, 0.1);
    let back = Model::from_params(ModelConfig::tiny(), m.params()).unwrap();
    let img = ImageRgb::filled(16, 16, 0.4);
    assert_eq!(m.forward(&img).unwrap(), back.forward(&img).unwrap());
}
