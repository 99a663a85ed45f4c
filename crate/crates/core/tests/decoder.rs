mod common;

use aplsam_core::decoder::{
    bilinear_matrix, fuse_and_classify, gate, level_block, predict_mask, upsample, DecoderMode,
};
use aplsam_core::model::point_prompts;
use aplsam_core::{AblationMode, Binder, Graph, Model, ParamStore, PromptStrategy, Tensor};
use common::*;

#[test]
fn gate_matches_loop() {
    let g = Graph::new();
    let store = ParamStore::new();
    let b = Binder::new(&g, &store);
    let tokens = signed(&[16, 5], 1);
    let mask = uniform(&[4, 4], 2).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let got = g.value(gate(&b, g.constant(tokens.clone()).unwrap(), &mask).unwrap()).clone();
    for p in 0..16 {
        for c in 0..5 {
            assert_eq!(got.at2(p, c), mask.data()[p] * tokens.at2(p, c));
        }
    }
    let zero = g.value(gate(&b, g.constant(tokens.clone()).unwrap(), &Tensor::zeros(&[4, 4])).unwrap()).clone();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let all = g.value(gate(&b, g.constant(tokens.clone()).unwrap(), &Tensor::ones(&[4, 4])).unwrap()).clone();
    assert_eq!(all.data(), tokens.data());
    assert!(gate(&b, g.constant(tokens).unwrap(), &Tensor::ones(&[3, 3])).is_err());
}

#[test]
fn level_block_is_identity_at_init_with_normalized_attention() {
    let m = Model::new(small_model(AblationMode::default()), 3).unwrap();
    let c = m.cfg.encoder.embed_dim;
    let g = Graph::new();
    let b = Binder::new(&g, &m.params);
    let prompted = g.constant(signed(&[16, c], 4)).unwrap();
    let level = g.constant(signed(&[16, c], 5)).unwrap();
    let mask = disk(4, 1.5, 1.5, 1.2);
    let (out, att) = level_block(&b, prompted, level, &mask, 2, 2).unwrap();
    assert_eq!(g.value(out).data(), g.value(prompted).data());
    assert_eq!(att.weights.len(), 2);
    for w in &att.weights {
        let w = g.value(*w).clone();
        assert_eq!(w.shape(), &[16, 16]);
        for r in 0..16 {
            let s: f64 = (0..16).map(|k| w.at2(r, k)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let short = g.constant(Tensor::zeros(&[4, c])).unwrap();
    assert!(level_block(&b, prompted, short, &mask, 2, 2).is_err());
}

#[test]
fn bilinear_reproduces_ramps_and_constants() {
    let (a, s) = (0.3, -1.7);
    let g = Graph::new();
    let store = ParamStore::new();
    let b = Binder::new(&g, &store);
    let ramp = Tensor::from_fn(&[4, 4], |i| a + s * (i % 4) as f64 + 2.0 * (i / 4) as f64);
    let up = g.value(upsample(&b, g.constant(ramp).unwrap(), 16, 16).unwrap()).clone();
    assert_eq!(up.shape(), &[16, 16]);
    for y in 0..16 {
        for x in 0..16 {
            // source coordinates with half-pixel centers, clamped at the border
            let sy = ((y as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, 3.0);
            let sx = ((x as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, 3.0);
            assert!((up.at2(y, x) - (a + s * sx + 2.0 * sy)).abs() < 1e-12);
        }
    }
    let flat = g.value(upsample(&b, g.constant(Tensor::full(&[4, 4], 0.9)).unwrap(), 16, 16).unwrap()).clone();
    assert!(flat.data().iter().all(|v| (v - 0.9).abs() < 1e-15));
    assert_eq!(bilinear_matrix(4, 4), Tensor::eye(4));
}

#[test]
fn zero_inputs_give_the_head_bias() {
    let mut m = Model::new(small_model(AblationMode::default()), 6).unwrap();
    m.params.set_value("decoder.head.conv3.bias", Tensor::full(&[1], 0.7)).unwrap();
    let c = m.cfg.encoder.embed_dim;
    let g = Graph::new();
    let b = Binder::new(&g, &m.params);
    let zeros: Vec<_> = (0..4).map(|_| g.constant(Tensor::zeros(&[16, c])).unwrap()).collect();
    let logits = g.value(fuse_and_classify(&b, &zeros, 4, 16).unwrap()).clone();
    assert_eq!(logits.shape(), &[1, 16, 16]);
    assert!(logits.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    assert!(fuse_and_classify(&b, &zeros[..3], 4, 16).is_err());
}

#[test]
fn higher_threshold_never_adds_pixels() {
    let z = signed(&[1, 8, 8], 7).map(|v| 4.0 * v);
    let mut prev = predict_mask(&z, 0.05);
    for t in [0.2, 0.5, 0.8, 0.95] {
        let cur = predict_mask(&z, t);
        assert!(cur.data().iter().zip(prev.data()).all(|(c, p)| c <= p));
        prev = cur;
    }
}

fn forward_for(prompt: PromptStrategy, decoder: DecoderMode) -> (Model, usize) {
    let m = Model::new(small_model(AblationMode { prompt, decoder }), 8).unwrap();
    let c = m.cfg.encoder.embed_dim;
    (m, c)
}

#[test]
fn ablation_modes_change_prompts_and_heads() {
    let s_img = uniform(&[1, 16, 16], 9);
    let q_img = uniform(&[1, 16, 16], 10);
    let s_mask = disk(16, 8.0, 7.0, 6.0);

    let (m, _) = forward_for(PromptStrategy::NoPrompt, DecoderMode::MultiLevel);
    assert!(m.params.names().all(|n| !n.starts_with("prompt.")));
    let g = Graph::new();
    let b = Binder::new(&g, &m.params);
    let f = m.forward(&b, &s_img, &s_mask, &q_img).unwrap();
    for k in 0..4 {
        assert_eq!(g.value(f.prompted_levels[k]).data(), g.value(f.query_levels[k]).data());
    }

    let (m, c) = forward_for(PromptStrategy::OnePrototype, DecoderMode::MultiLevel);
    let g = Graph::new();
    let b = Binder::new(&g, &m.params);
    let grid = m.grid_mask(&s_mask).unwrap();
    let (p, vp) = m.prompts(&b, &s_img, &grid).unwrap().unwrap();
    assert_eq!(g.shape(p), vec![c, 1]);
    assert!(vp.is_none());

    let (m, c) = forward_for(PromptStrategy::PointPrompt, DecoderMode::MultiLevel);
    let g = Graph::new();
    let b = Binder::new(&g, &m.params);
    let (p, _) = m.prompts(&b, &s_img, &grid).unwrap().unwrap();
    assert_eq!(g.shape(p), vec![c, m.cfg.apl.n_max]);
    assert_eq!(point_prompts(&grid, 7, c).unwrap().shape(), &[c, 7]);

    let (m, c) = forward_for(PromptStrategy::Apl, DecoderMode::SingleLevel);
    assert_eq!(m.params.value("decoder.head.conv1.weight").unwrap().shape()[1], c);
    assert!(m.params.get("decoder.level1.key.weight").is_none());
    let logits = m.logits(&s_img, &s_mask, &q_img).unwrap();
    assert_eq!(logits.shape(), &[1, 16, 16]);
    let (m, c) = forward_for(PromptStrategy::Apl, DecoderMode::MultiLevel);
    assert_eq!(m.params.value("decoder.head.conv1.weight").unwrap().shape()[1], 4 * c);
}

#[test]
fn prediction_is_binary_and_empty_mask_is_rejected() {
    let (m, _) = forward_for(PromptStrategy::Apl, DecoderMode::MultiLevel);
    let img = uniform(&[1, 16, 16], 11);
    let pred = m.predict(&img, &disk(16, 8.0, 8.0, 5.0), &img).unwrap();
    assert_eq!(pred.shape(), &[16, 16]);
    assert!(pred.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(matches!(
        m.predict(&img, &Tensor::zeros(&[16, 16]), &img),
        Err(aplsam_core::Error::EmptySupportMask)
    ));
    // one foreground pixel still yields a usable grid mask
    let mut thin = Tensor::zeros(&[16, 16]);
    thin.set2(5, 9, 1.0);
    assert_eq!(m.grid_mask(&thin).unwrap().sum(), 1.0);
}
