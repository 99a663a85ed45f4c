use aplsam_core::fft::{fft2, ifft2};
use aplsam_core::gradcheck::{max_relative_error, numeric_gradient};
use aplsam_core::graph::{gelu, Graph, Var};
use aplsam_core::optim::{adamw_update, cosine_lr, AdamWConfig, Moments, OptimizerState};
use aplsam_core::params::{Param, ParamStore};
use aplsam_core::{rng, Error, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    Tensor::from_fn(shape, |_| r.random::<f64>() * 2.0 - 1.0)
}

/// Analytic gradient of a scalar graph function of one input, next to its
/// central-difference estimate.
fn grad_pair(x: &Tensor, f: impl Fn(&Graph, Var) -> aplsam_core::Result<Var>) -> (Tensor, Tensor) {
    let g = Graph::new();
    let v = g.variable(x.clone()).unwrap();
    let out = f(&g, v).unwrap();
    let analytic = g.backward(out).unwrap().get(v).unwrap().clone();
    let numeric = numeric_gradient(x, 1e-5, |t| {
        let g = Graph::new();
        let v = g.variable(t.clone())?;
        let out = f(&g, v)?;
        let val = g.value(out).item();
        Ok(val)
    })
    .unwrap();
    (analytic, numeric)
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(&[4, 5], 1);
    let b = random(&[5, 3], 2);
    let g = Graph::new();
    let (va, vb) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let c = g.value(g.matmul(va, vb).unwrap()).clone();
    for i in 0..4 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..5 {
                s += a.at2(i, k) * b.at2(k, j);
            }
            assert!((c.at2(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_identity_and_shape_error() {
    let g = Graph::new();
    let b = random(&[3, 6], 3);
    let i3 = g.constant(Tensor::eye(3)).unwrap();
    let vb = g.constant(b.clone()).unwrap();
    assert_eq!(g.value(g.matmul(i3, vb).unwrap()).data(), b.data());
    let bad = g.constant(Tensor::zeros(&[4, 2])).unwrap();
    match g.matmul(vb, bad) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![3, 6]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("{other:?}"),
    }
}

fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = if stride == 1 { (k - 1) / 2 } else { 0 };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = 0.0;
                for c in 0..ci {
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xo * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let wi = ((o * ci + c) * k + dy) * k + dx;
                            s += w.data()[wi] * x.at3(c, iy as usize, ix as usize);
                        }
                    }
                }
                out.data_mut()[(o * oh + y) * ow + xo] = s;
            }
        }
    }
    out
}

#[test]
fn conv_matches_sliding_window() {
    let x = random(&[2, 8, 8], 4);
    for (k, stride) in [(3, 1), (1, 1), (4, 4), (2, 2)] {
        let w = random(&[3, 2, k, k], 5 + k as u64);
        let g = Graph::new();
        let out = g
            .conv2d(g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap(), stride)
            .unwrap();
        let want = conv_oracle(&x, &w, stride);
        assert_eq!(g.value(out).shape(), want.shape());
        assert!(g.value(out).max_abs_diff(&want) < 1e-12, "k={k} stride={stride}");
    }
}

#[test]
fn conv_unit_kernel_is_identity() {
    let x = random(&[1, 5, 5], 6);
    let g = Graph::new();
    let out = g
        .conv2d(g.constant(x.clone()).unwrap(), g.constant(Tensor::ones(&[1, 1, 1, 1])).unwrap(), 1)
        .unwrap();
    assert_eq!(g.value(out).data(), x.data());
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    for x in [-2.0, -0.5, 0.0, 0.5, 2.0] {
        let g = Graph::new();
        let v = g.variable(Tensor::scalar(x)).unwrap();
        let y = g.gelu(v).unwrap();
        let a = g.backward(y).unwrap().get(v).unwrap().item();
        let h = 1e-5;
        let n = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-12) < 1e-5, "x={x}: {a} vs {n}");
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let x = random(&[3, 5], 7);
    let wts = random(&[3, 5], 8);
    for axis in [0, 1] {
        let (a, n) = grad_pair(&x, |g, v| {
            let s = g.softmax(v, axis)?;
            let w = g.constant(wts.clone())?;
            g.sum(g.mul(s, w)?)
        });
        assert!(max_relative_error(&a, &n) < 1e-5);
    }
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let x = random(&[4, 6], 9);
    let gain = random(&[6], 10);
    let bias = random(&[6], 11);
    let wts = random(&[4, 6], 12);
    let build = |g: &Graph, xv: Var, gv: Var, bv: Var| -> aplsam_core::Result<Var> {
        let y = g.layer_norm(xv, gv, bv, 1e-5)?;
        let w = g.constant(wts.clone())?;
        g.sum(g.mul(y, w)?)
    };
    let (a, n) = grad_pair(&x, |g, v| {
        let (gv, bv) = (g.constant(gain.clone())?, g.constant(bias.clone())?);
        build(g, v, gv, bv)
    });
    assert!(max_relative_error(&a, &n) < 1e-4);
    let (a, n) = grad_pair(&gain, |g, v| {
        let (xv, bv) = (g.constant(x.clone())?, g.constant(bias.clone())?);
        build(g, xv, v, bv)
    });
    assert!(max_relative_error(&a, &n) < 1e-4);
}

#[test]
fn conv_and_distance_gradients_match_finite_differences() {
    let x = random(&[2, 6, 6], 13);
    let w = random(&[3, 2, 3, 3], 14);
    let (a, n) = grad_pair(&w, |g, v| {
        let y = g.conv2d(g.constant(x.clone())?, v, 1)?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
    assert!(max_relative_error(&a, &n) < 1e-4);
    let (a, n) = grad_pair(&x, |g, v| {
        let y = g.conv2d(v, g.constant(w.clone())?, 2)?;
        g.sum(g.gelu(y)?)
    });
    assert!(max_relative_error(&a, &n) < 1e-4);
    let other = random(&[3, 4], 15);
    let (a, n) = grad_pair(&random(&[3, 5], 16), |g, v| {
        let d = g.sq_dist(v, g.constant(other.clone())?)?;
        let s = g.softmax(g.scale(d, -1.0)?, 0)?;
        g.sum(g.mul(s, s)?)
    });
    assert!(max_relative_error(&a, &n) < 1e-4);
}

#[test]
fn bilinear_form_and_untouched_parameters() {
    let (x, y) = (random(&[2, 3], 17), random(&[2, 3], 18));
    let g = Graph::new();
    let vx = g.variable(x).unwrap();
    let vy = g.constant(y.clone()).unwrap();
    let theta = g.variable(random(&[4], 19)).unwrap();
    let loss = g.sum(g.mul(vx, vy).unwrap()).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(vx).unwrap().data(), y.data());
    assert!(grads.get(theta).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn non_finite_inputs_are_rejected() {
    let g = Graph::new();
    assert!(matches!(
        g.constant(Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap()),
        Err(Error::NumericFault { .. })
    ));
    let big = g.constant(Tensor::scalar(1e300)).unwrap();
    assert!(matches!(g.mul(big, big), Err(Error::NumericFault { .. })));
    let neg = g.constant(Tensor::scalar(-1.0)).unwrap();
    assert!(matches!(g.sqrt(neg), Err(Error::NumericFault { .. })));
}

#[test]
fn fft_matches_dc_closed_form() {
    let x = Tensor::full(&[8, 16], 0.5);
    let s = fft2(&x).unwrap();
    assert!((s.data[0].re - 0.5 * (128f64).sqrt()).abs() < 1e-12);
    assert!(s.data[1..].iter().all(|c| c.abs() < 1e-12));
    assert!(matches!(fft2(&Tensor::zeros(&[6, 8])), Err(Error::NotPowerOfTwo { .. })));
}

#[test]
fn adamw_single_step_matches_hand_oracle() {
    let cfg = AdamWConfig::default();
    let (lr, g, theta0) = (1e-3, 0.3, 0.7);
    let mut store = ParamStore::new();
    store.insert("w", Param::trainable(Tensor::full(&[3], theta0)));
    let mut opt = OptimizerState::new(cfg);
    opt.step(&mut store, &[("w".to_string(), Tensor::full(&[3], g))].into(), lr).unwrap();
    // m = 0.1 g, v = 0.001 g^2, bias-corrected m_hat = g, v_hat = g^2
    let m_hat = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
    let v_hat = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
    let want = theta0 * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    for &v in store.value("w").unwrap().data() {
        assert!((v - want).abs() < 1e-12);
    }
}

#[test]
fn adamw_decay_only_and_determinism() {
    let mut cfg = AdamWConfig::default();
    let mut theta = vec![1.0, -2.0];
    let mut mom = Moments { m: vec![0.0; 2], v: vec![0.0; 2] };
    adamw_update(&mut theta, &[0.0, 0.0], &mut mom, 1, 0.1, &cfg);
    assert_eq!(theta, vec![1.0 * (1.0 - 0.1 * 0.01), -2.0 * (1.0 - 0.1 * 0.01)]);
    cfg.weight_decay = 0.0;
    let mut theta = vec![1.0, -2.0];
    adamw_update(&mut theta, &[0.0, 0.0], &mut mom, 2, 0.1, &cfg);
    assert_eq!(theta, vec![1.0, -2.0]);
}

#[test]
fn cosine_schedule_points() {
    assert_eq!(cosine_lr(0, 100, 5e-5).unwrap(), 5e-5);
    assert!((cosine_lr(50, 100, 5e-5).unwrap() - 2.5e-5).abs() < 1e-18);
    assert!(cosine_lr(100, 100, 5e-5).unwrap().abs() < 1e-20);
    assert!(matches!(cosine_lr(101, 100, 5e-5), Err(Error::StepOutOfRange { .. })));
}

proptest! {
    #[test]
    fn softmax_rows_positive_and_normalized(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], vals).unwrap()).unwrap();
        let s = g.value(g.softmax(x, 1).unwrap()).clone();
        for r in 0..3 {
            let row: Vec<f64> = (0..4).map(|c| s.at2(r, c)).collect();
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_parseval_and_round_trip(vals in prop::collection::vec(-1.0f64..1.0, 64)) {
        let x = Tensor::new(&[8, 8], vals).unwrap();
        let s = fft2(&x).unwrap();
        let e_x: f64 = x.data().iter().map(|v| v * v).sum();
        prop_assert!((s.energy() - e_x).abs() <= 1e-9 * e_x.max(1e-300));
        prop_assert!(ifft2(&s).unwrap().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn adamw_keeps_second_moment_nonnegative(gs in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let cfg = AdamWConfig::default();
        let mut theta = vec![0.5];
        let mut mom = Moments { m: vec![0.0], v: vec![0.0] };
        for (t, g) in gs.iter().enumerate() {
            adamw_update(&mut theta, &[*g], &mut mom, t as u64 + 1, 1e-3, &cfg);
            prop_assert!(mom.v[0] >= 0.0);
            prop_assert!(theta[0].is_finite());
        }
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    use aplsam_core::checkpoint::{decode, encode};
    let mut store = ParamStore::new();
    store.insert("a.weight", Param::trainable(random(&[3, 4], 20)));
    store.insert("b", Param::frozen(Tensor::full(&[2], -0.0)));
    let bytes = encode(&store);
    let back = decode(&bytes).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(&back["a.weight"], store.value("a.weight").unwrap());
    assert_eq!(back["b"].data()[0].to_bits(), (-0.0f64).to_bits());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
    assert!(decode(&bytes[..bytes.len() - 3]).is_err());
}
