#![allow(dead_code)]

use aplsam_core::encoder::EncoderConfig;
use aplsam_core::prompt::AplConfig;
use aplsam_core::{rng, AblationMode, ModelConfig, Tensor};
use rand::Rng as _;

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        adapter_dim: 4,
        hfc_ratio: 0.25,
    }
}

pub fn small_model(ablation: AblationMode) -> ModelConfig {
    ModelConfig {
        encoder: small_encoder(),
        apl: AplConfig {
            a_sp: 3,
            n_max: 3,
            ..Default::default()
        },
        ablation,
    }
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    Tensor::from_fn(shape, |_| r.random::<f64>())
}

pub fn signed(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, seed).map(|v| 2.0 * v - 1.0)
}

pub fn disk(n: usize, cy: f64, cx: f64, r: f64) -> Tensor {
    Tensor::from_fn(&[n, n], |i| {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        if (y - cy).powi(2) + (x - cx).powi(2) <= r * r {
            1.0
        } else {
            0.0
        }
    })
}

/// Mask from rows of `#` (foreground) and `.`.
pub fn ascii_mask(rows: &[&str]) -> Tensor {
    let w = rows[0].len();
    Tensor::from_fn(&[rows.len(), w], |i| {
        if rows[i / w].as_bytes()[i % w] == b'#' {
            1.0
        } else {
            0.0
        }
    })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows());
    Tensor::from_fn(&[n, m], |i| {
        let (r, c) = (i / m, i % m);
        (0..k).map(|j| a.at2(r, j) * b.at2(j, c)).sum()
    })
}
