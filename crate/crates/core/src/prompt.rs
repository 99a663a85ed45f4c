//! Adaptive prompt learning: superpixel-style soft clustering of masked
//! support features into a variable number of visual prompts, token fusion,
//! and cross-attention injection into query features.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{self, Attended, Init};
use crate::params::Binder;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AplConfig {
    /// Average foreground area allotted to each centroid.
    pub a_sp: usize,
    pub n_max: usize,
    /// Spatial weighting in the integrated distance.
    pub omega: f64,
    pub iterations: usize,
    pub n_tokens: usize,
}

impl Default for AplConfig {
    fn default() -> Self {
        Self {
            a_sp: 100,
            n_max: 7,
            omega: 10.0,
            iterations: 10,
            n_tokens: 4,
        }
    }
}

impl AplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a_sp == 0
            || self.n_max == 0
            || self.iterations == 0
            || self.n_tokens == 0
            || !(self.omega > 0.0 && self.omega.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "prompt settings must all be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Block-average pooling to `h×w`, then threshold at 0.5 (ties count as foreground).
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (big_h, big_w) = match mask.shape() {
        [a, b] | [1, a, b] => (*a, *b),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "mask must be H×W".into(),
            })
        }
    };
    if h == 0 || w == 0 || big_h % h != 0 || big_w % w != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot pool {big_h}x{big_w} mask to {h}x{w}"
        )));
    }
    let (fy, fx) = (big_h / h, big_w / w);
    let area = (fy * fx) as f64;
    let mut out = Tensor::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for y in r * fy..(r + 1) * fy {
                for x in c * fx..(c + 1) * fx {
                    s += mask.data()[y * big_w + x];
                }
            }
            out.set2(r, c, if s / area >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

/// `min(floor(n_m / a_sp), n_max)`; results 0 and 1 select masked average pooling.
pub fn compute_n_centroids(n_m: usize, a_sp: usize, n_max: usize) -> usize {
    (n_m / a_sp).min(n_max)
}

/// Euclidean distance from each foreground cell to the nearest background
/// cell, where everything outside the grid counts as background. Background
/// cells get 0.
pub fn boundary_distance(mask: &Tensor) -> Vec<f64> {
    let (h, w) = (mask.rows(), mask.cols());
    let bg: Vec<(isize, isize)> = (0..h * w)
        .filter(|&i| mask.data()[i] < 0.5)
        .map(|i| ((i / w) as isize, (i % w) as isize))
        .collect();
    (0..h * w)
        .map(|i| {
            if mask.data()[i] < 0.5 {
                return 0.0;
            }
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            let edge = [r + 1, c + 1, h as isize - r, w as isize - c]
                .into_iter()
                .min()
                .unwrap() as f64;
            bg.iter()
                .map(|&(br, bc)| (((br - r).pow(2) + (bc - c).pow(2)) as f64).sqrt())
                .fold(edge, f64::min)
        })
        .collect()
}

/// Greedy farthest-point seeding inside the mask.
///
/// The first seed maximizes the distance to the mask boundary; each later
/// seed maximizes `min(distance to existing seeds, distance to boundary)`.
/// Ties go to the smallest row-major index. Returns `(row, col)` cells.
pub fn init_centroids_maskslic(mask: &Tensor, n_c: usize) -> Result<Vec<(usize, usize)>> {
    let w = mask.cols();
    let fg: Vec<usize> = (0..mask.numel()).filter(|&i| mask.data()[i] >= 0.5).collect();
    if n_c > fg.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_c} seeds requested but mask has {} foreground cells",
            fg.len()
        )));
    }
    let dt = boundary_distance(mask);
    let mut seeds: Vec<usize> = Vec::with_capacity(n_c);
    while seeds.len() < n_c {
        let mut best: Option<(usize, f64)> = None;
        for &i in &fg {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let to_seeds = seeds
                .iter()
                .map(|&s| {
                    let (sr, sc) = ((s / w) as f64, (s % w) as f64);
                    ((sr - r).powi(2) + (sc - c).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            let score = to_seeds.min(dt[i]);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        seeds.push(best.expect("foreground is non-empty").0);
    }
    Ok(seeds.into_iter().map(|i| (i / w, i % w)).collect())
}

/// Normalized `(row, col)` coordinates in `[0, 1]` as a `2×n` tensor.
pub fn normalized_coords(cells: &[(usize, usize)], h: usize, w: usize) -> Tensor {
    let n = cells.len();
    let norm = |v: usize, extent: usize| {
        if extent > 1 {
            v as f64 / (extent - 1) as f64
        } else {
            0.0
        }
    };
    Tensor::from_fn(&[2, n], |i| {
        let (r, c) = cells[i % n];
        if i < n {
            norm(r, h)
        } else {
            norm(c, w)
        }
    })
}

/// Foreground columns of a support embedding with their positions.
#[derive(Clone, Debug)]
pub struct MaskedSupportFeatures {
    /// `c×N_m`
    pub f_prime: Var,
    /// `2×N_m`, normalized to `[0, 1]`
    pub coords: Tensor,
    pub cells: Vec<(usize, usize)>,
    pub n_m: usize,
    /// `(h, w)` of the mask grid.
    pub grid: (usize, usize),
}

/// Keeps the support embedding columns (`c×(h·w)`) where the `h×w` mask is set.
pub fn mask_support_features(
    b: &Binder,
    f_s: Var,
    mask: &Tensor,
) -> Result<MaskedSupportFeatures> {
    let (h, w) = (mask.rows(), mask.cols());
    let idx: Vec<usize> = (0..h * w).filter(|&i| mask.data()[i] >= 0.5).collect();
    if idx.is_empty() {
        return Err(Error::EmptySupportMask);
    }
    let cells: Vec<(usize, usize)> = idx.iter().map(|&i| (i / w, i % w)).collect();
    Ok(MaskedSupportFeatures {
        f_prime: b.g.select_cols(f_s, &idx)?,
        coords: normalized_coords(&cells, h, w),
        n_m: idx.len(),
        cells,
        grid: (h, w),
    })
}

/// Appends `coords/ω` below the feature rows, so that plain Euclidean distance
/// between augmented columns equals `sqrt(d_f² + (d_s/ω)²)`.
pub fn augment(b: &Binder, f: Var, coords: &Tensor, omega: f64) -> Result<Var> {
    if omega.is_nan() || omega <= 0.0 {
        return Err(Error::InvalidArgument(format!("omega must be positive, got {omega}")));
    }
    let n = b.g.shape(f)[1];
    if coords.shape() != [2, n] {
        return Err(Error::ShapeMismatch {
            op: "augment",
            lhs: b.g.shape(f),
            rhs: coords.shape().to_vec(),
        });
    }
    let spatial = b.g.constant(coords.map(|v| v / omega))?;
    b.g.concat_rows(&[f, spatial])
}

/// `S_{p,i} = exp(-‖F_p − C_i‖²)`, as an `N_m×N_c` matrix.
pub fn soft_assign(b: &Binder, f_aug: Var, centroids: Var) -> Result<Var> {
    let d = b.g.sq_dist(f_aug, centroids)?;
    let neg = b.g.scale(d, -1.0)?;
    b.g.exp(neg)
}

/// `C_i = Σ_p S_{p,i} F_p / Σ_p S_{p,i}`, as a `(c+2)×N_c` matrix.
pub fn update_centroids(b: &Binder, s: Var, f_aug: Var) -> Result<Var> {
    let n_m = b.g.shape(s)[0];
    let ones = b.g.constant(Tensor::ones(&[1, n_m]))?;
    let col_sums = b.g.matmul(ones, s)?;
    if b.g.value(col_sums).data().iter().any(|&v| v <= 0.0) {
        return Err(Error::NumericFault {
            op: "update_centroids",
            detail: "assignment column sums to zero".into(),
        });
    }
    // Broadcast 1/colsum down the rows through a rank-1 product.
    let ones_row = b.g.constant(Tensor::ones(&b.g.shape(col_sums)))?;
    let inv = b.g.div(ones_row, col_sums)?;
    let ones_col = b.g.constant(Tensor::ones(&[n_m, 1]))?;
    let inv_rows = b.g.matmul(ones_col, inv)?;
    let weights = b.g.mul(s, inv_rows)?;
    b.g.matmul(f_aug, weights)
}

/// One clustering round in the overflow-safe form.
///
/// `S/colsum(S)` equals a softmax over pixels of `-‖F_p − C_i‖²`, which is
/// what this computes, so far-away pixels cannot underflow a column to zero.
pub fn cluster_step(b: &Binder, f_aug: Var, centroids: Var) -> Result<Var> {
    let d = b.g.sq_dist(f_aug, centroids)?;
    let neg = b.g.scale(d, -1.0)?;
    let weights = b.g.softmax(neg, 0)?;
    b.g.matmul(f_aug, weights)
}

/// Masked average pooling of a `c×(h·w)` embedding under an `h×w` mask, as `c×1`.
pub fn masked_average_pooling(b: &Binder, f_s: Var, mask: &Tensor) -> Result<Var> {
    let msf = mask_support_features(b, f_s, mask)?;
    mean_columns(b, msf.f_prime)
}

fn mean_columns(b: &Binder, f: Var) -> Result<Var> {
    let n = b.g.shape(f)[1];
    let avg = b.g.constant(Tensor::full(&[n, 1], 1.0 / n as f64))?;
    b.g.matmul(f, avg)
}

#[derive(Clone, Debug)]
pub struct VisualPrompts {
    /// `c×N_c`
    pub centroids: Var,
    /// Seed cells; empty on the pooling path.
    pub seeds: Vec<(usize, usize)>,
    pub n_c: usize,
    /// Augmented centroid values after each iteration (clustering path only).
    pub trace: Vec<Tensor>,
    pub pooled: bool,
}

/// Clusters masked support features into visual prompts.
pub fn cluster(b: &Binder, msf: &MaskedSupportFeatures, cfg: &AplConfig) -> Result<VisualPrompts> {
    if msf.n_m == 0 {
        return Err(Error::EmptySupportMask);
    }
    let n_c = compute_n_centroids(msf.n_m, cfg.a_sp, cfg.n_max);
    if n_c <= 1 {
        return Ok(VisualPrompts {
            centroids: mean_columns(b, msf.f_prime)?,
            seeds: Vec::new(),
            n_c: 1,
            trace: Vec::new(),
            pooled: true,
        });
    }
    let (h, w) = msf.grid;
    let mut grid = Tensor::zeros(&[h, w]);
    for &(r, c) in &msf.cells {
        grid.set2(r, c, 1.0);
    }
    let seeds = init_centroids_maskslic(&grid, n_c)?;
    let f_aug = augment(b, msf.f_prime, &msf.coords, cfg.omega)?;
    let seed_cols: Vec<usize> = seeds
        .iter()
        .map(|s| msf.cells.iter().position(|c| c == s).expect("seed inside mask"))
        .collect();
    let mut c = b.g.select_cols(f_aug, &seed_cols)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        c = cluster_step(b, f_aug, c)?;
        trace.push(b.g.value(c).clone());
    }
    let dim = b.g.shape(msf.f_prime)[0];
    // strip the two coordinate rows
    let ct = b.g.transpose(c)?;
    let ct = b.g.slice_cols(ct, 0, dim)?;
    Ok(VisualPrompts {
        centroids: b.g.transpose(ct)?,
        seeds,
        n_c,
        trace,
        pooled: false,
    })
}

pub fn init_params(init: &mut Init, c: usize, cfg: &AplConfig) {
    init.normal("prompt.tokens", &[cfg.n_tokens, c], 1.0 / (c as f64).sqrt());
    nn::init_transformer_block(init, "prompt.fuse", c, true);
    for level in [1, 4] {
        init.layer_norm(&format!("prompt.inject{level}.ln_q"), c);
        init.layer_norm(&format!("prompt.inject{level}.ln_kv"), c);
        init.attention(&format!("prompt.inject{level}.attn"), c, true);
    }
}

/// Learned tokens followed by the prompts, run through one self-attention block.
/// Returns an `(N_t + N_c)×c` token matrix.
pub fn fuse_prompts(b: &Binder, prompts: Var, heads: usize) -> Result<Var> {
    let tokens = b.p("prompt.tokens")?;
    let pt = b.g.transpose(prompts)?;
    if b.g.shape(pt)[1] != b.g.shape(tokens)[1] {
        return Err(Error::ShapeMismatch {
            op: "fuse_prompts",
            lhs: b.g.shape(prompts),
            rhs: b.g.shape(tokens),
        });
    }
    let seq = b.g.concat_rows(&[tokens, pt])?;
    nn::transformer_block(b, seq, "prompt.fuse", heads)
}

/// Cross-attention from query tokens to the fused sequence, before the residual.
pub fn inject_attention(
    b: &Binder,
    query: Var,
    fused: Var,
    level: usize,
    heads: usize,
) -> Result<Attended> {
    let q = nn::layer_norm(b, query, &format!("prompt.inject{level}.ln_q"))?;
    let kv = nn::layer_norm(b, fused, &format!("prompt.inject{level}.ln_kv"))?;
    nn::attention(b, q, kv, &format!("prompt.inject{level}.attn"), heads)
}

/// Adds prompt knowledge to levels 1 and 4; levels 2 and 3 pass through.
pub fn inject_prompts(b: &Binder, levels: [Var; 4], fused: Var, heads: usize) -> Result<[Var; 4]> {
    let mut out = levels;
    for (slot, level) in [(0usize, 1usize), (3, 4)] {
        let att = inject_attention(b, levels[slot], fused, level, heads)?;
        out[slot] = b.g.add(levels[slot], att.out)?;
    }
    Ok(out)
}

/// Sinusoidal code of normalized `(row, col)` points as a `c×n` matrix:
/// the first half of the channels encodes rows, the second half columns.
pub fn point_prompt_code(coords: &Tensor, c: usize) -> Tensor {
    let n = coords.cols();
    let half = c / 2;
    let pairs = half.div_ceil(2);
    let mut out = Tensor::zeros(&[c, n]);
    for p in 0..n {
        for (axis, base) in [(0usize, 0usize), (1, half)] {
            let v = coords.at2(axis, p);
            for k in 0..pairs {
                let freq = std::f64::consts::PI * (1u64 << k.min(20)) as f64;
                let (s, co) = (freq * v).sin_cos();
                if base + 2 * k < c {
                    out.set2(base + 2 * k, p, s);
                }
                if base + 2 * k + 1 < c && 2 * k + 1 < c - base {
                    out.set2(base + 2 * k + 1, p, co);
                }
            }
        }
    }
    out
}
