//! Unitary radix-2 2-D discrete Fourier transform.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn cis(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    pub fn abs(self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }
}

impl Add for Complex {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }
}

impl Sub for Complex {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }
}

impl Mul for Complex {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

/// Row-major `h×w` complex spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Complex>,
}

impl ComplexSpectrum {
    pub fn at(&self, r: usize, c: usize) -> Complex {
        self.data[r * self.w + c]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// In-place iterative Cooley-Tukey; `sign` is -1 for forward, +1 for inverse.
fn fft1d(buf: &mut [Complex], sign: f64) {
    let n = buf.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let w_len = Complex::cis(sign * 2.0 * PI / len as f64);
        for start in (0..n).step_by(len) {
            let mut w = Complex::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[start + k];
                let v = buf[start + k + len / 2] * w;
                buf[start + k] = u + v;
                buf[start + k + len / 2] = u - v;
                w = w * w_len;
            }
        }
        len <<= 1;
    }
}

fn transform2d(data: &mut [Complex], h: usize, w: usize, sign: f64) {
    for row in data.chunks_mut(w) {
        fft1d(row, sign);
    }
    let mut col = vec![Complex::ZERO; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        fft1d(&mut col, sign);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    for z in data.iter_mut() {
        *z = z.scale(norm);
    }
}

fn check_dims(op: &'static str, h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { op, h, w });
    }
    Ok(())
}

/// Forward transform of an `h×w` real array (a leading singleton channel is accepted).
pub fn fft2(x: &Tensor) -> Result<ComplexSpectrum> {
    let (h, w) = match x.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "fft2 expects h×w or 1×h×w".into(),
            })
        }
    };
    check_dims("fft2", h, w)?;
    let mut data: Vec<Complex> = x.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    transform2d(&mut data, h, w, -1.0);
    Ok(ComplexSpectrum { h, w, data })
}

/// Inverse transform keeping the real part, shaped `h×w`.
pub fn ifft2(s: &ComplexSpectrum) -> Result<Tensor> {
    let z = ifft2_complex(s)?;
    Tensor::new(&[s.h, s.w], z.into_iter().map(|c| c.re).collect())
}

pub fn ifft2_complex(s: &ComplexSpectrum) -> Result<Vec<Complex>> {
    check_dims("ifft2", s.h, s.w)?;
    let mut data = s.data.clone();
    transform2d(&mut data, s.h, s.w, 1.0);
    Ok(data)
}

/// Signed frequency of bin `k` in an `n`-point transform, in `-n/2..n/2`.
pub fn centered_frequency(k: usize, n: usize) -> isize {
    if k < n / 2 {
        k as isize
    } else {
        k as isize - n as isize
    }
}
