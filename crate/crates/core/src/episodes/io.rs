//! 8-bit grayscale PNG images and `{0, 255}` masks.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn unreadable(path: &Path, e: impl ToString) -> Error {
    Error::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| unreadable(path, e))?;
    Ok(img.into_luma8())
}

/// Width and height without decoding pixels.
pub fn dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| unreadable(path, e))
}

/// `H×W` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let g = read_gray(path)?;
    let (w, h) = g.dimensions();
    Tensor::new(
        &[h as usize, w as usize],
        g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    )
}

/// `H×W` tensor of `{0, 1}`; any byte other than 0 or 255 is an error.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let g = read_gray(path)?;
    let (w, h) = g.dimensions();
    let data = g
        .into_raw()
        .into_iter()
        .map(|v| match v {
            0 => Ok(0.0),
            255 => Ok(1.0),
            value => Err(Error::InvalidMaskValue {
                path: path.to_path_buf(),
                value,
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(&[h as usize, w as usize], data)
}

fn hw(t: &Tensor) -> Result<(u32, u32)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h as u32, *w as u32)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected H×W or 1×H×W".into(),
        }),
    }
}

fn save_gray(path: &Path, w: u32, h: u32, bytes: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w, h, bytes).expect("buffer matches dimensions");
    img.save(path).map_err(|e| unreadable(path, e))
}

/// Values are clamped to `[0, 1]` and rounded to the nearest 8-bit level.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = hw(image)?;
    let bytes = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    save_gray(path, w, h, bytes)
}

/// Pixels `>= 0.5` become 255, the rest 0.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = hw(mask)?;
    let bytes = mask
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    save_gray(path, w, h, bytes)
}

/// Grayscale image with foreground pixels blended 50% toward red.
pub fn overlay(image: &Tensor, mask: &Tensor) -> Result<RgbImage> {
    let (h, w) = hw(image)?;
    if mask.numel() != image.numel() {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            lhs: image.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let mut out = RgbImage::new(w, h);
    for (i, px) in out.pixels_mut().enumerate() {
        let g = (image.data()[i].clamp(0.0, 1.0) * 255.0).round();
        *px = if mask.data()[i] >= 0.5 {
            image::Rgb([
                (0.5 * g + 127.5).round() as u8,
                (0.5 * g).round() as u8,
                (0.5 * g).round() as u8,
            ])
        } else {
            image::Rgb([g as u8; 3])
        };
    }
    Ok(out)
}

pub fn write_overlay(path: &Path, image: &Tensor, mask: &Tensor) -> Result<()> {
    overlay(image, mask)?
        .save(path)
        .map_err(|e| unreadable(path, e))
}
