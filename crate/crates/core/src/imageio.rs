//! Image array conventions and PNG I/O.
//!
//! Images are `(3, H, W)` float arrays with values in [-1, 1]. PNG export
//! maps `x -> x * 127.5 + 127.5`, rounded half-up, clamped to [0, 255];
//! import inverts the affine map (without the rounding, which is lossy by
//! design).

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Pixel image: channels-first RGB, values in [-1, 1].
pub type Image = Array3<f32>;

pub fn image_dims(img: &Image) -> (usize, usize) {
    let (_, h, w) = img.dim();
    (h, w)
}

/// [-1,1] float to 8-bit, rounded half-up.
pub fn to_u8(x: f32) -> u8 {
    let v = x * 127.5 + 127.5;
    let r = (v + 0.5).floor();
    r.clamp(0.0, 255.0) as u8
}

pub fn from_u8(b: u8) -> f32 {
    (b as f32 - 127.5) / 127.5
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            out.put_pixel(
                j as u32,
                i as u32,
                image::Rgb([
                    to_u8(img[[0, i, j]]),
                    to_u8(img[[1, i, j]]),
                    to_u8(img[[2, i, j]]),
                ]),
            );
        }
    }
    out.save(path)
        .map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = ImageReader::open(path)?
        .decode()
        .map_err(|e| Error::Format(format!("png read {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let p = img.get_pixel(j as u32, i as u32);
            out[[0, i, j]] = from_u8(p[0]);
            out[[1, i, j]] = from_u8(p[1]);
            out[[2, i, j]] = from_u8(p[2]);
        }
    }
    Ok(out)
}

/// Binary mask as 0/255 grayscale.
pub fn write_mask_png(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = if mask[[i, j]] != 0 { 255 } else { 0 };
            out.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    out.save(path)
        .map_err(|e| Error::Format(format!("mask write {}: {e}", path.display())))
}

pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = ImageReader::open(path)?
        .decode()
        .map_err(|e| Error::Format(format!("mask read {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::<u8>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = if img.get_pixel(j as u32, i as u32)[0] >= 128 {
                1
            } else {
                0
            };
        }
    }
    Ok(out)
}

/// Horizontal flip (mirror columns).
pub fn flip_horizontal(img: &Image) -> Image {
    let (c, h, w) = img.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[ci, i, j]] = img[[ci, i, w - 1 - j]];
            }
        }
    }
    out
}

/// Crop a window and bilinearly resize back to (out_h, out_w).
pub fn crop_resize(
    img: &Image,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    out_h: usize,
    out_w: usize,
) -> Image {
    let (c, h, w) = img.dim();
    debug_assert!(top + ch <= h && left + cw <= w);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ci in 0..c {
        for oi in 0..out_h {
            // map output pixel center into crop coordinates
            let fy = (oi as f32 + 0.5) / out_h as f32 * ch as f32 - 0.5;
            let y0 = fy.floor().clamp(0.0, (ch - 1) as f32) as usize;
            let y1 = (y0 + 1).min(ch - 1);
            let wy = (fy - y0 as f32).clamp(0.0, 1.0);
            for oj in 0..out_w {
                let fx = (oj as f32 + 0.5) / out_w as f32 * cw as f32 - 0.5;
                let x0 = fx.floor().clamp(0.0, (cw - 1) as f32) as usize;
                let x1 = (x0 + 1).min(cw - 1);
                let wx = (fx - x0 as f32).clamp(0.0, 1.0);
                let v00 = img[[ci, top + y0, left + x0]];
                let v01 = img[[ci, top + y0, left + x1]];
                let v10 = img[[ci, top + y1, left + x0]];
                let v11 = img[[ci, top + y1, left + x1]];
                out[[ci, oi, oj]] =
                    v00 * (1.0 - wy) * (1.0 - wx) + v01 * (1.0 - wy) * wx + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
            }
        }
    }
    out
}

/// Stack images into an (n, 3, h, w) batch array.
pub fn batch(images: &[&Image]) -> ndarray::Array4<f32> {
    let (c, h, w) = images[0].dim();
    let mut out = ndarray::Array4::<f32>::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), n).assign(img);
    }
    out
}

/// Extract item `n` of a batch back into an image.
pub fn unbatch(batch: &ndarray::ArrayD<f32>, n: usize) -> Image {
    batch
        .index_axis(ndarray::Axis(0), n)
        .to_owned()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("batch rank")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_mapping_rounds_half_up() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 128); // 127.5 rounds half-up to 128
        assert_eq!(to_u8(-2.0), 0); // clamped
        assert_eq!(to_u8(2.0), 255);
    }

    #[test]
    fn png_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut img = Image::zeros((3, 8, 8));
        for (k, v) in img.iter_mut().enumerate() {
            *v = from_u8((k % 256) as u8);
        }
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        for (&a, &b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_is_involutive() {
        let mut img = Image::zeros((3, 4, 5));
        for (k, v) in img.iter_mut().enumerate() {
            *v = k as f32 * 0.01 - 0.3;
        }
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn full_crop_resize_to_same_size_is_identity() {
        let mut img = Image::zeros((3, 6, 6));
        for (k, v) in img.iter_mut().enumerate() {
            *v = (k as f32).sin();
        }
        let out = crop_resize(&img, 0, 0, 6, 6, 6, 6);
        for (&a, &b) in img.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
