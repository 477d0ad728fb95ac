//! PNG interchange. 8-bit RGB is the only supported format: it is lossless
//! and matches the integer pixel grid the stego image is quantized to.

use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageBuffer, Rgb};
use ndarray::Array4;

use crate::error::{InvMihError, Result};
use crate::tensor::{fc, Scalar};

/// Load an 8-bit RGB PNG as a (1, 3, H, W) tensor in [0, 1].
pub fn load_png<F: Scalar>(path: &Path) -> Result<Array4<F>> {
    let img = image::open(path)
        .map_err(|e| InvMihError::Image(format!("{}: {e}", path.display())))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(buf) => buf,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLumaA8(_) => {
            return Err(InvMihError::Image(format!(
                "{}: alpha channels are not supported; provide 8-bit RGB",
                path.display()
            )))
        }
        other => {
            return Err(InvMihError::Image(format!(
                "{}: unsupported pixel format {:?}; provide 8-bit RGB",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = Array4::<F>::zeros((1, 3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[0, c, y as usize, x as usize]] = fc(px.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Write a (1, 3, H, W) tensor in [0, 1] as an 8-bit RGB PNG.
pub fn save_png<F: Scalar>(path: &Path, x: &Array4<F>) -> Result<()> {
    let (b, c, h, w) = x.dim();
    if b != 1 || c != 3 {
        return Err(InvMihError::Image(format!(
            "save_png expects a single RGB image, got batch {b} with {c} channels"
        )));
    }
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (px_x, px_y, px) in buf.enumerate_pixels_mut() {
        for ci in 0..3 {
            let v = x[[0, ci, px_y as usize, px_x as usize]]
                .to_f64()
                .unwrap_or(0.0);
            px.0[ci] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    image::save_buffer(
        path,
        buf.as_raw(),
        w as u32,
        h as u32,
        ColorType::Rgb8,
    )
    .map_err(|e| InvMihError::Image(format!("{}: {e}", path.display())))
}

/// All `.png` files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| InvMihError::Data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| InvMihError::Data(format!("{}: {e}", dir.display())))?;
        let p = entry.path();
        if p.extension().map_or(false, |e| e.eq_ignore_ascii_case("png")) && p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Crop the spatial center of `x` to (h, w).
pub fn center_crop<F: Scalar>(x: &Array4<F>, h: usize, w: usize) -> Array4<F> {
    let (_b, _c, xh, xw) = x.dim();
    debug_assert!(h <= xh && w <= xw);
    let top = (xh - h) / 2;
    let left = (xw - w) / 2;
    x.slice(ndarray::s![.., .., top..top + h, left..left + w])
        .to_owned()
}
