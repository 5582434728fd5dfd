use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::mask::SegmentationMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `*.png` files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Grayscale (or RGB converted to luma) image as `(H, W)` values in `[0, 1]`.
pub fn read_image_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Tensor::from_vec(&[h as usize, w as usize], img.into_raw().into_iter().map(|v| T::of(v as f64 / 255.0)).collect())
}

/// Nonzero pixels are foreground.
pub fn read_mask_png(path: &Path) -> Result<SegmentationMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    SegmentationMask::from_vec(h as usize, w as usize, img.into_raw().into_iter().map(|v| v != 0).collect())
}

/// Write an `(H, W)` image, clipping to `[0, 1]` and quantising to 8 bits.
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The image as it reads back after [`write_image_png`]: clipped to `[0, 1]`
/// and quantised to 8 bits.
pub fn quantize_8bit<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    image.map(|v| T::of(to_u8(v.f64()) as f64 / 255.0))
}

pub fn write_image_png<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    image.expect_rank(2)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let px = image.data().iter().map(|v| to_u8(v.f64())).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, px)
        .ok_or_else(|| Error::InvalidInput("image buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Foreground as 255, background as 0.
pub fn write_mask_png(path: &Path, mask: &SegmentationMask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

/// Image with the ground-truth boundary in green, the predicted boundary in
/// red and the prompt box in yellow.
pub fn write_overlay_png<T: Scalar>(
    path: &Path,
    image: &Tensor<T>,
    gt: &SegmentationMask,
    pred: &SegmentationMask,
    bbox: Option<&crate::prompt::BoundingBoxPrompt>,
) -> Result<()> {
    let (h, w) = gt.dims();
    let boundary = |m: &SegmentationMask, r: usize, c: usize| {
        m.get(r, c)
            && [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize || !m.get(nr as usize, nc as usize)
            })
    };
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let g = (image.data()[r * w + c].f64().clamp(0.0, 1.0) * 255.0) as u8;
            let on_box = bbox.is_some_and(|b| {
                b.contains(r, c) && (r == b.row_min || r == b.row_max || c == b.col_min || c == b.col_max)
            });
            let px = if boundary(pred, r, c) {
                [255, 0, 0]
            } else if boundary(gt, r, c) {
                [0, 255, 0]
            } else if on_box {
                [255, 255, 0]
            } else {
                [g, g, g]
            };
            img.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}
