//! Inverse warping with bilinear sampling.

use image::{Rgba, RgbaImage};
use nalgebra::{Matrix3, Vector3};

/// Samples at continuous pixel coordinates, where pixel `(i, j)` covers
/// `[i, i+1) × [j, j+1)`. Returns `None` outside the image.
pub fn sample_bilinear(img: &RgbaImage, x: f64, y: f64) -> Option<Rgba<u8>> {
    let (w, h) = img.dimensions();
    if !(x >= 0.0 && y >= 0.0 && x <= w as f64 && y <= h as f64) || w == 0 || h == 0 {
        return None;
    }
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = fx.floor() as u32;
    let y0 = fy.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let get = |x: u32, y: u32| img.get_pixel(x, y).0;
    let (p00, p10, p01, p11) = (get(x0, y0), get(x1, y0), get(x0, y1), get(x1, y1));
    let mut out = [0u8; 4];
    for c in 0..4 {
        let top = p00[c] as f64 * (1.0 - ax) + p10[c] as f64 * ax;
        let bottom = p01[c] as f64 * (1.0 - ax) + p11[c] as f64 * ax;
        out[c] = (top * (1.0 - ay) + bottom * ay).round().clamp(0.0, 255.0) as u8;
    }
    Some(Rgba(out))
}

/// Chart raster of `width × height` texels: texel centers `(i + ½, j + ½)`
/// are mapped through `homography` into `image` and sampled. Texels landing
/// outside the image are transparent.
pub fn extract_face_texture(image: &RgbaImage, homography: &Matrix3<f64>, width: u32, height: u32) -> RgbaImage {
    let mut out = RgbaImage::new(width, height);
    for j in 0..height {
        for i in 0..width {
            let p = homography * Vector3::new(i as f64 + 0.5, j as f64 + 0.5, 1.0);
            if p.z.abs() < f64::MIN_POSITIVE {
                continue;
            }
            if let Some(px) = sample_bilinear(image, p.x / p.z, p.y / p.z) {
                out.put_pixel(i, j, px);
            }
        }
    }
    out
}
