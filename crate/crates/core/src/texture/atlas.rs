//! Chart packing and atlas assembly.

use super::{extract_face_texture, face_chart_corners, homography_of_frame, score_view, ChartFrame, Result, TextureError};
use crate::calib::Camera;
use crate::mesh::{FaceId, Mesh};
use crate::ImageId;
use image::{Rgba, RgbaImage};
use nalgebra::{Matrix3, Point2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const MAX_ATLAS_SIDE: u32 = 4096;
pub const PLACEHOLDER_COLOR: [u8; 4] = [128, 128, 128, 255];
const GUTTER: u32 = 1;
const PLACEHOLDER_SIZE: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlasOptions {
    /// Texels per world unit before clamping to the maximum atlas side.
    pub texel_density: f64,
}

impl Default for AtlasOptions {
    fn default() -> Self {
        Self { texel_density: 64.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl PackedRect {
    /// Whether the rectangles, each grown by `gap` on every side, stay apart.
    pub fn separated_from(&self, other: &PackedRect, gap: u32) -> bool {
        self.x + self.width + gap <= other.x
            || other.x + other.width + gap <= self.x
            || self.y + self.height + gap <= other.y
            || other.y + other.height + gap <= self.y
    }
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    x: u32,
    y: u32,
    width: u32,
}

/// Bottom-left skyline packing of rectangles in the given order into a
/// `side × side` square with `gutter` free texels right of and below each
/// rectangle. Returns `None` when something does not fit.
pub fn pack_skyline(sizes: &[(u32, u32)], side: u32, gutter: u32) -> Option<Vec<PackedRect>> {
    let mut sky = vec![Segment { x: 0, y: 0, width: side }];
    let mut out = Vec::with_capacity(sizes.len());
    for &(w, h) in sizes {
        if w == 0 || h == 0 || w > side || h > side {
            return None;
        }
        let mut best: Option<(u32, u32, usize)> = None;
        for i in 0..sky.len() {
            let x = sky[i].x;
            if x + w > side {
                break;
            }
            let need = (w + gutter).min(side - x);
            let mut covered = 0;
            let mut y = 0;
            let mut k = i;
            while covered < need && k < sky.len() {
                y = y.max(sky[k].y);
                covered += sky[k].width;
                k += 1;
            }
            if covered < need || y + h > side {
                continue;
            }
            if best.is_none_or(|(by, bx, _)| (y, x) < (by, bx)) {
                best = Some((y, x, i));
            }
        }
        let (y, x, i) = best?;
        let need = (w + gutter).min(side - x);
        let top = (y + h + gutter).min(side);
        // Replace the covered span [x, x + need) with one segment.
        let mut rest = Vec::new();
        let end = x + need;
        for s in sky.drain(i..) {
            let s_end = s.x + s.width;
            if s_end <= end {
                continue;
            }
            if s.x < end {
                rest.push(Segment { x: end, y: s.y, width: s_end - end });
            } else {
                rest.push(s);
            }
        }
        sky.push(Segment { x, y: top, width: need });
        sky.extend(rest);
        let mut merged: Vec<Segment> = Vec::with_capacity(sky.len());
        for s in sky.drain(..) {
            match merged.last_mut() {
                Some(last) if last.y == s.y => last.width += s.width,
                _ => merged.push(s),
            }
        }
        sky = merged;
        out.push(PackedRect { x, y, width: w, height: h });
    }
    Some(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub face: FaceId,
    /// Source view, or `None` for a placeholder.
    pub image: Option<ImageId>,
    pub score: f64,
    pub rect: PackedRect,
    /// Chart-frame coordinates of the rectangle's corner.
    pub frame_min: [f64; 2],
    pub texel_density: f64,
    /// Per-corner texture coordinates, atlas rows running downward.
    pub uvs: Vec<[f64; 2]>,
}

impl Chart {
    pub fn is_placeholder(&self) -> bool {
        self.image.is_none()
    }

    /// Chart-frame coordinates of a continuous atlas position.
    pub fn atlas_to_frame(&self, px: f64, py: f64) -> Point2<f64> {
        Point2::new(
            self.frame_min[0] + (px - self.rect.x as f64) / self.texel_density,
            self.frame_min[1] + (py - self.rect.y as f64) / self.texel_density,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Atlas {
    pub side: u32,
    pub texel_density: f64,
    pub charts: BTreeMap<FaceId, Chart>,
    /// Faces no view scored positively, filled with a flat color.
    pub placeholders: Vec<FaceId>,
    #[serde(skip)]
    pub raster: RgbaImage,
}

impl Atlas {
    pub fn to_png(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.raster.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
        out.into_inner()
    }
}

struct Plan {
    face: FaceId,
    source: Option<(ImageId, f64, Matrix3<f64>)>,
    frame: Option<ChartFrame>,
    min: [f64; 2],
    extent: [f64; 2],
}

fn chart_size(plan: &Plan, density: f64) -> (u32, u32) {
    if plan.source.is_none() {
        return (PLACEHOLDER_SIZE, PLACEHOLDER_SIZE);
    }
    let px = |e: f64| ((e * density).ceil() as u32).max(2);
    (px(plan.extent[0]), px(plan.extent[1]))
}

fn pack_smallest(sizes: &[(u32, u32)]) -> Option<(u32, Vec<PackedRect>)> {
    let area: u64 = sizes.iter().map(|(w, h)| (*w + GUTTER) as u64 * (*h + GUTTER) as u64).sum();
    let longest = sizes.iter().map(|(w, h)| *w.max(h)).max().unwrap_or(1);
    let mut side = ((area as f64).sqrt().ceil() as u32).max(longest).max(1).next_power_of_two();
    while side <= MAX_ATLAS_SIDE {
        if let Some(rects) = pack_skyline(sizes, side, GUTTER) {
            return Some((side, rects));
        }
        side *= 2;
    }
    None
}

/// Textures every face from its best-scoring view and writes per-corner
/// texture coordinates into the mesh. Charts are packed in face-id order.
pub fn build_atlas(
    mesh: &mut Mesh,
    images: &BTreeMap<ImageId, RgbaImage>,
    cameras: &BTreeMap<ImageId, Camera>,
    options: &AtlasOptions,
) -> Result<Atlas> {
    if !cameras.values().any(|c| c.is_full()) {
        return Err(TextureError::NotReady("no calibrated camera".into()));
    }
    if !(options.texel_density > 0.0) || !options.texel_density.is_finite() {
        return Err(TextureError::Degenerate(format!("texel density {}", options.texel_density)));
    }
    let mut plans = Vec::new();
    for face in mesh.face_ids().collect::<Vec<_>>() {
        let mut best: Option<(ImageId, f64)> = None;
        for (id, cam) in cameras.iter().filter(|(id, c)| c.is_full() && images.contains_key(id)) {
            let s = score_view(cam, *id, face, mesh);
            if s.score > 0.0 && best.is_none_or(|(_, b)| s.score > b) {
                best = Some((*id, s.score));
            }
        }
        let frame = ChartFrame::of_face(mesh, face).ok();
        let source = match (best, frame) {
            (Some((id, score)), Some(fr)) if super::check_planar(mesh, face).is_ok() => {
                homography_of_frame(&cameras[&id], &fr).ok().map(|h| (id, score, h))
            }
            _ => None,
        };
        let (mut min, mut extent) = ([0.0; 2], [0.0; 2]);
        if let Some(fr) = &frame {
            let corners = face_chart_corners(mesh, face, fr);
            let lo = |k: usize| corners.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
            let hi = |k: usize| corners.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
            min = [lo(0), lo(1)];
            extent = [hi(0) - lo(0), hi(1) - lo(1)];
        }
        plans.push(Plan { face, source, frame, min, extent });
    }

    let mut density = options.texel_density;
    let (side, rects) = loop {
        let sizes: Vec<(u32, u32)> = plans.iter().map(|p| chart_size(p, density)).collect();
        if let Some(done) = pack_smallest(&sizes) {
            break done;
        }
        density *= 0.75;
        if density < 1e-6 {
            return Err(TextureError::Degenerate("charts do not fit the maximum atlas".into()));
        }
    };

    let mut raster = RgbaImage::new(side, side);
    let mut charts = BTreeMap::new();
    let mut placeholders = Vec::new();
    for (plan, rect) in plans.iter().zip(rects) {
        let corners = plan.frame.map(|fr| face_chart_corners(mesh, plan.face, &fr)).unwrap_or_default();
        let (image, score, texel_density, frame_min) = match &plan.source {
            Some((id, score, h)) => {
                let s = Matrix3::new(1.0 / density, 0.0, plan.min[0], 0.0, 1.0 / density, plan.min[1], 0.0, 0.0, 1.0);
                let chart = extract_face_texture(&images[id], &(h * s), rect.width, rect.height);
                image::imageops::replace(&mut raster, &chart, rect.x as i64, rect.y as i64);
                (Some(*id), *score, density, plan.min)
            }
            None => {
                for j in 0..rect.height {
                    for i in 0..rect.width {
                        raster.put_pixel(rect.x + i, rect.y + j, Rgba(PLACEHOLDER_COLOR));
                    }
                }
                placeholders.push(plan.face);
                // Every corner maps into the flat square.
                let d = if plan.extent[0].max(plan.extent[1]) > 0.0 { PLACEHOLDER_SIZE as f64 / plan.extent[0].max(plan.extent[1]) } else { 1.0 };
                (None, 0.0, d, plan.min)
            }
        };
        let uvs: Vec<[f64; 2]> = corners
            .iter()
            .map(|c| {
                let px = rect.x as f64 + (c.x - frame_min[0]) * texel_density;
                let py = rect.y as f64 + (c.y - frame_min[1]) * texel_density;
                [px / side as f64, py / side as f64]
            })
            .collect();
        if uvs.len() == mesh.face_vertices(plan.face).len() {
            let _ = mesh.set_face_uvs(plan.face, &uvs);
        }
        charts.insert(plan.face, Chart { face: plan.face, image, score, rect, frame_min, texel_density, uvs });
    }
    Ok(Atlas { side, texel_density: density, charts, placeholders, raster })
}
