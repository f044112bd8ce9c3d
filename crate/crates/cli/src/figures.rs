//! Static PNG figures: BEV maps with boxes, masked-view sectors, feature
//! channel heat maps and mask previews.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use monobev::bevmodel::{BevGridSpec, PredBox};
use monobev::camgeom::{box_azimuth, CameraRig};
use monobev::maskcurriculum::PatchMask;
use monobev::synthscene::{atomic_write, GtBox, Image, SegMasks};

pub const GT_COLOR: [u8; 3] = [40, 220, 60];
pub const PRED_COLOR: [u8; 3] = [235, 50, 50];
const BACKGROUND: [u8; 3] = [24, 24, 28];
const SEG_COLORS: [[u8; 3]; 4] = [[90, 90, 100], [230, 200, 60], [80, 140, 220], [200, 120, 200]];

/// Pixels per BEV cell.
pub const CELL_PX: u32 = 6;

pub fn save_png(img: &RgbImage, path: &Path) -> monobev::Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| monobev::Error::Validation(format!("png encode: {e}")))?;
    atomic_write(path, buf.get_ref())
}

/// Image geometry for a BEV grid: forward (+x) points up, left (+y) points left.
#[derive(Debug, Clone, Copy)]
pub struct BevCanvas {
    pub grid: BevGridSpec,
    pub scale: u32,
}

impl BevCanvas {
    pub fn new(grid: BevGridSpec) -> Self {
        Self { grid, scale: CELL_PX }
    }

    pub fn size(&self) -> (u32, u32) {
        (self.grid.cols as u32 * self.scale, self.grid.rows as u32 * self.scale)
    }

    /// Ego-frame point at the centre of pixel (px, py).
    pub fn pixel_to_ego(&self, px: u32, py: u32) -> [f64; 2] {
        let (w, h) = self.size();
        let m_per_px = self.grid.cell_size() / self.scale as f64;
        let x = (h as f64 / 2.0 - (py as f64 + 0.5)) * m_per_px;
        let y = (w as f64 / 2.0 - (px as f64 + 0.5)) * m_per_px;
        [x, y]
    }

    pub fn ego_to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        let (w, h) = self.size();
        let px_per_m = self.scale as f64 / self.grid.cell_size();
        [w as f64 / 2.0 - p[1] * px_per_m, h as f64 / 2.0 - p[0] * px_per_m]
    }

    pub fn blank(&self) -> RgbImage {
        let (w, h) = self.size();
        RgbImage::from_pixel(w, h, Rgb(BACKGROUND))
    }

    /// Pixel (px, py) covers cell (row, col).
    pub fn cell_of_pixel(&self, px: u32, py: u32) -> (usize, usize) {
        let r = self.grid.rows - 1 - (py / self.scale) as usize;
        let c = self.grid.cols - 1 - (px / self.scale) as usize;
        (r, c)
    }
}

pub fn paint_seg(canvas: &BevCanvas, img: &mut RgbImage, seg: &SegMasks) {
    let (w, h) = canvas.size();
    for py in 0..h {
        for px in 0..w {
            let (r, c) = canvas.cell_of_pixel(px, py);
            for k in (0..seg.classes).rev() {
                if seg.get(k, r, c) {
                    img.put_pixel(px, py, Rgb(SEG_COLORS[k % SEG_COLORS.len()]));
                    break;
                }
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: [u8; 3]) {
    let n = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = (a[0] + (b[0] - a[0]) * t).round();
        let y = (a[1] + (b[1] - a[1]) * t).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// Outline of a box footprint plus a heading tick.
pub fn draw_box(canvas: &BevCanvas, img: &mut RgbImage, center: [f64; 2], size: [f64; 2], yaw: f64, color: [u8; 3]) {
    let (s, c) = yaw.sin_cos();
    let corner = |dl: f64, dw: f64| {
        let p = [center[0] + c * dl - s * dw, center[1] + s * dl + c * dw];
        canvas.ego_to_pixel(p)
    };
    let (hl, hw) = (size[0] / 2.0, size[1] / 2.0);
    let pts = [corner(hl, hw), corner(hl, -hw), corner(-hl, -hw), corner(-hl, hw)];
    for i in 0..4 {
        draw_line(img, pts[i], pts[(i + 1) % 4], color);
    }
    draw_line(img, canvas.ego_to_pixel(center), corner(hl, 0.0), color);
}

/// Cameras whose whole image is masked.
pub fn fully_masked(masks: &[Option<PatchMask>]) -> Vec<bool> {
    masks
        .iter()
        .map(|m| m.as_ref().is_some_and(|m| m.masked_count() == m.rows * m.cols))
        .collect()
}

/// True if `azimuth_deg` lies in the horizontal FOV of some fully masked camera.
pub fn in_masked_sector(rig: &CameraRig<f64>, masked: &[bool], azimuth_deg: f64) -> bool {
    rig.cameras().iter().zip(masked).any(|(cam, &m)| {
        if !m {
            return false;
        }
        let mut d = (azimuth_deg - cam.yaw_deg()) % 360.0;
        if d > 180.0 {
            d -= 360.0;
        } else if d < -180.0 {
            d += 360.0;
        }
        d.abs() <= cam.aperture_deg() / 2.0
    })
}

/// Darkens every pixel whose ego azimuth falls in a masked camera's sector.
/// Returns the shading mask in row-major pixel order.
pub fn shade_masked_sectors(canvas: &BevCanvas, img: &mut RgbImage, rig: &CameraRig<f64>, masked: &[bool]) -> Vec<bool> {
    let (w, h) = canvas.size();
    let mut shaded = vec![false; (w * h) as usize];
    for py in 0..h {
        for px in 0..w {
            let az = box_azimuth(canvas.pixel_to_ego(px, py));
            if in_masked_sector(rig, masked, az) {
                shaded[(py * w + px) as usize] = true;
                let p = img.get_pixel_mut(px, py);
                for ch in p.0.iter_mut() {
                    *ch = (*ch as f32 * 0.45) as u8;
                }
            }
        }
    }
    shaded
}

pub fn bev_overlay(
    canvas: &BevCanvas,
    seg: &SegMasks,
    gts: &[GtBox],
    preds: &[PredBox],
    rig: &CameraRig<f64>,
    masked: &[bool],
) -> RgbImage {
    let mut img = canvas.blank();
    paint_seg(canvas, &mut img, seg);
    shade_masked_sectors(canvas, &mut img, rig, masked);
    for g in gts {
        draw_box(canvas, &mut img, [g.center[0], g.center[1]], [g.size[0], g.size[1]], g.yaw, GT_COLOR);
    }
    for p in preds {
        draw_box(canvas, &mut img, [p.center[0], p.center[1]], [p.size[0], p.size[1]], p.yaw, PRED_COLOR);
    }
    img
}

fn heat(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * (1.5 * t - 0.25).clamp(0.0, 1.0)) as u8;
    let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8;
    let b = (255.0 * (1.25 - 1.5 * t).clamp(0.0, 1.0)) as u8;
    [r, g, b]
}

/// One BEV feature channel, min-max normalized.
pub fn channel_heatmap(canvas: &BevCanvas, values: &[f64]) -> RgbImage {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = canvas.size();
    RgbImage::from_fn(w, h, |px, py| {
        let (r, c) = canvas.cell_of_pixel(px, py);
        Rgb(heat((values[r * canvas.grid.cols + c] - lo) / span))
    })
}

/// Camera images side by side with masked patches blacked out and a grey
/// grid on patch borders. `images` may be empty, giving a flat background.
pub fn mask_preview(masks: &[Option<PatchMask>], images: &[Image], patch: usize, image_hw: (usize, usize)) -> RgbImage {
    let (h, w) = image_hw;
    let gap = 4u32;
    let n = masks.len() as u32;
    let mut out = RgbImage::from_pixel(n * (w as u32 + gap) - gap, h as u32, Rgb([255, 255, 255]));
    for (ci, m) in masks.iter().enumerate() {
        let x0 = ci as u32 * (w as u32 + gap);
        for v in 0..h {
            for u in 0..w {
                let masked = m.as_ref().is_some_and(|m| m.is_masked(v / patch, u / patch));
                let rgb = if masked {
                    [0, 0, 0]
                } else if let Some(img) = images.get(ci) {
                    let p = img.get(v, u);
                    [(p[0] * 255.0) as u8, (p[1] * 255.0) as u8, (p[2] * 255.0) as u8]
                } else {
                    [170, 190, 210]
                };
                let border = v % patch == 0 || u % patch == 0;
                let rgb = if border && !masked { [120, 120, 120] } else { rgb };
                out.put_pixel(x0 + u as u32, v as u32, Rgb(rgb));
            }
        }
    }
    out
}
