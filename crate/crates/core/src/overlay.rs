//! Estimated boxes drawn over a depth image.

use nalgebra::Vector2;

use crate::error::Result;
use crate::geometry::box_vertices;
use crate::render::{project_point, rasterize_box};
use crate::types::{BoxDims, CameraIntrinsics, DepthImage, Pose};

/// 8-bit RGB image, row major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    fn blend(&mut self, u: usize, v: usize, c: [u8; 3], alpha: f64) {
        let i = 3 * (v * self.width + u);
        for (d, c) in self.data[i..i + 3].iter_mut().zip(c) {
            let p = *d as f64;
            *d = (p + alpha * (c as f64 - p)).round() as u8;
        }
    }

    fn line(&mut self, a: Vector2<f64>, b: Vector2<f64>, c: [u8; 3]) {
        let steps = ((b - a).norm() * 2.0).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let p = a + (b - a) * (i as f64 / steps as f64);
            let (u, v) = (p.x.round(), p.y.round());
            if u >= 0.0 && v >= 0.0 && (u as usize) < self.width && (v as usize) < self.height {
                self.blend(u as usize, v as usize, c, 1.0);
            }
        }
    }
}

const PALETTE: [[u8; 3]; 6] = [
    [230, 60, 50],
    [40, 170, 80],
    [50, 110, 230],
    [240, 180, 30],
    [170, 60, 200],
    [30, 190, 200],
];

/// Depth as gray (near is bright, no return is black) with each box's
/// rendered silhouette tinted and its edges outlined.
pub fn render_overlay(
    depth: &DepthImage,
    camera: &CameraIntrinsics,
    boxes: &[(Pose, BoxDims)],
) -> Result<RgbImage> {
    let valid = depth.data.iter().copied().filter(|z| *z > 0.0);
    let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), z| {
        (l.min(z), h.max(z))
    });
    let range = (hi - lo).max(1e-9);
    let mut img = RgbImage {
        width: depth.width,
        height: depth.height,
        data: Vec::with_capacity(3 * depth.data.len()),
    };
    for z in &depth.data {
        let g = if *z > 0.0 {
            (235.0 - 180.0 * (z - lo) / range).round() as u8
        } else {
            0
        };
        img.data.extend([g, g, g]);
    }
    for (i, (pose, dims)) in boxes.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (u, v, _) in rasterize_box(dims, pose, camera)?.covered() {
            img.blend(u, v, color, 0.35);
        }
        let verts = box_vertices(pose, dims);
        for a in 0..8usize {
            for bit in [1usize, 2, 4] {
                let b = a | bit;
                if b == a {
                    continue;
                }
                if let (Ok(pa), Ok(pb)) = (
                    project_point(camera, &verts[a]),
                    project_point(camera, &verts[b]),
                ) {
                    img.line(pa, pb, color);
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    #[test]
    fn tints_box_and_keeps_background() {
        let k = CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap();
        let mut depth = DepthImage::zeros(64, 48);
        depth.data.iter_mut().for_each(|z| *z = 2.0);
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let dims = BoxDims::new(0.1, 0.1, 0.1).unwrap();
        let img = render_overlay(&depth, &k, &[(pose, dims)]).unwrap();
        assert_eq!(img.data.len(), 64 * 48 * 3);
        let px = |u: usize, v: usize| &img.data[3 * (v * 64 + u)..3 * (v * 64 + u) + 3];
        assert_eq!(px(0, 0), &[235, 235, 235]);
        let c = px(31, 23);
        assert!(c[0] > c[1] && c[0] > c[2]);
    }
}
