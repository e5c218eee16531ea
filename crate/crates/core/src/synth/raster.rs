//! Orthographic depth rasterization.
//!
//! A mesh in camera space is projected with a weak-perspective camera onto a
//! square image covering `[-1, 1]²` (row 0 at the top, y up). The camera looks
//! down the −z axis, so larger z is nearer. Covered pixels hold
//! `clamp(0.5 + 0.5·s·z, 0.05, 1)` of the nearest surface; background is 0.

use crate::error::{invalid, Result};
use crate::mesh::{CameraParams, RegisteredMesh};

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub size: usize,
    /// Row-major, `size × size`.
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn blank(size: usize) -> Self {
        DepthImage {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn covered(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    /// Mean normalized coordinates of covered pixels, if any.
    pub fn silhouette_centroid(&self) -> Option<[f64; 2]> {
        let (mut sx, mut sy, mut n) = (0f64, 0f64, 0usize);
        for r in 0..self.size {
            for c in 0..self.size {
                if self.data[r * self.size + c] > 0.0 {
                    let [x, y] = pixel_center(self.size, r, c);
                    sx += x;
                    sy += y;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| [sx / n as f64, sy / n as f64])
    }
}

fn pixel_center(size: usize, row: usize, col: usize) -> [f64; 2] {
    let step = 2.0 / size as f64;
    [-1.0 + (col as f64 + 0.5) * step, 1.0 - (row as f64 + 0.5) * step]
}

pub struct RasterOutput {
    pub image: DepthImage,
    /// True when no triangle covered any pixel.
    pub empty: bool,
}

pub fn rasterize(mesh: &RegisteredMesh, camera: &CameraParams, size: usize) -> Result<RasterOutput> {
    if size == 0 {
        return Err(invalid!("image size must be positive"));
    }
    let mut image = DepthImage::blank(size);
    let mut zbuf = vec![f64::NEG_INFINITY; size * size];
    let step = 2.0 / size as f64;
    let proj: Vec<[f64; 3]> = mesh
        .vertices()
        .iter()
        .map(|v| {
            let [x, y] = camera.project_point(v);
            [x, y, v.z * camera.s]
        })
        .collect();
    for face in mesh.topology().faces() {
        let [a, b, c] = face.map(|i| proj[i as usize]);
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let xmin = a[0].min(b[0]).min(c[0]);
        let xmax = a[0].max(b[0]).max(c[0]);
        let ymin = a[1].min(b[1]).min(c[1]);
        let ymax = a[1].max(b[1]).max(c[1]);
        let col0 = (((xmin + 1.0) / step) - 0.5).ceil().max(0.0) as usize;
        let col1 = (((xmax + 1.0) / step) - 0.5).floor().min(size as f64 - 1.0);
        let row0 = (((1.0 - ymax) / step) - 0.5).ceil().max(0.0) as usize;
        let row1 = (((1.0 - ymin) / step) - 0.5).floor().min(size as f64 - 1.0);
        if col1 < 0.0 || row1 < 0.0 {
            continue;
        }
        for row in row0..=row1 as usize {
            for col in col0..=col1 as usize {
                let [px, py] = pixel_center(size, row, col);
                let w0 = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / area;
                let w1 = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * a[2] + w1 * b[2] + w2 * c[2];
                let k = row * size + col;
                if z > zbuf[k] {
                    zbuf[k] = z;
                    image.data[k] = (0.5 + 0.5 * z).clamp(0.05, 1.0) as f32;
                }
            }
        }
    }
    let empty = image.covered() == 0;
    Ok(RasterOutput { image, empty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Vec3;
    use crate::synth::template::ArticulatedTemplate;

    #[test]
    fn degenerate_projection_is_blank() {
        let t = ArticulatedTemplate::desk();
        let flat = t.rest_mesh().map_vertices(|_| Vec3::new(0.1, 0.2, 0.3)).unwrap();
        let out = rasterize(&flat, &CameraParams::new(0.9, [0.0, 0.0]).unwrap(), 32).unwrap();
        assert!(out.empty);
        assert!(out.image.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_shifts_silhouette_centroid() {
        let t = ArticulatedTemplate::desk();
        let mesh = t.rest_mesh().translated(&-t.rest_mesh().centroid()).unwrap();
        let size = 64;
        let pixel = 2.0 / size as f64;
        for (s, shift) in [(0.8, [0.1, -0.05]), (0.9, [-0.07, 0.08]), (0.75, [0.0, 0.12])] {
            let cam = CameraParams::new(s, [0.0, 0.0]).unwrap();
            let base = rasterize(&mesh, &cam, size).unwrap().image.silhouette_centroid().unwrap();
            let moved_mesh = mesh.translated(&Vec3::new(shift[0], shift[1], 0.0)).unwrap();
            let moved = rasterize(&moved_mesh, &cam, size).unwrap().image.silhouette_centroid().unwrap();
            for k in 0..2 {
                assert!(((moved[k] - base[k]) - s * shift[k]).abs() <= pixel, "{k}: {moved:?} {base:?}");
            }
        }
    }

    #[test]
    fn rasterization_is_deterministic_and_in_range() {
        let t = ArticulatedTemplate::desk();
        let mesh = t.sample_body(1, 2).unwrap();
        let mesh = mesh.translated(&-mesh.centroid()).unwrap();
        let cam = CameraParams::new(0.85, [0.03, -0.02]).unwrap();
        let a = rasterize(&mesh, &cam, 64).unwrap();
        let b = rasterize(&mesh, &cam, 64).unwrap();
        assert_eq!(a.image, b.image);
        assert!(!a.empty);
        assert!(a.image.data.iter().all(|&v| v == 0.0 || (0.05..=1.0).contains(&v)));
    }
}
