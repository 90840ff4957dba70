//! Frontal depth-map rasterization and inverse warping.
//!
//! Camera model is scaled orthographic: model (x, y) maps linearly onto the
//! pixel grid, depth is the model z coordinate, larger z is closer to the
//! camera.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::Pose;

use super::image::Image;

/// Pixel grid specification: model x = origin.0 + u * scale,
/// model y = origin.1 + v * scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthGrid {
    pub width: usize,
    pub height: usize,
    pub origin: (f64, f64),
    pub scale: f64,
}

impl DepthGrid {
    pub fn model_to_pixel(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new((p.x - self.origin.0) / self.scale, (p.y - self.origin.1) / self.scale)
    }

    pub fn pixel_to_model_xy(&self, u: f64, v: f64) -> (f64, f64) {
        (self.origin.0 + u * self.scale, self.origin.1 + v * self.scale)
    }

    /// Grid covering the xy bounding box of the vertices with a margin.
    pub fn covering(vertices: &[f64], width: usize, height: usize, margin: f64) -> Self {
        let mut min = (f64::INFINITY, f64::INFINITY);
        let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in vertices.chunks_exact(3) {
            min.0 = min.0.min(v[0]);
            max.0 = max.0.max(v[0]);
            min.1 = min.1.min(v[1]);
            max.1 = max.1.max(v[1]);
        }
        let span_x = (max.0 - min.0) * (1.0 + 2.0 * margin);
        let span_y = (max.1 - min.1) * (1.0 + 2.0 * margin);
        let scale = (span_x / (width - 1) as f64).max(span_y / (height - 1) as f64);
        let cx = 0.5 * (min.0 + max.0);
        let cy = 0.5 * (min.1 + max.1);
        Self {
            width,
            height,
            origin: (cx - 0.5 * (width - 1) as f64 * scale, cy - 0.5 * (height - 1) as f64 * scale),
            scale,
        }
    }
}

/// Per-pixel depth with an explicit coverage mask.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub grid: DepthGrid,
    /// Row-major; NaN-free. `mask[i]` says whether `depth[i]` is present.
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.grid.width + u;
        if self.mask[i] {
            Some(self.depth[i])
        } else {
            None
        }
    }

    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Z-buffer rasterization of the mesh onto the grid: each covered pixel
/// holds the maximum barycentric-interpolated z among covering triangles.
pub fn render_frontal_depth(
    vertices: &[f64],
    triangles: &[[usize; 3]],
    grid: &DepthGrid,
) -> Result<DepthMap> {
    if triangles.is_empty() || vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut depth = vec![f64::NEG_INFINITY; grid.width * grid.height];
    let mut mask = vec![false; grid.width * grid.height];
    let vert = |i: usize| Vector3::new(vertices[3 * i], vertices[3 * i + 1], vertices[3 * i + 2]);

    for tri in triangles {
        let p0 = vert(tri[0]);
        let p1 = vert(tri[1]);
        let p2 = vert(tri[2]);
        let a = grid.model_to_pixel(&p0);
        let b = grid.model_to_pixel(&p1);
        let c = grid.model_to_pixel(&p2);

        let det = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
        if det.abs() < 1e-14 {
            continue; // degenerate in projection
        }
        let min_u = a.x.min(b.x).min(c.x).floor().max(0.0) as usize;
        let max_u = (a.x.max(b.x).max(c.x).ceil() as usize).min(grid.width.saturating_sub(1));
        let min_v = a.y.min(b.y).min(c.y).floor().max(0.0) as usize;
        let max_v = (a.y.max(b.y).max(c.y).ceil() as usize).min(grid.height.saturating_sub(1));

        for v in min_v..=max_v {
            for u in min_u..=max_u {
                let px = u as f64;
                let py = v as f64;
                let w1 = ((px - a.x) * (c.y - a.y) - (c.x - a.x) * (py - a.y)) / det;
                let w2 = ((b.x - a.x) * (py - a.y) - (px - a.x) * (b.y - a.y)) / det;
                let w0 = 1.0 - w1 - w2;
                let eps = -1e-12;
                if w0 >= eps && w1 >= eps && w2 >= eps {
                    let z = w0 * p0.z + w1 * p1.z + w2 * p2.z;
                    let i = v * grid.width + u;
                    if z > depth[i] {
                        depth[i] = z;
                        mask[i] = true;
                    }
                }
            }
        }
    }
    for (d, &m) in depth.iter_mut().zip(&mask) {
        if !m {
            *d = 0.0;
        }
    }
    Ok(DepthMap { grid: *grid, depth, mask })
}

/// Inverse-warp the input image onto the frontal grid.
///
/// For each covered frontal pixel: lift to the 3D point (x, y, depth), map
/// back into the input-face frame with the inverse pose, project with the
/// same camera and bilinear-sample the input. The input image is assumed to
/// live on the same grid as `depth`. Uncovered or out-of-bounds pixels are 0.
pub fn warp_to_frontal(input: &Image, pose: &Pose, depth: &DepthMap) -> Image {
    let grid = &depth.grid;
    let mut out = Image::new(grid.width, grid.height);
    let r_inv = pose.rotation.inverse();
    for v in 0..grid.height {
        for u in 0..grid.width {
            let Some(d) = depth.get(u, v) else { continue };
            let (x, y) = grid.pixel_to_model_xy(u as f64, v as f64);
            let p = Vector3::new(x, y, d);
            // input-face coordinates X = R^T (P - t) / sigma
            let q = (r_inv * (p - pose.translation)) / pose.scale;
            let pix = grid.model_to_pixel(&q);
            // the input image shares the frontal grid geometry; width may differ
            let sx = pix.x * (input.width - 1) as f64 / (grid.width - 1) as f64;
            let sy = pix.y * (input.height - 1) as f64 / (grid.height - 1) as f64;
            out.set(u, v, input.sample_bilinear(sx, sy));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn unit_grid(n: usize) -> DepthGrid {
        DepthGrid {
            width: n,
            height: n,
            origin: (0.0, 0.0),
            scale: 1.0 / (n - 1) as f64,
        }
    }

    fn square(z0: f64, z1: f64, z2: f64, z3: f64) -> (Vec<f64>, Vec<[usize; 3]>) {
        // unit square corners: (0,0) (1,0) (1,1) (0,1)
        let vertices = vec![0.0, 0.0, z0, 1.0, 0.0, z1, 1.0, 1.0, z2, 0.0, 1.0, z3];
        let triangles = vec![[0, 1, 2], [0, 2, 3]];
        (vertices, triangles)
    }

    #[test]
    fn flat_square_renders_constant_depth() {
        let (v, t) = square(5.0, 5.0, 5.0, 5.0);
        let dm = render_frontal_depth(&v, &t, &unit_grid(21)).unwrap();
        for vv in 0..21 {
            for uu in 0..21 {
                assert_eq!(dm.get(uu, vv), Some(5.0), "pixel {uu},{vv}");
            }
        }
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let (mut v, mut t) = square(1.0, 1.0, 1.0, 1.0);
        let (v2, t2) = square(3.0, 3.0, 3.0, 3.0);
        let off = v.len() / 3;
        v.extend(v2);
        t.extend(t2.iter().map(|tri| [tri[0] + off, tri[1] + off, tri[2] + off]));
        let dm = render_frontal_depth(&v, &t, &unit_grid(11)).unwrap();
        assert_eq!(dm.get(5, 5), Some(3.0));
    }

    #[test]
    fn tilted_plane_matches_plane_equation() {
        // z = 2 + 0.5 x - 0.25 y over the unit square
        let z = |x: f64, y: f64| 2.0 + 0.5 * x - 0.25 * y;
        let (v, t) = square(z(0.0, 0.0), z(1.0, 0.0), z(1.0, 1.0), z(0.0, 1.0));
        let grid = unit_grid(41);
        let dm = render_frontal_depth(&v, &t, &grid).unwrap();
        for vv in 0..41 {
            for uu in 0..41 {
                let (x, y) = grid.pixel_to_model_xy(uu as f64, vv as f64);
                let d = dm.get(uu, vv).expect("covered");
                assert!((d - z(x, y)).abs() < 1e-10, "pixel {uu},{vv}: {d}");
            }
        }
    }

    #[test]
    fn empty_mesh_rejected() {
        assert!(matches!(
            render_frontal_depth(&[], &[], &unit_grid(4)),
            Err(Error::EmptyMesh)
        ));
    }

    #[test]
    fn identity_warp_preserves_covered_pixels() {
        let (v, t) = square(1.0, 1.0, 1.0, 1.0);
        let grid = unit_grid(32);
        let dm = render_frontal_depth(&v, &t, &grid).unwrap();
        let mut img = Image::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                img.set(x, y, ((x * 7 + y * 3) % 19) as f64 / 19.0);
            }
        }
        let out = warp_to_frontal(&img, &Pose::identity(), &dm);
        for y in 0..32 {
            for x in 0..32 {
                assert!((out.get(x, y) - img.get(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn in_plane_translation_shifts_checkerboard() {
        // face translated in model space: frontal pixel should sample the
        // input at the pre-translation location
        let (v, t) = square(1.0, 1.0, 1.0, 1.0);
        let grid = unit_grid(64);
        let dm = render_frontal_depth(&v, &t, &grid).unwrap();
        let mut img = Image::new(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                img.set(x, y, (((x / 4) + (y / 4)) % 2) as f64);
            }
        }
        // pose translates by exactly 8 pixels in x
        let dx_model = 8.0 * grid.scale;
        let pose = Pose::new(
            1.0,
            UnitQuaternion::identity(),
            Vector3::new(dx_model, 0.0, 0.0),
        );
        let out = warp_to_frontal(&img, &pose, &dm);
        // interior pixels: out(u,v) = img(u-8, v)
        for y in 8..56 {
            for x in 8..56 {
                assert!(
                    (out.get(x, y) - img.get(x - 8, y)).abs() < 1e-9,
                    "pixel {x},{y}"
                );
            }
        }
    }
}
