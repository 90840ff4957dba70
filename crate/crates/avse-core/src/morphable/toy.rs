//! Deterministic synthetic head model and talking-head sequence generator.
//!
//! The mesh is a latitude/longitude grid over the front half of an
//! ellipsoid with a marked lip region; the first two basis columns deform
//! the lips (vertical opening, horizontal stretch) so articulation programs
//! have a direct geometric effect.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::registration::{LandmarkSet, Pose};

use super::image::Image;
use super::render::{render_frontal_depth, DepthGrid};
use super::{lip_landmark_range, DeformableModel, ShapeCoefficients};

const ELL_A: f64 = 1.0;
const ELL_B: f64 = 1.3;
const ELL_C: f64 = 1.0;
const UV_SPAN: f64 = 1.1;
const LIP_CENTER: (f64, f64) = (0.0, -0.55);

/// Ellipsoid surface point for grid coordinates (lon, lat) in [-1.1, 1.1].
fn surface(lon: f64, lat: f64) -> Vector3<f64> {
    let u = lon * 0.9;
    let v = lat * 0.7;
    Vector3::new(
        ELL_A * u.sin() * v.cos(),
        ELL_B * (lat * 0.9).sin(),
        ELL_C * u.cos() * v.cos(),
    )
}

fn dist2_uv(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Semantic landmark template in (lon, lat): jaw arc, brows, nose bridge,
/// eye rings, then outer and inner lip rings (lips are the trailing block).
fn landmark_template(j: usize) -> Vec<(f64, f64)> {
    let lips = lip_landmark_range(j).len();
    let rem = j - lips;
    let brows = rem / 5;
    let nose = rem / 6;
    let eyes = rem / 4;
    let jaw = rem - brows - nose - eyes;

    let mut pts = Vec::with_capacity(j);
    for i in 0..jaw {
        let t = if jaw > 1 { i as f64 / (jaw - 1) as f64 } else { 0.5 };
        pts.push((-0.9 + 1.8 * t, -0.35 - 0.55 * (std::f64::consts::PI * t).sin()));
    }
    let half = brows / 2;
    for i in 0..half {
        let t = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.5 };
        pts.push((-0.75 + 0.55 * t, 0.55));
    }
    for i in 0..brows - half {
        let t = if brows - half > 1 { i as f64 / (brows - half - 1) as f64 } else { 0.5 };
        pts.push((0.2 + 0.55 * t, 0.55));
    }
    for i in 0..nose {
        let t = if nose > 1 { i as f64 / (nose - 1) as f64 } else { 0.5 };
        pts.push((0.0, 0.45 - 0.5 * t));
    }
    let eyes_half = eyes / 2;
    for (count, cx) in [(eyes_half, -0.45), (eyes - eyes_half, 0.45)] {
        for i in 0..count {
            let th = 2.0 * std::f64::consts::PI * i as f64 / count.max(1) as f64;
            pts.push((cx + 0.15 * th.cos(), 0.3 + 0.08 * th.sin()));
        }
    }
    let inner = inner_lip_count(lips);
    let outer = lips - inner;
    for i in 0..outer {
        let th = std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / outer as f64;
        pts.push((LIP_CENTER.0 + 0.35 * th.cos(), LIP_CENTER.1 + 0.18 * th.sin()));
    }
    for i in 0..inner {
        let th = std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / inner as f64;
        pts.push((LIP_CENTER.0 + 0.20 * th.cos(), LIP_CENTER.1 + 0.08 * th.sin()));
    }
    pts
}

fn inner_lip_count(lips: usize) -> usize {
    (2 * lips / 5).max(3)
}

/// Index of the outer upper-lip landmark (top of the outer ring).
pub fn upper_lip_landmark(j: usize) -> usize {
    let lips = lip_landmark_range(j);
    let inner = inner_lip_count(lips.len());
    let outer = lips.len() - inner;
    lips.start + (3 * outer) / 4
}

/// Deterministic ellipsoidal toy head with a lip region.
///
/// Basis columns 0 and 1 are lip deformation fields (vertical opening and
/// horizontal stretch); remaining columns are smooth localized bumps.
/// Eigenvalues decay geometrically.
pub fn generate_toy_model(seed: u64, n: usize, k: usize, j: usize) -> Result<DeformableModel> {
    if n < j || j < 4 || k < 1 {
        return Err(Error::DegenerateInput(format!(
            "need N >= J >= 4 and K >= 1, got N={n}, K={k}, J={j}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // lat/lon grid with gw*gh <= n; spare vertices go onto the lip ring
    let gw = ((n as f64).sqrt().floor() as usize).max(2);
    let gh = (n / gw).max(2);
    let grid_count = gw * gh;
    let spare = n - grid_count;

    let mut uv = Vec::with_capacity(n);
    for r in 0..gh {
        for c in 0..gw {
            let lon = -UV_SPAN + 2.0 * UV_SPAN * c as f64 / (gw - 1) as f64;
            let lat = -UV_SPAN + 2.0 * UV_SPAN * r as f64 / (gh - 1) as f64;
            uv.push((lon, lat));
        }
    }
    for i in 0..spare {
        let th = 2.0 * std::f64::consts::PI * i as f64 / spare as f64;
        uv.push((LIP_CENTER.0 + 0.28 * th.cos(), LIP_CENTER.1 + 0.13 * th.sin()));
    }

    let mut mean = DVector::<f64>::zeros(3 * n);
    for (i, &(lon, lat)) in uv.iter().enumerate() {
        let p = surface(lon, lat);
        mean[3 * i] = p.x;
        mean[3 * i + 1] = p.y;
        mean[3 * i + 2] = p.z;
    }

    let mut triangles = Vec::with_capacity(2 * (gw - 1) * (gh - 1));
    for r in 0..gh - 1 {
        for c in 0..gw - 1 {
            let i0 = r * gw + c;
            let i1 = i0 + 1;
            let i2 = i0 + gw;
            let i3 = i2 + 1;
            triangles.push([i0, i1, i3]);
            triangles.push([i0, i3, i2]);
        }
    }

    // landmarks: snap the template to distinct nearest vertices
    let template = landmark_template(j);
    let mut used = vec![false; n];
    let mut landmark_index = Vec::with_capacity(j);
    for target in &template {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (i, &p) in uv.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = dist2_uv(p, *target);
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        let i = best.expect("n >= j guarantees a free vertex");
        used[i] = true;
        landmark_index.push(i);
    }

    // basis columns
    let lip_field = |uvp: (f64, f64)| {
        (-dist2_uv(uvp, LIP_CENTER) / (2.0 * 0.25 * 0.25)).exp()
    };
    let mut basis = DMatrix::<f64>::zeros(3 * n, k);
    for (i, &p) in uv.iter().enumerate() {
        let w = lip_field(p);
        // vertical opening: below the lip line moves down, above moves up
        basis[(3 * i + 1, 0)] = w * ((p.1 - LIP_CENTER.1) / 0.1).tanh();
        if k > 1 {
            // horizontal stretch
            basis[(3 * i, 1)] = w * (p.0 / 0.15).tanh();
        }
    }
    for col in 2..k {
        let center = (
            rng.random::<f64>() * 2.0 * UV_SPAN - UV_SPAN,
            rng.random::<f64>() * 2.0 * UV_SPAN - UV_SPAN,
        );
        let dir = {
            let v = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            v / v.norm()
        };
        for (i, &p) in uv.iter().enumerate() {
            let w = (-dist2_uv(p, center) / (2.0 * 0.3 * 0.3)).exp();
            for d in 0..3 {
                basis[(3 * i + d, col)] = w * dir[d];
            }
        }
    }
    for col in 0..k {
        let norm = basis.column(col).norm();
        if norm > 0.0 {
            let scaled = basis.column(col) / norm;
            basis.set_column(col, &scaled);
        }
    }

    let eigenvalues: Vec<f64> = (0..k).map(|i| 0.1 * 0.7f64.powi(i as i32)).collect();

    Ok(DeformableModel { mean, basis, eigenvalues, landmark_index, triangles })
}

/// Options for the synthetic sequence generator.
#[derive(Debug, Clone)]
pub struct SequenceOptions {
    pub image_size: usize,
    pub noise_sd: f64,
    pub outlier_frac: f64,
    pub render_frames: bool,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        Self { image_size: 96, noise_sd: 0.0, outlier_frac: 0.0, render_frames: true }
    }
}

/// One synthetic talking-head sequence with full ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<Image>,
    /// Posed landmarks with noise/outlier corruption applied.
    pub observed: Vec<LandmarkSet>,
    /// Posed landmarks without corruption.
    pub clean_landmarks: Vec<LandmarkSet>,
    pub gt_poses: Vec<Pose>,
    pub gt_articulation: Vec<Vec<f64>>,
    pub grid: DepthGrid,
}

/// Deform by articulation, pose, rasterize, and emit posed 3D landmarks.
///
/// `articulation[t]` holds coefficients for the leading basis columns;
/// `head_motion[t]` is the per-frame pose mapping the face into the scene.
pub fn synthesize_sequence(
    model: &DeformableModel,
    articulation: &[Vec<f64>],
    head_motion: &[Pose],
    seed: u64,
    opts: &SequenceOptions,
) -> Result<SyntheticSequence> {
    if articulation.len() != head_motion.len() {
        return Err(Error::DimensionMismatch(format!(
            "articulation {} frames vs head_motion {}",
            articulation.len(),
            head_motion.len()
        )));
    }
    let k = model.num_coeffs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // fixed grid with margin so +-20 degree head motion stays in frame
    let grid = DepthGrid::covering(model.mean.as_slice(), opts.image_size, opts.image_size, 0.35);

    let mut frames = Vec::new();
    let mut observed = Vec::new();
    let mut clean_landmarks = Vec::new();
    for (art, pose) in articulation.iter().zip(head_motion) {
        if art.len() > k {
            return Err(Error::DimensionMismatch(format!(
                "articulation width {} > K={k}",
                art.len()
            )));
        }
        let mut s = DVector::<f64>::zeros(k);
        for (i, &v) in art.iter().enumerate() {
            s[i] = v;
        }
        let verts = super::reconstruct_vertices(model, &ShapeCoefficients { s })?;
        let mut posed = vec![0.0; verts.len()];
        for (i, v) in verts.chunks_exact(3).enumerate() {
            let p = pose.transform_point(&Vector3::new(v[0], v[1], v[2]));
            posed[3 * i] = p.x;
            posed[3 * i + 1] = p.y;
            posed[3 * i + 2] = p.z;
        }

        if opts.render_frames {
            let dm = render_frontal_depth(&posed, &model.triangles, &grid)?;
            let mut zmin = f64::INFINITY;
            let mut zmax = f64::NEG_INFINITY;
            for (i, &m) in dm.mask.iter().enumerate() {
                if m {
                    zmin = zmin.min(dm.depth[i]);
                    zmax = zmax.max(dm.depth[i]);
                }
            }
            let span = (zmax - zmin).max(1e-12);
            let mut img = Image::new(grid.width, grid.height);
            for i in 0..dm.depth.len() {
                if dm.mask[i] {
                    img.pixels[i] = 0.25 + 0.75 * (dm.depth[i] - zmin) / span;
                }
            }
            frames.push(img);
        }

        let lms = model.landmarks_of(&posed);
        clean_landmarks.push(lms.clone());

        let mut pts = lms.points.clone();
        if opts.noise_sd > 0.0 || opts.outlier_frac > 0.0 {
            let scale = lms.shape_scale();
            let mut bb_min = Vector3::repeat(f64::INFINITY);
            let mut bb_max = Vector3::repeat(f64::NEG_INFINITY);
            for p in &pts {
                bb_min = bb_min.inf(p);
                bb_max = bb_max.sup(p);
            }
            let center = 0.5 * (bb_min + bb_max);
            let half = 0.75 * (bb_max - bb_min);
            for p in pts.iter_mut() {
                if opts.outlier_frac > 0.0 && rng.random::<f64>() < opts.outlier_frac {
                    *p = center
                        + Vector3::new(
                            (rng.random::<f64>() * 2.0 - 1.0) * half.x,
                            (rng.random::<f64>() * 2.0 - 1.0) * half.y,
                            (rng.random::<f64>() * 2.0 - 1.0) * half.z,
                        );
                } else if opts.noise_sd > 0.0 {
                    use rand_distr::{Distribution, Normal};
                    let normal = Normal::new(0.0, opts.noise_sd * scale).unwrap();
                    *p += Vector3::new(
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                    );
                }
            }
        }
        observed.push(LandmarkSet { points: pts });
    }

    Ok(SyntheticSequence {
        frames,
        observed,
        clean_landmarks,
        gt_poses: head_motion.to_vec(),
        gt_articulation: articulation.to_vec(),
        grid,
    })
}
