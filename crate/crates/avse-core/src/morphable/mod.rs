//! Linear deformable face model: shape fitting, frontal depth rendering,
//! warping, lip cropping, and synthetic model/sequence generation.

mod features;
mod image;
mod render;
mod toy;

pub use features::{lip_features, lip_geometry, VisualFeatures};
pub use image::{crop_lip_region, read_pgm, write_pgm, Image, LipCrop, CROP_SIZE};
pub use render::{render_frontal_depth, warp_to_frontal, DepthGrid, DepthMap};
pub use toy::{generate_toy_model, synthesize_sequence, upper_lip_landmark, SequenceOptions, SyntheticSequence};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::registration::LandmarkSet;

/// Linear deformation model: vertices = mean + basis * s.
#[derive(Debug, Clone)]
pub struct DeformableModel {
    /// Vertex coordinates, length 3N (x0,y0,z0, x1,...).
    pub mean: DVector<f64>,
    /// 3N x K deformation basis with unit-norm columns.
    pub basis: DMatrix<f64>,
    /// K eigenvalues, sorted descending.
    pub eigenvalues: Vec<f64>,
    /// J vertex indices of the semantic landmarks.
    pub landmark_index: Vec<usize>,
    /// Mesh topology.
    pub triangles: Vec<[usize; 3]>,
}

/// Low-dimensional shape embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoefficients {
    pub s: DVector<f64>,
}

impl DeformableModel {
    pub fn num_vertices(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn num_coeffs(&self) -> usize {
        self.basis.ncols()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmark_index.len()
    }

    pub fn vertex(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.mean[3 * i], self.mean[3 * i + 1], self.mean[3 * i + 2])
    }

    /// Landmarks of the mean shape.
    pub fn mean_landmarks(&self) -> LandmarkSet {
        self.landmarks_of(self.mean.as_slice())
    }

    /// Landmarks extracted from a reconstructed vertex array.
    pub fn landmarks_of(&self, vertices: &[f64]) -> LandmarkSet {
        LandmarkSet {
            points: self
                .landmark_index
                .iter()
                .map(|&i| Vector3::new(vertices[3 * i], vertices[3 * i + 1], vertices[3 * i + 2]))
                .collect(),
        }
    }

    /// Index range of the lip landmarks: the trailing 30% (at least 4).
    pub fn lip_landmark_range(&self) -> std::ops::Range<usize> {
        lip_landmark_range(self.num_landmarks())
    }
}

/// Trailing lip block of a J-landmark layout (3J/10 entries, at least 4).
pub fn lip_landmark_range(j: usize) -> std::ops::Range<usize> {
    let count = (3 * j / 10).max(4).min(j);
    j - count..j
}

/// Within the lip block, the trailing 40% is the inner ring.
pub fn inner_lip_range(j: usize) -> std::ops::Range<usize> {
    let lips = lip_landmark_range(j);
    let count = (2 * lips.len() / 5).max(3);
    lips.end - count..lips.end
}

/// Regularized linear least-squares fit of shape coefficients to
/// frontalized landmarks.
///
/// Minimizes sum_j ||Y_j - (mu_j + B_j s)||^2 + lambda_reg * sum_k s_k^2/lambda_k.
pub fn fit_shape(
    frontalized: &LandmarkSet,
    model: &DeformableModel,
    lambda_reg: f64,
) -> Result<ShapeCoefficients> {
    let j = model.num_landmarks();
    if frontalized.len() != j {
        return Err(Error::DimensionMismatch(format!(
            "{} landmarks vs model J={}",
            frontalized.len(),
            j
        )));
    }
    let k = model.num_coeffs();
    let mut a = DMatrix::<f64>::zeros(3 * j, k);
    let mut b = DVector::<f64>::zeros(3 * j);
    for (row, &vi) in model.landmark_index.iter().enumerate() {
        for d in 0..3 {
            let r = 3 * row + d;
            let src = 3 * vi + d;
            b[r] = frontalized.points[row][d] - model.mean[src];
            for c in 0..k {
                a[(r, c)] = model.basis[(src, c)];
            }
        }
    }
    let mut ata = a.transpose() * &a;
    if lambda_reg > 0.0 {
        for c in 0..k {
            ata[(c, c)] += lambda_reg / model.eigenvalues[c];
        }
    }
    let atb = a.transpose() * b;
    let chol = ata
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("landmark rows do not determine s".into()))?;
    Ok(ShapeCoefficients { s: chol.solve(&atb) })
}

/// mean + basis * s, as a flat 3N vertex array.
pub fn reconstruct_vertices(model: &DeformableModel, coeffs: &ShapeCoefficients) -> Result<Vec<f64>> {
    if coeffs.s.len() != model.num_coeffs() {
        return Err(Error::DimensionMismatch(format!(
            "{} coeffs vs K={}",
            coeffs.s.len(),
            model.num_coeffs()
        )));
    }
    let v = &model.mean + &model.basis * &coeffs.s;
    Ok(v.as_slice().to_vec())
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "J")]
    j: usize,
    mean: Vec<f64>,
    /// 3N rows of K entries each.
    basis: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    landmark_index: Vec<usize>,
    triangles: Vec<[usize; 3]>,
}

pub fn write_model(path: &Path, model: &DeformableModel) -> Result<()> {
    let n = model.num_vertices();
    let k = model.num_coeffs();
    let mj = ModelJson {
        n,
        k,
        j: model.num_landmarks(),
        mean: model.mean.as_slice().to_vec(),
        basis: (0..3 * n)
            .map(|r| (0..k).map(|c| model.basis[(r, c)]).collect())
            .collect(),
        eigenvalues: model.eigenvalues.clone(),
        landmark_index: model.landmark_index.clone(),
        triangles: model.triangles.clone(),
    };
    std::fs::write(path, serde_json::to_vec(&mj)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<DeformableModel> {
    let mj: ModelJson = serde_json::from_slice(&std::fs::read(path)?)?;
    if mj.mean.len() != 3 * mj.n || mj.basis.len() != 3 * mj.n {
        return Err(Error::BadFile("mean/basis length != 3N".into()));
    }
    if mj.basis.iter().any(|r| r.len() != mj.k) || mj.eigenvalues.len() != mj.k {
        return Err(Error::BadFile("basis row length or eigenvalues != K".into()));
    }
    if mj.landmark_index.len() != mj.j {
        return Err(Error::BadFile("landmark_index length != J".into()));
    }
    if mj.landmark_index.iter().any(|&i| i >= mj.n) {
        return Err(Error::BadFile("landmark index out of range".into()));
    }
    if mj.triangles.iter().any(|t| t.iter().any(|&i| i >= mj.n)) {
        return Err(Error::BadFile("triangle index out of range".into()));
    }
    let mut eig_sorted = mj.eigenvalues.clone();
    eig_sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if eig_sorted != mj.eigenvalues || mj.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::BadFile("eigenvalues must be positive, descending".into()));
    }
    let basis = DMatrix::from_fn(3 * mj.n, mj.k, |r, c| mj.basis[r][c]);
    Ok(DeformableModel {
        mean: DVector::from_vec(mj.mean),
        basis,
        eigenvalues: mj.eigenvalues,
        landmark_index: mj.landmark_index,
        triangles: mj.triangles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn toy() -> DeformableModel {
        generate_toy_model(11, 400, 8, 68).unwrap()
    }

    #[test]
    fn fit_mean_shape_gives_zero_coeffs() {
        let m = toy();
        let s = fit_shape(&m.mean_landmarks(), &m, 0.1).unwrap();
        assert!(s.s.norm() < 1e-8, "||s|| = {}", s.s.norm());
    }

    #[test]
    fn fit_recovers_known_coeffs() {
        let m = toy();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let s_true = DVector::from_fn(m.num_coeffs(), |_, _| rng.random::<f64>() - 0.5);
        let verts = reconstruct_vertices(&m, &ShapeCoefficients { s: s_true.clone() }).unwrap();
        let lms = m.landmarks_of(&verts);
        let s_fit = fit_shape(&lms, &m, 0.0).unwrap();
        assert!((s_fit.s - &s_true).norm() < 1e-8);
    }

    #[test]
    fn regularization_monotonicity() {
        let m = toy();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let s_true = DVector::from_fn(m.num_coeffs(), |_, _| rng.random::<f64>() - 0.5);
        let verts = reconstruct_vertices(&m, &ShapeCoefficients { s: s_true }).unwrap();
        let lms = m.landmarks_of(&verts);

        let prior_cost = |s: &ShapeCoefficients| {
            s.s.iter()
                .zip(&m.eigenvalues)
                .map(|(v, l)| v * v / l)
                .sum::<f64>()
        };
        let data_cost = |s: &ShapeCoefficients| {
            let v = reconstruct_vertices(&m, s).unwrap();
            m.landmarks_of(&v)
                .points
                .iter()
                .zip(&lms.points)
                .map(|(a, b)| (a - b).norm_squared())
                .sum::<f64>()
        };
        let small = fit_shape(&lms, &m, 1e-6).unwrap();
        let large = fit_shape(&lms, &m, 1e2).unwrap();
        assert!(prior_cost(&large) < prior_cost(&small));
        assert!(data_cost(&large) > data_cost(&small));
    }

    #[test]
    fn reconstruct_zero_is_mean_and_linear() {
        let m = toy();
        let k = m.num_coeffs();
        let zero = ShapeCoefficients { s: DVector::zeros(k) };
        assert_eq!(reconstruct_vertices(&m, &zero).unwrap(), m.mean.as_slice().to_vec());

        let e1 = ShapeCoefficients {
            s: DVector::from_fn(k, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        };
        let v = reconstruct_vertices(&m, &e1).unwrap();
        for r in 0..3 * m.num_vertices() {
            assert_relative_eq!(v[r], m.mean[r] + m.basis[(r, 0)], epsilon = 1e-12);
        }

        // f(a s1 + b s2) = a f(s1) + b f(s2) - (a+b-1) mean
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let s1 = DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5);
        let s2 = DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5);
        let (a, b) = (0.7, -1.3);
        let lhs = reconstruct_vertices(
            &m,
            &ShapeCoefficients { s: a * &s1 + b * &s2 },
        )
        .unwrap();
        let f1 = reconstruct_vertices(&m, &ShapeCoefficients { s: s1 }).unwrap();
        let f2 = reconstruct_vertices(&m, &ShapeCoefficients { s: s2 }).unwrap();
        for r in 0..lhs.len() {
            let rhs = a * f1[r] + b * f2[r] - (a + b - 1.0) * m.mean[r];
            assert_relative_eq!(lhs[r], rhs, epsilon = 1e-9);
        }
    }

    #[test]
    fn model_json_roundtrip_and_validation() {
        let m = generate_toy_model(3, 100, 4, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        write_model(&path, &m).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back.num_vertices(), m.num_vertices());
        assert_eq!(back.landmark_index, m.landmark_index);
        assert_relative_eq!((back.mean - &m.mean).norm(), 0.0, epsilon = 1e-12);

        // corrupt: landmark index out of range
        let mut v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        v["landmark_index"][0] = serde_json::json!(10_000);
        std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(read_model(&path), Err(Error::BadFile(_))));
    }

    #[test]
    fn lip_ranges() {
        assert_eq!(lip_landmark_range(68), 48..68);
        assert_eq!(inner_lip_range(68), 60..68);
        assert_eq!(lip_landmark_range(10).len(), 4);
    }
}
