#![allow(dead_code)]
//! Independent oracles used to cross-check closed-form solutions.

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use avse_core::registration::{LandmarkSet, Pose};

/// Weighted Umeyama similarity alignment via SVD of the weighted
/// cross-covariance. Returns the pose minimizing
/// sum_j w_j ||Z_j - sigma R X_j - t||^2 (X = source, Z = target).
pub fn umeyama_weighted(source: &LandmarkSet, target: &LandmarkSet, weights: &[f64]) -> Pose {
    let j = source.len();
    assert_eq!(target.len(), j);
    assert_eq!(weights.len(), j);
    let wsum: f64 = weights.iter().sum();
    let mut xbar = Vector3::zeros();
    let mut zbar = Vector3::zeros();
    for i in 0..j {
        xbar += weights[i] * source.points[i];
        zbar += weights[i] * target.points[i];
    }
    xbar /= wsum;
    zbar /= wsum;

    let mut cov = Matrix3::<f64>::zeros();
    let mut xvar = 0.0;
    for i in 0..j {
        let x = source.points[i] - xbar;
        let z = target.points[i] - zbar;
        cov += weights[i] * z * x.transpose();
        xvar += weights[i] * x.norm_squared();
    }
    cov /= wsum;
    xvar /= wsum;

    let svd = nalgebra::SVD::new(cov, true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut s = Matrix3::<f64>::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let sigma = (svd.singular_values[0] * s[(0, 0)]
        + svd.singular_values[1] * s[(1, 1)]
        + svd.singular_values[2] * s[(2, 2)])
        / xvar;
    let t = zbar - sigma * r * xbar;
    Pose::new(sigma, UnitQuaternion::from_matrix(&r), t)
}

/// Weighted least-squares objective of a similarity transform.
pub fn similarity_objective(
    source: &LandmarkSet,
    target: &LandmarkSet,
    weights: &[f64],
    pose: &Pose,
) -> f64 {
    source
        .points
        .iter()
        .zip(&target.points)
        .zip(weights)
        .map(|((x, z), w)| w * (z - pose.transform_point(x)).norm_squared())
        .sum()
}

/// Numerical minimizer over unit quaternions (and scale/translation in
/// closed form per step): projected gradient descent on the rotation with
/// random restarts. Deliberately slow and independent of Horn's method.
pub fn numerical_similarity(
    source: &LandmarkSet,
    target: &LandmarkSet,
    weights: &[f64],
    rng: &mut ChaCha8Rng,
) -> Pose {
    let mut best: Option<(f64, Pose)> = None;
    for restart in 0..4 {
        let mut q = if restart == 0 {
            UnitQuaternion::identity()
        } else {
            random_rotation(rng)
        };
        let mut step = 0.1;
        let mut obj = objective_for_rotation(source, target, weights, &q).0;
        for _ in 0..4000 {
            let grad = rotation_gradient(source, target, weights, &q);
            let cand = UnitQuaternion::from_scaled_axis(-step * grad) * q;
            let cand_obj = objective_for_rotation(source, target, weights, &cand).0;
            if cand_obj < obj {
                q = cand;
                obj = cand_obj;
                step *= 1.2;
            } else {
                step *= 0.5;
                if step < 1e-14 {
                    break;
                }
            }
        }
        let (final_obj, pose) = objective_for_rotation(source, target, weights, &q);
        if best.as_ref().is_none_or(|(b, _)| final_obj < *b) {
            best = Some((final_obj, pose));
        }
    }
    best.unwrap().1
}

/// For a fixed rotation, the optimal scale and translation are closed-form;
/// returns (objective, full pose).
fn objective_for_rotation(
    source: &LandmarkSet,
    target: &LandmarkSet,
    weights: &[f64],
    q: &UnitQuaternion<f64>,
) -> (f64, Pose) {
    let j = source.len();
    let wsum: f64 = weights.iter().sum();
    let mut xbar = Vector3::zeros();
    let mut zbar = Vector3::zeros();
    for i in 0..j {
        xbar += weights[i] * source.points[i];
        zbar += weights[i] * target.points[i];
    }
    xbar /= wsum;
    zbar /= wsum;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..j {
        let x = q * (source.points[i] - xbar);
        let z = target.points[i] - zbar;
        num += weights[i] * z.dot(&x);
        den += weights[i] * x.norm_squared();
    }
    let sigma = if den > 0.0 { (num / den).max(1e-12) } else { 1.0 };
    let t = zbar - sigma * (q * xbar);
    let pose = Pose::new(sigma, *q, t);
    (similarity_objective(source, target, weights, &pose), pose)
}

/// Finite-difference gradient of the reduced objective on the rotation
/// manifold (3-dim tangent space).
fn rotation_gradient(
    source: &LandmarkSet,
    target: &LandmarkSet,
    weights: &[f64],
    q: &UnitQuaternion<f64>,
) -> Vector3<f64> {
    let h = 1e-6;
    let mut g = Vector3::zeros();
    for k in 0..3 {
        let mut axis = Vector3::zeros();
        axis[k] = h;
        let qp = UnitQuaternion::from_scaled_axis(axis) * q;
        let qm = UnitQuaternion::from_scaled_axis(-axis) * q;
        let op = objective_for_rotation(source, target, weights, &qp).0;
        let om = objective_for_rotation(source, target, weights, &qm).0;
        g[k] = (op - om) / (2.0 * h);
    }
    g
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let axis = Vector3::new(
        rng.random::<f64>() * 2.0 - 1.0,
        rng.random::<f64>() * 2.0 - 1.0,
        rng.random::<f64>() * 2.0 - 1.0,
    );
    let angle = rng.random::<f64>() * std::f64::consts::PI;
    UnitQuaternion::from_scaled_axis(axis.normalize() * angle)
}

pub fn random_cloud(rng: &mut ChaCha8Rng, j: usize) -> LandmarkSet {
    let pts: Vec<Vector3<f64>> = (0..j)
        .map(|_| {
            Vector3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            )
        })
        .collect();
    LandmarkSet::new(pts).unwrap()
}

/// Angle between two rotations, degrees.
pub fn rotation_error_deg(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    (a.inverse() * b).angle().to_degrees()
}

#[allow(dead_code)]
pub fn as_dmatrix(points: &LandmarkSet) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(points.len(), 3);
    for (i, p) in points.points.iter().enumerate() {
        m[(i, 0)] = p.x;
        m[(i, 1)] = p.y;
        m[(i, 2)] = p.z;
    }
    m
}
