//! Robust similarity registration of 3D landmark sets.
//!
//! Residuals between model and transformed observed landmarks are modeled
//! with an isotropic trivariate Student-t distribution. EM alternates weight
//! posteriors, pdf parameters (nu, sigma2) and the rigid parameters; the
//! rotation subproblem is solved in closed form with Horn's quaternion
//! method on weight-centered point pairs.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma};

/// Ordered 3D landmark set; index j is semantic and shared across sets.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<Vector3<f64>>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::DegenerateInput(format!(
                "need at least 4 landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("landmark coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// RMS distance to the centroid; used as the natural length scale.
    pub fn shape_scale(&self) -> f64 {
        let c = self.centroid();
        (self.points.iter().map(|p| (p - c).norm_squared()).sum::<f64>()
            / self.points.len() as f64)
            .sqrt()
    }
}

/// Similarity transform: y = scale * R * x + t.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    scale: f64,
    quat: [f64; 4],
    t: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { scale, rotation: canonicalize(rotation), translation }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose::new(
            1.0 / self.scale,
            inv_rot,
            -(inv_rot * self.translation) / self.scale,
        )
    }

    /// Composition: (a ∘ b)(x) = a(b(x)).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.scale * other.scale,
            self.rotation * other.rotation,
            self.scale * (self.rotation * other.translation) + self.translation,
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        let q = self.rotation.quaternion();
        serde_json::json!({
            "scale": self.scale,
            "quat": [q.w, q.i, q.j, q.k],
            "t": [self.translation.x, self.translation.y, self.translation.z],
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Pose> {
        let pj: PoseJson = serde_json::from_value(v.clone())?;
        let q = Quaternion::new(pj.quat[0], pj.quat[1], pj.quat[2], pj.quat[3]);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::BadFile(format!("quaternion norm {} != 1", q.norm())));
        }
        if pj.scale <= 0.0 {
            return Err(Error::BadFile("non-positive scale".into()));
        }
        Ok(Pose::new(
            pj.scale,
            UnitQuaternion::from_quaternion(q),
            Vector3::new(pj.t[0], pj.t[1], pj.t[2]),
        ))
    }
}

/// Nonnegative scalar part, so serialized poses are reproducible.
fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.quaternion().w < 0.0 {
        UnitQuaternion::from_quaternion(-q.quaternion())
    } else {
        q
    }
}

/// EM configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub nu_init: f64,
    pub nu_bounds: (f64, f64),
    pub sigma2_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-8,
            nu_init: 5.0,
            nu_bounds: (0.1, 100.0),
            sigma2_floor: 1e-12,
        }
    }
}

/// Diagnostics from a converged EM run.
#[derive(Debug, Clone)]
pub struct RobustFit {
    pub weights: Vec<f64>,
    pub nu: f64,
    pub sigma2: f64,
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Residuals e_j = Z_j - sigma R X_j - t for the current pose.
pub fn residuals(observed: &LandmarkSet, model: &LandmarkSet, pose: &Pose) -> Vec<Vector3<f64>> {
    observed
        .points
        .iter()
        .zip(&model.points)
        .map(|(x, z)| z - pose.transform_point(x))
        .collect()
}

/// Weight posteriors and E[log tau] for the Student-t E-step.
///
/// w_j = (nu + 3) / (nu + ||e_j||^2 / sigma2),
/// E[log tau_j] = psi((nu+3)/2) - log((nu + ||e_j||^2/sigma2)/2).
pub fn e_step_weights(
    residuals: &[Vector3<f64>],
    nu: f64,
    sigma2: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(nu > 0.0 && sigma2 > 0.0) {
        return Err(Error::NonFinite(format!("nu={nu}, sigma2={sigma2}")));
    }
    let mut weights = Vec::with_capacity(residuals.len());
    let mut exp_log_tau = Vec::with_capacity(residuals.len());
    let psi_half = digamma((nu + 3.0) / 2.0);
    for e in residuals {
        let d = e.norm_squared() / sigma2;
        if !d.is_finite() {
            return Err(Error::NonFinite("residual".into()));
        }
        weights.push((nu + 3.0) / (nu + d));
        exp_log_tau.push(psi_half - ((nu + d) / 2.0).ln());
    }
    Ok((weights, exp_log_tau))
}

/// Closed-form weighted similarity solve (Horn's quaternion method).
///
/// Minimizes sum_j w_j ||Z_j - sigma R X_j - t||^2.
pub fn solve_weighted_similarity(
    observed: &LandmarkSet,
    model: &LandmarkSet,
    weights: &[f64],
) -> Result<Pose> {
    let j = observed.len();
    if model.len() != j || weights.len() != j {
        return Err(Error::DimensionMismatch(format!(
            "observed {}, model {}, weights {}",
            j,
            model.len(),
            weights.len()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 1e-12) || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::DegenerateInput("weights must be positive".into()));
    }

    let x_bar = observed
        .points
        .iter()
        .zip(weights)
        .map(|(p, w)| *w * p)
        .sum::<Vector3<f64>>()
        / wsum;
    let z_bar = model
        .points
        .iter()
        .zip(weights)
        .map(|(p, w)| *w * p)
        .sum::<Vector3<f64>>()
        / wsum;

    // weighted cross-covariance S = sum_j w_j X~_j Z~_j^T
    let mut s = Matrix3::<f64>::zeros();
    let mut x_sq = 0.0;
    for ((x, z), w) in observed.points.iter().zip(&model.points).zip(weights) {
        let xt = x - x_bar;
        let zt = z - z_bar;
        s += *w * xt * zt.transpose();
        x_sq += *w * xt.norm_squared();
    }
    if x_sq <= 1e-300 {
        return Err(Error::DegenerateInput("observed points coincident".into()));
    }

    let sv = s.svd(false, false).singular_values;
    if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0].max(x_sq) {
        return Err(Error::DegenerateInput(
            "rank-deficient cross-covariance; rotation ambiguous".into(),
        ));
    }

    let rotation = horn_rotation(&s);
    let r = rotation.to_rotation_matrix().into_inner();

    // sigma = sum_j w_j <Z~_j, R X~_j> / sum_j w_j ||X~_j||^2
    let mut num = 0.0;
    for ((x, z), w) in observed.points.iter().zip(&model.points).zip(weights) {
        num += *w * (z - z_bar).dot(&(r * (x - x_bar)));
    }
    let scale = num / x_sq;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateInput(format!("non-positive scale {scale}")));
    }
    let t = z_bar - scale * (r * x_bar);
    Ok(Pose::new(scale, rotation, t))
}

/// Leading eigenvector of the 4x4 quaternion form of the cross-covariance.
fn horn_rotation(s: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy,       szx - sxz,       sxy - syx,
        syz - szy,       sxx - syy - szz, sxy + syx,       szx + sxz,
        szx - sxz,       sxy + syx,       -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,       syz + szy,       -sxx - syy + szz,
    );
    let eig = nalgebra::SymmetricEigen::new(n);
    let mut best = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let q = eig.eigenvectors.column(best);
    canonicalize(UnitQuaternion::from_quaternion(Quaternion::new(
        q[0], q[1], q[2], q[3],
    )))
}

/// M-step for the Student-t pdf parameters.
///
/// sigma2 is the weighted mean squared residual over 3J (floored); nu solves
/// 1 + log(nu/2) - psi(nu/2) + mean(E[log tau] - w) = 0 by bisection over
/// `cfg.nu_bounds`, clamping to the nearer bound if the bracket has no sign
/// change.
pub fn update_student_params(
    residuals: &[Vector3<f64>],
    weights: &[f64],
    exp_log_tau: &[f64],
    cfg: &EmConfig,
) -> Result<(f64, f64)> {
    let j = residuals.len();
    if weights.len() != j || exp_log_tau.len() != j || j == 0 {
        return Err(Error::DimensionMismatch("student param update".into()));
    }
    let wsq: f64 = residuals
        .iter()
        .zip(weights)
        .map(|(e, w)| w * e.norm_squared())
        .sum();
    if !wsq.is_finite() {
        return Err(Error::NonFinite("weighted residual sum".into()));
    }
    let sigma2 = (wsq / (3.0 * j as f64)).max(cfg.sigma2_floor);

    let c: f64 = exp_log_tau
        .iter()
        .zip(weights)
        .map(|(elt, w)| elt - w)
        .sum::<f64>()
        / j as f64;
    let f = |nu: f64| 1.0 + (nu / 2.0).ln() - digamma(nu / 2.0) + c;

    let (lo, hi) = cfg.nu_bounds;
    let (flo, fhi) = (f(lo), f(hi));
    let nu = if flo == 0.0 {
        lo
    } else if fhi == 0.0 {
        hi
    } else if flo.signum() == fhi.signum() {
        // no root in bracket: clamp to the bound with the smaller |f|
        if flo.abs() < fhi.abs() {
            lo
        } else {
            hi
        }
    } else {
        let (mut a, mut b, mut fa) = (lo, hi, flo);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            let fm = f(m);
            if fm == 0.0 || (b - a) < 1e-12 * m.max(1.0) {
                a = m;
                break;
            }
            if fa.signum() == fm.signum() {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    Ok((nu, sigma2))
}

/// Apply a pose to every point.
pub fn apply_pose(pose: &Pose, points: &LandmarkSet) -> LandmarkSet {
    LandmarkSet {
        points: points.points.iter().map(|p| pose.transform_point(p)).collect(),
    }
}

/// Sum of trivariate isotropic Student-t log densities of the residuals.
pub fn log_likelihood(residuals: &[Vector3<f64>], nu: f64, sigma2: f64) -> f64 {
    let norm = ln_gamma((nu + 3.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 1.5 * (nu * std::f64::consts::PI * sigma2).ln();
    residuals
        .iter()
        .map(|e| norm - 0.5 * (nu + 3.0) * (e.norm_squared() / (nu * sigma2)).ln_1p())
        .sum()
}

/// Robust pose estimation via Student-t EM.
pub fn estimate_pose(
    observed: &LandmarkSet,
    model: &LandmarkSet,
    cfg: &EmConfig,
) -> Result<(Pose, RobustFit)> {
    let j = observed.len();
    if model.len() != j {
        return Err(Error::DimensionMismatch(format!(
            "observed {} vs model {}",
            j,
            model.len()
        )));
    }
    if j < 4 {
        return Err(Error::DegenerateInput("need at least 4 landmarks".into()));
    }
    check_span(observed)?;

    // init: unit scale, identity rotation, centroid-difference translation
    let mut pose = Pose::new(
        1.0,
        UnitQuaternion::identity(),
        model.centroid() - observed.centroid(),
    );
    let mut nu = cfg.nu_init;
    let e0 = residuals(observed, model, &pose);
    let mut sigma2 =
        (e0.iter().map(|e| e.norm_squared()).sum::<f64>() / (3.0 * j as f64)).max(cfg.sigma2_floor);

    let mut trace: Vec<f64> = Vec::new();
    let mut weights = vec![1.0; j];
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..cfg.max_iters {
        iterations = it + 1;
        let e = residuals(observed, model, &pose);
        let (w, elt) = e_step_weights(&e, nu, sigma2)?;
        weights = w;

        pose = solve_weighted_similarity(observed, model, &weights)?;
        let e_new = residuals(observed, model, &pose);
        let (nu_new, sigma2_new) = update_student_params(&e_new, &weights, &elt, cfg)?;
        nu = nu_new;
        sigma2 = sigma2_new;

        let ll = log_likelihood(&e_new, nu, sigma2);
        if !ll.is_finite() {
            return Err(Error::NonFinite("log-likelihood".into()));
        }
        if let Some(&prev) = trace.last() {
            let denom = prev.abs().max(1.0);
            if (ll - prev).abs() / denom < cfg.rel_tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
    }

    Ok((
        pose,
        RobustFit {
            weights,
            nu,
            sigma2,
            log_likelihood_trace: trace,
            iterations,
            converged,
        },
    ))
}

fn check_span(set: &LandmarkSet) -> Result<()> {
    let c = set.centroid();
    let mut cov = Matrix3::<f64>::zeros();
    for p in &set.points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let sv = cov.svd(false, false).singular_values;
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::DegenerateInput(
            "landmarks span fewer than 2 dimensions".into(),
        ));
    }
    Ok(())
}

/// Read per-frame landmark sets from CSV with columns `frame,index,x,y,z`.
pub fn read_landmark_csv(path: &std::path::Path) -> Result<Vec<LandmarkSet>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut frames: std::collections::BTreeMap<usize, Vec<(usize, Vector3<f64>)>> =
        std::collections::BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 5 {
            return Err(Error::BadFile("expected frame,index,x,y,z".into()));
        }
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::BadFile(format!("bad number in landmark csv: {e}")))
        };
        let frame: usize = rec[0]
            .trim()
            .parse()
            .map_err(|e| Error::BadFile(format!("bad frame id: {e}")))?;
        let index: usize = rec[1]
            .trim()
            .parse()
            .map_err(|e| Error::BadFile(format!("bad landmark index: {e}")))?;
        frames
            .entry(frame)
            .or_default()
            .push((index, Vector3::new(parse(2)?, parse(3)?, parse(4)?)));
    }
    let mut out = Vec::with_capacity(frames.len());
    for (frame, mut pts) in frames {
        pts.sort_by_key(|(i, _)| *i);
        for (k, (i, _)) in pts.iter().enumerate() {
            if *i != k {
                return Err(Error::BadFile(format!(
                    "frame {frame}: landmark indices not contiguous"
                )));
            }
        }
        out.push(LandmarkSet::new(pts.into_iter().map(|(_, p)| p).collect())?);
    }
    Ok(out)
}

/// Write per-frame landmark sets in the same CSV layout.
pub fn write_landmark_csv(path: &std::path::Path, frames: &[LandmarkSet]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "index", "x", "y", "z"])?;
    for (f, set) in frames.iter().enumerate() {
        for (j, p) in set.points.iter().enumerate() {
            w.write_record([
                f.to_string(),
                j.to_string(),
                format!("{:.17e}", p.x),
                format!("{:.17e}", p.y),
                format!("{:.17e}", p.z),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
