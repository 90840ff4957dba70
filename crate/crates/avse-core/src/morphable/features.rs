//! Geometric lip features: a low-dimensional stand-in for a learned
//! visual embedding.

use nalgebra::Vector2;
use ndarray::Array2;

use crate::error::{Error, Result};

use super::inner_lip_range;

/// Per-frame visual feature matrix, frames x M.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub data: Array2<f64>,
}

impl VisualFeatures {
    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn frame(&self, t: usize) -> Vec<f64> {
        self.data.row(t).to_vec()
    }
}

fn shoelace_area(points: &[Vector2<f64>]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc.abs()
}

/// Geometric lip features per frame: mouth width, height, inner-opening
/// area, aspect ratio, and their first differences, zero-padded to M and
/// standardized per feature over the sequence.
///
/// Each frame carries the full lip landmark block (outer ring then inner
/// ring, in ring order).
pub fn lip_features(lip_landmarks_2d: &[Vec<Vector2<f64>>], m: usize) -> Result<VisualFeatures> {
    if m < 4 {
        return Err(Error::DimensionMismatch(format!("M={m} < 4")));
    }
    let t_len = lip_landmarks_2d.len();
    if t_len == 0 {
        return Err(Error::DegenerateLandmarks("empty sequence".into()));
    }

    let mut base = Array2::<f64>::zeros((t_len, 4));
    for (t, lips) in lip_landmarks_2d.iter().enumerate() {
        if lips.len() < 4 {
            return Err(Error::DegenerateLandmarks(format!(
                "frame {t}: {} lip landmarks",
                lips.len()
            )));
        }
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in lips {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::DegenerateLandmarks(format!("frame {t}: non-finite")));
            }
            min_x = min_x.min(p.x);
            max_x = max_x.max(p.x);
            min_y = min_y.min(p.y);
            max_y = max_y.max(p.y);
        }
        let width = max_x - min_x;
        let height = max_y - min_y;
        if width <= 0.0 && height <= 0.0 {
            return Err(Error::DegenerateLandmarks(format!("frame {t}: coincident lips")));
        }
        let inner = inner_lip_range(lips.len() * 10 / 3);
        // inner ring is the trailing block of the lip landmarks
        let inner_count = inner.len().min(lips.len());
        let area = shoelace_area(&lips[lips.len() - inner_count..]);
        base[(t, 0)] = width;
        base[(t, 1)] = height;
        base[(t, 2)] = area;
        base[(t, 3)] = height / (width + 1e-12);
    }

    let mut feats = Array2::<f64>::zeros((t_len, m));
    for t in 0..t_len {
        for f in 0..4.min(m) {
            feats[(t, f)] = base[(t, f)];
        }
        if m >= 8 {
            for f in 0..4 {
                feats[(t, 4 + f)] = if t == 0 { 0.0 } else { base[(t, f)] - base[(t - 1, f)] };
            }
        }
    }

    // standardize each feature over the sequence
    for f in 0..m {
        let col = feats.column(f);
        let mean = col.sum() / t_len as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t_len as f64;
        let std = var.sqrt();
        let mut col = feats.column_mut(f);
        for v in col.iter_mut() {
            *v -= mean;
            if std > 1e-12 {
                *v /= std;
            }
        }
    }
    Ok(VisualFeatures { data: feats })
}

/// Raw (pre-standardization) geometry of one lip frame, for tests and
/// diagnostics: (width, height, inner area, aspect).
pub fn lip_geometry(lips: &[Vector2<f64>]) -> (f64, f64, f64, f64) {
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in lips {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let width = max_x - min_x;
    let height = max_y - min_y;
    let inner = inner_lip_range(lips.len() * 10 / 3);
    let inner_count = inner.len().min(lips.len());
    let area = shoelace_area(&lips[lips.len() - inner_count..]);
    (width, height, area, height / (width + 1e-12))
}
