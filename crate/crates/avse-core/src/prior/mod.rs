//! Dense (C)VAE speech prior over STFT power frames.
//!
//! Encoder/decoder/prior-net are single-hidden-layer tanh networks with
//! hand-written backpropagation; training uses Adam with early stopping on
//! validation ELBO.

mod net;
mod train;

pub use net::{decode, decode_cached, decode_vjp, decode_vjp_cached, elbo, encode, latent_prior, DecodeCache, Frame, Layer, VaeGrads, VaeParams, VARIANCE_FLOOR};
pub use train::{train, Dataset, TrainConfig, TrainReport};

use ndarray::Array2;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Load a per-frame variance field from a text file with header `F T`
/// followed by F rows of T values. Zeros are floored to 1e-10.
pub fn oracle_prior(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::BadFile("empty file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| Error::BadFile(format!("bad header: {e}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::BadFile("header must be `F T`".into()));
    }
    let (f, t) = (dims[0], dims[1]);
    let mut data = Array2::<f64>::zeros((f, t));
    let mut rows = 0usize;
    for (r, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if r >= f {
            return Err(Error::BadFile(format!("more than {f} rows")));
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| Error::BadFile(format!("bad value: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != t {
            return Err(Error::BadFile(format!("row {r}: {} values, want {t}", vals.len())));
        }
        for (c, v) in vals.into_iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::BadFile(format!("row {r} col {c}: invalid value {v}")));
            }
            data[(r, c)] = v.max(1e-10);
        }
        rows += 1;
    }
    if rows != f {
        return Err(Error::BadFile(format!("{rows} rows, want {f}")));
    }
    Ok(data)
}

/// Write a variance field in the `oracle_prior` layout, full precision.
pub fn write_oracle_prior(path: &Path, field: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", field.nrows(), field.ncols()));
    for r in 0..field.nrows() {
        let row: Vec<String> = (0..field.ncols())
            .map(|c| format!("{:.17e}", field[(r, c)]))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}
