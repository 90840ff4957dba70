//! STFT analysis/synthesis with exact overlap-add inversion.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { fft_size: 1024, hop: 256, center: true }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize, center: bool) -> Result<Self> {
        if fft_size == 0 || hop == 0 || fft_size % hop != 0 {
            return Err(Error::InconsistentConfig(format!(
                "hop {hop} must divide fft_size {fft_size}"
            )));
        }
        let cfg = Self { fft_size, hop, center };
        if cfg.cola_deviation() > 1e-10 {
            return Err(Error::InconsistentConfig(
                "window does not satisfy COLA at this hop".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.fft_size as f64;
        (0..self.fft_size)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
            .collect()
    }

    /// Max deviation of sum_m w^2(n - m*hop) from its mean over one period.
    pub fn cola_deviation(&self) -> f64 {
        let w = self.window();
        let overlap = self.fft_size / self.hop;
        let mut sums = vec![0.0; self.hop];
        for (i, wi) in w.iter().enumerate() {
            sums[i % self.hop] += wi * wi;
        }
        let _ = overlap;
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        sums.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max)
    }
}

/// Complex STFT matrix, bins x frames.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub data: Array2<Complex64>,
    pub config: StftConfig,
    pub sample_rate: u32,
    /// Original signal length, used by `istft` to trim padding.
    pub num_samples: usize,
}

impl Spectrogram {
    pub fn num_bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn power(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm_sqr())
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    if w.samples.len() < cfg.fft_size && !cfg.center {
        return Err(Error::TooShort(format!(
            "{} samples < fft_size {}",
            w.samples.len(),
            cfg.fft_size
        )));
    }
    if w.samples.is_empty() {
        return Err(Error::TooShort("empty waveform".into()));
    }
    let pad = if cfg.center { cfg.fft_size / 2 } else { 0 };
    let mut x = vec![0.0; w.samples.len() + 2 * pad];
    x[pad..pad + w.samples.len()].copy_from_slice(&w.samples);
    if x.len() < cfg.fft_size {
        return Err(Error::TooShort(format!(
            "{} padded samples < fft_size {}",
            x.len(),
            cfg.fft_size
        )));
    }

    let num_frames = (x.len() - cfg.fft_size) / cfg.hop + 1;
    let window = cfg.window();
    let f = cfg.num_bins();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut data = Array2::<Complex64>::zeros((f, num_frames));
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    for t in 0..num_frames {
        let start = t * cfg.hop;
        for i in 0..cfg.fft_size {
            buf[i] = Complex64::new(x[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..f {
            data[(k, t)] = buf[k];
        }
    }
    Ok(Spectrogram {
        data,
        config: cfg.clone(),
        sample_rate: w.sample_rate,
        num_samples: w.samples.len(),
    })
}

/// Weighted overlap-add inversion with window-squared normalization.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let cfg = &s.config;
    let f = cfg.num_bins();
    if s.data.nrows() != f {
        return Err(Error::InconsistentConfig(format!(
            "{} bins but config implies {}",
            s.data.nrows(),
            f
        )));
    }
    let num_frames = s.data.ncols();
    let len_padded = (num_frames - 1) * cfg.hop + cfg.fft_size;
    let window = cfg.window();

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(cfg.fft_size);
    let mut acc = vec![0.0; len_padded];
    let mut norm = vec![0.0; len_padded];
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    let scale = 1.0 / cfg.fft_size as f64;
    for t in 0..num_frames {
        // rebuild the full spectrum with Hermitian symmetry
        for k in 0..f {
            buf[k] = s.data[(k, t)];
        }
        for k in f..cfg.fft_size {
            buf[k] = s.data[(cfg.fft_size - k, t)].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for i in 0..cfg.fft_size {
            let v = buf[i].re * scale;
            acc[start + i] += v * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for i in 0..len_padded {
        if norm[i] > 1e-12 {
            acc[i] /= norm[i];
        }
    }
    let pad = if cfg.center { cfg.fft_size / 2 } else { 0 };
    let end = (pad + s.num_samples).min(len_padded);
    Ok(Waveform::new(acc[pad..end].to_vec(), s.sample_rate))
}

/// Read a 16-bit PCM mono little-endian WAV file; anything else is rejected.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::BadFile("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<(usize, usize)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::BadFile("truncated chunk".into()));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::BadFile("short fmt chunk".into()));
                }
                let tag = u16::from_le_bytes(bytes[body..body + 2].try_into().unwrap());
                let channels = u16::from_le_bytes(bytes[body + 2..body + 4].try_into().unwrap());
                let rate = u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap());
                let bits = u16::from_le_bytes(bytes[body + 14..body + 16].try_into().unwrap());
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some((body, size)),
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    let (tag, channels, rate, bits) =
        fmt.ok_or_else(|| Error::BadFile("missing fmt chunk".into()))?;
    if tag != 1 {
        return Err(Error::BadFile(format!("unsupported codec tag {tag}, want PCM")));
    }
    if channels != 1 {
        return Err(Error::BadFile(format!("{channels} channels, want mono")));
    }
    if bits != 16 {
        return Err(Error::BadFile(format!("{bits}-bit samples, want 16")));
    }
    let (off, size) = data.ok_or_else(|| Error::BadFile("missing data chunk".into()))?;
    let samples = bytes[off..off + size]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform::new(samples, rate))
}

/// Write a 16-bit PCM mono WAV; samples are clipped to [-1, 1).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}
