//! Objective speech-enhancement metrics: SI-SDR and STOI, plus
//! SNR-controlled mixing.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::spectral::Waveform;

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// Both signals are mean-subtracted first. Returns +inf when the scaled
/// reference matches the estimate exactly.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "est {} vs ref {}",
            est.len(),
            reference.len()
        )));
    }
    let n = est.len() as f64;
    let me = est.samples.iter().sum::<f64>() / n;
    let mr = reference.samples.iter().sum::<f64>() / n;
    let e: Vec<f64> = est.samples.iter().map(|v| v - me).collect();
    let r: Vec<f64> = reference.samples.iter().map(|v| v - mr).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let er: f64 = e.iter().zip(&r).map(|(a, b)| a * b).sum();
    let alpha = er / rr;
    let target: f64 = alpha * alpha * rr;
    let resid: f64 = e
        .iter()
        .zip(&r)
        .map(|(a, b)| {
            let d = alpha * b - a;
            d * d
        })
        .sum();
    // residual at double-precision rounding level counts as exact
    if resid <= 1e-24 * target {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / resid).log10())
}

/// Scale `noise` so that the clean/noise energy ratio equals `snr_db`,
/// returning (mixture, scaled_noise).
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    if clean.len() != noise.len() {
        return Err(Error::DimensionMismatch(format!(
            "clean {} vs noise {}",
            clean.len(),
            noise.len()
        )));
    }
    let ec: f64 = clean.samples.iter().map(|v| v * v).sum();
    let en: f64 = noise.samples.iter().map(|v| v * v).sum();
    if ec <= 0.0 {
        return Err(Error::ZeroSignal("clean".into()));
    }
    if en <= 0.0 {
        return Err(Error::ZeroSignal("noise".into()));
    }
    let gain = (ec / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = noise.samples.iter().map(|v| gain * v).collect();
    let mix: Vec<f64> = clean
        .samples
        .iter()
        .zip(&scaled)
        .map(|(c, s)| c + s)
        .collect();
    Ok((
        Waveform::new(mix, clean.sample_rate),
        Waveform::new(scaled, clean.sample_rate),
    ))
}

// ---------------------------------------------------------------------------
// STOI (Taal et al. 2011)
// ---------------------------------------------------------------------------

const STOI_FS: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const NUM_BANDS: usize = 15;
const LOWEST_CF: f64 = 150.0;
const SEG_FRAMES: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;

/// Short-time objective intelligibility of `est` against clean `reference`.
///
/// 16 kHz input is resampled to 10 kHz internally; output clamped to [0,1].
pub fn stoi(est: &Waveform, reference: &Waveform, fs: u32) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "est {} vs ref {}",
            est.len(),
            reference.len()
        )));
    }
    let (x, y) = match fs {
        10_000 => (reference.samples.clone(), est.samples.clone()),
        16_000 => (
            resample_16k_to_10k(&reference.samples),
            resample_16k_to_10k(&est.samples),
        ),
        other => {
            return Err(Error::InconsistentConfig(format!(
                "stoi supports 10 or 16 kHz, got {other}"
            )))
        }
    };

    let (x, y) = remove_silent_frames(&x, &y)?;
    let xs = band_envelopes(&x);
    let ys = band_envelopes(&y);
    let num_frames = xs[0].len();
    if num_frames < SEG_FRAMES {
        return Err(Error::TooShort(format!(
            "{num_frames} frames after silence removal, need {SEG_FRAMES}"
        )));
    }

    let clip = 10f64.powf(-BETA_DB / 20.0); // 10^(15/20)
    let mut acc = 0.0;
    let mut count = 0usize;
    for m in SEG_FRAMES..=num_frames {
        for j in 0..NUM_BANDS {
            let xseg = &xs[j][m - SEG_FRAMES..m];
            let yseg = &ys[j][m - SEG_FRAMES..m];
            let xn: f64 = xseg.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yn: f64 = yseg.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = if yn > 0.0 { xn / yn } else { 0.0 };
            let yprime: Vec<f64> = yseg
                .iter()
                .zip(xseg)
                .map(|(y, x)| (alpha * y).min((1.0 + clip) * x))
                .collect();
            acc += correlation(xseg, &yprime);
            count += 1;
        }
    }
    Ok((acc / count as f64).clamp(0.0, 1.0))
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da <= 0.0 || db <= 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Drop frames more than 40 dB below the loudest reference frame and
/// overlap-add the survivors back into time-domain signals.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() < FRAME {
        return Err(Error::TooShort(format!("{} samples < one frame", x.len())));
    }
    let w = hann(FRAME);
    let num_frames = (x.len() - FRAME) / HOP + 1;
    let mut energies = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let e: f64 = (0..FRAME)
            .map(|i| {
                let v = w[i] * x[t * HOP + i];
                v * v
            })
            .sum();
        energies.push(10.0 * (e + 1e-300).log10());
    }
    let max_e = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..num_frames)
        .filter(|&t| energies[t] > max_e - DYN_RANGE_DB)
        .collect();
    if keep.is_empty() {
        return Err(Error::TooShort("all frames silent".into()));
    }

    let out_len = (keep.len() - 1) * HOP + FRAME;
    let mut xo = vec![0.0; out_len];
    let mut yo = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    for (k, &t) in keep.iter().enumerate() {
        for i in 0..FRAME {
            xo[k * HOP + i] += w[i] * w[i] * x[t * HOP + i];
            yo[k * HOP + i] += w[i] * w[i] * y[t * HOP + i];
            norm[k * HOP + i] += w[i] * w[i];
        }
    }
    for i in 0..out_len {
        if norm[i] > 1e-12 {
            xo[i] /= norm[i];
            yo[i] /= norm[i];
        }
    }
    Ok((xo, yo))
}

/// One-third-octave band envelopes of the short-time spectrum,
/// bands x frames.
fn band_envelopes(x: &[f64]) -> Vec<Vec<f64>> {
    let w = hann(FRAME);
    let num_frames = if x.len() >= FRAME {
        (x.len() - FRAME) / HOP + 1
    } else {
        0
    };
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(NFFT);

    // band edge bin ranges
    let bin_hz = STOI_FS as f64 / NFFT as f64;
    let bands: Vec<(usize, usize)> = (0..NUM_BANDS)
        .map(|j| {
            let cf = LOWEST_CF * 2f64.powf(j as f64 / 3.0);
            let lo = cf * 2f64.powf(-1.0 / 6.0);
            let hi = cf * 2f64.powf(1.0 / 6.0);
            (
                (lo / bin_hz).ceil() as usize,
                ((hi / bin_hz).ceil() as usize).min(NFFT / 2 + 1),
            )
        })
        .collect();

    let mut out = vec![vec![0.0; num_frames]; NUM_BANDS];
    let mut buf = vec![Complex64::default(); NFFT];
    for t in 0..num_frames {
        for b in buf.iter_mut() {
            *b = Complex64::default();
        }
        for i in 0..FRAME {
            buf[i] = Complex64::new(w[i] * x[t * HOP + i], 0.0);
        }
        fft.process(&mut buf);
        for (j, &(lo, hi)) in bands.iter().enumerate() {
            let e: f64 = (lo..hi).map(|k| buf[k].norm_sqr()).sum();
            out[j][t] = e.sqrt();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 16 kHz -> 10 kHz polyphase resampler (L=5, M=8, Kaiser lowpass)
// ---------------------------------------------------------------------------

fn bessel_i0(x: f64) -> f64 {
    // power series; converges quickly for the beta values used here
    let mut term = 1.0;
    let mut sum = 1.0;
    let x2 = x * x / 4.0;
    for k in 1..64 {
        term *= x2 / ((k * k) as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

/// Rational 5/8 resampler: upsample by 5, Kaiser-windowed sinc lowpass at
/// the 5 kHz target Nyquist, downsample by 8.
pub fn resample_16k_to_10k(x: &[f64]) -> Vec<f64> {
    const L: usize = 5;
    const M: usize = 8;
    const BETA: f64 = 8.6;
    const LOBES: isize = 20;

    // cutoff slightly below the 5 kHz target Nyquist (4.75 kHz at the
    // 80 kHz upsampled rate) so the transition band stays out of the
    // STOI analysis bands
    let fc = 4750.0 / 80_000.0;
    let half: isize = LOBES * M as isize; // sinc zeros every 1/(2 fc) samples
    let i0b = bessel_i0(BETA);
    let taps: Vec<f64> = (-half..=half)
        .map(|n| {
            let t = n as f64;
            let sinc = if n == 0 {
                1.0
            } else {
                (2.0 * std::f64::consts::PI * fc * t).sin() / (2.0 * std::f64::consts::PI * fc * t)
            };
            let r = t / half as f64;
            let kaiser = bessel_i0(BETA * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            2.0 * fc * sinc * kaiser * L as f64
        })
        .collect();

    let out_len = (x.len() * L).div_ceil(M);
    let mut y = vec![0.0; out_len];
    for (k, yk) in y.iter_mut().enumerate() {
        let center = (k * M) as isize;
        let mut acc = 0.0;
        for (ti, &h) in taps.iter().enumerate() {
            let up_idx = center - (ti as isize - half);
            if up_idx >= 0 && up_idx % L as isize == 0 {
                let xi = (up_idx / L as isize) as usize;
                if xi < x.len() {
                    acc += h * x[xi];
                }
            }
        }
        *yk = acc;
    }
    y
}
