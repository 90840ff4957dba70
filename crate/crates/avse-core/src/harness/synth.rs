//! Synthetic corpus generation.
//!
//! Each utterance pairs a formant-style speech waveform with a talking-head
//! landmark track. Both are driven by the same articulation program, so the
//! audio envelope and the lip opening are genuinely correlated — the signal
//! the audio-visual methods exploit.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::error::Result;
use crate::morphable::{
    generate_toy_model, synthesize_sequence, write_model, SequenceOptions,
};
use crate::registration::{write_landmark_csv, Pose};
use crate::spectral::{write_wav, Waveform};

use super::{sha256_file, ExperimentConfig, Split};

/// Corpus geometry shared by every utterance.
pub const MODEL_SEED: u64 = 77;
pub const MODEL_VERTICES: usize = 400;
pub const MODEL_COEFFS: usize = 6;
pub const MODEL_LANDMARKS: usize = 68;

/// Smooth per-frame articulation trajectories for the leading basis
/// columns. Column 0 (lip opening) dominates.
pub fn articulation_program(seed: u64, frames: usize, k: usize, fps: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // random frequencies in the syllabic range, random phases
    let comps: Vec<(f64, f64, f64)> = (0..k)
        .map(|i| {
            let freq = 1.5 + 2.5 * rng.random::<f64>();
            let phase = 2.0 * PI * rng.random::<f64>();
            let amp = if i == 0 { 0.35 } else { 0.12 / (i as f64) };
            (freq, phase, amp)
        })
        .collect();
    (0..frames)
        .map(|t| {
            let time = t as f64 / fps;
            comps
                .iter()
                .map(|&(f, p, a)| a * (2.0 * PI * f * time + p).sin())
                .collect()
        })
        .collect()
}

/// Smooth yaw/pitch head rotation with peak yaw `amp_deg`, plus a small
/// translation drift. `amp_deg == 0` yields the identity program.
pub fn head_motion_program(seed: u64, frames: usize, amp_deg: f64, fps: f64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let yaw_freq = 0.4 + 0.4 * rng.random::<f64>();
    let yaw_phase = 2.0 * PI * rng.random::<f64>();
    let pitch_freq = 0.3 + 0.3 * rng.random::<f64>();
    let pitch_phase = 2.0 * PI * rng.random::<f64>();
    let amp = amp_deg.to_radians();
    (0..frames)
        .map(|t| {
            let time = t as f64 / fps;
            let yaw = amp * (2.0 * PI * yaw_freq * time + yaw_phase).sin();
            let pitch = 0.5 * amp * (2.0 * PI * pitch_freq * time + pitch_phase).sin();
            let rot = UnitQuaternion::from_euler_angles(pitch, yaw, 0.0);
            let tr = Vector3::new(0.05 * (time * 0.7).sin(), 0.03 * (time * 0.9).cos(), 0.0)
                * if amp_deg == 0.0 { 0.0 } else { 1.0 };
            Pose::new(1.0, rot, tr)
        })
        .collect()
}

fn smooth_value(track: &[f64], pos: f64) -> f64 {
    if track.is_empty() {
        return 0.0;
    }
    let last = (track.len() - 1) as f64;
    let x = pos.clamp(0.0, last);
    let i = x.floor() as usize;
    let frac = x - i as f64;
    if i + 1 < track.len() {
        track[i] * (1.0 - frac) + track[i + 1] * frac
    } else {
        track[i]
    }
}

/// Formant-style speech: a glottal pulse train shaped by a two-pole
/// resonator whose center frequency and output gain track the lip-opening
/// trajectory.
pub fn synth_speech(
    articulation: &[Vec<f64>],
    fps: f64,
    sample_rate: u32,
    seed: u64,
) -> Waveform {
    let frames = articulation.len();
    let sr = sample_rate as f64;
    let n = ((frames as f64 / fps) * sr).round() as usize;
    let opening: Vec<f64> = articulation.iter().map(|a| a.first().copied().unwrap_or(0.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let f0 = 95.0 + 40.0 * rng.random::<f64>();

    let mut samples = vec![0.0f64; n];
    let (mut y1, mut y2) = (0.0f64, 0.0f64);
    let mut phase = 0.0f64;
    // per-pulse jitter and shimmer keep the harmonics from collapsing into
    // razor-thin spectral lines no learned prior could track
    let mut jitter = 1.0f64;
    let mut shimmer = 1.0f64;
    for (i, s) in samples.iter_mut().enumerate() {
        let frame_pos = i as f64 / sr * fps;
        let a0 = smooth_value(&opening, frame_pos);
        // wider mouth opening -> higher first formant and more energy
        let formant = 450.0 + 600.0 * a0;
        let bandwidth = 130.0;
        let r = (-PI * bandwidth / sr).exp();
        let theta = 2.0 * PI * formant.clamp(150.0, sr * 0.45) / sr;
        let a1c = 2.0 * r * theta.cos();
        let a2c = -r * r;

        let t = i as f64 / sr;
        let vibrato = 1.0 + 0.02 * (2.0 * PI * 5.0 * t).sin();
        phase += f0 * vibrato * jitter / sr;
        let mut x = 0.0;
        if phase >= 1.0 {
            phase -= 1.0;
            x = shimmer;
            jitter = 0.97 + 0.06 * rng.random::<f64>();
            shimmer = 0.85 + 0.3 * rng.random::<f64>();
        }
        // aspiration: mixed excitation with energy comparable to the pulses
        x += 0.2 * (rng.random::<f64>() - 0.5);

        let y = x + a1c * y1 + a2c * y2;
        y2 = y1;
        y1 = y;
        let gain = 0.35 + 0.65 * (2.0 * a0).tanh();
        *s = y * gain;
    }
    // normalize to a fixed RMS
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = 0.1 / rms;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
    Waveform { samples, sample_rate }
}

/// Deterministic colored noise (one-pole filtered white noise).
pub fn synth_noise(len: usize, sample_rate: u32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xbad5eed));
    let mut samples = vec![0.0f64; len];
    let mut prev = 0.0f64;
    for s in samples.iter_mut() {
        let white = rng.random::<f64>() * 2.0 - 1.0;
        prev = 0.7 * prev + 0.3 * white;
        *s = prev;
    }
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = 0.1 / rms;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
    Waveform { samples, sample_rate }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config_hash: String,
    pub train_utterances: usize,
    pub val_utterances: usize,
    pub test_utterances: usize,
    pub files: Vec<ManifestEntry>,
    /// Hash over the sorted file digests — a corpus fingerprint.
    pub manifest_hash: String,
}

pub fn utterance_seed(cfg: &ExperimentConfig, split: Split, idx: usize) -> u64 {
    cfg.split_seed(split).wrapping_mul(1_000_003).wrapping_add(idx as u64)
}

fn write_articulation_csv(path: &Path, articulation: &[Vec<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let k = articulation.first().map_or(0, |a| a.len());
    let mut header = vec!["frame".to_string()];
    for i in 0..k {
        header.push(format!("a{i}"));
    }
    wtr.write_record(&header)?;
    for (t, a) in articulation.iter().enumerate() {
        let mut row = vec![t.to_string()];
        for v in a {
            row.push(format!("{v:.17e}"));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_pose_trace(path: &Path, poses: &[Pose]) -> Result<()> {
    let arr: Vec<serde_json::Value> = poses.iter().map(|p| p.to_json()).collect();
    std::fs::write(path, serde_json::to_vec_pretty(&serde_json::Value::Array(arr))?)?;
    Ok(())
}

/// Generate the full corpus on disk: shared deformable model, then per
/// utterance the clean waveform, the raw (head-motion) landmark track, the
/// identity-motion track, the articulation program, and the pose program.
pub fn cmd_synth_data(cfg: &ExperimentConfig) -> Result<CorpusManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.workdir)?;
    let config_hash = cfg.hash();

    let model = generate_toy_model(MODEL_SEED, MODEL_VERTICES, MODEL_COEFFS, MODEL_LANDMARKS)?;
    write_model(&cfg.model_path(), &model)?;

    let mut files: Vec<ManifestEntry> = Vec::new();
    let record = |path: &Path, root: &Path| -> Result<ManifestEntry> {
        Ok(ManifestEntry {
            path: path
                .strip_prefix(root)
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned(),
            sha256: sha256_file(path)?,
        })
    };
    files.push(record(&cfg.model_path(), &cfg.workdir)?);

    for split in Split::ALL {
        for idx in 0..cfg.split_count(split) {
            let dir = cfg.utterance_dir(split, idx);
            std::fs::create_dir_all(&dir)?;
            let seed = utterance_seed(cfg, split, idx);
            let frames = cfg.corpus.frames_per_utterance;

            let articulation = articulation_program(seed, frames, MODEL_COEFFS, cfg.corpus.fps);
            let head = head_motion_program(seed, frames, cfg.head_motion_deg, cfg.corpus.fps);
            let identity = head_motion_program(seed, frames, 0.0, cfg.corpus.fps);

            let opts = SequenceOptions { render_frames: false, ..Default::default() };
            let moving = synthesize_sequence(&model, &articulation, &head, seed, &opts)?;
            let still = synthesize_sequence(&model, &articulation, &identity, seed, &opts)?;

            let speech = synth_speech(&articulation, cfg.corpus.fps, cfg.corpus.sample_rate, seed);
            let noise = synth_noise(speech.samples.len(), cfg.corpus.sample_rate, seed);

            write_wav(&dir.join("clean.wav"), &speech)?;
            write_wav(&dir.join("noise.wav"), &noise)?;
            write_landmark_csv(&dir.join("landmarks_raw.csv"), &moving.observed)?;
            write_landmark_csv(&dir.join("landmarks_identity.csv"), &still.observed)?;
            write_articulation_csv(&dir.join("articulation.csv"), &articulation)?;
            write_pose_trace(&dir.join("gt_poses.json"), &head)?;
            super::write_provenance(&dir, &config_hash)?;

            for name in [
                "clean.wav",
                "noise.wav",
                "landmarks_raw.csv",
                "landmarks_identity.csv",
                "articulation.csv",
                "gt_poses.json",
            ] {
                files.push(record(&dir.join(name), &cfg.workdir)?);
            }
        }
    }

    files.sort_by(|a, b| a.path.cmp(&b.path));
    let mut hasher = sha2::Sha256::new();
    use sha2::Digest;
    for e in &files {
        hasher.update(e.path.as_bytes());
        hasher.update(e.sha256.as_bytes());
    }
    let digest = hasher.finalize();
    let mut manifest_hash = String::with_capacity(64);
    for b in digest {
        manifest_hash.push_str(&format!("{b:02x}"));
    }

    let manifest = CorpusManifest {
        config_hash,
        train_utterances: cfg.corpus.train_utterances,
        val_utterances: cfg.corpus.val_utterances,
        test_utterances: cfg.corpus.test_utterances,
        files,
        manifest_hash,
    };
    std::fs::write(cfg.manifest_path(), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Read an articulation CSV back (frame, a0..aK).
pub fn read_articulation_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| crate::error::Error::BadFile(e.to_string())))
            .collect::<Result<_>>()?;
        out.push(row);
    }
    Ok(out)
}
