//! End-to-end pipeline commands: frontalize landmark tracks, train the
//! speech priors, enhance the test mixtures, and emit the report tables.

use nalgebra::Vector2;
use ndarray::Array2;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write as _;

use crate::enhance::{vem_enhance, SpeechPrior, VemConfig};
use crate::error::{Error, Result};
use crate::metrics::{mix_at_snr, si_sdr, stoi};
use crate::morphable::{fit_shape, lip_features, read_model, reconstruct_vertices, DeformableModel, VisualFeatures};
use crate::prior::{train, Dataset, TrainConfig, VaeParams};
use crate::registration::{
    apply_pose, estimate_pose, read_landmark_csv, write_landmark_csv, EmConfig, LandmarkSet, Pose,
};
use crate::spectral::{istft, read_wav, stft, write_wav, StftConfig, Waveform};

use super::synth::utterance_seed;
use super::{check_provenance, write_provenance, ExperimentConfig, Method, Split};

/// Frontalization result for one landmark track.
#[derive(Debug, Clone)]
pub struct FrontalizedTrack {
    /// Landmarks mapped back into the model frame, per frame.
    pub frontal: Vec<LandmarkSet>,
    /// Estimated model-to-scene pose, per frame.
    pub poses: Vec<Pose>,
}

/// Estimate the rigid pose of every frame and undo it, leaving only
/// non-rigid (articulation) motion.
///
/// Pose and shape are estimated alternately: register against the current
/// articulated model landmarks, frontalize, refit shape coefficients, and
/// repeat. With noiseless identity-motion input the loop converges to the
/// identity pose.
pub fn frontalize_track(
    model: &DeformableModel,
    frames: &[LandmarkSet],
) -> Result<FrontalizedTrack> {
    const ALTERNATIONS: usize = 50;
    const POSE_TOL: f64 = 1e-10;
    const LAMBDA_REG: f64 = 1e-10;
    let em = EmConfig::default();
    let mut frontal = Vec::with_capacity(frames.len());
    let mut poses = Vec::with_capacity(frames.len());
    for (t, observed) in frames.iter().enumerate() {
        let mut reference = model.mean_landmarks();
        let mut pose = Pose::identity();
        let mut frontalized = observed.clone();
        for _ in 0..ALTERNATIONS {
            // the estimated pose maps the observed frame into the model
            // frame; the head pose in the scene is its inverse
            let (p, _) = estimate_pose(observed, &reference, &em)
                .map_err(|e| Error::DegenerateInput(format!("frame {t}: {e}")))?;
            frontalized = apply_pose(&p, observed);
            let delta = (p.rotation.inverse() * pose.rotation).angle()
                + (p.scale - pose.scale).abs()
                + (p.translation - pose.translation).norm();
            pose = p;
            if delta < POSE_TOL {
                break;
            }
            let coeffs = fit_shape(&frontalized, model, LAMBDA_REG)?;
            let verts = reconstruct_vertices(model, &coeffs)?;
            reference = model.landmarks_of(&verts);
        }
        frontal.push(frontalized);
        poses.push(pose.inverse());
    }
    Ok(FrontalizedTrack { frontal, poses })
}

fn lip_track_2d(model: &DeformableModel, frames: &[LandmarkSet]) -> Vec<Vec<Vector2<f64>>> {
    let lips = model.lip_landmark_range();
    frames
        .iter()
        .map(|f| f.points[lips.clone()].iter().map(|p| Vector2::new(p.x, p.y)).collect())
        .collect()
}

/// Linearly resample a feature matrix (T_in x M) to `t_out` rows, aligning
/// the first and last frames. Used to match video-rate features to
/// STFT-rate frames.
pub fn resample_features(feats: &VisualFeatures, t_out: usize) -> Array2<f64> {
    let t_in = feats.data.nrows();
    let m = feats.data.ncols();
    let mut out = Array2::<f64>::zeros((t_out, m));
    if t_in == 0 || t_out == 0 {
        return out;
    }
    for t in 0..t_out {
        let pos = if t_out == 1 {
            0.0
        } else {
            t as f64 * (t_in - 1) as f64 / (t_out - 1) as f64
        };
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        for f in 0..m {
            let a = feats.data[(i, f)];
            let b = feats.data[((i + 1).min(t_in - 1), f)];
            out[(t, f)] = a * (1.0 - frac) + b * frac;
        }
    }
    out
}

/// Frontalize every utterance in the corpus: emits per-utterance frontal
/// landmark CSVs and pose-trace JSONs under `workdir/frontal/`.
pub fn cmd_frontalize(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let hash = cfg.hash();
    let model = read_model(&cfg.model_path())
        .map_err(|_| Error::MissingArtifacts("deformable model; run synth-data first".into()))?;
    for split in Split::ALL {
        for idx in 0..cfg.split_count(split) {
            let utt = cfg.utterance_dir(split, idx);
            check_provenance(&utt, &hash)?;
            let frames = read_landmark_csv(&utt.join("landmarks_raw.csv"))?;
            let track = frontalize_track(&model, &frames)?;
            let out = cfg.frontal_dir(split, idx);
            std::fs::create_dir_all(&out)?;
            write_landmark_csv(&out.join("landmarks_frontal.csv"), &track.frontal)?;
            let arr: Vec<serde_json::Value> = track.poses.iter().map(|p| p.to_json()).collect();
            std::fs::write(
                out.join("pose_trace.json"),
                serde_json::to_vec_pretty(&serde_json::Value::Array(arr))?,
            )?;
            write_provenance(&out, &hash)?;
        }
    }
    Ok(())
}

fn stft_config(cfg: &ExperimentConfig) -> Result<StftConfig> {
    StftConfig::new(cfg.stft.fft_size, cfg.stft.hop, true)
}

fn clean_spectrogram(cfg: &ExperimentConfig, split: Split, idx: usize) -> Result<(Waveform, crate::spectral::Spectrogram)> {
    let wav = read_wav(&cfg.utterance_dir(split, idx).join("clean.wav"))?;
    let spec = stft(&wav, &stft_config(cfg)?)?;
    Ok((wav, spec))
}

/// Visual features for one utterance at STFT frame rate, from either the
/// frontalized or the raw (head-motion) landmark track.
fn visual_features(
    cfg: &ExperimentConfig,
    model: &DeformableModel,
    split: Split,
    idx: usize,
    frontalized: bool,
    t_out: usize,
) -> Result<Array2<f64>> {
    let path = if frontalized {
        cfg.frontal_dir(split, idx).join("landmarks_frontal.csv")
    } else {
        cfg.utterance_dir(split, idx).join("landmarks_raw.csv")
    };
    let frames = read_landmark_csv(&path)
        .map_err(|_| Error::MissingArtifacts(format!("landmarks at {}", path.display())))?;
    let lips = lip_track_2d(model, &frames);
    let feats = lip_features(&lips, cfg.prior.visual_dim)?;
    Ok(resample_features(&feats, t_out))
}

fn gather_dataset(cfg: &ExperimentConfig, conditional: bool) -> Result<Dataset> {
    let model = read_model(&cfg.model_path())?;
    let mut powers: Vec<Array2<f64>> = Vec::new();
    let mut visuals: Vec<Array2<f64>> = Vec::new();
    for split in [Split::Train, Split::Val] {
        for idx in 0..cfg.split_count(split) {
            let (_, spec) = clean_spectrogram(cfg, split, idx)?;
            let p = spec.power();
            let t = p.ncols();
            if conditional {
                visuals.push(visual_features(cfg, &model, split, idx, true, t)?);
            }
            powers.push(p);
        }
    }
    let f = powers[0].nrows();
    let total: usize = powers.iter().map(|p| p.ncols()).sum();
    let mut power = Array2::<f64>::zeros((f, total));
    let mut col = 0;
    for p in &powers {
        power.slice_mut(ndarray::s![.., col..col + p.ncols()]).assign(p);
        col += p.ncols();
    }
    let visual = if conditional {
        let m = cfg.prior.visual_dim;
        let mut v = Array2::<f64>::zeros((total, m));
        let mut row = 0;
        for vm in &visuals {
            v.slice_mut(ndarray::s![row..row + vm.nrows(), ..]).assign(vm);
            row += vm.nrows();
        }
        Some(v)
    } else {
        None
    };
    Ok(Dataset { power, visual })
}

/// Train both speech priors (audio-only and visually conditioned) on the
/// clean training corpus. The conditional prior is trained on frontalized
/// features.
pub fn cmd_train_prior(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = cfg.workdir.join("priors");
    std::fs::create_dir_all(&dir)?;
    for conditional in [false, true] {
        let data = gather_dataset(cfg, conditional)?;
        let tcfg = TrainConfig {
            latent_dim: cfg.prior.latent_dim,
            epochs: cfg.prior.epochs,
            batch_size: cfg.prior.batch_size,
            learning_rate: cfg.prior.learning_rate,
            patience: cfg.prior.patience,
            validation_fraction: 0.15,
            seed: cfg.seeds.train,
        };
        let (params, _) = train(&data, &tcfg)?;
        params.save(&cfg.prior_path(conditional))?;
    }
    write_provenance(&dir, &hash)?;
    Ok(())
}

fn noisy_mixture(cfg: &ExperimentConfig, idx: usize, snr_db: f64) -> Result<(Waveform, Waveform)> {
    let dir = cfg.utterance_dir(Split::Test, idx);
    let clean = read_wav(&dir.join("clean.wav"))?;
    let noise = read_wav(&dir.join("noise.wav"))?;
    let (mixture, _) = mix_at_snr(&clean, &noise, snr_db)?;
    Ok((clean, mixture))
}

/// Enhance every test mixture with every configured method; writes the
/// enhanced waveforms under `workdir/enhanced/<method>/snr_<db>/`.
pub fn cmd_enhance(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let hash = cfg.hash();
    let model = read_model(&cfg.model_path())?;
    let scfg = stft_config(cfg)?;

    let avae = if cfg.methods.contains(&Method::AVae) {
        Some(VaeParams::load(&cfg.prior_path(false))
            .map_err(|_| Error::MissingArtifacts("a-vae prior; run train-prior".into()))?)
    } else {
        None
    };
    let need_cvae = cfg.methods.contains(&Method::CvaeHeadMotion)
        || cfg.methods.contains(&Method::CvaeFrontalized);
    let cvae = if need_cvae {
        Some(VaeParams::load(&cfg.prior_path(true))
            .map_err(|_| Error::MissingArtifacts("cvae prior; run train-prior".into()))?)
    } else {
        None
    };

    for &snr_db in &cfg.snr_grid {
        for idx in 0..cfg.corpus.test_utterances {
            let (clean, mixture) = noisy_mixture(cfg, idx, snr_db)?;
            let noisy_spec = stft(&mixture, &scfg)?;
            let t = noisy_spec.data.ncols();
            for &method in &cfg.methods {
                let out_path = cfg.enhanced_path(method, snr_db, idx);
                std::fs::create_dir_all(out_path.parent().unwrap())?;
                let enhanced: Waveform = match method {
                    Method::Noisy => mixture.clone(),
                    Method::Oracle => {
                        let prior = SpeechPrior::Oracle(stft(&clean, &scfg)?.power());
                        run_vem(cfg, idx, &noisy_spec, &prior)?
                    }
                    Method::AVae => {
                        let prior =
                            SpeechPrior::Vae { params: avae.as_ref().unwrap(), visual: None };
                        run_vem(cfg, idx, &noisy_spec, &prior)?
                    }
                    Method::CvaeHeadMotion | Method::CvaeFrontalized => {
                        let frontalized = method == Method::CvaeFrontalized;
                        let v = visual_features(cfg, &model, Split::Test, idx, frontalized, t)?;
                        let prior = SpeechPrior::Vae {
                            params: cvae.as_ref().unwrap(),
                            visual: Some(&v),
                        };
                        run_vem(cfg, idx, &noisy_spec, &prior)?
                    }
                };
                write_wav(&out_path, &enhanced)?;
            }
        }
        for &method in &cfg.methods {
            let dir = cfg.enhanced_path(method, snr_db, 0);
            write_provenance(dir.parent().unwrap(), &hash)?;
        }
    }
    Ok(())
}

fn run_vem(
    cfg: &ExperimentConfig,
    idx: usize,
    noisy_spec: &crate::spectral::Spectrogram,
    prior: &SpeechPrior,
) -> Result<Waveform> {
    let vem = VemConfig {
        noise_rank: cfg.enhance.noise_rank,
        outer_iters: cfg.enhance.outer_iters,
        inner_iters: 1,
        tol: cfg.enhance.tol,
        seed: utterance_seed(cfg, Split::Test, idx),
    };
    let (enhanced, _, _) = vem_enhance(noisy_spec, prior, &vem)?;
    istft(&enhanced)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub utterance: usize,
    pub snr_db: f64,
    pub method: String,
    pub si_sdr: f64,
    pub stoi: f64,
}

#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub rows: Vec<MetricRow>,
    /// (method, snr) -> (mean si_sdr, mean stoi)
    pub table: BTreeMap<(String, i64), (f64, f64)>,
    pub utterances_per_cell: usize,
}

impl EvaluationReport {
    pub fn cell(&self, method: Method, snr_db: f64) -> Option<(f64, f64)> {
        self.table.get(&(method.label().to_string(), snr_db.round() as i64)).copied()
    }
}

/// Score every enhanced output against the clean reference and emit the
/// per-utterance CSV, the mean table, and the improvement-over-noisy table.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    // refuse stale artifacts
    for idx in 0..cfg.corpus.test_utterances {
        check_provenance(&cfg.utterance_dir(Split::Test, idx), &hash)?;
    }
    for &snr_db in &cfg.snr_grid {
        for &method in &cfg.methods {
            let dir = cfg.enhanced_path(method, snr_db, 0);
            check_provenance(dir.parent().unwrap(), &hash)?;
        }
    }

    let mut rows = Vec::new();
    for &snr_db in &cfg.snr_grid {
        for idx in 0..cfg.corpus.test_utterances {
            let clean = read_wav(&cfg.utterance_dir(Split::Test, idx).join("clean.wav"))?;
            for &method in &cfg.methods {
                let path = cfg.enhanced_path(method, snr_db, idx);
                let est = read_wav(&path)
                    .map_err(|_| Error::MissingArtifacts(format!("{}", path.display())))?;
                // align lengths: istft trims exactly, but be defensive
                let n = est.samples.len().min(clean.samples.len());
                let est = Waveform { samples: est.samples[..n].to_vec(), sample_rate: est.sample_rate };
                let clean_t =
                    Waveform { samples: clean.samples[..n].to_vec(), sample_rate: clean.sample_rate };
                let sdr = si_sdr(&est, &clean_t)?;
                let st = stoi(&est, &clean_t, clean.sample_rate)?;
                rows.push(MetricRow {
                    utterance: idx,
                    snr_db,
                    method: method.label().to_string(),
                    si_sdr: sdr,
                    stoi: st,
                });
            }
        }
    }

    let mut table: BTreeMap<(String, i64), (f64, f64)> = BTreeMap::new();
    for &snr_db in &cfg.snr_grid {
        for &method in &cfg.methods {
            let cell: Vec<&MetricRow> = rows
                .iter()
                .filter(|r| r.method == method.label() && r.snr_db == snr_db)
                .collect();
            let n = cell.len() as f64;
            let mean_sdr = cell.iter().map(|r| r.si_sdr).sum::<f64>() / n;
            let mean_stoi = cell.iter().map(|r| r.stoi).sum::<f64>() / n;
            table.insert((method.label().to_string(), snr_db.round() as i64), (mean_sdr, mean_stoi));
        }
    }

    let reports = cfg.reports_dir();
    std::fs::create_dir_all(&reports)?;

    // per-utterance rows
    {
        let mut file = std::fs::File::create(reports.join("metrics.csv"))?;
        writeln!(file, "# config {hash}")?;
        writeln!(file, "# utterances_per_cell {}", cfg.corpus.test_utterances)?;
        writeln!(file, "utterance,snr_db,method,si_sdr,stoi")?;
        for r in &rows {
            writeln!(file, "{},{},{},{:.6},{:.6}", r.utterance, r.snr_db, r.method, r.si_sdr, r.stoi)?;
        }
    }

    // mean table: rows = methods, columns = SNRs; PESQ deliberately absent
    {
        let mut file = std::fs::File::create(reports.join("table1.csv"))?;
        writeln!(file, "# config {hash}")?;
        writeln!(file, "# utterances_per_cell {}", cfg.corpus.test_utterances)?;
        writeln!(file, "# pesq: - (not reproduced; licensed standard)")?;
        let header: Vec<String> = std::iter::once("method/metric".to_string())
            .chain(cfg.snr_grid.iter().map(|s| format!("{s:+.0}dB")))
            .collect();
        writeln!(file, "{}", header.join(","))?;
        for &method in &cfg.methods {
            for metric in ["si_sdr", "stoi"] {
                let mut row = vec![format!("{}/{}", method.label(), metric)];
                for &snr in &cfg.snr_grid {
                    let (sdr, st) = table[&(method.label().to_string(), snr.round() as i64)];
                    row.push(format!("{:.4}", if metric == "si_sdr" { sdr } else { st }));
                }
                writeln!(file, "{}", row.join(","))?;
            }
        }
    }

    // improvement-over-noisy table
    {
        let mut file = std::fs::File::create(reports.join("improvement.csv"))?;
        writeln!(file, "# config {hash}")?;
        let header: Vec<String> = std::iter::once("method".to_string())
            .chain(cfg.snr_grid.iter().map(|s| format!("{s:+.0}dB")))
            .collect();
        writeln!(file, "{}", header.join(","))?;
        for &method in &cfg.methods {
            if method == Method::Noisy {
                continue;
            }
            let mut row = vec![method.label().to_string()];
            for &snr in &cfg.snr_grid {
                let key_n = ("noisy".to_string(), snr.round() as i64);
                let key_m = (method.label().to_string(), snr.round() as i64);
                if let (Some(&(base, _)), Some(&(val, _))) = (table.get(&key_n), table.get(&key_m)) {
                    row.push(format!("{:+.4}", val - base));
                } else {
                    row.push("-".to_string());
                }
            }
            writeln!(file, "{}", row.join(","))?;
        }
    }

    Ok(EvaluationReport { rows, table, utterances_per_cell: cfg.corpus.test_utterances })
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig4Summary {
    /// RMS deviation of the raw track from the identity-motion track.
    pub raw_rms: f64,
    /// RMS deviation of the frontalized track from the identity-motion track.
    pub frontal_rms: f64,
    pub ratio: f64,
}

/// Upper-lip landmark displacement analysis: compares the raw and
/// frontalized landmark tracks against the identity-motion ground truth
/// and emits one CSV row per frame plus an RMS summary.
pub fn cmd_fig4(cfg: &ExperimentConfig, utterance: usize) -> Result<Fig4Summary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let utt = cfg.utterance_dir(Split::Test, utterance);
    check_provenance(&utt, &hash)?;
    let frontal_dir = cfg.frontal_dir(Split::Test, utterance);
    check_provenance(&frontal_dir, &hash)?;

    let raw = read_landmark_csv(&utt.join("landmarks_raw.csv"))?;
    let identity = read_landmark_csv(&utt.join("landmarks_identity.csv"))?;
    let frontal = read_landmark_csv(&frontal_dir.join("landmarks_frontal.csv"))?;
    if raw.len() != identity.len() || raw.len() != frontal.len() {
        return Err(Error::DimensionMismatch("track lengths differ".into()));
    }
    let j = raw[0].len();
    let lip = crate::morphable::upper_lip_landmark(j);

    // the frontalized track lives in the model frame; the identity track is
    // the articulated model with no pose. Align both to the identity track's
    // per-frame landmark directly.
    let reports = cfg.reports_dir();
    std::fs::create_dir_all(&reports)?;
    let mut file = std::fs::File::create(reports.join("fig4.csv"))?;
    writeln!(file, "# config {hash}")?;
    writeln!(file, "frame,raw_dx,raw_dy,frontal_dx,frontal_dy")?;

    let mut raw_sq = 0.0;
    let mut frontal_sq = 0.0;
    for t in 0..raw.len() {
        let reference = identity[t].points[lip];
        let r = raw[t].points[lip] - reference;
        let f = frontal[t].points[lip] - reference;
        raw_sq += r.x * r.x + r.y * r.y;
        frontal_sq += f.x * f.x + f.y * f.y;
        writeln!(file, "{t},{:.9},{:.9},{:.9},{:.9}", r.x, r.y, f.x, f.y)?;
    }
    let n = raw.len() as f64;
    let raw_rms = (raw_sq / n).sqrt();
    let frontal_rms = (frontal_sq / n).sqrt();
    let summary = Fig4Summary {
        raw_rms,
        frontal_rms,
        ratio: raw_rms / frontal_rms.max(1e-300),
    };
    std::fs::write(reports.join("fig4_summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}
