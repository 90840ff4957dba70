//! Experiment orchestration: synthetic corpus generation, the
//! frontalize/train/enhance pipeline, and report emission.

mod pipeline;
mod synth;

pub use pipeline::{
    cmd_enhance, cmd_evaluate, cmd_fig4, cmd_frontalize, cmd_train_prior, frontalize_track,
    resample_features, EvaluationReport, Fig4Summary, FrontalizedTrack,
};
pub use synth::{
    articulation_program, cmd_synth_data, head_motion_program, read_articulation_csv, synth_noise,
    synth_speech,
    CorpusManifest,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Methods compared in the evaluation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "noisy")]
    Noisy,
    #[serde(rename = "a-vae")]
    AVae,
    #[serde(rename = "cvae-head-motion")]
    CvaeHeadMotion,
    #[serde(rename = "cvae-frontalized")]
    CvaeFrontalized,
    #[serde(rename = "oracle")]
    Oracle,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Noisy => "noisy",
            Method::AVae => "a-vae",
            Method::CvaeHeadMotion => "cvae-head-motion",
            Method::CvaeFrontalized => "cvae-frontalized",
            Method::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedConfig {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train_utterances: usize,
    pub val_utterances: usize,
    pub test_utterances: usize,
    /// Video frames per utterance.
    pub frames_per_utterance: usize,
    pub fps: f64,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StftSettings {
    pub fft_size: usize,
    pub hop: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSettings {
    pub latent_dim: usize,
    pub visual_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnhanceSettings {
    pub noise_rank: usize,
    pub outer_iters: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: SeedConfig,
    pub corpus: CorpusConfig,
    pub snr_grid: Vec<f64>,
    pub methods: Vec<Method>,
    /// Peak yaw of the head-motion program, degrees.
    pub head_motion_deg: f64,
    pub stft: StftSettings,
    pub prior: PriorSettings,
    pub enhance: EnhanceSettings,
    pub workdir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: SeedConfig { train: 1000, val: 2000, test: 3000 },
            corpus: CorpusConfig {
                train_utterances: 8,
                val_utterances: 2,
                test_utterances: 20,
                frames_per_utterance: 40,
                fps: 25.0,
                sample_rate: 16000,
            },
            snr_grid: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            methods: vec![
                Method::Noisy,
                Method::AVae,
                Method::CvaeHeadMotion,
                Method::CvaeFrontalized,
                Method::Oracle,
            ],
            head_motion_deg: 20.0,
            stft: StftSettings { fft_size: 1024, hop: 256 },
            prior: PriorSettings {
                latent_dim: 32,
                visual_dim: 8,
                epochs: 50,
                batch_size: 32,
                learning_rate: 1e-3,
                patience: 15,
            },
            enhance: EnhanceSettings { noise_rank: 8, outer_iters: 15, tol: 1e-6 },
            workdir: PathBuf::from("work"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_grid.is_empty() {
            return Err(Error::InconsistentConfig("empty SNR grid".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InconsistentConfig("empty method list".into()));
        }
        let s = &self.seeds;
        if s.train == s.val || s.train == s.test || s.val == s.test {
            return Err(Error::InconsistentConfig("split seeds must be disjoint".into()));
        }
        if self.corpus.frames_per_utterance == 0
            || self.corpus.train_utterances == 0
            || self.corpus.test_utterances == 0
        {
            return Err(Error::InconsistentConfig("empty corpus".into()));
        }
        if self.corpus.fps <= 0.0 || self.corpus.sample_rate == 0 {
            return Err(Error::InconsistentConfig("bad timing parameters".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::BadFile(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::BadFile(format!("config serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Stable content hash over the full configuration; embedded in every
    /// output artifact for provenance checks.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    // Directory layout under the workdir.
    pub fn corpus_dir(&self, split: Split) -> PathBuf {
        self.workdir.join("corpus").join(split.name())
    }
    pub fn utterance_dir(&self, split: Split, idx: usize) -> PathBuf {
        self.corpus_dir(split).join(format!("utt_{idx:03}"))
    }
    pub fn model_path(&self) -> PathBuf {
        self.workdir.join("model.json")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.workdir.join("manifest.json")
    }
    pub fn frontal_dir(&self, split: Split, idx: usize) -> PathBuf {
        self.workdir.join("frontal").join(split.name()).join(format!("utt_{idx:03}"))
    }
    pub fn prior_path(&self, conditional: bool) -> PathBuf {
        self.workdir.join("priors").join(if conditional { "cvae.json" } else { "avae.json" })
    }
    pub fn enhanced_path(&self, method: Method, snr_db: f64, idx: usize) -> PathBuf {
        self.workdir
            .join("enhanced")
            .join(method.label())
            .join(format!("snr_{snr_db:+.0}"))
            .join(format!("utt_{idx:03}.wav"))
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.workdir.join("reports")
    }

    pub fn split_seed(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.seeds.train,
            Split::Val => self.seeds.val,
            Split::Test => self.seeds.test,
        }
    }

    pub fn split_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.corpus.train_utterances,
            Split::Val => self.corpus.val_utterances,
            Split::Test => self.corpus.test_utterances,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// Provenance sidecar written next to generated artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
}

pub fn write_provenance(dir: &Path, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let p = Provenance { config_hash: config_hash.to_string() };
    std::fs::write(dir.join("provenance.json"), serde_json::to_vec_pretty(&p)?)?;
    Ok(())
}

pub fn check_provenance(dir: &Path, config_hash: &str) -> Result<()> {
    let path = dir.join("provenance.json");
    let bytes = std::fs::read(&path)
        .map_err(|_| Error::MissingArtifacts(format!("no provenance at {}", path.display())))?;
    let p: Provenance = serde_json::from_slice(&bytes)?;
    if p.config_hash != config_hash {
        return Err(Error::MissingArtifacts(format!(
            "stale artifacts at {}: config hash mismatch",
            dir.display()
        )));
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    Ok(s)
}
