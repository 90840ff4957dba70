//! Adam training loop with early stopping on a validation split.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::net::{elbo, Frame, Layer, VaeGrads, VaeParams};

/// Training corpus: rows of `power` are frequency bins, columns are frames.
/// `visual` (frames x M), when present, is aligned column-to-row with the
/// power frames.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub power: Array2<f64>,
    pub visual: Option<Array2<f64>>,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.power.ncols()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.as_ref().map_or(0, |v| v.ncols())
    }

    fn validate(&self) -> Result<()> {
        if self.power.ncols() == 0 {
            return Err(Error::DegenerateInput("dataset has no frames".into()));
        }
        if let Some(v) = &self.visual {
            if v.nrows() != self.power.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "{} visual rows for {} frames",
                    v.nrows(),
                    self.power.ncols()
                )));
            }
        }
        if self.power.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::DegenerateInput("power must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-4,
            patience: 10,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_elbo: Vec<f64>,
    pub val_elbo: Vec<f64>,
    pub best_epoch: usize,
}

struct AdamState {
    m: VaeGrads,
    v: VaeGrads,
    t: u64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_step(params: &mut VaeParams, grads: &VaeGrads, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let bc1 = 1.0 - ADAM_B1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_B2.powi(state.t as i32);
    // ascent on the ELBO
    let step = |p: &mut Layer, g: &Layer, m: &mut Layer, v: &mut Layer| {
        for ((pw, gw), (mw, vw)) in p
            .w
            .iter_mut()
            .zip(g.w.iter())
            .zip(m.w.iter_mut().zip(v.w.iter_mut()))
        {
            *mw = ADAM_B1 * *mw + (1.0 - ADAM_B1) * gw;
            *vw = ADAM_B2 * *vw + (1.0 - ADAM_B2) * gw * gw;
            *pw += lr * (*mw / bc1) / ((*vw / bc2).sqrt() + ADAM_EPS);
        }
        for ((pb, gb), (mb, vb)) in p
            .b
            .iter_mut()
            .zip(g.b.iter())
            .zip(m.b.iter_mut().zip(v.b.iter_mut()))
        {
            *mb = ADAM_B1 * *mb + (1.0 - ADAM_B1) * gb;
            *vb = ADAM_B2 * *vb + (1.0 - ADAM_B2) * gb * gb;
            *pb += lr * (*mb / bc1) / ((*vb / bc2).sqrt() + ADAM_EPS);
        }
    };
    step(&mut params.enc_hidden, &grads.enc_hidden, &mut state.m.enc_hidden, &mut state.v.enc_hidden);
    step(&mut params.enc_mu, &grads.enc_mu, &mut state.m.enc_mu, &mut state.v.enc_mu);
    step(&mut params.enc_logvar, &grads.enc_logvar, &mut state.m.enc_logvar, &mut state.v.enc_logvar);
    step(&mut params.dec_hidden, &grads.dec_hidden, &mut state.m.dec_hidden, &mut state.v.dec_hidden);
    step(&mut params.dec_logvar, &grads.dec_logvar, &mut state.m.dec_logvar, &mut state.v.dec_logvar);
    if let (Some(p), Some(g), Some(m), Some(v)) = (
        params.prior_hidden.as_mut(),
        grads.prior_hidden.as_ref(),
        state.m.prior_hidden.as_mut(),
        state.v.prior_hidden.as_mut(),
    ) {
        step(p, g, m, v);
    }
    if let (Some(p), Some(g), Some(m), Some(v)) = (
        params.prior_mu.as_mut(),
        grads.prior_mu.as_ref(),
        state.m.prior_mu.as_mut(),
        state.v.prior_mu.as_mut(),
    ) {
        step(p, g, m, v);
    }
    if let (Some(p), Some(g), Some(m), Some(v)) = (
        params.prior_logvar.as_mut(),
        grads.prior_logvar.as_ref(),
        state.m.prior_logvar.as_mut(),
        state.v.prior_logvar.as_mut(),
    ) {
        step(p, g, m, v);
    }
}

fn frames_for<'a>(
    frames: &'a Array2<f64>,
    visual: Option<&'a Array2<f64>>,
    idx: &[usize],
) -> Vec<Frame<'a>> {
    idx.iter()
        .map(|&i| {
            let p = frames.row(i).to_slice().expect("frame rows contiguous");
            let v = visual.map(|vm| vm.row(i).to_slice().expect("visual rows contiguous"));
            (p, v)
        })
        .collect()
}

/// Fit the speech prior. Deterministic for a fixed config and dataset;
/// returns the parameters from the best validation epoch.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(VaeParams, TrainReport)> {
    data.validate()?;
    let f = data.power.nrows();
    let m = data.visual_dim();
    let n = data.num_frames();
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 4 {
        return Err(Error::DegenerateInput(format!("only {n} frames, need at least 4")));
    }

    // power is stored bins x frames; transpose so each frame is a
    // contiguous row
    let frames = data.power.t().as_standard_layout().to_owned();
    let visual = data.visual.as_ref();

    let mut params = VaeParams::init(f, cfg.latent_dim, m, cfg.seed);
    // standardization stats from the training portion
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(n_val);
    for f_i in 0..f {
        let logs: Vec<f64> = train_idx
            .iter()
            .map(|&t| (frames[(t, f_i)] + 1e-10).ln())
            .collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / logs.len() as f64;
        params.log_power_mean[f_i] = mean;
        params.log_power_std[f_i] = var.sqrt().max(1e-6);
    }
    // start the decoder variance head at the data's per-bin scale so early
    // gradients refine the spectrum shape instead of chasing its magnitude
    params.dec_logvar.b.assign(&params.log_power_mean);

    let mut adam = AdamState {
        m: VaeGrads::zeros_like(&params),
        v: VaeGrads::zeros_like(&params),
        t: 0,
    };

    let val_frames_idx: Vec<usize> = val_idx.to_vec();
    let mut train_order: Vec<usize> = train_idx.to_vec();

    let mut best_val = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut report = TrainReport { train_elbo: Vec::new(), val_elbo: Vec::new(), best_epoch: 0 };

    for epoch in 0..cfg.epochs {
        train_order.shuffle(&mut rng);
        let mut epoch_elbo = 0.0;
        let mut batches = 0usize;
        for chunk in train_order.chunks(cfg.batch_size.max(1)) {
            let batch = frames_for(&frames, visual, chunk);
            let (e, grads) = elbo(&params, &batch, &mut rng)?;
            if !e.is_finite() {
                return Err(Error::NonFinite(format!("ELBO at epoch {epoch}")));
            }
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate);
            epoch_elbo += e;
            batches += 1;
        }
        report.train_elbo.push(epoch_elbo / batches.max(1) as f64);

        // validation with a fixed rng so the early-stopping signal is stable
        let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f00d);
        let val_batch = frames_for(&frames, visual, &val_frames_idx);
        let (val_e, _) = elbo(&params, &val_batch, &mut val_rng)?;
        report.val_elbo.push(val_e);

        if val_e > best_val {
            best_val = val_e;
            best_params = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    report.best_epoch = best_epoch;
    Ok((best_params, report))
}
