//! Speech enhancement by variational EM: a frozen speech prior supplies
//! per-frame speech variances, an Itakura-Saito NMF models the noise, and a
//! Wiener filter recovers the clean spectrogram.
//!
//! Observation model per time-frequency bin: the noisy power P is explained
//! by v_o = g_t * v_s + (W H), where v_s comes from the speech prior, g_t is
//! a per-frame speech gain, and W (F x Kn) / H (Kn x T) are the nonnegative
//! noise factors. All multiplicative updates are exact
//! majorization-minimization steps for the Itakura-Saito divergence
//! D_IS(P || v_o), so the divergence never increases.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{decode, decode_cached, decode_vjp_cached, encode, latent_prior, DecodeCache, VaeParams};
use crate::spectral::Spectrogram;

/// Numerical floor applied to variances, gains, and NMF factors.
pub const VARIANCE_EPS: f64 = 1e-12;

/// Nonnegative noise model: rank-Kn spectral factorization plus a per-frame
/// speech gain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NmfNoiseModel {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
    /// Per-frame gain applied to the speech variance.
    pub gain: Array1<f64>,
}

impl NmfNoiseModel {
    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    /// Noise variance field W H (F x T).
    pub fn noise_variance(&self) -> Array2<f64> {
        self.w.dot(&self.h)
    }
}

#[derive(Debug, Clone)]
pub struct VemConfig {
    pub noise_rank: usize,
    pub outer_iters: usize,
    /// M-step sweeps per outer iteration.
    pub inner_iters: usize,
    /// Relative tolerance on the Itakura-Saito divergence.
    pub tol: f64,
    pub seed: u64,
}

impl Default for VemConfig {
    fn default() -> Self {
        Self { noise_rank: 8, outer_iters: 50, inner_iters: 1, tol: 1e-6, seed: 0 }
    }
}

/// Where the per-frame speech variances come from.
pub enum SpeechPrior<'a> {
    /// A fixed variance field (F x T), e.g. the true clean power.
    Oracle(Array2<f64>),
    /// A trained model; variances are re-estimated each outer iteration by
    /// encoding the current clean-power estimate (posterior mean) and
    /// decoding. `visual`, when present, is T rows of M features.
    Vae { params: &'a VaeParams, visual: Option<&'a Array2<f64>> },
}

#[derive(Debug, Clone, Serialize)]
pub struct EnhanceDiagnostics {
    pub divergence: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

pub fn itakura_saito(p: &Array2<f64>, v: &Array2<f64>) -> f64 {
    p.iter()
        .zip(v.iter())
        .map(|(&pi, &vi)| {
            let r = pi.max(VARIANCE_EPS) / vi.max(VARIANCE_EPS);
            r - r.ln() - 1.0
        })
        .sum()
}

/// Random nonnegative initialization, scaled so the initial noise field
/// matches the mean noisy power of the first three frames. Gains start at 1.
pub fn init_noise_model(power: &Array2<f64>, rank: usize, seed: u64) -> NmfNoiseModel {
    let (f, t) = power.dim();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut w = Array2::from_shape_fn((f, rank), |_| 0.1 + 0.9 * rng.random::<f64>());
    let h = Array2::from_shape_fn((rank, t), |_| 0.1 + 0.9 * rng.random::<f64>());
    let head = t.min(3);
    let target = power
        .slice(ndarray::s![.., ..head])
        .mean()
        .unwrap_or(1.0)
        .max(VARIANCE_EPS);
    let current = w.dot(&h).mean().unwrap_or(1.0).max(VARIANCE_EPS);
    w.mapv_inplace(|x| x * target / current);
    NmfNoiseModel { w, h, gain: Array1::ones(t) }
}

pub fn total_variance(model: &NmfNoiseModel, v_s: &Array2<f64>) -> Array2<f64> {
    let mut v = model.w.dot(&model.h);
    for ((fi, ti), val) in v.indexed_iter_mut() {
        *val = (*val + model.gain[ti] * v_s[(fi, ti)]).max(VARIANCE_EPS);
        let _ = fi;
    }
    v
}

/// One sweep of multiplicative updates for H, W, and the speech gain given
/// fixed speech variances `v_s`. Exact MM for D_IS(P || g v_s + W H).
pub fn m_step_nmf(model: &mut NmfNoiseModel, power: &Array2<f64>, v_s: &Array2<f64>) {
    let (f, t) = power.dim();

    // H update: H <- H * (W^T (P / v_o^2)) / (W^T (1 / v_o))
    let v_o = total_variance(model, v_s);
    let p_over_v2 = Array2::from_shape_fn((f, t), |(i, j)| power[(i, j)] / (v_o[(i, j)] * v_o[(i, j)]));
    let inv_v = v_o.mapv(|v| 1.0 / v);
    let num = model.w.t().dot(&p_over_v2);
    let den = model.w.t().dot(&inv_v);
    for ((k, j), h) in model.h.indexed_iter_mut() {
        *h = (*h * num[(k, j)] / den[(k, j)].max(VARIANCE_EPS)).max(VARIANCE_EPS);
    }

    // W update: W <- W * ((P / v_o^2) H^T) / ((1 / v_o) H^T)
    let v_o = total_variance(model, v_s);
    let p_over_v2 = Array2::from_shape_fn((f, t), |(i, j)| power[(i, j)] / (v_o[(i, j)] * v_o[(i, j)]));
    let inv_v = v_o.mapv(|v| 1.0 / v);
    let num = p_over_v2.dot(&model.h.t());
    let den = inv_v.dot(&model.h.t());
    for ((i, k), w) in model.w.indexed_iter_mut() {
        *w = (*w * num[(i, k)] / den[(i, k)].max(VARIANCE_EPS)).max(VARIANCE_EPS);
    }

    // gain update: g_t <- g_t * sum_f(P v_s / v_o^2) / sum_f(v_s / v_o)
    let v_o = total_variance(model, v_s);
    for j in 0..t {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..f {
            let vo = v_o[(i, j)];
            num += power[(i, j)] * v_s[(i, j)] / (vo * vo);
            den += v_s[(i, j)] / vo;
        }
        if den > 0.0 {
            model.gain[j] = (model.gain[j] * num / den).max(VARIANCE_EPS);
        }
    }
}

/// MAP ascent steps per outer iteration for learned priors.
const MAP_STEPS: usize = 2;

fn check_vae_dims(
    params: &VaeParams,
    visual: &Option<&Array2<f64>>,
    (f, t): (usize, usize),
) -> Result<()> {
    if f != params.f {
        return Err(Error::DimensionMismatch(format!(
            "spectrogram has {f} bins, prior expects {}",
            params.f
        )));
    }
    if let Some(vm) = visual {
        if vm.nrows() != t || vm.ncols() != params.m {
            return Err(Error::DimensionMismatch(format!(
                "visual features {:?} for T={t}, M={}",
                vm.dim(),
                params.m
            )));
        }
    } else if params.m != 0 {
        return Err(Error::MissingArtifacts(
            "conditional prior requires visual features".into(),
        ));
    }
    Ok(())
}

fn prior_variances(
    prior: &SpeechPrior,
    clean_power: &Array2<f64>,
) -> Result<Array2<f64>> {
    match prior {
        SpeechPrior::Oracle(v) => {
            if v.dim() != clean_power.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "oracle prior {:?} vs spectrogram {:?}",
                    v.dim(),
                    clean_power.dim()
                )));
            }
            Ok(v.mapv(|x| x.max(VARIANCE_EPS)))
        }
        SpeechPrior::Vae { params, visual } => {
            let (f, t) = clean_power.dim();
            if f != params.f {
                return Err(Error::DimensionMismatch(format!(
                    "spectrogram has {f} bins, prior expects {}",
                    params.f
                )));
            }
            if let Some(vm) = visual {
                if vm.nrows() != t || vm.ncols() != params.m {
                    return Err(Error::DimensionMismatch(format!(
                        "visual features {:?} for T={t}, M={}",
                        vm.dim(),
                        params.m
                    )));
                }
            } else if params.m != 0 {
                return Err(Error::MissingArtifacts(
                    "conditional prior requires visual features".into(),
                ));
            }
            let mut v_s = Array2::<f64>::zeros((f, t));
            let mut frame = vec![0.0; f];
            for j in 0..t {
                for i in 0..f {
                    frame[i] = clean_power[(i, j)];
                }
                let vrow: Option<Vec<f64>> = visual.map(|vm| vm.row(j).to_vec());
                let (mu, _) = encode(params, &frame, vrow.as_deref())?;
                let var = decode(params, mu.as_slice().unwrap(), vrow.as_deref())?;
                for i in 0..f {
                    v_s[(i, j)] = var[i].max(VARIANCE_EPS);
                }
            }
            Ok(v_s)
        }
    }
}

/// Wiener estimate of the clean spectrogram from per-bin speech and noise
/// variances. The gain v_s / (v_s + v_b) is strictly inside (0, 1).
pub fn wiener_filter(
    noisy: &Spectrogram,
    v_speech: &Array2<f64>,
    v_noise: &Array2<f64>,
) -> Result<Spectrogram> {
    let dims = (noisy.data.nrows(), noisy.data.ncols());
    if v_speech.dim() != dims || v_noise.dim() != dims {
        return Err(Error::DimensionMismatch("variance fields vs spectrogram".into()));
    }
    let mut out = noisy.clone();
    for ((i, j), c) in out.data.indexed_iter_mut() {
        let vs = v_speech[(i, j)].max(VARIANCE_EPS);
        let vb = v_noise[(i, j)].max(VARIANCE_EPS);
        *c *= vs / (vs + vb);
    }
    Ok(out)
}

/// Variational EM enhancement. Returns the Wiener-filtered spectrogram, the
/// fitted noise model, and the divergence trace.
pub fn vem_enhance(
    noisy: &Spectrogram,
    prior: &SpeechPrior,
    cfg: &VemConfig,
) -> Result<(Spectrogram, NmfNoiseModel, EnhanceDiagnostics)> {
    let power = noisy.power();
    if power.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("noisy power".into()));
    }
    let mut model = init_noise_model(&power, cfg.noise_rank, cfg.seed);
    // Learned priors carry per-frame MAP latents, initialized by encoding
    // the noisy power; later E-steps refine them against the full mixture
    // likelihood instead of re-encoding (the encoder only ever saw clean
    // speech, so it is unreliable on mixtures).
    let mut latents: Vec<Vec<f64>> = Vec::new();
    let mut ascent_step: Vec<f64> = Vec::new();
    let mut v_s = match prior {
        SpeechPrior::Oracle(_) => prior_variances(prior, &power)?,
        SpeechPrior::Vae { params, visual } => {
            check_vae_dims(params, visual, power.dim())?;
            let (f, t) = power.dim();
            let mut vs = Array2::<f64>::zeros((f, t));
            let mut frame = vec![0.0; f];
            for j in 0..t {
                for i in 0..f {
                    frame[i] = power[(i, j)];
                }
                let vrow: Option<Vec<f64>> = visual.map(|vm| vm.row(j).to_vec());
                let (mu, _) = encode(params, &frame, vrow.as_deref())?;
                let var = decode(params, mu.as_slice().unwrap(), vrow.as_deref())?;
                for i in 0..f {
                    vs[(i, j)] = var[i].max(VARIANCE_EPS);
                }
                latents.push(mu.to_vec());
            }
            ascent_step = vec![0.1; t];
            vs
        }
    };

    let mut diag = EnhanceDiagnostics { divergence: Vec::new(), converged: false, iterations: 0 };
    let mut prev = f64::INFINITY;
    for it in 0..cfg.outer_iters {
        // M-step: noise factors and gain under the current speech variances
        for _ in 0..cfg.inner_iters.max(1) {
            m_step_nmf(&mut model, &power, &v_s);
        }
        let v_o = total_variance(&model, &v_s);
        let d = itakura_saito(&power, &v_o);
        diag.divergence.push(d);
        diag.iterations = it + 1;
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("divergence at iteration {it}")));
        }
        let rel = (prev - d).abs() / prev.abs().max(1.0);
        if rel < cfg.tol {
            diag.converged = true;
            break;
        }
        prev = d;

        // E-step: per-frame MAP ascent on the latent posterior under the
        // current noise model, with a backtracking step size per frame
        if let SpeechPrior::Vae { params, visual } = prior {
            let v_noise = model.noise_variance();
            let (f, t) = power.dim();
            let mut upstream = vec![0.0; f];
            for j in 0..t {
                let vrow: Option<Vec<f64>> = visual.map(|vm| vm.row(j).to_vec());
                let (pm, plv) = latent_prior(params, vrow.as_deref())?;
                let g_j = model.gain[j].max(VARIANCE_EPS);
                // objective and its pieces share one decoder forward pass
                let evaluate = |z: &[f64]| -> Result<(f64, Array1<f64>, DecodeCache)> {
                    let (var, cache) = decode_cached(params, z, vrow.as_deref())?;
                    let mut o = 0.0;
                    for i in 0..f {
                        let vo = (g_j * var[i] + v_noise[(i, j)]).max(VARIANCE_EPS);
                        o += -vo.ln() - power[(i, j)] / vo;
                    }
                    for l in 0..params.l {
                        o -= 0.5 * (z[l] - pm[l]).powi(2) / plv[l].exp();
                    }
                    Ok((o, var, cache))
                };
                let z = &mut latents[j];
                let (mut cur, mut var, mut cache) = evaluate(z)?;
                for _ in 0..MAP_STEPS {
                    for i in 0..f {
                        let vo = (g_j * var[i] + v_noise[(i, j)]).max(VARIANCE_EPS);
                        upstream[i] = g_j * (power[(i, j)] / (vo * vo) - 1.0 / vo);
                    }
                    let mut g_z = decode_vjp_cached(params, &cache, &upstream)?;
                    for l in 0..params.l {
                        g_z[l] -= (z[l] - pm[l]) / plv[l].exp();
                    }
                    let mut accepted = false;
                    for _ in 0..8 {
                        let cand: Vec<f64> = z
                            .iter()
                            .zip(g_z.iter())
                            .map(|(zi, gi)| zi + ascent_step[j] * gi)
                            .collect();
                        let (co, cvar, ccache) = evaluate(&cand)?;
                        if co > cur {
                            *z = cand;
                            cur = co;
                            var = cvar;
                            cache = ccache;
                            ascent_step[j] = (ascent_step[j] * 1.5).min(1.0);
                            accepted = true;
                            break;
                        }
                        ascent_step[j] *= 0.5;
                    }
                    if !accepted {
                        break;
                    }
                }
                for i in 0..f {
                    v_s[(i, j)] = var[i].max(VARIANCE_EPS);
                }
            }
        }
    }

    let v_noise = model.noise_variance();
    let mut v_speech = v_s;
    for ((_, j), vs) in v_speech.indexed_iter_mut() {
        *vs = (model.gain[j] * *vs).max(VARIANCE_EPS);
    }
    let enhanced = wiener_filter(noisy, &v_speech, &v_noise)?;
    Ok((enhanced, model, diag))
}
