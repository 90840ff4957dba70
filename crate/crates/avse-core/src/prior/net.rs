//! Network parameters, forward passes, and the ELBO with hand-written
//! backpropagation.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const HIDDEN: usize = 128;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { w: Array2::zeros((out_dim, in_dim)), b: Array1::zeros(out_dim) }
    }

    fn glorot(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| {
                (rng.random::<f64>() * 2.0 - 1.0) * bound
            }),
            b: Array1::zeros(out_dim),
        }
    }

    fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }
}

/// Full parameter set for the (C)VAE.
///
/// With `m == 0` the model is audio-only and the latent prior is standard
/// normal; with `m > 0` visual features are concatenated to encoder and
/// decoder inputs and a prior network maps them to the latent prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeParams {
    pub f: usize,
    pub l: usize,
    pub m: usize,
    pub seed: u64,
    pub enc_hidden: Layer,
    pub enc_mu: Layer,
    pub enc_logvar: Layer,
    pub dec_hidden: Layer,
    pub dec_logvar: Layer,
    pub prior_hidden: Option<Layer>,
    pub prior_mu: Option<Layer>,
    pub prior_logvar: Option<Layer>,
    /// Per-bin mean of log power over the training set.
    pub log_power_mean: Array1<f64>,
    /// Per-bin std of log power over the training set.
    pub log_power_std: Array1<f64>,
}

impl VaeParams {
    pub fn init(f: usize, l: usize, m: usize, seed: u64) -> Self {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let (ph, pm, pv) = if m > 0 {
            (
                Some(Layer::glorot(HIDDEN, m, &mut rng)),
                Some(Layer::glorot(l, HIDDEN, &mut rng)),
                Some(Layer::glorot(l, HIDDEN, &mut rng)),
            )
        } else {
            (None, None, None)
        };
        Self {
            f,
            l,
            m,
            seed,
            enc_hidden: Layer::glorot(HIDDEN, f + m, &mut rng),
            enc_mu: Layer::glorot(l, HIDDEN, &mut rng),
            enc_logvar: Layer::glorot(l, HIDDEN, &mut rng),
            dec_hidden: Layer::glorot(HIDDEN, l + m, &mut rng),
            dec_logvar: Layer::glorot(f, HIDDEN, &mut rng),
            prior_hidden: ph,
            prior_mu: pm,
            prior_logvar: pv,
            log_power_mean: Array1::zeros(f),
            log_power_std: Array1::ones(f),
        }
    }

    fn encoder_input(&self, power_frame: &[f64], v: Option<&[f64]>) -> Result<Array1<f64>> {
        if power_frame.len() != self.f {
            return Err(Error::DimensionMismatch(format!(
                "frame has {} bins, model F={}",
                power_frame.len(),
                self.f
            )));
        }
        let vlen = v.map_or(0, |v| v.len());
        if vlen != self.m {
            return Err(Error::DimensionMismatch(format!(
                "visual dim {vlen}, model M={}",
                self.m
            )));
        }
        let mut x = Array1::<f64>::zeros(self.f + self.m);
        for (i, &p) in power_frame.iter().enumerate() {
            x[i] = ((p + 1e-10).ln() - self.log_power_mean[i]) / self.log_power_std[i];
        }
        if let Some(v) = v {
            for (i, &vi) in v.iter().enumerate() {
                x[self.f + i] = vi;
            }
        }
        Ok(x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if p.enc_hidden.w.ncols() != p.f + p.m || p.dec_logvar.w.nrows() != p.f {
            return Err(Error::BadFile("inconsistent tensor shapes".into()));
        }
        Ok(p)
    }
}

/// Gradients, mirroring the parameter tensors.
#[derive(Debug, Clone)]
pub struct VaeGrads {
    pub enc_hidden: Layer,
    pub enc_mu: Layer,
    pub enc_logvar: Layer,
    pub dec_hidden: Layer,
    pub dec_logvar: Layer,
    pub prior_hidden: Option<Layer>,
    pub prior_mu: Option<Layer>,
    pub prior_logvar: Option<Layer>,
}

impl VaeGrads {
    pub fn zeros_like(p: &VaeParams) -> Self {
        let z = |l: &Layer| Layer::zeros(l.w.nrows(), l.w.ncols());
        Self {
            enc_hidden: z(&p.enc_hidden),
            enc_mu: z(&p.enc_mu),
            enc_logvar: z(&p.enc_logvar),
            dec_hidden: z(&p.dec_hidden),
            dec_logvar: z(&p.dec_logvar),
            prior_hidden: p.prior_hidden.as_ref().map(z),
            prior_mu: p.prior_mu.as_ref().map(z),
            prior_logvar: p.prior_logvar.as_ref().map(z),
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.for_each_mut(|l| {
            l.w.mapv_inplace(|v| v * c);
            l.b.mapv_inplace(|v| v * c);
        });
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Layer)) {
        f(&mut self.enc_hidden);
        f(&mut self.enc_mu);
        f(&mut self.enc_logvar);
        f(&mut self.dec_hidden);
        f(&mut self.dec_logvar);
        if let Some(l) = self.prior_hidden.as_mut() {
            f(l);
        }
        if let Some(l) = self.prior_mu.as_mut() {
            f(l);
        }
        if let Some(l) = self.prior_logvar.as_mut() {
            f(l);
        }
    }
}

/// Posterior mean and log-variance for a power frame (optionally with
/// visual conditioning).
pub fn encode(
    params: &VaeParams,
    power_frame: &[f64],
    v: Option<&[f64]>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let x = params.encoder_input(power_frame, v)?;
    let h = params.enc_hidden.forward(&x).mapv(f64::tanh);
    Ok((params.enc_mu.forward(&h), params.enc_logvar.forward(&h)))
}

/// Per-bin variance sigma^2(z, v), strictly positive.
pub fn decode(params: &VaeParams, z: &[f64], v: Option<&[f64]>) -> Result<Array1<f64>> {
    if z.len() != params.l {
        return Err(Error::DimensionMismatch(format!(
            "z has {} dims, model L={}",
            z.len(),
            params.l
        )));
    }
    let vlen = v.map_or(0, |v| v.len());
    if vlen != params.m {
        return Err(Error::DimensionMismatch(format!(
            "visual dim {vlen}, model M={}",
            params.m
        )));
    }
    let mut zin = Array1::<f64>::zeros(params.l + params.m);
    for (i, &zi) in z.iter().enumerate() {
        zin[i] = zi;
    }
    if let Some(v) = v {
        for (i, &vi) in v.iter().enumerate() {
            zin[params.l + i] = vi;
        }
    }
    let h = params.dec_hidden.forward(&zin).mapv(f64::tanh);
    Ok(params.dec_logvar.forward(&h).mapv(|d| d.exp() + VARIANCE_FLOOR))
}

/// Intermediate decoder activations kept so a later vector-Jacobian
/// product does not repeat the forward pass.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    h: Array1<f64>,
    d: Array1<f64>,
}

/// Decode returning both the variance and the cached activations.
pub fn decode_cached(
    params: &VaeParams,
    z: &[f64],
    v: Option<&[f64]>,
) -> Result<(Array1<f64>, DecodeCache)> {
    if z.len() != params.l {
        return Err(Error::DimensionMismatch(format!(
            "z has {} dims, model L={}",
            z.len(),
            params.l
        )));
    }
    let vlen = v.map_or(0, |v| v.len());
    if vlen != params.m {
        return Err(Error::DimensionMismatch(format!(
            "visual dim {vlen}, model M={}",
            params.m
        )));
    }
    let mut zin = Array1::<f64>::zeros(params.l + params.m);
    for (i, &zi) in z.iter().enumerate() {
        zin[i] = zi;
    }
    if let Some(v) = v {
        for (i, &vi) in v.iter().enumerate() {
            zin[params.l + i] = vi;
        }
    }
    let h = params.dec_hidden.forward(&zin).mapv(f64::tanh);
    let d = params.dec_logvar.forward(&h);
    let var = d.mapv(|di| di.exp() + VARIANCE_FLOOR);
    Ok((var, DecodeCache { h, d }))
}

/// Vector-Jacobian product for the latent from cached activations: given
/// `upstream` = dL/d(variance), returns dL/dz.
pub fn decode_vjp_cached(
    params: &VaeParams,
    cache: &DecodeCache,
    upstream: &[f64],
) -> Result<Array1<f64>> {
    if upstream.len() != params.f {
        return Err(Error::DimensionMismatch(format!(
            "upstream {} (F={})",
            upstream.len(),
            params.f
        )));
    }
    // backprop: dL/dd = upstream * exp(d), then through tanh and dec_hidden
    let g_d = Array1::from_shape_fn(params.f, |i| upstream[i] * cache.d[i].exp());
    let delta_h = params.dec_logvar.w.t().dot(&g_d) * cache.h.mapv(|hi| 1.0 - hi * hi);
    let g_zin = params.dec_hidden.w.t().dot(&delta_h);
    Ok(Array1::from_shape_fn(params.l, |i| g_zin[i]))
}

/// Decode plus a vector-Jacobian product for the latent: given
/// `upstream` = dL/d(variance), returns the decoded variance and dL/dz.
pub fn decode_vjp(
    params: &VaeParams,
    z: &[f64],
    v: Option<&[f64]>,
    upstream: &[f64],
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (var, cache) = decode_cached(params, z, v)?;
    let g_z = decode_vjp_cached(params, &cache, upstream)?;
    Ok((var, g_z))
}

/// Latent prior (mean, log-variance) given visual features; standard
/// normal for the audio-only model.
pub fn latent_prior(params: &VaeParams, v: Option<&[f64]>) -> Result<(Array1<f64>, Array1<f64>)> {
    match (&params.prior_hidden, &params.prior_mu, &params.prior_logvar, v) {
        (Some(ph), Some(pm), Some(pv), Some(vf)) => {
            if vf.len() != params.m {
                return Err(Error::DimensionMismatch("visual dim".into()));
            }
            let x = Array1::from_vec(vf.to_vec());
            let h = ph.forward(&x).mapv(f64::tanh);
            Ok((pm.forward(&h), pv.forward(&h)))
        }
        _ => Ok((Array1::zeros(params.l), Array1::zeros(params.l))),
    }
}

/// One training frame: raw power spectrum plus optional visual features.
pub type Frame<'a> = (&'a [f64], Option<&'a [f64]>);

/// Mean ELBO over a batch with one reparameterized latent sample per frame,
/// and its gradients with respect to every parameter tensor.
///
/// ELBO per frame: sum_f [-log sigma^2_f - p_f / sigma^2_f] - KL(q || prior).
pub fn elbo(params: &VaeParams, batch: &[Frame], rng: &mut ChaCha8Rng) -> Result<(f64, VaeGrads)> {
    if batch.is_empty() {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    let mut grads = VaeGrads::zeros_like(params);
    let mut total = 0.0;
    let l_dim = params.l;

    for (power, v) in batch {
        // ---- forward ----
        let x = params.encoder_input(power, *v)?;
        let a1 = params.enc_hidden.forward(&x);
        let h1 = a1.mapv(f64::tanh);
        let mu = params.enc_mu.forward(&h1);
        let lv = params.enc_logvar.forward(&h1);

        let eps = Array1::from_shape_fn(l_dim, |_| {
            // Box-Muller; two uniforms per normal draw
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let std_half = lv.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std_half * &eps);

        let mut zin = Array1::<f64>::zeros(params.l + params.m);
        zin.slice_mut(ndarray::s![..params.l]).assign(&z);
        if let Some(v) = v {
            for (i, &vi) in v.iter().enumerate() {
                zin[params.l + i] = vi;
            }
        }
        let a2 = params.dec_hidden.forward(&zin);
        let h2 = a2.mapv(f64::tanh);
        let d = params.dec_logvar.forward(&h2);
        let var = d.mapv(|di| di.exp() + VARIANCE_FLOOR);

        let mut recon = 0.0;
        for i in 0..params.f {
            recon += -var[i].ln() - power[i] / var[i];
        }

        let (pm, plv) = latent_prior(params, *v)?;
        let mut kl = 0.0;
        for i in 0..l_dim {
            let diff = mu[i] - pm[i];
            kl += 0.5 * (plv[i] - lv[i] + (lv[i].exp() + diff * diff) / plv[i].exp() - 1.0);
        }
        let obj = recon - kl;
        if !obj.is_finite() {
            return Err(Error::NonFinite(format!("ELBO term: recon={recon}, kl={kl}")));
        }
        total += obj;

        // ---- backward ----
        // d recon / d d_i = (-1/var + p/var^2) * exp(d)
        let g_d = Array1::from_shape_fn(params.f, |i| {
            (-1.0 / var[i] + power[i] / (var[i] * var[i])) * d[i].exp()
        });
        grads.dec_logvar.w += &outer(&g_d, &h2);
        grads.dec_logvar.b += &g_d;
        let da2 = params.dec_logvar.w.t().dot(&g_d) * h2.mapv(|h| 1.0 - h * h);
        grads.dec_hidden.w += &outer(&da2, &zin);
        grads.dec_hidden.b += &da2;
        let g_zin = params.dec_hidden.w.t().dot(&da2);
        let g_z = g_zin.slice(ndarray::s![..l_dim]).to_owned();

        // KL gradients (note obj = recon - kl)
        let g_mu_kl = Array1::from_shape_fn(l_dim, |i| (mu[i] - pm[i]) / plv[i].exp());
        let g_lv_kl =
            Array1::from_shape_fn(l_dim, |i| 0.5 * (lv[i].exp() / plv[i].exp() - 1.0));

        let g_mu = &g_z - &g_mu_kl;
        let g_lv = Array1::from_shape_fn(l_dim, |i| {
            g_z[i] * 0.5 * std_half[i] * eps[i] - g_lv_kl[i]
        });

        grads.enc_mu.w += &outer(&g_mu, &h1);
        grads.enc_mu.b += &g_mu;
        grads.enc_logvar.w += &outer(&g_lv, &h1);
        grads.enc_logvar.b += &g_lv;
        let da1 = (params.enc_mu.w.t().dot(&g_mu) + params.enc_logvar.w.t().dot(&g_lv))
            * h1.mapv(|h| 1.0 - h * h);
        grads.enc_hidden.w += &outer(&da1, &x);
        grads.enc_hidden.b += &da1;

        // prior network gradients
        if let (Some(ph), Some(pmw), Some(pvw), Some(vf)) =
            (&params.prior_hidden, &params.prior_mu, &params.prior_logvar, *v)
        {
            let g_pm = Array1::from_shape_fn(l_dim, |i| (mu[i] - pm[i]) / plv[i].exp());
            let g_plv = Array1::from_shape_fn(l_dim, |i| {
                let diff = mu[i] - pm[i];
                -0.5 * (1.0 - (lv[i].exp() + diff * diff) / plv[i].exp())
            });
            let xv = Array1::from_vec(vf.to_vec());
            let ap = ph.forward(&xv);
            let hp = ap.mapv(f64::tanh);
            let gp = grads.prior_mu.as_mut().unwrap();
            gp.w += &outer(&g_pm, &hp);
            gp.b += &g_pm;
            let gv = grads.prior_logvar.as_mut().unwrap();
            gv.w += &outer(&g_plv, &hp);
            gv.b += &g_plv;
            let dap = (pmw.w.t().dot(&g_pm) + pvw.w.t().dot(&g_plv))
                * hp.mapv(|h| 1.0 - h * h);
            let gh = grads.prior_hidden.as_mut().unwrap();
            gh.w += &outer(&dap, &xv);
            gh.b += &dap;
        }
    }

    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let av = a.view().insert_axis(ndarray::Axis(1));
    let bv = b.view().insert_axis(ndarray::Axis(0));
    av.dot(&bv)
}
