//! Joint speech + noise model: Wiener posterior, enhancement ELBO and the
//! three operating regimes.
//!
//! * NA: encoder and noise net are fitted on the single utterance to enhance.
//! * ND: encoder and noise net were trained on a noisy corpus; enhancement is
//!   one forward pass.
//! * NDA: ND parameters fine-tuned on the utterance for a few iterations.
//!
//! The decoder never changes after pre-training.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{bind, Module};
use crate::noise_model::{init_noise_params, shifted_features, NoiseConfig, NoiseNet, NoiseParams, NoiseVariant};
use crate::optim::{Adam, AdamConfig};
use crate::signal::{istft, rescale, stft, ComplexSpectrogram, StftConfig, Waveform};
use crate::speech_prior::{
    is_div, is_div_node_var, kl_node, log_features, stack_batch, unstack_batch, Decoder, Encoder, LatentFeed, RvaeParams,
};

/// Floor applied to both variances before the Wiener division.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Na,
    Nd,
    Nda,
}

impl ModeKind {
    pub fn name(self) -> &'static str {
        match self {
            ModeKind::Na => "NA",
            ModeKind::Nd => "ND",
            ModeKind::Nda => "NDA",
        }
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "na" => Ok(ModeKind::Na),
            "nd" => Ok(ModeKind::Nd),
            "nda" => Ok(ModeKind::Nda),
            other => Err(Error::InvalidInput(format!("unknown mode `{other}` (expected na, nd or nda)"))),
        }
    }
}

/// Regime and per-utterance optimization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhancementMode {
    pub kind: ModeKind,
    pub na_iters: usize,
    pub na_lr: f64,
    pub nda_iters: usize,
    pub nda_lr: f64,
    pub mc_samples: usize,
    /// Hidden size of a freshly initialized noise net (NA only).
    pub noise_hidden_dim: usize,
    /// Use the posterior mean of the latents instead of a sample when
    /// enhancing.
    pub latent_mean: bool,
}

impl Default for EnhancementMode {
    fn default() -> Self {
        Self {
            kind: ModeKind::Na,
            na_iters: 1000,
            na_lr: 1e-3,
            nda_iters: 25,
            nda_lr: 1e-3,
            mc_samples: 1,
            noise_hidden_dim: 64,
            latent_mean: false,
        }
    }
}

impl EnhancementMode {
    pub fn new(kind: ModeKind) -> Self {
        Self { kind, ..Self::default() }
    }

    /// Optimization iterations this mode runs per utterance.
    pub fn iterations(&self) -> usize {
        match self.kind {
            ModeKind::Na => self.na_iters,
            ModeKind::Nd => 0,
            ModeKind::Nda => self.nda_iters,
        }
    }
}

/// Closed-form posterior of the clean STFT coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub mean: Array2<Complex64>,
    pub var: Array2<f64>,
}

/// Speech model plus noise model; only the encoder and the noise net are
/// adapted after pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancementParams {
    pub rvae: RvaeParams,
    pub noise: NoiseParams,
}

impl EnhancementParams {
    pub fn variant(&self) -> NoiseVariant {
        self.noise.variant
    }

    /// Adapted tensors in gradient order: encoder, then noise net.
    pub fn trainable_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.rvae.encoder.tensors_mut();
        out.extend(self.noise.tensors_mut());
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.rvae.encoder.param_count() + self.noise.param_count()
    }
}

/// `mean = vs / (vs + vn) * x`, `var = vs * vn / (vs + vn)`.
pub fn wiener_posterior(x: &ComplexSpectrogram, vs: &Array2<f64>, vn: &Array2<f64>) -> Result<PosteriorEstimate> {
    for (what, v) in [("speech variance", vs), ("noise variance", vn)] {
        if v.dim() != x.data.dim() {
            return Err(Error::ShapeMismatch { what, expected: x.data.dim(), found: v.dim() });
        }
        if v.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidInput(format!("{what} must be finite and strictly positive")));
        }
    }
    let mut mean = Array2::zeros(x.data.dim());
    let mut var = Array2::zeros(x.data.dim());
    ndarray::Zip::from(&mut mean)
        .and(&mut var)
        .and(&x.data)
        .and(vs)
        .and(vn)
        .for_each(|m, v, &xc, &s, &n| {
            let s = s.max(VARIANCE_FLOOR);
            let n = n.max(VARIANCE_FLOOR);
            let total = s + n;
            *m = xc * (s / total);
            *v = s * n / total;
        });
    Ok(PosteriorEstimate { mean, var })
}

/// `sum_t d_IS(|x_t|^2, vs_t + vn_t)`.
pub fn mixture_nll_term(x_power: &Array2<f64>, vs: &Array2<f64>, vn: &Array2<f64>) -> Result<f64> {
    if vs.dim() != vn.dim() {
        return Err(Error::ShapeMismatch { what: "noise variance", expected: vs.dim(), found: vn.dim() });
    }
    is_div(x_power, &(vs + vn))
}

/// Negative enhancement ELBO for a stacked batch, averaged over the batch and
/// the Monte-Carlo draws.
#[allow(clippy::too_many_arguments)]
pub(crate) fn enhancement_loss_node(
    g: &mut Graph,
    enc: &Encoder<Var>,
    dec: &Decoder<Var>,
    noise: &NoiseNet<Var>,
    variant: NoiseVariant,
    power: &Array2<f64>,
    batch: usize,
    rng: &mut dyn RngCore,
    mc_samples: usize,
) -> Var {
    let feats = g.constant(log_features(power));
    let shifted = variant.uses_observations().then(|| g.constant(shifted_features(power, batch)));
    let obs = enc.summarize(g, feats, batch);
    let mut terms = Vec::with_capacity(mc_samples);
    for _ in 0..mc_samples {
        let q = enc.sample_path(g, &obs, batch, &mut LatentFeed::Sample(&mut *rng));
        let lvs = dec.forward(g, q.z, batch);
        let lvn = noise.forward(g, shifted, variant.uses_latents().then_some(q.z), batch);
        let vs = g.exp(lvs);
        let vn = g.exp(lvn);
        let v = g.add(vs, vn);
        let rec = is_div_node_var(g, power, v);
        let kl = kl_node(g, q.mean, q.logvar);
        terms.push(g.add(rec, kl));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    g.scale(total, 1.0 / (mc_samples * batch) as f64)
}

fn check_batch(batch: &[&Array2<f64>], n_freq: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for p in batch {
        if p.nrows() != n_freq || p.dim() != batch[0].dim() || p.ncols() == 0 {
            return Err(Error::ShapeMismatch { what: "noisy power", expected: (n_freq, batch[0].ncols()), found: p.dim() });
        }
        if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidInput("noisy power must be finite and non-negative".into()));
        }
    }
    Ok(())
}

/// Loss and, when `with_grad`, the gradient for every adapted tensor (see
/// [`EnhancementParams::trainable_mut`]). The decoder is bound as a constant.
pub fn enhancement_loss_and_grad(
    batch: &[&Array2<f64>],
    params: &EnhancementParams,
    rng: &mut dyn RngCore,
    mc_samples: usize,
    with_grad: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    check_batch(batch, params.rvae.config.n_freq)?;
    let mc_samples = mc_samples.max(1);
    let mut g = Graph::new();
    let (enc, mut leaves) = bind(&mut g, &params.rvae.encoder, with_grad);
    let (dec, _) = bind(&mut g, &params.rvae.decoder, false);
    let (noise, noise_leaves) = bind(&mut g, &params.noise, with_grad);
    leaves.extend(noise_leaves);
    let power = stack_batch(batch);
    let loss = enhancement_loss_node(&mut g, &enc, &dec, &noise, params.variant(), &power, batch.len(), rng, mc_samples);
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Diverged { epoch: 0, step: 0, loss: value, detail: "non-finite enhancement loss".into() });
    }
    let grads = if with_grad { g.backward(loss).collect(&leaves) } else { Vec::new() };
    Ok((value, grads))
}

/// Monte-Carlo estimate of the negative enhancement ELBO for one `F x T`
/// noisy power spectrogram.
pub fn enhancement_elbo_loss(
    x_power: &Array2<f64>,
    rvae: &RvaeParams,
    noise: &NoiseParams,
    variant: NoiseVariant,
    rng: &mut dyn RngCore,
    mc_samples: usize,
) -> Result<f64> {
    if noise.variant != variant {
        return Err(Error::InvalidInput(format!("noise parameters are {}, requested {variant}", noise.variant)));
    }
    let params = EnhancementParams { rvae: rvae.clone(), noise: noise.clone() };
    enhancement_loss_and_grad(&[x_power], &params, rng, mc_samples, false).map(|(l, _)| l)
}

/// Analysis STFT used for enhancement. The signal is padded with
/// `window_len - hop` zeros on both sides so every input sample is covered
/// by the same number of frames.
pub fn analysis_stft(x: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    x.check()?;
    if x.len() < cfg.window_len {
        return Err(Error::InputTooShort { len: x.len(), window_len: cfg.window_len });
    }
    let pad = cfg.window_len - cfg.hop;
    let mut samples = vec![0.0; pad];
    samples.extend_from_slice(&x.samples);
    samples.resize(samples.len() + pad, 0.0);
    stft(&Waveform::new(samples, x.sample_rate), cfg)
}

/// Peak-normalizes `x` (the scale training data is seen at) and returns its
/// padded STFT together with the peak.
fn prepare(x: &Waveform, cfg: &StftConfig) -> Result<(ComplexSpectrogram, f64)> {
    x.check()?;
    let peak = x.peak();
    let gain = if peak > 0.0 { peak } else { 1.0 };
    Ok((analysis_stft(&rescale(x), cfg)?, gain))
}

/// Inverse of [`analysis_stft`], cut or zero-extended to `len` samples.
pub fn synthesize(spec: &ComplexSpectrogram, len: usize, sample_rate: u32) -> Result<Waveform> {
    let pad = spec.config.window_len - spec.config.hop;
    let full = istft(spec, sample_rate)?;
    let mut samples: Vec<f64> = full.samples.into_iter().skip(pad).take(len).collect();
    samples.resize(len, 0.0);
    Ok(Waveform::new(samples, sample_rate))
}

/// Adam on the encoder and noise net for `iters` steps on one utterance.
/// The trace holds the loss before every step plus the loss after the last.
pub fn adapt(
    params: &mut EnhancementParams,
    power: &Array2<f64>,
    iters: usize,
    lr: f64,
    mc_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(AdamConfig::default());
    let mut trace = Vec::with_capacity(iters + 1);
    for step in 0..iters {
        let (loss, grads) = enhancement_loss_and_grad(&[power], params, rng, mc_samples, true).map_err(|e| at_step(e, step))?;
        trace.push(loss);
        adam.step(params.trainable_mut(), &grads, lr);
    }
    let (last, _) = enhancement_loss_and_grad(&[power], params, rng, mc_samples, false).map_err(|e| at_step(e, iters))?;
    trace.push(last);
    Ok(trace)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Diverged { loss, detail, .. } => Error::Diverged { epoch: 0, step, loss, detail },
        other => other,
    }
}

/// Per-utterance fit from the pre-trained encoder and a fresh noise net
/// whose initial variance is the mean noisy power.
pub fn fit_na(
    x: &Waveform,
    pretrained: &RvaeParams,
    variant: NoiseVariant,
    mode: &EnhancementMode,
    stft_cfg: &StftConfig,
    rng: &mut dyn RngCore,
) -> Result<(EnhancementParams, Vec<f64>)> {
    if mode.kind != ModeKind::Na {
        return Err(Error::InvalidInput(format!("fit_na called with mode {}", mode.kind)));
    }
    let power = prepare(x, stft_cfg)?.0.power();
    let mean_power = power.mean().unwrap_or(1.0).max(VARIANCE_FLOOR);
    let config = NoiseConfig {
        n_freq: pretrained.config.n_freq,
        latent_dim: pretrained.config.latent_dim,
        hidden_dim: mode.noise_hidden_dim,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let noise = init_noise_params(variant, config, mean_power, &mut init_rng);
    let mut params = EnhancementParams { rvae: pretrained.clone(), noise };
    let trace = adapt(&mut params, &power, mode.na_iters, mode.na_lr, mode.mc_samples, rng)?;
    Ok((params, trace))
}

/// Per-utterance fine-tuning starting from corpus-trained parameters.
pub fn fine_tune_nda(
    nd: &EnhancementParams,
    x: &Waveform,
    mode: &EnhancementMode,
    stft_cfg: &StftConfig,
    rng: &mut dyn RngCore,
) -> Result<(EnhancementParams, Vec<f64>)> {
    if mode.kind != ModeKind::Nda {
        return Err(Error::InvalidInput(format!("fine_tune_nda called with mode {}", mode.kind)));
    }
    let power = prepare(x, stft_cfg)?.0.power();
    let mut params = nd.clone();
    let trace = adapt(&mut params, &power, mode.nda_iters, mode.nda_lr, mode.mc_samples, rng)?;
    Ok((params, trace))
}

/// One forward pass: encode the (peak-normalized) noisy power, draw latents, evaluate both
/// variances and apply the Wiener filter.
pub fn enhance(
    x: &Waveform,
    params: &EnhancementParams,
    mode: &EnhancementMode,
    stft_cfg: &StftConfig,
    rng: &mut dyn RngCore,
) -> Result<(Waveform, PosteriorEstimate)> {
    let (spec, gain) = prepare(x, stft_cfg)?;
    let power = spec.power();
    let (vs, vn) = variances(&power, params, mode.latent_mean, rng)?;
    let mut post = wiener_posterior(&spec, &vs, &vn)?;
    post.mean *= Complex64::new(gain, 0.0);
    post.var *= gain * gain;
    let out = synthesize(&ComplexSpectrogram { data: post.mean.clone(), config: spec.config }, x.len(), x.sample_rate)?;
    Ok((out, post))
}

/// Speech and noise variances (`F x T`) for a noisy power spectrogram.
pub fn variances(
    power: &Array2<f64>,
    params: &EnhancementParams,
    latent_mean: bool,
    rng: &mut dyn RngCore,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_batch(&[power], params.rvae.config.n_freq)?;
    let variant = params.variant();
    let mut g = Graph::new();
    let (enc, _) = bind(&mut g, &params.rvae.encoder, false);
    let (dec, _) = bind(&mut g, &params.rvae.decoder, false);
    let (noise, _) = bind(&mut g, &params.noise, false);
    let stacked = stack_batch(&[power]);
    let feats = g.constant(log_features(&stacked));
    let mut feed = if latent_mean { LatentFeed::Mean } else { LatentFeed::Sample(rng) };
    let q = enc.forward(&mut g, feats, 1, &mut feed);
    let lvs = dec.forward(&mut g, q.z, 1);
    let shifted = variant.uses_observations().then(|| g.constant(shifted_features(&stacked, 1)));
    let lvn = noise.forward(&mut g, shifted, variant.uses_latents().then_some(q.z), 1);
    let vs = unstack_batch(&g.value(lvs).mapv(f64::exp), 1).remove(0);
    let vn = unstack_batch(&g.value(lvn).mapv(f64::exp), 1).remove(0);
    Ok((vs, vn))
}

/// Parameters available to [`run_mode`].
#[derive(Debug, Clone, Copy)]
pub enum ModelSource<'a> {
    /// Pre-trained speech model (NA).
    Pretrained(&'a RvaeParams),
    /// Corpus-trained speech + noise model (ND, NDA).
    NoiseDependent(&'a EnhancementParams),
}

/// Result of enhancing one utterance.
#[derive(Debug, Clone)]
pub struct EnhanceOutcome {
    pub waveform: Waveform,
    pub posterior: PosteriorEstimate,
    /// Per-iteration loss for NA / NDA; empty for ND.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Runs the regime selected by `mode` end to end on one utterance.
pub fn run_mode(
    x: &Waveform,
    models: ModelSource<'_>,
    variant: NoiseVariant,
    mode: &EnhancementMode,
    stft_cfg: &StftConfig,
    rng: &mut dyn RngCore,
) -> Result<EnhanceOutcome> {
    // Drawn first so the filtering pass sees the same stream whatever the
    // number of fitting iterations.
    let filter_seed = rng.next_u64();
    let (params, trace) = match (mode.kind, models) {
        (ModeKind::Na, ModelSource::Pretrained(rvae)) => {
            let (p, t) = fit_na(x, rvae, variant, mode, stft_cfg, rng)?;
            (std::borrow::Cow::Owned(p), t)
        }
        (ModeKind::Nd, ModelSource::NoiseDependent(nd)) => (std::borrow::Cow::Borrowed(nd), Vec::new()),
        (ModeKind::Nda, ModelSource::NoiseDependent(nd)) => {
            let (p, t) = fine_tune_nda(nd, x, mode, stft_cfg, rng)?;
            (std::borrow::Cow::Owned(p), t)
        }
        (kind, _) => {
            return Err(Error::InvalidInput(format!(
                "mode {kind} needs {}",
                if kind == ModeKind::Na { "a pre-trained speech model" } else { "a noise-dependent model" }
            )))
        }
    };
    if params.variant() != variant {
        return Err(Error::InvalidInput(format!("model variant is {}, requested {variant}", params.variant())));
    }
    let (waveform, posterior) = enhance(x, &params, mode, stft_cfg, &mut ChaCha8Rng::seed_from_u64(filter_seed))?;
    Ok(EnhanceOutcome { waveform, posterior, trace, iterations: mode.iterations() })
}
