//! Causal recurrent VAE speech model.
//!
//! Decoder: `z_{1:t} -> log v_s,t` through a forward LSTM, so the speech
//! variance at frame `t` only sees latents up to `t`.
//!
//! Encoder: a backward LSTM over observation frames summarizes `x_{t:T}`; a
//! forward LSTM fed with the previously sampled latent summarizes
//! `z_{1:t-1}`. Both summaries go through a tanh layer into mean and
//! log-variance heads, giving `q(z_t | z_{1:t-1}, x_{t:T})`.
//!
//! Spectra enter the networks as scaled log-power features. Log-variances are
//! clamped to `[-14, 14]` before exponentiation.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{bind, Binder, Linear, Lstm, Module};

/// Floor applied to observed power inside the Itakura-Saito divergence.
pub const POWER_FLOOR: f64 = 1e-10;
/// Bound on every log-variance head.
pub const LOGVAR_BOUND: f64 = 14.0;

const FEATURE_OFFSET: f64 = 1e-6;
const FEATURE_SCALE: f64 = 0.1;

/// `L x T` latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub data: Array2<f64>,
}

impl LatentSequence {
    pub fn latent_dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }
}

/// Per-frame diagonal Gaussians; `mean` and `var` are `D x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussianSeq {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RvaeConfig {
    pub n_freq: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
}

impl Default for RvaeConfig {
    fn default() -> Self {
        Self { n_freq: 513, latent_dim: 16, hidden_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T = Array2<f64>> {
    pub obs_rnn: Lstm<T>,
    pub latent_rnn: Lstm<T>,
    pub merge: Linear<T>,
    pub mean: Linear<T>,
    pub logvar: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T = Array2<f64>> {
    pub rnn: Lstm<T>,
    pub hidden: Linear<T>,
    pub logvar: Linear<T>,
}

/// Encoder and decoder parameters of the speech model.
#[derive(Debug, Clone, PartialEq)]
pub struct RvaeParams {
    pub config: RvaeConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Encoder {
    pub fn new(cfg: &RvaeConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden_dim;
        Self {
            obs_rnn: Lstm::new(cfg.n_freq, h, rng),
            latent_rnn: Lstm::new(cfg.latent_dim, h, rng),
            merge: Linear::new(2 * h, h, rng),
            mean: Linear::new(h, cfg.latent_dim, rng),
            logvar: Linear::new(h, cfg.latent_dim, rng),
        }
    }
}

impl Decoder {
    pub fn new(cfg: &RvaeConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden_dim;
        Self {
            rnn: Lstm::new(cfg.latent_dim, h, rng),
            hidden: Linear::new(h, h, rng),
            logvar: Linear::new(h, cfg.n_freq, rng),
        }
    }
}

impl Module for Encoder {
    type Bound = Encoder<Var>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.obs_rnn.visit(&format!("{prefix}obs_rnn"), f);
        self.latent_rnn.visit(&format!("{prefix}latent_rnn"), f);
        self.merge.visit(&format!("{prefix}merge"), f);
        self.mean.visit(&format!("{prefix}mean"), f);
        self.logvar.visit(&format!("{prefix}logvar"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<f64>)) {
        self.obs_rnn.visit_mut(&format!("{prefix}obs_rnn"), f);
        self.latent_rnn.visit_mut(&format!("{prefix}latent_rnn"), f);
        self.merge.visit_mut(&format!("{prefix}merge"), f);
        self.mean.visit_mut(&format!("{prefix}mean"), f);
        self.logvar.visit_mut(&format!("{prefix}logvar"), f);
    }

    fn bind(&self, b: &mut Binder<'_>) -> Encoder<Var> {
        Encoder {
            obs_rnn: self.obs_rnn.bind(b),
            latent_rnn: self.latent_rnn.bind(b),
            merge: self.merge.bind(b),
            mean: self.mean.bind(b),
            logvar: self.logvar.bind(b),
        }
    }
}

impl Module for Decoder {
    type Bound = Decoder<Var>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.rnn.visit(&format!("{prefix}rnn"), f);
        self.hidden.visit(&format!("{prefix}hidden"), f);
        self.logvar.visit(&format!("{prefix}logvar"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<f64>)) {
        self.rnn.visit_mut(&format!("{prefix}rnn"), f);
        self.hidden.visit_mut(&format!("{prefix}hidden"), f);
        self.logvar.visit_mut(&format!("{prefix}logvar"), f);
    }

    fn bind(&self, b: &mut Binder<'_>) -> Decoder<Var> {
        Decoder {
            rnn: self.rnn.bind(b),
            hidden: self.hidden.bind(b),
            logvar: self.logvar.bind(b),
        }
    }
}

impl Module for RvaeParams {
    type Bound = (Encoder<Var>, Decoder<Var>);

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.encoder.visit(&format!("{prefix}encoder."), f);
        self.decoder.visit(&format!("{prefix}decoder."), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<f64>)) {
        self.encoder.visit_mut(&format!("{prefix}encoder."), f);
        self.decoder.visit_mut(&format!("{prefix}decoder."), f);
    }

    fn bind(&self, b: &mut Binder<'_>) -> Self::Bound {
        (self.encoder.bind(b), self.decoder.bind(b))
    }
}

impl RvaeParams {
    pub fn new(config: RvaeConfig, rng: &mut impl Rng) -> Self {
        let encoder = Encoder::new(&config, rng);
        let decoder = Decoder::new(&config, rng);
        Self { config, encoder, decoder }
    }

    /// Sets the decoder output bias to a per-bin log-power profile so the
    /// untrained decoder already predicts the corpus' average spectrum.
    pub fn set_output_log_power(&mut self, mean_log_power: &Array1<f64>) {
        assert_eq!(mean_log_power.len(), self.config.n_freq);
        self.decoder.logvar.bias.row_mut(0).assign(mean_log_power);
    }
}

/// How the encoder's autoregressive path obtains `z_t`.
pub enum LatentFeed<'a> {
    /// Reparameterized draw `mu + sqrt(v) * eps`, `eps ~ N(0, I)`.
    Sample(&'a mut dyn RngCore),
    /// Posterior mean.
    Mean,
    /// Externally supplied latents, stacked `(T * B) x L`.
    Given(&'a Array2<f64>),
}

/// Stacked encoder outputs, each `(T * B) x L`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub mean: Var,
    pub logvar: Var,
    pub z: Var,
}

impl Encoder<Var> {
    pub fn forward(&self, g: &mut Graph, features: Var, batch: usize, feed: &mut LatentFeed<'_>) -> EncoderOutput {
        let obs = self.summarize(g, features, batch);
        self.sample_path(g, &obs, batch, feed)
    }

    /// Backward pass over observation features; entry `t` summarizes frames
    /// `t..T`.
    pub fn summarize(&self, g: &mut Graph, features: Var, batch: usize) -> Vec<Var> {
        self.obs_rnn.run(g, features, batch, true)
    }

    /// Autoregressive latent path over precomputed observation summaries.
    pub fn sample_path(&self, g: &mut Graph, obs: &[Var], batch: usize, feed: &mut LatentFeed<'_>) -> EncoderOutput {
        let n_frames = obs.len();
        let latent_dim = g.shape(self.mean.weight).1;

        let mut means = Vec::with_capacity(n_frames);
        let mut logvars = Vec::with_capacity(n_frames);
        let mut zs = Vec::with_capacity(n_frames);
        let mut state = None;
        let mut z_prev: Option<Var> = None;
        for (t, &obs_t) in obs.iter().enumerate() {
            let pre = match z_prev {
                None => self.latent_rnn.zero_input(g, batch),
                Some(z) => self.latent_rnn.project(g, z),
            };
            let s = self.latent_rnn.step(g, pre, state);
            state = Some(s);
            let cat = g.concat_cols(&[obs_t, s.h]);
            let m = self.merge.forward(g, cat);
            let m = g.tanh(m);
            let mu = self.mean.forward(g, m);
            let lv = self.logvar.forward(g, m);
            let lv = g.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND);
            let z = match feed {
                LatentFeed::Sample(rng) => {
                    let eps = Array2::from_shape_simple_fn((batch, latent_dim), || rng.sample(StandardNormal));
                    let eps = g.constant(eps);
                    let half = g.scale(lv, 0.5);
                    let std = g.exp(half);
                    let noise = g.mul(std, eps);
                    g.add(mu, noise)
                }
                LatentFeed::Mean => mu,
                LatentFeed::Given(all) => {
                    let rows = all.slice(ndarray::s![t * batch..(t + 1) * batch, ..]).to_owned();
                    g.constant(rows)
                }
            };
            means.push(mu);
            logvars.push(lv);
            zs.push(z);
            z_prev = Some(z);
        }
        EncoderOutput {
            mean: g.concat_rows(&means),
            logvar: g.concat_rows(&logvars),
            z: g.concat_rows(&zs),
        }
    }
}

impl Decoder<Var> {
    /// Speech log-variance, stacked `(T * B) x F`.
    pub fn forward(&self, g: &mut Graph, z: Var, batch: usize) -> Var {
        let hs = self.rnn.run(g, z, batch, false);
        let h = g.concat_rows(&hs);
        let h = self.hidden.forward(g, h);
        let h = g.tanh(h);
        let lv = self.logvar.forward(g, h);
        g.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND)
    }
}

/// Stacks `F x T` (or `D x T`) matrices of a batch into `(T * B) x F`,
/// frame-major.
pub fn stack_batch(items: &[&Array2<f64>]) -> Array2<f64> {
    let batch = items.len();
    let (dim, n_frames) = items[0].dim();
    Array2::from_shape_fn((n_frames * batch, dim), |(r, d)| items[r % batch][[d, r / batch]])
}

/// Inverse of [`stack_batch`].
pub fn unstack_batch(stacked: &Array2<f64>, batch: usize) -> Vec<Array2<f64>> {
    let (rows, dim) = stacked.dim();
    let n_frames = rows / batch;
    (0..batch)
        .map(|b| Array2::from_shape_fn((dim, n_frames), |(d, t)| stacked[[t * batch + b, d]]))
        .collect()
}

/// Log-power network input features.
pub fn log_features(power: &Array2<f64>) -> Array2<f64> {
    power.mapv(|p| FEATURE_SCALE * (p + FEATURE_OFFSET).ln())
}

fn check_power(power: &Array2<f64>, n_freq: usize, what: &'static str) -> Result<()> {
    if power.nrows() != n_freq || power.ncols() == 0 {
        return Err(Error::ShapeMismatch {
            what,
            expected: (n_freq, power.ncols().max(1)),
            found: power.dim(),
        });
    }
    if power.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    if power.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidInput(format!("{what} has negative entries")));
    }
    Ok(())
}

/// `sum_{f,t} p/v - ln(p/v) - 1` with `p` floored at [`POWER_FLOOR`] inside
/// the logarithm.
pub fn is_div(power: &Array2<f64>, var: &Array2<f64>) -> Result<f64> {
    if power.dim() != var.dim() {
        return Err(Error::ShapeMismatch {
            what: "is_div",
            expected: power.dim(),
            found: var.dim(),
        });
    }
    if var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidInput("variance must be strictly positive".into()));
    }
    Ok(power
        .iter()
        .zip(var.iter())
        .map(|(&p, &v)| p / v - (p.max(POWER_FLOOR) / v).ln() - 1.0)
        .sum())
}

/// Per-frame `KL(N(mu_t, diag v_t) || N(0, I))`.
pub fn kl_to_prior(q: &DiagonalGaussianSeq) -> Vec<f64> {
    q.mean
        .axis_iter(Axis(1))
        .zip(q.var.axis_iter(Axis(1)))
        .map(|(m, v)| {
            0.5 * m
                .iter()
                .zip(v.iter())
                .map(|(&mu, &var)| var + mu * mu - 1.0 - var.ln())
                .sum::<f64>()
        })
        .collect()
}

/// IS divergence between a constant stacked power and `exp(logvar)`, as a
/// scalar graph node.
pub fn is_div_node(g: &mut Graph, power: &Array2<f64>, logvar: Var) -> Var {
    let offset: f64 = power.iter().map(|&p| -p.max(POWER_FLOOR).ln() - 1.0).sum();
    let p = g.constant(power.clone());
    let neg = g.scale(logvar, -1.0);
    let inv = g.exp(neg);
    let ratio = g.mul(inv, p);
    let terms = g.add(ratio, logvar);
    let s = g.sum(terms);
    g.offset(s, offset)
}

/// IS divergence between a constant stacked power and a variance node.
pub fn is_div_node_var(g: &mut Graph, power: &Array2<f64>, var: Var) -> Var {
    let offset: f64 = power.iter().map(|&p| -p.max(POWER_FLOOR).ln() - 1.0).sum();
    let p = g.constant(power.clone());
    let ratio = g.div(p, var);
    let lv = g.ln(var);
    let terms = g.add(ratio, lv);
    let s = g.sum(terms);
    g.offset(s, offset)
}

/// Summed KL of stacked diagonal Gaussians to the standard normal.
pub fn kl_node(g: &mut Graph, mean: Var, logvar: Var) -> Var {
    let n = {
        let (r, c) = g.shape(mean);
        (r * c) as f64
    };
    let v = g.exp(logvar);
    let m2 = g.mul(mean, mean);
    let a = g.add(v, m2);
    let a = g.sub(a, logvar);
    let s = g.sum(a);
    let s = g.offset(s, -n);
    g.scale(s, 0.5)
}

/// Speech variance `F x T` for latents `L x T`.
pub fn decode(z: &LatentSequence, params: &RvaeParams) -> Result<Array2<f64>> {
    if z.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("latent sequence"));
    }
    if z.latent_dim() != params.config.latent_dim {
        return Err(Error::ShapeMismatch {
            what: "latent sequence",
            expected: (params.config.latent_dim, z.n_frames()),
            found: z.data.dim(),
        });
    }
    let mut g = Graph::new();
    let (dec, _) = bind(&mut g, &params.decoder, false);
    let zv = g.constant(stack_batch(&[&z.data]));
    let lv = dec.forward(&mut g, zv, 1);
    let v = g.value(lv).mapv(f64::exp);
    Ok(unstack_batch(&v, 1).remove(0))
}

fn run_encoder(
    obs_power: &Array2<f64>,
    params: &RvaeParams,
    feed: &mut LatentFeed<'_>,
) -> Result<(DiagonalGaussianSeq, LatentSequence)> {
    check_power(obs_power, params.config.n_freq, "observed power")?;
    let mut g = Graph::new();
    let (enc, _) = bind(&mut g, &params.encoder, false);
    let feats = g.constant(log_features(&stack_batch(&[obs_power])));
    let out = enc.forward(&mut g, feats, 1, feed);
    let mean = unstack_batch(g.value(out.mean), 1).remove(0);
    let var = unstack_batch(&g.value(out.logvar).mapv(f64::exp), 1).remove(0);
    let z = unstack_batch(g.value(out.z), 1).remove(0);
    Ok((DiagonalGaussianSeq { mean, var }, LatentSequence { data: z }))
}

/// Approximate posterior of the latents given `F x T` observed power, with a
/// reparameterized sample drawn from `rng`.
pub fn encode(
    obs_power: &Array2<f64>,
    params: &RvaeParams,
    rng: &mut dyn RngCore,
) -> Result<(DiagonalGaussianSeq, LatentSequence)> {
    run_encoder(obs_power, params, &mut LatentFeed::Sample(rng))
}

/// Posterior parameters when the autoregressive path is fed the given
/// latents instead of its own samples.
pub fn encode_given(obs_power: &Array2<f64>, params: &RvaeParams, latents: &LatentSequence) -> Result<DiagonalGaussianSeq> {
    if latents.n_frames() != obs_power.ncols() || latents.latent_dim() != params.config.latent_dim {
        return Err(Error::ShapeMismatch {
            what: "conditioning latents",
            expected: (params.config.latent_dim, obs_power.ncols()),
            found: latents.data.dim(),
        });
    }
    let stacked = stack_batch(&[&latents.data]);
    run_encoder(obs_power, params, &mut LatentFeed::Given(&stacked)).map(|(q, _)| q)
}

/// Builds the pre-training loss for a stacked batch, averaged over the batch.
/// Returns `(loss, reconstruction, kl)` nodes.
pub(crate) fn pretrain_loss_node(
    g: &mut Graph,
    enc: &Encoder<Var>,
    dec: &Decoder<Var>,
    power: &Array2<f64>,
    batch: usize,
    rng: &mut dyn RngCore,
    kl_weight: f64,
) -> (Var, Var, Var) {
    let feats = g.constant(log_features(power));
    let q = enc.forward(g, feats, batch, &mut LatentFeed::Sample(rng));
    let lv = dec.forward(g, q.z, batch);
    let rec = is_div_node(g, power, lv);
    let kl = kl_node(g, q.mean, q.logvar);
    let wkl = g.scale(kl, kl_weight);
    let total = g.add(rec, wkl);
    (g.scale(total, 1.0 / batch as f64), rec, kl)
}

/// Single-sample estimate of the negative pre-training ELBO for one `F x T`
/// clean power spectrogram.
pub fn pretrain_elbo_loss(clean_power: &Array2<f64>, params: &RvaeParams, rng: &mut dyn RngCore, kl_weight: f64) -> Result<f64> {
    pretrain_loss_and_grad(&[clean_power], params, rng, kl_weight, false).map(|(l, _)| l)
}

/// Batch loss and, when `with_grad`, its gradient for every tensor of
/// `params` in [`Module::visit`] order.
pub fn pretrain_loss_and_grad(
    batch: &[&Array2<f64>],
    params: &RvaeParams,
    rng: &mut dyn RngCore,
    kl_weight: f64,
    with_grad: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if !(0.0..=1.0).contains(&kl_weight) {
        return Err(Error::InvalidInput(format!("kl_weight {kl_weight} outside [0, 1]")));
    }
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for p in batch {
        check_power(p, params.config.n_freq, "clean power")?;
        if p.dim() != batch[0].dim() {
            return Err(Error::ShapeMismatch {
                what: "batch item",
                expected: batch[0].dim(),
                found: p.dim(),
            });
        }
    }
    let mut g = Graph::new();
    let ((enc, dec), leaves) = bind(&mut g, params, with_grad);
    let power = stack_batch(batch);
    let (loss, _, _) = pretrain_loss_node(&mut g, &enc, &dec, &power, batch.len(), rng, kl_weight);
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            loss: value,
            detail: "non-finite pre-training loss".into(),
        });
    }
    let grads = if with_grad { g.backward(loss).collect(&leaves) } else { Vec::new() };
    Ok((value, grads))
}
