//! Deep dynamical noise-variance networks.
//!
//! Three dependency structures are supported:
//!
//! * `LV`: `v_n,t = f(z_{1:T})` through a bidirectional LSTM over latents.
//! * `NO`: `v_n,t = f(x_{1:t-1})` through an LSTM over the previous noisy
//!   frame (a zero frame feeds the first step).
//! * `NOLV`: `v_n,t = f(x_{1:t-1}, z_{1:t})`, one LSTM per input stream.
//!
//! The recurrent summary goes through a tanh layer and a linear output layer
//! that yields the log-variance, clamped to `[-14, 14]`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{bind, Binder, Linear, Lstm, Module};
use crate::speech_prior::{log_features, stack_batch, unstack_batch, LatentSequence, LOGVAR_BOUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseVariant {
    Lv,
    No,
    Nolv,
}

impl NoiseVariant {
    pub const ALL: [NoiseVariant; 3] = [NoiseVariant::Lv, NoiseVariant::No, NoiseVariant::Nolv];

    pub fn name(self) -> &'static str {
        match self {
            NoiseVariant::Lv => "LV",
            NoiseVariant::No => "NO",
            NoiseVariant::Nolv => "NOLV",
        }
    }

    pub fn uses_latents(self) -> bool {
        matches!(self, NoiseVariant::Lv | NoiseVariant::Nolv)
    }

    pub fn uses_observations(self) -> bool {
        matches!(self, NoiseVariant::No | NoiseVariant::Nolv)
    }
}

impl fmt::Display for NoiseVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lv" => Ok(NoiseVariant::Lv),
            "no" => Ok(NoiseVariant::No),
            "nolv" => Ok(NoiseVariant::Nolv),
            other => Err(Error::InvalidInput(format!("unknown noise variant `{other}` (expected lv, no or nolv)"))),
        }
    }
}

/// Inputs available to the noise model.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoiseContext<'a> {
    /// `F x T` noisy power.
    pub noisy_power: Option<&'a Array2<f64>>,
    pub latents: Option<&'a LatentSequence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub n_freq: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { n_freq: 513, latent_dim: 16, hidden_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseEncoder<T = Array2<f64>> {
    Lv { forward: Lstm<T>, backward: Lstm<T> },
    No { obs: Lstm<T> },
    Nolv { obs: Lstm<T>, latent: Lstm<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseNet<T = Array2<f64>> {
    pub encoder: NoiseEncoder<T>,
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

/// Noise-model parameters tagged with their variant.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseParams {
    pub variant: NoiseVariant,
    pub config: NoiseConfig,
    pub net: NoiseNet,
}

impl Module for NoiseParams {
    type Bound = NoiseNet<Var>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        match &self.net.encoder {
            NoiseEncoder::Lv { forward, backward } => {
                forward.visit(&format!("{prefix}forward"), f);
                backward.visit(&format!("{prefix}backward"), f);
            }
            NoiseEncoder::No { obs } => obs.visit(&format!("{prefix}obs"), f),
            NoiseEncoder::Nolv { obs, latent } => {
                obs.visit(&format!("{prefix}obs"), f);
                latent.visit(&format!("{prefix}latent"), f);
            }
        }
        self.net.hidden.visit(&format!("{prefix}hidden"), f);
        self.net.out.visit(&format!("{prefix}out"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<f64>)) {
        match &mut self.net.encoder {
            NoiseEncoder::Lv { forward, backward } => {
                forward.visit_mut(&format!("{prefix}forward"), f);
                backward.visit_mut(&format!("{prefix}backward"), f);
            }
            NoiseEncoder::No { obs } => obs.visit_mut(&format!("{prefix}obs"), f),
            NoiseEncoder::Nolv { obs, latent } => {
                obs.visit_mut(&format!("{prefix}obs"), f);
                latent.visit_mut(&format!("{prefix}latent"), f);
            }
        }
        self.net.hidden.visit_mut(&format!("{prefix}hidden"), f);
        self.net.out.visit_mut(&format!("{prefix}out"), f);
    }

    fn bind(&self, b: &mut Binder<'_>) -> NoiseNet<Var> {
        let encoder = match &self.net.encoder {
            NoiseEncoder::Lv { forward, backward } => NoiseEncoder::Lv {
                forward: forward.bind(b),
                backward: backward.bind(b),
            },
            NoiseEncoder::No { obs } => NoiseEncoder::No { obs: obs.bind(b) },
            NoiseEncoder::Nolv { obs, latent } => NoiseEncoder::Nolv {
                obs: obs.bind(b),
                latent: latent.bind(b),
            },
        };
        NoiseNet {
            encoder,
            hidden: self.net.hidden.bind(b),
            out: self.net.out.bind(b),
        }
    }
}

/// Fresh parameters whose output bias makes the initial variance close to
/// `initial_variance` everywhere: the mean noisy power for per-utterance
/// fitting, `1.0` for corpus training.
pub fn init_noise_params(variant: NoiseVariant, config: NoiseConfig, initial_variance: f64, rng: &mut impl Rng) -> NoiseParams {
    assert!(initial_variance > 0.0, "initial variance must be positive");
    let h = config.hidden_dim;
    let (encoder, summary_dim) = match variant {
        NoiseVariant::Lv => (
            NoiseEncoder::Lv {
                forward: Lstm::new(config.latent_dim, h, rng),
                backward: Lstm::new(config.latent_dim, h, rng),
            },
            2 * h,
        ),
        NoiseVariant::No => (NoiseEncoder::No { obs: Lstm::new(config.n_freq, h, rng) }, h),
        NoiseVariant::Nolv => (
            NoiseEncoder::Nolv {
                obs: Lstm::new(config.n_freq, h, rng),
                latent: Lstm::new(config.latent_dim, h, rng),
            },
            2 * h,
        ),
    };
    let hidden = Linear::new(summary_dim, h, rng);
    let mut out = Linear::new(h, config.n_freq, rng);
    out.weight *= 0.1;
    out.bias.fill(initial_variance.ln().clamp(-LOGVAR_BOUND, LOGVAR_BOUND));
    NoiseParams {
        variant,
        config,
        net: NoiseNet { encoder, hidden, out },
    }
}

/// Observation features delayed by one frame, stacked `(T * B) x F`; the
/// first frame is zero.
pub fn shifted_features(power: &Array2<f64>, batch: usize) -> Array2<f64> {
    let feats = log_features(power);
    let mut out = Array2::zeros(feats.dim());
    let rows = feats.nrows();
    if rows > batch {
        out.slice_mut(ndarray::s![batch.., ..]).assign(&feats.slice(ndarray::s![..rows - batch, ..]));
    }
    out
}

impl NoiseNet<Var> {
    /// Noise log-variance, stacked `(T * B) x F`. `shifted` comes from
    /// [`shifted_features`], `z` is the stacked latent sequence.
    pub fn forward(&self, g: &mut Graph, shifted: Option<Var>, z: Option<Var>, batch: usize) -> Var {
        let summaries = match &self.encoder {
            NoiseEncoder::Lv { forward, backward } => {
                let z = z.expect("LV needs latents");
                let f = forward.run(g, z, batch, false);
                let b = backward.run(g, z, batch, true);
                let f = g.concat_rows(&f);
                let b = g.concat_rows(&b);
                g.concat_cols(&[f, b])
            }
            NoiseEncoder::No { obs } => {
                let x = shifted.expect("NO needs observations");
                let h = obs.run(g, x, batch, false);
                g.concat_rows(&h)
            }
            NoiseEncoder::Nolv { obs, latent } => {
                let x = shifted.expect("NOLV needs observations");
                let z = z.expect("NOLV needs latents");
                let hx = obs.run(g, x, batch, false);
                let hz = latent.run(g, z, batch, false);
                let hx = g.concat_rows(&hx);
                let hz = g.concat_rows(&hz);
                g.concat_cols(&[hx, hz])
            }
        };
        let h = self.hidden.forward(g, summaries);
        let h = g.tanh(h);
        let lv = self.out.forward(g, h);
        g.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND)
    }
}

pub(crate) fn check_context(variant: NoiseVariant, ctx: &NoiseContext<'_>) -> Result<usize> {
    if variant.uses_observations() && ctx.noisy_power.is_none() {
        return Err(Error::MissingContext { variant: variant.name(), field: "noisy_power" });
    }
    if variant.uses_latents() && ctx.latents.is_none() {
        return Err(Error::MissingContext { variant: variant.name(), field: "latents" });
    }
    let frames_x = ctx.noisy_power.map(|p| p.ncols());
    let frames_z = ctx.latents.map(|z| z.n_frames());
    match (frames_x, frames_z) {
        (Some(a), Some(b)) if a != b => Err(Error::InvalidInput(format!(
            "noisy power has {a} frames but latents have {b}"
        ))),
        (Some(a), _) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => Err(Error::MissingContext { variant: variant.name(), field: "any input" }),
    }
}

/// Noise variance `F x T`.
pub fn noise_variance(variant: NoiseVariant, ctx: &NoiseContext<'_>, params: &NoiseParams) -> Result<Array2<f64>> {
    if params.variant != variant {
        return Err(Error::InvalidInput(format!(
            "parameters are for the {} variant, requested {}",
            params.variant, variant
        )));
    }
    check_context(variant, ctx)?;
    if let Some(p) = ctx.noisy_power {
        if p.nrows() != params.config.n_freq {
            return Err(Error::ShapeMismatch {
                what: "noisy power",
                expected: (params.config.n_freq, p.ncols()),
                found: p.dim(),
            });
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("noisy power must be finite and non-negative".into()));
        }
    }
    if let Some(z) = ctx.latents {
        if z.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent sequence"));
        }
    }
    let mut g = Graph::new();
    let (net, _) = bind(&mut g, params, false);
    let shifted = if variant.uses_observations() {
        let p = ctx.noisy_power.expect("checked");
        Some(g.constant(shifted_features(&stack_batch(&[p]), 1)))
    } else {
        None
    };
    let z = if variant.uses_latents() {
        let z = ctx.latents.expect("checked");
        Some(g.constant(stack_batch(&[&z.data])))
    } else {
        None
    };
    let lv = net.forward(&mut g, shifted, z, 1);
    Ok(unstack_batch(&g.value(lv).mapv(f64::exp), 1).remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cfg() -> NoiseConfig {
        NoiseConfig { n_freq: 9, latent_dim: 2, hidden_dim: 8 }
    }

    #[test]
    fn variant_names_parse() {
        for v in NoiseVariant::ALL {
            assert_eq!(v.name().parse::<NoiseVariant>().unwrap(), v);
            assert_eq!(v.name().to_lowercase().parse::<NoiseVariant>().unwrap(), v);
        }
        assert!("xyz".parse::<NoiseVariant>().is_err());
    }

    #[test]
    fn fixed_seed_gives_identical_params() {
        for v in NoiseVariant::ALL {
            let a = init_noise_params(v, cfg(), 1.0, &mut ChaCha8Rng::seed_from_u64(5));
            let b = init_noise_params(v, cfg(), 1.0, &mut ChaCha8Rng::seed_from_u64(5));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn full_size_variants_construct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in NoiseVariant::ALL {
            let p = init_noise_params(v, NoiseConfig { n_freq: 513, latent_dim: 16, hidden_dim: 64 }, 1.0, &mut rng);
            assert!(p.tensors().iter().all(|t| t.iter().all(|x| x.is_finite())));
        }
    }

    #[test]
    fn initial_variance_tracks_requested_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let power = Array2::from_shape_simple_fn((9, 20), || rng.random_range(0.0..50.0));
        let mean = power.mean().unwrap();
        let z = LatentSequence { data: Array2::from_shape_simple_fn((2, 20), || rng.sample(StandardNormal)) };
        for v in NoiseVariant::ALL {
            let p = init_noise_params(v, cfg(), mean, &mut rng);
            let ctx = NoiseContext { noisy_power: Some(&power), latents: Some(&z) };
            let var = noise_variance(v, &ctx, &p).unwrap();
            assert!(var.iter().all(|&x| x > mean / 10.0 && x < mean * 10.0));
        }
    }

    #[test]
    fn missing_context_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let power = Array2::ones((9, 4));
        let lv = init_noise_params(NoiseVariant::Lv, cfg(), 1.0, &mut rng);
        let err = noise_variance(NoiseVariant::Lv, &NoiseContext { noisy_power: Some(&power), latents: None }, &lv);
        assert!(matches!(err, Err(Error::MissingContext { field: "latents", .. })));
        let no = init_noise_params(NoiseVariant::No, cfg(), 1.0, &mut rng);
        let err = noise_variance(NoiseVariant::No, &NoiseContext::default(), &no);
        assert!(matches!(err, Err(Error::MissingContext { field: "noisy_power", .. })));
        assert!(noise_variance(NoiseVariant::Lv, &NoiseContext { noisy_power: Some(&power), latents: None }, &no).is_err());
    }

    #[test]
    fn parameter_count_does_not_depend_on_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in NoiseVariant::ALL {
            let p = init_noise_params(v, cfg(), 1.0, &mut rng);
            let n = p.param_count();
            for t in [1, 5, 40] {
                let power = Array2::ones((9, t));
                let z = LatentSequence { data: Array2::zeros((2, t)) };
                let var = noise_variance(v, &NoiseContext { noisy_power: Some(&power), latents: Some(&z) }, &p).unwrap();
                assert_eq!(var.dim(), (9, t));
                assert_eq!(p.param_count(), n);
            }
        }
    }

    #[test]
    fn shifted_features_delay_by_one_frame() {
        let power = Array2::from_shape_fn((6, 2), |(r, c)| (r * 2 + c + 1) as f64);
        let s = shifted_features(&power, 2);
        assert!(s.row(0).iter().all(|&x| x == 0.0));
        assert!(s.row(1).iter().all(|&x| x == 0.0));
        assert_eq!(s.row(2), log_features(&power).row(0));
        assert_eq!(s.row(5), log_features(&power).row(3));
    }
}
