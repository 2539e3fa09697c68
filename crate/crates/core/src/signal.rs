//! Waveform <-> spectrogram conversion and the preprocessing recipe applied
//! before training: voice-activity trimming, peak rescaling, fixed-length
//! framing.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean squared sample value.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn check(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidInput("empty waveform".into()));
        }
        if self.samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(())
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::InvalidInput(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| f64::from(v) / 32768.0))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(wav_err)?,
            (hound::SampleFormat::Float, 32) => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(wav_err)?,
            (fmt, bits) => {
                return Err(Error::InvalidInput(format!(
                    "{}: unsupported sample format {fmt:?} / {bits} bits",
                    path.display()
                )))
            }
        };
        Ok(Self::new(samples, spec.sample_rate))
    }

    /// Writes a mono 16-bit PCM WAV file. Samples outside `[-1, 1]` are
    /// clipped.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &x in &self.samples {
            let v = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Sine,
}

/// STFT geometry. Defaults: 1024-sample sine window, 256-sample hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    #[serde(default)]
    pub window_kind: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 1024,
            hop: 256,
            window_kind: WindowKind::Sine,
        }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        let cfg = Self {
            window_len,
            hop,
            window_kind: WindowKind::Sine,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_freq(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || !self.window_len.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "window length must be even and >= 2, got {}",
                self.window_len
            )));
        }
        if self.hop == 0 || !self.window_len.is_multiple_of(self.hop) || self.window_len / self.hop != 4 {
            return Err(Error::InvalidInput(format!(
                "hop {} must be a quarter of the window length {}",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }

    /// `w[n] = sin(pi (n + 0.5) / N)`.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        (0..self.window_len)
            .map(|i| (PI * (i as f64 + 0.5) / n).sin())
            .collect()
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }
}

/// `F x T` complex STFT coefficients (non-negative frequencies only).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex64>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn n_freq(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    /// Element-wise squared modulus.
    pub fn power(&self) -> Array2<f64> {
        power(self)
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let n = cfg.window_len;
    if w.samples.len() < n {
        return Err(Error::InputTooShort {
            len: w.samples.len(),
            window_len: n,
        });
    }
    let n_frames = cfg.n_frames(w.samples.len());
    let n_freq = cfg.n_freq();
    let window = cfg.window();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut data = Array2::zeros((n_freq, n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..n_frames {
        let frame = &w.samples[t * cfg.hop..t * cfg.hop + n];
        for ((b, &x), &win) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex64::new(x * win, 0.0);
        }
        fft.process(&mut buf);
        for f in 0..n_freq {
            data[[f, t]] = buf[f];
        }
    }
    Ok(ComplexSpectrogram { data, config: *cfg })
}

/// Weighted overlap-add inverse of [`stft`], normalized by the summed squared
/// window. The output has `(T - 1) * hop + window_len` samples.
pub fn istft(s: &ComplexSpectrogram, sample_rate: u32) -> Result<Waveform> {
    let cfg = s.config;
    cfg.validate()?;
    let n = cfg.window_len;
    if s.n_freq() != cfg.n_freq() {
        return Err(Error::ShapeMismatch {
            what: "spectrogram",
            expected: (cfg.n_freq(), s.n_frames()),
            found: s.data.dim(),
        });
    }
    let n_frames = s.n_frames();
    if n_frames == 0 {
        return Err(Error::InvalidInput("spectrogram has no frames".into()));
    }
    if s.data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("spectrogram"));
    }
    let len = (n_frames - 1) * cfg.hop + n;
    let window = cfg.window();
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut out = vec![0.0; len];
    let mut envelope = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let half = n / 2;
    for t in 0..n_frames {
        buf[0] = Complex64::new(s.data[[0, t]].re, 0.0);
        buf[half] = Complex64::new(s.data[[half, t]].re, 0.0);
        for f in 1..half {
            let c = s.data[[f, t]];
            buf[f] = c;
            buf[n - f] = c.conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for i in 0..n {
            out[start + i] += window[i] * buf[i].re / n as f64;
            envelope[start + i] += window[i] * window[i];
        }
    }
    for (y, e) in out.iter_mut().zip(&envelope) {
        if *e > 1e-12 {
            *y /= e;
        } else {
            *y = 0.0;
        }
    }
    Ok(Waveform::new(out, sample_rate))
}

pub fn power(s: &ComplexSpectrogram) -> Array2<f64> {
    s.data.mapv(|c| c.norm_sqr())
}

/// Removes leading and trailing non-overlapping 1024-sample frames whose
/// energy is more than `threshold_db` below the loudest frame.
pub fn vad_trim(w: &Waveform, threshold_db: f64) -> Result<Waveform> {
    const FRAME: usize = 1024;
    w.check()?;
    let energies: Vec<f64> = w
        .samples
        .chunks(FRAME)
        .map(|c| c.iter().map(|x| x * x).sum())
        .collect();
    let max = energies.iter().cloned().fold(0.0, f64::max);
    let floor = max * 10f64.powf(-threshold_db / 10.0);
    let active = |e: &f64| *e >= floor;
    let first = energies.iter().position(active).unwrap_or(0);
    let last = energies.iter().rposition(active).unwrap_or(energies.len() - 1);
    let start = first * FRAME;
    let end = ((last + 1) * FRAME).min(w.samples.len());
    Ok(Waveform::new(w.samples[start..end].to_vec(), w.sample_rate))
}

/// Divides by the peak absolute sample; all-zero input is returned as is.
pub fn rescale(w: &Waveform) -> Waveform {
    let peak = w.peak();
    if peak == 0.0 {
        return w.clone();
    }
    Waveform::new(w.samples.iter().map(|x| x / peak).collect(), w.sample_rate)
}

/// Consecutive non-overlapping chunks of exactly `seq_len` frames. The
/// trailing remainder is dropped.
pub fn split_frames(s: &ComplexSpectrogram, seq_len: usize) -> Vec<ComplexSpectrogram> {
    assert!(seq_len >= 1, "seq_len must be positive");
    (0..s.n_frames() / seq_len)
        .map(|k| ComplexSpectrogram {
            data: s.data.slice(s![.., k * seq_len..(k + 1) * seq_len]).to_owned(),
            config: s.config,
        })
        .collect()
}

/// Power-spectrogram chunks used for training: trim, rescale, STFT, split.
pub fn training_chunks(w: &Waveform, cfg: &StftConfig, seq_len: usize) -> Result<Vec<Array2<f64>>> {
    let w = rescale(&vad_trim(w, 30.0)?);
    if w.len() < cfg.window_len {
        return Ok(Vec::new());
    }
    let spec = stft(&w, cfg)?;
    Ok(split_frames(&spec, seq_len).iter().map(power).collect())
}
