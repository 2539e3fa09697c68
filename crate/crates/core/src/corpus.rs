//! Manifests, SNR mixing and the synthetic toy corpus.
//!
//! A manifest is a JSON Lines file, one utterance per line:
//!
//! ```text
//! {"id":"utt0000","path":"clean/utt0000.wav","split":"train","speaker":"spk3"}
//! {"id":"utt0001","path":"noisy/utt0001.wav","split":"test","snr_db":0.0,"noise_kind":"colored"}
//! ```
//!
//! Relative paths are resolved against the manifest's directory. Blank lines
//! and lines starting with `#` are ignored.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_kind: Option<String>,
}

impl ManifestEntry {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>, split: Split) -> Self {
        Self { id: id.into(), path: path.into(), split, speaker: None, snr_db: None, noise_kind: None }
    }
}

/// Ordered list of utterances with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self { entries })
    }

    /// Parses manifest text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Manifest { path: origin.to_path_buf(), line: i + 1, msg };
            let mut e: ManifestEntry = serde_json::from_str(line).map_err(|err| bad(err.to_string()))?;
            if e.id.is_empty() {
                return Err(bad("empty id".into()));
            }
            if !seen.insert(e.id.clone()) {
                return Err(Error::DuplicateId(e.id));
            }
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            entries.push(e);
        }
        Ok(Self { entries })
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let m = Self::parse(&text, base, path)?;
        if let Some(e) = m.entries.iter().find(|e| !e.path.exists()) {
            return Err(Error::Io {
                path: e.path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("audio for `{}` not found", e.id)),
            });
        }
        Ok(m)
    }

    /// Manifest text with paths made relative to `base` where possible.
    pub fn to_jsonl(&self, base: &Path) -> String {
        self.entries
            .iter()
            .map(|e| {
                let mut e = e.clone();
                if let Ok(rel) = e.path.strip_prefix(base) {
                    e.path = rel.to_path_buf();
                }
                serde_json::to_string(&e).expect("manifest entry serializes") + "\n"
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        write_atomic(path, self.to_jsonl(base).as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Reads the audio of every entry in `split`, in manifest order.
    pub fn read_split(&self, split: Split) -> Result<Vec<(ManifestEntry, Waveform)>> {
        self.split(split).map(|e| Ok((e.clone(), Waveform::read_wav(&e.path)?))).collect()
    }
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// A noisy mixture together with the scaled noise that went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub noisy: Waveform,
    pub noise: Waveform,
}

/// Noise segment of exactly `len` samples starting at a random offset,
/// wrapping around when the noise is shorter than `len`.
fn noise_segment(noise: &Waveform, len: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let n = noise.len();
    if n >= len {
        let start = rng.random_range(0..=n - len);
        noise.samples[start..start + len].to_vec()
    } else {
        let start = rng.random_range(0..n);
        (0..len).map(|i| noise.samples[(start + i) % n]).collect()
    }
}

/// Adds noise scaled so that the full-utterance SNR equals `snr_db`.
pub fn mix_at_snr_parts(clean: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut dyn RngCore) -> Result<Mixture> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::SampleRateMismatch { expected: clean.sample_rate, found: noise.sample_rate });
    }
    clean.check()?;
    noise.check()?;
    if !snr_db.is_finite() {
        return Err(Error::InvalidInput(format!("SNR must be finite, got {snr_db}")));
    }
    let p_clean = clean.power();
    if p_clean == 0.0 {
        return Err(Error::ZeroPower("clean"));
    }
    if noise.power() == 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    let mut seg = noise_segment(noise, clean.len(), rng);
    let p_noise = seg.iter().map(|x| x * x).sum::<f64>() / seg.len() as f64;
    if p_noise == 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    let alpha = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    seg.iter_mut().for_each(|x| *x *= alpha);
    let noisy = clean.samples.iter().zip(&seg).map(|(c, n)| c + n).collect();
    Ok(Mixture {
        noisy: Waveform::new(noisy, clean.sample_rate),
        noise: Waveform::new(seg, clean.sample_rate),
    })
}

/// `clean + alpha * noise` at the requested full-utterance SNR.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut dyn RngCore) -> Result<Waveform> {
    mix_at_snr_parts(clean, noise, snr_db, rng).map(|m| m.noisy)
}

/// `10 log10(P_clean / P_noise)` over the full utterance.
pub fn snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    let p = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    10.0 * (p(clean) / p(noise)).log10()
}

/// `|<a, b>| / (|a| |b|)`.
pub fn normalized_cross_correlation(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Stationary low-pass Gaussian noise.
    #[default]
    Colored,
    /// Sum of several synthetic talkers.
    Babble,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Colored => "colored",
            NoiseKind::Babble => "babble",
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "colored" => Ok(NoiseKind::Colored),
            "babble" => Ok(NoiseKind::Babble),
            other => Err(Error::InvalidInput(format!("unknown noise kind `{other}` (expected colored or babble)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Assigned to utterances cyclically.
    pub snrs_db: Vec<f64>,
    pub noise_kind: NoiseKind,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 0,
            n_valid: 0,
            n_test: 10,
            duration_s: 3.0,
            sample_rate: 16_000,
            seed: 0,
            snrs_db: vec![0.0],
            noise_kind: NoiseKind::Colored,
        }
    }
}

impl ToyCorpusConfig {
    pub fn n_utts(&self) -> usize {
        self.n_train + self.n_valid + self.n_test
    }

    fn split_of(&self, i: usize) -> Split {
        if i < self.n_train {
            Split::Train
        } else if i < self.n_train + self.n_valid {
            Split::Valid
        } else {
            Split::Test
        }
    }
}

/// One generated utterance held in memory.
#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub id: String,
    pub split: Split,
    pub snr_db: f64,
    pub clean: Waveform,
    /// Noise exactly as present in `noisy`.
    pub noise: Waveform,
    pub noisy: Waveform,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub clean: Manifest,
    pub noise: Manifest,
    pub noisy: Manifest,
}

/// Harmonic "speech": voiced syllables with gliding pitch, a random spectral
/// envelope and smooth onsets, separated by short pauses, over a faint
/// white floor.
pub fn synth_speech(len: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut out = vec![0.0; len];
    let mut pos = (rng.random_range(0.02..0.08) * sr) as usize;
    let base_f0: f64 = rng.random_range(100.0..220.0);
    while pos < len {
        let syl = ((rng.random_range(0.15..0.40) * sr) as usize).min(len - pos);
        let f0_start = base_f0 * rng.random_range(0.8..1.25);
        let f0_end = base_f0 * rng.random_range(0.8..1.25);
        let n_harm = rng.random_range(6..16usize);
        let formant = rng.random_range(400.0..1200.0);
        let amp: Vec<f64> = (1..=n_harm)
            .map(|k| {
                let f = k as f64 * base_f0;
                (1.0 / k as f64) * (1.0 + 2.0 * (-((f - formant) / 300.0).powi(2)).exp()) * rng.random_range(0.5..1.0)
            })
            .collect();
        let level = rng.random_range(0.4..1.0);
        let mut phase = vec![0.0; n_harm];
        for (k, p) in phase.iter_mut().enumerate() {
            *p = rng.random_range(0.0..2.0 * PI) * (k as f64 + 1.0);
        }
        for i in 0..syl {
            let u = i as f64 / syl as f64;
            let f0 = f0_start + (f0_end - f0_start) * u;
            let env = level * (PI * u).sin().powf(0.7);
            let mut v = 0.0;
            for (k, (a, p)) in amp.iter().zip(phase.iter_mut()).enumerate() {
                let f = f0 * (k as f64 + 1.0);
                *p += 2.0 * PI * f / sr;
                if f < 0.45 * sr {
                    v += a * p.sin();
                }
            }
            out[pos + i] = env * v;
        }
        pos += syl + (rng.random_range(0.04..0.15) * sr) as usize;
    }
    // Recording floor about 60 dB below the voiced level.
    for v in out.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += 1e-3 * e;
    }
    out
}

/// First-order autoregressive (low-pass) Gaussian noise.
pub fn synth_colored_noise(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let a: f64 = rng.random_range(0.7..0.95);
    let mut prev = 0.0;
    (0..len + 256)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            prev = a * prev + e;
            prev
        })
        .skip(256)
        .collect()
}

/// Six overlapping synthetic talkers.
pub fn synth_babble(len: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for _ in 0..6 {
        let talker = synth_speech(len, sample_rate, rng);
        out.iter_mut().zip(talker).for_each(|(o, t)| *o += t);
    }
    out
}

fn scale_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

/// Generates utterance `index` of a toy corpus. Each utterance draws from
/// its own random stream, so the result does not depend on how many other
/// utterances are generated.
pub fn toy_utterance(cfg: &ToyCorpusConfig, index: usize) -> Result<ToyUtterance> {
    if cfg.snrs_db.is_empty() {
        return Err(Error::Config("at least one SNR is required".into()));
    }
    let len = (cfg.duration_s * cfg.sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::Config("duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let mut clean = synth_speech(len, cfg.sample_rate, &mut rng);
    scale_peak(&mut clean, 0.5);
    let mut noise = Vec::new();
    for attempt in 0.. {
        noise = match cfg.noise_kind {
            NoiseKind::Colored => synth_colored_noise(len, &mut rng),
            NoiseKind::Babble => synth_babble(len, cfg.sample_rate, &mut rng),
        };
        if normalized_cross_correlation(&clean, &noise) < 0.05 {
            break;
        }
        if attempt == 100 {
            return Err(Error::InvalidInput("could not draw noise uncorrelated with the clean signal".into()));
        }
    }
    let snr = cfg.snrs_db[index % cfg.snrs_db.len()];
    let clean_w = Waveform::new(clean, cfg.sample_rate);
    let noise_w = Waveform::new(noise, cfg.sample_rate);
    let mut mix = mix_at_snr_parts(&clean_w, &noise_w, snr, &mut rng)?;
    let mut clean_w = clean_w;
    let peak = mix.noisy.peak();
    if peak > 0.95 {
        let g = 0.95 / peak;
        for w in [&mut clean_w, &mut mix.noise, &mut mix.noisy] {
            w.samples.iter_mut().for_each(|v| *v *= g);
        }
    }
    Ok(ToyUtterance {
        id: format!("utt{index:04}"),
        split: cfg.split_of(index),
        snr_db: snr,
        clean: clean_w,
        noise: mix.noise,
        noisy: mix.noisy,
    })
}

/// All utterances of a toy corpus, in memory.
pub fn toy_utterances(cfg: &ToyCorpusConfig) -> Result<Vec<ToyUtterance>> {
    (0..cfg.n_utts()).map(|i| toy_utterance(cfg, i)).collect()
}

/// Writes `clean/`, `noise/` and `noisy/` WAVs plus `clean.jsonl`,
/// `noise.jsonl` and `noisy.jsonl` under `out_dir`. Noisy and clean entries
/// of the same utterance share an id.
pub fn make_toy_corpus(cfg: &ToyCorpusConfig, out_dir: impl AsRef<Path>) -> Result<ToyCorpus> {
    let out = out_dir.as_ref();
    if cfg.n_utts() == 0 {
        return Err(Error::Config("toy corpus needs at least one utterance".into()));
    }
    for sub in ["clean", "noise", "noisy"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let kind = cfg.noise_kind.name().to_string();
    let (mut clean, mut noise, mut noisy) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.n_utts() {
        let u = toy_utterance(cfg, i)?;
        let rel = |dir: &str| PathBuf::from(dir).join(format!("{}.wav", u.id));
        u.clean.write_wav(out.join(rel("clean")))?;
        u.noise.write_wav(out.join(rel("noise")))?;
        u.noisy.write_wav(out.join(rel("noisy")))?;
        let speaker = Some(format!("toy{}", i % 4));
        clean.push(ManifestEntry { speaker: speaker.clone(), ..ManifestEntry::new(&u.id, out.join(rel("clean")), u.split) });
        noise.push(ManifestEntry {
            noise_kind: Some(kind.clone()),
            ..ManifestEntry::new(&u.id, out.join(rel("noise")), u.split)
        });
        noisy.push(ManifestEntry {
            speaker,
            snr_db: Some(u.snr_db),
            noise_kind: Some(kind.clone()),
            ..ManifestEntry::new(&u.id, out.join(rel("noisy")), u.split)
        });
    }
    let corpus = ToyCorpus { clean: Manifest::new(clean)?, noise: Manifest::new(noise)?, noisy: Manifest::new(noisy)? };
    corpus.clean.save(out.join("clean.jsonl"))?;
    corpus.noise.save(out.join("noise.jsonl"))?;
    corpus.noisy.save(out.join("noisy.jsonl"))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000)
    }

    #[test]
    fn zero_db_equalizes_power() {
        let clean = random_wave(5000, 1);
        let noise = random_wave(9000, 2);
        let m = mix_at_snr_parts(&clean, &noise, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!((m.noise.power() / clean.power() - 1.0).abs() < 1e-9);
        let diff: Vec<f64> = m.noisy.samples.iter().zip(&clean.samples).map(|(a, b)| a - b).collect();
        assert!(diff.iter().zip(&m.noise.samples).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn very_high_snr_is_clean() {
        let clean = random_wave(3000, 1);
        let noisy = mix_at_snr(&clean, &random_wave(3000, 2), 120.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err: f64 = noisy.samples.iter().zip(&clean.samples).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = clean.samples.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(err / norm < 1e-4);
    }

    #[test]
    fn mixer_errors() {
        let clean = random_wave(100, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let other_rate = Waveform::new(vec![0.1; 100], 8000);
        assert!(matches!(mix_at_snr(&clean, &other_rate, 0.0, &mut rng), Err(Error::SampleRateMismatch { .. })));
        let silent = Waveform::new(vec![0.0; 100], 16_000);
        assert!(matches!(mix_at_snr(&clean, &silent, 0.0, &mut rng), Err(Error::ZeroPower("noise"))));
        assert!(matches!(mix_at_snr(&silent, &clean, 0.0, &mut rng), Err(Error::ZeroPower("clean"))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn mixer_hits_requested_snr(seed in 0u64..10_000, clean_len in 200usize..3000, noise_len in 50usize..4000, snr in -20.0f64..40.0) {
            let clean = random_wave(clean_len, seed);
            let noise = random_wave(noise_len, seed + 1);
            let m = mix_at_snr_parts(&clean, &noise, snr, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(m.noisy.len(), clean_len);
            prop_assert!((snr_db(&clean.samples, &m.noise.samples) - snr).abs() < 1e-9);
        }
    }

    #[test]
    fn manifest_parsing() {
        let text = "# header\n{\"id\":\"a\",\"path\":\"x/a.wav\",\"split\":\"train\"}\n\n{\"id\":\"b\",\"path\":\"/abs/b.wav\",\"split\":\"test\",\"snr_db\":5.0,\"noise_kind\":\"colored\",\"speaker\":\"s1\"}\n";
        let m = Manifest::parse(text, Path::new("/data"), Path::new("/data/m.jsonl")).unwrap();
        assert_eq!(m.entries.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(m.entries[0].path, PathBuf::from("/data/x/a.wav"));
        assert_eq!(m.entries[1].path, PathBuf::from("/abs/b.wav"));
        assert_eq!(m.entries[1].snr_db, Some(5.0));
        assert_eq!(m.split(Split::Test).count(), 1);

        let dup = "{\"id\":\"a\",\"path\":\"a.wav\",\"split\":\"train\"}\n{\"id\":\"a\",\"path\":\"b.wav\",\"split\":\"test\"}\n";
        assert!(matches!(Manifest::parse(dup, Path::new(""), Path::new("m")), Err(Error::DuplicateId(id)) if id == "a"));
        let bad = "{\"id\":\"a\",\"path\":\"a.wav\",\"split\":\"dev\"}\n";
        assert!(matches!(Manifest::parse(bad, Path::new(""), Path::new("m")), Err(Error::Manifest { line: 1, .. })));
        let round = Manifest::parse(&m.to_jsonl(Path::new("/data")), Path::new("/data"), Path::new("m")).unwrap();
        assert_eq!(round, m);
    }

    #[test]
    fn manifest_load_requires_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(vec![ManifestEntry::new("a", dir.path().join("a.wav"), Split::Train)]).unwrap();
        m.save(dir.path().join("m.jsonl")).unwrap();
        assert!(matches!(Manifest::load(dir.path().join("m.jsonl")), Err(Error::Io { .. })));
        random_wave(100, 0).write_wav(dir.path().join("a.wav")).unwrap();
        let back = Manifest::load(dir.path().join("m.jsonl")).unwrap();
        assert_eq!(back, m);
        assert!(std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap().contains("\"path\":\"a.wav\""));
    }

    #[test]
    fn toy_corpus_is_deterministic_and_well_formed() {
        let cfg = ToyCorpusConfig { n_train: 2, n_valid: 1, n_test: 2, duration_s: 1.0, snrs_db: vec![-5.0, 0.0, 5.0], ..Default::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = make_toy_corpus(&cfg, a.path()).unwrap();
        make_toy_corpus(&cfg, b.path()).unwrap();
        for sub in ["clean", "noise", "noisy"] {
            for i in 0..5 {
                let name = format!("{sub}/utt{i:04}.wav");
                let x = std::fs::read(a.path().join(&name)).unwrap();
                assert_eq!(x, std::fs::read(b.path().join(&name)).unwrap(), "{name}");
            }
        }
        assert_eq!(ca.noisy.split(Split::Train).count(), 2);
        assert_eq!(ca.noisy.split(Split::Valid).count(), 1);
        assert_eq!(ca.noisy.split(Split::Test).count(), 2);
        let snrs: Vec<f64> = ca.noisy.entries.iter().map(|e| e.snr_db.unwrap()).collect();
        assert_eq!(snrs, [-5.0, 0.0, 5.0, -5.0, 0.0]);
        let loaded = Manifest::load(a.path().join("noisy.jsonl")).unwrap();
        assert_eq!(loaded, ca.noisy);
        for u in toy_utterances(&cfg).unwrap() {
            assert_eq!(u.clean.len(), 16_000);
            assert!(normalized_cross_correlation(&u.clean.samples, &u.noise.samples) < 0.05);
            assert!(u.noisy.peak() <= 0.95 + 1e-12);
            assert!((snr_db(&u.clean.samples, &u.noise.samples) - u.snr_db).abs() < 1e-9);
        }
    }

    #[test]
    fn ten_three_second_files() {
        let cfg = ToyCorpusConfig { n_test: 10, duration_s: 3.0, noise_kind: NoiseKind::Babble, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let c = make_toy_corpus(&cfg, dir.path()).unwrap();
        assert_eq!(c.clean.len(), 10);
        for e in &c.clean.entries {
            assert_eq!(Waveform::read_wav(&e.path).unwrap().len(), 48_000);
        }
    }
}
