//! SI-SDR, real-time factor and corpus-level evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Manifest, ManifestEntry, Split};
use crate::enhancement::{analysis_stft, run_mode, synthesize, wiener_posterior, EnhancementMode, ModelSource, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::noise_model::NoiseVariant;
use crate::signal::{ComplexSpectrogram, StftConfig, Waveform};

/// Value reported when the estimate is an exact multiple of the reference.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant signal-to-distortion ratio in dB, capped at
/// [`SI_SDR_CAP_DB`].
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "SI-SDR needs equal lengths, got {} and {}",
            est.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy == 0.0 {
        return Err(Error::ZeroPower("reference"));
    }
    let alpha = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let target: f64 = alpha * alpha * ref_energy;
    let residual: f64 = est.iter().zip(reference).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    if residual == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).min(SI_SDR_CAP_DB))
}

/// [`si_sdr`] after cutting or zero-padding `est` to the reference length.
pub fn si_sdr_aligned(est: &Waveform, reference: &Waveform) -> Result<f64> {
    let mut e = est.samples.clone();
    e.resize(reference.len(), 0.0);
    si_sdr(&e, &reference.samples)
}

/// Total processing time divided by total audio duration. Every utterance
/// is processed once, sequentially.
pub fn rtf<F>(mut process: F, utterances: &[Waveform]) -> Result<f64>
where
    F: FnMut(&Waveform) -> Result<()>,
{
    if utterances.is_empty() {
        return Err(Error::InvalidInput("RTF needs at least one utterance".into()));
    }
    let mut elapsed = Duration::ZERO;
    let mut audio = 0.0;
    for u in utterances {
        let start = Instant::now();
        process(u)?;
        elapsed += start.elapsed();
        audio += u.duration_secs();
    }
    Ok(elapsed.as_secs_f64() / audio)
}

/// Known-variance Wiener filter: speech variance is the clean power, noise
/// variance is the per-bin time average of the noise power.
pub fn oracle_wiener(noisy: &Waveform, clean: &Waveform, noise: &Waveform, stft: &StftConfig) -> Result<Waveform> {
    let x = analysis_stft(noisy, stft)?;
    let vs = analysis_stft(clean, stft)?.power().mapv(|v| v.max(VARIANCE_FLOOR));
    let noise_power = analysis_stft(noise, stft)?.power();
    let mean = noise_power.mean_axis(Axis(1)).expect("at least one frame");
    let vn = Array2::from_shape_fn(x.data.dim(), |(f, _)| mean[f].max(VARIANCE_FLOOR));
    let post = wiener_posterior(&x, &vs, &vn)?;
    synthesize(&ComplexSpectrogram { data: post.mean, config: x.config }, noisy.len(), noisy.sample_rate)
}

/// A metric computed by an external program, called as
/// `program args... <reference.wav> <estimate.wav>`; the last number printed
/// on standard output is taken as the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalMetric {
    pub name: String,
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExternalMetric {
    pub fn score(&self, reference: &Path, estimate: &Path) -> Result<f64> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(reference)
            .arg(estimate)
            .output()
            .map_err(|e| Error::io(&self.program, e))?;
        if !out.status.success() {
            return Err(Error::InvalidInput(format!("metric `{}` exited with {}", self.name, out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.split(|c: char| c.is_whitespace() || c == ',' || c == ':' || c == '=')
            .rev()
            .find_map(|t| t.parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidInput(format!("metric `{}` printed no number", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub mode: String,
    pub variant: NoiseVariant,
    /// `None` when no reference is available.
    pub si_sdr_noisy: Option<f64>,
    pub si_sdr_enhanced: Option<f64>,
    pub iters: usize,
    pub rtf: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRow {
    pub fn improvement(&self) -> Option<f64> {
        Some(self.si_sdr_enhanced? - self.si_sdr_noisy?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    pub failures: usize,
    pub median_si_sdr_noisy: Option<f64>,
    pub median_si_sdr_enhanced: Option<f64>,
    pub mean_si_sdr_noisy: Option<f64>,
    pub mean_si_sdr_enhanced: Option<f64>,
    pub median_improvement: Option<f64>,
    pub mean_rtf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Aggregates,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let col = |f: fn(&EvalRow) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
        let noisy = col(|r| r.si_sdr_noisy);
        let enhanced = col(|r| r.si_sdr_enhanced);
        let gains = col(|r| r.improvement());
        let rtfs: Vec<f64> = ok.iter().map(|r| r.rtf).collect();
        let aggregates = Aggregates {
            n: rows.len(),
            failures: rows.len() - ok.len(),
            median_si_sdr_noisy: median(&noisy),
            median_si_sdr_enhanced: median(&enhanced),
            mean_si_sdr_noisy: mean(&noisy),
            mean_si_sdr_enhanced: mean(&enhanced),
            median_improvement: median(&gains),
            mean_rtf: mean(&rtfs).unwrap_or(0.0),
        };
        Self { rows, aggregates }
    }

    /// One JSON object per row followed by an `{"aggregates": ...}` line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out += &serde_json::to_string(r).expect("row serializes");
            out.push('\n');
        }
        out += &serde_json::json!({ "aggregates": self.aggregates }).to_string();
        out.push('\n');
        out
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        let externals: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.external.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut header = vec!["id".to_string(), "mode".into(), "variant".into(), "noisy".into(), "enhanced".into(), "gain".into(), "iters".into(), "rtf".into()];
        header.extend(externals.iter().cloned());
        let mut lines: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let mut line = vec![
                r.id.clone(),
                r.mode.clone(),
                r.variant.to_string(),
                fmt(r.si_sdr_noisy),
                fmt(r.si_sdr_enhanced),
                fmt(r.improvement()),
                r.iters.to_string(),
                format!("{:.4}", r.rtf),
            ];
            for name in &externals {
                line.push(fmt(r.external.get(name).copied().flatten()));
            }
            if let Some(e) = &r.error {
                line.push(format!("FAILED: {e}"));
            }
            lines.push(line);
        }
        let a = &self.aggregates;
        let mut summary = vec![
            "median".to_string(),
            String::new(),
            String::new(),
            fmt(a.median_si_sdr_noisy),
            fmt(a.median_si_sdr_enhanced),
            fmt(a.median_improvement),
            String::new(),
            format!("{:.4}", a.mean_rtf),
        ];
        summary.extend(externals.iter().map(|_| String::new()));
        lines.push(summary);
        let n_cols = lines.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..n_cols).map(|c| lines.iter().filter_map(|l| l.get(c)).map(String::len).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

/// Settings shared by every utterance of an evaluation run.
#[derive(Debug, Clone, Copy)]
pub struct EvalSetup<'a> {
    pub models: ModelSource<'a>,
    pub variant: NoiseVariant,
    pub mode: &'a EnhancementMode,
    pub stft: &'a StftConfig,
    pub seed: u64,
    pub external: &'a [ExternalMetric],
    /// Where enhanced audio is written, when set.
    pub out_dir: Option<&'a Path>,
}

/// Random stream for utterance `index`; independent of evaluation order.
pub fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Enhances and scores one utterance. Failures are recorded in the row.
pub fn evaluate_one(index: usize, entry: &ManifestEntry, reference: Option<&ManifestEntry>, setup: &EvalSetup<'_>) -> EvalRow {
    let mut row = EvalRow {
        id: entry.id.clone(),
        mode: setup.mode.kind.to_string(),
        variant: setup.variant,
        si_sdr_noisy: None,
        si_sdr_enhanced: None,
        iters: setup.mode.iterations(),
        rtf: 0.0,
        external: BTreeMap::new(),
        error: None,
    };
    if let Err(e) = score_into(&mut row, index, entry, reference, setup) {
        row.error = Some(e.to_string());
    }
    row
}

fn score_into(row: &mut EvalRow, index: usize, entry: &ManifestEntry, reference: Option<&ManifestEntry>, setup: &EvalSetup<'_>) -> Result<()> {
    let noisy = Waveform::read_wav(&entry.path)?;
    let mut rng = utterance_rng(setup.seed, index);
    let start = Instant::now();
    let outcome = run_mode(&noisy, setup.models, setup.variant, setup.mode, setup.stft, &mut rng)?;
    row.rtf = start.elapsed().as_secs_f64() / noisy.duration_secs();
    let written = match setup.out_dir {
        Some(dir) => {
            let path = dir.join(format!("{}.wav", entry.id));
            outcome.waveform.write_wav(&path)?;
            Some(path)
        }
        None => None,
    };
    if let Some(r) = reference {
        let clean = Waveform::read_wav(&r.path)?;
        row.si_sdr_noisy = Some(si_sdr_aligned(&noisy, &clean)?);
        row.si_sdr_enhanced = Some(si_sdr_aligned(&outcome.waveform, &clean)?);
        if let Some(est) = &written {
            for m in setup.external {
                row.external.insert(m.name.clone(), m.score(&r.path, est).ok());
            }
        }
    }
    Ok(())
}

/// The test-split entries of `noisy` paired with same-id references.
pub fn test_pairs<'m>(noisy: &'m Manifest, clean: Option<&'m Manifest>) -> Result<Vec<(&'m ManifestEntry, Option<&'m ManifestEntry>)>> {
    let pairs: Vec<_> = noisy.split(Split::Test).map(|e| (e, clean.and_then(|c| c.get(&e.id)))).collect();
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus("the manifest has no test utterances".into()));
    }
    Ok(pairs)
}

/// Enhances every test utterance in order and scores it against the clean
/// manifest entry with the same id, when there is one.
pub fn evaluate(noisy: &Manifest, clean: Option<&Manifest>, setup: &EvalSetup<'_>) -> Result<EvalReport> {
    let rows = test_pairs(noisy, clean)?
        .into_iter()
        .enumerate()
        .map(|(i, (e, r))| evaluate_one(i, e, r, setup))
        .collect();
    Ok(EvalReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    fn orthogonal_pair(len: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut n: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = n.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / r.iter().map(|b| b * b).sum::<f64>();
        n.iter_mut().zip(&r).for_each(|(a, b)| *a -= proj * b);
        let scale = (r.iter().map(|b| b * b).sum::<f64>() / n.iter().map(|a| a * a).sum::<f64>()).sqrt();
        n.iter_mut().for_each(|a| *a *= scale);
        (r, n)
    }

    #[test]
    fn si_sdr_cases() {
        let (r, n) = orthogonal_pair(1000, 1);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        let doubled: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        assert_eq!(si_sdr(&doubled, &r).unwrap(), SI_SDR_CAP_DB);
        let noisy: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&noisy, &r).unwrap().abs() < 1e-9);
        assert!(si_sdr(&r, &[0.0; 1000]).is_err());
        assert!(si_sdr(&r[..10], &r).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn si_sdr_ignores_reference_and_target_scale(seed in 0u64..1000, c in 0.1f64..10.0, k in prop_oneof_scale()) {
            let (r, n) = orthogonal_pair(512, seed);
            let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| c * a + b).collect();
            let base = si_sdr(&est, &r).unwrap();
            let scaled_ref: Vec<f64> = r.iter().map(|a| k * a).collect();
            prop_assert!((si_sdr(&est, &scaled_ref).unwrap() - base).abs() < 1e-9);
            prop_assert!((base - 20.0 * c.log10()).abs() < 1e-9);
        }
    }

    fn prop_oneof_scale() -> impl proptest::strategy::Strategy<Value = f64> {
        use proptest::strategy::Strategy;
        (0.01f64..100.0, proptest::bool::ANY).prop_map(|(m, neg)| if neg { -m } else { m })
    }

    #[test]
    fn si_sdr_falls_as_noise_grows() {
        let (r, n) = orthogonal_pair(800, 7);
        let mut last = f64::INFINITY;
        for g in [1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0, 10.0] {
            let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + g * b).collect();
            let s = si_sdr(&est, &r).unwrap();
            assert!(s < last && s <= SI_SDR_CAP_DB);
            last = s;
        }
    }

    #[test]
    fn alignment_pads_and_truncates() {
        let (r, _) = orthogonal_pair(100, 3);
        let reference = Waveform::new(r.clone(), 16_000);
        let mut longer = r.clone();
        longer.extend([0.5; 20]);
        assert_eq!(si_sdr_aligned(&Waveform::new(longer, 16_000), &reference).unwrap(), SI_SDR_CAP_DB);
        let shorter = Waveform::new(r[..90].to_vec(), 16_000);
        assert!(si_sdr_aligned(&shorter, &reference).unwrap() < SI_SDR_CAP_DB);
    }

    #[test]
    fn rtf_of_a_sleeping_stub() {
        let audio = vec![Waveform::new(vec![0.0; 1600], 16_000); 2];
        let r = rtf(|w| {
            std::thread::sleep(Duration::from_secs_f64(0.5 * w.duration_secs()));
            Ok(())
        }, &audio)
        .unwrap();
        assert!((r - 0.5).abs() < 0.025, "{r}");
        assert!(rtf(|_| Ok(()), &[]).is_err());
    }

    #[test]
    fn aggregates_follow_rows() {
        let row = |id: &str, noisy: f64, enh: f64, rtf: f64| EvalRow {
            id: id.into(),
            mode: "NA".into(),
            variant: NoiseVariant::Lv,
            si_sdr_noisy: Some(noisy),
            si_sdr_enhanced: Some(enh),
            iters: 3,
            rtf,
            external: BTreeMap::new(),
            error: None,
        };
        let mut failed = row("c", 0.0, 0.0, 0.0);
        failed.error = Some("boom".into());
        let report = EvalReport::from_rows(vec![row("a", 0.0, 4.0, 1.0), row("b", 2.0, 3.0, 3.0), failed]);
        let a = &report.aggregates;
        assert_eq!((a.n, a.failures), (3, 1));
        assert_eq!(a.median_si_sdr_noisy, Some(1.0));
        assert_eq!(a.median_improvement, Some(2.5));
        assert_eq!(a.mean_rtf, 2.0);
        let text = report.to_jsonl();
        assert_eq!(text.lines().count(), 4);
        let back: EvalRow = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, report.rows[0]);
        assert!(report.table().contains("FAILED: boom"));
    }

    #[test]
    fn oracle_wiener_improves_a_noisy_sine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 16_000;
        let clean: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin() * 0.3).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
        let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let w = |v: Vec<f64>| Waveform::new(v, 16_000);
        let out = oracle_wiener(&w(noisy.clone()), &w(clean.clone()), &w(noise), &StftConfig::default()).unwrap();
        assert_eq!(out.len(), n);
        assert!(si_sdr(&out.samples, &clean).unwrap() > si_sdr(&noisy, &clean).unwrap() + 10.0);
    }

    #[test]
    fn external_metric_parses_last_number() {
        let m = ExternalMetric { name: "echo".into(), program: "echo".into(), args: vec!["score:".into(), "3.25".into()] };
        assert_eq!(m.score(Path::new("a.wav"), Path::new("b.wav")).unwrap(), 3.25);
        let missing = ExternalMetric { name: "none".into(), program: "/nonexistent/metric".into(), args: vec![] };
        assert!(missing.score(Path::new("a"), Path::new("b")).is_err());
    }
}
