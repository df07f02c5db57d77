//! Audio ingestion: 16-bit PCM mono WAV decoding and a log-mel filterbank
//! extractor that emits one feature row per video frame. Precomputed
//! feature matrices pass through verbatim.

use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::conditioning::AudioFeatureSequence;
use crate::error::{EngineError, Result};
use crate::fileio;

/// Log floor added to mel energies before the log; silence maps to a
/// constant `log10(floor)` row.
const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    /// Feature rows are this wide (number of mel bands).
    pub feature_dim: usize,
    pub fft_size: usize,
    pub mel_fmin: f64,
    /// Upper band edge; defaults to the Nyquist frequency.
    pub mel_fmax: Option<f64>,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            feature_dim: 29,
            fft_size: 1024,
            mel_fmin: 0.0,
            mel_fmax: None,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(EngineError::Config("feature_dim must be positive".into()));
        }
        if self.fft_size < 16 || !self.fft_size.is_power_of_two() {
            return Err(EngineError::Config(format!(
                "fft_size must be a power of two >= 16, got {}",
                self.fft_size
            )));
        }
        if self.mel_fmin < 0.0 {
            return Err(EngineError::Config("mel_fmin must be >= 0".into()));
        }
        Ok(())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Log-mel filterbank energies aligned to the video frame rate: analysis
/// windows are centered at `(i + 0.5) / fps` seconds.
pub struct LogMelExtractor {
    cfg: AudioConfig,
}

impl LogMelExtractor {
    pub fn new(cfg: AudioConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LogMelExtractor { cfg })
    }

    fn mel_filters(&self, sample_rate: u32) -> Vec<Vec<(usize, f64)>> {
        let nyquist = sample_rate as f64 / 2.0;
        let fmax = self.cfg.mel_fmax.unwrap_or(nyquist).min(nyquist);
        let n_mels = self.cfg.feature_dim;
        let mel_lo = hz_to_mel(self.cfg.mel_fmin);
        let mel_hi = hz_to_mel(fmax);
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = self.cfg.fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / self.cfg.fft_size as f64;
        (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
                let mut taps = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f >= lo && f <= mid && mid > lo {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f <= hi && hi > mid {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        taps.push((k, w));
                    }
                }
                taps
            })
            .collect()
    }

    /// One feature row per `1/fps` seconds of audio.
    pub fn extract(&self, samples: &[f64], sample_rate: u32, fps: f64) -> Result<AudioFeatureSequence> {
        if sample_rate == 0 || !(fps > 0.0) {
            return Err(EngineError::Audio("sample rate and fps must be positive".into()));
        }
        let n_frames = (samples.len() as f64 * fps / sample_rate as f64).round() as usize;
        if n_frames == 0 {
            return Err(EngineError::Audio(format!(
                "audio too short: {} samples at {sample_rate} Hz yields no {fps}-fps frames",
                samples.len()
            )));
        }
        let fft_size = self.cfg.fft_size;
        let half = fft_size / 2;
        let window: Vec<f64> = (0..fft_size)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (fft_size - 1) as f64).cos())
            .collect();
        let filters = self.mel_filters(sample_rate);
        let fft = FftPlanner::new().plan_fft_forward(fft_size);

        let mut feats = Array2::zeros((n_frames, self.cfg.feature_dim));
        let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
        for i in 0..n_frames {
            let center = ((i as f64 + 0.5) * sample_rate as f64 / fps).round() as isize;
            for (n, slot) in buf.iter_mut().enumerate() {
                let idx = center - half as isize + n as isize;
                let s = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex::new(s * window[n], 0.0);
            }
            fft.process(&mut buf);
            for (m, taps) in filters.iter().enumerate() {
                let energy: f64 = taps
                    .iter()
                    .map(|&(k, w)| w * buf[k].norm_sqr())
                    .sum();
                feats[[i, m]] = (energy + LOG_FLOOR).log10();
            }
        }
        AudioFeatureSequence::new(feats, fps)
    }
}

/// Decode a 16-bit PCM mono WAV into `[-1, 1]` samples.
pub fn load_wav_mono_pcm16(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| EngineError::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(EngineError::Audio(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(EngineError::Audio(format!(
            "{}: expected 16-bit PCM, got {:?} {} bits",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let sample_rate = spec.sample_rate;
    let samples: std::result::Result<Vec<i16>, _> = reader.into_samples().collect();
    let samples = samples.map_err(|e| EngineError::Audio(format!("{}: {e}", path.display())))?;
    Ok((
        samples.into_iter().map(|s| s as f64 / 32768.0).collect(),
        sample_rate,
    ))
}

/// Load per-frame audio features from any supported source: `.wav` runs
/// the extractor, `.fmat`/`.csv` matrices pass through verbatim.
pub fn load_audio_features(path: &Path, fps: f64, cfg: &AudioConfig) -> Result<AudioFeatureSequence> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("wav") => {
            let (samples, sr) = load_wav_mono_pcm16(path)?;
            LogMelExtractor::new(cfg.clone())?.extract(&samples, sr, fps)
        }
        _ => {
            let m = fileio::read_matrix(path)?;
            if m.nrows() == 0 {
                return Err(EngineError::Audio(format!(
                    "{}: empty feature matrix",
                    path.display()
                )));
            }
            AudioFeatureSequence::new(m, fps)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn extractor() -> LogMelExtractor {
        LogMelExtractor::new(AudioConfig::default()).unwrap()
    }

    #[test]
    fn two_seconds_at_25fps_gives_50_rows() {
        let sr = 16_000u32;
        let samples: Vec<f64> = (0..2 * sr)
            .map(|n| (2.0 * std::f64::consts::PI * 440.0 * n as f64 / sr as f64).sin() * 0.4)
            .collect();
        let feats = extractor().extract(&samples, sr, 25.0).unwrap();
        assert_eq!(feats.len(), 50);
        assert_eq!(feats.feature_dim(), 29);
    }

    #[test]
    fn silence_gives_constant_rows() {
        let sr = 16_000u32;
        let samples = vec![0.0; sr as usize];
        let feats = extractor().extract(&samples, sr, 25.0).unwrap();
        let m = feats.feats();
        let mean = m.sum() / m.len() as f64;
        let var = m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m.len() as f64;
        assert!(var < 1e-6, "variance {var}");
        assert!((m[[0, 0]] - LOG_FLOOR.log10()).abs() < 1e-9);
    }

    #[test]
    fn tone_produces_non_constant_features() {
        let sr = 16_000u32;
        let samples: Vec<f64> = (0..sr)
            .map(|n| (2.0 * std::f64::consts::PI * 300.0 * n as f64 / sr as f64).sin() * 0.8)
            .collect();
        let feats = extractor().extract(&samples, sr, 25.0).unwrap();
        let m = feats.feats();
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo > 1.0, "tone should light up specific bands");
        assert!(m.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_short_audio_is_an_ingestion_error() {
        let err = extractor().extract(&[0.0; 10], 16_000, 25.0).unwrap_err();
        assert!(matches!(err, EngineError::Audio(_)));
        let err = extractor().extract(&[], 16_000, 25.0).unwrap_err();
        assert!(matches!(err, EngineError::Audio(_)));
    }

    #[test]
    fn precomputed_matrix_passes_through_verbatim() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("feats.fmat");
        let m = Array2::from_shape_fn((10, 29), |(i, j)| (i * 31 + j) as f64 * 0.01 - 1.0);
        fileio::write_matrix(&path, &m).unwrap();
        let feats = load_audio_features(&path, 25.0, &AudioConfig::default()).unwrap();
        assert_eq!(feats.feats(), &m);
        assert_eq!(feats.fps(), 25.0);
    }

    #[test]
    fn wav_round_trip_through_extractor() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for n in 0..16_000 {
            let v = (2.0 * std::f64::consts::PI * 220.0 * n as f64 / 16_000.0).sin();
            writer.write_sample((v * 12_000.0) as i16).unwrap();
        }
        writer.finalize().unwrap();
        let feats = load_audio_features(&path, 25.0, &AudioConfig::default()).unwrap();
        assert_eq!(feats.len(), 25);
    }

    #[test]
    fn stereo_wav_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            writer.write_sample(0i16).unwrap();
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();
        assert!(matches!(
            load_wav_mono_pcm16(&path),
            Err(EngineError::Audio(_))
        ));
    }
}
