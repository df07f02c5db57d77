//! Parameter-space evaluation metrics: whole-face distance, mouth-channel
//! error, chunk-boundary continuity, high-frequency eye-region energy, and
//! an entry-difference diversity score. Landmark- and video-based metrics
//! are out of scope; everything here works directly on channel values.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::blendshape::{ChannelLayout, ExpressionSequence};
use crate::error::{EngineError, Result};

fn check_lengths(pred: &ExpressionSequence, truth: &ExpressionSequence) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(EngineError::dimension("metric frame count", truth.len(), pred.len()));
    }
    if pred.dim() != truth.dim() {
        return Err(EngineError::dimension("metric channels", truth.dim(), pred.dim()));
    }
    Ok(())
}

/// Mean over frames of the L2 norm of the per-frame channel difference.
pub fn param_lmd(pred: &ExpressionSequence, truth: &ExpressionSequence) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .frames()
        .iter()
        .zip(truth.frames())
        .map(|(p, t)| {
            p.values()
                .iter()
                .zip(t.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean squared error restricted to the mouth-masked channels.
pub fn mouth_mse(
    pred: &ExpressionSequence,
    truth: &ExpressionSequence,
    layout: &ChannelLayout,
) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mouth = layout.mouth_indices();
    if mouth.is_empty() || pred.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, t) in pred.frames().iter().zip(truth.frames()) {
        for &ch in &mouth {
            let d = p.values()[ch] - t.values()[ch];
            sum += d * d;
        }
    }
    Ok(sum / (pred.len() * mouth.len()) as f64)
}

/// Mean squared error over mouth channels against an explicit target
/// matrix `(frames, |mouth|)` in mask order.
pub fn mouth_mse_against(
    pred: &ExpressionSequence,
    target: &Array2<f64>,
    layout: &ChannelLayout,
) -> Result<f64> {
    let mouth = layout.mouth_indices();
    if target.dim() != (pred.len(), mouth.len()) {
        return Err(EngineError::dimension(
            "mouth target",
            format!("({}, {})", pred.len(), mouth.len()),
            format!("{:?}", target.dim()),
        ));
    }
    if mouth.is_empty() || pred.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (n, p) in pred.frames().iter().enumerate() {
        for (k, &ch) in mouth.iter().enumerate() {
            let d = p.values()[ch] - target[[n, k]];
            sum += d * d;
        }
    }
    Ok(sum / (pred.len() * mouth.len()) as f64)
}

/// Fraction of entries whose absolute difference exceeds `tol`.
pub fn entry_diff_fraction(
    a: &ExpressionSequence,
    b: &ExpressionSequence,
    tol: f64,
) -> Result<f64> {
    check_lengths(a, b)?;
    let total = a.len() * a.dim();
    if total == 0 {
        return Ok(0.0);
    }
    let differing: usize = a
        .frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| {
            x.values()
                .iter()
                .zip(y.values())
                .filter(|(p, q)| (**p - **q).abs() > tol)
                .count()
        })
        .sum();
    Ok(differing as f64 / total as f64)
}

/// Per-channel high-frequency report for the eye region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighFreqReport {
    /// `(channel name, fraction of spectral power above the cutoff)` for
    /// every eye-region channel.
    pub per_channel: Vec<(String, f64)>,
    /// Mean fraction over the eye-region channels.
    pub eye_average: f64,
}

/// Fraction of temporal spectral power above `cutoff_hz`, per eye-region
/// channel (names starting with `eye`), DC excluded. Constant channels
/// score 0.
pub fn high_freq_energy(
    seq: &ExpressionSequence,
    cutoff_hz: f64,
    layout: &ChannelLayout,
) -> Result<HighFreqReport> {
    if seq.dim() != layout.total_dim() {
        return Err(EngineError::dimension("high_freq_energy", layout.total_dim(), seq.dim()));
    }
    let n = seq.len();
    let eye_channels: Vec<usize> = layout
        .channel_names()
        .iter()
        .enumerate()
        .filter(|(i, name)| *i < layout.expression_dim() && name.starts_with("eye"))
        .map(|(i, _)| i)
        .collect();
    let mut per_channel = Vec::with_capacity(eye_channels.len());
    if n < 2 {
        for &ch in &eye_channels {
            per_channel.push((layout.channel_name(ch).to_string(), 0.0));
        }
        return Ok(HighFreqReport {
            per_channel,
            eye_average: 0.0,
        });
    }

    let fft = FftPlanner::new().plan_fft_forward(n);
    let fps = seq.fps();
    for &ch in &eye_channels {
        let mut buf: Vec<Complex<f64>> = seq
            .frames()
            .iter()
            .map(|f| Complex::new(f.values()[ch], 0.0))
            .collect();
        let mean = buf.iter().map(|c| c.re).sum::<f64>() / n as f64;
        for c in buf.iter_mut() {
            c.re -= mean;
        }
        fft.process(&mut buf);
        let mut total = 0.0;
        let mut high = 0.0;
        for (k, c) in buf.iter().enumerate().take(n / 2 + 1).skip(1) {
            let power = c.norm_sqr();
            let freq = k as f64 * fps / n as f64;
            total += power;
            if freq > cutoff_hz {
                high += power;
            }
        }
        let fraction = if total > 1e-18 { high / total } else { 0.0 };
        per_channel.push((layout.channel_name(ch).to_string(), fraction));
    }
    let eye_average = if per_channel.is_empty() {
        0.0
    } else {
        per_channel.iter().map(|(_, f)| f).sum::<f64>() / per_channel.len() as f64
    };
    Ok(HighFreqReport {
        per_channel,
        eye_average,
    })
}

/// Default spectral cutoff (Hz) separating "high-frequency" eye motion.
pub const DEFAULT_HIGH_FREQ_CUTOFF_HZ: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub param_lmd: f64,
    pub mouth_mse: f64,
    pub high_freq_eye_energy: f64,
    /// Fraction of entries differing by more than 1e-3.
    pub diversity: f64,
    /// Per chunk-boundary max channel jump, when boundaries are known.
    pub boundary_jumps: Vec<f64>,
    pub max_boundary_jump: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub mean_param_lmd: f64,
    pub mean_mouth_mse: f64,
    pub mean_high_freq_eye_energy: f64,
    pub mean_diversity: f64,
}

/// JSON-serializable evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<(String, SequenceMetrics)>,
    pub aggregate: EvalAggregate,
}

impl EvalReport {
    pub fn from_sequences(sequences: Vec<(String, SequenceMetrics)>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(EngineError::Validation("report needs at least one sequence".into()));
        }
        let n = sequences.len() as f64;
        let aggregate = EvalAggregate {
            mean_param_lmd: sequences.iter().map(|(_, m)| m.param_lmd).sum::<f64>() / n,
            mean_mouth_mse: sequences.iter().map(|(_, m)| m.mouth_mse).sum::<f64>() / n,
            mean_high_freq_eye_energy: sequences
                .iter()
                .map(|(_, m)| m.high_freq_eye_energy)
                .sum::<f64>()
                / n,
            mean_diversity: sequences.iter().map(|(_, m)| m.diversity).sum::<f64>() / n,
        };
        let report = EvalReport { sequences, aggregate };
        report.validate()?;
        Ok(report)
    }

    /// Every metric finite and the aggregates consistent with the
    /// per-sequence values.
    pub fn validate(&self) -> Result<()> {
        let mut all = Vec::new();
        for (name, m) in &self.sequences {
            all.extend([m.param_lmd, m.mouth_mse, m.high_freq_eye_energy, m.diversity]);
            all.extend(m.boundary_jumps.iter().copied());
            if let Some(j) = m.max_boundary_jump {
                all.push(j);
            }
            if all.iter().any(|v| !v.is_finite()) {
                return Err(EngineError::Validation(format!(
                    "non-finite metric in sequence {name:?}"
                )));
            }
        }
        let n = self.sequences.len() as f64;
        let mean = |f: fn(&SequenceMetrics) -> f64| -> f64 {
            self.sequences.iter().map(|(_, m)| f(m)).sum::<f64>() / n
        };
        let checks = [
            (self.aggregate.mean_param_lmd, mean(|m| m.param_lmd)),
            (self.aggregate.mean_mouth_mse, mean(|m| m.mouth_mse)),
            (
                self.aggregate.mean_high_freq_eye_energy,
                mean(|m| m.high_freq_eye_energy),
            ),
            (self.aggregate.mean_diversity, mean(|m| m.diversity)),
        ];
        for (got, want) in checks {
            if (got - want).abs() > 1e-9 {
                return Err(EngineError::Validation(format!(
                    "aggregate {got} inconsistent with per-sequence mean {want}"
                )));
            }
        }
        Ok(())
    }
}
