//! Dataset construction: clip manifests for ingested ARKit sequences, the
//! synthetic oracle generator that makes desk-scale verification possible,
//! and window/chunk extraction for the two training stages.
//!
//! The oracle emits clips whose mouth channels are an exactly linear
//! function of the (smooth, bounded) audio features, with the map written
//! alongside as ground truth — so learned models can be scored against a
//! known target.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::blendshape::{ChannelLayout, EmotionStyleClip, ExpressionSequence};
use crate::conditioning::AudioFeatureSequence;
use crate::denoiser::{DiffusionDataset, DiffusionTrainItem};
use crate::error::{EngineError, Result};
use crate::fileio;
use crate::lip::LipWindow;

// -------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub emotion_label: String,
    /// Sequence CSV, relative to the manifest file.
    pub sequence: PathBuf,
    /// Audio feature matrix, relative to the manifest file.
    pub audio_features: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    /// Layout JSON, relative to the manifest file.
    pub layout: PathBuf,
    pub fps: f64,
    pub entries: Vec<ManifestEntry>,
}

impl ClipManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| EngineError::Validation(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| EngineError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::io(path.display().to_string(), e))?;
        let manifest: ClipManifest = serde_json::from_str(&text).map_err(|e| EngineError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        let mut seen = BTreeSet::new();
        for e in &manifest.entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(EngineError::Dataset(format!(
                    "duplicate clip_id {:?} in {}",
                    e.clip_id,
                    path.display()
                )));
            }
        }
        Ok(manifest)
    }
}

/// A clip with its sequence and aligned audio features in memory.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub clip_id: String,
    pub emotion_label: String,
    pub sequence: ExpressionSequence,
    pub audio: AudioFeatureSequence,
}

impl LoadedClip {
    pub fn style_clip(&self) -> Result<EmotionStyleClip> {
        EmotionStyleClip::new(
            self.sequence.clone(),
            self.emotion_label.clone(),
            self.clip_id.clone(),
        )
    }
}

/// Load the manifest, its layout, and every referenced clip. Relative
/// paths resolve against the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<(ChannelLayout, Vec<LoadedClip>)> {
    let manifest = ClipManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let layout = ChannelLayout::from_json_file(&base.join(&manifest.layout))?;
    let mut clips = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let seq_path = base.join(&e.sequence);
        let feat_path = base.join(&e.audio_features);
        let sequence = fileio::load_sequence(&seq_path, &layout, manifest.fps, false)?;
        let feats = fileio::read_matrix(&feat_path)?;
        let audio = AudioFeatureSequence::new(feats, manifest.fps)?;
        if audio.len() != sequence.len() {
            return Err(EngineError::Dataset(format!(
                "clip {:?}: {} frames of expression vs {} rows of audio features",
                e.clip_id,
                sequence.len(),
                audio.len()
            )));
        }
        clips.push(LoadedClip {
            clip_id: e.clip_id.clone(),
            emotion_label: e.emotion_label.clone(),
            sequence,
            audio,
        });
    }
    if clips.is_empty() {
        return Err(EngineError::Dataset(format!(
            "manifest {} lists no clips",
            manifest_path.display()
        )));
    }
    Ok((layout, clips))
}

// ---------------------------------------------------------------- oracle

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmotionArchetype {
    /// Peak-to-peak swing of the brow sinusoids, in [0,1].
    pub eyebrow_amplitude: f64,
    /// Expected blink events per second.
    pub blink_rate_hz: f64,
    /// Shifts the mouth-channel intercepts, in [0,1].
    pub base_mouth_openness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    pub seed: u64,
    pub clip_count: usize,
    pub frames_per_clip: usize,
    pub fps: f64,
    /// Audio feature dimension of the generated matrices.
    pub feature_dim: usize,
    pub archetypes: BTreeMap<String, EmotionArchetype>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        let mut archetypes = BTreeMap::new();
        archetypes.insert(
            "angry".to_string(),
            EmotionArchetype {
                eyebrow_amplitude: 0.8,
                blink_rate_hz: 0.3,
                base_mouth_openness: 0.6,
            },
        );
        archetypes.insert(
            "happy".to_string(),
            EmotionArchetype {
                eyebrow_amplitude: 0.5,
                blink_rate_hz: 0.5,
                base_mouth_openness: 0.5,
            },
        );
        archetypes.insert(
            "neutral".to_string(),
            EmotionArchetype {
                eyebrow_amplitude: 0.2,
                blink_rate_hz: 0.4,
                base_mouth_openness: 0.4,
            },
        );
        OracleSpec {
            seed: 7,
            clip_count: 6,
            frames_per_clip: 96,
            fps: 25.0,
            feature_dim: 29,
            archetypes,
        }
    }
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clip_count == 0 || self.frames_per_clip < 4 {
            return Err(EngineError::Config(
                "oracle needs clip_count >= 1 and frames_per_clip >= 4".into(),
            ));
        }
        if !(self.fps > 0.0) || self.feature_dim == 0 {
            return Err(EngineError::Config("oracle fps and feature_dim must be positive".into()));
        }
        if self.archetypes.is_empty() {
            return Err(EngineError::Config("oracle needs at least one archetype".into()));
        }
        for (label, a) in &self.archetypes {
            if !(0.0..=1.0).contains(&a.eyebrow_amplitude)
                || !(0.0..=1.0).contains(&a.base_mouth_openness)
                || a.blink_rate_hz < 0.0
            {
                return Err(EngineError::Config(format!(
                    "archetype {label:?}: amplitudes must lie in [0,1] and blink rate >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// The exact audio-to-mouth map and the generator events, emitted next to
/// the dataset so tests and evaluation can score against known truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGroundTruth {
    /// `(mouth_channels, feature_dim)` linear map applied to every
    /// feature row.
    pub map_weights: Vec<Vec<f64>>,
    /// Per emotion label, the per-channel intercept.
    pub label_intercepts: BTreeMap<String, Vec<f64>>,
    /// Mouth channel indices (ascending) the map writes to.
    pub mouth_channels: Vec<usize>,
    pub clips: Vec<OracleClipTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleClipTruth {
    pub clip_id: String,
    pub emotion_label: String,
    /// Frame indices of blink event centers.
    pub blink_centers: Vec<usize>,
}

impl OracleGroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| EngineError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }

    /// Apply the emitted map to a feature matrix: `(n, mouth_channels)`.
    pub fn apply_map(&self, label: &str, feats: &Array2<f64>) -> Result<Array2<f64>> {
        let intercept = self.label_intercepts.get(label).ok_or_else(|| {
            EngineError::Dataset(format!("no intercepts recorded for label {label:?}"))
        })?;
        let m = self.map_weights.len();
        let mut out = Array2::zeros((feats.nrows(), m));
        for (k, row) in self.map_weights.iter().enumerate() {
            if row.len() != feats.ncols() {
                return Err(EngineError::dimension("oracle map width", feats.ncols(), row.len()));
            }
            for n in 0..feats.nrows() {
                let dot: f64 = row.iter().zip(feats.row(n)).map(|(a, b)| a * b).sum();
                out[[n, k]] = dot + intercept[k];
            }
        }
        Ok(out)
    }
}

pub struct OracleOutcome {
    pub manifest_path: PathBuf,
    pub layout_path: PathBuf,
    pub ground_truth_path: PathBuf,
    pub ground_truth: OracleGroundTruth,
    pub clip_ids: Vec<String>,
}

/// Smooth bounded signal: `tanh` of a stationary AR(1) process.
fn smooth_signal<R: Rng + ?Sized>(n: usize, rho: f64, stationary_std: f64, rng: &mut R) -> Vec<f64> {
    let sigma = stationary_std * (1.0 - rho * rho).sqrt();
    let mut x = stationary_std * crate::diffusion::sample_noise(1, 1, rng)[[0, 0]];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(x.tanh());
        let w: f64 = crate::diffusion::sample_noise(1, 1, rng)[[0, 0]];
        x = rho * x + sigma * w;
    }
    out
}

const BLINK_PROFILE: [f64; 5] = [0.3, 0.8, 1.0, 0.8, 0.3];

/// Generate the synthetic dataset under `out_dir`:
/// `layout.json`, `manifest.json`, `ground_truth.json`, and per clip a
/// sequence CSV plus a feature matrix. Byte-identical for a fixed spec.
///
/// Channel content:
/// - audio features: independent tanh-squashed AR(1) processes;
/// - mouth channels: `map_weights * features + intercept(label)`;
/// - `eyeBlink*`: bump profiles at Poisson-drawn centers;
/// - `brow*`: archetype-scaled sinusoids with per-clip frequency/phase;
/// - other expression channels: low-amplitude smooth noise around 0.1;
/// - pose channels: slow mean-reverting random walks.
pub fn generate_oracle(
    spec: &OracleSpec,
    layout: &ChannelLayout,
    out_dir: &Path,
) -> Result<OracleOutcome> {
    spec.validate()?;
    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir)
        .map_err(|e| EngineError::io(clips_dir.display().to_string(), e))?;

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mouth = layout.mouth_indices();
    let a_dim = spec.feature_dim;

    // One global linear map; rows scaled to a fixed L1 norm so mouth
    // values stay inside [0,1] for bounded features.
    let map_weights: Vec<Vec<f64>> = (0..mouth.len())
        .map(|_| {
            let raw: Vec<f64> = (0..a_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l1: f64 = raw.iter().map(|v| v.abs()).sum::<f64>().max(1e-9);
            raw.into_iter().map(|v| v * 0.25 / l1).collect()
        })
        .collect();
    let base_intercepts: Vec<f64> = (0..mouth.len())
        .map(|_| rng.random_range(0.35..0.45))
        .collect();
    let labels: Vec<&String> = spec.archetypes.keys().collect();
    let label_intercepts: BTreeMap<String, Vec<f64>> = spec
        .archetypes
        .iter()
        .map(|(label, arch)| {
            let shift = 0.2 * (arch.base_mouth_openness - 0.5);
            (
                label.clone(),
                base_intercepts.iter().map(|b| b + shift).collect(),
            )
        })
        .collect();

    let blink_channels: Vec<usize> = layout
        .channel_names()
        .iter()
        .enumerate()
        .filter(|(i, n)| *i < layout.expression_dim() && n.starts_with("eyeBlink"))
        .map(|(i, _)| i)
        .collect();
    let brow_channels: Vec<usize> = layout
        .channel_names()
        .iter()
        .enumerate()
        .filter(|(i, n)| *i < layout.expression_dim() && n.starts_with("brow"))
        .map(|(i, _)| i)
        .collect();
    let special: BTreeSet<usize> = mouth
        .iter()
        .chain(&blink_channels)
        .chain(&brow_channels)
        .copied()
        .collect();

    let frames = spec.frames_per_clip;
    let mut entries = Vec::new();
    let mut clip_truths = Vec::new();
    let mut clip_ids = Vec::new();

    for c in 0..spec.clip_count {
        let label = labels[c % labels.len()].clone();
        let arch = &spec.archetypes[&label];
        let clip_id = format!("{label}_{c:03}");

        // Audio features: one smooth process per dimension.
        let mut feats = Array2::zeros((frames, a_dim));
        for j in 0..a_dim {
            for (n, v) in smooth_signal(frames, 0.9, 0.5, &mut rng).into_iter().enumerate() {
                feats[[n, j]] = v;
            }
        }

        let mut seq = Array2::zeros((frames, layout.total_dim()));

        // Mouth: exact linear map of the features.
        let intercept = &label_intercepts[&label];
        for (k, &ch) in mouth.iter().enumerate() {
            for n in 0..frames {
                let dot: f64 = map_weights[k]
                    .iter()
                    .zip(feats.row(n))
                    .map(|(a, b)| a * b)
                    .sum();
                seq[[n, ch]] = dot + intercept[k];
            }
        }

        // Blinks: Poisson event count, uniform centers, bump profile.
        let duration = frames as f64 / spec.fps;
        let expected = arch.blink_rate_hz * duration;
        let count = if expected > 0.0 {
            Poisson::new(expected)
                .map_err(|e| EngineError::Config(format!("blink rate: {e}")))?
                .sample(&mut rng) as usize
        } else {
            0
        };
        let mut centers: Vec<usize> = (0..count)
            .map(|_| rng.random_range(0..frames))
            .collect();
        centers.sort_unstable();
        for &center in &centers {
            for (off, &w) in (-2i64..=2).zip(BLINK_PROFILE.iter()) {
                let idx = center as i64 + off;
                if idx < 0 || idx >= frames as i64 {
                    continue;
                }
                for &ch in &blink_channels {
                    let slot = &mut seq[[idx as usize, ch]];
                    *slot = slot.max(w);
                }
            }
        }

        // Brows: archetype sinusoid, per-clip frequency and phase.
        let freq = rng.random_range(0.15..0.45);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for &ch in &brow_channels {
            for n in 0..frames {
                let t = n as f64 / spec.fps;
                seq[[n, ch]] = arch.eyebrow_amplitude
                    * (0.5 + 0.5 * (std::f64::consts::TAU * freq * t + phase).sin());
            }
        }

        // Remaining expression channels: gentle smooth noise around 0.1.
        for ch in 0..layout.expression_dim() {
            if special.contains(&ch) {
                continue;
            }
            for (n, v) in smooth_signal(frames, 0.95, 0.8, &mut rng).into_iter().enumerate() {
                seq[[n, ch]] = 0.1 + 0.08 * v;
            }
        }

        // Pose: slow mean-reverting walks.
        for ch in layout.expression_dim()..layout.total_dim() {
            let mut p = 0.0;
            for n in 0..frames {
                seq[[n, ch]] = p;
                let w: f64 = crate::diffusion::sample_noise(1, 1, &mut rng)[[0, 0]];
                p = 0.995 * p + 0.01 * w;
            }
        }

        let seq_path = clips_dir.join(format!("{clip_id}.csv"));
        let feat_path = clips_dir.join(format!("{clip_id}.fmat"));
        fileio::save_sequence(
            &seq_path,
            &ExpressionSequence::from_matrix(&seq, spec.fps)?,
            layout,
        )?;
        fileio::write_matrix(&feat_path, &feats)?;

        entries.push(ManifestEntry {
            clip_id: clip_id.clone(),
            emotion_label: label.clone(),
            sequence: PathBuf::from("clips").join(format!("{clip_id}.csv")),
            audio_features: PathBuf::from("clips").join(format!("{clip_id}.fmat")),
        });
        clip_truths.push(OracleClipTruth {
            clip_id: clip_id.clone(),
            emotion_label: label,
            blink_centers: centers,
        });
        clip_ids.push(clip_id);
    }

    let layout_path = out_dir.join("layout.json");
    layout.to_json_file(&layout_path)?;
    let manifest = ClipManifest {
        layout: PathBuf::from("layout.json"),
        fps: spec.fps,
        entries,
    };
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;

    let ground_truth = OracleGroundTruth {
        map_weights,
        label_intercepts,
        mouth_channels: mouth,
        clips: clip_truths,
    };
    let ground_truth_path = out_dir.join("ground_truth.json");
    let text = serde_json::to_string_pretty(&ground_truth)
        .map_err(|e| EngineError::Validation(format!("ground truth serialization: {e}")))?;
    std::fs::write(&ground_truth_path, text)
        .map_err(|e| EngineError::io(ground_truth_path.display().to_string(), e))?;

    Ok(OracleOutcome {
        manifest_path,
        layout_path,
        ground_truth_path,
        ground_truth,
        clip_ids,
    })
}

// ------------------------------------------------------ window extraction

/// Sliding windows for lip training: `(audio window, mouth target window)`
/// pairs at offsets `0, stride, 2*stride, ...` fully inside the sequence.
pub fn sliding_windows(
    seq: &ExpressionSequence,
    audio: &AudioFeatureSequence,
    layout: &ChannelLayout,
    window: usize,
    stride: usize,
) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    if window == 0 || stride == 0 {
        return Err(EngineError::Validation("window and stride must be positive".into()));
    }
    if window > seq.len() {
        return Err(EngineError::Dataset(format!(
            "sequence of {} frames is shorter than window {window}",
            seq.len()
        )));
    }
    if audio.len() != seq.len() {
        return Err(EngineError::dimension("sliding_windows alignment", seq.len(), audio.len()));
    }
    let mouth = layout.mouth_indices();
    let matrix = seq.to_matrix();
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= seq.len() {
        let audio_win = audio.feats().slice(s![start..start + window, ..]).to_owned();
        let mut target = Array2::zeros((window, mouth.len()));
        for (slot, &ch) in mouth.iter().enumerate() {
            for r in 0..window {
                target[[r, slot]] = matrix[[start + r, ch]];
            }
        }
        out.push((audio_win, target));
        start += stride;
    }
    Ok(out)
}

/// Full lip training set: windows from every clip, each window paired with
/// three style frames drawn from its own clip.
pub fn build_lip_dataset<R: Rng + ?Sized>(
    clips: &[LoadedClip],
    layout: &ChannelLayout,
    window: usize,
    stride: usize,
    rng: &mut R,
) -> Result<Vec<LipWindow>> {
    let mut windows = Vec::new();
    for clip in clips {
        if clip.sequence.len() < window {
            tracing::warn!(
                clip = %clip.clip_id,
                frames = clip.sequence.len(),
                window,
                "clip shorter than lip window; skipped"
            );
            continue;
        }
        let pairs = sliding_windows(&clip.sequence, &clip.audio, layout, window, stride)?;
        let frames = clip.sequence.frames();
        for (audio, target) in pairs {
            let mut style = Array2::zeros((3, clip.sequence.dim()));
            for r in 0..3 {
                let idx = rng.random_range(0..frames.len());
                for (c, &v) in frames[idx].values().iter().enumerate() {
                    style[[r, c]] = v;
                }
            }
            windows.push(LipWindow { audio, style, target });
        }
    }
    if windows.is_empty() {
        return Err(EngineError::Dataset("no clip long enough for lip windows".into()));
    }
    Ok(windows)
}

// ------------------------------------------------------- chunk extraction

/// Cut clips into non-overlapping chunks of `chunk_len` frames for
/// diffusion training. Each chunk's initial state is its own frame 0;
/// style triples are drawn from the chunk's clip during training. Clips
/// shorter than one chunk are skipped with a warning.
pub fn chunk_dataset(clips: &[LoadedClip], chunk_len: usize) -> Result<DiffusionDataset> {
    if chunk_len < 4 {
        return Err(EngineError::Validation("chunk_len must be at least 4".into()));
    }
    let mut items = Vec::new();
    let mut style_pools = Vec::new();
    for clip in clips {
        if clip.sequence.len() < chunk_len {
            tracing::warn!(
                clip = %clip.clip_id,
                frames = clip.sequence.len(),
                chunk_len,
                "clip shorter than one chunk; skipped"
            );
            continue;
        }
        let pool_index = style_pools.len();
        style_pools.push(
            clip.sequence
                .frames()
                .iter()
                .map(|f| f.values().to_vec())
                .collect::<Vec<_>>(),
        );
        let matrix = clip.sequence.to_matrix();
        let n_chunks = clip.sequence.len() / chunk_len;
        for k in 0..n_chunks {
            let lo = k * chunk_len;
            let hi = lo + chunk_len;
            let x0 = matrix.slice(s![lo..hi, ..]).to_owned();
            let audio = clip.audio.feats().slice(s![lo..hi, ..]).to_owned();
            let initial = x0.row(0).to_vec();
            items.push(DiffusionTrainItem {
                x0,
                audio,
                initial,
                clip: pool_index,
            });
        }
    }
    let dataset = DiffusionDataset { items, style_pools };
    dataset.validate()?;
    Ok(dataset)
}
