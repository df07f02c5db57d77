//! Disentangled facial parameter representation: blendshape channels in
//! `[0,1]`, optional head-pose channels, and the mouth-channel partition
//! that makes targeted lip refinement possible.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

/// The 52 ARKit blendshape names, FACS-aligned, camelCase.
pub const ARKIT_BLENDSHAPE_NAMES: [&str; 52] = [
    "eyeBlinkLeft",
    "eyeLookDownLeft",
    "eyeLookInLeft",
    "eyeLookOutLeft",
    "eyeLookUpLeft",
    "eyeSquintLeft",
    "eyeWideLeft",
    "eyeBlinkRight",
    "eyeLookDownRight",
    "eyeLookInRight",
    "eyeLookOutRight",
    "eyeLookUpRight",
    "eyeSquintRight",
    "eyeWideRight",
    "jawForward",
    "jawLeft",
    "jawRight",
    "jawOpen",
    "mouthClose",
    "mouthFunnel",
    "mouthPucker",
    "mouthLeft",
    "mouthRight",
    "mouthSmileLeft",
    "mouthSmileRight",
    "mouthFrownLeft",
    "mouthFrownRight",
    "mouthDimpleLeft",
    "mouthDimpleRight",
    "mouthStretchLeft",
    "mouthStretchRight",
    "mouthRollLower",
    "mouthRollUpper",
    "mouthShrugLower",
    "mouthShrugUpper",
    "mouthPressLeft",
    "mouthPressRight",
    "mouthLowerDownLeft",
    "mouthLowerDownRight",
    "mouthUpperUpLeft",
    "mouthUpperUpRight",
    "browDownLeft",
    "browDownRight",
    "browInnerUp",
    "browOuterUpLeft",
    "browOuterUpRight",
    "cheekPuff",
    "cheekSquintLeft",
    "cheekSquintRight",
    "noseSneerLeft",
    "noseSneerRight",
    "tongueOut",
];

/// Head-pose channel names: three rotations (radians) and three
/// translations (model units), appended after the expression channels.
pub const HEAD_POSE_NAMES: [&str; 6] = [
    "headPitch",
    "headYaw",
    "headRoll",
    "headTransX",
    "headTransY",
    "headTransZ",
];

/// Channel layout: expression channels, pose channels, names, and the
/// set of indices designated mouth-related.
///
/// Serialized as JSON `{expression_dim, pose_dim, channel_names, mouth_mask}`;
/// deserialization re-validates all invariants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct ChannelLayout {
    expression_dim: usize,
    pose_dim: usize,
    channel_names: Vec<String>,
    mouth_mask: BTreeSet<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    expression_dim: usize,
    pose_dim: usize,
    channel_names: Vec<String>,
    mouth_mask: Vec<usize>,
}

impl TryFrom<RawLayout> for ChannelLayout {
    type Error = EngineError;

    fn try_from(raw: RawLayout) -> Result<Self> {
        ChannelLayout::new(
            raw.expression_dim,
            raw.pose_dim,
            raw.channel_names,
            raw.mouth_mask.into_iter().collect(),
        )
    }
}

impl From<ChannelLayout> for RawLayout {
    fn from(layout: ChannelLayout) -> Self {
        RawLayout {
            expression_dim: layout.expression_dim,
            pose_dim: layout.pose_dim,
            mouth_mask: layout.mouth_mask.iter().copied().collect(),
            channel_names: layout.channel_names,
        }
    }
}

impl ChannelLayout {
    pub fn new(
        expression_dim: usize,
        pose_dim: usize,
        channel_names: Vec<String>,
        mouth_mask: BTreeSet<usize>,
    ) -> Result<Self> {
        if expression_dim == 0 {
            return Err(EngineError::Validation(
                "expression_dim must be at least 1".into(),
            ));
        }
        let total = expression_dim + pose_dim;
        if channel_names.len() != total {
            return Err(EngineError::dimension(
                "channel_names",
                total,
                channel_names.len(),
            ));
        }
        let unique: BTreeSet<&str> = channel_names.iter().map(String::as_str).collect();
        if unique.len() != channel_names.len() {
            return Err(EngineError::Validation(
                "channel_names must be unique".into(),
            ));
        }
        if let Some(&bad) = mouth_mask.iter().find(|&&i| i >= expression_dim) {
            return Err(EngineError::Validation(format!(
                "mouth_mask index {bad} is outside the expression channels 0..{expression_dim} \
                 (pose channels are never mouth-related)"
            )));
        }
        Ok(ChannelLayout {
            expression_dim,
            pose_dim,
            channel_names,
            mouth_mask,
        })
    }

    /// The default layout: 52 ARKit blendshapes plus 6 head-pose channels,
    /// with every `mouth*`/`jaw*` channel in the mouth mask.
    pub fn arkit() -> Self {
        let channel_names: Vec<String> = ARKIT_BLENDSHAPE_NAMES
            .iter()
            .chain(HEAD_POSE_NAMES.iter())
            .map(|s| s.to_string())
            .collect();
        let mouth_mask = ARKIT_BLENDSHAPE_NAMES
            .iter()
            .enumerate()
            .filter(|(_, name)| name.starts_with("mouth") || name.starts_with("jaw"))
            .map(|(i, _)| i)
            .collect();
        ChannelLayout::new(52, 6, channel_names, mouth_mask)
            .expect("builtin ARKit layout is valid")
    }

    pub fn expression_dim(&self) -> usize {
        self.expression_dim
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    /// Total channel count per frame (expression + pose).
    pub fn total_dim(&self) -> usize {
        self.expression_dim + self.pose_dim
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn channel_name(&self, idx: usize) -> &str {
        &self.channel_names[idx]
    }

    pub fn mouth_mask(&self) -> &BTreeSet<usize> {
        &self.mouth_mask
    }

    /// Mouth channel indices in ascending order.
    pub fn mouth_indices(&self) -> Vec<usize> {
        self.mouth_mask.iter().copied().collect()
    }

    /// All channel indices not in the mouth mask (including pose), ascending.
    pub fn other_indices(&self) -> Vec<usize> {
        (0..self.total_dim())
            .filter(|i| !self.mouth_mask.contains(i))
            .collect()
    }

    pub fn is_mouth(&self, idx: usize) -> bool {
        self.mouth_mask.contains(&idx)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| {
            EngineError::Validation(format!("layout file {}: {e}", path.display()))
        })
    }

    pub fn to_json_file(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| EngineError::Validation(format!("layout serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| EngineError::io(path.display().to_string(), e))
    }

    fn check_frame_dim(&self, frame: &ExpressionFrame, context: &str) -> Result<()> {
        if frame.len() != self.total_dim() {
            return Err(EngineError::dimension(context, self.total_dim(), frame.len()));
        }
        Ok(())
    }

    /// Clip blendshape channels to `[0,1]`; pose channels pass through.
    /// Rejects non-finite input, naming the offending channel.
    pub fn clamp_frame(&self, frame: &ExpressionFrame) -> Result<ExpressionFrame> {
        self.check_frame_dim(frame, "clamp_frame")?;
        if let Some((idx, _)) = frame
            .values()
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(EngineError::Validation(format!(
                "non-finite value in channel {} ({})",
                idx,
                self.channel_name(idx)
            )));
        }
        let values = frame
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if i < self.expression_dim {
                    v.clamp(0.0, 1.0)
                } else {
                    v
                }
            })
            .collect();
        Ok(ExpressionFrame::new(values))
    }

    /// Lossless partition of a frame into (mouth channels, all other channels),
    /// each part in ascending index order.
    pub fn split_mouth(&self, frame: &ExpressionFrame) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_frame_dim(frame, "split_mouth")?;
        let values = frame.values();
        let mouth = self.mouth_indices().iter().map(|&i| values[i]).collect();
        let other = self.other_indices().iter().map(|&i| values[i]).collect();
        Ok((mouth, other))
    }

    /// Inverse of [`split_mouth`](Self::split_mouth): reassembles a frame from
    /// its mouth part and its complement.
    pub fn merge_mouth(&self, mouth: &[f64], other: &[f64]) -> Result<ExpressionFrame> {
        let mouth_idx = self.mouth_indices();
        let other_idx = self.other_indices();
        if mouth.len() != mouth_idx.len() {
            return Err(EngineError::dimension("merge_mouth mouth part", mouth_idx.len(), mouth.len()));
        }
        if other.len() != other_idx.len() {
            return Err(EngineError::dimension("merge_mouth other part", other_idx.len(), other.len()));
        }
        let mut values = vec![0.0; self.total_dim()];
        for (slot, &i) in mouth_idx.iter().enumerate() {
            values[i] = mouth[slot];
        }
        for (slot, &i) in other_idx.iter().enumerate() {
            values[i] = other[slot];
        }
        Ok(ExpressionFrame::new(values))
    }
}

/// One frame of facial parameters: `expression_dim` blendshape coefficients
/// followed by `pose_dim` pose values. Diffusion-space frames may exceed
/// `[0,1]`; clamping happens only at export boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionFrame {
    values: Vec<f64>,
}

impl ExpressionFrame {
    pub fn new(values: Vec<f64>) -> Self {
        ExpressionFrame { values }
    }

    pub fn zeros(dim: usize) -> Self {
        ExpressionFrame {
            values: vec![0.0; dim],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A sequence of frames sharing one layout, at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionSequence {
    frames: Vec<ExpressionFrame>,
    fps: f64,
}

impl ExpressionSequence {
    pub const DEFAULT_FPS: f64 = 25.0;

    pub fn new(frames: Vec<ExpressionFrame>, fps: f64) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(EngineError::Validation(format!("fps must be positive, got {fps}")));
        }
        if let Some(first) = frames.first() {
            let dim = first.len();
            if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != dim) {
                return Err(EngineError::dimension(
                    format!("frame {i}"),
                    dim,
                    f.len(),
                ));
            }
        }
        Ok(ExpressionSequence { frames, fps })
    }

    pub fn frames(&self) -> &[ExpressionFrame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &ExpressionFrame {
        &self.frames[i]
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Channel count per frame; 0 for an empty sequence.
    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, ExpressionFrame::len)
    }

    /// Frames stacked into an `(n_frames, dim)` matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.len();
        let d = self.dim();
        let mut m = Array2::zeros((n, d));
        for (i, f) in self.frames.iter().enumerate() {
            for (j, &v) in f.values().iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m
    }

    pub fn from_matrix(m: &Array2<f64>, fps: f64) -> Result<Self> {
        let frames = m
            .rows()
            .into_iter()
            .map(|r| ExpressionFrame::new(r.to_vec()))
            .collect();
        ExpressionSequence::new(frames, fps)
    }

    /// Export copy with every blendshape channel clamped to `[0,1]`.
    pub fn clamped(&self, layout: &ChannelLayout) -> Result<ExpressionSequence> {
        let frames = self
            .frames
            .iter()
            .map(|f| layout.clamp_frame(f))
            .collect::<Result<Vec<_>>>()?;
        ExpressionSequence::new(frames, self.fps)
    }
}

/// A labelled expression clip that emotion-style frames are drawn from.
#[derive(Debug, Clone)]
pub struct EmotionStyleClip {
    pub sequence: ExpressionSequence,
    pub emotion_label: String,
    pub clip_id: String,
}

impl EmotionStyleClip {
    /// Style sampling draws 3 frames, so clips must hold at least 3.
    pub fn new(sequence: ExpressionSequence, emotion_label: String, clip_id: String) -> Result<Self> {
        if sequence.len() < 3 {
            return Err(EngineError::Validation(format!(
                "style clip {clip_id:?} has {} frames; at least 3 required",
                sequence.len()
            )));
        }
        Ok(EmotionStyleClip {
            sequence,
            emotion_label,
            clip_id,
        })
    }
}
