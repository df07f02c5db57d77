//! Time-position-aware condition embedding: the initial state occupies
//! row 0 and the emotion style the middle three rows of an
//! `(n, cond_dim + 1)` matrix whose last column is a validity indicator.
//! The matrix is then fused row-by-row with audio features, and may be
//! dropped to the null condition for classifier-free training.

use ndarray::{s, Array2};
use rand::Rng;

use crate::blendshape::ExpressionFrame;
use crate::error::{EngineError, Result};

/// Per-frame audio features: an `(n_frames, feature_dim)` matrix aligned
/// to the expression frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    feats: Array2<f64>,
    fps: f64,
}

impl AudioFeatureSequence {
    pub fn new(feats: Array2<f64>, fps: f64) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(EngineError::Validation(format!("fps must be positive, got {fps}")));
        }
        if let Some(v) = feats.iter().find(|v| !v.is_finite()) {
            return Err(EngineError::Validation(format!(
                "audio features contain non-finite value {v}"
            )));
        }
        Ok(AudioFeatureSequence { feats, fps })
    }

    pub fn feats(&self) -> &Array2<f64> {
        &self.feats
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// Number of frames (rows).
    pub fn len(&self) -> usize {
        self.feats.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.feats.ncols()
    }

    /// Rows `[start, start+len)`, zero-padded at the tail when the source
    /// is shorter.
    pub fn slice_padded(&self, start: usize, len: usize) -> Array2<f64> {
        let mut out = Array2::zeros((len, self.feature_dim()));
        let end = (start + len).min(self.len());
        if start < end {
            out.slice_mut(s![0..end - start, ..])
                .assign(&self.feats.slice(s![start..end, ..]));
        }
        out
    }
}

/// Row indices that carry the style frames: the middle three positions
/// `n/2 - 1 ..= n/2 + 1` (floor division).
pub fn style_rows(n: usize) -> [usize; 3] {
    let mid = n / 2;
    [mid - 1, mid, mid + 1]
}

/// The state/style block of the condition: `(n, cond_dim + 1)` where the
/// final column is the validity indicator. After [`fuse_audio`], the fused
/// `(n, cond_dim + 1 + audio_dim)` matrix is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMatrix {
    state_style: Array2<f64>,
    fused: Option<Array2<f64>>,
}

impl ConditionMatrix {
    pub fn state_style(&self) -> &Array2<f64> {
        &self.state_style
    }

    /// The audio-fused matrix; present after [`fuse_audio`].
    pub fn fused(&self) -> Option<&Array2<f64>> {
        self.fused.as_ref()
    }

    pub fn n_frames(&self) -> usize {
        self.state_style.nrows()
    }

    /// Condition width without the indicator column.
    pub fn cond_dim(&self) -> usize {
        self.state_style.ncols() - 1
    }
}

/// Lay out initial state and style frames into the condition matrix.
///
/// Row 0 holds the initial state, rows `n/2-1..=n/2+1` hold the three
/// style frames; each occupied row sets the trailing indicator to 1.
/// Absent parts leave their rows zero. `build_condition(None, None, ..)`
/// is the null condition.
pub fn build_condition(
    initial: Option<&ExpressionFrame>,
    style: Option<[&ExpressionFrame; 3]>,
    n: usize,
    cond_dim: usize,
) -> Result<ConditionMatrix> {
    if n < 4 {
        return Err(EngineError::Validation(format!(
            "chunk length {n} too short: the middle-three style window needs n >= 4"
        )));
    }
    let mut m = Array2::zeros((n, cond_dim + 1));
    if let Some(frame) = initial {
        if frame.len() != cond_dim {
            return Err(EngineError::dimension("initial state", cond_dim, frame.len()));
        }
        for (j, &v) in frame.values().iter().enumerate() {
            m[[0, j]] = v;
        }
        m[[0, cond_dim]] = 1.0;
    }
    if let Some(frames) = style {
        for (row, frame) in style_rows(n).into_iter().zip(frames) {
            if frame.len() != cond_dim {
                return Err(EngineError::dimension("style frame", cond_dim, frame.len()));
            }
            for (j, &v) in frame.values().iter().enumerate() {
                m[[row, j]] = v;
            }
            m[[row, cond_dim]] = 1.0;
        }
    }
    Ok(ConditionMatrix {
        state_style: m,
        fused: None,
    })
}

/// Concatenate each state/style row with the matching audio feature row.
pub fn fuse_audio(cond: &ConditionMatrix, audio: &Array2<f64>) -> Result<ConditionMatrix> {
    let n = cond.n_frames();
    if audio.nrows() != n {
        return Err(EngineError::dimension("fuse_audio rows", n, audio.nrows()));
    }
    let width = cond.state_style.ncols() + audio.ncols();
    let mut fused = Array2::zeros((n, width));
    fused
        .slice_mut(s![.., 0..cond.state_style.ncols()])
        .assign(&cond.state_style);
    fused
        .slice_mut(s![.., cond.state_style.ncols()..])
        .assign(audio);
    Ok(ConditionMatrix {
        state_style: cond.state_style.clone(),
        fused: Some(fused),
    })
}

/// With probability `p`, replace the condition by the null condition phi:
/// state/style block, indicators, and any fused audio columns all zeroed
/// under the same draw.
pub fn drop_condition<R: Rng + ?Sized>(
    cond: &ConditionMatrix,
    p: f64,
    rng: &mut R,
) -> Result<ConditionMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(EngineError::Validation(format!(
            "drop probability must lie in [0,1], got {p}"
        )));
    }
    let dropped = rng.random::<f64>() < p;
    if !dropped {
        return Ok(cond.clone());
    }
    Ok(ConditionMatrix {
        state_style: Array2::zeros(cond.state_style.dim()),
        fused: cond.fused.as_ref().map(|f| Array2::zeros(f.dim())),
    })
}
