//! Stage-two lip refinement: an independent audio-to-mouth regressor.
//! A recurrent encoder reads per-frame audio features, a small
//! convolutional encoder pools three style frames into a style vector,
//! and a per-frame head predicts only the mouth-masked channels. At
//! splice time every non-mouth channel passes through bit-exact.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blendshape::{ChannelLayout, EmotionStyleClip, ExpressionSequence};
use crate::conditioning::AudioFeatureSequence;
use crate::error::{EngineError, Result};
use crate::nn::adam::{AdamConfig, AdamState};
use crate::nn::conv::{conv1d_backward, conv1d_forward, Conv1dCache, Conv1dIds};
use crate::nn::layers::{accumulate, linear_backward, linear_forward};
use crate::nn::lstm::{lstm_backward, lstm_forward, LstmCache, LstmIds};
use crate::nn::{InitKind, ParamId, ParamLayout};
use crate::sampler::LongSampleTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipHyper {
    pub audio_dim: usize,
    /// Width of a style frame (expression + pose channels).
    pub style_dim: usize,
    /// Output width: number of mouth-masked channels.
    pub mouth_dim: usize,
    pub lstm_hidden: usize,
    pub emo_width: usize,
}

impl LipHyper {
    pub fn validate(&self) -> Result<()> {
        if self.audio_dim == 0
            || self.style_dim == 0
            || self.lstm_hidden == 0
            || self.emo_width == 0
        {
            return Err(EngineError::Config("lip model dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LipIds {
    lstm: LstmIds,
    conv1: Conv1dIds,
    conv2: Conv1dIds,
    head_w: ParamId,
    head_b: ParamId,
}

/// Lip refinement model with explicit parameters.
#[derive(Debug, Clone)]
pub struct LipModel {
    hyper: LipHyper,
    layout: ParamLayout,
    ids: LipIds,
    params: Vec<f64>,
}

impl LipModel {
    pub fn new<R: Rng + ?Sized>(hyper: LipHyper, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let mut layout = ParamLayout::new();
        let lstm = LstmIds::register(&mut layout, "lstm", hyper.audio_dim, hyper.lstm_hidden);
        let conv1 = Conv1dIds::register(&mut layout, "conv1", 3, hyper.style_dim, hyper.emo_width);
        let conv2 = Conv1dIds::register(&mut layout, "conv2", 3, hyper.emo_width, hyper.emo_width);
        let head_w = layout.register(
            "head.w",
            hyper.lstm_hidden + hyper.emo_width,
            hyper.mouth_dim,
            InitKind::XavierUniform,
        );
        let head_b = layout.register("head.b", 1, hyper.mouth_dim, InitKind::Zeros);
        let ids = LipIds {
            lstm,
            conv1,
            conv2,
            head_w,
            head_b,
        };
        let params = layout.init_params(rng);
        Ok(LipModel {
            hyper,
            layout,
            ids,
            params,
        })
    }

    /// Rebuild a model around an existing parameter vector (checkpoint
    /// load).
    pub fn from_params(hyper: LipHyper, params: Vec<f64>) -> Result<Self> {
        let mut model = LipModel::new(hyper, &mut rand_chacha::ChaCha20Rng::seed_from_u64(0))?;
        model.set_params(params)?;
        Ok(model)
    }

    pub fn hyper(&self) -> &LipHyper {
        &self.hyper
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout.total()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.total() {
            return Err(EngineError::dimension(
                "lip parameter vector",
                self.layout.total(),
                params.len(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn randomize_for_test<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        self.params = self.layout.randomize_params(rng, scale);
    }

    fn check_inputs(&self, audio: &Array2<f64>, style: &Array2<f64>) -> Result<()> {
        if audio.ncols() != self.hyper.audio_dim {
            return Err(EngineError::dimension(
                "lip audio features",
                self.hyper.audio_dim,
                audio.ncols(),
            ));
        }
        if style.dim() != (3, self.hyper.style_dim) {
            return Err(EngineError::dimension(
                "lip style frames",
                format!("(3, {})", self.hyper.style_dim),
                format!("{:?}", style.dim()),
            ));
        }
        Ok(())
    }

    /// Predict mouth channels for a window of audio under a style triple:
    /// `(window_len, mouth_dim)`.
    pub fn predict(&self, audio: &Array2<f64>, style: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(audio, style)?;
        Ok(self.forward(audio, style).0)
    }

    fn forward(&self, audio: &Array2<f64>, style: &Array2<f64>) -> (Array2<f64>, LipCache) {
        let p = &self.params;
        let layout = &self.layout;
        let (h_seq, lstm_cache) = lstm_forward(audio, &self.ids.lstm, layout, p);

        let (c1, conv1_cache) = conv1d_forward(style, &self.ids.conv1, layout, p);
        let a1 = c1.mapv(f64::tanh);
        let (c2, conv2_cache) = conv1d_forward(&a1, &self.ids.conv2, layout, p);
        let a2 = c2.mapv(f64::tanh);
        // Mean-pool the style frames into one vector, broadcast over the window.
        let style_vec = (a2.sum_axis(Axis(0)) / a2.nrows() as f64).insert_axis(Axis(0));

        let steps = audio.nrows();
        let mut z = Array2::zeros((steps, self.hyper.lstm_hidden + self.hyper.emo_width));
        z.slice_mut(s![.., 0..self.hyper.lstm_hidden]).assign(&h_seq);
        for t in 0..steps {
            for j in 0..self.hyper.emo_width {
                z[[t, self.hyper.lstm_hidden + j]] = style_vec[[0, j]];
            }
        }
        let y = linear_forward(&z, layout.view(p, self.ids.head_w), layout.view(p, self.ids.head_b));
        (
            y,
            LipCache {
                lstm_cache,
                a1,
                conv1_cache,
                a2,
                conv2_cache,
                z,
            },
        )
    }

    fn backward(
        &self,
        audio: &Array2<f64>,
        style: &Array2<f64>,
        cache: &LipCache,
        dy: &Array2<f64>,
        grads: &mut [f64],
    ) {
        let p = &self.params;
        let layout = &self.layout;
        let (dz, dw_head, db_head) =
            linear_backward(&cache.z, layout.view(p, self.ids.head_w), dy);
        accumulate(layout, grads, self.ids.head_w, &dw_head);
        accumulate(layout, grads, self.ids.head_b, &db_head);

        let dh_seq = dz.slice(s![.., 0..self.hyper.lstm_hidden]).to_owned();
        let ds_broadcast = dz.slice(s![.., self.hyper.lstm_hidden..]).to_owned();
        // Broadcast + mean-pool adjoint: sum over window rows, spread over
        // the style rows.
        let ds_vec = ds_broadcast.sum_axis(Axis(0));
        let rows = cache.a2.nrows() as f64;
        let mut da2 = Array2::zeros(cache.a2.dim());
        for r in 0..cache.a2.nrows() {
            for j in 0..da2.ncols() {
                da2[[r, j]] = ds_vec[j] / rows;
            }
        }
        let dc2 = &da2 * &cache.a2.mapv(|v| 1.0 - v * v);
        let da1 = conv1d_backward(
            &cache.a1,
            &self.ids.conv2,
            layout,
            p,
            &cache.conv2_cache,
            &dc2,
            grads,
        );
        let dc1 = &da1 * &cache.a1.mapv(|v| 1.0 - v * v);
        conv1d_backward(style, &self.ids.conv1, layout, p, &cache.conv1_cache, &dc1, grads);

        lstm_backward(audio, &self.ids.lstm, layout, p, &cache.lstm_cache, &dh_seq, grads);
    }

    /// MSE loss against a target mouth window plus its exact gradient
    /// contribution (scaled by `loss_scale`).
    pub fn loss_and_grad_window(
        &self,
        audio: &Array2<f64>,
        style: &Array2<f64>,
        target: &Array2<f64>,
        loss_scale: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        self.check_inputs(audio, style)?;
        if target.dim() != (audio.nrows(), self.hyper.mouth_dim) {
            return Err(EngineError::dimension(
                "lip target window",
                format!("({}, {})", audio.nrows(), self.hyper.mouth_dim),
                format!("{:?}", target.dim()),
            ));
        }
        let (y, cache) = self.forward(audio, style);
        let diff = &y - target;
        let n = y.len() as f64;
        let loss = diff.mapv(|v| v * v).sum() / n;
        let dy = diff * (2.0 * loss_scale / n);
        self.backward(audio, style, &cache, &dy, grads);
        Ok(loss)
    }
}

struct LipCache {
    lstm_cache: LstmCache,
    a1: Array2<f64>,
    conv1_cache: Conv1dCache,
    a2: Array2<f64>,
    conv2_cache: Conv1dCache,
    z: Array2<f64>,
}

/// One training window extracted by the dataset tooling.
#[derive(Debug, Clone)]
pub struct LipWindow {
    /// `(window, audio_dim)` audio features.
    pub audio: Array2<f64>,
    /// `(3, style_dim)` style frames.
    pub style: Array2<f64>,
    /// `(window, mouth_dim)` ground-truth mouth channels.
    pub target: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipTrainConfig {
    /// Sliding-window length over audio frames.
    pub window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for LipTrainConfig {
    fn default() -> Self {
        LipTrainConfig {
            window: 8,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-4,
        }
    }
}

impl LipTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(EngineError::Config(
                "lip window, epochs, and batch_size must be positive".into(),
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(EngineError::Config("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

pub struct LipTrainRecord {
    pub epoch_losses: Vec<f64>,
}

/// Minimize per-window mouth MSE with Adam. Windows are shuffled each
/// epoch; per-window gradients are computed in parallel and reduced in
/// batch order, so training is deterministic under a fixed rng.
pub fn train_lip<R: Rng + ?Sized>(
    model: &mut LipModel,
    windows: &[LipWindow],
    cfg: &LipTrainConfig,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<LipTrainRecord> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(EngineError::Dataset("no lip training windows".into()));
    }
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let results: Vec<Result<(f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let w = &windows[idx];
                    let mut grads = vec![0.0; model.n_params()];
                    let loss =
                        model.loss_and_grad_window(&w.audio, &w.style, &w.target, scale, &mut grads)?;
                    Ok((loss, grads))
                })
                .collect();
            let mut grads = vec![0.0; model.n_params()];
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l * scale;
                for (acc, v) in grads.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            if !loss.is_finite() {
                let grad_norm: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                return Err(EngineError::Training(format!(
                    "non-finite lip loss at epoch {epoch} step {step}: lr={}, grad_norm={grad_norm}",
                    cfg.learning_rate
                )));
            }
            adam.update(&adam_cfg, &mut model.params, &grads);
            loss_sum += loss;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    Ok(LipTrainRecord { epoch_losses })
}

/// Style frames used at refinement time.
#[derive(Debug, Clone)]
pub enum StyleSource {
    /// One `(3, style_dim)` triple for the whole sequence.
    Fixed(Array2<f64>),
    /// Per output frame, the triple of the sampler chunk that owns it;
    /// `(len, 3, style_dim)` stored as one matrix per frame.
    PerFrame(Vec<Array2<f64>>),
}

impl StyleSource {
    /// One seeded draw of three style frames from a clip.
    pub fn fixed_from_clip<R: Rng + ?Sized>(clip: &EmotionStyleClip, rng: &mut R) -> Self {
        let pool = clip.sequence.frames();
        let mut style = Array2::zeros((3, clip.sequence.dim()));
        for r in 0..3 {
            let idx = rng.random_range(0..pool.len());
            for (c, &v) in pool[idx].values().iter().enumerate() {
                style[[r, c]] = v;
            }
        }
        StyleSource::Fixed(style)
    }

    /// Reuse the exact style triples the sampler drew: each output frame
    /// uses the triple of the last chunk that wrote it.
    pub fn from_trace(clip: &EmotionStyleClip, trace: &LongSampleTrace, len: usize) -> Result<Self> {
        if trace.chunk_starts.is_empty() || trace.chunk_starts.len() != trace.style_indices.len() {
            return Err(EngineError::Validation(
                "trace must carry one style triple per chunk".into(),
            ));
        }
        let pool = clip.sequence.frames();
        let dim = clip.sequence.dim();
        let triples: Vec<Array2<f64>> = trace
            .style_indices
            .iter()
            .map(|idx| {
                let mut m = Array2::zeros((3, dim));
                for (r, &i) in idx.iter().enumerate() {
                    let frame = pool.get(i).ok_or_else(|| {
                        EngineError::Validation(format!(
                            "trace references style frame {i} outside clip of {} frames",
                            pool.len()
                        ))
                    })?;
                    for (c, &v) in frame.values().iter().enumerate() {
                        m[[r, c]] = v;
                    }
                }
                Ok(m)
            })
            .collect::<Result<_>>()?;
        let mut per_frame = Vec::with_capacity(len);
        for f in 0..len {
            // Owner = last chunk whose start is <= f (later chunks overwrite).
            let owner = trace
                .chunk_starts
                .iter()
                .rposition(|&s| s <= f)
                .unwrap_or(0);
            per_frame.push(triples[owner].clone());
        }
        Ok(StyleSource::PerFrame(per_frame))
    }

    fn for_frame(&self, f: usize) -> &Array2<f64> {
        match self {
            StyleSource::Fixed(m) => m,
            StyleSource::PerFrame(v) => &v[f],
        }
    }
}

/// Regenerate only the mouth-masked channels of `base` from audio and
/// style. Windows advance one frame at a time; overlapping per-frame
/// predictions are averaged. Every channel outside the mouth mask is
/// copied through bit-exact; predictions are left unclamped (clamping is
/// an export concern).
pub fn refine(
    model: &LipModel,
    base: &ExpressionSequence,
    audio: &AudioFeatureSequence,
    styles: &StyleSource,
    layout: &ChannelLayout,
    window: usize,
) -> Result<ExpressionSequence> {
    if base.len() != audio.len() {
        return Err(EngineError::dimension(
            "refine frame alignment",
            base.len(),
            audio.len(),
        ));
    }
    if window == 0 {
        return Err(EngineError::Config("refine window must be positive".into()));
    }
    let mouth = layout.mouth_indices();
    if mouth.is_empty() {
        return Ok(base.clone());
    }
    if mouth.len() != model.hyper.mouth_dim {
        return Err(EngineError::dimension(
            "refine mouth channels",
            model.hyper.mouth_dim,
            mouth.len(),
        ));
    }
    let len = base.len();
    if len == 0 {
        return Ok(base.clone());
    }
    if let StyleSource::PerFrame(v) = styles {
        if v.len() != len {
            return Err(EngineError::dimension("per-frame styles", len, v.len()));
        }
    }

    let win = window.min(len);
    let mut sums = Array2::<f64>::zeros((len, mouth.len()));
    let mut counts = vec![0usize; len];
    for start in 0..=(len - win) {
        let audio_win = audio.feats().slice(s![start..start + win, ..]).to_owned();
        let pred = model.predict(&audio_win, styles.for_frame(start))?;
        for offset in 0..win {
            let f = start + offset;
            counts[f] += 1;
            for m in 0..mouth.len() {
                sums[[f, m]] += pred[[offset, m]];
            }
        }
    }

    let mut out = base.to_matrix();
    for f in 0..len {
        debug_assert!(counts[f] > 0, "window sweep covers every frame");
        for (m, &ch) in mouth.iter().enumerate() {
            out[[f, ch]] = sums[[f, m]] / counts[f] as f64;
        }
    }
    ExpressionSequence::from_matrix(&out, base.fps())
}
