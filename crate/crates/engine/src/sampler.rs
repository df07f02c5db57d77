//! Reverse-diffusion sampling: single conditioned chunks with
//! classifier-free guidance, and long-term generation that chains chunks
//! autoregressively — each chunk is conditioned on the previous chunk's
//! final frame and on a freshly drawn style triple.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blendshape::{EmotionStyleClip, ExpressionFrame, ExpressionSequence};
use crate::conditioning::{build_condition, fuse_audio, AudioFeatureSequence};
use crate::denoiser::NoisePredictor;
use crate::diffusion::{cfg_combine, reverse_step, sample_noise};
use crate::error::{EngineError, Result};
use crate::schedule::NoiseSchedule;

/// Stride between chunk starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkStep {
    /// `N - 1`: one-frame overlap; the conditioned first frame of each
    /// chunk lands on (and overwrites) the previous chunk's last frame.
    Overlap,
    /// `N`: chunks tile the output with no overlap.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Frames per chunk (N).
    pub chunk_len: usize,
    /// Guidance scale w.
    pub guidance: f64,
    pub step: ChunkStep,
    /// Autoregressive chaining switch; disabling zeroes the initial-state
    /// row and indicator (ablation mode).
    pub use_initial_state: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chunk_len: 32,
            guidance: 2.0,
            step: ChunkStep::Overlap,
            use_initial_state: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len < 4 {
            return Err(EngineError::Config(format!(
                "chunk_len must be at least 4, got {}",
                self.chunk_len
            )));
        }
        if !self.guidance.is_finite() {
            return Err(EngineError::Config("guidance must be finite".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        match self.step {
            ChunkStep::Overlap => self.chunk_len - 1,
            ChunkStep::Full => self.chunk_len,
        }
    }
}

/// Guidance mode for a chunk. `ClassifierFree(0.0)` and `ConditionalOnly`
/// produce bit-identical trajectories under a shared noise stream; the
/// former still evaluates the unconditional branch, the latter skips it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    ClassifierFree(f64),
    ConditionalOnly,
}

/// Run the full reverse chain from `x_T ~ N(0,I)` for one chunk.
///
/// `fused_cond` is the `(n, cond_dim)` audio-fused condition. The noise
/// stream draws the start tensor, then one `z` per step `t > 1`, in that
/// order, independent of the guidance mode.
pub fn sample_chunk<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    input_dim: usize,
    fused_cond: &Array2<f64>,
    schedule: &NoiseSchedule,
    guidance: Guidance,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let n = fused_cond.nrows();
    let null_cond = Array2::zeros(fused_cond.dim());
    let mut x = sample_noise(n, input_dim, rng);
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = match guidance {
            Guidance::ConditionalOnly => model.predict(&x, t, fused_cond)?,
            Guidance::ClassifierFree(w) => {
                let eps_cond = model.predict(&x, t, fused_cond)?;
                let eps_uncond = model.predict(&x, t, &null_cond)?;
                cfg_combine(&eps_cond, &eps_uncond, w)?
            }
        };
        let z = if t > 1 {
            sample_noise(n, input_dim, rng)
        } else {
            Array2::zeros((n, input_dim))
        };
        x = reverse_step(&x, t, &eps_hat, &z, schedule)?;
    }
    Ok(x)
}

/// Per-run record of what each chunk was conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongSampleTrace {
    /// Output index where each chunk starts writing.
    pub chunk_starts: Vec<usize>,
    /// Style frame indices drawn for each chunk.
    pub style_indices: Vec<[usize; 3]>,
    /// The initial-state row fed to each chunk (absent in ablation mode).
    pub initial_rows: Vec<Option<Vec<f64>>>,
}

impl LongSampleTrace {
    /// Chunk seams: the start index of every chunk after the first.
    pub fn boundaries(&self) -> Vec<usize> {
        self.chunk_starts.iter().copied().skip(1).collect()
    }
}

/// Long-term dynamic sampling.
///
/// The first chunk's initial state is a random style frame; each chunk
/// draws 3 fresh style frames; after a chunk is emitted its last frame
/// becomes the next chunk's initial state. Chunk k writes rows
/// `[k*stride, k*stride + N)` (clipped), so with the overlap stride each
/// new chunk overwrites the seam frame. The output is truncated to the
/// audio length.
pub fn long_term_sample<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    input_dim: usize,
    audio: &AudioFeatureSequence,
    style: &EmotionStyleClip,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(ExpressionSequence, LongSampleTrace)> {
    cfg.validate()?;
    let total = audio.len();
    if total == 0 {
        return Err(EngineError::Validation("audio has no frames".into()));
    }
    let pool = style.sequence.frames();
    if pool.len() < 3 {
        return Err(EngineError::Validation(format!(
            "style clip {} has {} frames; 3 required",
            style.clip_id,
            pool.len()
        )));
    }
    if style.sequence.dim() != input_dim {
        return Err(EngineError::dimension(
            "style clip channels",
            input_dim,
            style.sequence.dim(),
        ));
    }

    let n = cfg.chunk_len;
    let stride = cfg.stride();
    let mut out = Array2::zeros((total, input_dim));
    let mut trace = LongSampleTrace {
        chunk_starts: Vec::new(),
        style_indices: Vec::new(),
        initial_rows: Vec::new(),
    };

    let draw_style = |rng: &mut R| -> [usize; 3] {
        [
            rng.random_range(0..pool.len()),
            rng.random_range(0..pool.len()),
            rng.random_range(0..pool.len()),
        ]
    };

    let mut initial: ExpressionFrame = pool[rng.random_range(0..pool.len())].clone();
    let mut style_idx = draw_style(rng);
    let mut start = 0usize;

    loop {
        let initial_opt = cfg.use_initial_state.then_some(&initial);
        let style_frames = [
            &pool[style_idx[0]],
            &pool[style_idx[1]],
            &pool[style_idx[2]],
        ];
        let cond = build_condition(initial_opt, Some(style_frames), n, input_dim)?;
        let audio_slice = audio.slice_padded(start, n);
        let fused = fuse_audio(&cond, &audio_slice)?;
        let chunk = sample_chunk(
            model,
            input_dim,
            fused.fused().expect("fused above"),
            schedule,
            Guidance::ClassifierFree(cfg.guidance),
            rng,
        )?;

        trace.chunk_starts.push(start);
        trace.style_indices.push(style_idx);
        trace
            .initial_rows
            .push(initial_opt.map(|f| f.values().to_vec()));

        let end = (start + n).min(total);
        out.slice_mut(s![start..end, ..])
            .assign(&chunk.slice(s![0..end - start, ..]));

        if start + n >= total {
            break;
        }
        initial = ExpressionFrame::new(chunk.row(n - 1).to_vec());
        style_idx = draw_style(rng);
        start += stride;
    }

    let seq = ExpressionSequence::from_matrix(&out, audio.fps())?;
    Ok((seq, trace))
}

/// Per-boundary continuity: max over channels of `|x[b] - x[b-1]|` for
/// each boundary, plus the global max over all boundaries.
pub fn continuity_jump(
    seq: &ExpressionSequence,
    boundaries: &[usize],
) -> Result<(Vec<f64>, f64)> {
    let mut per_boundary = Vec::with_capacity(boundaries.len());
    for &b in boundaries {
        if b == 0 || b >= seq.len() {
            return Err(EngineError::Validation(format!(
                "boundary {b} outside 1..{}",
                seq.len()
            )));
        }
        let prev = seq.frame(b - 1).values();
        let here = seq.frame(b).values();
        let jump = prev
            .iter()
            .zip(here)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max);
        per_boundary.push(jump);
    }
    let global = per_boundary.iter().copied().fold(0.0, f64::max);
    Ok((per_boundary, global))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserHyper, DenoiserModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Exact noise oracle for the constant-zero target: for x0 = 0 the
    /// effective noise of any state is x / sqrt(1 - alpha_bar_t).
    struct ZeroTargetOracle {
        schedule: NoiseSchedule,
    }

    impl NoisePredictor for ZeroTargetOracle {
        fn predict(&self, x_t: &Array2<f64>, t: usize, _cond: &Array2<f64>) -> Result<Array2<f64>> {
            let alpha_bar = self.schedule.alpha_bar(t)?;
            Ok(x_t / (1.0 - alpha_bar).sqrt())
        }
    }

    /// Predictor that pulls every entry toward a constant (used to check
    /// output coverage: its samples are never exactly zero).
    struct BiasOracle;

    impl NoisePredictor for BiasOracle {
        fn predict(&self, x_t: &Array2<f64>, _t: usize, _cond: &Array2<f64>) -> Result<Array2<f64>> {
            Ok(x_t.mapv(|v| v * 0.5 + 0.37))
        }
    }

    fn tiny_model(seed: u64) -> DenoiserModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let hyper = DenoiserHyper {
            input_dim: 3,
            cond_dim: 6,
            layers: 1,
            heads: 2,
            width: 8,
            ff_width: 16,
        };
        let mut m = DenoiserModel::new(hyper, &mut rng).unwrap();
        m.randomize_for_test(&mut rng, 0.2);
        m
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(12, 1e-3, 0.3).unwrap()
    }

    fn style_clip(dim: usize, frames: usize) -> EmotionStyleClip {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let frames = (0..frames)
            .map(|_| {
                ExpressionFrame::new(
                    (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
                )
            })
            .collect();
        EmotionStyleClip::new(
            ExpressionSequence::new(frames, 25.0).unwrap(),
            "test".into(),
            "clip0".into(),
        )
        .unwrap()
    }

    fn audio(frames: usize, dim: usize) -> AudioFeatureSequence {
        let mut rng = ChaCha20Rng::seed_from_u64(88);
        let m = Array2::from_shape_simple_fn((frames, dim), || rng.random_range(-1.0..1.0));
        AudioFeatureSequence::new(m, 25.0).unwrap()
    }

    #[test]
    fn zero_guidance_equals_conditional_only() {
        let model = tiny_model(1);
        let s = schedule();
        let cond = Array2::from_elem((8, 6), 0.25);
        let a = sample_chunk(
            &model,
            3,
            &cond,
            &s,
            Guidance::ClassifierFree(0.0),
            &mut ChaCha20Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = sample_chunk(
            &model,
            3,
            &cond,
            &s,
            Guidance::ConditionalOnly,
            &mut ChaCha20Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(a, b, "w = 0 must match the pure conditional path bit-exactly");
    }

    #[test]
    fn fixed_seed_reproduces_chunk() {
        let model = tiny_model(2);
        let s = schedule();
        let cond = Array2::zeros((6, 6));
        let a = sample_chunk(&model, 3, &cond, &s, Guidance::ClassifierFree(1.5), &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let b = sample_chunk(&model, 3, &cond, &s, Guidance::ClassifierFree(1.5), &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_target_oracle_collapses_chain_to_zero() {
        let s = schedule();
        let oracle = ZeroTargetOracle { schedule: s.clone() };
        let cond = Array2::zeros((5, 6));
        let x0 = sample_chunk(&oracle, 3, &cond, &s, Guidance::ConditionalOnly, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        // The exact oracle makes the t=1 step annihilate the state.
        assert!(x0.iter().all(|v| v.abs() < 1e-9), "max {:?}", x0.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }

    #[test]
    fn single_chunk_when_audio_fits() {
        let model = tiny_model(4);
        let s = schedule();
        let clip = style_clip(3, 12);
        let a = audio(8, 2);
        let cfg = SamplerConfig {
            chunk_len: 8,
            guidance: 0.5,
            step: ChunkStep::Overlap,
            use_initial_state: true,
        };
        let (seq, trace) =
            long_term_sample(&model, 3, &a, &clip, &cfg, &s, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        assert_eq!(seq.len(), 8);
        assert_eq!(trace.chunk_starts, vec![0]);
    }

    #[test]
    fn two_chunks_chain_initial_state_bit_exact() {
        let model = tiny_model(5);
        let s = schedule();
        let clip = style_clip(3, 12);
        let n = 8;
        let a = audio(2 * n - 1, 2);
        let cfg = SamplerConfig {
            chunk_len: n,
            guidance: 1.0,
            step: ChunkStep::Overlap,
            use_initial_state: true,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        // Reproduce chunk 1 exactly by replaying the same rng stream.
        let (seq, trace) = long_term_sample(&model, 3, &a, &clip, &cfg, &s, &mut rng).unwrap();
        assert_eq!(seq.len(), 2 * n - 1);
        assert_eq!(trace.chunk_starts, vec![0, n - 1]);

        let mut replay = ChaCha20Rng::seed_from_u64(31);
        let pool = clip.sequence.frames();
        let init_idx = replay.random_range(0..pool.len());
        let s_idx: [usize; 3] = [
            replay.random_range(0..pool.len()),
            replay.random_range(0..pool.len()),
            replay.random_range(0..pool.len()),
        ];
        let cond = build_condition(
            Some(&pool[init_idx]),
            Some([&pool[s_idx[0]], &pool[s_idx[1]], &pool[s_idx[2]]]),
            n,
            3,
        )
        .unwrap();
        let fused = fuse_audio(&cond, &a.slice_padded(0, n)).unwrap();
        let chunk1 = sample_chunk(
            &model,
            3,
            fused.fused().unwrap(),
            &s,
            Guidance::ClassifierFree(cfg.guidance),
            &mut replay,
        )
        .unwrap();
        // Chunk 2's recorded initial state equals chunk 1's final frame.
        assert_eq!(
            trace.initial_rows[1].as_deref().unwrap(),
            chunk1.row(n - 1).to_vec().as_slice()
        );
    }

    #[test]
    fn same_seed_same_sequence_different_seed_differs() {
        let model = tiny_model(6);
        let s = schedule();
        let clip = style_clip(3, 10);
        let a = audio(20, 2);
        let cfg = SamplerConfig {
            chunk_len: 8,
            guidance: 0.7,
            step: ChunkStep::Overlap,
            use_initial_state: true,
        };
        let (x, tx) = long_term_sample(&model, 3, &a, &clip, &cfg, &s, &mut ChaCha20Rng::seed_from_u64(7)).unwrap();
        let (y, ty) = long_term_sample(&model, 3, &a, &clip, &cfg, &s, &mut ChaCha20Rng::seed_from_u64(7)).unwrap();
        assert_eq!(x, y);
        assert_eq!(tx, ty);
        let (z, _) = long_term_sample(&model, 3, &a, &clip, &cfg, &s, &mut ChaCha20Rng::seed_from_u64(8)).unwrap();
        assert_ne!(x, z, "different seeds must change the style draws and output");
    }

    #[test]
    fn style_triples_are_redrawn_per_chunk() {
        let model = tiny_model(9);
        let s = schedule();
        let clip = style_clip(3, 16);
        let a = audio(40, 2);
        let cfg = SamplerConfig {
            chunk_len: 8,
            guidance: 0.0,
            step: ChunkStep::Overlap,
            use_initial_state: true,
        };
        let (_, trace) = long_term_sample(&model, 3, &a, &clip, &cfg, &s, &mut ChaCha20Rng::seed_from_u64(17)).unwrap();
        assert!(trace.style_indices.len() >= 3);
        let first = trace.style_indices[0];
        assert!(
            trace.style_indices.iter().any(|t| *t != first),
            "not all chunks may share one style triple: {:?}",
            trace.style_indices
        );
    }

    #[test]
    fn every_output_frame_is_written() {
        let s = schedule();
        let clip = style_clip(3, 8);
        let a = audio(29, 2);
        for step in [ChunkStep::Overlap, ChunkStep::Full] {
            let cfg = SamplerConfig {
                chunk_len: 8,
                guidance: 0.0,
                step,
                use_initial_state: true,
            };
            let (seq, _) =
                long_term_sample(&BiasOracle, 3, &a, &clip, &cfg, &s, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
            assert_eq!(seq.len(), 29);
            for (i, f) in seq.frames().iter().enumerate() {
                assert!(
                    f.values().iter().any(|&v| v != 0.0),
                    "frame {i} left at zero initialization under {step:?}"
                );
            }
        }
    }

    #[test]
    fn continuity_jump_anchors() {
        let dim = 3;
        let mut frames: Vec<ExpressionFrame> = (0..10)
            .map(|_| ExpressionFrame::new(vec![0.1; dim]))
            .collect();
        let (per, global) =
            continuity_jump(&ExpressionSequence::new(frames.clone(), 25.0).unwrap(), &[3, 7]).unwrap();
        assert_eq!(per, vec![0.0, 0.0]);
        assert_eq!(global, 0.0);

        // Step of 0.8 on one channel at frame 5.
        for f in frames.iter_mut().skip(5) {
            let mut v = f.values().to_vec();
            v[1] += 0.8;
            *f = ExpressionFrame::new(v);
        }
        let seq = ExpressionSequence::new(frames, 25.0).unwrap();
        let (per, global) = continuity_jump(&seq, &[5]).unwrap();
        assert!((per[0] - 0.8).abs() < 1e-12);
        assert!((global - 0.8).abs() < 1e-12);
    }

    #[test]
    fn continuity_jump_rejects_bad_boundaries() {
        let seq = ExpressionSequence::new(vec![ExpressionFrame::zeros(2); 4], 25.0).unwrap();
        assert!(continuity_jump(&seq, &[0]).is_err());
        assert!(continuity_jump(&seq, &[4]).is_err());
    }
}
