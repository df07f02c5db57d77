//! The trainable noise predictor: noisy sequence tokens self-attend, then
//! cross-attend to per-frame condition tokens, with a sinusoidal timestep
//! embedding added to every token. Forward and backward passes are written
//! out by hand over the flat parameter vector, so gradients are exact and
//! finite-difference checkable.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, sample_noise, simple_loss};
use crate::error::{EngineError, Result};
use crate::nn::adam::{AdamConfig, AdamState};
use crate::nn::layers::{
    accumulate, attention_backward, attention_forward, feed_forward_backward,
    feed_forward_forward, gelu_backward, gelu_forward, layer_norm_backward, layer_norm_forward,
    linear_backward, linear_forward, sinusoidal_positions, sinusoidal_timestep, AttentionCache,
    AttentionIds, FeedForwardCache, FeedForwardIds, LayerNormCache,
};
use crate::nn::{InitKind, ParamId, ParamLayout};
use crate::schedule::NoiseSchedule;

/// Anything that predicts the noise component of `x_t`; the sampler is
/// generic over this so tests can substitute exact oracles.
pub trait NoisePredictor: Sync {
    fn predict(&self, x_t: &Array2<f64>, t: usize, cond: &Array2<f64>) -> Result<Array2<f64>>;
}

/// Architecture sizes; the parameter count is a deterministic function of
/// these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserHyper {
    /// Channels per sequence frame (expression + pose).
    pub input_dim: usize,
    /// Width of one fused condition row (state/style + indicator + audio).
    pub cond_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
}

impl DenoiserHyper {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.cond_dim == 0 {
            return Err(EngineError::Config("denoiser dims must be positive".into()));
        }
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.ff_width == 0 {
            return Err(EngineError::Config("denoiser sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(EngineError::Config(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNormIds {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormIds {
    fn register(layout: &mut ParamLayout, prefix: &str, width: usize) -> Self {
        LayerNormIds {
            gain: layout.register(format!("{prefix}.gain"), 1, width, InitKind::Ones),
            bias: layout.register(format!("{prefix}.bias"), 1, width, InitKind::Zeros),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    norm_self: LayerNormIds,
    self_attn: AttentionIds,
    norm_cross: LayerNormIds,
    cross_attn: AttentionIds,
    norm_ff: LayerNormIds,
    ffn: FeedForwardIds,
}

#[derive(Debug, Clone)]
struct DenoiserIds {
    embed_x_w: ParamId,
    embed_x_b: ParamId,
    embed_c_w: ParamId,
    embed_c_b: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    cond_norm: LayerNormIds,
    blocks: Vec<BlockIds>,
    final_norm: LayerNormIds,
    head_w: ParamId,
    head_b: ParamId,
}

/// Denoiser with explicit parameters in one flat vector.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    hyper: DenoiserHyper,
    layout: ParamLayout,
    ids: DenoiserIds,
    params: Vec<f64>,
}

impl DenoiserModel {
    /// Build and initialize. The output head starts at zero so the
    /// untrained model predicts `eps = 0` for every input.
    pub fn new<R: Rng + ?Sized>(hyper: DenoiserHyper, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let (layout, ids) = Self::build_layout(&hyper);
        let params = layout.init_params(rng);
        Ok(DenoiserModel {
            hyper,
            layout,
            ids,
            params,
        })
    }

    /// Rebuild a model around an existing parameter vector (checkpoint
    /// load); the vector length must match the registry exactly.
    pub fn from_params(hyper: DenoiserHyper, params: Vec<f64>) -> Result<Self> {
        hyper.validate()?;
        let (layout, ids) = Self::build_layout(&hyper);
        if params.len() != layout.total() {
            return Err(EngineError::dimension(
                "denoiser parameter vector",
                layout.total(),
                params.len(),
            ));
        }
        Ok(DenoiserModel {
            hyper,
            layout,
            ids,
            params,
        })
    }

    fn build_layout(hyper: &DenoiserHyper) -> (ParamLayout, DenoiserIds) {
        let w = hyper.width;
        let mut layout = ParamLayout::new();
        let embed_x_w = layout.register("embed_x.w", hyper.input_dim, w, InitKind::XavierUniform);
        let embed_x_b = layout.register("embed_x.b", 1, w, InitKind::Zeros);
        let embed_c_w = layout.register("embed_c.w", hyper.cond_dim, w, InitKind::XavierUniform);
        let embed_c_b = layout.register("embed_c.b", 1, w, InitKind::Zeros);
        let time_w1 = layout.register("time_mlp.w1", w, w, InitKind::XavierUniform);
        let time_b1 = layout.register("time_mlp.b1", 1, w, InitKind::Zeros);
        let time_w2 = layout.register("time_mlp.w2", w, w, InitKind::XavierUniform);
        let time_b2 = layout.register("time_mlp.b2", 1, w, InitKind::Zeros);
        let cond_norm = LayerNormIds::register(&mut layout, "cond_norm", w);
        let blocks = (0..hyper.layers)
            .map(|i| BlockIds {
                norm_self: LayerNormIds::register(&mut layout, &format!("block{i}.norm_self"), w),
                self_attn: AttentionIds::register(&mut layout, &format!("block{i}.self_attn"), w),
                norm_cross: LayerNormIds::register(&mut layout, &format!("block{i}.norm_cross"), w),
                cross_attn: AttentionIds::register(&mut layout, &format!("block{i}.cross_attn"), w),
                norm_ff: LayerNormIds::register(&mut layout, &format!("block{i}.norm_ff"), w),
                ffn: FeedForwardIds::register(&mut layout, &format!("block{i}.ffn"), w, hyper.ff_width),
            })
            .collect();
        let final_norm = LayerNormIds::register(&mut layout, "final_norm", w);
        let head_w = layout.register("head.w", w, hyper.input_dim, InitKind::Zeros);
        let head_b = layout.register("head.b", 1, hyper.input_dim, InitKind::Zeros);
        let ids = DenoiserIds {
            embed_x_w,
            embed_x_b,
            embed_c_w,
            embed_c_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            cond_norm,
            blocks,
            final_norm,
            head_w,
            head_b,
        };
        (layout, ids)
    }

    pub fn hyper(&self) -> &DenoiserHyper {
        &self.hyper
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout.total()
    }

    /// Restore a parameter vector (checkpoint load). Length must match the
    /// registry.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.total() {
            return Err(EngineError::dimension(
                "denoiser parameter vector",
                self.layout.total(),
                params.len(),
            ));
        }
        self.params = params;
        Ok(())
    }

    /// Replace all parameters by small random values; moves the zero head
    /// off its saddle so gradient checks see nontrivial flow everywhere.
    pub fn randomize_for_test<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        self.params = self.layout.randomize_params(rng, scale);
    }

    fn check_shapes(&self, x_t: &Array2<f64>, cond: &Array2<f64>) -> Result<()> {
        if x_t.ncols() != self.hyper.input_dim {
            return Err(EngineError::dimension(
                "denoise input channels",
                self.hyper.input_dim,
                x_t.ncols(),
            ));
        }
        if cond.ncols() != self.hyper.cond_dim {
            return Err(EngineError::dimension(
                "denoise condition width",
                self.hyper.cond_dim,
                cond.ncols(),
            ));
        }
        if cond.nrows() != x_t.nrows() {
            return Err(EngineError::dimension(
                "denoise condition rows",
                x_t.nrows(),
                cond.nrows(),
            ));
        }
        Ok(())
    }

    /// Predict the noise component of `x_t` under the fused condition.
    pub fn denoise(&self, x_t: &Array2<f64>, t: usize, cond: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_shapes(x_t, cond)?;
        Ok(self.forward(x_t, t, cond).0)
    }

    fn forward(&self, x_t: &Array2<f64>, t: usize, cond: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let p = &self.params;
        let layout = &self.layout;
        let ids = &self.ids;
        let n = x_t.nrows();
        let w = self.hyper.width;

        let t_base = sinusoidal_timestep(t, w);
        let t_pre = linear_forward(&t_base, layout.view(p, ids.time_w1), layout.view(p, ids.time_b1));
        let t_act = gelu_forward(&t_pre);
        let t_emb = linear_forward(&t_act, layout.view(p, ids.time_w2), layout.view(p, ids.time_b2));

        let pos = sinusoidal_positions(n, w);

        let mut h = linear_forward(x_t, layout.view(p, ids.embed_x_w), layout.view(p, ids.embed_x_b));
        h += &pos;
        h += &t_emb;

        let mut g0 = linear_forward(cond, layout.view(p, ids.embed_c_w), layout.view(p, ids.embed_c_b));
        g0 += &pos;
        g0 += &t_emb;
        let (g, cond_norm_cache) = layer_norm_forward(
            &g0,
            layout.view(p, ids.cond_norm.gain),
            layout.view(p, ids.cond_norm.bias),
        );

        let mut blocks = Vec::with_capacity(self.hyper.layers);
        for b in &ids.blocks {
            let h_in = h;
            let (a_in, norm_self_cache) = layer_norm_forward(
                &h_in,
                layout.view(p, b.norm_self.gain),
                layout.view(p, b.norm_self.bias),
            );
            let (attn, self_attn_cache) =
                attention_forward(&a_in, &a_in, &b.self_attn, layout, p, self.hyper.heads);
            let h_mid1 = &h_in + &attn;

            let (q_in, norm_cross_cache) = layer_norm_forward(
                &h_mid1,
                layout.view(p, b.norm_cross.gain),
                layout.view(p, b.norm_cross.bias),
            );
            let (cross, cross_attn_cache) =
                attention_forward(&q_in, &g, &b.cross_attn, layout, p, self.hyper.heads);
            let h_mid2 = &h_mid1 + &cross;

            let (f_in, norm_ff_cache) = layer_norm_forward(
                &h_mid2,
                layout.view(p, b.norm_ff.gain),
                layout.view(p, b.norm_ff.bias),
            );
            let (ff, ffn_cache) = feed_forward_forward(&f_in, &b.ffn, layout, p);
            h = &h_mid2 + &ff;

            blocks.push(BlockCache {
                a_in,
                norm_self_cache,
                self_attn_cache,
                q_in,
                norm_cross_cache,
                cross_attn_cache,
                f_in,
                norm_ff_cache,
                ffn_cache,
            });
        }

        let (hn, final_norm_cache) = layer_norm_forward(
            &h,
            layout.view(p, ids.final_norm.gain),
            layout.view(p, ids.final_norm.bias),
        );
        let out = linear_forward(&hn, layout.view(p, ids.head_w), layout.view(p, ids.head_b));

        let cache = ForwardCache {
            t_base,
            t_pre,
            t_act,
            g0_input_rows: cond.nrows(),
            cond_norm_cache,
            g,
            blocks,
            final_norm_cache,
            hn,
        };
        (out, cache)
    }

    /// Backward pass of `denoise` given `dL/d eps_hat`; accumulates into
    /// `grads` (length `n_params`).
    fn backward(
        &self,
        x_t: &Array2<f64>,
        cond: &Array2<f64>,
        cache: &ForwardCache,
        dout: &Array2<f64>,
        grads: &mut [f64],
    ) {
        let p = &self.params;
        let layout = &self.layout;
        let ids = &self.ids;

        let (dhn, dw_head, db_head) = linear_backward(&cache.hn, layout.view(p, ids.head_w), dout);
        accumulate(layout, grads, ids.head_w, &dw_head);
        accumulate(layout, grads, ids.head_b, &db_head);

        let (mut dh, dgain, dbias) = layer_norm_backward(
            &cache.final_norm_cache,
            layout.view(p, ids.final_norm.gain),
            &dhn,
        );
        accumulate(layout, grads, ids.final_norm.gain, &dgain);
        accumulate(layout, grads, ids.final_norm.bias, &dbias);

        let mut dg_total: Array2<f64> = Array2::zeros(cache.g.dim());

        for (b, c) in ids.blocks.iter().zip(&cache.blocks).rev() {
            // h_out = h_mid2 + ffn(ln(h_mid2))
            let df_in =
                feed_forward_backward(&c.f_in, &b.ffn, layout, p, &c.ffn_cache, &dh, grads);
            let (dh_mid2_from_norm, dgain, dbias) = layer_norm_backward(
                &c.norm_ff_cache,
                layout.view(p, b.norm_ff.gain),
                &df_in,
            );
            accumulate(layout, grads, b.norm_ff.gain, &dgain);
            accumulate(layout, grads, b.norm_ff.bias, &dbias);
            let dh_mid2 = &dh + &dh_mid2_from_norm;

            // h_mid2 = h_mid1 + cross(ln(h_mid1), g)
            let (dq_in, dg) = attention_backward(
                &c.q_in,
                &cache.g,
                &b.cross_attn,
                layout,
                p,
                self.hyper.heads,
                &c.cross_attn_cache,
                &dh_mid2,
                grads,
            );
            dg_total += &dg;
            let (dh_mid1_from_norm, dgain, dbias) = layer_norm_backward(
                &c.norm_cross_cache,
                layout.view(p, b.norm_cross.gain),
                &dq_in,
            );
            accumulate(layout, grads, b.norm_cross.gain, &dgain);
            accumulate(layout, grads, b.norm_cross.bias, &dbias);
            let dh_mid1 = &dh_mid2 + &dh_mid1_from_norm;

            // h_mid1 = h_in + self(ln(h_in))
            let (da_q, da_kv) = attention_backward(
                &c.a_in,
                &c.a_in,
                &b.self_attn,
                layout,
                p,
                self.hyper.heads,
                &c.self_attn_cache,
                &dh_mid1,
                grads,
            );
            let da_in = &da_q + &da_kv;
            let (dh_in_from_norm, dgain, dbias) = layer_norm_backward(
                &c.norm_self_cache,
                layout.view(p, b.norm_self.gain),
                &da_in,
            );
            accumulate(layout, grads, b.norm_self.gain, &dgain);
            accumulate(layout, grads, b.norm_self.bias, &dbias);
            dh = &dh_mid1 + &dh_in_from_norm;
        }

        // g = LN(embed_c(cond) + pos + t_emb)
        let (dg0, dgain, dbias) = layer_norm_backward(
            &cache.cond_norm_cache,
            layout.view(p, ids.cond_norm.gain),
            &dg_total,
        );
        accumulate(layout, grads, ids.cond_norm.gain, &dgain);
        accumulate(layout, grads, ids.cond_norm.bias, &dbias);
        let (_dcond, dw_c, db_c) = linear_backward(cond, layout.view(p, ids.embed_c_w), &dg0);
        accumulate(layout, grads, ids.embed_c_w, &dw_c);
        accumulate(layout, grads, ids.embed_c_b, &db_c);

        // h0 = embed_x(x_t) + pos + t_emb
        let (_dx, dw_x, db_x) = linear_backward(x_t, layout.view(p, ids.embed_x_w), &dh);
        accumulate(layout, grads, ids.embed_x_w, &dw_x);
        accumulate(layout, grads, ids.embed_x_b, &db_x);

        // The timestep embedding was broadcast onto every token of both
        // streams, so its gradient is the row sum of each.
        let dt_emb = (dh.sum_axis(Axis(0)) + dg0.sum_axis(Axis(0))).insert_axis(Axis(0));
        let (dt_act, dw2, db2) =
            linear_backward(&cache.t_act, layout.view(p, ids.time_w2), &dt_emb);
        accumulate(layout, grads, ids.time_w2, &dw2);
        accumulate(layout, grads, ids.time_b2, &db2);
        let dt_pre = gelu_backward(&cache.t_pre, &dt_act);
        let (_dt_base, dw1, db1) =
            linear_backward(&cache.t_base, layout.view(p, ids.time_w1), &dt_pre);
        accumulate(layout, grads, ids.time_w1, &dw1);
        accumulate(layout, grads, ids.time_b1, &db1);

        debug_assert_eq!(cache.g0_input_rows, cond.nrows());
    }

    /// Gradient of the deterministic objective
    /// `mean((denoise(x_t, t, cond) - target)^2)` with respect to all
    /// parameters; the finite-difference checks probe this surface.
    pub fn grad_against_target(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        cond: &Array2<f64>,
        target: &Array2<f64>,
        grads: &mut [f64],
    ) -> Result<f64> {
        self.grad_for_example(x_t, t, cond, target, 1.0, grads)
    }

    /// Forward/backward of a squared-error objective against a target
    /// noise tensor. Returns the un-normalized per-element loss and
    /// accumulates `dL/d theta` for `L = mean((eps_hat - target)^2)`.
    fn grad_for_example(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        cond: &Array2<f64>,
        target: &Array2<f64>,
        loss_scale: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        self.check_shapes(x_t, cond)?;
        let (eps_hat, cache) = self.forward(x_t, t, cond);
        let loss = simple_loss(target, &eps_hat)?;
        let n_entries = eps_hat.len() as f64;
        let dout = (&eps_hat - target) * (2.0 * loss_scale / n_entries);
        self.backward(x_t, cond, &cache, &dout, grads);
        Ok(loss)
    }
}

struct BlockCache {
    a_in: Array2<f64>,
    norm_self_cache: LayerNormCache,
    self_attn_cache: AttentionCache,
    q_in: Array2<f64>,
    norm_cross_cache: LayerNormCache,
    cross_attn_cache: AttentionCache,
    f_in: Array2<f64>,
    norm_ff_cache: LayerNormCache,
    ffn_cache: FeedForwardCache,
}

struct ForwardCache {
    t_base: Array2<f64>,
    t_pre: Array2<f64>,
    t_act: Array2<f64>,
    g0_input_rows: usize,
    cond_norm_cache: LayerNormCache,
    g: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_norm_cache: LayerNormCache,
    hn: Array2<f64>,
}

impl NoisePredictor for DenoiserModel {
    fn predict(&self, x_t: &Array2<f64>, t: usize, cond: &Array2<f64>) -> Result<Array2<f64>> {
        self.denoise(x_t, t, cond)
    }
}

/// One training example: a clean chunk and its fused condition matrix
/// (`None` trains the unconditional branch explicitly).
pub struct TrainExample<'a> {
    pub x0: &'a Array2<f64>,
    pub cond: Option<Array2<f64>>,
}

/// Draws `t ~ U[1,T]` and `eps ~ N(0,I)` per example, applies condition
/// dropout with probability `drop_prob`, noises with the forward process,
/// and returns the batch-mean loss plus its exact parameter gradient.
///
/// All randomness is drawn sequentially up front; the per-example
/// forward/backward passes then run in parallel and their gradients are
/// reduced in example order, so results are deterministic under a fixed
/// rng regardless of thread count.
pub fn loss_and_grad<R: Rng + ?Sized>(
    model: &DenoiserModel,
    examples: &[TrainExample],
    schedule: &NoiseSchedule,
    drop_prob: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if examples.is_empty() {
        return Err(EngineError::Training("empty batch".into()));
    }
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(EngineError::Validation(format!(
            "drop probability must lie in [0,1], got {drop_prob}"
        )));
    }
    struct Job {
        t: usize,
        eps: Array2<f64>,
        dropped: bool,
    }
    let jobs: Vec<Job> = examples
        .iter()
        .map(|ex| Job {
            t: rng.random_range(1..=schedule.steps()),
            eps: sample_noise(ex.x0.nrows(), ex.x0.ncols(), rng),
            dropped: rng.random::<f64>() < drop_prob,
        })
        .collect();

    let batch = examples.len() as f64;
    let results: Vec<Result<(f64, Vec<f64>)>> = examples
        .par_iter()
        .zip(jobs.par_iter())
        .map(|(ex, job)| {
            let x_t = forward_sample(ex.x0, job.t, &job.eps, schedule)?;
            let cond = match (&ex.cond, job.dropped) {
                (Some(c), false) => c.clone(),
                _ => Array2::zeros((ex.x0.nrows(), model.hyper.cond_dim)),
            };
            let mut grads = vec![0.0; model.n_params()];
            let loss =
                model.grad_for_example(&x_t, job.t, &cond, &job.eps, 1.0 / batch, &mut grads)?;
            Ok((loss, grads))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut grads = vec![0.0; model.n_params()];
    for r in results {
        let (loss, g) = r?;
        total_loss += loss / batch;
        for (acc, v) in grads.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((total_loss, grads))
}

/// Training hyperparameters for the diffusion stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub drop_prob: f64,
    pub chunk_len: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            epochs: 1000,
            batch_size: 64,
            learning_rate: 4e-4,
            drop_prob: 0.1,
            chunk_len: 32,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.chunk_len < 4 {
            return Err(EngineError::Config(
                "epochs and batch_size must be positive; chunk_len >= 4".into(),
            ));
        }
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(EngineError::Config("learning rate must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(EngineError::Config("drop_prob must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// One chunk of a training clip, with the per-chunk condition inputs the
/// conditioning layout consumes.
pub struct DiffusionTrainItem {
    /// Clean chunk, `(chunk_len, input_dim)`.
    pub x0: Array2<f64>,
    /// Audio features aligned to the chunk, `(chunk_len, audio_dim)`.
    pub audio: Array2<f64>,
    /// Chunk frame 0 in diffusion space; the initial-state condition.
    pub initial: Vec<f64>,
    /// Index into the style pools (the chunk's source clip).
    pub clip: usize,
}

/// Chunked dataset plus per-clip style pools; style triples are re-drawn
/// from the pools every epoch.
pub struct DiffusionDataset {
    pub items: Vec<DiffusionTrainItem>,
    /// Per clip: all frames style triples may be drawn from.
    pub style_pools: Vec<Vec<Vec<f64>>>,
}

impl DiffusionDataset {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(EngineError::Dataset("no training chunks".into()));
        }
        for (i, item) in self.items.iter().enumerate() {
            let pool = self
                .style_pools
                .get(item.clip)
                .ok_or_else(|| EngineError::Dataset(format!("chunk {i} references missing clip {}", item.clip)))?;
            if pool.len() < 3 {
                return Err(EngineError::Dataset(format!(
                    "clip {} has {} frames; style sampling needs >= 3",
                    item.clip,
                    pool.len()
                )));
            }
        }
        Ok(())
    }
}

/// Loss curve and optimizer state produced by [`train`].
pub struct TrainRecord {
    pub epoch_losses: Vec<f64>,
}

/// Train with Adam; epoch-mean losses are recorded. Aborts with
/// diagnostics if the loss turns non-finite.
pub fn train<R: Rng + ?Sized>(
    model: &mut DenoiserModel,
    dataset: &DiffusionDataset,
    cfg: &DiffusionTrainConfig,
    schedule: &NoiseSchedule,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<TrainRecord> {
    cfg.validate()?;
    dataset.validate()?;
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let n = cfg.chunk_len;
    let cond_expr_dim = model.hyper.input_dim;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // Fresh style triple per chunk, drawn from the chunk's own clip.
        let styles: Vec<[usize; 3]> = dataset
            .items
            .iter()
            .map(|item| {
                let pool = &dataset.style_pools[item.clip];
                [
                    rng.random_range(0..pool.len()),
                    rng.random_range(0..pool.len()),
                    rng.random_range(0..pool.len()),
                ]
            })
            .collect();

        let mut order: Vec<usize> = (0..dataset.items.len()).collect();
        order.shuffle(rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let examples: Vec<TrainExample> = batch
                .iter()
                .map(|&idx| {
                    let item = &dataset.items[idx];
                    let pool = &dataset.style_pools[item.clip];
                    let initial = crate::blendshape::ExpressionFrame::new(item.initial.clone());
                    let s = styles[idx];
                    let f0 = crate::blendshape::ExpressionFrame::new(pool[s[0]].clone());
                    let f1 = crate::blendshape::ExpressionFrame::new(pool[s[1]].clone());
                    let f2 = crate::blendshape::ExpressionFrame::new(pool[s[2]].clone());
                    let cond = crate::conditioning::build_condition(
                        Some(&initial),
                        Some([&f0, &f1, &f2]),
                        n,
                        cond_expr_dim,
                    )?;
                    let fused = crate::conditioning::fuse_audio(&cond, &item.audio)?;
                    Ok(TrainExample {
                        x0: &item.x0,
                        cond: Some(fused.fused().expect("fused above").clone()),
                    })
                })
                .collect::<Result<_>>()?;

            let (loss, grads) = loss_and_grad(model, &examples, schedule, cfg.drop_prob, rng)?;
            if !loss.is_finite() {
                let grad_norm: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                return Err(EngineError::Training(format!(
                    "non-finite loss at epoch {epoch} step {step}: lr={}, grad_norm={grad_norm}",
                    cfg.learning_rate
                )));
            }
            adam.update(&adam_cfg, &mut model.params, &grads);
            loss_sum += loss;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    Ok(TrainRecord { epoch_losses })
}
