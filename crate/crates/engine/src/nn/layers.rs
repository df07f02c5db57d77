//! Dense layers with hand-written backward passes: linear, layer norm,
//! softmax, GELU, multi-head (cross-)attention, feed-forward blocks, and
//! sinusoidal embeddings.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::{InitKind, ParamId, ParamLayout};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Add a gradient tensor into its slot of the flat gradient vector.
pub fn accumulate(layout: &ParamLayout, grads: &mut [f64], id: ParamId, delta: &Array2<f64>) {
    let spec = layout.spec(id);
    debug_assert_eq!(delta.dim(), (spec.rows, spec.cols));
    let slot = &mut grads[spec.offset..spec.offset + spec.len()];
    for (g, d) in slot.iter_mut().zip(delta.iter()) {
        *g += d;
    }
}

// ---------------------------------------------------------------- linear

pub fn linear_forward(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    x.dot(&w) + &b
}

/// Returns `(dx, dw, db)` for `y = x w + b`.
pub fn linear_backward(
    x: &Array2<f64>,
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    (dx, dw, db)
}

// ------------------------------------------------------------ layer norm

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization `y = gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm_forward(
    x: &Array2<f64>,
    gain: ArrayView2<f64>,
    bias: ArrayView2<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.dim());
    let mut inv_std = Vec::with_capacity(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for (j, &v) in row.iter().enumerate() {
            xhat[[i, j]] = (v - mean) * is;
        }
    }
    let y = &xhat * &gain + &bias;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: ArrayView2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = dy.ncols() as f64;
    let dxhat = dy * &gain;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dxhat_row = dxhat.row(i);
        let xhat_row = cache.xhat.row(i);
        let sum_dxhat: f64 = dxhat_row.sum();
        let sum_dxhat_xhat: f64 = dxhat_row
            .iter()
            .zip(xhat_row.iter())
            .map(|(a, b)| a * b)
            .sum();
        let is = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = is / d * (d * dxhat_row[j] - sum_dxhat - xhat_row[j] * sum_dxhat_xhat);
        }
    }
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    (dx, dgain, dbias)
}

// --------------------------------------------------------------- softmax

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut p = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            p[[i, j]] = e;
            sum += e;
        }
        for j in 0..x.ncols() {
            p[[i, j]] /= sum;
        }
    }
    p
}

/// Jacobian-vector product of row softmax: `ds = p * (dp - sum(dp * p))`.
pub fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(p.dim());
    for i in 0..p.nrows() {
        let dot: f64 = p
            .row(i)
            .iter()
            .zip(dp.row(i).iter())
            .map(|(a, b)| a * b)
            .sum();
        for j in 0..p.ncols() {
            ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
        }
    }
    ds
}

// ------------------------------------------------------------------ gelu

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = x.mapv(gelu_derivative);
    dx *= dy;
    dx
}

// ------------------------------------------------------------- attention

/// Parameter handles for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl AttentionIds {
    pub fn register(layout: &mut ParamLayout, prefix: &str, width: usize) -> Self {
        let w = |layout: &mut ParamLayout, n: &str| {
            layout.register(format!("{prefix}.{n}"), width, width, InitKind::XavierUniform)
        };
        let b = |layout: &mut ParamLayout, n: &str| {
            layout.register(format!("{prefix}.{n}"), 1, width, InitKind::Zeros)
        };
        AttentionIds {
            w_q: w(layout, "w_q"),
            b_q: b(layout, "b_q"),
            w_k: w(layout, "w_k"),
            b_k: b(layout, "b_k"),
            w_v: w(layout, "w_v"),
            b_v: b(layout, "b_v"),
            w_o: w(layout, "w_o"),
            b_o: b(layout, "b_o"),
        }
    }
}

pub struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
}

/// Multi-head attention of `q_input` over `kv_input` (self-attention when
/// they are the same tensor).
pub fn attention_forward(
    q_input: &Array2<f64>,
    kv_input: &Array2<f64>,
    ids: &AttentionIds,
    layout: &ParamLayout,
    data: &[f64],
    heads: usize,
) -> (Array2<f64>, AttentionCache) {
    let width = layout.spec(ids.w_q).cols;
    debug_assert_eq!(width % heads, 0, "width must divide evenly into heads");
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = linear_forward(q_input, layout.view(data, ids.w_q), layout.view(data, ids.b_q));
    let k = linear_forward(kv_input, layout.view(data, ids.w_k), layout.view(data, ids.b_k));
    let v = linear_forward(kv_input, layout.view(data, ids.w_v), layout.view(data, ids.b_v));

    let n = q.nrows();
    let mut concat = Array2::zeros((n, width));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let scores = qh.dot(&kh.t()) * scale;
        let p = softmax_rows(&scores);
        let oh = p.dot(&vh);
        concat.slice_mut(cols).assign(&oh);
        probs.push(p);
    }
    let out = linear_forward(&concat, layout.view(data, ids.w_o), layout.view(data, ids.b_o));
    (out, AttentionCache { q, k, v, probs, concat })
}

/// Backward pass; accumulates parameter gradients into `grads` and returns
/// `(d_q_input, d_kv_input)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q_input: &Array2<f64>,
    kv_input: &Array2<f64>,
    ids: &AttentionIds,
    layout: &ParamLayout,
    data: &[f64],
    heads: usize,
    cache: &AttentionCache,
    dout: &Array2<f64>,
    grads: &mut [f64],
) -> (Array2<f64>, Array2<f64>) {
    let width = layout.spec(ids.w_q).cols;
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let (dconcat, dw_o, db_o) = linear_backward(&cache.concat, layout.view(data, ids.w_o), dout);
    accumulate(layout, grads, ids.w_o, &dw_o);
    accumulate(layout, grads, ids.b_o, &db_o);

    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let vh = cache.v.slice(cols);
        let p = &cache.probs[h];
        let doh = dconcat.slice(cols).to_owned();
        let dp = doh.dot(&vh.t());
        let dvh = p.t().dot(&doh);
        let dscores = softmax_backward(p, &dp) * scale;
        let dqh = dscores.dot(&kh);
        let dkh = dscores.t().dot(&qh);
        dq.slice_mut(cols).assign(&dqh);
        dk.slice_mut(cols).assign(&dkh);
        dv.slice_mut(cols).assign(&dvh);
    }

    let (dq_input, dw_q, db_q) = linear_backward(q_input, layout.view(data, ids.w_q), &dq);
    let (dk_input, dw_k, db_k) = linear_backward(kv_input, layout.view(data, ids.w_k), &dk);
    let (dv_input, dw_v, db_v) = linear_backward(kv_input, layout.view(data, ids.w_v), &dv);
    accumulate(layout, grads, ids.w_q, &dw_q);
    accumulate(layout, grads, ids.b_q, &db_q);
    accumulate(layout, grads, ids.w_k, &dw_k);
    accumulate(layout, grads, ids.b_k, &db_k);
    accumulate(layout, grads, ids.w_v, &dw_v);
    accumulate(layout, grads, ids.b_v, &db_v);

    (dq_input, dk_input + dv_input)
}

// ---------------------------------------------------------- feed-forward

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardIds {
    pub fn register(layout: &mut ParamLayout, prefix: &str, width: usize, hidden: usize) -> Self {
        FeedForwardIds {
            w1: layout.register(format!("{prefix}.w1"), width, hidden, InitKind::XavierUniform),
            b1: layout.register(format!("{prefix}.b1"), 1, hidden, InitKind::Zeros),
            w2: layout.register(format!("{prefix}.w2"), hidden, width, InitKind::XavierUniform),
            b2: layout.register(format!("{prefix}.b2"), 1, width, InitKind::Zeros),
        }
    }
}

pub struct FeedForwardCache {
    pub pre_activation: Array2<f64>,
    pub hidden: Array2<f64>,
}

pub fn feed_forward_forward(
    x: &Array2<f64>,
    ids: &FeedForwardIds,
    layout: &ParamLayout,
    data: &[f64],
) -> (Array2<f64>, FeedForwardCache) {
    let pre = linear_forward(x, layout.view(data, ids.w1), layout.view(data, ids.b1));
    let hidden = gelu_forward(&pre);
    let y = linear_forward(&hidden, layout.view(data, ids.w2), layout.view(data, ids.b2));
    (
        y,
        FeedForwardCache {
            pre_activation: pre,
            hidden,
        },
    )
}

pub fn feed_forward_backward(
    x: &Array2<f64>,
    ids: &FeedForwardIds,
    layout: &ParamLayout,
    data: &[f64],
    cache: &FeedForwardCache,
    dy: &Array2<f64>,
    grads: &mut [f64],
) -> Array2<f64> {
    let (dhidden, dw2, db2) = linear_backward(&cache.hidden, layout.view(data, ids.w2), dy);
    accumulate(layout, grads, ids.w2, &dw2);
    accumulate(layout, grads, ids.b2, &db2);
    let dpre = gelu_backward(&cache.pre_activation, &dhidden);
    let (dx, dw1, db1) = linear_backward(x, layout.view(data, ids.w1), &dpre);
    accumulate(layout, grads, ids.w1, &dw1);
    accumulate(layout, grads, ids.b1, &db1);
    dx
}

// -------------------------------------------------- sinusoidal embeddings

/// Standard transformer positional table, `(n, dim)`.
pub fn sinusoidal_positions(n: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((n, dim));
    for pos in 0..n {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Sinusoidal embedding of a diffusion step, `(1, dim)`.
pub fn sinusoidal_timestep(t: usize, dim: usize) -> Array2<f64> {
    let mut e = Array2::zeros((1, dim));
    for i in 0..dim {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * pair / dim as f64);
        let angle = t as f64 * freq;
        e[[0, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::central_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rand_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
        use rand::Rng;
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = rand_matrix(&mut rng, 3, 4);
        let w0 = rand_matrix(&mut rng, 4, 2);
        let b0 = rand_matrix(&mut rng, 1, 2);
        let target = rand_matrix(&mut rng, 3, 2);

        let loss = |w: &Array2<f64>, b: &Array2<f64>| -> f64 {
            let y = linear_forward(&x, w.view(), b.view());
            (&y - &target).mapv(|v| v * v).sum()
        };
        let y = linear_forward(&x, w0.view(), b0.view());
        let dy = (&y - &target) * 2.0;
        let (_, dw, db) = linear_backward(&x, w0.view(), &dy);

        for idx in [(0, 0), (1, 1), (3, 0)] {
            let fd = central_diff(
                |v| {
                    let mut w = w0.clone();
                    w[idx] = v;
                    loss(&w, &b0)
                },
                w0[idx],
                1e-6,
            );
            assert!((dw[idx] - fd).abs() < 1e-6, "dw{idx:?}: {} vs {}", dw[idx], fd);
        }
        let fd = central_diff(
            |v| {
                let mut b = b0.clone();
                b[[0, 1]] = v;
                loss(&w0, &b)
            },
            b0[[0, 1]],
            1e-6,
        );
        assert!((db[[0, 1]] - fd).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x0 = rand_matrix(&mut rng, 3, 5);
        let g = rand_matrix(&mut rng, 1, 5);
        let b = rand_matrix(&mut rng, 1, 5);
        let target = rand_matrix(&mut rng, 3, 5);

        let loss = |x: &Array2<f64>| -> f64 {
            let (y, _) = layer_norm_forward(x, g.view(), b.view());
            (&y - &target).mapv(|v| v * v).sum()
        };
        let (y, cache) = layer_norm_forward(&x0, g.view(), b.view());
        let dy = (&y - &target) * 2.0;
        let (dx, _, _) = layer_norm_backward(&cache, g.view(), &dy);
        for idx in [(0, 0), (1, 3), (2, 4)] {
            let fd = central_diff(
                |v| {
                    let mut x = x0.clone();
                    x[idx] = v;
                    loss(&x)
                },
                x0[idx],
                1e-6,
            );
            assert!((dx[idx] - fd).abs() < 1e-6, "dx{idx:?}: {} vs {}", dx[idx], fd);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = ndarray::array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax_rows(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let fd = central_diff(gelu, x, 1e-6);
            assert!((gelu_derivative(x) - fd).abs() < 1e-8, "at {x}");
        }
    }

    #[test]
    fn attention_input_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let width = 8;
        let heads = 2;
        let mut layout = ParamLayout::new();
        let ids = AttentionIds::register(&mut layout, "attn", width);
        let data = layout.randomize_params(&mut rng, 0.5);
        let q_in0 = rand_matrix(&mut rng, 4, width);
        let kv_in0 = rand_matrix(&mut rng, 5, width);
        let target = rand_matrix(&mut rng, 4, width);

        let loss = |q_in: &Array2<f64>, kv_in: &Array2<f64>| -> f64 {
            let (y, _) = attention_forward(q_in, kv_in, &ids, &layout, &data, heads);
            (&y - &target).mapv(|v| v * v).sum()
        };
        let (y, cache) = attention_forward(&q_in0, &kv_in0, &ids, &layout, &data, heads);
        let dy = (&y - &target) * 2.0;
        let mut grads = vec![0.0; layout.total()];
        let (dq_in, dkv_in) = attention_backward(
            &q_in0, &kv_in0, &ids, &layout, &data, heads, &cache, &dy, &mut grads,
        );

        for idx in [(0, 0), (2, 5), (3, 7)] {
            let fd = central_diff(
                |v| {
                    let mut q = q_in0.clone();
                    q[idx] = v;
                    loss(&q, &kv_in0)
                },
                q_in0[idx],
                1e-6,
            );
            assert!(
                (dq_in[idx] - fd).abs() < 1e-6,
                "dq{idx:?}: {} vs {}",
                dq_in[idx],
                fd
            );
        }
        for idx in [(0, 1), (4, 6)] {
            let fd = central_diff(
                |v| {
                    let mut kv = kv_in0.clone();
                    kv[idx] = v;
                    loss(&q_in0, &kv)
                },
                kv_in0[idx],
                1e-6,
            );
            assert!(
                (dkv_in[idx] - fd).abs() < 1e-6,
                "dkv{idx:?}: {} vs {}",
                dkv_in[idx],
                fd
            );
        }
    }

    #[test]
    fn positional_tables_disambiguate_positions() {
        let pe = sinusoidal_positions(16, 12);
        for a in 0..16 {
            for b in (a + 1)..16 {
                let diff: f64 = (&pe.row(a) - &pe.row(b)).mapv(f64::abs).sum();
                assert!(diff > 1e-6, "rows {a} and {b} collide");
            }
        }
        let t1 = sinusoidal_timestep(3, 12);
        let t2 = sinusoidal_timestep(4, 12);
        assert!((&t1 - &t2).mapv(f64::abs).sum() > 1e-6);
    }
}
