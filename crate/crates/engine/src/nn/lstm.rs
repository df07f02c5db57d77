//! Single-layer LSTM with full backpropagation through time. Gate order
//! in the stacked weight matrices is `[input, forget, cell, output]`.

use ndarray::{s, Array1, Array2};

use super::layers::accumulate;
use super::{InitKind, ParamId, ParamLayout};

#[derive(Debug, Clone, Copy)]
pub struct LstmIds {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmIds {
    pub fn register(layout: &mut ParamLayout, prefix: &str, input: usize, hidden: usize) -> Self {
        let w_x = layout.register(
            format!("{prefix}.w_x"),
            input,
            4 * hidden,
            InitKind::XavierUniform,
        );
        let w_h = layout.register(
            format!("{prefix}.w_h"),
            hidden,
            4 * hidden,
            InitKind::XavierUniform,
        );
        // Forget-gate bias initialized to 1 below via a dedicated entry
        // would complicate the registry; a zero bias works at these scales.
        let bias = layout.register(format!("{prefix}.bias"), 1, 4 * hidden, InitKind::Zeros);
        LstmIds {
            w_x,
            w_h,
            bias,
            hidden,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct LstmCache {
    /// Per step: gate activations (i, f, g, o), each length `hidden`.
    pub gates: Vec<[Array1<f64>; 4]>,
    /// Cell states c_t, one per step.
    pub cells: Vec<Array1<f64>>,
    /// Hidden states h_t, one per step (h_{-1} = 0 is implicit).
    pub hiddens: Vec<Array1<f64>>,
}

/// Run the LSTM over `x` (`(steps, input)`), returning the hidden-state
/// sequence `(steps, hidden)` and the cache for backward.
pub fn lstm_forward(
    x: &Array2<f64>,
    ids: &LstmIds,
    layout: &ParamLayout,
    data: &[f64],
) -> (Array2<f64>, LstmCache) {
    let hidden = ids.hidden;
    let steps = x.nrows();
    let w_x = layout.view(data, ids.w_x);
    let w_h = layout.view(data, ids.w_h);
    let bias = layout.view(data, ids.bias);

    let mut cache = LstmCache {
        gates: Vec::with_capacity(steps),
        cells: Vec::with_capacity(steps),
        hiddens: Vec::with_capacity(steps),
    };
    let mut h_prev = Array1::zeros(hidden);
    let mut c_prev: Array1<f64> = Array1::zeros(hidden);
    let mut out = Array2::zeros((steps, hidden));

    for t in 0..steps {
        let x_t = x.row(t);
        let pre = x_t.dot(&w_x) + h_prev.dot(&w_h) + bias.row(0);
        let i = pre.slice(s![0..hidden]).mapv(sigmoid);
        let f = pre.slice(s![hidden..2 * hidden]).mapv(sigmoid);
        let g = pre.slice(s![2 * hidden..3 * hidden]).mapv(f64::tanh);
        let o = pre.slice(s![3 * hidden..4 * hidden]).mapv(sigmoid);
        let c = &f * &c_prev + &i * &g;
        let h = &o * &c.mapv(f64::tanh);
        out.row_mut(t).assign(&h);
        cache.gates.push([i, f, g, o]);
        cache.cells.push(c.clone());
        cache.hiddens.push(h.clone());
        h_prev = h;
        c_prev = c;
    }
    (out, cache)
}

/// BPTT given `d_out = dL/dh_t` for every step; accumulates parameter
/// gradients and returns `dL/dx`.
pub fn lstm_backward(
    x: &Array2<f64>,
    ids: &LstmIds,
    layout: &ParamLayout,
    data: &[f64],
    cache: &LstmCache,
    d_out: &Array2<f64>,
    grads: &mut [f64],
) -> Array2<f64> {
    let hidden = ids.hidden;
    let steps = x.nrows();
    let w_x = layout.view(data, ids.w_x);
    let w_h = layout.view(data, ids.w_h);

    let mut dw_x = Array2::zeros((x.ncols(), 4 * hidden));
    let mut dw_h = Array2::zeros((hidden, 4 * hidden));
    let mut dbias = Array2::zeros((1, 4 * hidden));
    let mut dx = Array2::zeros(x.dim());

    let mut dh_next: Array1<f64> = Array1::zeros(hidden);
    let mut dc_next: Array1<f64> = Array1::zeros(hidden);

    for t in (0..steps).rev() {
        let [i, f, g, o] = &cache.gates[t];
        let c = &cache.cells[t];
        let c_prev = if t == 0 {
            Array1::zeros(hidden)
        } else {
            cache.cells[t - 1].clone()
        };
        let h_prev = if t == 0 {
            Array1::zeros(hidden)
        } else {
            cache.hiddens[t - 1].clone()
        };

        let dh = &d_out.row(t).to_owned() + &dh_next;
        let tanh_c = c.mapv(f64::tanh);
        let d_o = &dh * &tanh_c;
        let dc = &dc_next + &(&dh * o * &tanh_c.mapv(|v| 1.0 - v * v));
        let d_i = &dc * g;
        let d_g = &dc * i;
        let d_f = &dc * &c_prev;
        dc_next = &dc * f;

        // Gate pre-activation gradients.
        let mut dpre = Array1::zeros(4 * hidden);
        dpre.slice_mut(s![0..hidden]).assign(&(&d_i * i * &i.mapv(|v| 1.0 - v)));
        dpre.slice_mut(s![hidden..2 * hidden])
            .assign(&(&d_f * f * &f.mapv(|v| 1.0 - v)));
        dpre.slice_mut(s![2 * hidden..3 * hidden])
            .assign(&(&d_g * &g.mapv(|v| 1.0 - v * v)));
        dpre.slice_mut(s![3 * hidden..4 * hidden])
            .assign(&(&d_o * o * &o.mapv(|v| 1.0 - v)));

        let x_t = x.row(t);
        for a in 0..x.ncols() {
            for b in 0..4 * hidden {
                dw_x[[a, b]] += x_t[a] * dpre[b];
            }
        }
        for a in 0..hidden {
            for b in 0..4 * hidden {
                dw_h[[a, b]] += h_prev[a] * dpre[b];
            }
        }
        for b in 0..4 * hidden {
            dbias[[0, b]] += dpre[b];
        }
        dx.row_mut(t).assign(&w_x.dot(&dpre));
        dh_next = w_h.dot(&dpre);
    }

    accumulate(layout, grads, ids.w_x, &dw_x);
    accumulate(layout, grads, ids.w_h, &dw_h);
    accumulate(layout, grads, ids.bias, &dbias);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let input = 3;
        let hidden = 4;
        let steps = 5;
        let mut layout = ParamLayout::new();
        let ids = LstmIds::register(&mut layout, "lstm", input, hidden);
        let params = layout.randomize_params(&mut rng, 0.4);
        let x = Array2::from_shape_simple_fn((steps, input), || rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((steps, hidden), || rng.random_range(-1.0..1.0));

        let loss = |p: &[f64]| -> f64 {
            let (h, _) = lstm_forward(&x, &ids, &layout, p);
            (&h - &target).mapv(|v| v * v).sum()
        };

        let (h, cache) = lstm_forward(&x, &ids, &layout, &params);
        let d_out = (&h - &target) * 2.0;
        let mut grads = vec![0.0; layout.total()];
        lstm_backward(&x, &ids, &layout, &params, &cache, &d_out, &mut grads);

        let coords: Vec<usize> = (0..layout.total()).step_by(3).collect();
        let numeric = finite_diff_gradient(loss, &params, &coords, 1e-5);
        let analytic: Vec<f64> = coords.iter().map(|&i| grads[i]).collect();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn lstm_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let mut layout = ParamLayout::new();
        let ids = LstmIds::register(&mut layout, "lstm", 2, 3);
        let params = layout.randomize_params(&mut rng, 0.5);
        let x0 = Array2::from_shape_simple_fn((4, 2), || rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));

        let loss = |x: &Array2<f64>| -> f64 {
            let (h, _) = lstm_forward(x, &ids, &layout, &params);
            (&h - &target).mapv(|v| v * v).sum()
        };
        let (h, cache) = lstm_forward(&x0, &ids, &layout, &params);
        let d_out = (&h - &target) * 2.0;
        let mut grads = vec![0.0; layout.total()];
        let dx = lstm_backward(&x0, &ids, &layout, &params, &cache, &d_out, &mut grads);

        for idx in [(0, 0), (1, 1), (3, 0)] {
            let fd = crate::nn::gradcheck::central_diff(
                |v| {
                    let mut x = x0.clone();
                    x[idx] = v;
                    loss(&x)
                },
                x0[idx],
                1e-6,
            );
            assert!((dx[idx] - fd).abs() < 1e-6, "dx{idx:?}: {} vs {fd}", dx[idx]);
        }
    }
}
