//! 1-D convolution over a short frame sequence (same padding), used by the
//! emotion-style encoder. Implemented as im2col + matmul so backward is a
//! pair of matrix products.

use ndarray::{Array2, ArrayView2};

use super::layers::accumulate;
use super::{InitKind, ParamId, ParamLayout};

#[derive(Debug, Clone, Copy)]
pub struct Conv1dIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1dIds {
    pub fn register(
        layout: &mut ParamLayout,
        prefix: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let weight = layout.register(
            format!("{prefix}.weight"),
            kernel * in_channels,
            out_channels,
            InitKind::XavierUniform,
        );
        let bias = layout.register(format!("{prefix}.bias"), 1, out_channels, InitKind::Zeros);
        Conv1dIds {
            weight,
            bias,
            kernel,
            in_channels,
            out_channels,
        }
    }
}

/// Gather `(steps, kernel * in_channels)` patches with zero padding so the
/// output length equals the input length (kernel must be odd).
fn im2col(x: &Array2<f64>, kernel: usize) -> Array2<f64> {
    let steps = x.nrows();
    let channels = x.ncols();
    let half = kernel / 2;
    let mut cols = Array2::zeros((steps, kernel * channels));
    for t in 0..steps {
        for k in 0..kernel {
            let src = t as isize + k as isize - half as isize;
            if src < 0 || src >= steps as isize {
                continue;
            }
            for c in 0..channels {
                cols[[t, k * channels + c]] = x[[src as usize, c]];
            }
        }
    }
    cols
}

pub struct Conv1dCache {
    pub cols: Array2<f64>,
}

pub fn conv1d_forward(
    x: &Array2<f64>,
    ids: &Conv1dIds,
    layout: &ParamLayout,
    data: &[f64],
) -> (Array2<f64>, Conv1dCache) {
    debug_assert_eq!(ids.kernel % 2, 1, "same padding needs an odd kernel");
    debug_assert_eq!(x.ncols(), ids.in_channels);
    let cols = im2col(x, ids.kernel);
    let w: ArrayView2<f64> = layout.view(data, ids.weight);
    let b = layout.view(data, ids.bias);
    let y = cols.dot(&w) + &b;
    (y, Conv1dCache { cols })
}

/// Accumulates weight/bias gradients and returns `dL/dx`.
pub fn conv1d_backward(
    x: &Array2<f64>,
    ids: &Conv1dIds,
    layout: &ParamLayout,
    data: &[f64],
    cache: &Conv1dCache,
    dy: &Array2<f64>,
    grads: &mut [f64],
) -> Array2<f64> {
    let w = layout.view(data, ids.weight);
    let dw = cache.cols.t().dot(dy);
    let db = dy.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
    accumulate(layout, grads, ids.weight, &dw);
    accumulate(layout, grads, ids.bias, &db);

    // Scatter dcols back through the padding pattern.
    let dcols = dy.dot(&w.t());
    let steps = x.nrows();
    let channels = ids.in_channels;
    let half = ids.kernel / 2;
    let mut dx = Array2::zeros(x.dim());
    for t in 0..steps {
        for k in 0..ids.kernel {
            let src = t as isize + k as isize - half as isize;
            if src < 0 || src >= steps as isize {
                continue;
            }
            for c in 0..channels {
                dx[[src as usize, c]] += dcols[[t, k * channels + c]];
            }
        }
    }
    dx
}
