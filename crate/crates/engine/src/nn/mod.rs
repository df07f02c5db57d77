//! Small neural-network toolkit: a flat parameter vector with a
//! named-shape registry, hand-written forward/backward passes for every
//! layer, and an Adam optimizer. Everything is `f64` on the CPU so
//! analytic gradients can be checked against central finite differences.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod lstm;

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

/// How a parameter tensor is filled at model construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    Zeros,
    Ones,
    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    /// Constant fill, used e.g. for LSTM forget-gate bias.
    Constant(f64),
}

/// One named parameter tensor inside the flat vector.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub init: InitKind,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Registry mapping names to (offset, shape) inside one flat vector.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: InitKind,
    ) -> ParamId {
        let spec = ParamSpec {
            name: name.into(),
            rows,
            cols,
            offset: self.total,
            init,
        };
        self.total += spec.len();
        self.specs.push(spec);
        ParamId(self.specs.len() - 1)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn view<'a>(&self, data: &'a [f64], id: ParamId) -> ArrayView2<'a, f64> {
        let s = &self.specs[id.0];
        ArrayView2::from_shape((s.rows, s.cols), &data[s.offset..s.offset + s.len()])
            .expect("registered shape matches slice")
    }

    pub fn view_mut<'a>(&self, data: &'a mut [f64], id: ParamId) -> ArrayViewMut2<'a, f64> {
        let s = &self.specs[id.0];
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut data[s.offset..s.offset + s.len()])
            .expect("registered shape matches slice")
    }

    /// Allocate and fill a parameter vector according to each entry's init.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut data = vec![0.0; self.total];
        for spec in &self.specs {
            let slot = &mut data[spec.offset..spec.offset + spec.len()];
            match spec.init {
                InitKind::Zeros => {}
                InitKind::Ones => slot.fill(1.0),
                InitKind::Constant(v) => slot.fill(v),
                InitKind::XavierUniform => {
                    let a = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = rng.random_range(-a..a);
                    }
                }
            }
        }
        data
    }

    /// Fill every entry with small uniform noise. Test helper: gradient
    /// checks need zero-initialized heads moved off their saddle point.
    pub fn randomize_params<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Vec<f64> {
        let mut data = vec![0.0; self.total];
        for v in data.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
        data
    }
}
