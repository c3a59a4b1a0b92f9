//! Fully connected networks on the gradient engine.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::linalg::{CMatrix, C64};
use crate::rng::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            _ => Err(invalid(format!("unknown activation code {code}"))),
        }
    }
}

/// Affine map `x W + b` followed by an activation. `weight` is `in x out`,
/// `bias` is `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
    pub activation: Activation,
}

/// Feed-forward network acting on the rows of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.nrows() != 1 || l.bias.ncols() != l.weight.ncols() {
                return Err(invalid(format!("layer {i}: bias shape {:?} does not match weight {:?}", l.bias.dim(), l.weight.dim())));
            }
            if i > 0 && layers[i - 1].weight.ncols() != l.weight.nrows() {
                return Err(invalid(format!("layer {i}: input width {} does not chain", l.weight.nrows())));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// He-initialized network with the given widths: ReLU on hidden layers,
    /// identity on the output layer, zero biases.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(invalid(format!("invalid layer widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = (2.0 / w[0] as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || std * standard_normal(rng)),
                    bias: Array2::zeros((1, w[1])),
                    activation: if i == last { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.ncols()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.weight.ncols())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter arrays in the order weight, bias per layer.
    pub fn arrays(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Records the forward pass; `params` holds the leaves of [`Self::arrays`].
    pub fn forward(&self, g: &mut Graph, x: Var, params: &[Var]) -> Var {
        let mut h = x;
        for (l, p) in self.layers.iter().zip(params.chunks(2)) {
            let z = g.matmul(h, p[0]);
            h = g.add_row(z, p[1]);
            if l.activation == Activation::Relu {
                h = g.relu(h);
            }
        }
        h
    }

    /// Forward pass without recording.
    pub fn evaluate(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for l in &self.layers {
            h = h.dot(&l.weight) + &l.bias;
            if l.activation == Activation::Relu {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }
}

/// Real features of complex columns: row `t` holds
/// `[Re x_0t, Im x_0t, Re x_1t, Im x_1t, ...]`.
pub fn complex_to_rows(x: &CMatrix) -> Array2<f64> {
    Array2::from_shape_fn((x.ncols(), 2 * x.nrows()), |(t, k)| {
        let z = x[(k / 2, t)];
        if k % 2 == 0 {
            z.re
        } else {
            z.im
        }
    })
}

/// Inverse of [`complex_to_rows`].
pub fn rows_to_complex(x: &Array2<f64>) -> CMatrix {
    CMatrix::from_fn(x.ncols() / 2, x.nrows(), |i, t| C64::new(x[(t, 2 * i)], x[(t, 2 * i + 1)]))
}

/// Per-antenna features of pilot-major observations (`NP x T`): row
/// `t N + n` holds the real and imaginary parts of the `P` pilot
/// observations of antenna `n`.
pub fn pilot_features(r: &CMatrix, antennas: usize) -> Array2<f64> {
    let p = r.nrows() / antennas;
    Array2::from_shape_fn((r.ncols() * antennas, 2 * p), |(row, k)| {
        let (t, n) = (row / antennas, row % antennas);
        let z = r[((k / 2) * antennas + n, t)];
        if k % 2 == 0 {
            z.re
        } else {
            z.im
        }
    })
}
