//! Network parameters, activations, forward evaluation and matrix norms.
//!
//! Layer `j` has shape `p^{j+1} × p^j` with `p^0 = d` and `p^{l+1} = m`. Networks carry no
//! biases and the last matrix is never followed by an activation:
//! `f_Θ(x) = Θˡ f[Θˡ⁻¹ ⋯ f[Θ⁰ x]]`. Splitting off the outer matrix gives the inner map
//! `ḡ(x) = f[Θˡ⁻¹ ⋯ f[Θ⁰ x]]` with `f_Θ(x) = Θˡ ḡ(x)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::FEASIBILITY_TOL;

/// Layer dimensions of a network with `l = widths.len()` hidden layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub d: usize,
    pub widths: Vec<usize>,
    pub m: usize,
}

impl Architecture {
    pub fn new(d: usize, widths: Vec<usize>, m: usize) -> Result<Self> {
        let arch = Architecture { d, widths, m };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(invalid("widths", "at least one hidden layer is required"));
        }
        if self.d == 0 || self.m == 0 || self.widths.contains(&0) {
            return Err(invalid("arch", "all dimensions must be at least 1"));
        }
        Ok(())
    }

    /// Number of hidden layers `l`.
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// `p^0, …, p^{l+1}`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.widths.len() + 2);
        dims.push(self.d);
        dims.extend_from_slice(&self.widths);
        dims.push(self.m);
        dims
    }

    /// `(rows, cols)` of every layer matrix, inner layers first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.dims().windows(2).map(|w| (w[1], w[0])).collect()
    }

    /// Maximal width `p̲ = max_{j<l} p^{j+1}`.
    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(0)
    }

    /// Total parameter count `p̄ = Σ_j p^{j+1} p^j`.
    pub fn total_params(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Parameter count of the inner layers only.
    pub fn inner_params(&self) -> usize {
        let shapes = self.layer_shapes();
        shapes[..shapes.len() - 1].iter().map(|(r, c)| r * c).sum()
    }
}

/// Elementwise activation shared by all hidden layers. Every kind satisfies `f(0) = 0`
/// and is 1-Lipschitz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyRelu(alpha) if !(alpha > 0.0 && alpha < 1.0) => Err(invalid(
                "activation",
                format!("leaky relu slope must lie in (0, 1), got {alpha}"),
            )),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::LeakyRelu(alpha) => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative, with the left branch taken at the kink (0 for ReLU).
    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::LeakyRelu(alpha) => {
                if z > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// `f(a·b) = a·f(b)` for all `a ≥ 0`.
    pub fn is_nonneg_homogeneous(&self) -> bool {
        !matches!(self, Activation::Tanh)
    }

    pub fn name(&self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::Tanh => "tanh".into(),
            Activation::LeakyRelu(a) => format!("leaky_relu({a})"),
            Activation::Identity => "identity".into(),
        }
    }
}

pub fn apply_activation(kind: Activation, v: ArrayView1<f64>) -> Array1<f64> {
    v.mapv(|z| kind.eval(z))
}

/// Matrix norms used throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixNorm {
    /// Sum of absolute entries.
    L1,
    /// Sum over columns of the column Euclidean norms.
    L21,
    /// Largest absolute entry.
    SupEntry,
    Frobenius,
    /// Largest singular value.
    Operator2,
}

pub fn matrix_norm(a: &ArrayView2<f64>, kind: MatrixNorm) -> f64 {
    match kind {
        MatrixNorm::L1 => a.iter().map(|v| v.abs()).sum(),
        MatrixNorm::L21 => column_norms(a).sum(),
        MatrixNorm::SupEntry => a.iter().fold(0.0, |acc, v| acc.max(v.abs())),
        MatrixNorm::Frobenius => a.iter().map(|v| v * v).sum::<f64>().sqrt(),
        MatrixNorm::Operator2 => {
            if a.is_empty() {
                return 0.0;
            }
            let m = nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
            m.singular_values().iter().fold(0.0, |acc: f64, v| acc.max(*v))
        }
    }
}

/// Euclidean norm of every column.
pub fn column_norms(a: &ArrayView2<f64>) -> Array1<f64> {
    a.map_axis(Axis(0), |col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Unit-ball constraint on each inner layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallConstraint {
    L1Ball,
    L21Ball,
}

impl BallConstraint {
    pub fn norm_kind(&self) -> MatrixNorm {
        match self {
            BallConstraint::L1Ball => MatrixNorm::L1,
            BallConstraint::L21Ball => MatrixNorm::L21,
        }
    }

    pub fn norm(&self, a: &ArrayView2<f64>) -> f64 {
        matrix_norm(a, self.norm_kind())
    }

    pub fn contains(&self, a: &ArrayView2<f64>, tol: f64) -> bool {
        self.norm(a) <= 1.0 + tol
    }
}

fn check_finite(layers: &[Array2<f64>], what: &'static str) -> Result<()> {
    if layers.iter().all(|l| l.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_chain(layers: &[Array2<f64>]) -> Result<()> {
    for (j, pair) in layers.windows(2).enumerate() {
        if pair[1].ncols() != pair[0].nrows() {
            return Err(Error::Dimension(format!(
                "layer {} has {} columns but layer {} has {} rows",
                j + 1,
                pair[1].ncols(),
                j,
                pair[0].nrows()
            )));
        }
    }
    Ok(())
}

/// The full parameter tuple `(Θ⁰, …, Θˡ)`, stored input layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStack {
    layers: Vec<Array2<f64>>,
    activation: Activation,
}

impl ParamStack {
    pub fn new(layers: Vec<Array2<f64>>, activation: Activation) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Dimension(
                "a network needs at least one inner and one outer layer".into(),
            ));
        }
        activation.validate()?;
        check_chain(&layers)?;
        check_finite(&layers, "parameter stack")?;
        Ok(ParamStack { layers, activation })
    }

    pub fn zeros(arch: &Architecture, activation: Activation) -> Self {
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(r, c)| Array2::zeros((r, c)))
            .collect();
        ParamStack { layers, activation }
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Array2<f64>> {
        self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outer().nrows()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            d: self.input_dim(),
            widths: self.layers[..self.depth()].iter().map(|l| l.nrows()).collect(),
            m: self.output_dim(),
        }
    }

    pub fn outer(&self) -> &Array2<f64> {
        &self.layers[self.layers.len() - 1]
    }

    pub fn inner_layers(&self) -> &[Array2<f64>] {
        &self.layers[..self.depth()]
    }

    /// The inner stack `Θ̄`, checked against `constraint`.
    pub fn inner(&self, constraint: BallConstraint) -> Result<InnerStack> {
        InnerStack::new(self.inner_layers().to_vec(), self.activation, constraint)
    }

    /// True if every inner layer lies in the unit ball of `constraint` within `tol`.
    pub fn inner_feasible(&self, constraint: BallConstraint, tol: f64) -> bool {
        self.inner_layers()
            .iter()
            .all(|l| constraint.contains(&l.view(), tol))
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has length {} but the network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let hidden = propagate_vec(self.inner_layers(), self.activation, x);
        Ok(self.outer().dot(&hidden))
    }

    /// Row-wise forward pass over an `n × d` input matrix, giving `n × m`.
    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "inputs have {} columns but the network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let trace = Trace::run(self.inner_layers(), self.activation, x);
        Ok(trace.output().dot(&self.outer().t()))
    }
}

/// Inner parameters `Θ̄ = (Θ̄⁰, …, Θ̄ˡ⁻¹)` with their ball constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerStack {
    layers: Vec<Array2<f64>>,
    activation: Activation,
    constraint: BallConstraint,
}

impl InnerStack {
    pub fn new(
        layers: Vec<Array2<f64>>,
        activation: Activation,
        constraint: BallConstraint,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("inner stack needs at least one layer".into()));
        }
        activation.validate()?;
        check_chain(&layers)?;
        check_finite(&layers, "inner stack")?;
        for (j, layer) in layers.iter().enumerate() {
            let norm = constraint.norm(&layer.view());
            if norm > 1.0 + FEASIBILITY_TOL {
                return Err(Error::ConstraintViolation(format!(
                    "inner layer {j} has {constraint:?} norm {norm}"
                )));
            }
        }
        Ok(InnerStack {
            layers,
            activation,
            constraint,
        })
    }

    pub(crate) fn from_parts_unchecked(
        layers: Vec<Array2<f64>>,
        activation: Activation,
        constraint: BallConstraint,
    ) -> Self {
        InnerStack {
            layers,
            activation,
            constraint,
        }
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn constraint(&self) -> BallConstraint {
        self.constraint
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].nrows()
    }

    /// Membership in the unit ball of `constraint` for every layer.
    pub fn feasible_for(&self, constraint: BallConstraint, tol: f64) -> bool {
        self.layers.iter().all(|l| constraint.contains(&l.view(), tol))
    }

    /// `ḡ_Θ̄(x) = f[Θ̄ˡ⁻¹ ⋯ f[Θ̄⁰ x]]`.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has length {} but the inner stack expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(propagate_vec(&self.layers, self.activation, x))
    }

    /// Row-wise `ḡ` over an `n × d` matrix, giving `n × p^l`.
    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "inputs have {} columns but the inner stack expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(Trace::run(&self.layers, self.activation, x).into_output())
    }
}

pub fn inner_forward(inner: &InnerStack, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    inner.forward(x)
}

fn propagate_vec(layers: &[Array2<f64>], act: Activation, x: ArrayView1<f64>) -> Array1<f64> {
    let mut h = x.to_owned();
    for layer in layers {
        h = layer.dot(&h).mapv_into(|z| act.eval(z));
    }
    h
}

/// `‖Θ̄ − Γ̄‖_F` over the whole stack.
pub fn stack_frobenius(a: &InnerStack, b: &InnerStack) -> Result<f64> {
    if a.layers.len() != b.layers.len()
        || a.layers.iter().zip(&b.layers).any(|(x, y)| x.dim() != y.dim())
    {
        return Err(Error::Dimension("inner stacks have different architectures".into()));
    }
    let sq: f64 = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| {
            let mut s = 0.0;
            Zip::from(x).and(y).for_each(|p, q| s += (p - q) * (p - q));
            s
        })
        .sum();
    Ok(sq.sqrt())
}

/// Batched activations of an inner stack, kept for backpropagation.
///
/// `hidden[0]` is the input, `pre[j] = hidden[j] Θ̄ʲᵀ` and `hidden[j+1] = f(pre[j])`.
pub(crate) struct Trace {
    pub hidden: Vec<Array2<f64>>,
    pub pre: Vec<Array2<f64>>,
}

impl Trace {
    pub fn run(layers: &[Array2<f64>], act: Activation, x: &ArrayView2<f64>) -> Self {
        let mut hidden = Vec::with_capacity(layers.len() + 1);
        let mut pre = Vec::with_capacity(layers.len());
        hidden.push(x.to_owned());
        for layer in layers {
            let z = hidden[hidden.len() - 1].dot(&layer.t());
            hidden.push(z.mapv(|v| act.eval(v)));
            pre.push(z);
        }
        Trace { hidden, pre }
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.hidden[self.hidden.len() - 1]
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.hidden.pop().expect("trace always holds the input")
    }

    /// Gradients of a scalar with respect to every inner layer, given its gradient
    /// `upstream` with respect to the trace output.
    pub fn backprop(
        &self,
        layers: &[Array2<f64>],
        act: Activation,
        upstream: Array2<f64>,
    ) -> Vec<Array2<f64>> {
        let mut grads = vec![Array2::zeros((0, 0)); layers.len()];
        let mut delta = upstream;
        for j in (0..layers.len()).rev() {
            Zip::from(&mut delta)
                .and(&self.pre[j])
                .for_each(|d, &z| *d *= act.derivative(z));
            grads[j] = delta.t().dot(&self.hidden[j]);
            if j > 0 {
                delta = delta.dot(&layers[j]);
            }
        }
        grads
    }
}
