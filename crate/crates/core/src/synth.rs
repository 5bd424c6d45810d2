//! Synthetic data from the regression model `y_i = f_*(x_i) + u_i`.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::net::{Activation, Architecture, BallConstraint, ParamStack};
use crate::seed;

/// Centered subgaussian noise laws. `Zero` is the explicit noiseless model; a Gaussian with
/// `sigma = 0` is rejected instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    Gaussian { sigma: f64 },
    Rademacher { scale: f64 },
    Uniform { half_width: f64 },
    Zero,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Gaussian { sigma: 0.5 }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let (name, value) = match *self {
            NoiseModel::Gaussian { sigma } => ("sigma", sigma),
            NoiseModel::Rademacher { scale } => ("scale", scale),
            NoiseModel::Uniform { half_width } => ("half_width", half_width),
            NoiseModel::Zero => return Ok(()),
        };
        if value > 0.0 && value.is_finite() {
            Ok(())
        } else {
            Err(invalid(name, format!("noise parameter must be positive, got {value}")))
        }
    }

    /// Per-entry variance.
    pub fn variance(&self) -> f64 {
        match *self {
            NoiseModel::Gaussian { sigma } => sigma * sigma,
            NoiseModel::Rademacher { scale } => scale * scale,
            NoiseModel::Uniform { half_width } => half_width * half_width / 3.0,
            NoiseModel::Zero => 0.0,
        }
    }
}

/// Input distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDist {
    /// Standard normal entries.
    Gaussian,
    /// Uniform entries on `[-1, 1]`.
    UniformCube,
    /// One-hot rows with a uniformly chosen active coordinate.
    SparseSpike,
}

/// Inputs, targets and (for synthetic data) the noise and the generating network.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub u: Option<Array2<f64>>,
    pub teacher: Option<ParamStack>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Dimension(format!(
                "{} input rows but {} target rows",
                x.nrows(),
                y.nrows()
            )));
        }
        Ok(Dataset {
            x,
            y,
            u: None,
            teacher: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    /// Noise-free targets `f_*(x_i)`, recovered as `y_i − u_i`.
    pub fn signal(&self) -> Option<Array2<f64>> {
        self.u.as_ref().map(|u| &self.y - u)
    }

    /// Writes `inputs` (columns `x0..`) and `targets` (columns `y0..`) CSV files.
    pub fn write_csv(&self, inputs: &Path, targets: &Path) -> Result<()> {
        write_matrix_csv(&self.x.view(), "x", inputs)?;
        write_matrix_csv(&self.y.view(), "y", targets)
    }

    pub fn read_csv(inputs: &Path, targets: &Path) -> Result<Self> {
        let x = read_matrix_csv(inputs, "x")?;
        let y = read_matrix_csv(targets, "y")?;
        Dataset::new(x, y)
    }
}

fn write_matrix_csv(a: &ArrayView2<f64>, prefix: &str, path: &Path) -> Result<()> {
    let wrap = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record((0..a.ncols()).map(|k| format!("{prefix}{k}")))
        .map_err(wrap)?;
    for row in a.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(wrap)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_matrix_csv(path: &Path, prefix: &str) -> Result<Array2<f64>> {
    let wrap = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(wrap)?;
    let headers = r.headers().map_err(wrap)?.clone();
    for (k, h) in headers.iter().enumerate() {
        if h != format!("{prefix}{k}") {
            return Err(Error::Config(format!(
                "{}: column {k} is named `{h}`, expected `{prefix}{k}`",
                path.display()
            )));
        }
    }
    let cols = headers.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in r.records() {
        let record = record.map_err(wrap)?;
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Config(format!("{}: `{field}` is not a number", path.display()))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Dimension(format!("{}: {e}", path.display())))
}

fn keep_count(fraction: f64, total: usize, what: &str) -> Result<usize> {
    let keep = (fraction * total as f64).round() as usize;
    if keep == 0 {
        return Err(invalid(
            "sparsity",
            format!("{fraction} of {total} {what} leaves nothing nonzero"),
        ));
    }
    Ok(keep.min(total))
}

/// Random matrix with `keep` nonzero entries (or columns), magnitudes in `[0.25, 1]`.
fn sparse_matrix<R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    sparsity: f64,
    by_column: bool,
) -> Result<Array2<f64>> {
    let mut a = Array2::zeros((rows, cols));
    let entry = |rng: &mut R| {
        let mag = rng.random_range(0.25..=1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    };
    if by_column {
        let keep = keep_count(sparsity, cols, "columns")?;
        for k in sample(rng, cols, keep).into_iter() {
            for i in 0..rows {
                a[[i, k]] = entry(rng);
            }
        }
    } else {
        let keep = keep_count(sparsity, rows * cols, "entries")?;
        for idx in sample(rng, rows * cols, keep).into_iter() {
            a[[idx / cols, idx % cols]] = entry(rng);
        }
    }
    Ok(a)
}

/// Sparse teacher network that is feasible for `constraint`.
///
/// Inner layers keep a `sparsity` fraction of their entries (`L1Ball`) or columns
/// (`L21Ball`) and are rescaled onto the unit sphere of the constraint norm; the outer
/// layer is sparsified the same way and rescaled to `outer_norm`.
pub fn gen_teacher(
    arch: &Architecture,
    activation: Activation,
    constraint: BallConstraint,
    sparsity: f64,
    outer_norm: f64,
    seed: u64,
) -> Result<ParamStack> {
    arch.validate()?;
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(invalid("sparsity", format!("must lie in (0, 1], got {sparsity}")));
    }
    if !(outer_norm > 0.0 && outer_norm.is_finite()) {
        return Err(invalid("outer_norm", format!("must be positive, got {outer_norm}")));
    }
    let mut rng = seed::rng_for(seed, 0x7eac);
    let by_column = constraint == BallConstraint::L21Ball;
    let shapes = arch.layer_shapes();
    let mut layers = Vec::with_capacity(shapes.len());
    for (j, &(rows, cols)) in shapes.iter().enumerate() {
        let mut a = sparse_matrix(&mut rng, rows, cols, sparsity, by_column)?;
        let target = if j + 1 == shapes.len() { outer_norm } else { 1.0 };
        let norm = constraint.norm(&a.view());
        a.mapv_inplace(|v| v * target / norm);
        layers.push(a);
    }
    ParamStack::new(layers, activation)
}

pub fn gen_inputs(n: usize, d: usize, dist: InputDist, seed: u64) -> Result<Array2<f64>> {
    if n == 0 || d == 0 {
        return Err(invalid("n", "inputs need n ≥ 1 and d ≥ 1"));
    }
    let mut rng = seed::rng_for(seed, 0x1a9);
    Ok(match dist {
        InputDist::Gaussian => Array2::from_shape_simple_fn((n, d), || {
            StandardNormal.sample(&mut rng)
        }),
        InputDist::UniformCube => {
            Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..=1.0))
        }
        InputDist::SparseSpike => {
            let mut x = Array2::zeros((n, d));
            for mut row in x.rows_mut() {
                row[rng.random_range(0..d)] = 1.0;
            }
            x
        }
    })
}

pub fn gen_noise(n: usize, m: usize, model: NoiseModel, seed: u64) -> Result<Array2<f64>> {
    model.validate()?;
    let mut rng = seed::rng_for(seed, 0x0153);
    Ok(match model {
        NoiseModel::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| invalid("sigma", e.to_string()))?;
            Array2::from_shape_simple_fn((n, m), || normal.sample(&mut rng))
        }
        NoiseModel::Rademacher { scale } => Array2::from_shape_simple_fn((n, m), || {
            if rng.random_bool(0.5) {
                scale
            } else {
                -scale
            }
        }),
        NoiseModel::Uniform { half_width } => Array2::from_shape_simple_fn((n, m), || {
            rng.random_range(-half_width..=half_width)
        }),
        NoiseModel::Zero => Array2::zeros((n, m)),
    })
}

/// Root-mean squared ℓ∞ and ℓ2 norms of the input rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputStats {
    pub v_inf: f64,
    pub v_2: f64,
}

pub fn input_stats(x: &ArrayView2<f64>) -> Result<InputStats> {
    let n = x.nrows();
    if n == 0 {
        return Err(invalid("inputs", "input statistics need at least one sample"));
    }
    let sup_sq: f64 = x
        .axis_iter(Axis(0))
        .map(|r| {
            let s = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            s * s
        })
        .sum();
    let l2_sq: f64 = x.iter().map(|v| v * v).sum();
    Ok(InputStats {
        v_inf: (sup_sq / n as f64).sqrt(),
        v_2: (l2_sq / n as f64).sqrt(),
    })
}

/// `y_i = f_teacher(x_i) + u_i`.
pub fn assemble_dataset(teacher: &ParamStack, x: Array2<f64>, u: Array2<f64>) -> Result<Dataset> {
    if u.nrows() != x.nrows() || u.ncols() != teacher.output_dim() {
        return Err(Error::Dimension(format!(
            "noise is {}×{} but {} samples with {} outputs were expected",
            u.nrows(),
            u.ncols(),
            x.nrows(),
            teacher.output_dim()
        )));
    }
    let signal = teacher.forward_batch(&x.view())?;
    Ok(Dataset {
        y: signal + &u,
        x,
        u: Some(u),
        teacher: Some(teacher.clone()),
    })
}

/// One synthetic draw: inputs, noise and targets under a fixed teacher.
pub fn sample_dataset(
    teacher: &ParamStack,
    n: usize,
    dist: InputDist,
    noise: NoiseModel,
    seed: u64,
) -> Result<Dataset> {
    let x = gen_inputs(n, teacher.input_dim(), dist, seed)?;
    let u = gen_noise(n, teacher.output_dim(), noise, seed)?;
    assemble_dataset(teacher, x, u)
}
