//! Effective noise: the supremum over feasible inner stacks of
//! `2·‖Σ_i u_i ḡ(x_i)ᵀ‖_∞` (connection sparsity, ℓ1 ball) or `√m` times that quantity
//! (node sparsity, ℓ2,1 ball).
//!
//! The supremum is approached from below by multistart projected gradient ascent, so every
//! estimate is a lower bound. A grid search over tiny architectures serves as an
//! independent check.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::project_ball;
use crate::net::{Activation, Architecture, BallConstraint, InnerStack, Trace};
use crate::{seed, FEASIBILITY_TOL};

/// Which oracle tuning parameter is meant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Connection sparsity.
    Con,
    /// Node sparsity.
    Node,
}

impl NoiseKind {
    pub fn constraint(&self) -> BallConstraint {
        match self {
            NoiseKind::Con => BallConstraint::L1Ball,
            NoiseKind::Node => BallConstraint::L21Ball,
        }
    }

    pub fn from_constraint(c: BallConstraint) -> Self {
        match c {
            BallConstraint::L1Ball => NoiseKind::Con,
            BallConstraint::L21Ball => NoiseKind::Node,
        }
    }

    /// Multiplier in front of the sup-entry norm.
    pub fn factor(&self, m: usize) -> f64 {
        match self {
            NoiseKind::Con => 2.0,
            NoiseKind::Node => 2.0 * (m as f64).sqrt(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Con => "con",
            NoiseKind::Node => "node",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveNoiseEstimate {
    /// Best score found; a lower bound on the supremum.
    pub value: f64,
    pub argmax_inner: InnerStack,
    pub n_starts: usize,
    pub scores_per_start: Vec<f64>,
}

/// Multistart settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseSearch {
    pub n_starts: usize,
    pub ascent_iters: usize,
    pub seed: u64,
}

impl Default for NoiseSearch {
    fn default() -> Self {
        NoiseSearch {
            n_starts: 64,
            ascent_iters: 100,
            seed: 0,
        }
    }
}

fn check_data(x: &ArrayView2<f64>, u: &ArrayView2<f64>, d: usize) -> Result<()> {
    if x.nrows() != u.nrows() {
        return Err(Error::Dimension(format!(
            "{} inputs but {} noise rows",
            x.nrows(),
            u.nrows()
        )));
    }
    if x.ncols() != d {
        return Err(Error::Dimension(format!(
            "inputs have {} columns, expected {d}",
            x.ncols()
        )));
    }
    Ok(())
}

/// Position and sign of the largest-magnitude entry; ties go to the first index.
fn sup_entry(a: &Array2<f64>) -> (f64, (usize, usize), f64) {
    let mut best = (0.0, (0, 0), 1.0);
    for ((i, j), &v) in a.indexed_iter() {
        if v.abs() > best.0 {
            best = (v.abs(), (i, j), v.signum());
        }
    }
    best
}

struct Scored {
    score: f64,
    trace: Trace,
    correlation: Array2<f64>,
}

fn score_layers(
    layers: &[Array2<f64>],
    act: Activation,
    x: &ArrayView2<f64>,
    u: &ArrayView2<f64>,
    factor: f64,
) -> Scored {
    let trace = Trace::run(layers, act, x);
    let correlation = u.t().dot(trace.output());
    let (sup, _, _) = sup_entry(&correlation);
    Scored {
        score: factor * sup,
        trace,
        correlation,
    }
}

/// `2·‖Σ_i u_i ḡ(x_i)ᵀ‖_∞`, times `√m` for node sparsity. `u` is `n × m`.
pub fn inner_score(
    inner: &InnerStack,
    x: &ArrayView2<f64>,
    u: &ArrayView2<f64>,
    kind: NoiseKind,
) -> Result<f64> {
    check_data(x, u, inner.input_dim())?;
    if !inner.feasible_for(kind.constraint(), FEASIBILITY_TOL) {
        return Err(Error::ConstraintViolation(format!(
            "inner stack is outside the {:?} unit ball",
            kind.constraint()
        )));
    }
    let g = inner.forward_batch(x)?;
    let (sup, _, _) = sup_entry(&u.t().dot(&g));
    Ok(kind.factor(u.ncols()) * sup)
}

pub(crate) fn random_start<R: Rng>(
    arch: &Architecture,
    constraint: BallConstraint,
    rng: &mut R,
) -> Result<Vec<Array2<f64>>> {
    let shapes = arch.layer_shapes();
    let mut layers = Vec::with_capacity(shapes.len() - 1);
    for &(rows, cols) in &shapes[..shapes.len() - 1] {
        let keep: f64 = rng.random_range(0.2..=1.0);
        let mut a = Array2::from_shape_simple_fn((rows, cols), || {
            if rng.random_bool(keep) {
                rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        });
        if a.iter().all(|v| *v == 0.0) {
            let k = rng.random_range(0..rows * cols);
            a[[k / cols, k % cols]] = 1.0;
        }
        let radius: f64 = if rng.random_bool(0.25) {
            rng.random_range(0.1..1.0)
        } else {
            1.0
        };
        let norm = constraint.norm(&a.view());
        a.mapv_inplace(|v| v * radius / norm);
        layers.push(project_ball(&a.view(), constraint, 1.0)?.matrix);
    }
    Ok(layers)
}

/// Projected gradient ascent on the score, returning the final layers and score.
fn ascend(
    mut layers: Vec<Array2<f64>>,
    act: Activation,
    constraint: BallConstraint,
    x: &ArrayView2<f64>,
    u: &ArrayView2<f64>,
    factor: f64,
    iters: usize,
) -> Result<(Vec<Array2<f64>>, f64)> {
    let mut cur = score_layers(&layers, act, x, u, factor);
    let mut step = 0.5;
    for _ in 0..iters {
        let (sup, (a, b), sign) = sup_entry(&cur.correlation);
        if sup == 0.0 {
            break;
        }
        // d(sign·M_ab)/dḡ_ib = sign·u_ia
        let n = x.nrows();
        let mut upstream = Array2::zeros((n, cur.trace.output().ncols()));
        for i in 0..n {
            upstream[[i, b]] = sign * factor * u[[i, a]];
        }
        let grads = cur.trace.backprop(&layers, act, upstream);
        let gnorm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if gnorm == 0.0 {
            break;
        }
        let mut improved = false;
        while step >= 1e-7 {
            let cand: Vec<Array2<f64>> = layers
                .iter()
                .zip(&grads)
                .map(|(l, g)| {
                    let moved = l + &(g * (step / gnorm));
                    project_ball(&moved.view(), constraint, 1.0).map(|p| p.matrix)
                })
                .collect::<Result<_>>()?;
            let scored = score_layers(&cand, act, x, u, factor);
            if scored.score > cur.score {
                layers = cand;
                cur = scored;
                improved = true;
                step = (step * 2.0).min(2.0);
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok((layers, cur.score))
}

/// Multistart estimate of the effective noise.
pub fn effective_noise(
    x: &ArrayView2<f64>,
    u: &ArrayView2<f64>,
    arch: &Architecture,
    activation: Activation,
    kind: NoiseKind,
    search: &NoiseSearch,
) -> Result<EffectiveNoiseEstimate> {
    effective_noise_from(x, u, arch, activation, kind, search, &[])
}

/// As [`effective_noise`], additionally refining from each feasible stack in `probes`.
///
/// Random start `k` depends only on `(search.seed, k)`, so increasing `n_starts` never
/// lowers the estimate.
pub fn effective_noise_from(
    x: &ArrayView2<f64>,
    u: &ArrayView2<f64>,
    arch: &Architecture,
    activation: Activation,
    kind: NoiseKind,
    search: &NoiseSearch,
    probes: &[InnerStack],
) -> Result<EffectiveNoiseEstimate> {
    arch.validate()?;
    activation.validate()?;
    if search.n_starts == 0 {
        return Err(invalid("n_starts", "must be at least 1"));
    }
    check_data(x, u, arch.d)?;
    if u.ncols() != arch.m {
        return Err(Error::Dimension(format!(
            "noise has {} columns, expected m = {}",
            u.ncols(),
            arch.m
        )));
    }
    let constraint = kind.constraint();
    let factor = kind.factor(arch.m);
    for p in probes {
        if !p.feasible_for(constraint, FEASIBILITY_TOL) {
            return Err(Error::ConstraintViolation(
                "probe lies outside the constraint ball".into(),
            ));
        }
    }

    let random: Vec<(Vec<Array2<f64>>, f64)> = (0..search.n_starts)
        .into_par_iter()
        .map(|k| {
            let mut rng = seed::rng_for(search.seed, k as u64);
            let start = random_start(arch, constraint, &mut rng)?;
            ascend(start, activation, constraint, x, u, factor, search.ascent_iters)
        })
        .collect::<Result<_>>()?;
    let probed: Vec<(Vec<Array2<f64>>, f64)> = probes
        .par_iter()
        .map(|p| {
            ascend(
                p.layers().to_vec(),
                activation,
                constraint,
                x,
                u,
                factor,
                search.ascent_iters,
            )
        })
        .collect::<Result<_>>()?;

    let scores_per_start: Vec<f64> = random.iter().chain(&probed).map(|(_, s)| *s).collect();
    let (best_idx, value) = scores_per_start
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    let best_layers = random
        .into_iter()
        .chain(probed)
        .nth(best_idx)
        .map(|(l, _)| l)
        .expect("at least one start");
    Ok(EffectiveNoiseEstimate {
        value: value.max(0.0),
        argmax_inner: InnerStack::from_parts_unchecked(best_layers, activation, constraint),
        n_starts: search.n_starts + probes.len(),
        scores_per_start,
    })
}

/// Largest inner-parameter count the grid search accepts.
pub const BRUTE_FORCE_MAX_PARAMS: usize = 4;
/// Largest number of grid points the grid search evaluates.
pub const BRUTE_FORCE_MAX_POINTS: usize = 400_000_000;

/// Feasible grid points of one layer's unit ball, flattened row-major.
fn layer_grid(rows: usize, cols: usize, constraint: BallConstraint, step: f64) -> Vec<Vec<f64>> {
    let k = (1.0 / step).floor() as i64;
    let size = rows * cols;
    let mut out = Vec::new();
    let mut idx = vec![-k; size];
    loop {
        let point: Vec<f64> = idx.iter().map(|&i| i as f64 * step).collect();
        let norm = match constraint {
            BallConstraint::L1Ball => point.iter().map(|v| v.abs()).sum::<f64>(),
            BallConstraint::L21Ball => (0..cols)
                .map(|c| (0..rows).map(|r| point[r * cols + c].powi(2)).sum::<f64>().sqrt())
                .sum(),
        };
        if norm <= 1.0 + 1e-12 {
            out.push(point);
        }
        let mut c = 0;
        loop {
            if c == size {
                return out;
            }
            idx[c] += 1;
            if idx[c] <= k {
                break;
            }
            idx[c] = -k;
            c += 1;
        }
    }
}

/// Exhaustive grid search over the feasible ball of a tiny architecture.
///
/// Refuses architectures with more than [`BRUTE_FORCE_MAX_PARAMS`] inner parameters. The
/// network is evaluated with plain scalar loops, independently of [`Trace`].
pub fn brute_force_effective_noise(
    x: &ArrayView2<f64>,
    u: &ArrayView2<f64>,
    arch: &Architecture,
    activation: Activation,
    kind: NoiseKind,
    grid_step: f64,
) -> Result<f64> {
    arch.validate()?;
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(invalid("grid_step", format!("must lie in (0, 1], got {grid_step}")));
    }
    let params = arch.inner_params();
    if params > BRUTE_FORCE_MAX_PARAMS {
        return Err(Error::Refused(format!(
            "{params} inner parameters exceed the grid-search limit of {BRUTE_FORCE_MAX_PARAMS}"
        )));
    }
    check_data(x, u, arch.d)?;
    let constraint = kind.constraint();
    let shapes = arch.layer_shapes();
    let inner_shapes = &shapes[..shapes.len() - 1];
    let grids: Vec<Vec<Vec<f64>>> = inner_shapes
        .iter()
        .map(|&(r, c)| layer_grid(r, c, constraint, grid_step))
        .collect();
    let total = grids
        .iter()
        .try_fold(1usize, |acc, g| acc.checked_mul(g.len()))
        .unwrap_or(usize::MAX);
    if total > BRUTE_FORCE_MAX_POINTS {
        return Err(Error::Refused(format!(
            "{total} grid points exceed the limit of {BRUTE_FORCE_MAX_POINTS}"
        )));
    }

    let m = u.ncols();
    let width = inner_shapes[inner_shapes.len() - 1].0;
    let xs: Vec<Vec<f64>> = x.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let factor = kind.factor(m);

    let max_width = inner_shapes.iter().map(|s| s.0.max(s.1)).max().unwrap_or(1);
    let (rows0, cols0) = inner_shapes[0];
    let n = xs.len();

    let sizes: Vec<usize> = grids.iter().map(|g| g.len()).collect();
    let best = (0..sizes[0])
        .into_par_iter()
        .map(|first| {
            // First-layer outputs depend only on `first`; later layers are enumerated below.
            let w0 = &grids[0][first];
            let mut h0 = vec![0.0; n * rows0];
            for (i, xi) in xs.iter().enumerate() {
                for r in 0..rows0 {
                    let z: f64 = (0..cols0).map(|c| w0[r * cols0 + c] * xi[c]).sum();
                    h0[i * rows0 + r] = activation.eval(z);
                }
            }
            let mut choice = vec![0usize; sizes.len()];
            choice[0] = first;
            let mut h = Vec::with_capacity(max_width);
            let mut next = Vec::with_capacity(max_width);
            let mut corr = vec![0.0; m * width];
            let mut best = 0.0f64;
            loop {
                corr.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    h.clear();
                    h.extend_from_slice(&h0[i * rows0..(i + 1) * rows0]);
                    for (layer, &(rows, cols)) in inner_shapes.iter().enumerate().skip(1) {
                        let w = &grids[layer][choice[layer]];
                        next.clear();
                        for r in 0..rows {
                            let mut z = 0.0;
                            for c in 0..cols {
                                z += w[r * cols + c] * h[c];
                            }
                            next.push(activation.eval(z));
                        }
                        std::mem::swap(&mut h, &mut next);
                    }
                    for a in 0..m {
                        let ua = u[[i, a]];
                        for b in 0..width {
                            corr[a * width + b] += ua * h[b];
                        }
                    }
                }
                best = best.max(factor * corr.iter().fold(0.0f64, |acc, v| acc.max(v.abs())));
                let mut c = 1;
                loop {
                    if c >= sizes.len() {
                        return best;
                    }
                    choice[c] += 1;
                    if choice[c] < sizes[c] {
                        break;
                    }
                    choice[c] = 0;
                    c += 1;
                }
            }
        })
        .reduce(|| 0.0, f64::max);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn single() -> (InnerStack, Array2<f64>, Array2<f64>) {
        let inner =
            InnerStack::new(vec![array![[1.0, 0.0]]], Activation::Relu, BallConstraint::L1Ball)
                .unwrap();
        (inner, array![[1.0, 0.0]], array![[1.0]])
    }

    #[test]
    fn score_examples() {
        let (inner, x, u) = single();
        assert_eq!(inner_score(&inner, &x.view(), &u.view(), NoiseKind::Con).unwrap(), 2.0);
        let zero = Array2::zeros((1, 1));
        assert_eq!(inner_score(&inner, &x.view(), &zero.view(), NoiseKind::Con).unwrap(), 0.0);
        let doubled = &u * 2.0;
        assert_eq!(inner_score(&inner, &x.view(), &doubled.view(), NoiseKind::Con).unwrap(), 4.0);
    }

    #[test]
    fn score_rejects_infeasible_stack() {
        // ℓ2,1 norm 1 but ℓ1 norm √2.
        let s = 0.5f64.sqrt();
        let inner = InnerStack::new(
            vec![array![[s], [s]]],
            Activation::Relu,
            BallConstraint::L21Ball,
        )
        .unwrap();
        let x = array![[1.0]];
        let u = array![[1.0]];
        assert!(inner_score(&inner, &x.view(), &u.view(), NoiseKind::Node).is_ok());
        assert!(matches!(
            inner_score(&inner, &x.view(), &u.view(), NoiseKind::Con),
            Err(Error::ConstraintViolation(_))
        ));
    }

    #[test]
    fn zero_noise_gives_zero() {
        let arch = Architecture::new(2, vec![2], 2).unwrap();
        let x = array![[1.0, 2.0], [0.5, -1.0]];
        let u = Array2::zeros((2, 2));
        let search = NoiseSearch {
            n_starts: 4,
            ..NoiseSearch::default()
        };
        let est =
            effective_noise(&x.view(), &u.view(), &arch, Activation::Relu, NoiseKind::Con, &search)
                .unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.scores_per_start.len(), 4);
        let tiny = Architecture::new(2, vec![1], 2).unwrap();
        let bf = brute_force_effective_noise(
            &x.view(),
            &u.view(),
            &tiny,
            Activation::Relu,
            NoiseKind::Con,
            0.01,
        )
        .unwrap();
        assert_eq!(bf, 0.0);
    }

    #[test]
    fn brute_force_single_parameter_case() {
        let arch = Architecture::new(2, vec![1], 1).unwrap();
        let (_, x, u) = single();
        let v = brute_force_effective_noise(
            &x.view(),
            &u.view(),
            &arch,
            Activation::Relu,
            NoiseKind::Con,
            1e-3,
        )
        .unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 2e-3);
        let neg = -&u;
        let w = brute_force_effective_noise(
            &x.view(),
            &neg.view(),
            &arch,
            Activation::Relu,
            NoiseKind::Con,
            1e-3,
        )
        .unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn brute_force_refuses_large_architectures() {
        let arch = Architecture::new(3, vec![2], 1).unwrap();
        let x = Array2::zeros((1, 3));
        let u = Array2::zeros((1, 1));
        assert!(matches!(
            brute_force_effective_noise(
                &x.view(),
                &u.view(),
                &arch,
                Activation::Relu,
                NoiseKind::Con,
                0.1
            ),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn multistart_matches_grid_on_small_instance() {
        let arch = Architecture::new(2, vec![1], 1).unwrap();
        let x = array![[0.8, -1.2], [1.5, 0.3], [-0.4, 0.9]];
        let u = array![[0.7], [-0.2], [1.1]];
        let search = NoiseSearch {
            n_starts: 64,
            seed: 3,
            ..NoiseSearch::default()
        };
        for act in [Activation::Relu, Activation::Tanh] {
            let est = effective_noise(&x.view(), &u.view(), &arch, act, NoiseKind::Con, &search)
                .unwrap();
            let bf = brute_force_effective_noise(
                &x.view(),
                &u.view(),
                &arch,
                act,
                NoiseKind::Con,
                1e-3,
            )
            .unwrap();
            assert!((est.value - bf).abs() <= 0.02 * bf, "{act:?}: {} vs {bf}", est.value);
            let node = effective_noise(&x.view(), &u.view(), &arch, act, NoiseKind::Node, &search)
                .unwrap();
            assert_abs_diff_eq!(node.value, est.value, epsilon = 1e-9);
        }
    }

    #[test]
    fn estimate_is_deterministic_and_consistent() {
        let arch = Architecture::new(3, vec![3, 2], 2).unwrap();
        let x = crate::synth::gen_inputs(30, 3, crate::synth::InputDist::Gaussian, 1).unwrap();
        let u = crate::synth::gen_noise(30, 2, crate::synth::NoiseModel::default(), 2).unwrap();
        let search = NoiseSearch {
            n_starts: 8,
            seed: 9,
            ..NoiseSearch::default()
        };
        let a = effective_noise(&x.view(), &u.view(), &arch, Activation::Relu, NoiseKind::Node, &search)
            .unwrap();
        let b = effective_noise(&x.view(), &u.view(), &arch, Activation::Relu, NoiseKind::Node, &search)
            .unwrap();
        assert_eq!(a, b);
        let max = a.scores_per_start.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.value, max);
        let rescored = inner_score(&a.argmax_inner, &x.view(), &u.view(), NoiseKind::Node).unwrap();
        assert_abs_diff_eq!(rescored, a.value, epsilon = 1e-12 * a.value);
    }
}
