//! Regularized least-squares objectives and their training.
//!
//! The data term is the unnormalized sum `Σ_i ‖y_i − f_Θ(x_i)‖²`. The outer-only variants
//! penalize `r‖Θˡ‖` and confine the inner layers to the unit ball of the matching norm;
//! they are fitted by projected proximal gradient with a backtracking line search.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{project_ball, prox, sq_distance, ProxKind};
use crate::net::{matrix_norm, Architecture, BallConstraint, MatrixNorm, ParamStack, Trace};
use crate::synth::Dataset;
use crate::{seed, Activation};

/// A user-supplied norm for the outer layer, together with its proximal map.
pub trait OuterNorm: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn norm(&self, a: &ArrayView2<f64>) -> f64;
    /// `argmin_B ½‖A − B‖² + τ‖B‖`.
    fn prox(&self, a: &ArrayView2<f64>, tau: f64) -> Array2<f64>;
    /// Ball the inner layers are confined to.
    fn inner_constraint(&self) -> BallConstraint {
        BallConstraint::L1Ball
    }
}

/// Penalty applied to the outer layer only.
#[derive(Debug, Clone)]
pub enum OuterPenalty {
    /// Connection sparsity; inner layers in the ℓ1 ball.
    L1,
    /// Node sparsity; inner layers in the ℓ2,1 ball.
    L21,
    Generic(Arc<dyn OuterNorm>),
}

impl OuterPenalty {
    pub fn norm(&self, a: &ArrayView2<f64>) -> f64 {
        match self {
            OuterPenalty::L1 => matrix_norm(a, MatrixNorm::L1),
            OuterPenalty::L21 => matrix_norm(a, MatrixNorm::L21),
            OuterPenalty::Generic(g) => g.norm(a),
        }
    }

    fn prox(&self, a: &ArrayView2<f64>, tau: f64) -> Array2<f64> {
        match self {
            OuterPenalty::L1 => prox(a, tau, ProxKind::L1),
            OuterPenalty::L21 => prox(a, tau, ProxKind::L21),
            OuterPenalty::Generic(g) => g.prox(a, tau),
        }
    }

    pub fn inner_constraint(&self) -> BallConstraint {
        match self {
            OuterPenalty::L1 => BallConstraint::L1Ball,
            OuterPenalty::L21 => BallConstraint::L21Ball,
            OuterPenalty::Generic(g) => g.inner_constraint(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum RegularizerVariant {
    /// `r‖Θˡ‖` with ball-constrained inner layers.
    OuterOnly(OuterPenalty),
    /// `r Π_j ‖Θʲ‖₁`, unconstrained.
    ProductAllLayers,
    /// `r Σ_j ‖Θʲ‖₁`, unconstrained.
    SumAllLayers,
}

impl RegularizerVariant {
    pub fn connection_sparse() -> Self {
        RegularizerVariant::OuterOnly(OuterPenalty::L1)
    }

    pub fn node_sparse() -> Self {
        RegularizerVariant::OuterOnly(OuterPenalty::L21)
    }

    /// Inner-layer constraint, if the variant has one.
    pub fn constraint(&self) -> Option<BallConstraint> {
        match self {
            RegularizerVariant::OuterOnly(p) => Some(p.inner_constraint()),
            _ => None,
        }
    }

    /// Penalty without the factor `r`.
    pub fn penalty(&self, theta: &ParamStack) -> f64 {
        let l1 = |a: &Array2<f64>| matrix_norm(&a.view(), MatrixNorm::L1);
        match self {
            RegularizerVariant::OuterOnly(p) => p.norm(&theta.outer().view()),
            RegularizerVariant::ProductAllLayers => theta.layers().iter().map(l1).product(),
            RegularizerVariant::SumAllLayers => theta.layers().iter().map(l1).sum(),
        }
    }
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Tuning parameter.
    pub r: f64,
    pub max_iters: usize,
    pub step_init: f64,
    pub backtrack_factor: f64,
    /// Relative objective decrease below which a run counts as converged.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            r: 0.0,
            max_iters: 2000,
            step_init: 1.0,
            backtrack_factor: 0.5,
            tol: 1e-10,
            restarts: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(invalid("r", format!("must be finite and nonnegative, got {}", self.r)));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be at least 1"));
        }
        if !(self.step_init > 0.0 && self.step_init.is_finite()) {
            return Err(invalid("step_init", "must be positive"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(invalid("backtrack_factor", "must lie in (0, 1)"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        if self.restarts == 0 {
            return Err(invalid("restarts", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: ParamStack,
    pub objective_value: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub restart_index: usize,
}

/// A single optimizer run from a given starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct Descent {
    pub theta: ParamStack,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

fn check_shapes(theta: &ParamStack, data: &Dataset) -> Result<()> {
    if theta.input_dim() != data.d() || theta.output_dim() != data.m() {
        return Err(Error::Dimension(format!(
            "network maps R^{} → R^{} but data has d = {}, m = {}",
            theta.input_dim(),
            theta.output_dim(),
            data.d(),
            data.m()
        )));
    }
    Ok(())
}

/// `Σ_i ‖y_i − f_Θ(x_i)‖²`.
pub fn loss(theta: &ParamStack, data: &Dataset) -> Result<f64> {
    check_shapes(theta, data)?;
    let out = theta.forward_batch(&data.x.view())?;
    Ok(sq_distance(&out.view(), &data.y.view()))
}

/// Data term plus `r` times the variant's penalty. Feasibility is not checked here.
pub fn objective(theta: &ParamStack, data: &Dataset, r: f64, variant: &RegularizerVariant) -> Result<f64> {
    Ok(loss(theta, data)? + r * variant.penalty(theta))
}

fn loss_and_gradient(theta: &ParamStack, data: &Dataset) -> Result<(f64, Vec<Array2<f64>>)> {
    check_shapes(theta, data)?;
    let depth = theta.depth();
    let outer = theta.outer();
    let trace = Trace::run(theta.inner_layers(), theta.activation(), &data.x.view());
    let hidden = trace.output();
    let mut resid = hidden.dot(&outer.t());
    resid -= &data.y;
    let loss = resid.iter().map(|v| v * v).sum();
    resid.mapv_inplace(|v| 2.0 * v);
    let outer_grad = resid.t().dot(hidden);
    let upstream = resid.dot(outer);
    let mut grads = trace.backprop(theta.inner_layers(), theta.activation(), upstream);
    grads.push(outer_grad);
    debug_assert_eq!(grads.len(), depth + 1);
    Ok((loss, grads))
}

/// Gradient of `Σ_i ‖y_i − f_Θ(x_i)‖²` with respect to every layer, input layer first.
pub fn backprop_gradient(theta: &ParamStack, data: &Dataset) -> Result<Vec<Array2<f64>>> {
    loss_and_gradient(theta, data).map(|(_, g)| g)
}

/// True iff `objective(theta_hat) ≤ objective(theta_ref)`.
pub fn certificate_check(
    theta_hat: &ParamStack,
    theta_ref: &ParamStack,
    data: &Dataset,
    r: f64,
    variant: &RegularizerVariant,
) -> Result<bool> {
    Ok(objective(theta_hat, data, r, variant)? <= objective(theta_ref, data, r, variant)?)
}

/// Uniform `(−a, a)` entries with `a = 1/√fan-in`, projected to feasibility.
pub fn random_init<R: Rng>(
    arch: &Architecture,
    activation: Activation,
    variant: &RegularizerVariant,
    rng: &mut R,
) -> Result<ParamStack> {
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(rows, cols)| {
            let a = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
        })
        .collect();
    let mut theta = ParamStack::new(layers, activation)?;
    if let Some(c) = variant.constraint() {
        let depth = theta.depth();
        for layer in &mut theta.layers_mut()[..depth] {
            *layer = project_ball(&layer.view(), c, 1.0)?.matrix;
        }
    }
    Ok(theta)
}

/// Smallest step tried before the line search gives up.
const MIN_STEP: f64 = 1e-20;

fn inner_product(a: &[Array2<f64>], b: &[Array2<f64>], c: &[Array2<f64>]) -> f64 {
    // ⟨a, b − c⟩ summed over layers
    let mut s = 0.0;
    for ((x, y), z) in a.iter().zip(b).zip(c) {
        Zip::from(x).and(y).and(z).for_each(|g, p, q| s += g * (p - q));
    }
    s
}

struct Candidate {
    layers: Vec<Array2<f64>>,
    loss: f64,
    objective: f64,
}

/// Runs the optimizer from `init`.
pub fn descend(
    init: ParamStack,
    data: &Dataset,
    variant: &RegularizerVariant,
    cfg: &TrainConfig,
) -> Result<Descent> {
    cfg.validate()?;
    let activation = init.activation();
    let r = cfg.r;
    let penalty_of = |layers: &[Array2<f64>]| -> f64 {
        let l1 = |a: &Array2<f64>| matrix_norm(&a.view(), MatrixNorm::L1);
        match variant {
            RegularizerVariant::OuterOnly(p) => p.norm(&layers[layers.len() - 1].view()),
            RegularizerVariant::ProductAllLayers => layers.iter().map(l1).product(),
            RegularizerVariant::SumAllLayers => layers.iter().map(l1).sum(),
        }
    };

    let mut theta = init;
    let (mut cur_loss, mut grads) = loss_and_gradient(&theta, data)?;
    let mut cur_obj = cur_loss + r * penalty_of(theta.layers());
    if !cur_obj.is_finite() {
        return Err(Error::Divergence("initial objective is not finite".into()));
    }
    let mut trace = vec![cur_obj];
    let mut step = cfg.step_init;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let depth = theta.depth();
        let mut accepted: Option<Candidate> = None;
        let mut saw_finite = false;

        // Product penalty: subgradient of r Π‖Θʲ‖₁, zero-norm layers contribute nothing.
        let direction: Vec<Array2<f64>> = match variant {
            RegularizerVariant::ProductAllLayers if r > 0.0 => {
                let norms: Vec<f64> = theta
                    .layers()
                    .iter()
                    .map(|a| matrix_norm(&a.view(), MatrixNorm::L1))
                    .collect();
                grads
                    .iter()
                    .zip(theta.layers())
                    .enumerate()
                    .map(|(j, (g, a))| {
                        let others: f64 = norms
                            .iter()
                            .enumerate()
                            .filter(|(k, _)| *k != j)
                            .map(|(_, v)| v)
                            .product();
                        let mut d = g.clone();
                        Zip::from(&mut d).and(a).for_each(|d, &v| {
                            let s = if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *d += r * others * s;
                        });
                        d
                    })
                    .collect()
            }
            _ => grads.clone(),
        };
        let dir_sq: f64 = direction.iter().flat_map(|d| d.iter()).map(|v| v * v).sum();

        while step >= MIN_STEP {
            let mut layers: Vec<Array2<f64>> = theta
                .layers()
                .iter()
                .zip(&direction)
                .map(|(a, g)| a - &(g * step))
                .collect();
            match variant {
                RegularizerVariant::OuterOnly(p) => {
                    let c = p.inner_constraint();
                    for layer in &mut layers[..depth] {
                        *layer = project_ball(&layer.view(), c, 1.0)?.matrix;
                    }
                    layers[depth] = p.prox(&layers[depth].view(), step * r);
                }
                RegularizerVariant::SumAllLayers => {
                    for layer in &mut layers {
                        *layer = prox(&layer.view(), step * r, ProxKind::L1);
                    }
                }
                RegularizerVariant::ProductAllLayers => {}
            }
            let cand = ParamStack::new(layers, activation);
            let cand = match cand {
                Ok(c) => c,
                Err(Error::NonFinite(_)) => {
                    step *= cfg.backtrack_factor;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let cand_loss = loss(&cand, data)?;
            let cand_obj = cand_loss + r * penalty_of(cand.layers());
            if cand_obj.is_finite() {
                saw_finite = true;
                let sufficient = match variant {
                    RegularizerVariant::ProductAllLayers => {
                        cand_obj <= cur_obj - 1e-4 * step * dir_sq
                    }
                    _ => {
                        let moved: f64 = cand
                            .layers()
                            .iter()
                            .zip(theta.layers())
                            .map(|(a, b)| sq_distance(&a.view(), &b.view()))
                            .sum();
                        let linear = inner_product(&grads, cand.layers(), theta.layers());
                        cand_loss <= cur_loss + linear + moved / (2.0 * step)
                    }
                };
                if sufficient && cand_obj <= cur_obj {
                    accepted = Some(Candidate {
                        layers: cand.into_layers(),
                        loss: cand_loss,
                        objective: cand_obj,
                    });
                    break;
                }
            }
            step *= cfg.backtrack_factor;
        }

        let Some(next) = accepted else {
            if !saw_finite {
                return Err(Error::Divergence(format!(
                    "no finite objective down to step {MIN_STEP} at iteration {iterations}"
                )));
            }
            // No admissible step: stationary up to the line search resolution.
            converged = true;
            break;
        };
        let previous = cur_obj;
        theta = ParamStack::new(next.layers, activation)?;
        cur_obj = next.objective;
        trace.push(cur_obj);
        let decrease = (previous - cur_obj) / previous.abs().max(f64::MIN_POSITIVE);
        if decrease < cfg.tol {
            converged = true;
            break;
        }
        let (l, g) = loss_and_gradient(&theta, data)?;
        debug_assert!((l - next.loss).abs() <= 1e-9 * l.abs().max(1.0));
        cur_loss = l;
        grads = g;
        step = (step / cfg.backtrack_factor).min(cfg.step_init);
    }

    Ok(Descent {
        theta,
        objective: cur_obj,
        iterations,
        converged,
        trace,
    })
}

/// Best of `cfg.restarts` runs from seeded random initializations; ties go to the lower
/// restart index.
pub fn train(
    data: &Dataset,
    arch: &Architecture,
    activation: Activation,
    variant: &RegularizerVariant,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    arch.validate()?;
    if arch.d != data.d() || arch.m != data.m() {
        return Err(Error::Dimension(format!(
            "architecture maps R^{} → R^{} but data has d = {}, m = {}",
            arch.d,
            arch.m,
            data.d(),
            data.m()
        )));
    }
    let mut best: Option<FitResult> = None;
    for restart in 0..cfg.restarts {
        let mut rng = seed::rng_for(cfg.seed, restart as u64);
        let init = random_init(arch, activation, variant, &mut rng)?;
        let run = descend(init, data, variant, cfg)?;
        let better = best
            .as_ref()
            .is_none_or(|b| run.objective < b.objective_value);
        if better {
            best = Some(FitResult {
                theta_hat: run.theta,
                objective_value: run.objective,
                iterations_used: run.iterations,
                converged: run.converged,
                restart_index: restart,
            });
        }
    }
    Ok(best.expect("restarts ≥ 1"))
}
