//! Error metrics, bound formulas and the audit procedures built on them.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::estimators::{certificate_check, FitResult, OuterPenalty, RegularizerVariant};
use crate::geometry::{project_ball, sq_distance};
use crate::net::{matrix_norm, stack_frobenius, Activation, Architecture, InnerStack, MatrixNorm, ParamStack};
use crate::noise::{effective_noise, random_start, NoiseKind, NoiseSearch};
use crate::synth::{gen_inputs, gen_noise, input_stats, Dataset, InputDist, NoiseModel};
use crate::seed;

/// `(1/n) Σ_i ‖f_teacher(x_i) − f_Θ(x_i)‖²`.
pub fn prediction_error(theta: &ParamStack, teacher: &ParamStack, x: &ArrayView2<f64>) -> Result<f64> {
    if theta.output_dim() != teacher.output_dim() {
        return Err(Error::Dimension(format!(
            "networks have {} and {} outputs",
            theta.output_dim(),
            teacher.output_dim()
        )));
    }
    let a = theta.forward_batch(x)?;
    let b = teacher.forward_batch(x)?;
    Ok(sq_distance(&a.view(), &b.view()) / x.nrows() as f64)
}

/// Prediction error against known noise-free targets `f_*(x_i)`.
pub fn prediction_error_to(theta: &ParamStack, signal: &ArrayView2<f64>, x: &ArrayView2<f64>) -> Result<f64> {
    let a = theta.forward_batch(x)?;
    if a.dim() != signal.dim() {
        return Err(Error::Dimension(format!(
            "outputs are {:?} but targets are {:?}",
            a.dim(),
            signal.dim()
        )));
    }
    Ok(sq_distance(&a.view(), signal) / x.nrows() as f64)
}

/// Mean of `‖y − f_Θ(x)‖²` over held-out samples.
pub fn empirical_risk(theta: &ParamStack, fresh: &Dataset) -> Result<f64> {
    if fresh.n() == 0 {
        return Err(invalid("fresh", "risk estimation needs at least one sample"));
    }
    let out = theta.forward_batch(&fresh.x.view())?;
    if out.dim() != fresh.y.dim() {
        return Err(Error::Dimension("network outputs do not match targets".into()));
    }
    Ok(sq_distance(&out.view(), &fresh.y.view()) / fresh.n() as f64)
}

/// Oracle-inequality check of a fit against a reference parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub err_hat: f64,
    pub err_ref: f64,
    /// `2 r ‖Θ_refˡ‖ / n`.
    pub statistical_term: f64,
    pub bound: f64,
    /// `objective(Θ̂) ≤ objective(Θ_ref)`.
    pub certificate: bool,
    pub holds: bool,
}

/// Slack on the bound comparison.
pub const BOUND_TOL: f64 = 1e-9;

/// Evaluates `err(Θ̂) ≤ err(Θ_ref) + 2r‖Θ_refˡ‖/n` together with the objective certificate.
///
/// Prediction errors are measured against `y − u`, so `data` must carry its noise.
pub fn oracle_bound_check(
    fit: &FitResult,
    reference: &ParamStack,
    data: &Dataset,
    r: f64,
    penalty: &OuterPenalty,
) -> Result<BoundReport> {
    let signal = data
        .signal()
        .ok_or_else(|| invalid("data", "bound checks need the noise realization"))?;
    let x = data.x.view();
    let err_hat = prediction_error_to(&fit.theta_hat, &signal.view(), &x)?;
    let err_ref = prediction_error_to(reference, &signal.view(), &x)?;
    let statistical_term = 2.0 * r * penalty.norm(&reference.outer().view()) / data.n() as f64;
    let bound = err_ref + statistical_term;
    let variant = RegularizerVariant::OuterOnly(penalty.clone());
    let certificate = certificate_check(&fit.theta_hat, reference, data, r, &variant)?;
    Ok(BoundReport {
        err_hat,
        err_ref,
        statistical_term,
        bound,
        certificate,
        holds: err_hat <= bound + BOUND_TOL,
    })
}

/// Constants for the generalization comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuaranteeConfig {
    /// Risk inflation factor.
    pub b: f64,
    /// Fitted stand-in for the unknown constant.
    pub c_fit: f64,
}

impl GuaranteeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(invalid("b", format!("must be positive, got {}", self.b)));
        }
        if !(self.c_fit > 0.0) {
            return Err(invalid("c_fit", format!("must be positive, got {}", self.c_fit)));
        }
        Ok(())
    }
}

/// High-probability scale of the effective noise, natural logarithms:
///
/// * `Con`: `c · v̄∞ · √(n l (ln 2mnp̄)³)`
/// * `Node`: `c · v̄2 · √(m n l p̲ (ln 2mnp̄)³)`
pub fn theoretical_rate(arch: &Architecture, n: usize, stat: f64, kind: NoiseKind, cfg: &GuaranteeConfig) -> f64 {
    let (m, l) = (arch.m as f64, arch.depth() as f64);
    let n = n as f64;
    let log3 = (2.0 * m * n * arch.total_params() as f64).ln().powi(3);
    let inner = match kind {
        NoiseKind::Con => n * l * log3,
        NoiseKind::Node => m * n * l * arch.max_width() as f64 * log3,
    };
    cfg.c_fit * stat * inner.sqrt()
}

/// The rate in the generalization bound: [`theoretical_rate`] with `c = 1`, divided by `n`.
pub fn generalization_rate(arch: &Architecture, n: usize, stat: f64, kind: NoiseKind) -> f64 {
    let unit = GuaranteeConfig { b: 1.0, c_fit: 1.0 };
    theoretical_rate(arch, n, stat, kind, &unit) / n as f64
}

/// Least-squares slope of `ln y` against `ln x`; `None` unless every point is positive.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Settings of a rate sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSweepSpec {
    pub arch: Architecture,
    pub activation: Activation,
    pub noise: NoiseModel,
    pub inputs: InputDist,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub n_starts: usize,
    pub ascent_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub n: usize,
    pub rep: usize,
    pub kind: NoiseKind,
    pub r_hat: f64,
    pub v_bar_inf: f64,
    pub v_bar_2: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSweep {
    pub rows: Vec<RateRow>,
    /// `(n, kind, median r̂*)`.
    pub medians: Vec<(usize, NoiseKind, f64)>,
    pub slope_con: Option<f64>,
    pub slope_node: Option<f64>,
}

/// Effective noise of both kinds over a grid of sample sizes, with the log-log slope of
/// the per-`n` medians.
pub fn rate_sweep(spec: &RateSweepSpec) -> Result<RateSweep> {
    spec.arch.validate()?;
    spec.noise.validate()?;
    if spec.n_grid.is_empty() || spec.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("n_grid", "must be nonempty and strictly increasing"));
    }
    if spec.n_grid[0] == 0 {
        return Err(invalid("n_grid", "sample sizes must be at least 1"));
    }
    if spec.reps == 0 {
        return Err(invalid("reps", "must be at least 1"));
    }
    let jobs: Vec<(usize, usize, u64)> = spec
        .n_grid
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| {
            (0..spec.reps).map(move |rep| (n, rep, spec.seed + (i * spec.reps + rep) as u64))
        })
        .collect();
    let per_job: Vec<Vec<RateRow>> = jobs
        .par_iter()
        .map(|&(n, rep, rep_seed)| {
            let x = gen_inputs(n, spec.arch.d, spec.inputs, rep_seed)?;
            let u = gen_noise(n, spec.arch.m, spec.noise, rep_seed)?;
            let stats = input_stats(&x.view())?;
            [NoiseKind::Con, NoiseKind::Node]
                .into_iter()
                .map(|kind| {
                    let search = NoiseSearch {
                        n_starts: spec.n_starts,
                        ascent_iters: spec.ascent_iters,
                        seed: seed::derive(rep_seed, 0x5eed),
                    };
                    let est = effective_noise(&x.view(), &u.view(), &spec.arch, spec.activation, kind, &search)?;
                    Ok(RateRow {
                        n,
                        rep,
                        kind,
                        r_hat: est.value,
                        v_bar_inf: stats.v_inf,
                        v_bar_2: stats.v_2,
                        seed: rep_seed,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<RateRow> = per_job.into_iter().flatten().collect();

    let mut medians = Vec::new();
    let mut slopes = [None, None];
    for (slot, kind) in [NoiseKind::Con, NoiseKind::Node].into_iter().enumerate() {
        let mut meds = Vec::with_capacity(spec.n_grid.len());
        for &n in &spec.n_grid {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n && r.kind == kind)
                .map(|r| r.r_hat)
                .collect();
            let med = median(&vals);
            medians.push((n, kind, med));
            meds.push(med);
        }
        let ns: Vec<f64> = spec.n_grid.iter().map(|&n| n as f64).collect();
        slopes[slot] = log_log_slope(&ns, &meds);
    }
    Ok(RateSweep {
        rows,
        medians,
        slope_con: slopes[0],
        slope_node: slopes[1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzAudit {
    /// Against `√l ‖x‖ ‖Θ̄ − Γ̄‖_F`.
    pub max_ratio: f64,
    pub violations: usize,
    /// Against the layerwise bound `‖x‖ Σ_j ‖Θ̄^j − Γ̄^j‖`, with entrywise ℓ1 norms for
    /// `Con` and operator norms for `Node`.
    pub max_layerwise_ratio: f64,
    pub layerwise_violations: usize,
    pub trials: usize,
}

/// Ratios `lhs / rhs` of one comparison against the Frobenius bound and the layerwise
/// bound, with `0/0` read as 0.
pub fn lipschitz_ratios(a: &InnerStack, b: &InnerStack, x: &Array1<f64>, kind: NoiseKind) -> Result<(f64, f64)> {
    let ga = a.forward(x.view())?;
    let gb = b.forward(x.view())?;
    let diff = &ga - &gb;
    let l = a.depth() as f64;
    let dist = stack_frobenius(a, b)?;
    let layer_norm = match kind {
        NoiseKind::Con => MatrixNorm::L1,
        NoiseKind::Node => MatrixNorm::Operator2,
    };
    let layerwise: f64 = a
        .layers()
        .iter()
        .zip(b.layers())
        .map(|(p, q)| matrix_norm(&(p - q).view(), layer_norm))
        .sum();
    let (lhs, xnorm) = match kind {
        NoiseKind::Con => (
            diff.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            x.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        ),
        NoiseKind::Node => (
            diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
            x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        ),
    };
    let ratio = |rhs: f64| {
        if lhs == 0.0 {
            0.0
        } else if rhs == 0.0 {
            f64::INFINITY
        } else {
            lhs / rhs
        }
    };
    Ok((ratio(l.sqrt() * xnorm * dist), ratio(xnorm * layerwise)))
}

/// Ratio against the Frobenius bound alone.
pub fn lipschitz_ratio(a: &InnerStack, b: &InnerStack, x: &Array1<f64>, kind: NoiseKind) -> Result<f64> {
    lipschitz_ratios(a, b, x, kind).map(|r| r.0)
}

/// Randomized check of `‖ḡ_Θ̄(x) − ḡ_Γ̄(x)‖ ≤ √l ‖x‖ ‖Θ̄ − Γ̄‖_F` over feasible pairs,
/// with ℓ∞ norms on the ℓ1 ball (`Con`) and ℓ2 norms on the ℓ2,1 ball (`Node`).
///
/// Pairs mix independent draws, small perturbations and radial rescalings of one point.
pub fn lipschitz_audit(
    arch: &Architecture,
    activation: Activation,
    kind: NoiseKind,
    trials: usize,
    seed_value: u64,
) -> Result<LipschitzAudit> {
    arch.validate()?;
    if trials == 0 {
        return Err(invalid("trials", "must be at least 1"));
    }
    let constraint = kind.constraint();
    let mut rng = seed::rng_for(seed_value, 0x11b5);
    let (mut max_ratio, mut max_layerwise) = (0.0f64, 0.0f64);
    let (mut violations, mut layerwise_violations) = (0, 0);
    for _ in 0..trials {
        let a_layers = random_start(arch, constraint, &mut rng)?;
        let b_layers = match rng.random_range(0..3) {
            0 => random_start(arch, constraint, &mut rng)?,
            1 => {
                let scale = 10f64.powf(rng.random_range(-4.0..-1.0));
                a_layers
                    .iter()
                    .map(|l| {
                        let moved = l.mapv(|v| v + scale * rng.sample::<f64, _>(StandardNormal));
                        project_ball(&moved.view(), constraint, 1.0).map(|p| p.matrix)
                    })
                    .collect::<Result<Vec<Array2<f64>>>>()?
            }
            _ => {
                let t: f64 = rng.random_range(0.0..1.0);
                a_layers.iter().map(|l| l * t).collect()
            }
        };
        let scale: f64 = 10f64.powf(rng.random_range(-1.0..1.0));
        let x = Array1::from_shape_simple_fn(arch.d, || scale * rng.sample::<f64, _>(StandardNormal));
        let a = InnerStack::new(a_layers, activation, constraint)?;
        let b = InnerStack::new(b_layers, activation, constraint)?;
        let (ratio, layerwise) = lipschitz_ratios(&a, &b, &x, kind)?;
        max_ratio = max_ratio.max(ratio);
        max_layerwise = max_layerwise.max(layerwise);
        if ratio > 1.0 + 1e-9 {
            violations += 1;
        }
        if layerwise > 1.0 + 1e-9 {
            layerwise_violations += 1;
        }
    }
    Ok(LipschitzAudit {
        max_ratio,
        violations,
        max_layerwise_ratio: max_layerwise,
        layerwise_violations,
        trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizationCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `risk(Θ̂) ≤ (1 + b) risk(Θ*) + c_fit · rate_term · ‖Θ*ˡ‖`, with risks estimated on
/// `fresh` and the outer norm matching `kind`.
pub fn generalization_check(
    fit: &FitResult,
    teacher: &ParamStack,
    fresh: &Dataset,
    cfg: &GuaranteeConfig,
    rate_term: f64,
    kind: NoiseKind,
) -> Result<GeneralizationCheck> {
    cfg.validate()?;
    let lhs = empirical_risk(&fit.theta_hat, fresh)?;
    let teacher_risk = empirical_risk(teacher, fresh)?;
    let norm = kind.constraint().norm(&teacher.outer().view());
    let rhs = (1.0 + cfg.b) * teacher_risk + cfg.c_fit * rate_term * norm;
    Ok(GeneralizationCheck {
        lhs,
        rhs,
        holds: lhs <= rhs,
    })
}

/// Smallest constant that makes every pilot replication satisfy the generalization bound:
/// the largest `(risk_fit − (1+b) risk_teacher) / (rate · ‖Θ*ˡ‖)`, floored at a tiny
/// positive value.
pub fn calibrate_c(pilot: &[(f64, f64, f64)], b: f64) -> f64 {
    // (risk_fit, risk_teacher, rate · norm)
    pilot
        .iter()
        .filter(|(_, _, scale)| *scale > 0.0)
        .map(|(fit, teacher, scale)| (fit - (1.0 + b) * teacher) / scale)
        .fold(f64::MIN_POSITIVE, f64::max)
}
