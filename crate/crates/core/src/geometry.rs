//! Ball projections, proximal maps and norm rescaling.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{invalid, Error, Result};
use crate::net::{column_norms, matrix_norm, BallConstraint, MatrixNorm, ParamStack};

/// Outcome of a ball projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub matrix: Array2<f64>,
    /// The input lay outside the ball and was moved.
    pub active: bool,
}

/// Relative slack under which a point counts as already inside the ball.
const INSIDE_RTOL: f64 = 1e-12;

/// Soft-threshold level `τ` such that `Σ max(|v_i| − τ, 0) = radius`, for `‖v‖₁ > radius`.
fn l1_threshold(abs: &[f64], radius: f64) -> f64 {
    let mut sorted = abs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - radius) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    debug_assert!({
        let mass: f64 = abs.iter().map(|a| (a - tau).max(0.0)).sum();
        (mass - radius).abs() <= 1e-9 * radius.max(1.0)
    });
    tau.max(0.0)
}

fn check_radius(radius: f64) -> Result<()> {
    if radius > 0.0 && radius.is_finite() {
        Ok(())
    } else {
        Err(invalid("radius", format!("must be positive, got {radius}")))
    }
}

/// Euclidean projection of the flattened matrix onto `{‖·‖₁ ≤ radius}`.
pub fn project_l1_ball(a: &ArrayView2<f64>, radius: f64) -> Result<ProjectionResult> {
    check_radius(radius)?;
    let norm = matrix_norm(a, MatrixNorm::L1);
    if norm <= radius * (1.0 + INSIDE_RTOL) {
        return Ok(ProjectionResult {
            matrix: a.to_owned(),
            active: false,
        });
    }
    let abs: Vec<f64> = a.iter().map(|v| v.abs()).collect();
    let tau = l1_threshold(&abs, radius);
    Ok(ProjectionResult {
        matrix: a.mapv(|v| v.signum() * (v.abs() - tau).max(0.0)),
        active: true,
    })
}

/// Euclidean projection onto `{‖·‖_{2,1} ≤ radius}`: the vector of column norms is
/// projected onto the ℓ1 ball and each column is rescaled to its new norm.
pub fn project_l21_ball(a: &ArrayView2<f64>, radius: f64) -> Result<ProjectionResult> {
    check_radius(radius)?;
    let norms = column_norms(a);
    if norms.sum() <= radius * (1.0 + INSIDE_RTOL) {
        return Ok(ProjectionResult {
            matrix: a.to_owned(),
            active: false,
        });
    }
    let tau = l1_threshold(norms.as_slice().expect("contiguous"), radius);
    let mut out = a.to_owned();
    for (mut col, &norm) in out.axis_iter_mut(Axis(1)).zip(norms.iter()) {
        let scale = if norm > 0.0 { (norm - tau).max(0.0) / norm } else { 0.0 };
        col.mapv_inplace(|v| v * scale);
    }
    Ok(ProjectionResult {
        matrix: out,
        active: true,
    })
}

pub fn project_ball(
    a: &ArrayView2<f64>,
    constraint: BallConstraint,
    radius: f64,
) -> Result<ProjectionResult> {
    match constraint {
        BallConstraint::L1Ball => project_l1_ball(a, radius),
        BallConstraint::L21Ball => project_l21_ball(a, radius),
    }
}

/// Penalties with a closed-form proximal map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxKind {
    L1,
    L21,
}

/// `argmin_B ½‖A − B‖²_F + τ·penalty(B)`.
pub fn prox(a: &ArrayView2<f64>, tau: f64, kind: ProxKind) -> Array2<f64> {
    if tau <= 0.0 {
        return a.to_owned();
    }
    match kind {
        ProxKind::L1 => a.mapv(|v| v.signum() * (v.abs() - tau).max(0.0)),
        ProxKind::L21 => {
            let norms = column_norms(a);
            let mut out = a.to_owned();
            for (mut col, &norm) in out.axis_iter_mut(Axis(1)).zip(norms.iter()) {
                let scale = if norm > tau { 1.0 - tau / norm } else { 0.0 };
                col.mapv_inplace(|v| v * scale);
            }
            out
        }
    }
}

/// Moves all scale out of the inner layers: every inner layer of the result has unit norm
/// in `constraint`'s norm and the outer layer absorbs the product of the removed scales.
/// The network function is unchanged.
pub fn canonicalize(theta: &ParamStack, constraint: BallConstraint) -> Result<ParamStack> {
    let act = theta.activation();
    if !act.is_nonneg_homogeneous() {
        return Err(Error::Unsupported(format!(
            "canonicalization needs a nonnegative homogeneous activation, got {}",
            act.name()
        )));
    }
    let depth = theta.depth();
    let mut layers = theta.layers().to_vec();
    for j in 0..depth {
        let norm = constraint.norm(&layers[j].view());
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("inner layer {j} is entirely zero")));
        }
        layers[j].mapv_inplace(|v| v / norm);
        layers[j + 1].mapv_inplace(|v| v * norm);
    }
    ParamStack::new(layers, act)
}

/// `‖A‖₁ ≤ √rows · ‖A‖_{2,1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormDomination {
    pub l1: f64,
    pub bound: f64,
    pub ok: bool,
}

pub fn norm_domination_check(a: &ArrayView2<f64>) -> NormDomination {
    let l1 = matrix_norm(a, MatrixNorm::L1);
    let bound = (a.nrows() as f64).sqrt() * matrix_norm(a, MatrixNorm::L21);
    NormDomination {
        l1,
        bound,
        ok: l1 <= bound + 1e-12,
    }
}

/// Squared Euclidean distance between two matrices of equal shape.
pub(crate) fn sq_distance(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    let mut s = 0.0;
    Zip::from(a).and(b).for_each(|x, y| s += (x - y) * (x - y));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::Rng;

    #[test]
    fn l1_projection_examples() {
        let inside = project_l1_ball(&array![[0.3, -0.2]].view(), 1.0).unwrap();
        assert!(!inside.active);
        assert_eq!(inside.matrix, array![[0.3, -0.2]]);

        let p = project_l1_ball(&array![[3.0, 1.0]].view(), 1.0).unwrap();
        assert!(p.active);
        assert_abs_diff_eq!(p.matrix[[0, 0]], 1.0, epsilon = 1e-15);
        assert_eq!(p.matrix[[0, 1]], 0.0);

        let p = project_l1_ball(&array![[0.6, 0.6]].view(), 1.0).unwrap();
        assert_abs_diff_eq!(p.matrix[[0, 0]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.matrix[[0, 1]], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn l21_projection_examples() {
        let z = Array2::<f64>::zeros((2, 3));
        let p = project_l21_ball(&z.view(), 1.0).unwrap();
        assert!(!p.active);
        assert_eq!(p.matrix, z);

        let p = project_l21_ball(&array![[3.0, 1.0]].view(), 1.0).unwrap();
        assert_abs_diff_eq!(p.matrix[[0, 0]], 1.0, epsilon = 1e-15);
        assert_eq!(p.matrix[[0, 1]], 0.0);

        let p = project_l21_ball(&array![[3.0], [4.0]].view(), 1.0).unwrap();
        assert_abs_diff_eq!(p.matrix[[0, 0]], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p.matrix[[1, 0]], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn nonpositive_radius_is_rejected() {
        let a = array![[1.0]];
        assert!(project_l1_ball(&a.view(), 0.0).is_err());
        assert!(project_l21_ball(&a.view(), -1.0).is_err());
    }

    #[test]
    fn prox_examples() {
        let a = array![[2.0, -0.5]];
        assert_eq!(prox(&a.view(), 0.0, ProxKind::L1), a);
        assert_eq!(prox(&a.view(), 0.0, ProxKind::L21), a);
        assert_eq!(prox(&a.view(), 1.0, ProxKind::L1), array![[1.0, 0.0]]);
        let col = array![[3.0], [4.0]];
        assert_eq!(prox(&col.view(), 5.0, ProxKind::L21), array![[0.0], [0.0]]);
        let shrunk = prox(&col.view(), 2.5, ProxKind::L21);
        assert_abs_diff_eq!(shrunk[[0, 0]], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(shrunk[[1, 0]], 2.0, epsilon = 1e-15);
    }

    /// Brute force: minimize ‖a − b‖ over a grid of feasible `b` with the given step.
    fn grid_projection(a: &[f64], constraint: &dyn Fn(&[f64]) -> bool, step: f64) -> Vec<f64> {
        let k = (1.0 / step).round() as i64;
        let dim = a.len();
        let mut best = vec![0.0; dim];
        let mut best_d = f64::INFINITY;
        let mut idx = vec![-k; dim];
        let mut point = vec![0.0; dim];
        loop {
            for (p, &i) in point.iter_mut().zip(&idx) {
                *p = i as f64 * step;
            }
            if constraint(&point) {
                let d: f64 = point.iter().zip(a).map(|(p, q)| (p - q) * (p - q)).sum();
                if d < best_d {
                    best_d = d;
                    best.copy_from_slice(&point);
                }
            }
            let mut c = 0;
            loop {
                if c == dim {
                    return best;
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

    #[test]
    fn l1_projection_matches_grid_on_two_entries() {
        let mut rng = crate::seed::rng(11);
        for _ in 0..10 {
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let oracle = grid_projection(&a, &|p| p.iter().map(|v| v.abs()).sum::<f64>() <= 1.0 + 1e-12, 1e-3);
            let m = Array2::from_shape_vec((1, 2), a.clone()).unwrap();
            let p = project_l1_ball(&m.view(), 1.0).unwrap().matrix;
            let dist: f64 = p.iter().zip(&oracle).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            assert!(dist <= 2e-3, "a={a:?} proj={p} oracle={oracle:?}");
        }
    }

    #[test]
    fn canonicalize_examples() {
        let theta = ParamStack::new(vec![array![[2.0, 0.0]], array![[3.0]]], Activation::Relu)
            .unwrap();
        let canon = canonicalize(&theta, BallConstraint::L1Ball).unwrap();
        assert_eq!(canon.layers()[0], array![[1.0, 0.0]]);
        assert_eq!(canon.layers()[1], array![[6.0]]);
        let mut rng = crate::seed::rng(3);
        for _ in 0..100 {
            let x = Array1::from_shape_fn(2, |_| rng.random_range(-3.0..3.0));
            let a = theta.forward(x.view()).unwrap();
            let b = canon.forward(x.view()).unwrap();
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-12);
        }
        assert_eq!(canonicalize(&canon, BallConstraint::L1Ball).unwrap(), canon);

        let theta = ParamStack::new(
            vec![array![[2.0]], array![[5.0]], array![[1.0, 0.0]].t().to_owned()],
            Activation::Identity,
        )
        .unwrap();
        let canon = canonicalize(&theta, BallConstraint::L1Ball).unwrap();
        assert_eq!(canon.layers()[2], array![[10.0], [0.0]]);
    }

    #[test]
    fn canonicalize_rejects_tanh_and_zero_layers() {
        let theta = ParamStack::new(vec![array![[2.0]], array![[1.0]]], Activation::Tanh).unwrap();
        assert!(matches!(
            canonicalize(&theta, BallConstraint::L1Ball),
            Err(Error::Unsupported(_))
        ));
        let theta = ParamStack::new(vec![array![[0.0]], array![[1.0]]], Activation::Relu).unwrap();
        assert!(matches!(
            canonicalize(&theta, BallConstraint::L21Ball),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn norm_domination_examples() {
        let r = norm_domination_check(&array![[1.0, 1.0]].view());
        assert_eq!((r.l1, r.bound, r.ok), (2.0, 2.0, true));
        let r = norm_domination_check(&array![[1.0, 0.0], [0.0, 1.0]].view());
        assert_eq!(r.l1, 2.0);
        assert_abs_diff_eq!(r.bound, 2.0 * 2f64.sqrt(), epsilon = 1e-15);
        assert!(r.ok);
        let r = norm_domination_check(&Array2::zeros((3, 3)).view());
        assert_eq!((r.l1, r.bound, r.ok), (0.0, 0.0, true));
    }
}
