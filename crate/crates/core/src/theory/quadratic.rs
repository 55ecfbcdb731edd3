//! Per-class quadratic losses with known curvature, and full-batch
//! trajectories of GD and PCNGD on them.

use crate::error::{dim, domain, Error, Result};
use crate::optim::{gd_step, pcngd_step, OptimizerState, StepContext, StepSchedule};
use crate::rng::SeededRng;
use crate::tensor::{cosine_angle, dot_unchecked, l2_norm, EPS_NORM};

/// `f(x) = (w/2) (x - c)ᵀ A (x - c)` with `A = Q diag(λ) Qᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassQuadratic {
    center: Vec<f64>,
    /// Row-major `m × m`.
    hessian: Vec<f64>,
    eigenvalues: Vec<f64>,
    weight: f64,
}

impl ClassQuadratic {
    /// `basis` holds the eigenvectors as rows of a row-major `m × m` matrix.
    pub fn new(center: Vec<f64>, basis: &[f64], eigenvalues: Vec<f64>, weight: f64) -> Result<Self> {
        let m = center.len();
        if m == 0 {
            return dim("empty center");
        }
        if basis.len() != m * m || eigenvalues.len() != m {
            return dim(format!("basis/eigenvalues do not match dimension {m}"));
        }
        if eigenvalues.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
            return domain("eigenvalues must be finite and non-negative");
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return domain(format!("class weight must be positive, got {weight}"));
        }
        for i in 0..m {
            for j in 0..m {
                let d = dot_unchecked(&basis[i * m..(i + 1) * m], &basis[j * m..(j + 1) * m]);
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-10 {
                    return domain("basis is not orthonormal");
                }
            }
        }
        let mut hessian = vec![0.0; m * m];
        for (k, &lam) in eigenvalues.iter().enumerate() {
            let q = &basis[k * m..(k + 1) * m];
            for i in 0..m {
                for j in 0..m {
                    hessian[i * m + j] += lam * q[i] * q[j];
                }
            }
        }
        Ok(Self {
            center,
            hessian,
            eigenvalues,
            weight,
        })
    }

    /// `A = L·I`.
    pub fn isotropic(center: Vec<f64>, curvature: f64, weight: f64) -> Result<Self> {
        let m = center.len();
        let mut basis = vec![0.0; m * m];
        for i in 0..m {
            basis[i * m + i] = 1.0;
        }
        Self::new(center, &basis, vec![curvature; m], weight)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }

    /// Largest eigenvalue of `w A`.
    pub fn smoothness(&self) -> f64 {
        self.weight * self.eigenvalues.iter().cloned().fold(0.0, f64::max)
    }

    /// `w·λ` when every eigenvalue is equal (`A = λI`).
    pub fn isotropic_curvature(&self) -> Option<f64> {
        let first = self.eigenvalues[0];
        self.eigenvalues
            .iter()
            .all(|&e| e == first)
            .then_some(self.weight * first)
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).map(|(a, b)| a - b).collect()
    }

    fn apply_hessian(&self, e: &[f64]) -> Vec<f64> {
        let m = self.dim();
        (0..m)
            .map(|i| dot_unchecked(&self.hessian[i * m..(i + 1) * m], e))
            .collect()
    }

    /// `f(x) - f_*`; the minimum value is 0.
    pub fn gap(&self, x: &[f64]) -> f64 {
        let e = self.residual(x);
        0.5 * self.weight * dot_unchecked(&e, &self.apply_hessian(&e))
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let e = self.residual(x);
        self.apply_hessian(&e).into_iter().map(|v| self.weight * v).collect()
    }
}

/// Two per-class quadratics sharing one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoClassQuadratic {
    pub classes: [ClassQuadratic; 2],
}

impl TwoClassQuadratic {
    pub fn new(c0: ClassQuadratic, c1: ClassQuadratic) -> Result<Self> {
        if c0.dim() != c1.dim() {
            return dim("class quadratics differ in dimension");
        }
        Ok(Self { classes: [c0, c1] })
    }

    pub fn dim(&self) -> usize {
        self.classes[0].dim()
    }

    /// Common smoothness constant: the larger of the two class constants.
    pub fn smoothness(&self) -> f64 {
        self.classes[0].smoothness().max(self.classes[1].smoothness())
    }

    pub fn grads(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.classes.iter().map(|c| c.grad(x)).collect()
    }

    pub fn gaps(&self, x: &[f64]) -> Vec<f64> {
        self.classes.iter().map(|c| c.gap(x)).collect()
    }
}

/// Isotropic pair (`A_l = L·I`, unit weights) whose class gradients at the
/// origin have norms `‖∇f^(0)‖ = ratio·scale`, `‖∇f^(1)‖ = scale` and meet at
/// `angle`. `u`, `v` must be orthonormal.
pub fn isotropic_pair(
    angle: f64,
    ratio: f64,
    curvature: f64,
    scale: f64,
    u: &[f64],
    v: &[f64],
) -> Result<TwoClassQuadratic> {
    if !(angle > 0.0 && angle <= std::f64::consts::PI) {
        return domain(format!("angle must lie in (0, π], got {angle}"));
    }
    if !(ratio > 0.0) || !ratio.is_finite() || !(curvature > 0.0) || !(scale > 0.0) {
        return domain("ratio, curvature and scale must be positive");
    }
    // ∇f^(l)(0) = -L c_l, so c_l = -g_l / L.
    let g1: Vec<f64> = u.iter().map(|a| scale * a).collect();
    let (ca, sa) = (angle.cos(), angle.sin());
    let g0: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(a, b)| ratio * scale * (ca * a + sa * b))
        .collect();
    let c0 = g0.iter().map(|g| -g / curvature).collect();
    let c1 = g1.iter().map(|g| -g / curvature).collect();
    TwoClassQuadratic::new(
        ClassQuadratic::isotropic(c0, curvature, 1.0)?,
        ClassQuadratic::isotropic(c1, curvature, 1.0)?,
    )
}

/// Unit-curvature pair whose class gradients at `x = 0` meet at `angle` with
/// `‖∇f^(0)(0)‖ / ‖∇f^(1)(0)‖ = ratio`, i.e. `C_0 = ratio` for class 1.
pub fn make_two_class_quadratic(angle: f64, ratio: f64, dim: usize) -> Result<TwoClassQuadratic> {
    let opposed = angle == std::f64::consts::PI;
    if dim == 0 || (dim < 2 && !opposed) {
        return domain(format!("angle {angle} needs at least two dimensions, got {dim}"));
    }
    let mut u = vec![0.0; dim];
    u[0] = 1.0;
    let mut v = vec![0.0; dim];
    if dim > 1 {
        v[1] = 1.0;
    }
    isotropic_pair(angle, ratio, 1.0, 1.0, &u, &v)
}

/// Rows of a random orthogonal `m × m` matrix (Gram–Schmidt on Gaussians).
pub fn random_orthogonal(m: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    while rows.len() < m {
        let mut r: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
        for q in &rows {
            let p = dot_unchecked(&r, q);
            for (a, b) in r.iter_mut().zip(q) {
                *a -= p * b;
            }
        }
        let n = l2_norm(&r);
        if n > 1e-6 {
            rows.push(r.into_iter().map(|a| a / n).collect());
        }
    }
    rows.concat()
}

/// Random class quadratic with eigenvalues uniform in `[lo, hi]`.
pub fn random_class_quadratic(
    center: Vec<f64>,
    lo: f64,
    hi: f64,
    weight: f64,
    rng: &mut SeededRng,
) -> Result<ClassQuadratic> {
    let m = center.len();
    let basis = random_orthogonal(m, rng);
    let eig = (0..m).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    ClassQuadratic::new(center, &basis, eig, weight)
}

/// Full-batch update rule driven on a quadratic problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FullBatchRule {
    Gd,
    Pcngd,
}

/// State of one iterate `x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    /// `f^(l)(x_t) - f^(l)_*` per class.
    pub gaps: Vec<f64>,
    /// `‖∇f^(l)(x_t)‖` per class.
    pub grad_norms: Vec<f64>,
    /// Angle between the two class gradients; `None` if either vanishes.
    pub cos_alpha: Option<f64>,
    /// Step taken from `x_t`; `None` at the last point.
    pub eta: Option<f64>,
}

impl TrajectoryPoint {
    /// `‖∇f^(1-l)‖ / ‖∇f^(l)‖`.
    pub fn ratio(&self, l: usize) -> Option<f64> {
        let own = self.grad_norms[l];
        (own >= EPS_NORM).then(|| self.grad_norms[1 - l] / own)
    }
}

/// Iterates `x_0, …, x_T` with their per-class geometry.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Why the run ended before `T`, if it did (e.g. the schedule became
    /// undefined).
    pub stopped: Option<String>,
}

impl Trajectory {
    /// Number of steps `T` (points minus one).
    pub fn horizon(&self) -> usize {
        self.points.len().saturating_sub(1)
    }
}

fn point(problem: &TwoClassQuadratic, x: &[f64]) -> Result<(TrajectoryPoint, Vec<Vec<f64>>)> {
    let grads = problem.grads(x);
    let cos_alpha = cosine_angle(&grads[0], &grads[1])?;
    Ok((
        TrajectoryPoint {
            gaps: problem.gaps(x),
            grad_norms: grads.iter().map(|g| l2_norm(g)).collect(),
            cos_alpha,
            eta: None,
        },
        grads,
    ))
}

/// Runs `steps` updates of `rule` from `x0`. The schedule sees the geometry
/// of `reference_class`. A schedule error ends the trajectory early and is
/// recorded in [`Trajectory::stopped`]; numerical divergence is an error.
pub fn run_full_batch(
    problem: &TwoClassQuadratic,
    x0: &[f64],
    rule: FullBatchRule,
    schedule: &StepSchedule,
    reference_class: usize,
    steps: usize,
) -> Result<Trajectory> {
    if x0.len() != problem.dim() {
        return dim("start point does not match problem dimension");
    }
    if reference_class > 1 {
        return domain("reference class must be 0 or 1");
    }
    let mut state = OptimizerState::new(x0.to_vec());
    let mut traj = Trajectory {
        points: Vec::with_capacity(steps + 1),
        stopped: None,
    };
    for t in 0..=steps {
        let (mut p, grads) = point(problem, &state.params)?;
        if t == steps {
            traj.points.push(p);
            break;
        }
        let ctx = StepContext {
            t: t as u64,
            cos_alpha: p.cos_alpha,
            ratio: p.ratio(reference_class),
        };
        let eta = match schedule.eta(&ctx) {
            Ok(e) => e,
            Err(Error::Domain(msg)) => {
                traj.points.push(p);
                traj.stopped = Some(format!("t = {t}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        p.eta = Some(eta);
        traj.points.push(p);
        match rule {
            FullBatchRule::Gd => gd_step(&mut state, &grads, eta)?,
            FullBatchRule::Pcngd => pcngd_step(&mut state, &grads, eta)?,
        };
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use std::f64::consts::PI;

    #[test]
    fn right_angle_equal_norms() {
        let q = make_two_class_quadratic(PI / 2.0, 1.0, 3).unwrap();
        let g = q.grads(&[0.0; 3]);
        assert!(cosine_angle(&g[0], &g[1]).unwrap().unwrap().abs() < 1e-15);
        assert!((l2_norm(&g[0]) - l2_norm(&g[1])).abs() < 1e-15);
    }

    #[test]
    fn requested_geometry_is_exact() {
        for &(angle, ratio) in &[(0.3, 7.0), (2.0, 0.25), (PI, 3.0), (1e-3, 1.0)] {
            let q = make_two_class_quadratic(angle, ratio, 4).unwrap();
            let g = q.grads(&[0.0; 4]);
            let cos = cosine_angle(&g[0], &g[1]).unwrap().unwrap();
            assert!((cos - angle.cos()).abs() < 1e-12, "{angle}");
            assert!((l2_norm(&g[0]) / l2_norm(&g[1]) - ratio).abs() < 1e-12 * ratio);
        }
    }

    #[test]
    fn geometry_needs_two_dimensions() {
        assert!(make_two_class_quadratic(1.0, 1.0, 1).is_err());
        assert!(make_two_class_quadratic(PI, 2.0, 1).is_ok());
        assert!(make_two_class_quadratic(0.0, 1.0, 3).is_err());
        assert!(make_two_class_quadratic(1.0, -1.0, 3).is_err());
    }

    #[test]
    fn opposed_gradients_stall_pcngd() {
        let q = make_two_class_quadratic(PI, 2.0, 2).unwrap();
        let traj = run_full_batch(
            &q,
            &[0.0, 0.0],
            FullBatchRule::Pcngd,
            &StepSchedule::Constant { eta: 0.1 },
            1,
            1,
        )
        .unwrap();
        assert_eq!(traj.points[0].cos_alpha, Some(-1.0));
        // Normalized directions cancel: the iterate does not move.
        assert_eq!(traj.points[0].gaps, traj.points[1].gaps);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = SeededRng::new(3, Stream::Other(0));
        let c = random_class_quadratic(vec![0.5, -1.0, 2.0], 0.5, 2.0, 0.7, &mut rng).unwrap();
        let x = [0.3, 0.1, -0.4];
        let g = c.grad(&x);
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (c.gap(&xp) - c.gap(&xm)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
        assert!(c.smoothness() <= 0.7 * 2.0 + 1e-12);
    }

    #[test]
    fn orthogonal_rows() {
        let mut rng = SeededRng::new(9, Stream::Other(1));
        let q = random_orthogonal(5, &mut rng);
        assert!(ClassQuadratic::new(vec![0.0; 5], &q, vec![1.0; 5], 1.0).is_ok());
        let mut bad = q.clone();
        bad[0] += 0.1;
        assert!(ClassQuadratic::new(vec![0.0; 5], &bad, vec![1.0; 5], 1.0).is_err());
    }

    #[test]
    fn undefined_schedule_stops_trajectory() {
        // Opposed gradients with C > 1 give a negative margin for class 1.
        let q = make_two_class_quadratic(PI, 3.0, 2).unwrap();
        let s = StepSchedule::GdMargin {
            c: 1.0,
            horizon: 10,
            smoothness: 1.0,
        };
        let traj = run_full_batch(&q, &[0.0, 0.0], FullBatchRule::Gd, &s, 1, 10).unwrap();
        assert_eq!(traj.points.len(), 1);
        assert!(traj.stopped.is_some());
    }
}
