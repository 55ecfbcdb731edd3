//! Mechanical evaluation of the convergence bounds against recorded
//! trajectories.
//!
//! Every evaluator separates two questions: do the theorem's hypotheses hold
//! along this trajectory (`hypotheses_ok`), and is the measured quantity below
//! the bound (`satisfied`). A failed hypothesis is not a bound violation.
//! Constants supplied by the caller are treated as claims and checked against
//! what the trajectory actually shows; constants left `None` are measured.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{class_geometry, ClassGeometry};
use crate::error::{dim, domain, Error, Result};
use crate::optim::{pcngd_step, OptimizerState};
use crate::rng::SeededRng;
use crate::tensor::{cosine_angle, l2_norm, EPS_NORM};

use super::quadratic::{Trajectory, TwoClassQuadratic};

/// Relative tolerance used when checking that a trajectory followed a
/// theorem's step-size rule.
const STEP_RULE_TOL: f64 = 1e-12;

/// Constants entering the bounds, all for one class `l`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    /// Lipschitz constant of the loss. A hypothesis of the theorems that no
    /// bound uses; recorded only.
    pub l1: Option<f64>,
    /// Smoothness constant.
    pub l2: Option<f64>,
    /// Class-GD constant of class `l`.
    pub mu: Option<f64>,
    pub c: Option<f64>,
    /// Constant step size, for the rules that use one directly.
    pub eta: Option<f64>,
    pub horizon: Option<u64>,
    /// `f^(l)(x_0) - f^(l)_*`.
    pub d0: Option<f64>,
    pub omega_min: Option<f64>,
    pub omega_max: Option<f64>,
    /// `max_t C_t²`.
    pub c_max: Option<f64>,
    /// Bound on the batch-gradient deviation of class `l`.
    pub sigma: Option<f64>,
    /// Contraction constant `K` of the gradient-dominated schedules; must not
    /// exceed `min_t 2μ(1 + cos α_t)`.
    pub k: Option<f64>,
}

fn need(v: Option<f64>, name: &str) -> Result<f64> {
    let v = v.ok_or_else(|| Error::Config(format!("missing constant `{name}`")))?;
    if !(v >= 0.0) || !v.is_finite() {
        return domain(format!("constant `{name}` must be finite and non-negative, got {v}"));
    }
    Ok(v)
}

fn need_positive(v: Option<f64>, name: &str) -> Result<f64> {
    let v = need(v, name)?;
    if v == 0.0 {
        return domain(format!("constant `{name}` must be positive"));
    }
    Ok(v)
}

/// Outcome of one bound evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs <= rhs`, computed whether or not the hypotheses hold.
    pub satisfied: bool,
    pub hypotheses_ok: bool,
    /// First hypothesis that failed, if any.
    pub detail: Option<String>,
    /// Constants actually used, with measured values filled in.
    pub constants: TheoremConstants,
}

impl BoundReport {
    /// A bound violated on a trajectory that satisfies the hypotheses.
    pub fn is_violation(&self) -> bool {
        self.hypotheses_ok && !self.satisfied
    }
}

/// Collects the first failed hypothesis.
#[derive(Default)]
struct Hyp(Option<String>);

impl Hyp {
    fn fail(&mut self, msg: impl FnOnce() -> String) {
        if self.0.is_none() {
            self.0 = Some(msg());
        }
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.fail(msg);
        }
    }
}

fn report(lhs: f64, rhs: f64, hyp: Hyp, constants: TheoremConstants) -> BoundReport {
    BoundReport {
        lhs,
        rhs,
        satisfied: lhs <= rhs,
        hypotheses_ok: hyp.0.is_none(),
        detail: hyp.0,
        constants,
    }
}

fn horizon_of(traj: &Trajectory, k: &TheoremConstants, hyp: &mut Hyp) -> Result<usize> {
    horizon_until(traj, k, hyp, None)
}

/// First point where class `l`'s gradient is numerically zero. From there on
/// `min_t ‖∇f^(l)(x_t)‖` is already below `EPS_NORM`, so the remaining steps
/// cannot affect a min-over-iterates bound and their hypotheses are moot.
fn converged_at(traj: &Trajectory, l: usize) -> Option<usize> {
    traj.points.iter().position(|p| p.grad_norms[l] < EPS_NORM)
}

/// Like [`horizon_of`], but a run that stopped or ended after class `l`
/// converged is complete.
fn horizon_until(traj: &Trajectory, k: &TheoremConstants, hyp: &mut Hyp, converged: Option<usize>) -> Result<usize> {
    if traj.points.is_empty() {
        return domain("empty trajectory");
    }
    if let (Some(msg), None) = (&traj.stopped, converged) {
        hyp.fail(|| format!("trajectory stopped early ({msg})"));
    }
    let t = match k.horizon {
        Some(h) => h as usize,
        None => traj.horizon(),
    };
    if t == 0 {
        return domain("horizon must be at least one step");
    }
    if traj.horizon() < t && converged.is_none() {
        hyp.fail(|| format!("trajectory has {} steps, horizon is {t}", traj.horizon()));
    }
    Ok(t)
}

fn check_step(hyp: &mut Hyp, t: usize, got: Option<f64>, want: f64) {
    match got {
        Some(e) if (e - want).abs() <= STEP_RULE_TOL * want.abs() => {}
        _ => hyp.fail(|| format!("step {t} is {got:?}, the rule gives {want}")),
    }
}

fn check_class(l: usize) -> Result<()> {
    if l > 1 {
        return domain(format!("binary bound evaluated for class {l}"));
    }
    Ok(())
}

/// Step rules covered by the GD bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdStepRule {
    /// `η_t = min((1 + cos α_t C_t) / (2(1 + C_t²) L₂), c/√T)`.
    MinRule,
    /// Constant `η`, bound `min_{t≤T} ‖∇f^(l)‖² ≤ D₀ / (ω (T + 1))` with
    /// `ω = min_t η(1 + cos α_t C_t − L₂η(1 + C_t²))`.
    Constant,
}

/// Worst-case rate of plain GD on class `l`'s loss.
///
/// Min rule: `lhs = min_{t<T} ‖∇f^(l)(x_t)‖²`,
/// `rhs = 2(1 + C_max)L₂D₀/(ω_min² T) + D₀/(ω_min c √T)` with
/// `ω_min = min_t (1 + cos α_t C_t)`, `C_max = max_t C_t²`.
/// Hypotheses: the margin stays positive and the steps follow the rule.
pub fn thm_gd_bound_eval(k: &TheoremConstants, traj: &Trajectory, l: usize, rule: GdStepRule) -> Result<BoundReport> {
    check_class(l)?;
    let l2 = need_positive(k.l2, "l2")?;
    let d0 = need(k.d0, "d0")?;
    let mut hyp = Hyp::default();
    let conv = converged_at(traj, l);
    let t_max = horizon_until(traj, k, &mut hyp, conv)?;
    let checked = conv.map_or(t_max, |c| c.min(t_max));
    let mut used = k.clone();
    used.horizon = Some(t_max as u64);
    // With the other class's gradient at zero the angle term drops out, as
    // in the step rule.
    let geometry = |p: &super::quadratic::TrajectoryPoint| match (p.cos_alpha, p.ratio(l)) {
        (Some(cos), Some(r)) => Some((cos, r)),
        (None, Some(r)) => Some((0.0, r)),
        _ => None,
    };
    match rule {
        GdStepRule::MinRule => {
            let c = need_positive(k.c, "c")?;
            let cap = c / (t_max as f64).sqrt();
            let (mut omega, mut c_max, mut lhs) = (f64::INFINITY, 0.0_f64, f64::INFINITY);
            for (t, p) in traj.points.iter().take(t_max).enumerate() {
                lhs = lhs.min(p.grad_norms[l] * p.grad_norms[l]);
                if t >= checked {
                    continue;
                }
                let Some((cos, r)) = geometry(p) else {
                    hyp.fail(|| format!("gradient vanishes at step {t}"));
                    continue;
                };
                let margin = 1.0 + cos * r;
                hyp.check(margin > 0.0, || format!("margin {margin} at step {t}"));
                omega = omega.min(margin);
                c_max = c_max.max(r * r);
                check_step(&mut hyp, t, p.eta, (margin / (2.0 * (1.0 + r * r) * l2)).min(cap));
            }
            let omega = claim_lower(k.omega_min, omega, "omega_min", &mut hyp);
            let c_max = claim_upper(k.c_max, c_max, "c_max", &mut hyp);
            used.omega_min = Some(omega);
            used.c_max = Some(c_max);
            let tf = t_max as f64;
            let rhs = 2.0 * (1.0 + c_max) * l2 * d0 / (omega * omega * tf) + d0 / (omega * c * tf.sqrt());
            Ok(report(lhs, rhs, hyp, used))
        }
        GdStepRule::Constant => {
            let eta = need_positive(k.eta, "eta")?;
            let (mut omega, mut lhs) = (f64::INFINITY, f64::INFINITY);
            for (t, p) in traj.points.iter().take(t_max + 1).enumerate() {
                lhs = lhs.min(p.grad_norms[l] * p.grad_norms[l]);
                if conv.is_some_and(|c| t >= c) {
                    continue;
                }
                let Some((cos, r)) = geometry(p) else {
                    hyp.fail(|| format!("gradient vanishes at step {t}"));
                    continue;
                };
                let w = eta * (1.0 + cos * r - l2 * eta * (1.0 + r * r));
                hyp.check(w > 0.0, || format!("decrease coefficient {w} at step {t}"));
                omega = omega.min(w);
                if t < t_max {
                    check_step(&mut hyp, t, p.eta, eta);
                }
            }
            let omega = claim_lower(k.omega_min, omega, "omega_min", &mut hyp);
            used.omega_min = Some(omega);
            let rhs = d0 / (omega * (t_max as f64 + 1.0));
            Ok(report(lhs, rhs, hyp, used))
        }
    }
}

/// A claimed lower bound must not exceed the measured minimum.
fn claim_lower(claim: Option<f64>, measured: f64, name: &str, hyp: &mut Hyp) -> f64 {
    match claim {
        Some(v) => {
            hyp.check(v <= measured, || {
                format!("claimed {name} {v} exceeds measured {measured}")
            });
            v
        }
        None => measured,
    }
}

fn claim_upper(claim: Option<f64>, measured: f64, name: &str, hyp: &mut Hyp) -> f64 {
    match claim {
        Some(v) => {
            hyp.check(v >= measured, || {
                format!("claimed {name} {v} is below measured {measured}")
            });
            v
        }
        None => measured,
    }
}

/// Step rules covered by the PCNGD bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcngdVariant {
    /// `η = c/√T`, `rhs = (D₀/c + 2L₂c) / (ω_min √T)`, `ω_min = min(1 + cos α)`.
    V1,
    /// `η_t = c/((1 + cos α_t)√T)`, `rhs = (D₀/c + 2L₂c/ω_min) / √T`,
    /// `ω_min = min(1 + cos α)²`.
    V2,
}

/// Rate of PCNGD on class `l`: `lhs = min_{t<T} ‖∇f^(l)(x_t)‖` (not squared).
/// Hypothesis: the class gradients are never exactly opposed.
pub fn thm_pcngd_bound_eval(
    k: &TheoremConstants,
    traj: &Trajectory,
    l: usize,
    variant: PcngdVariant,
) -> Result<BoundReport> {
    check_class(l)?;
    let l2 = need_positive(k.l2, "l2")?;
    let d0 = need(k.d0, "d0")?;
    let c = need_positive(k.c, "c")?;
    let mut hyp = Hyp::default();
    let conv = converged_at(traj, l);
    let t_max = horizon_until(traj, k, &mut hyp, conv)?;
    let sqrt_t = (t_max as f64).sqrt();
    let (mut omega, mut lhs) = (f64::INFINITY, f64::INFINITY);
    for (t, p) in traj.points.iter().take(t_max).enumerate() {
        lhs = lhs.min(p.grad_norms[l]);
        if conv.is_some_and(|c| t >= c) {
            continue;
        }
        // A vanished other class leaves the step along ĝ_l alone.
        let cos = match p.cos_alpha {
            Some(cos) => cos,
            None if p.grad_norms[1 - l] < EPS_NORM => 0.0,
            None => {
                hyp.fail(|| format!("gradient vanishes at step {t}"));
                continue;
            }
        };
        let w = 1.0 + cos;
        hyp.check(w > 0.0, || format!("opposed class gradients at step {t}"));
        let (term, want) = match variant {
            PcngdVariant::V1 => (w, c / sqrt_t),
            PcngdVariant::V2 => (w * w, c / (w * sqrt_t)),
        };
        omega = omega.min(term);
        check_step(&mut hyp, t, p.eta, want);
    }
    let omega = claim_lower(k.omega_min, omega, "omega_min", &mut hyp);
    let mut used = k.clone();
    used.horizon = Some(t_max as u64);
    used.omega_min = Some(omega);
    let rhs = match variant {
        PcngdVariant::V1 => (d0 / c + 2.0 * l2 * c) / (omega * sqrt_t),
        PcngdVariant::V2 => (d0 / c + 2.0 * l2 * c / omega) / sqrt_t,
    };
    Ok(report(lhs, rhs, hyp, used))
}

/// `P_R(t) = ω_t / Σ ω_t` with `ω_t = 1 + cos α_t` over the first `T` points.
pub fn rpcngd_distribution(traj: &Trajectory, horizon: usize) -> Result<Vec<f64>> {
    if horizon == 0 || traj.points.len() < horizon {
        return domain("trajectory shorter than the horizon");
    }
    let w: Vec<f64> = traj.points[..horizon]
        .iter()
        .map(|p| p.cos_alpha.map_or(0.0, |c| 1.0 + c))
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return domain("all weights vanish");
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpcngdReport {
    /// Monte-Carlo estimate of `E‖∇f^(l)(x_R)‖`.
    pub estimate: f64,
    pub stderr: f64,
    /// The same expectation computed exactly from `P_R`.
    pub exact: f64,
    pub rhs: f64,
    /// `estimate <= rhs + 3·stderr`.
    pub satisfied: bool,
    pub hypotheses_ok: bool,
    pub detail: Option<String>,
    pub omega_bar: f64,
}

/// Randomized-iterate bound: draws `R ∼ P_R` `n_draws` times and compares
/// the mean gradient norm with `(D₀/c + 2L₂c) / (√T ω̄)`.
pub fn thm_rpcngd_check(
    k: &TheoremConstants,
    traj: &Trajectory,
    l: usize,
    n_draws: usize,
    rng: &mut SeededRng,
) -> Result<RpcngdReport> {
    check_class(l)?;
    let l2 = need_positive(k.l2, "l2")?;
    let d0 = need(k.d0, "d0")?;
    let c = need_positive(k.c, "c")?;
    if n_draws < 2 {
        return domain("need at least two draws");
    }
    let mut hyp = Hyp::default();
    let t_max = horizon_of(traj, k, &mut hyp)?;
    let sqrt_t = (t_max as f64).sqrt();
    for (t, p) in traj.points.iter().take(t_max).enumerate() {
        hyp.check(p.cos_alpha.is_some_and(|c| c > -1.0), || {
            format!("opposed or vanishing class gradients at step {t}")
        });
        check_step(&mut hyp, t, p.eta, c / sqrt_t);
    }
    let probs = rpcngd_distribution(traj, t_max.min(traj.points.len()))?;
    let norms: Vec<f64> = traj.points.iter().take(probs.len()).map(|p| p.grad_norms[l]).collect();
    let exact = probs.iter().zip(&norms).map(|(p, g)| p * g).sum();
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cdf.push(acc);
    }
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n_draws {
        let u = rng.uniform() * acc;
        let r = cdf.partition_point(|&v| v <= u).min(norms.len() - 1);
        s += norms[r];
        s2 += norms[r] * norms[r];
    }
    let n = n_draws as f64;
    let estimate = s / n;
    let var = ((s2 - s * s / n) / (n - 1.0)).max(0.0);
    let stderr = (var / n).sqrt();
    let omega_bar = traj.points[..probs.len()]
        .iter()
        .map(|p| p.cos_alpha.map_or(0.0, |c| 1.0 + c))
        .sum::<f64>()
        / probs.len() as f64;
    let rhs = (d0 / c + 2.0 * l2 * c) / (sqrt_t * omega_bar);
    Ok(RpcngdReport {
        estimate,
        stderr,
        exact,
        rhs,
        satisfied: estimate <= rhs + 3.0 * stderr,
        hypotheses_ok: hyp.0.is_none(),
        detail: hyp.0,
        omega_bar,
    })
}

/// Step rules of the gradient-dominated rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlMode {
    /// `η_t = (2t+1)/(K(t+1)²)`, bound `8L₂/(K²T)`.
    Decreasing,
    /// `η = c/K`, `c ∈ (0, 1)`, bound `(1−c)^{T−1} D₀ + 2L₂c/K²`.
    Constant,
}

/// Final optimality gap of PCNGD under the class-GD inequality
/// `½‖∇f^(l)(x)‖ ≥ μ (f^(l)(x) − f^(l)_*)`.
///
/// The inequality is checked at every iterate, and `K` must not exceed
/// `min_t 2μ(1 + cos α_t)`: the contraction factor of each step is
/// `1 − 2η_t μ(1 + cos α_t) ≤ 1 − η_t K` only for such `K`.
pub fn thm_pl_rate_check(k: &TheoremConstants, traj: &Trajectory, l: usize, mode: PlMode) -> Result<BoundReport> {
    check_class(l)?;
    let l2 = need_positive(k.l2, "l2")?;
    let mu = need_positive(k.mu, "mu")?;
    let kk = need_positive(k.k, "k")?;
    let d0 = need(k.d0, "d0")?;
    let c = match mode {
        PlMode::Decreasing => None,
        PlMode::Constant => {
            let c = need_positive(k.c, "c")?;
            if c >= 1.0 {
                return domain(format!("constant-step factor must lie in (0, 1), got {c}"));
            }
            Some(c)
        }
    };
    let mut hyp = Hyp::default();
    let t_max = horizon_of(traj, k, &mut hyp)?;
    let mut k_meas = f64::INFINITY;
    for (t, p) in traj.points.iter().take(t_max + 1).enumerate() {
        let (g, gap) = (p.grad_norms[l], p.gaps[l]);
        hyp.check(0.5 * g >= mu * gap * (1.0 - 1e-12), || {
            format!(
                "class-GD inequality fails at step {t}: ½‖∇f‖ = {}, μ·gap = {}",
                0.5 * g,
                mu * gap
            )
        });
        if t == t_max {
            break;
        }
        // At a minimizer of f^(l) the step cannot raise the gap, so the angle
        // is irrelevant; if only the other class vanishes the step is along
        // ĝ_l alone, which counts as cos α = 0.
        let own_vanishes = g < EPS_NORM;
        let other_vanishes = p.grad_norms[1 - l] < EPS_NORM;
        match p.cos_alpha {
            Some(cos) if cos > -1.0 => k_meas = k_meas.min(2.0 * mu * (1.0 + cos)),
            None if own_vanishes => {}
            None if other_vanishes => k_meas = k_meas.min(2.0 * mu),
            _ => hyp.fail(|| format!("opposed class gradients at step {t}")),
        }
        let want = match c {
            None => (2.0 * t as f64 + 1.0) / (kk * (t as f64 + 1.0).powi(2)),
            Some(c) => c / kk,
        };
        check_step(&mut hyp, t, p.eta, want);
    }
    hyp.check(kk <= k_meas, || {
        format!("K = {kk} exceeds min 2μ(1 + cos α) = {k_meas}")
    });
    let lhs = traj.points.get(t_max).map_or(f64::NAN, |p| p.gaps[l]);
    let tf = t_max as f64;
    let rhs = match c {
        None => 8.0 * l2 / (kk * kk * tf),
        Some(c) => (1.0 - c).powf(tf - 1.0) * d0 + 2.0 * l2 * c / (kk * kk),
    };
    let mut used = k.clone();
    used.horizon = Some(t_max as u64);
    Ok(report(lhs, rhs, hyp, used))
}

/// One stochastic PCNSGD run, steps `t = 0..T-1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StochasticTrajectory {
    /// True per-class gradient norms `‖∇f^(l)(x_t)‖`.
    pub grad_norms: Vec<Vec<f64>>,
    /// Angle between the two batch gradients at step `t`; `None` if either
    /// vanished.
    pub cos_alpha: Vec<Option<f64>>,
    pub eta: Vec<f64>,
}

/// Convergence of PCNSGD to a ball:
/// `min_t Ê‖∇f^(l)(x_t)‖ ≤ (D₀/c + 2L₂c)/(ω_max√T) + σ_l(1 + 2/ω_max)`,
/// the expectation taken over the supplied runs (at least 20).
///
/// `ω_max` must strictly exceed every observed `1 + cos α_t`; when not given
/// it is set just above the observed maximum.
pub fn thm_pcnsgd_ball_check(k: &TheoremConstants, runs: &[StochasticTrajectory], l: usize) -> Result<BoundReport> {
    check_class(l)?;
    let l2 = need_positive(k.l2, "l2")?;
    let d0 = need(k.d0, "d0")?;
    let c = need_positive(k.c, "c")?;
    let sigma = need(k.sigma, "sigma")?;
    if runs.len() < 20 {
        return domain(format!("expectation needs at least 20 runs, got {}", runs.len()));
    }
    let t_max = runs[0].grad_norms.len();
    if t_max == 0 {
        return domain("empty stochastic trajectory");
    }
    if runs
        .iter()
        .any(|r| r.grad_norms.len() != t_max || r.cos_alpha.len() != t_max || r.eta.len() != t_max)
    {
        return dim("stochastic runs differ in length");
    }
    let mut hyp = Hyp::default();
    if let Some(h) = k.horizon {
        hyp.check(h as usize == t_max, || {
            format!("runs have {t_max} steps, horizon is {h}")
        });
    }
    let sqrt_t = (t_max as f64).sqrt();
    let mut w_max = 0.0_f64;
    for r in runs {
        for t in 0..t_max {
            match r.cos_alpha[t] {
                Some(cos) if cos > -1.0 => w_max = w_max.max(1.0 + cos),
                _ => hyp.fail(|| format!("opposed or vanishing batch gradients at step {t}")),
            }
            check_step(&mut hyp, t, Some(r.eta[t]), c / sqrt_t);
        }
    }
    let omega = match k.omega_max {
        Some(v) => {
            hyp.check(v > w_max, || {
                format!("claimed omega_max {v} does not exceed observed {w_max}")
            });
            v
        }
        None => w_max * (1.0 + 1e-9),
    };
    hyp.check(omega > 0.0, || "omega_max must be positive".into());
    let n = runs.len() as f64;
    let lhs = (0..t_max)
        .map(|t| runs.iter().map(|r| r.grad_norms[t][l]).sum::<f64>() / n)
        .fold(f64::INFINITY, f64::min);
    let rhs = (d0 / c + 2.0 * l2 * c) / (omega * sqrt_t) + sigma * (1.0 + 2.0 / omega);
    let mut used = k.clone();
    used.horizon = Some(t_max as u64);
    used.omega_max = Some(omega);
    Ok(report(lhs, rhs, hyp, used))
}

/// Both monotonicity conditions for class `l` among `L` classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticlassCondition {
    /// Plain GD: `g_l` against `Σ_{i≠l} g_i`, `C_t = ‖Σ_{i≠l} g_i‖/‖g_l‖`.
    pub gd: ClassGeometry,
    /// PCNGD: `g_l` against `Σ_{i≠l} g_i/‖g_i‖`.
    pub cos_alpha_normalized: Option<f64>,
    /// `C̃_t = ‖Σ_{i≠l} g_i/‖g_i‖‖`, at most `L − 1`.
    pub ratio_normalized: Option<f64>,
    /// `1 + cos α̃ · C̃_t`.
    pub margin_normalized: Option<f64>,
}

/// GD-style and PCNGD-style conditions; `None` fields mark degenerate
/// geometry. Classes with vanishing gradient drop out of the normalized sum,
/// as they do in the PCNGD update.
pub fn multiclass_condition_check(grads: &[Vec<f64>], l: usize) -> Result<MulticlassCondition> {
    let gd = class_geometry(grads, l)?;
    let mut rest = vec![0.0; grads[l].len()];
    for (i, g) in grads.iter().enumerate() {
        let n = l2_norm(g);
        if i != l && n >= EPS_NORM {
            for (r, v) in rest.iter_mut().zip(g) {
                *r += v / n;
            }
        }
    }
    let own_ok = l2_norm(&grads[l]) >= EPS_NORM;
    let ratio_normalized = own_ok.then(|| l2_norm(&rest));
    let cos_alpha_normalized = if own_ok { cosine_angle(&grads[l], &rest)? } else { None };
    let margin_normalized = match (cos_alpha_normalized, ratio_normalized) {
        (Some(c), Some(r)) => Some(1.0 + c * r),
        (None, Some(0.0)) => Some(1.0),
        _ => None,
    };
    Ok(MulticlassCondition {
        gd,
        cos_alpha_normalized,
        ratio_normalized,
        margin_normalized,
    })
}

/// One GD step on a pair whose class-`l` loss has Hessian `L·I`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub eta: f64,
    pub curvature: f64,
    pub cos_alpha: f64,
    /// `‖∇f^(1-l)‖ / ‖∇f^(l)‖`.
    pub ratio: f64,
    /// `-η(1 − Lη/2 − LηC²/2 + (1 − Lη) cos α C) ‖∇f^(l)‖²`.
    pub predicted: f64,
    /// `f^(l)(x − η∇f(x)) − f^(l)(x)`.
    pub measured: f64,
    pub rel_err: f64,
    /// Step size at which the change is zero, when positive and finite.
    pub threshold: Option<f64>,
    /// The expansion predicts the loss of class `l` goes up.
    pub increase_predicted: bool,
}

/// Exact one-step change of class `l`'s loss under GD versus its closed form.
pub fn gd_one_step_change(problem: &TwoClassQuadratic, x: &[f64], eta: f64, l: usize) -> Result<TightnessReport> {
    check_class(l)?;
    if x.len() != problem.dim() {
        return dim("point does not match problem dimension");
    }
    let Some(curvature) = problem.classes[l].isotropic_curvature() else {
        return domain(format!("class {l} Hessian is not a multiple of the identity"));
    };
    let grads = problem.grads(x);
    let own = l2_norm(&grads[l]);
    if own < EPS_NORM {
        return domain("class gradient vanishes");
    }
    let ratio = l2_norm(&grads[1 - l]) / own;
    let cos_alpha = cosine_angle(&grads[0], &grads[1])?.unwrap_or(0.0);
    let le = curvature * eta;
    let coef = 1.0 - le / 2.0 - le * ratio * ratio / 2.0 + (1.0 - le) * cos_alpha * ratio;
    let predicted = -eta * coef * own * own;
    let mut next = x.to_vec();
    for g in &grads {
        for (a, v) in next.iter_mut().zip(g) {
            *a -= eta * v;
        }
    }
    let measured = problem.classes[l].gap(&next) - problem.classes[l].gap(x);
    let scale = measured.abs().max(predicted.abs()).max(f64::MIN_POSITIVE);
    Ok(TightnessReport {
        eta,
        curvature,
        cos_alpha,
        ratio,
        predicted,
        measured,
        rel_err: (predicted - measured).abs() / scale,
        threshold: tightness_threshold(cos_alpha, ratio, curvature),
        increase_predicted: coef < 0.0,
    })
}

/// `η* = (1 + cos α C) / (L((1 + C²)/2 + cos α C))`, the root of the
/// one-step change; `None` when the margin is not positive.
pub fn tightness_threshold(cos_alpha: f64, ratio: f64, curvature: f64) -> Option<f64> {
    let num = 1.0 + cos_alpha * ratio;
    let den = curvature * ((1.0 + ratio * ratio) / 2.0 + cos_alpha * ratio);
    (num > 0.0 && den > 0.0).then(|| num / den)
}

/// Largest PCNGD step for which the smoothness bound guarantees class `l`'s
/// loss does not increase: `(1 + cos α)‖∇f^(l)‖ / (2L₂)`.
pub fn pcngd_decrease_threshold(cos_alpha: f64, grad_norm: f64, l2: f64) -> f64 {
    (1.0 + cos_alpha) * grad_norm / (2.0 * l2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub steps: usize,
    /// Largest single-step increase of any class loss (negative if all
    /// decreased).
    pub max_increase: f64,
    pub worst_step: usize,
    pub worst_class: usize,
}

/// Runs PCNGD with `η_t = κ · min_l` of the decrease threshold and records
/// the largest per-class loss increase. Stops early at a point where the
/// threshold vanishes.
pub fn pcngd_monotone_run(
    problem: &TwoClassQuadratic,
    x0: &[f64],
    steps: usize,
    kappa: f64,
) -> Result<MonotonicityReport> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return domain(format!("kappa must lie in (0, 1), got {kappa}"));
    }
    let l2 = problem.smoothness();
    let mut state = OptimizerState::new(x0.to_vec());
    let mut rep = MonotonicityReport {
        steps: 0,
        max_increase: f64::NEG_INFINITY,
        worst_step: 0,
        worst_class: 0,
    };
    let mut gaps = problem.gaps(&state.params);
    for t in 0..steps {
        let grads = problem.grads(&state.params);
        let Some(cos) = cosine_angle(&grads[0], &grads[1])? else {
            break;
        };
        let eta = kappa
            * (0..2)
                .map(|l| pcngd_decrease_threshold(cos, l2_norm(&grads[l]), l2))
                .fold(f64::INFINITY, f64::min);
        if !(eta > 0.0) {
            break;
        }
        pcngd_step(&mut state, &grads, eta)?;
        let next = problem.gaps(&state.params);
        for l in 0..2 {
            let inc = next[l] - gaps[l];
            if inc > rep.max_increase {
                rep.max_increase = inc;
                rep.worst_step = t;
                rep.worst_class = l;
            }
        }
        gaps = next;
        rep.steps = t + 1;
    }
    Ok(rep)
}
