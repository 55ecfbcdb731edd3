//! Randomized instance batteries for the bound checkers, reported as CSV.
//!
//! A battery is split into independent units (usually one random instance
//! each) so callers can run units in parallel and merge them in order. Every
//! unit draws from its own stream derived from the battery seed, so the table
//! does not depend on how units were scheduled.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{clt_projection_check, NoiseModel};
use crate::error::{domain, Error, Result};
use crate::optim::{pcnsgd_step, OptimizerState, StepSchedule};
use crate::rng::{SeededRng, Stream};
use crate::tensor::{cosine_angle, dot_unchecked, l2_norm};

use super::bounds::{
    gd_one_step_change, multiclass_condition_check, thm_gd_bound_eval, thm_pcngd_bound_eval, thm_pcnsgd_ball_check,
    thm_pl_rate_check, thm_rpcngd_check, tightness_threshold, BoundReport, GdStepRule, PcngdVariant, PlMode,
    StochasticTrajectory, TheoremConstants,
};
use super::quadratic::{
    isotropic_pair, random_class_quadratic, random_orthogonal, run_full_batch, FullBatchRule, TwoClassQuadratic,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Battery {
    Gd,
    PcngdV1,
    PcngdV2,
    Rpcngd,
    PlDecreasing,
    PlConstant,
    PcnsgdBall,
    Multiclass,
    Tightness,
    Clt,
}

impl Battery {
    pub const ALL: [Battery; 10] = [
        Battery::Gd,
        Battery::PcngdV1,
        Battery::PcngdV2,
        Battery::Rpcngd,
        Battery::PlDecreasing,
        Battery::PlConstant,
        Battery::PcnsgdBall,
        Battery::Multiclass,
        Battery::Tightness,
        Battery::Clt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Battery::Gd => "gd",
            Battery::PcngdV1 => "pcngd_v1",
            Battery::PcngdV2 => "pcngd_v2",
            Battery::Rpcngd => "rpcngd",
            Battery::PlDecreasing => "pl_decreasing",
            Battery::PlConstant => "pl_constant",
            Battery::PcnsgdBall => "pcnsgd_ball",
            Battery::Multiclass => "multiclass",
            Battery::Tightness => "tightness",
            Battery::Clt => "clt",
        }
    }

    fn code(self) -> u64 {
        Battery::ALL.iter().position(|&b| b == self).expect("listed") as u64 + 1
    }

    /// Batteries whose rows are bound checks over random instances.
    pub fn is_theorem_battery(self) -> bool {
        !matches!(self, Battery::Multiclass | Battery::Tightness | Battery::Clt)
    }
}

impl fmt::Display for Battery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Battery {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Battery::ALL.iter().copied().find(|b| b.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Battery::ALL.iter().map(|b| b.name()).collect();
            Error::Config(format!("unknown battery `{s}`; valid batteries: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatteryConfig {
    pub seed: u64,
    /// Random instances per battery (units for the theorem batteries).
    pub instances: usize,
    pub horizons: Vec<u64>,
    /// Independent stochastic runs averaged by the ball check.
    pub runs_per_instance: usize,
    pub rpcngd_draws: usize,
    pub clt_draws: usize,
    pub clt_batch_sizes: Vec<usize>,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 150,
            horizons: vec![100, 1000, 10_000],
            runs_per_instance: 20,
            rpcngd_draws: 2000,
            clt_draws: 10_000,
            clt_batch_sizes: vec![2, 8, 32, 128],
        }
    }
}

/// Smallest batch size at which the small-noise projection expansion is
/// held to the Monte-Carlo tolerance.
pub const CLT_ASYMPTOTIC_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct BatteryRow {
    pub cells: Vec<String>,
    pub satisfied: bool,
    pub hypotheses_ok: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatteryTable {
    pub battery: Battery,
    pub header: Vec<String>,
    pub rows: Vec<BatteryRow>,
}

impl BatteryTable {
    /// Rows where the hypotheses hold but the check failed.
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.hypotheses_ok && !r.satisfied).count()
    }

    pub fn hypotheses_ok_count(&self) -> usize {
        self.rows.iter().filter(|r| r.hypotheses_ok).count()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(&r.cells)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:?}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".into(), fmt_f64)
}

const THEOREM_HEADER: [&str; 9] = [
    "theorem",
    "instance",
    "horizon",
    "class",
    "lhs",
    "rhs",
    "satisfied",
    "hypotheses_ok",
    "detail",
];

const TIGHTNESS_HEADER: [&str; 14] = [
    "instance",
    "curvature",
    "cos_alpha",
    "ratio",
    "eta",
    "predicted",
    "measured",
    "rel_err",
    "threshold",
    "change_below",
    "change_above",
    "flip_ok",
    "satisfied",
    "hypotheses_ok",
];

const CLT_HEADER: [&str; 9] = [
    "n_tilde",
    "predicted",
    "measured",
    "stderr",
    "diff_stderr",
    "attenuation",
    "scaled_attenuation",
    "satisfied",
    "hypotheses_ok",
];

pub fn header(b: Battery) -> Vec<String> {
    let h: &[&str] = match b {
        Battery::Tightness => &TIGHTNESS_HEADER,
        Battery::Clt => &CLT_HEADER,
        _ => &THEOREM_HEADER,
    };
    h.iter().map(|s| s.to_string()).collect()
}

/// Number of independent units of a battery.
pub fn units(b: Battery, cfg: &BatteryConfig) -> usize {
    match b {
        Battery::Clt => cfg.clt_batch_sizes.len(),
        _ => cfg.instances,
    }
}

fn unit_rng(b: Battery, cfg: &BatteryConfig, i: usize) -> SeededRng {
    SeededRng::new(cfg.seed, Stream::Other(b.code() * 1_000_000 + i as u64))
}

/// Rows of unit `i`.
pub fn run_unit(b: Battery, cfg: &BatteryConfig, i: usize) -> Result<Vec<BatteryRow>> {
    if cfg.horizons.is_empty() || cfg.horizons.contains(&0) {
        return domain("horizons must be non-empty and positive");
    }
    let mut rng = unit_rng(b, cfg, i);
    match b {
        Battery::Gd => gd_unit(cfg, i, &mut rng),
        Battery::PcngdV1 => pcngd_unit(cfg, i, &mut rng, PcngdVariant::V1),
        Battery::PcngdV2 => pcngd_unit(cfg, i, &mut rng, PcngdVariant::V2),
        Battery::Rpcngd => rpcngd_unit(cfg, i, &mut rng),
        Battery::PlDecreasing => pl_unit(cfg, i, &mut rng, PlMode::Decreasing),
        Battery::PlConstant => pl_unit(cfg, i, &mut rng, PlMode::Constant),
        Battery::PcnsgdBall => ball_unit(cfg, i, &mut rng),
        Battery::Multiclass => multiclass_unit(i, &mut rng),
        Battery::Tightness => tightness_unit(i, &mut rng),
        Battery::Clt => clt_unit(cfg, i, &mut rng),
    }
}

pub fn assemble(b: Battery, parts: Vec<Vec<BatteryRow>>) -> BatteryTable {
    BatteryTable {
        battery: b,
        header: header(b),
        rows: parts.into_iter().flatten().collect(),
    }
}

/// Runs every unit in order on the calling thread.
pub fn run_battery(b: Battery, cfg: &BatteryConfig) -> Result<BatteryTable> {
    let parts = (0..units(b, cfg))
        .map(|i| run_unit(b, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(b, parts))
}

fn theorem_row(theorem: &str, i: usize, horizon: u64, class: usize, rep: &BoundReport) -> BatteryRow {
    BatteryRow {
        cells: vec![
            theorem.into(),
            format!("i{i:03}"),
            horizon.to_string(),
            class.to_string(),
            fmt_f64(rep.lhs),
            fmt_f64(rep.rhs),
            rep.satisfied.to_string(),
            rep.hypotheses_ok.to_string(),
            rep.detail.clone().unwrap_or_default(),
        ],
        satisfied: rep.satisfied,
        hypotheses_ok: rep.hypotheses_ok,
    }
}

fn gaussian(m: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..m).map(|_| rng.standard_normal()).collect()
}

fn uniform(lo: f64, hi: f64, rng: &mut SeededRng) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// Random pair in 2 to 5 dimensions with a minority-like lighter class 1.
/// With `shared_center` both classes are minimized at the same point;
/// otherwise the centers are perturbed apart.
fn quad_instance(rng: &mut SeededRng, shared_center: bool) -> Result<(TwoClassQuadratic, Vec<f64>)> {
    let m = 2 + rng.below(4);
    let center = gaussian(m, rng);
    let w0 = uniform(0.5, 1.0, rng);
    let w1 = w0 / uniform(2.0, 20.0, rng);
    let mut classes = Vec::with_capacity(2);
    for w in [w0, w1] {
        let c: Vec<f64> = if shared_center {
            center.clone()
        } else {
            center.iter().map(|v| v + 0.3 * rng.standard_normal()).collect()
        };
        classes.push(random_class_quadratic(c, 0.5, 2.0, w, rng)?);
    }
    let dir = gaussian(m, rng);
    let r = uniform(0.5, 3.0, rng) / l2_norm(&dir);
    let x0 = center.iter().zip(&dir).map(|(c, d)| c + r * d).collect();
    let c1 = classes.pop().expect("two classes");
    let c0 = classes.pop().expect("two classes");
    Ok((TwoClassQuadratic::new(c0, c1)?, x0))
}

fn gd_unit(cfg: &BatteryConfig, i: usize, rng: &mut SeededRng) -> Result<Vec<BatteryRow>> {
    let shared = rng.uniform() < 0.8;
    let (q, x0) = quad_instance(rng, shared)?;
    let l2 = q.smoothness();
    let c = uniform(0.05, 2.0, rng);
    let frac = uniform(0.1, 0.9, rng);
    let g = q.grads(&x0);
    let cos0 = cosine_angle(&g[0], &g[1])?.unwrap_or(0.0);
    let mut rows = Vec::new();
    for &t in &cfg.horizons {
        for l in 0..2 {
            let d0 = q.classes[l].gap(&x0);
            let sched = StepSchedule::GdMargin {
                c,
                horizon: t,
                smoothness: l2,
            };
            let traj = run_full_batch(&q, &x0, FullBatchRule::Gd, &sched, l, t as usize)?;
            let k = TheoremConstants {
                l2: Some(l2),
                d0: Some(d0),
                c: Some(c),
                horizon: Some(t),
                ..Default::default()
            };
            let rep = thm_gd_bound_eval(&k, &traj, l, GdStepRule::MinRule)?;
            rows.push(theorem_row("gd_min_rule", i, t, l, &rep));

            // Constant step: a fraction of the largest step that keeps the
            // decrease coefficient positive at x_0.
            let r0 = l2_norm(&g[1 - l]) / l2_norm(&g[l]);
            let margin0 = 1.0 + cos0 * r0;
            let eta = if margin0 > 0.0 {
                frac * margin0 / (l2 * (1.0 + r0 * r0))
            } else {
                0.01 / l2
            };
            let traj = run_full_batch(
                &q,
                &x0,
                FullBatchRule::Gd,
                &StepSchedule::Constant { eta },
                l,
                t as usize,
            )?;
            let k = TheoremConstants {
                l2: Some(l2),
                d0: Some(d0),
                eta: Some(eta),
                horizon: Some(t),
                ..Default::default()
            };
            let rep = thm_gd_bound_eval(&k, &traj, l, GdStepRule::Constant)?;
            rows.push(theorem_row("gd_constant", i, t, l, &rep));
        }
    }
    Ok(rows)
}

fn pcngd_unit(cfg: &BatteryConfig, i: usize, rng: &mut SeededRng, variant: PcngdVariant) -> Result<Vec<BatteryRow>> {
    let shared = rng.uniform() < 0.8;
    let (q, x0) = quad_instance(rng, shared)?;
    let l2 = q.smoothness();
    let c = uniform(0.05, 1.0, rng);
    let name = match variant {
        PcngdVariant::V1 => "pcngd_v1",
        PcngdVariant::V2 => "pcngd_v2",
    };
    let mut rows = Vec::new();
    for &t in &cfg.horizons {
        let sched = match variant {
            PcngdVariant::V1 => StepSchedule::InvSqrt { c, horizon: t },
            PcngdVariant::V2 => StepSchedule::AngleScaled { c, horizon: t },
        };
        let traj = run_full_batch(&q, &x0, FullBatchRule::Pcngd, &sched, 0, t as usize)?;
        for l in 0..2 {
            let k = TheoremConstants {
                l2: Some(l2),
                d0: Some(q.classes[l].gap(&x0)),
                c: Some(c),
                horizon: Some(t),
                ..Default::default()
            };
            let rep = thm_pcngd_bound_eval(&k, &traj, l, variant)?;
            rows.push(theorem_row(name, i, t, l, &rep));
        }
    }
    Ok(rows)
}

fn rpcngd_unit(cfg: &BatteryConfig, i: usize, rng: &mut SeededRng) -> Result<Vec<BatteryRow>> {
    let shared = rng.uniform() < 0.8;
    let (q, x0) = quad_instance(rng, shared)?;
    let l2 = q.smoothness();
    let c = uniform(0.05, 1.0, rng);
    let mut rows = Vec::new();
    for &t in &cfg.horizons {
        let sched = StepSchedule::InvSqrt { c, horizon: t };
        let traj = run_full_batch(&q, &x0, FullBatchRule::Pcngd, &sched, 0, t as usize)?;
        for l in 0..2 {
            let k = TheoremConstants {
                l2: Some(l2),
                d0: Some(q.classes[l].gap(&x0)),
                c: Some(c),
                horizon: Some(t),
                ..Default::default()
            };
            let r = thm_rpcngd_check(&k, &traj, l, cfg.rpcngd_draws, rng)?;
            let rep = BoundReport {
                lhs: r.estimate,
                rhs: r.rhs + 3.0 * r.stderr,
                satisfied: r.satisfied,
                hypotheses_ok: r.hypotheses_ok,
                detail: r.detail,
                constants: k,
            };
            rows.push(theorem_row("rpcngd", i, t, l, &rep));
        }
    }
    Ok(rows)
}

/// PCNGD under the class-GD inequality on a shared-center pair. `K` starts
/// from the geometry at `x_0` and is lowered until it is below
/// `min_t 2μ(1 + cos α_t)` on the resulting trajectory.
fn pl_unit(cfg: &BatteryConfig, i: usize, rng: &mut SeededRng, mode: PlMode) -> Result<Vec<BatteryRow>> {
    let (q, x0) = quad_instance(rng, true)?;
    let l2 = q.smoothness();
    let c = uniform(0.1, 0.9, rng);
    let radius_factor = [uniform(1.5, 3.0, rng), uniform(1.5, 3.0, rng)];
    let g = q.grads(&x0);
    let cos0 = cosine_angle(&g[0], &g[1])?.unwrap_or(0.0);
    let name = match mode {
        PlMode::Decreasing => "pl_decreasing",
        PlMode::Constant => "pl_constant",
    };
    let mut rows = Vec::new();
    for &t in &cfg.horizons {
        for l in 0..2 {
            let r0 = l2_norm(&crate::tensor::sub(&x0, q.classes[l].center()));
            let mu = 1.0 / (radius_factor[l] * r0);
            let mut next = 2.0 * mu * (1.0 + cos0);
            let (mut kk, mut traj) = (next, None);
            for _ in 0..20 {
                kk = next;
                let sched = match mode {
                    PlMode::Decreasing => StepSchedule::PlDecreasing { k: kk },
                    PlMode::Constant => StepSchedule::PlConstant { c, k: kk },
                };
                let tr = run_full_batch(&q, &x0, FullBatchRule::Pcngd, &sched, l, t as usize)?;
                let min_w = tr.points[..tr.horizon()]
                    .iter()
                    .filter_map(|p| p.cos_alpha.map(|c| 1.0 + c))
                    .fold(f64::INFINITY, f64::min);
                let bound = 2.0 * mu * min_w;
                traj = Some(tr);
                if kk <= bound || !(bound > 0.0) {
                    break;
                }
                next = bound * 0.99;
            }
            let traj = traj.expect("at least one attempt");
            let k = TheoremConstants {
                l2: Some(l2),
                mu: Some(mu),
                k: Some(kk),
                c: Some(c),
                d0: Some(q.classes[l].gap(&x0)),
                horizon: Some(t),
                ..Default::default()
            };
            let rep = thm_pl_rate_check(&k, &traj, l, mode)?;
            rows.push(theorem_row(name, i, t, l, &rep));
        }
    }
    Ok(rows)
}

/// `f^(l)(x) = (1/n) Σ_{i ∈ C_l} (h/2)‖x − p_i‖²` with both class means at
/// the same point.
struct FiniteSum {
    points: [Vec<Vec<f64>>; 2],
    h: f64,
    n: f64,
    center: Vec<f64>,
}

impl FiniteSum {
    fn scale(&self, l: usize) -> f64 {
        self.h * self.points[l].len() as f64 / self.n
    }

    fn grad(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let s = self.scale(l);
        x.iter().zip(&self.center).map(|(a, c)| s * (a - c)).collect()
    }

    fn gap(&self, l: usize, x: &[f64]) -> f64 {
        let e = crate::tensor::sub(x, &self.center);
        0.5 * self.scale(l) * dot_unchecked(&e, &e)
    }

    /// Unbiased batch estimate `(n_l/n)·mean_{i∈B} h(x − p_i)`.
    fn batch_grad(&self, l: usize, x: &[f64], b: usize, rng: &mut SeededRng) -> Vec<f64> {
        let pts = &self.points[l];
        let rows = rng.sample_indices(pts.len(), b);
        let mut mean = vec![0.0; x.len()];
        for &r in &rows {
            for (m, p) in mean.iter_mut().zip(&pts[r]) {
                *m += p;
            }
        }
        let s = self.scale(l);
        let inv = 1.0 / rows.len() as f64;
        x.iter().zip(&mean).map(|(a, m)| s * (a - m * inv)).collect()
    }

    fn smoothness(&self) -> f64 {
        self.scale(0).max(self.scale(1))
    }
}

fn finite_sum_instance(rng: &mut SeededRng) -> Result<(FiniteSum, Vec<f64>, [usize; 2])> {
    let m = 2 + rng.below(3);
    let counts = [20 + rng.below(41), 4 + rng.below(9)];
    let h = uniform(0.5, 2.0, rng);
    let center = gaussian(m, rng);
    let mut points: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for l in 0..2 {
        let spread = uniform(0.2, 1.5, rng);
        let mut pts: Vec<Vec<f64>> = (0..counts[l])
            .map(|_| center.iter().map(|c| c + spread * rng.standard_normal()).collect())
            .collect();
        // Recenter so the class mean is exactly the shared center.
        let mut mean = vec![0.0; m];
        for p in &pts {
            for (a, v) in mean.iter_mut().zip(p) {
                *a += v / counts[l] as f64;
            }
        }
        for p in &mut pts {
            for j in 0..m {
                p[j] += center[j] - mean[j];
            }
        }
        points[l] = pts;
    }
    let dir = gaussian(m, rng);
    let r = uniform(0.5, 3.0, rng) / l2_norm(&dir);
    let x0 = center.iter().zip(&dir).map(|(c, d)| c + r * d).collect();
    let batch = [(counts[0] / 5).max(2), 2];
    let fs = FiniteSum {
        points,
        h,
        n: (counts[0] + counts[1]) as f64,
        center,
    };
    if !(fs.smoothness() > 0.0) {
        return domain("degenerate finite-sum instance");
    }
    Ok((fs, x0, batch))
}

fn ball_unit(cfg: &BatteryConfig, i: usize, rng: &mut SeededRng) -> Result<Vec<BatteryRow>> {
    let (fs, x0, batch) = finite_sum_instance(rng)?;
    let c = uniform(0.1, 1.0, rng);
    let mut rows = Vec::new();
    for &t in &cfg.horizons {
        let steps = t as usize;
        let eta = c / (t as f64).sqrt();
        let checkpoints: Vec<usize> = (0..10).map(|j| j * steps / 10).collect();
        let mut probe_points = Vec::new();
        let mut runs = Vec::with_capacity(cfg.runs_per_instance);
        for run in 0..cfg.runs_per_instance {
            let mut state = OptimizerState::new(x0.clone());
            let mut tr = StochasticTrajectory::default();
            for s in 0..steps {
                if run == 0 && checkpoints.contains(&s) {
                    probe_points.push(state.params.clone());
                }
                let x = &state.params;
                tr.grad_norms.push((0..2).map(|l| l2_norm(&fs.grad(l, x))).collect());
                let g: Vec<Vec<f64>> = (0..2).map(|l| fs.batch_grad(l, x, batch[l], rng)).collect();
                tr.cos_alpha.push(cosine_angle(&g[0], &g[1])?);
                tr.eta.push(eta);
                pcnsgd_step(&mut state, &g, eta)?;
            }
            runs.push(tr);
        }
        for l in 0..2 {
            let mut sigma = 0.0_f64;
            for x in &probe_points {
                let full = fs.grad(l, x);
                for _ in 0..1000 {
                    let g = fs.batch_grad(l, x, batch[l], rng);
                    sigma = sigma.max(l2_norm(&crate::tensor::sub(&full, &g)));
                }
            }
            let k = TheoremConstants {
                l2: Some(fs.smoothness()),
                d0: Some(fs.gap(l, &x0)),
                c: Some(c),
                sigma: Some(sigma),
                horizon: Some(t),
                ..Default::default()
            };
            let rep = thm_pcnsgd_ball_check(&k, &runs, l)?;
            rows.push(theorem_row("pcnsgd_ball", i, t, l, &rep));
        }
    }
    Ok(rows)
}

fn check_row(theorem: &str, id: String, lhs: f64, rhs: f64, satisfied: bool) -> BatteryRow {
    BatteryRow {
        cells: vec![
            theorem.into(),
            id,
            String::new(),
            "0".into(),
            fmt_f64(lhs),
            fmt_f64(rhs),
            satisfied.to_string(),
            "true".into(),
            String::new(),
        ],
        satisfied,
        hypotheses_ok: true,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

/// Worst-case constructions for class 0 among `L` classes: the other
/// gradients collinear and aligned, norms proportional to class counts.
pub fn collinear_gradients(counts: &[usize], typical_norm: f64, rng: &mut SeededRng, dim: usize) -> Vec<Vec<f64>> {
    let basis = random_orthogonal(dim, rng);
    let (u, v) = (&basis[..dim], &basis[dim..2 * dim]);
    let mut grads = vec![u
        .iter()
        .map(|a| a * counts[0] as f64 * typical_norm)
        .collect::<Vec<f64>>()];
    for &n in &counts[1..] {
        grads.push(v.iter().map(|a| a * n as f64 * typical_norm).collect());
    }
    grads
}

fn multiclass_unit(i: usize, rng: &mut SeededRng) -> Result<Vec<BatteryRow>> {
    let id = |l: usize| format!("i{i:03}-L{l}");
    let mut rows = Vec::new();
    let dim = 4;
    let l = if i.is_multiple_of(2) { 3 } else { 10 };
    let m = uniform(0.1, 3.0, rng);

    let balanced = vec![5 + rng.below(20); l];
    let g = collinear_gradients(&balanced, m, rng, dim);
    let r = multiclass_condition_check(&g, 0)?;
    let got = r.gd.ratio.unwrap_or(f64::NAN);
    let want = (l - 1) as f64;
    rows.push(check_row("collinear_balanced", id(l), got, want, close(got, want)));
    let got = r.ratio_normalized.unwrap_or(f64::NAN);
    rows.push(check_row("collinear_normalized", id(l), got, want, close(got, want)));

    let mut counts = vec![1 + rng.below(5)];
    counts.extend((1..l).map(|_| 10 + rng.below(200)));
    let g = collinear_gradients(&counts, m, rng, dim);
    let got = multiclass_condition_check(&g, 0)?.gd.ratio.unwrap_or(f64::NAN);
    let want = counts[1..].iter().sum::<usize>() as f64 / counts[0] as f64;
    rows.push(check_row("collinear_imbalanced", id(l), got, want, close(got, want)));

    // Random sets: the normalized ratio never exceeds L - 1, and it ignores
    // per-class rescaling of the losses.
    let lr = 3 + rng.below(8);
    let d = 2 + rng.below(6);
    let g: Vec<Vec<f64>> = (0..lr)
        .map(|_| {
            let s = (3.0 * rng.standard_normal()).exp();
            (0..d).map(|_| s * rng.standard_normal()).collect()
        })
        .collect();
    let r = multiclass_condition_check(&g, 0)?;
    let got = r.ratio_normalized.unwrap_or(f64::NAN);
    let cap = (lr - 1) as f64;
    rows.push(check_row("normalized_range", id(lr), got, cap, got <= cap + 1e-12));
    let scaled: Vec<Vec<f64>> = g
        .iter()
        .map(|v| {
            let s = (2.0 * rng.standard_normal()).exp();
            v.iter().map(|a| a * s).collect()
        })
        .collect();
    let got2 = multiclass_condition_check(&scaled, 0)?
        .ratio_normalized
        .unwrap_or(f64::NAN);
    rows.push(check_row(
        "normalized_scale_invariance",
        id(lr),
        got2,
        got,
        close(got2, got),
    ));

    // Two classes: both margins reduce to the pair margin 1 + cos α C.
    let g2 = vec![gaussian(d, rng), gaussian(d, rng)];
    let r = multiclass_condition_check(&g2, 1)?;
    let pair = match cosine_angle(&g2[0], &g2[1])? {
        Some(c) => 1.0 + c * l2_norm(&g2[0]) / l2_norm(&g2[1]),
        None => f64::NAN,
    };
    let got = r.gd.margin.unwrap_or(f64::NAN);
    rows.push(check_row("two_class_reduction", id(2), got, pair, close(got, pair)));
    Ok(rows)
}

fn tightness_unit(i: usize, rng: &mut SeededRng) -> Result<Vec<BatteryRow>> {
    let m = 2 + rng.below(4);
    let curvature = uniform(0.5, 2.0, rng);
    let ratio = uniform(0.2_f64.ln(), 20.0_f64.ln(), rng).exp();
    // Keep 1 + cos α C ≥ 0.05 so the threshold exists.
    let cos_lo = ((0.05 - 1.0) / ratio).max(-0.999);
    let cos = uniform(cos_lo, 0.999, rng);
    let scale = uniform(0.5, 2.0, rng);
    let basis = random_orthogonal(m, rng);
    let q = isotropic_pair(cos.acos(), ratio, curvature, scale, &basis[..m], &basis[m..2 * m])?;
    let x = vec![0.0; m];
    let threshold = tightness_threshold(cos, ratio, curvature).expect("positive margin by construction");
    let factor = if rng.uniform() < 0.5 {
        uniform(0.2, 0.8, rng)
    } else {
        uniform(1.2, 1.8, rng)
    };
    let rep = gd_one_step_change(&q, &x, threshold * factor, 1)?;
    let below = gd_one_step_change(&q, &x, threshold * (1.0 - 1e-6), 1)?;
    let above = gd_one_step_change(&q, &x, threshold * (1.0 + 1e-6), 1)?;
    let flip_ok = below.measured < 0.0 && above.measured > 0.0;
    let sign_ok = rep.increase_predicted == (rep.measured > 0.0);
    let satisfied = rep.rel_err <= 1e-10 && flip_ok && sign_ok;
    Ok(vec![BatteryRow {
        cells: vec![
            format!("i{i:03}"),
            fmt_f64(curvature),
            fmt_f64(rep.cos_alpha),
            fmt_f64(rep.ratio),
            fmt_f64(rep.eta),
            fmt_f64(rep.predicted),
            fmt_f64(rep.measured),
            fmt_f64(rep.rel_err),
            fmt_opt(rep.threshold),
            fmt_f64(below.measured),
            fmt_f64(above.measured),
            flip_ok.to_string(),
            satisfied.to_string(),
            "true".into(),
        ],
        satisfied,
        hypotheses_ok: true,
    }])
}

/// Dimension and relative noise level of the synthetic projection check.
pub const CLT_DIM: usize = 20;
pub const CLT_NOISE_REL_SD: f64 = 0.05;

fn clt_unit(cfg: &BatteryConfig, i: usize, rng: &mut SeededRng) -> Result<Vec<BatteryRow>> {
    let n_tilde = cfg.clt_batch_sizes[i];
    // The same full-batch gradient for every batch size.
    let mut grng = SeededRng::new(cfg.seed, Stream::Other(Battery::Clt.code() * 1_000_000 + 999_999));
    let fbg = gaussian(CLT_DIM, &mut grng);
    let noise = NoiseModel::Isotropic {
        sd: CLT_NOISE_REL_SD * l2_norm(&fbg),
    };
    let r = clt_projection_check(&fbg, &noise, n_tilde, cfg.clt_draws, rng)?;
    let satisfied = (r.measured - r.predicted).abs() <= 3.0 * r.stderr;
    let hypotheses_ok = n_tilde >= CLT_ASYMPTOTIC_BATCH;
    Ok(vec![BatteryRow {
        cells: vec![
            n_tilde.to_string(),
            fmt_f64(r.predicted),
            fmt_f64(r.measured),
            fmt_f64(r.stderr),
            fmt_f64(r.diff_stderr),
            fmt_f64(1.0 - r.measured),
            fmt_f64(n_tilde as f64 * (1.0 - r.measured)),
            satisfied.to_string(),
            hypotheses_ok.to_string(),
        ],
        satisfied,
        hypotheses_ok,
    }])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BatteryConfig {
        BatteryConfig {
            instances: 4,
            horizons: vec![10, 100],
            runs_per_instance: 20,
            rpcngd_draws: 200,
            clt_draws: 2000,
            ..Default::default()
        }
    }

    #[test]
    fn names_round_trip() {
        for b in Battery::ALL {
            assert_eq!(b.name().parse::<Battery>().unwrap(), b);
        }
    }

    #[test]
    fn unknown_name_lists_valid_batteries() {
        let err = "nope".parse::<Battery>().unwrap_err().to_string();
        assert!(err.contains("nope"));
        for b in Battery::ALL {
            assert!(err.contains(b.name()));
        }
    }

    #[test]
    fn small_batteries_have_no_violations() {
        let cfg = small();
        for b in Battery::ALL {
            let t = run_battery(b, &cfg).unwrap();
            assert_eq!(
                t.violations(),
                0,
                "{b}: {:?}",
                t.rows.iter().find(|r| r.hypotheses_ok && !r.satisfied)
            );
            assert!(!t.rows.is_empty());
            assert!(t.rows.iter().all(|r| r.cells.len() == t.header.len()));
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let cfg = small();
        for b in [Battery::Gd, Battery::PcnsgdBall, Battery::Tightness] {
            let a = run_battery(b, &cfg).unwrap().to_csv_string().unwrap();
            let c = run_battery(b, &cfg).unwrap().to_csv_string().unwrap();
            assert_eq!(a, c);
        }
    }

    #[test]
    fn units_are_order_independent() {
        let cfg = small();
        let whole = run_battery(Battery::PcngdV1, &cfg).unwrap();
        let mut parts: Vec<(usize, Vec<BatteryRow>)> = (0..units(Battery::PcngdV1, &cfg))
            .rev()
            .map(|i| (i, run_unit(Battery::PcngdV1, &cfg, i).unwrap()))
            .collect();
        parts.sort_by_key(|p| p.0);
        let merged = assemble(Battery::PcngdV1, parts.into_iter().map(|p| p.1).collect());
        assert_eq!(whole, merged);
    }

    #[test]
    fn halving_batch_size_grows_sigma() {
        let mut rng = SeededRng::new(4, Stream::Other(77));
        let (fs, x0, _) = finite_sum_instance(&mut rng).unwrap();
        let n0 = fs.points[0].len();
        let sigma = |b: usize, rng: &mut SeededRng| {
            let full = fs.grad(0, &x0);
            (0..2000)
                .map(|_| l2_norm(&crate::tensor::sub(&full, &fs.batch_grad(0, &x0, b, rng))))
                .fold(0.0, f64::max)
        };
        let big = sigma((n0 / 2).max(2), &mut rng);
        let half = sigma((n0 / 4).max(1), &mut rng);
        assert!(half > big);
    }

    #[test]
    fn batch_gradient_is_unbiased() {
        let mut rng = SeededRng::new(5, Stream::Other(78));
        let (fs, x0, batch) = finite_sum_instance(&mut rng).unwrap();
        let full = fs.grad(1, &x0);
        let draws = 20_000;
        let mut mean = vec![0.0; x0.len()];
        for _ in 0..draws {
            let g = fs.batch_grad(1, &x0, batch[1], &mut rng);
            for (m, v) in mean.iter_mut().zip(&g) {
                *m += v / draws as f64;
            }
        }
        let err = l2_norm(&crate::tensor::sub(&mean, &full));
        assert!(err < 0.05 * l2_norm(&full) + 1e-3, "{err}");
    }

    #[test]
    fn collinear_balanced_reaches_l_minus_one() {
        let mut rng = SeededRng::new(6, Stream::Other(79));
        for l in [3, 10] {
            let g = collinear_gradients(&vec![7; l], 0.3, &mut rng, 5);
            let r = multiclass_condition_check(&g, 0).unwrap();
            assert!((r.gd.ratio.unwrap() - (l - 1) as f64).abs() < 1e-12);
        }
    }
}
