//! Update rules, step-size schedules and the training loop.
//!
//! Every rule sees the per-class gradients of the current step and combines
//! them in its own way:
//!
//! | rule | update direction |
//! |------|------------------|
//! | GD, SGD, SGD+O | `Σ_l g_l` |
//! | PCNGD, PCNSGD, PCNSGD+O | `Σ_l g_l / ‖g_l‖` |
//! | PCNSGD+R | `Σ_l g_l / (p_l ‖g_l‖)`, `p_l = cos(g_l, G_l)` |
//!
//! where `G_l` is a cached full-batch gradient of class `l`. What differs
//! between the plain and stochastic variants is only which rows feed `g_l`
//! and how they are normalized; see [`Algorithm::normalization`].

use serde::{Deserialize, Serialize};

use crate::data::{plan_oversampled_batches, plan_per_class_ratio_batches, plan_uniform_batches, BatchPlan, Dataset};
use crate::diagnostics::{class_geometry, recall_metrics, EvalRow, RunLog, P_MIN};
use crate::error::{domain, Error, Result};
use crate::model::{per_class_loss, Model, Normalization, PerClassGradients};
use crate::rng::{SeededRng, Stream};
use crate::tensor::{axpy, cosine_angle, l2_norm, EPS_NORM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Gd,
    Pcngd,
    Sgd,
    Pcnsgd,
    SgdO,
    PcnsgdO,
    PcnsgdR,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Gd,
        Algorithm::Pcngd,
        Algorithm::Sgd,
        Algorithm::Pcnsgd,
        Algorithm::SgdO,
        Algorithm::PcnsgdO,
        Algorithm::PcnsgdR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gd => "gd",
            Algorithm::Pcngd => "pcngd",
            Algorithm::Sgd => "sgd",
            Algorithm::Pcnsgd => "pcnsgd",
            Algorithm::SgdO => "sgd_o",
            Algorithm::PcnsgdO => "pcnsgd_o",
            Algorithm::PcnsgdR => "pcnsgd_r",
        }
    }

    pub fn is_full_batch(self) -> bool {
        matches!(self, Algorithm::Gd | Algorithm::Pcngd)
    }

    pub fn normalizes_per_class(self) -> bool {
        matches!(
            self,
            Algorithm::Pcngd | Algorithm::Pcnsgd | Algorithm::PcnsgdO | Algorithm::PcnsgdR
        )
    }

    /// How per-class gradients are scaled before the rule combines them.
    /// Plain rules divide by the number of rows in the step so the sum is
    /// the ordinary mean gradient; normalized rules are scale-free.
    pub fn normalization(self, rows_in_step: usize) -> Normalization {
        match self {
            Algorithm::Gd | Algorithm::Pcngd => Normalization::Dataset,
            Algorithm::Sgd | Algorithm::SgdO => Normalization::Count(rows_in_step.max(1)),
            _ => Normalization::ClassBatch,
        }
    }

    /// Checks that the batch spec suits the algorithm.
    pub fn check_batch(self, batch: Option<&BatchSpec>) -> Result<()> {
        let ok = matches!(
            (self, batch),
            (Algorithm::Gd | Algorithm::Pcngd, None)
                | (Algorithm::Sgd, Some(BatchSpec::Batches(_) | BatchSpec::Uniform(_)))
                | (Algorithm::Pcnsgd | Algorithm::PcnsgdR, Some(BatchSpec::Batches(_)))
                | (Algorithm::SgdO | Algorithm::PcnsgdO, Some(BatchSpec::PerClass(_)))
        );
        if ok {
            return Ok(());
        }
        let want = match self {
            Algorithm::Gd | Algorithm::Pcngd => "no `batch` (full-batch rule)",
            Algorithm::Sgd => "`batch` = {\"batches\": N_b} or {\"uniform\": B}",
            Algorithm::Pcnsgd | Algorithm::PcnsgdR => "`batch` = {\"batches\": N_b}",
            Algorithm::SgdO | Algorithm::PcnsgdO => "`batch` = {\"per_class\": s}",
        };
        Err(Error::Config(format!(
            "`algorithm` = {} requires {want}, got `batch` = {}",
            self.name(),
            batch.map_or("none".into(), |b| format!("{b:?}"))
        )))
    }
}

/// Batch layout for the stochastic rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSpec {
    /// `N_b` stratified batches per epoch, keeping the class ratio.
    Batches(usize),
    /// `s` examples of every class per step, minorities oversampled.
    PerClass(usize),
    /// Shuffled batches of this size with no stratification.
    Uniform(usize),
}

impl BatchSpec {
    pub fn plan(&self, ds: &Dataset, rng: &mut SeededRng) -> Result<BatchPlan> {
        match *self {
            BatchSpec::Batches(n) => plan_per_class_ratio_batches(ds, n, rng),
            BatchSpec::PerClass(s) => plan_oversampled_batches(ds, s, rng),
            BatchSpec::Uniform(b) => plan_uniform_batches(ds, b, rng),
        }
    }
}

/// Geometry available when a schedule picks the next step size.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepContext {
    pub t: u64,
    pub cos_alpha: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant {
        eta: f64,
    },
    /// `c / √T`.
    InvSqrt {
        c: f64,
        horizon: u64,
    },
    /// `c / ((1 + cos α_t) √T)`.
    AngleScaled {
        c: f64,
        horizon: u64,
    },
    /// `min((1 + cos α_t C_t) / (2 (1 + C_t²) L), c / √T)`.
    GdMargin {
        c: f64,
        horizon: u64,
        smoothness: f64,
    },
    /// `(2t + 1) / (K (t + 1)²)`.
    PlDecreasing {
        k: f64,
    },
    /// `c / K`.
    PlConstant {
        c: f64,
        k: f64,
    },
}

impl StepSchedule {
    pub fn eta(&self, ctx: &StepContext) -> Result<f64> {
        let sqrt_t = |h: u64| (h.max(1) as f64).sqrt();
        let eta = match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::InvSqrt { c, horizon } => c / sqrt_t(horizon),
            StepSchedule::AngleScaled { c, horizon } => {
                let cos = ctx
                    .cos_alpha
                    .ok_or_else(|| Error::Domain("angle-scaled step needs a defined angle".into()))?;
                if cos <= -1.0 {
                    return domain("angle-scaled step is unbounded at cos α = -1");
                }
                c / ((1.0 + cos) * sqrt_t(horizon))
            }
            StepSchedule::GdMargin { c, horizon, smoothness } => {
                // A vanished other class leaves the angle undefined; its
                // term then drops out of the margin.
                let (cos, r) = match (ctx.cos_alpha, ctx.ratio) {
                    (Some(cos), Some(r)) => (cos, r),
                    (None, Some(r)) => (0.0, r),
                    _ => return domain("margin step needs a defined ratio"),
                };
                let margin = 1.0 + cos * r;
                if margin <= 0.0 {
                    return domain(format!("margin step undefined at non-positive margin {margin}"));
                }
                (margin / (2.0 * (1.0 + r * r) * smoothness)).min(c / sqrt_t(horizon))
            }
            StepSchedule::PlDecreasing { k } => {
                let t = ctx.t as f64;
                (2.0 * t + 1.0) / (k * (t + 1.0) * (t + 1.0))
            }
            StepSchedule::PlConstant { c, k } => c / k,
        };
        if !(eta > 0.0) || !eta.is_finite() {
            return domain(format!("step size {eta} at t = {}", ctx.t));
        }
        Ok(eta)
    }
}

/// Cached full-batch per-class gradients for the rescaled rule.
#[derive(Clone, Debug, PartialEq)]
pub struct FbgCache {
    pub grads: Vec<Vec<f64>>,
    pub computed_at: u64,
    pub refresh_interval: u64,
}

impl FbgCache {
    pub fn age(&self, t: u64) -> u64 {
        t.saturating_sub(self.computed_at)
    }

    pub fn is_stale(&self, t: u64) -> bool {
        self.age(t) >= self.refresh_interval
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub params: Vec<f64>,
    pub t: u64,
    pub fbg_cache: Option<FbgCache>,
    pub p_min: f64,
}

impl OptimizerState {
    pub fn new(params: Vec<f64>) -> Self {
        Self {
            params,
            t: 0,
            fbg_cache: None,
            p_min: P_MIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub eta: f64,
    /// Direction `d` of the update `x ← x - η d`.
    pub direction: Vec<f64>,
    /// Classes skipped because their gradient vanished.
    pub degenerate: Vec<bool>,
    /// Classes whose projection term was clamped to `p_min`.
    pub clamped: Vec<bool>,
    /// Projection term used for each class by the rescaled rule.
    pub projections: Vec<Option<f64>>,
    /// Every class was degenerate, so the parameters were left unchanged.
    pub stationary: bool,
}

fn check_lengths(state: &OptimizerState, grads: &[Vec<f64>]) -> Result<()> {
    if grads.is_empty() {
        return domain("no class gradients");
    }
    if let Some(g) = grads.iter().find(|g| g.len() != state.params.len()) {
        return crate::error::dim(format!(
            "gradient of length {} for {} parameters",
            g.len(),
            state.params.len()
        ));
    }
    Ok(())
}

fn apply(state: &mut OptimizerState, eta: f64, direction: &[f64]) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return domain(format!("step size must be positive and finite, got {eta}"));
    }
    let mut next = state.params.clone();
    axpy(&mut next, -eta, direction);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: state.t,
            detail: "non-finite parameters after update".into(),
        });
    }
    state.params = next;
    state.t += 1;
    Ok(())
}

/// `x ← x - η Σ_l g_l`.
pub fn gd_step(state: &mut OptimizerState, grads: &[Vec<f64>], eta: f64) -> Result<StepReport> {
    check_lengths(state, grads)?;
    let mut direction = vec![0.0; state.params.len()];
    for g in grads {
        axpy(&mut direction, 1.0, g);
    }
    apply(state, eta, &direction)?;
    let k = grads.len();
    Ok(StepReport {
        eta,
        direction,
        degenerate: vec![false; k],
        clamped: vec![false; k],
        projections: vec![None; k],
        stationary: false,
    })
}

/// Plain minibatch step on per-class batch terms; same arithmetic as GD.
pub fn sgd_step(state: &mut OptimizerState, grads: &[Vec<f64>], eta: f64) -> Result<StepReport> {
    gd_step(state, grads, eta)
}

/// Plain step on equal-size per-class batches; same arithmetic as GD.
pub fn sgd_oversampled_step(state: &mut OptimizerState, grads: &[Vec<f64>], eta: f64) -> Result<StepReport> {
    gd_step(state, grads, eta)
}

/// `x ← x - η Σ_l g_l / ‖g_l‖`, skipping classes with vanishing gradient.
pub fn pcngd_step(state: &mut OptimizerState, grads: &[Vec<f64>], eta: f64) -> Result<StepReport> {
    check_lengths(state, grads)?;
    let k = grads.len();
    let mut direction = vec![0.0; state.params.len()];
    let mut degenerate = vec![false; k];
    for (l, g) in grads.iter().enumerate() {
        let n = l2_norm(g);
        if n < EPS_NORM {
            degenerate[l] = true;
        } else {
            axpy(&mut direction, 1.0 / n, g);
        }
    }
    let stationary = degenerate.iter().all(|d| *d);
    if stationary {
        state.t += 1;
    } else {
        apply(state, eta, &direction)?;
    }
    Ok(StepReport {
        eta,
        direction,
        degenerate,
        clamped: vec![false; k],
        projections: vec![None; k],
        stationary,
    })
}

/// PCNGD arithmetic on per-class batch gradients.
pub fn pcnsgd_step(state: &mut OptimizerState, grads: &[Vec<f64>], eta: f64) -> Result<StepReport> {
    pcngd_step(state, grads, eta)
}

/// PCNGD arithmetic on equal-size per-class batches.
pub fn pcnsgd_oversampled_step(state: &mut OptimizerState, grads: &[Vec<f64>], eta: f64) -> Result<StepReport> {
    pcngd_step(state, grads, eta)
}

/// `x ← x - η Σ_l g_l / (p_l ‖g_l‖)` with `p_l = cos(g_l, G_l)` against the
/// cached full-batch gradient, clamped to `[p_min, 1]`.
///
/// Fails with [`Error::StaleCache`] when the cache is missing or at least
/// `refresh_interval` steps old; the caller refreshes and retries.
pub fn pcnsgd_r_step(state: &mut OptimizerState, grads: &[Vec<f64>], eta: f64) -> Result<StepReport> {
    check_lengths(state, grads)?;
    let t = state.t;
    let cache = state.fbg_cache.as_ref().ok_or(Error::StaleCache {
        age: u64::MAX,
        limit: 0,
    })?;
    if cache.is_stale(t) {
        return Err(Error::StaleCache {
            age: cache.age(t),
            limit: cache.refresh_interval,
        });
    }
    if cache.grads.len() != grads.len() {
        return domain("cache and batch disagree on the number of classes");
    }
    let k = grads.len();
    let mut direction = vec![0.0; state.params.len()];
    let mut degenerate = vec![false; k];
    let mut clamped = vec![false; k];
    let mut projections = vec![None; k];
    for (l, g) in grads.iter().enumerate() {
        let n = l2_norm(g);
        let Some(p) = cosine_angle(g, &cache.grads[l])?.filter(|_| n >= EPS_NORM) else {
            degenerate[l] = true;
            continue;
        };
        let p = if p < state.p_min {
            clamped[l] = true;
            state.p_min
        } else {
            p
        };
        projections[l] = Some(p);
        axpy(&mut direction, 1.0 / (p * n), g);
    }
    let stationary = degenerate.iter().all(|d| *d);
    if stationary {
        state.t += 1;
    } else {
        apply(state, eta, &direction)?;
    }
    Ok(StepReport {
        eta,
        direction,
        degenerate,
        clamped,
        projections,
        stationary,
    })
}

/// Dispatches to the rule for `alg`.
pub fn step(alg: Algorithm, state: &mut OptimizerState, grads: &[Vec<f64>], eta: f64) -> Result<StepReport> {
    match alg {
        Algorithm::Gd => gd_step(state, grads, eta),
        Algorithm::Sgd => sgd_step(state, grads, eta),
        Algorithm::SgdO => sgd_oversampled_step(state, grads, eta),
        Algorithm::Pcngd => pcngd_step(state, grads, eta),
        Algorithm::Pcnsgd => pcnsgd_step(state, grads, eta),
        Algorithm::PcnsgdO => pcnsgd_oversampled_step(state, grads, eta),
        Algorithm::PcnsgdR => pcnsgd_r_step(state, grads, eta),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub schedule: StepSchedule,
    #[serde(default)]
    pub batch: Option<BatchSpec>,
    pub epochs: u64,
    /// Steps between logged evaluations.
    #[serde(default = "default_eval_every", alias = "eval_interval")]
    pub eval_every: u64,
    /// Steps between refreshes of the full-batch gradient cache.
    #[serde(default = "default_refresh")]
    pub refresh_interval: u64,
    #[serde(default = "default_p_min")]
    pub p_min: f64,
}

fn default_eval_every() -> u64 {
    1
}

fn default_refresh() -> u64 {
    5
}

fn default_p_min() -> f64 {
    P_MIN
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.algorithm.check_batch(self.batch.as_ref())?;
        if self.eval_every == 0 || self.refresh_interval == 0 {
            return Err(Error::Config(
                "`eval_every` and `refresh_interval` must be positive".into(),
            ));
        }
        if !(self.p_min > 0.0 && self.p_min <= 1.0) {
            return Err(Error::Config(format!("`p_min` = {} outside (0, 1]", self.p_min)));
        }
        Ok(())
    }
}

/// Extra per-step record of the rescaled rule.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionTrace {
    pub t: u64,
    /// Cosine of each class's batch gradient with its current full-batch
    /// gradient, divided by the projection term actually used.
    pub rescaled: Vec<Option<f64>>,
    /// The same against the cached full-batch gradient the step used; 1
    /// unless the projection was clamped.
    pub rescaled_cached: Vec<Option<f64>>,
    /// Cosine with the current full-batch gradient, before rescaling.
    pub raw: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub model: Model,
    pub projections: Vec<ProjectionTrace>,
}

/// Options that only matter for diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct TraceOptions {
    /// Record per-step projections of the rescaled rule against fresh
    /// full-batch gradients (one extra full pass per step).
    pub projections: bool,
}

/// Trains `model` on `train`, logging to a [`RunLog`] evaluated on `test`.
///
/// Batches are drawn from the `Batching` stream of `seed`.
pub fn train(model: Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_traced(model, train, test, cfg, seed, TraceOptions::default())
}

pub fn train_traced(
    mut model: Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    trace: TraceOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.classes() != test.classes() || train.dim() != test.dim() {
        return domain("train and test sets differ in classes or dimension");
    }
    let alg = cfg.algorithm;
    let classes = train.classes();
    let reference = train.minority_class();
    let mut rng = SeededRng::new(seed, Stream::Batching);
    let mut state = OptimizerState::new(model.params().to_vec());
    state.p_min = cfg.p_min;
    let mut log = RunLog::new(classes, reference);
    let mut projections = Vec::new();
    let (mut degenerate, mut clamped) = (0u64, 0u64);

    let full = |m: &Model| PerClassGradients::compute(m, train, None, Normalization::Dataset);
    let eval = |m: &Model, t: u64, fg: &PerClassGradients, deg: u64, clp: u64| -> Result<EvalRow> {
        let geo = class_geometry(&fg.grads, reference)?;
        let eta = cfg
            .schedule
            .eta(&StepContext {
                t,
                cos_alpha: geo.cos_alpha,
                ratio: geo.ratio,
            })
            .unwrap_or(f64::NAN);
        let rtrain = recall_metrics(&m.predict(train.features())?, train.labels(), classes)?;
        let rtest = recall_metrics(&m.predict(test.features())?, test.labels(), classes)?;
        let loss_test = (0..classes)
            .map(|l| per_class_loss(m, test, l))
            .collect::<Result<Vec<_>>>()?;
        let row = EvalRow {
            t,
            eta,
            loss_train: fg.losses.clone(),
            loss_test,
            recall_train: rtrain.per_class.iter().map(|r| r.unwrap_or(f64::NAN)).collect(),
            recall_test: rtest.per_class.iter().map(|r| r.unwrap_or(f64::NAN)).collect(),
            grad_norm: fg.norms(),
            cos_alpha: geo.cos_alpha,
            ratio: geo.ratio,
            margin: geo.margin,
            degenerate: deg,
            clamped: clp,
        };
        if row.loss_train.iter().chain(&row.loss_test).any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: t,
                detail: "non-finite loss".into(),
            });
        }
        Ok(row)
    };

    let mut fg = full(&model)?;
    log.rows.push(eval(&model, 0, &fg, 0, 0)?);
    let mut fg_t = 0u64;

    for _epoch in 0..cfg.epochs {
        let plan = match cfg.batch {
            Some(b) => Some(b.plan(train, &mut rng)?),
            None => None,
        };
        let n_steps = plan.as_ref().map_or(1, BatchPlan::len);
        if alg == Algorithm::PcnsgdR {
            // Epoch boundary: always start from a fresh cache.
            if fg_t != state.t {
                fg = full(&model)?;
                fg_t = state.t;
            }
            state.fbg_cache = Some(FbgCache {
                grads: fg.grads.clone(),
                computed_at: state.t,
                refresh_interval: cfg.refresh_interval,
            });
        }
        for s in 0..n_steps {
            let t = state.t;
            let grads = match &plan {
                None => {
                    if fg_t != t {
                        fg = full(&model)?;
                        fg_t = t;
                    }
                    fg.grads.clone()
                }
                Some(p) => {
                    let rows = &p.steps[s];
                    let total: usize = rows.iter().map(Vec::len).sum();
                    PerClassGradients::compute(&model, train, Some(rows), alg.normalization(total))?.grads
                }
            };
            if alg == Algorithm::PcnsgdR && state.fbg_cache.as_ref().is_none_or(|c| c.is_stale(t)) {
                if fg_t != t {
                    fg = full(&model)?;
                    fg_t = t;
                }
                state.fbg_cache = Some(FbgCache {
                    grads: fg.grads.clone(),
                    computed_at: t,
                    refresh_interval: cfg.refresh_interval,
                });
            }
            let geo = class_geometry(&grads, reference)?;
            let eta = cfg.schedule.eta(&StepContext {
                t,
                cos_alpha: geo.cos_alpha,
                ratio: geo.ratio,
            })?;
            let report = step(alg, &mut state, &grads, eta)?;
            degenerate += report.degenerate.iter().filter(|d| **d).count() as u64;
            clamped += report.clamped.iter().filter(|c| **c).count() as u64;

            if trace.projections && alg == Algorithm::PcnsgdR {
                // `model` still holds the pre-step parameters here.
                let fresh = if fg_t == t { fg.clone() } else { full(&model)? };
                let cache = state.fbg_cache.as_ref().expect("the rescaled step needs a cache");
                let mut rescaled = Vec::with_capacity(classes);
                let mut rescaled_cached = Vec::with_capacity(classes);
                let mut raw = Vec::with_capacity(classes);
                for l in 0..classes {
                    let c = cosine_angle(&grads[l], &fresh.grads[l])?;
                    let cc = cosine_angle(&grads[l], &cache.grads[l])?;
                    raw.push(c);
                    rescaled.push(c.zip(report.projections[l]).map(|(c, p)| c / p));
                    rescaled_cached.push(cc.zip(report.projections[l]).map(|(c, p)| c / p));
                }
                projections.push(ProjectionTrace {
                    t,
                    rescaled,
                    rescaled_cached,
                    raw,
                });
            }

            model.set_params(&state.params)?;
            if state.t.is_multiple_of(cfg.eval_every) {
                fg = full(&model)?;
                fg_t = state.t;
                log.rows.push(eval(&model, state.t, &fg, degenerate, clamped)?);
                degenerate = 0;
                clamped = 0;
            }
        }
    }
    if log.rows.last().map(|r| r.t) != Some(state.t) {
        if fg_t != state.t {
            fg = full(&model)?;
        }
        log.rows.push(eval(&model, state.t, &fg, degenerate, clamped)?);
    }
    Ok(TrainOutcome {
        log,
        model,
        projections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize) -> OptimizerState {
        OptimizerState::new(vec![0.0; n])
    }

    #[test]
    fn gd_step_is_negative_gradient() {
        let mut s = state(2);
        let r = gd_step(&mut s, &[vec![1.0, 2.0], vec![3.0, -1.0]], 0.5).unwrap();
        assert_eq!(s.params, vec![-2.0, -0.5]);
        assert_eq!(r.direction, vec![4.0, 1.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn pcngd_on_orthogonal_unit_gradients() {
        let mut s = state(2);
        pcngd_step(&mut s, &[vec![3.0, 0.0], vec![0.0, 0.5]], 0.1).unwrap();
        assert!((s.params[0] + 0.1).abs() < 1e-15 && (s.params[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn pcngd_flags_degenerate_class() {
        let mut s = state(2);
        let r = pcngd_step(&mut s, &[vec![0.0, 0.0], vec![0.0, 2.0]], 1.0).unwrap();
        assert_eq!(r.degenerate, vec![true, false]);
        assert_eq!(s.params, vec![0.0, -1.0]);
        let r = pcngd_step(&mut s, &[vec![0.0, 0.0], vec![0.0, 0.0]], 1.0).unwrap();
        assert!(r.stationary);
        assert_eq!(s.params, vec![0.0, -1.0]);
    }

    #[test]
    fn sgd_o_identical_batches_double_step() {
        let mut s = state(2);
        let g = vec![0.5, -1.0];
        sgd_oversampled_step(&mut s, &[g.clone(), g], 0.2).unwrap();
        assert_eq!(s.params, vec![-0.2, 0.4]);
    }

    #[test]
    fn pcnsgd_r_unit_projection_equals_pcnsgd() {
        let grads = vec![vec![1.0, 1.0], vec![-2.0, 0.5]];
        let mut a = state(2);
        a.fbg_cache = Some(FbgCache {
            grads: grads.clone(),
            computed_at: 0,
            refresh_interval: 5,
        });
        let mut b = state(2);
        let ra = pcnsgd_r_step(&mut a, &grads, 0.3).unwrap();
        pcnsgd_step(&mut b, &grads, 0.3).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(ra.projections.iter().all(|p| (p.unwrap() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn pcnsgd_r_clamps_and_checks_cache_age() {
        let mut s = state(2);
        assert!(matches!(
            pcnsgd_r_step(&mut s, &[vec![1.0, 0.0], vec![0.0, 1.0]], 0.1),
            Err(Error::StaleCache { .. })
        ));
        s.fbg_cache = Some(FbgCache {
            grads: vec![vec![-1.0, 0.0], vec![0.0, 1.0]],
            computed_at: 0,
            refresh_interval: 2,
        });
        let r = pcnsgd_r_step(&mut s, &[vec![1.0, 0.0], vec![0.0, 1.0]], 0.1).unwrap();
        assert_eq!(r.clamped, vec![true, false]);
        assert!((s.params[0] + 0.1 / P_MIN).abs() < 1e-12);
        pcnsgd_r_step(&mut s, &[vec![1.0, 0.0], vec![0.0, 1.0]], 0.1).unwrap();
        assert!(matches!(
            pcnsgd_r_step(&mut s, &[vec![1.0, 0.0], vec![0.0, 1.0]], 0.1),
            Err(Error::StaleCache { age: 2, limit: 2 })
        ));
    }

    #[test]
    fn schedules() {
        let ctx = StepContext {
            t: 0,
            cos_alpha: Some(0.0),
            ratio: Some(1.0),
        };
        assert_eq!(StepSchedule::InvSqrt { c: 1.0, horizon: 100 }.eta(&ctx).unwrap(), 0.1);
        assert_eq!(
            StepSchedule::AngleScaled { c: 1.0, horizon: 100 }.eta(&ctx).unwrap(),
            0.1
        );
        let m = StepSchedule::GdMargin {
            c: 10.0,
            horizon: 100,
            smoothness: 1.0,
        };
        assert_eq!(m.eta(&ctx).unwrap(), 0.25);
        let neg = StepContext {
            cos_alpha: Some(-1.0),
            ratio: Some(2.0),
            ..ctx
        };
        assert!(m.eta(&neg).is_err());
        let pl = StepSchedule::PlDecreasing { k: 2.0 };
        assert_eq!(pl.eta(&ctx).unwrap(), 0.5);
        assert_eq!(pl.eta(&StepContext { t: 1, ..ctx }).unwrap(), 3.0 / 8.0);
        assert!(StepSchedule::Constant { eta: 0.0 }.eta(&ctx).is_err());
    }

    #[test]
    fn batch_compatibility_messages() {
        let e = Algorithm::Gd.check_batch(Some(&BatchSpec::Batches(4))).unwrap_err();
        assert!(e.to_string().contains("`algorithm`") && e.to_string().contains("`batch`"));
        assert!(Algorithm::SgdO.check_batch(Some(&BatchSpec::Batches(4))).is_err());
        assert!(Algorithm::Pcnsgd.check_batch(None).is_err());
        assert!(Algorithm::PcnsgdO.check_batch(Some(&BatchSpec::PerClass(3))).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn grads_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
            (2usize..5, 1usize..6)
                .prop_flat_map(|(k, d)| proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, d), k))
        }

        proptest! {
            #[test]
            fn pcngd_step_is_bounded(grads in grads_strategy(), eta in 0.001f64..2.0) {
                let d = grads[0].len();
                let mut s = state(d);
                pcngd_step(&mut s, &grads, eta).unwrap();
                prop_assert!(l2_norm(&s.params) <= grads.len() as f64 * eta * (1.0 + 1e-12));
            }

            #[test]
            fn pcngd_ignores_per_class_scale(grads in grads_strategy(), scales in proptest::collection::vec(0.01f64..100.0, 5)) {
                let d = grads[0].len();
                let scaled: Vec<Vec<f64>> = grads.iter().zip(&scales)
                    .map(|(g, s)| g.iter().map(|v| v * s).collect()).collect();
                let (mut a, mut b) = (state(d), state(d));
                pcngd_step(&mut a, &grads, 0.1).unwrap();
                pcngd_step(&mut b, &scaled, 0.1).unwrap();
                for (x, y) in a.params.iter().zip(&b.params) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn single_class_pcngd_is_normalized_gd(g in proptest::collection::vec(-5.0f64..5.0, 1..6), eta in 0.01f64..1.0) {
                let n = l2_norm(&g);
                prop_assume!(n > 1e-6);
                let mut s = state(g.len());
                pcngd_step(&mut s, std::slice::from_ref(&g), eta).unwrap();
                for (x, gi) in s.params.iter().zip(&g) {
                    prop_assert!((x + eta * gi / n).abs() < 1e-12);
                }
            }
        }
    }
}
