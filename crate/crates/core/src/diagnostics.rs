//! Quantities logged during training and the checks built on them: gradient
//! ratios and angles, recall, minority-drop detection, the batch-noise
//! projection model and the run log itself.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim, domain, Result};
use crate::rng::SeededRng;
use crate::tensor::{cosine_angle, dot_unchecked, l2_norm, EPS_NORM};

/// Lower clamp for projection terms used as divisors.
pub const P_MIN: f64 = 0.05;

fn rest_sum(grads: &[Vec<f64>], l: usize) -> Vec<f64> {
    let mut out = vec![0.0; grads[l].len()];
    for (i, g) in grads.iter().enumerate() {
        if i != l {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v;
            }
        }
    }
    out
}

/// `‖Σ_{i≠l} g_i‖ / ‖g_l‖`; `None` when `g_l` vanishes.
///
/// With two classes this is `‖g_{1-l}‖ / ‖g_l‖`, the factor by which the
/// other class's pull can outweigh class `l`'s own descent direction.
pub fn gradient_ratio(grads: &[Vec<f64>], l: usize) -> Result<Option<f64>> {
    check_grads(grads, l)?;
    let own = l2_norm(&grads[l]);
    if own < EPS_NORM {
        return Ok(None);
    }
    Ok(Some(l2_norm(&rest_sum(grads, l)) / own))
}

/// `1 + cos(α)·C`: positive exactly when a small plain gradient step lowers
/// the class's loss.
pub fn gd_monotonicity_margin(cos_alpha: f64, ratio: f64) -> f64 {
    1.0 + cos_alpha * ratio
}

fn check_grads(grads: &[Vec<f64>], l: usize) -> Result<()> {
    if grads.len() < 2 || l >= grads.len() {
        return domain(format!("class {l} of {} gradients", grads.len()));
    }
    let n = grads[0].len();
    if grads.iter().any(|g| g.len() != n) {
        return dim("per-class gradients differ in length");
    }
    Ok(())
}

/// Geometry of class `l` against the sum of the other classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGeometry {
    pub cos_alpha: Option<f64>,
    pub ratio: Option<f64>,
    pub margin: Option<f64>,
}

pub fn class_geometry(grads: &[Vec<f64>], l: usize) -> Result<ClassGeometry> {
    check_grads(grads, l)?;
    let rest = rest_sum(grads, l);
    let cos_alpha = cosine_angle(&grads[l], &rest)?;
    let ratio = gradient_ratio(grads, l)?;
    let margin = match (cos_alpha, ratio) {
        (Some(c), Some(r)) => Some(gd_monotonicity_margin(c, r)),
        // The other classes vanish: the step is class l's own gradient.
        (None, Some(0.0)) => Some(1.0),
        _ => None,
    };
    Ok(ClassGeometry {
        cos_alpha,
        ratio,
        margin,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// `None` for classes absent from the labels.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that are present.
    pub macro_recall: f64,
}

pub fn recall_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<RecallReport> {
    if predictions.len() != labels.len() {
        return dim(format!("{} predictions, {} labels", predictions.len(), labels.len()));
    }
    let mut hit = vec![0usize; classes];
    let mut tot = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return domain(format!("label {y} outside 0..{classes}"));
        }
        tot[y] += 1;
        if p == y {
            hit[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|l| (tot[l] > 0).then(|| hit[l] as f64 / tot[l] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_recall = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(RecallReport {
        per_class,
        macro_recall,
    })
}

/// One evaluation of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub t: u64,
    pub eta: f64,
    pub loss_train: Vec<f64>,
    pub loss_test: Vec<f64>,
    pub recall_train: Vec<f64>,
    pub recall_test: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub cos_alpha: Option<f64>,
    pub ratio: Option<f64>,
    pub margin: Option<f64>,
    /// Class contributions skipped for vanishing norm since the last row.
    pub degenerate: u64,
    /// Projection terms clamped since the last row.
    pub clamped: u64,
}

impl EvalRow {
    pub fn macro_test_recall(&self) -> f64 {
        self.recall_test.iter().sum::<f64>() / self.recall_test.len() as f64
    }
}

/// Per-run evaluation history. Pair metrics refer to `reference_class`
/// against the sum of the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub classes: usize,
    pub reference_class: usize,
    pub rows: Vec<EvalRow>,
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".into(), fmt_f)
}

impl RunLog {
    pub fn new(classes: usize, reference_class: usize) -> Self {
        Self {
            classes,
            reference_class,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string(), "eta".to_string()];
        for l in 0..self.classes {
            for name in ["loss_train", "loss_test", "recall_train", "recall_test", "gradnorm"] {
                h.push(format!("{name}_{l}"));
            }
        }
        for name in ["cos_alpha", "C_t", "eq1_margin", "flag_degenerate", "flag_clamped"] {
            h.push(name.into());
        }
        h
    }

    /// CSV text: header row, comma separated, `.` decimals, LF endings.
    /// Undefined values are written as `NaN`.
    pub fn to_csv_string(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        for r in &self.rows {
            let mut f = vec![r.t.to_string(), fmt_f(r.eta)];
            for l in 0..self.classes {
                f.push(fmt_f(r.loss_train[l]));
                f.push(fmt_f(r.loss_test[l]));
                f.push(fmt_f(r.recall_train[l]));
                f.push(fmt_f(r.recall_test[l]));
                f.push(fmt_f(r.grad_norm[l]));
            }
            f.push(fmt_opt(r.cos_alpha));
            f.push(fmt_opt(r.ratio));
            f.push(fmt_opt(r.margin));
            f.push(r.degenerate.to_string());
            f.push(r.clamped.to_string());
            let _ = writeln!(s, "{}", f.join(","));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// How many leading evaluations form the early-training window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Fraction(f64),
    Evals(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MidConfig {
    pub window: Window,
    /// Minimum recall drop counted as a dip.
    pub delta: f64,
    /// Macro test recall target for the time-to-target.
    pub r_star: f64,
}

impl Default for MidConfig {
    fn default() -> Self {
        Self {
            window: Window::Fraction(0.2),
            delta: 0.05,
            r_star: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidReport {
    pub mid_present: bool,
    /// Largest drop of the class's test recall below its initial value
    /// inside the window; zero if it never drops.
    pub mid_depth: f64,
    /// Steps from the first dip below `initial - delta` until recall is back
    /// at its initial value; `None` if it never recovers.
    pub mid_duration: Option<u64>,
    pub initial_recall: f64,
    pub window_min_recall: f64,
    /// First logged step with macro test recall at least `r_star`.
    pub tau: Option<u64>,
    /// `tau` is only known to within the logging interval before it.
    pub tau_uncertainty: u64,
}

/// Looks for an early dip in class `class`'s test recall.
pub fn detect_mid(log: &RunLog, class: usize, cfg: &MidConfig) -> Result<MidReport> {
    if log.rows.is_empty() {
        return domain("empty run log");
    }
    if class >= log.classes {
        return domain(format!("class {class} outside 0..{}", log.classes));
    }
    let w = match cfg.window {
        Window::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return domain(format!("window fraction {f} outside (0, 1]"));
            }
            ((f * log.rows.len() as f64).floor() as usize).max(1)
        }
        Window::Evals(k) => k.max(1),
    }
    .min(log.rows.len());
    let rec: Vec<f64> = log.rows.iter().map(|r| r.recall_test[class]).collect();
    let initial = rec[0];
    let (min_idx, window_min) =
        rec[..w].iter().enumerate().fold(
            (0, f64::INFINITY),
            |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) },
        );
    let mid_present = window_min < initial - cfg.delta;
    let mid_duration = if mid_present {
        let start = rec[..w]
            .iter()
            .position(|&v| v < initial - cfg.delta)
            .expect("dip exists");
        rec[min_idx..]
            .iter()
            .position(|&v| v >= initial)
            .map(|k| log.rows[min_idx + k].t - log.rows[start].t)
    } else {
        None
    };
    let hit = log.rows.iter().position(|r| r.macro_test_recall() >= cfg.r_star);
    let tau = hit.map(|i| log.rows[i].t);
    let tau_uncertainty = match hit {
        Some(i) if i > 0 => log.rows[i].t - log.rows[i - 1].t,
        _ => 0,
    };
    Ok(MidReport {
        mid_present,
        mid_depth: (initial - window_min).max(0.0),
        mid_duration,
        initial_recall: initial,
        window_min_recall: window_min,
        tau,
        tau_uncertainty,
    })
}

/// Noise added to a full-batch gradient to imitate a batch estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Isotropic { sd: f64 },
    Diagonal { sd: Vec<f64> },
}

impl NoiseModel {
    fn draw(&self, rng: &mut SeededRng, d: usize) -> Vec<f64> {
        match self {
            NoiseModel::Isotropic { sd } => (0..d).map(|_| sd * rng.standard_normal()).collect(),
            NoiseModel::Diagonal { sd } => sd.iter().map(|s| s * rng.standard_normal()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub n_tilde: usize,
    /// Mean over draws of `1 - ‖Z‖² sin²θ / (2 ñ ‖G‖²)`.
    pub predicted: f64,
    /// Mean over draws of `cos(G + Z/√ñ, G)`.
    pub measured: f64,
    /// Monte-Carlo standard error of `measured`.
    pub stderr: f64,
    /// Standard error of the per-draw difference `measured - predicted`.
    pub diff_stderr: f64,
}

/// Projection of a noisy batch gradient on the full-batch direction, measured
/// and as predicted by the second-order small-noise expansion.
pub fn clt_projection_check(
    fbg: &[f64],
    noise: &NoiseModel,
    n_tilde: usize,
    draws: usize,
    rng: &mut SeededRng,
) -> Result<CltReport> {
    let d = fbg.len();
    let g2 = dot_unchecked(fbg, fbg);
    if g2.sqrt() < EPS_NORM {
        return domain("full-batch gradient vanishes");
    }
    if n_tilde == 0 || draws < 2 {
        return domain("need n_tilde >= 1 and at least two draws");
    }
    match noise {
        NoiseModel::Isotropic { sd } if !(*sd >= 0.0) => return domain("noise sd must be non-negative"),
        NoiseModel::Diagonal { sd } if sd.len() != d => return dim("noise sd length differs from gradient"),
        _ => {}
    }
    let scale = 1.0 / (n_tilde as f64).sqrt();
    let (mut sm, mut sm2, mut sp, mut sdiff, mut sdiff2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..draws {
        let z = noise.draw(rng, d);
        let z2 = dot_unchecked(&z, &z);
        let zg = dot_unchecked(&z, fbg);
        let sin2 = if z2 > 0.0 {
            (1.0 - zg * zg / (z2 * g2)).max(0.0)
        } else {
            0.0
        };
        let pred = 1.0 - z2 * sin2 / (2.0 * n_tilde as f64 * g2);
        let gh: Vec<f64> = fbg.iter().zip(&z).map(|(g, zi)| g + scale * zi).collect();
        let meas = cosine_angle(&gh, fbg)?.unwrap_or(0.0);
        sm += meas;
        sm2 += meas * meas;
        sp += pred;
        sdiff += meas - pred;
        sdiff2 += (meas - pred) * (meas - pred);
    }
    let n = draws as f64;
    let var = ((sm2 - sm * sm / n) / (n - 1.0)).max(0.0);
    let dvar = ((sdiff2 - sdiff * sdiff / n) / (n - 1.0)).max(0.0);
    Ok(CltReport {
        n_tilde,
        predicted: sp / n,
        measured: sm / n,
        stderr: (var / n).sqrt(),
        diff_stderr: (dvar / n).sqrt(),
    })
}

/// `α = p_major / p_minor`, the minority rescaling that equalizes the two
/// classes' expected projections. A minority term below [`P_MIN`] is clamped
/// and reported.
pub fn rescaling_factor(p_major: f64, p_minor: f64) -> (f64, bool) {
    if p_minor < P_MIN {
        (p_major / P_MIN, true)
    } else {
        (p_major / p_minor, false)
    }
}

/// `(cos α, ‖g0‖/‖g1‖)` between two class gradients; `None` when either
/// vanishes.
pub fn fixed_point_ratio(g0: &[f64], g1: &[f64]) -> Result<Option<(f64, f64)>> {
    let c = cosine_angle(g0, g1)?;
    Ok(c.map(|c| (c, l2_norm(g0) / l2_norm(g1))))
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn row(t: u64, rec: [f64; 2]) -> EvalRow {
        EvalRow {
            t,
            eta: 0.1,
            loss_train: vec![0.0; 2],
            loss_test: vec![0.0; 2],
            recall_train: rec.to_vec(),
            recall_test: rec.to_vec(),
            grad_norm: vec![0.0; 2],
            cos_alpha: None,
            ratio: None,
            margin: None,
            degenerate: 0,
            clamped: 0,
        }
    }

    #[test]
    fn ratio_of_equal_norms_is_one() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(gradient_ratio(&g, 0).unwrap(), Some(1.0));
        assert_eq!(gradient_ratio(&[vec![0.0], vec![1.0]], 0).unwrap(), None);
    }

    #[test]
    fn collinear_counts_give_worst_case_ratio() {
        let counts = [100.0, 5.0, 5.0];
        let grads: Vec<Vec<f64>> = counts.iter().map(|c| vec![c * 0.3, c * -0.4]).collect();
        let r = gradient_ratio(&grads, 1).unwrap().unwrap();
        assert!((r - 21.0).abs() < 1e-12);
    }

    #[test]
    fn margin_values() {
        assert_eq!(gd_monotonicity_margin(0.0, 5.0), 1.0);
        assert_eq!(gd_monotonicity_margin(-1.0, 1.0), 0.0);
        assert!(gd_monotonicity_margin(-1.0, 2.0) < 0.0);
    }

    #[test]
    fn recall_cases() {
        let r = recall_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(0.0)]);
        assert_eq!(r.macro_recall, 0.5);
        let r = recall_metrics(&[0, 1], &[0, 0], 3).unwrap();
        assert_eq!(r.per_class[1], None);
        assert_eq!(r.macro_recall, 0.5);
    }

    #[test]
    fn mid_detection_and_tau() {
        let mut log = RunLog::new(2, 1);
        let recalls = [0.5, 0.1, 0.05, 0.2, 0.6, 0.8, 0.9, 0.9, 0.9, 0.9];
        for (i, r) in recalls.iter().enumerate() {
            log.rows.push(row(10 * i as u64, [0.9, *r]));
        }
        let cfg = MidConfig {
            window: Window::Evals(3),
            delta: 0.3,
            r_star: 0.8,
        };
        let m = detect_mid(&log, 1, &cfg).unwrap();
        assert!(m.mid_present);
        assert!((m.mid_depth - 0.45).abs() < 1e-12);
        assert_eq!(m.mid_duration, Some(30));
        assert_eq!(m.tau, Some(50));
        assert_eq!(m.tau_uncertainty, 10);
        let never = MidConfig { r_star: 0.99, ..cfg };
        assert_eq!(detect_mid(&log, 1, &never).unwrap().tau, None);
    }

    #[test]
    fn csv_header_order() {
        let log = RunLog::new(2, 1);
        let h = log.header();
        assert_eq!(
            &h[..7],
            &[
                "t",
                "eta",
                "loss_train_0",
                "loss_test_0",
                "recall_train_0",
                "recall_test_0",
                "gradnorm_0"
            ]
        );
        assert_eq!(&h[12..15], &["cos_alpha", "C_t", "eq1_margin"]);
    }

    #[test]
    fn clt_prediction_reference_value() {
        // One draw of Z orthogonal to G: ‖Z‖ = 1, sin θ = 1, ñ = 4, ‖G‖ = 1.
        let z2: f64 = 1.0;
        let pred = 1.0 - z2 * 1.0 / (2.0 * 4.0 * 1.0);
        assert_eq!(pred, 0.875);
        let mut rng = SeededRng::new(3, Stream::Noise);
        let g: Vec<f64> = (0..20).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let r = clt_projection_check(&g, &NoiseModel::Isotropic { sd: 0.05 }, 32, 10_000, &mut rng).unwrap();
        assert!((r.measured - r.predicted).abs() < 3.0 * r.stderr);
        let zero = clt_projection_check(&g, &NoiseModel::Isotropic { sd: 0.0 }, 4, 10, &mut rng).unwrap();
        assert_eq!(zero.measured, 1.0);
        assert_eq!(zero.predicted, 1.0);
    }

    #[test]
    fn rescaling_reference_and_clamp() {
        let (a, c) = rescaling_factor(0.99, 0.90);
        assert!((a - 1.1).abs() < 1e-12 && !c);
        let (a, c) = rescaling_factor(0.9, -0.2);
        assert!(c && (a - 0.9 / P_MIN).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_of_opposite_gradients() {
        let (c, g) = fixed_point_ratio(&[2.0, 0.0], &[-1.0, 0.0]).unwrap().unwrap();
        assert_eq!((c, g), (-1.0, 2.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mid_ignores_rows_after_window(extra in proptest::collection::vec(0.0f64..1.0, 0..20)) {
                let mut log = RunLog::new(2, 1);
                for (i, r) in [0.6, 0.2, 0.1, 0.4].iter().enumerate() {
                    log.rows.push(row(i as u64, [0.9, *r]));
                }
                let cfg = MidConfig { window: Window::Evals(4), delta: 0.3, r_star: 2.0 };
                let before = detect_mid(&log, 1, &cfg).unwrap();
                for (i, r) in extra.iter().enumerate() {
                    log.rows.push(row(4 + i as u64, [0.9, *r]));
                }
                let after = detect_mid(&log, 1, &cfg).unwrap();
                prop_assert_eq!(before.mid_present, after.mid_present);
                prop_assert_eq!(before.mid_depth, after.mid_depth);
            }

            #[test]
            fn ratio_is_scale_covariant(a in proptest::collection::vec(-5.0f64..5.0, 3),
                                        b in proptest::collection::vec(-5.0f64..5.0, 3),
                                        s in 0.1f64..10.0) {
                let g = vec![a.clone(), b.clone()];
                let gs = vec![a, b.iter().map(|v| v * s).collect()];
                if let (Some(r), Some(rs)) = (gradient_ratio(&g, 0).unwrap(), gradient_ratio(&gs, 0).unwrap()) {
                    prop_assert!((rs - s * r).abs() <= 1e-9 * (1.0 + rs));
                }
            }
        }
    }
}
