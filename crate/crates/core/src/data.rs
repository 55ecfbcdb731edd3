//! Labelled datasets, imbalance profiles, synthetic mixtures and batch plans.
//!
//! Class 0 is always the (weak) majority. Indices in a [`BatchPlan`] are row
//! indices into the dataset they were planned for.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim, domain, Error, Result};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;

/// Largest per-class size of a generated test split.
pub const TEST_PER_CLASS_CAP: usize = 200;

#[derive(Clone, Debug)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    class_rows: Vec<Vec<usize>>,
    class_features: Vec<Tensor>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return dim(format!("features must be 2-d, got {:?}", features.shape()));
        }
        if features.rows() != labels.len() {
            return dim(format!("{} feature rows, {} labels", features.rows(), labels.len()));
        }
        if classes < 2 {
            return domain("need at least two classes");
        }
        let mut class_rows = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return domain(format!("label {y} at row {i} outside 0..{classes}"));
            }
            class_rows[y].push(i);
        }
        let n0 = class_rows[0].len();
        if let Some(l) = (1..classes).find(|&l| class_rows[l].len() > n0) {
            return domain(format!(
                "class 0 must be the majority, but class {l} has {} > {n0} examples",
                class_rows[l].len()
            ));
        }
        let class_features = class_rows
            .iter()
            .map(|rows| features.gather_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features,
            labels,
            classes,
            class_rows,
            class_features,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> Vec<usize> {
        self.class_rows.iter().map(Vec::len).collect()
    }

    pub fn fractions(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.class_rows.iter().map(|r| r.len() as f64 / n).collect()
    }

    pub fn class_rows(&self, l: usize) -> &[usize] {
        &self.class_rows[l]
    }

    /// Feature rows of class `l`, in dataset order.
    pub fn class_features(&self, l: usize) -> &Tensor {
        &self.class_features[l]
    }

    /// Class with the fewest examples; ties go to the highest index.
    pub fn minority_class(&self) -> usize {
        let counts = self.counts();
        let m = *counts.iter().min().expect("at least two classes");
        (0..self.classes).rev().find(|&l| counts[l] == m).expect("min exists")
    }

    pub fn gather(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.gather_rows(rows)?;
        let y = rows.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Writes `x0,…,x{d-1},label` with a header row and LF line endings.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`Dataset::write_csv`]. The class count is
    /// taken from `classes` when given, otherwise from the largest label.
    pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 2 || header.get(cols - 1) != Some("label") {
            return Err(Error::Config(format!(
                "{}: last column must be `label`",
                path.display()
            )));
        }
        let d = cols - 1;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            for j in 0..d {
                let v: f64 = rec[j].trim().parse().map_err(|_| {
                    Error::Config(format!(
                        "{}: row {}: bad number {:?}",
                        path.display(),
                        line + 2,
                        &rec[j]
                    ))
                })?;
                xs.push(v);
            }
            let y: usize = rec[d]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{}: row {}: bad label {:?}", path.display(), line + 2, &rec[d])))?;
            ys.push(y);
        }
        let k = classes.unwrap_or_else(|| ys.iter().max().map_or(2, |m| m + 1).max(2));
        let n = ys.len();
        Dataset::new(Tensor::matrix(n, d, xs)?, ys, k)
    }
}

/// Per-class training counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImbalanceProfile {
    /// Two classes, majority `round(ratio * n_minor)`.
    Binary {
        ratio: f64,
        n_minor: usize,
    },
    /// `majority_classes` classes of `n_major`, the rest `n_minor`.
    Step {
        n_major: usize,
        n_minor: usize,
        majority_classes: usize,
        classes: usize,
    },
    /// `round(n_max * base^l)` for `l = 0..classes`.
    Geometric {
        n_max: usize,
        base: f64,
        classes: usize,
    },
    Explicit {
        counts: Vec<usize>,
    },
}

impl ImbalanceProfile {
    pub fn counts(&self) -> Result<Vec<usize>> {
        let counts = match self {
            ImbalanceProfile::Binary { ratio, n_minor } => {
                if !(*ratio >= 1.0) || !ratio.is_finite() {
                    return domain(format!("imbalance ratio must be >= 1, got {ratio}"));
                }
                vec![round_half_up(ratio * *n_minor as f64), *n_minor]
            }
            ImbalanceProfile::Step {
                n_major,
                n_minor,
                majority_classes,
                classes,
            } => {
                if *majority_classes == 0 || majority_classes > classes || n_minor > n_major {
                    return domain("step profile needs 1 <= majority_classes <= classes and n_minor <= n_major");
                }
                (0..*classes)
                    .map(|l| if l < *majority_classes { *n_major } else { *n_minor })
                    .collect()
            }
            ImbalanceProfile::Geometric { n_max, base, classes } => geometric_counts(*n_max, *base, *classes)?,
            ImbalanceProfile::Explicit { counts } => counts.clone(),
        };
        if counts.len() < 2 || counts.contains(&0) {
            return domain(format!("need at least two non-empty classes, got {counts:?}"));
        }
        if counts.iter().any(|&c| c > counts[0]) {
            return domain(format!("class 0 must be the majority, got {counts:?}"));
        }
        Ok(counts)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// `round_half_up(n_max * base^i)` for `i = 0..classes`.
pub fn geometric_counts(n_max: usize, base: f64, classes: usize) -> Result<Vec<usize>> {
    if classes < 2 {
        return domain("geometric profile needs at least two classes");
    }
    if !(base > 0.0 && base <= 1.0) {
        return domain(format!("geometric base must lie in (0, 1], got {base}"));
    }
    let smallest = n_max as f64 * base.powi(classes as i32 - 1);
    if smallest < 0.5 {
        return domain(format!("smallest class would round to zero ({smallest})"));
    }
    Ok((0..classes)
        .map(|i| round_half_up(n_max as f64 * base.powi(i as i32)))
        .collect())
}

/// Geometry of a synthetic Gaussian mixture.
///
/// Class `l` is `N(μ_l, I)` with `μ_l = l·separation·e₀ + offset·e₁`, so
/// adjacent means are `separation` apart. A nonzero `offset` makes the inputs
/// non-centered, which is what lets a bias-like direction dominate the
/// majority gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub dim: usize,
    pub separation: f64,
    #[serde(default)]
    pub offset: f64,
}

impl MixtureSpec {
    pub fn mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        m[0] = class as f64 * self.separation;
        if self.dim > 1 {
            m[1] = self.offset;
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Draws a training set with the profile's counts and a balanced test set.
///
/// The test set has `min(n_0, 200)` examples per class, where `n_0` is the
/// majority count, and is drawn from its own stream so changing the training
/// counts never moves the test points.
pub fn make_gaussian_mixture(profile: &ImbalanceProfile, spec: &MixtureSpec, seed: u64) -> Result<Split> {
    let counts = profile.counts()?;
    if spec.dim == 0 || (spec.offset != 0.0 && spec.dim < 2) {
        return domain("mixture needs dim >= 1, and dim >= 2 when offset is set");
    }
    if !spec.separation.is_finite() || spec.separation < 0.0 || !spec.offset.is_finite() {
        return domain("separation must be finite and non-negative");
    }
    let classes = counts.len();
    let draw = |rng: &mut SeededRng, counts: &[usize]| -> Result<Dataset> {
        let n: usize = counts.iter().sum();
        let mut xs = Vec::with_capacity(n * spec.dim);
        let mut ys = Vec::with_capacity(n);
        for (l, &c) in counts.iter().enumerate() {
            let mu = spec.mean(l);
            for _ in 0..c {
                xs.extend(mu.iter().map(|m| m + rng.standard_normal()));
                ys.push(l);
            }
        }
        Dataset::new(Tensor::matrix(n, spec.dim, xs)?, ys, classes)
    };
    let train = draw(&mut SeededRng::new(seed, Stream::Data), &counts)?;
    let per_class = counts[0].min(TEST_PER_CLASS_CAP);
    let test = draw(&mut SeededRng::new(seed, Stream::TestData), &vec![per_class; classes])?;
    Ok(Split { train, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchScheme {
    Uniform,
    PerClassRatio,
    Oversampled,
}

/// One epoch of batches. `steps[t][l]` lists the rows of class `l` in step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub scheme: BatchScheme,
    pub steps: Vec<Vec<Vec<usize>>>,
    /// Nominal per-class batch size (zero for the uniform scheme).
    pub class_batch_sizes: Vec<usize>,
    /// Batches per pass over each class.
    pub class_batch_counts: Vec<usize>,
    /// Mid-epoch reshuffles of each class.
    pub regroups: Vec<usize>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn cut(perm: &[usize], size: usize, count: usize) -> Vec<Vec<usize>> {
    (0..count).map(|b| perm[b * size..(b + 1) * size].to_vec()).collect()
}

fn shuffled_rows(ds: &Dataset, l: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut rows = ds.class_rows(l).to_vec();
    rng.shuffle(&mut rows);
    rows
}

/// Stratified batches that keep the dataset's class ratio.
///
/// Each class is shuffled and cut into `n_batches` batches of
/// `floor(n_l / n_batches)`; the remainder is dropped. Step `t` pairs the
/// `t`-th batch of every class.
pub fn plan_per_class_ratio_batches(ds: &Dataset, n_batches: usize, rng: &mut SeededRng) -> Result<BatchPlan> {
    if n_batches == 0 {
        return Err(Error::InfeasiblePlan("number of batches must be positive".into()));
    }
    let counts = ds.counts();
    if let Some(l) = (0..ds.classes()).find(|&l| counts[l] < n_batches) {
        return Err(Error::InfeasiblePlan(format!(
            "class {l} has {} examples, fewer than {n_batches} batches",
            counts[l]
        )));
    }
    let sizes: Vec<usize> = counts.iter().map(|c| c / n_batches).collect();
    let per_class: Vec<Vec<Vec<usize>>> = (0..ds.classes())
        .map(|l| cut(&shuffled_rows(ds, l, rng), sizes[l], n_batches))
        .collect();
    let steps = (0..n_batches)
        .map(|t| per_class.iter().map(|c| c[t].clone()).collect())
        .collect();
    Ok(BatchPlan {
        scheme: BatchScheme::PerClassRatio,
        steps,
        class_batch_sizes: sizes,
        class_batch_counts: vec![n_batches; ds.classes()],
        regroups: vec![0; ds.classes()],
    })
}

/// Equal-size per-class batches with minority oversampling.
///
/// Class `l` is cut into `floor(n_l / s)` batches. The epoch runs for as many
/// steps as the majority has batches; whenever class `l` has used all of its
/// batches it is reshuffled and cut again before its next use.
pub fn plan_oversampled_batches(ds: &Dataset, s: usize, rng: &mut SeededRng) -> Result<BatchPlan> {
    if s == 0 {
        return Err(Error::InfeasiblePlan("per-class batch size must be positive".into()));
    }
    let counts = ds.counts();
    if let Some(l) = (0..ds.classes()).find(|&l| counts[l] < s) {
        return Err(Error::InfeasiblePlan(format!(
            "class {l} has {} examples, fewer than the per-class batch size {s}",
            counts[l]
        )));
    }
    let nb: Vec<usize> = counts.iter().map(|c| c / s).collect();
    let total = nb[0];
    let mut current: Vec<Vec<Vec<usize>>> = (0..ds.classes())
        .map(|l| cut(&shuffled_rows(ds, l, rng), s, nb[l]))
        .collect();
    let mut regroups = vec![0; ds.classes()];
    let mut steps = Vec::with_capacity(total);
    for i in 1..=total {
        let mut step = Vec::with_capacity(ds.classes());
        for l in 0..ds.classes() {
            step.push(current[l][(i - 1) % nb[l]].clone());
        }
        steps.push(step);
        if i < total {
            for l in 0..ds.classes() {
                if i % nb[l] == 0 {
                    current[l] = cut(&shuffled_rows(ds, l, rng), s, nb[l]);
                    regroups[l] += 1;
                }
            }
        }
    }
    Ok(BatchPlan {
        scheme: BatchScheme::Oversampled,
        steps,
        class_batch_sizes: vec![s; ds.classes()],
        class_batch_counts: nb,
        regroups,
    })
}

/// Plain shuffled batches of `batch_size`, remainder dropped. Classes may be
/// missing from individual batches.
pub fn plan_uniform_batches(ds: &Dataset, batch_size: usize, rng: &mut SeededRng) -> Result<BatchPlan> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::InfeasiblePlan(format!(
            "batch size {batch_size} for {} examples",
            ds.len()
        )));
    }
    let perm = rng.permutation(ds.len());
    let count = ds.len() / batch_size;
    let steps = (0..count)
        .map(|b| {
            let mut per = vec![Vec::new(); ds.classes()];
            for &i in &perm[b * batch_size..(b + 1) * batch_size] {
                per[ds.labels()[i]].push(i);
            }
            per
        })
        .collect();
    Ok(BatchPlan {
        scheme: BatchScheme::Uniform,
        steps,
        class_batch_sizes: vec![0; ds.classes()],
        class_batch_counts: vec![count; ds.classes()],
        regroups: vec![0; ds.classes()],
    })
}
