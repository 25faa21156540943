//! Synthetic task streams.
//!
//! Three families, all deterministic in `(spec, seed)`:
//!
//! * `rotated_gaussians`: `2c` isotropic clusters on a circle of radius
//!   `separation` in the first two input dimensions, alternating class labels
//!   (a rotated XOR for `c = 2`). Rotating a task by `180/c` degrees swaps
//!   every label, so neighbouring tasks conflict strongly.
//! * `permuted_features`: one Gaussian cluster per class with shared base
//!   means; each task applies its own permutation to the feature axes.
//! * `linear_teacher`: standard normal inputs labelled by the arg-max of a
//!   fixed random linear map whose rows are symmetric around the origin.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyLedger, Phase};
use crate::error::{Error, Result};
use crate::nn::Target;
use crate::pathway::{self, ParamStore, PathwayLayout};
use crate::util;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    RotatedGaussians { angle_deg: f64 },
    PermutedFeatures { base_seed: u64, perm_seed: u64 },
    LinearTeacher { teacher_seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    RotatedGaussians,
    PermutedFeatures,
    LinearTeacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Iid,
    Fixed,
    Correlated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: TaskKind,
    pub n_classes: usize,
    pub input_dim: usize,
    /// Cluster radius (rotated) or class-mean norm (permuted).
    pub separation: f64,
    /// Per-coordinate noise standard deviation of the Gaussian families.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn targets(&self) -> Vec<Target> {
        self.labels.iter().map(|&c| Target::Class(c)).collect()
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need >= 2 classes, got {}", self.n_classes)));
        }
        if self.input_dim < 2 {
            return Err(Error::Config(format!("need input_dim >= 2, got {}", self.input_dim)));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::Config(format!("separation must be > 0, got {}", self.separation)));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::Config(format!("noise must be > 0, got {}", self.noise)));
        }
        match &self.kind {
            TaskKind::RotatedGaussians { angle_deg } if !angle_deg.is_finite() => {
                Err(Error::Config(format!("angle {angle_deg} is not finite")))
            }
            TaskKind::LinearTeacher { .. } if self.n_classes > self.input_dim => Err(Error::Config(format!(
                "linear teacher needs n_classes <= input_dim ({} > {})",
                self.n_classes, self.input_dim
            ))),
            _ => Ok(()),
        }
    }

    /// Rotation angle in `[0, 360)`, when the family has one.
    pub fn angle_deg(&self) -> Option<f64> {
        match self.kind {
            TaskKind::RotatedGaussians { angle_deg } => Some(angle_deg.rem_euclid(360.0)),
            _ => None,
        }
    }

    /// `(class, center)` of every Gaussian cluster; empty for the teacher.
    pub fn cluster_centers(&self) -> Vec<(usize, Vec<f64>)> {
        let c = self.n_classes;
        match &self.kind {
            TaskKind::RotatedGaussians { .. } => {
                let base = self.angle_deg().unwrap_or(0.0);
                (0..2 * c)
                    .map(|j| {
                        let a = (base + j as f64 * 180.0 / c as f64).rem_euclid(360.0).to_radians();
                        let mut m = vec![0.0; self.input_dim];
                        m[0] = self.separation * a.cos();
                        m[1] = self.separation * a.sin();
                        (j % c, m)
                    })
                    .collect()
            }
            TaskKind::PermutedFeatures { base_seed, perm_seed } => {
                let perm = self.permutation(*perm_seed);
                let mut rng = util::rng(*base_seed, 0xba5e);
                (0..c)
                    .map(|class| {
                        let mut v: Vec<f64> = (0..self.input_dim).map(|_| rng.sample(StandardNormal)).collect();
                        let norm = util::dot(&v, &v).sqrt();
                        v.iter_mut().for_each(|x| *x *= self.separation / norm);
                        (class, perm.iter().map(|&p| v[p]).collect())
                    })
                    .collect()
            }
            TaskKind::LinearTeacher { .. } => Vec::new(),
        }
    }

    fn permutation(&self, perm_seed: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.input_dim).collect();
        p.shuffle(&mut util::rng(perm_seed, 0x9e4));
        p
    }

    /// Analytic class-conditional mean, `None` for the teacher family.
    pub fn class_mean(&self, class: usize) -> Option<Vec<f64>> {
        let centers = self.cluster_centers();
        if centers.is_empty() || class >= self.n_classes {
            return None;
        }
        let mine: Vec<&Vec<f64>> = centers.iter().filter(|(c, _)| *c == class).map(|(_, m)| m).collect();
        let mut mean = vec![0.0; self.input_dim];
        for m in &mine {
            for (a, v) in mean.iter_mut().zip(m.iter()) {
                *a += v / mine.len() as f64;
            }
        }
        Some(mean)
    }

    /// Teacher weights, one row per class.
    fn teacher(&self, teacher_seed: u64) -> Vec<Vec<f64>> {
        let d = self.input_dim;
        let c = self.n_classes;
        let mut rng = util::rng(teacher_seed, 0x7eac);
        // random orthonormal basis by Gram-Schmidt
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let p = util::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let n = util::dot(&v, &v).sqrt();
            if n > 1e-8 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        (0..c)
            .map(|class| {
                let mut row = vec![0.0; d];
                for (k, b) in basis.iter().take(c).enumerate() {
                    let coef = if k == class { 1.0 } else { 0.0 } - 1.0 / c as f64;
                    row.iter_mut().zip(b).for_each(|(r, bv)| *r += coef * bv);
                }
                row
            })
            .collect()
    }

    pub fn teacher_label(&self, x: &[f64]) -> Option<usize> {
        match self.kind {
            TaskKind::LinearTeacher { teacher_seed } => {
                let scores: Vec<f64> = self.teacher(teacher_seed).iter().map(|w| util::dot(w, x)).collect();
                Some(crate::router::argmax(&scores))
            }
            _ => None,
        }
    }

    /// Bayes-optimal label under the generating distribution.
    pub fn bayes_predict(&self, x: &[f64]) -> usize {
        if let Some(y) = self.teacher_label(x) {
            return y;
        }
        let mut scores = vec![f64::NEG_INFINITY; self.n_classes];
        let s2 = 2.0 * self.noise * self.noise;
        for (c, m) in self.cluster_centers() {
            let d2: f64 = x.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = -d2 / s2;
            let cur = scores[c];
            scores[c] = if cur == f64::NEG_INFINITY {
                v
            } else {
                let hi = cur.max(v);
                hi + ((cur - hi).exp() + (v - hi).exp()).ln()
            };
        }
        crate::router::argmax(&scores)
    }

    /// `n` labelled samples; classes appear in exactly balanced proportions
    /// (up to `n mod c`) in a seeded random order.
    pub fn sample_batch(&self, n: usize, seed: u64) -> Result<Batch> {
        self.validate()?;
        if n == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let c = self.n_classes;
        let mut rng = util::rng(util::mix_seed(seed, self.task_id as u64), 0x5a3f);
        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        labels.shuffle(&mut rng);
        let xs = match self.kind {
            TaskKind::LinearTeacher { teacher_seed } => {
                let w = self.teacher(teacher_seed);
                labels
                    .iter()
                    .map(|&y| loop {
                        let x: Vec<f64> = (0..self.input_dim).map(|_| rng.sample(StandardNormal)).collect();
                        let scores: Vec<f64> = w.iter().map(|r| util::dot(r, &x)).collect();
                        if crate::router::argmax(&scores) == y {
                            break x;
                        }
                    })
                    .collect()
            }
            _ => {
                let centers = self.cluster_centers();
                let by_class: Vec<Vec<&Vec<f64>>> = (0..c)
                    .map(|k| centers.iter().filter(|(cl, _)| *cl == k).map(|(_, m)| m).collect())
                    .collect();
                labels
                    .iter()
                    .map(|&y| {
                        let opts = &by_class[y];
                        let m = opts[rng.random_range(0..opts.len())];
                        m.iter()
                            .map(|mu| mu + self.noise * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            }
        };
        Ok(Batch { xs, labels })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub family: TaskFamily,
    pub n_tasks: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Rotation between consecutive generated tasks (rotated family).
    #[serde(default = "default_angle_step")]
    pub angle_step_deg: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_ordering")]
    pub ordering: Ordering,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    pub seed: u64,
}

fn default_classes() -> usize {
    2
}
fn default_input_dim() -> usize {
    8
}
fn default_angle_step() -> f64 {
    60.0
}
fn default_separation() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.3
}
fn default_ordering() -> Ordering {
    Ordering::Fixed
}
fn default_n_train() -> usize {
    2000
}
fn default_n_eval() -> usize {
    500
}

impl StreamConfig {
    pub fn new(family: TaskFamily, n_tasks: usize, seed: u64) -> Self {
        StreamConfig {
            family,
            n_tasks,
            n_classes: default_classes(),
            input_dim: default_input_dim(),
            angle_step_deg: default_angle_step(),
            separation: default_separation(),
            noise: default_noise(),
            ordering: default_ordering(),
            n_train: default_n_train(),
            n_eval: default_n_eval(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
    pub ordering: Ordering,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Generates `n_tasks` specs and orders them: `fixed` keeps generation
/// order, `iid` shuffles by seed, `correlated` sorts by rotation angle.
pub fn make_stream(cfg: &StreamConfig) -> Result<TaskStream> {
    if cfg.n_tasks == 0 {
        return Err(Error::Config("stream needs n_tasks >= 1".into()));
    }
    if cfg.n_train == 0 || cfg.n_eval == 0 {
        return Err(Error::Config("n_train and n_eval must be >= 1".into()));
    }
    if !cfg.angle_step_deg.is_finite() {
        return Err(Error::Config("angle step must be finite".into()));
    }
    let mut tasks: Vec<TaskSpec> = (0..cfg.n_tasks)
        .map(|i| {
            let kind = match cfg.family {
                TaskFamily::RotatedGaussians => TaskKind::RotatedGaussians {
                    angle_deg: i as f64 * cfg.angle_step_deg,
                },
                TaskFamily::PermutedFeatures => TaskKind::PermutedFeatures {
                    base_seed: cfg.seed,
                    perm_seed: util::mix_seed(cfg.seed, 0x1000 + i as u64),
                },
                TaskFamily::LinearTeacher => TaskKind::LinearTeacher {
                    teacher_seed: util::mix_seed(cfg.seed, 0x2000 + i as u64),
                },
            };
            TaskSpec {
                task_id: i,
                kind,
                n_classes: cfg.n_classes,
                input_dim: cfg.input_dim,
                separation: cfg.separation,
                noise: cfg.noise,
            }
        })
        .collect();
    for t in &tasks {
        t.validate()?;
    }
    match cfg.ordering {
        Ordering::Fixed => {}
        Ordering::Iid => tasks.shuffle(&mut util::rng(cfg.seed, 0x0dde)),
        Ordering::Correlated => tasks.sort_by(|a, b| {
            a.angle_deg()
                .unwrap_or(0.0)
                .total_cmp(&b.angle_deg().unwrap_or(0.0))
                .then(a.task_id.cmp(&b.task_id))
        }),
    }
    Ok(TaskStream {
        tasks,
        ordering: cfg.ordering,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub mean: f64,
    pub std_err: f64,
    pub losses: Vec<f64>,
}

/// Mean evaluation loss of `n_inits` freshly seeded stores through `pathway`.
pub fn random_baseline_loss(
    spec: &TaskSpec,
    layout: &PathwayLayout,
    k_total: usize,
    pathway: usize,
    n_inits: usize,
    n_eval: usize,
    seed: u64,
) -> Result<RandomBaseline> {
    if n_inits == 0 {
        return Err(Error::Config("n_inits must be >= 1".into()));
    }
    let eval = spec.sample_batch(n_eval, seed)?;
    let targets = eval.targets();
    let mut scratch = EnergyLedger::new();
    let mut losses = Vec::with_capacity(n_inits);
    for i in 0..n_inits {
        let store = ParamStore::build(layout, k_total, util::mix_seed(seed, 0xa11 + i as u64))?;
        let mut total = 0.0;
        for (x, t) in eval.xs.iter().zip(&targets) {
            let (_, cache) = pathway::pathway_forward(&store, layout, pathway, x, &mut scratch, Phase::Inference)?;
            total += crate::nn::head_loss_grad(layout.head(pathway).head, cache.logits(), t)?.0;
        }
        losses.push(total / eval.len() as f64);
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let std_err = if losses.len() > 1 {
        (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(RandomBaseline { mean, std_err, losses })
}
