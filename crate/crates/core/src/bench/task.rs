//! Synthetic multi-domain classification tasks and their on-disk form.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::pipeline::{LabeledSet, TrainData};
use crate::{fmt17, rng};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: invalid manifest: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
    #[error("{}:{line}: {message}", path.display())]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{}: expected {expected} rows, found {found}", path.display())]
    Count { path: PathBuf, expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

/// Shape of the class-conditional base distribution, before any domain
/// transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BaseDistribution {
    /// Isotropic gaussian per class, means evenly spaced on a circle in the
    /// first two coordinates.
    GaussianMixture { radius: f64, std: f64 },
    /// One noisy half-circle arc per class, arcs rotated evenly around the
    /// origin and offset from it.
    TwoMoons { radius: f64, offset: f64, std: f64 },
}

/// How one domain is derived from the base distribution:
/// `x = R(rotation) · (scale ⊙ base) + translation + class_shift[y] + noise·ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub role: Role,
    /// Rotation in degrees, applied in the plane of the first two coordinates.
    pub rotation_deg: f64,
    /// Empty means no translation.
    #[serde(default)]
    pub translation: Vec<f64>,
    /// Empty means unit scale.
    #[serde(default)]
    pub scale: Vec<f64>,
    /// One offset vector per class; empty means none.
    #[serde(default)]
    pub class_shift: Vec<Vec<f64>>,
    #[serde(default)]
    pub noise: f64,
    pub samples_per_class: usize,
}

impl DomainSpec {
    pub fn identity(role: Role, samples_per_class: usize) -> Self {
        Self {
            role,
            rotation_deg: 0.0,
            translation: Vec::new(),
            scale: Vec::new(),
            class_shift: Vec::new(),
            noise: 0.0,
            samples_per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub base: BaseDistribution,
    pub domains: Vec<DomainSpec>,
}

impl TaskSpec {
    /// Four classes in the plane, three rotated and class-shifted sources
    /// and a target rotated further than any of them.
    pub fn default_task(seed: u64) -> Self {
        let per_class = 200;
        let source = |rotation_deg: f64, class_shift: Vec<Vec<f64>>| DomainSpec {
            rotation_deg,
            class_shift,
            noise: 0.0,
            ..DomainSpec::identity(Role::Source, per_class)
        };
        Self {
            dim: 2,
            classes: 4,
            seed,
            base: BaseDistribution::GaussianMixture { radius: 2.0, std: 0.4 },
            domains: vec![
                source(0.0, vec![vec![0.2, 0.0], vec![0.0, 0.2], vec![-0.2, 0.0], vec![0.0, -0.2]]),
                source(25.0, vec![vec![0.0, 0.3], vec![-0.3, 0.0], vec![0.0, -0.3], vec![0.3, 0.0]]),
                source(-20.0, vec![vec![-0.2, -0.2], vec![0.2, -0.2], vec![0.2, 0.2], vec![-0.2, 0.2]]),
                DomainSpec {
                    rotation_deg: 40.0,
                    ..DomainSpec::identity(Role::Target, per_class)
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::Spec(m));
        if self.classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.dim < 2 {
            return bad("at least two feature dimensions are required".into());
        }
        let targets = self.domains.iter().filter(|d| d.role == Role::Target).count();
        if targets != 1 {
            return bad(format!("exactly one target domain is required, found {targets}"));
        }
        if self.domains.len() - 1 < 2 {
            return bad("at least two source domains are required".into());
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.samples_per_class == 0 {
                return bad(format!("domain {i} has zero samples per class"));
            }
            if !d.translation.is_empty() && d.translation.len() != self.dim {
                return bad(format!("domain {i} translation length differs from dim"));
            }
            if !d.scale.is_empty() && d.scale.len() != self.dim {
                return bad(format!("domain {i} scale length differs from dim"));
            }
            if !d.class_shift.is_empty()
                && (d.class_shift.len() != self.classes || d.class_shift.iter().any(|s| s.len() != self.dim))
            {
                return bad(format!("domain {i} class_shift must be classes x dim"));
            }
            if d.noise < 0.0 {
                return bad(format!("domain {i} has negative noise"));
            }
        }
        Ok(())
    }

    /// Domains in on-disk order with their tags: sources `s0, s1, ...`
    /// in declaration order, then `t`.
    fn tagged(&self) -> Vec<(String, &DomainSpec)> {
        let mut out: Vec<(String, &DomainSpec)> = self
            .domains
            .iter()
            .filter(|d| d.role == Role::Source)
            .enumerate()
            .map(|(m, d)| (format!("s{m}"), d))
            .collect();
        out.extend(self.domains.iter().filter(|d| d.role == Role::Target).map(|d| ("t".to_string(), d)));
        out
    }
}

fn base_sample<R: Rng>(base: &BaseDistribution, dim: usize, class: usize, classes: usize, rng: &mut R) -> Vec<f64> {
    let normal = |std: f64| Normal::new(0.0, std).expect("non-negative std");
    let mut x = vec![0.0; dim];
    let angle = 2.0 * PI * class as f64 / classes as f64;
    match *base {
        BaseDistribution::GaussianMixture { radius, std } => {
            x[0] = radius * angle.cos();
            x[1] = radius * angle.sin();
            let n = normal(std);
            for v in &mut x {
                *v += n.sample(rng);
            }
        }
        BaseDistribution::TwoMoons { radius, offset, std } => {
            let t: f64 = rng.random_range(0.0..PI);
            let (lx, ly) = (radius * t.cos(), radius * t.sin() - offset);
            let (c, s) = (angle.cos(), angle.sin());
            x[0] = c * lx - s * ly;
            x[1] = s * lx + c * ly;
            let n = normal(std);
            for v in &mut x {
                *v += n.sample(rng);
            }
        }
    }
    x
}

fn transform(spec: &DomainSpec, base: &[f64], class: usize, noise: &mut impl FnMut() -> f64) -> Vec<f64> {
    let mut x: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(j, &v)| v * spec.scale.get(j).copied().unwrap_or(1.0))
        .collect();
    let theta = spec.rotation_deg.to_radians();
    let (c, s) = (theta.cos(), theta.sin());
    let (a, b) = (x[0], x[1]);
    x[0] = c * a - s * b;
    x[1] = s * a + c * b;
    for (j, v) in x.iter_mut().enumerate() {
        *v += spec.translation.get(j).copied().unwrap_or(0.0);
        if let Some(shift) = spec.class_shift.get(class) {
            *v += shift[j];
        }
        if spec.noise > 0.0 {
            *v += spec.noise * noise();
        }
    }
    x
}

/// Features and labels of every domain, sources first.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub sources: Vec<LabeledSet>,
    pub target: LabeledSet,
}

impl Task {
    pub fn train_data(&self) -> TrainData {
        TrainData {
            sources: self.sources.clone(),
            target_x: self.target.x.clone(),
            classes: self.spec.classes,
        }
    }

    pub fn target_labels(&self) -> &[usize] {
        &self.target.y
    }
}

/// Samples every domain. Each domain draws from its own random stream, so
/// editing one domain's transform leaves the others unchanged.
pub fn generate_task(spec: &TaskSpec) -> Result<Task, TaskError> {
    spec.validate()?;
    let mut sources = Vec::new();
    let mut target = None;
    for (index, (_, d)) in spec.tagged().into_iter().enumerate() {
        let mut r = rng::stream(spec.seed, &[index as u64]);
        let mut noise_rng = rng::stream(spec.seed, &[index as u64, 1]);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut noise = || std_normal.sample(&mut noise_rng);
        let n = d.samples_per_class * spec.classes;
        let mut data = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.classes;
            let b = base_sample(&spec.base, spec.dim, class, spec.classes, &mut r);
            data.extend(transform(d, &b, class, &mut noise));
            labels.push(class);
        }
        let set = LabeledSet {
            x: Tensor::matrix(n, spec.dim, data),
            y: labels,
        };
        match d.role {
            Role::Source => sources.push(set),
            Role::Target => target = Some(set),
        }
    }
    Ok(Task {
        spec: spec.clone(),
        sources,
        target: target.expect("validated target"),
    })
}

/// One domain's entry in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainFiles {
    pub tag: String,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: TaskSpec,
    pub files: Vec<DomainFiles>,
}

pub const MANIFEST_FILE: &str = "task.toml";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes feature and label CSVs plus `task.toml` into `dir`; returns the
/// manifest path.
pub fn write_task(task: &Task, dir: &Path) -> Result<PathBuf, TaskError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let sets = task.sources.iter().chain(std::iter::once(&task.target));
    let mut files = Vec::new();
    for ((tag, _), set) in task.spec.tagged().into_iter().zip(sets) {
        let features = PathBuf::from(format!("{tag}_features.csv"));
        let labels = PathBuf::from(format!("{tag}_labels.csv"));

        let header: Vec<String> = (0..task.spec.dim).map(|j| format!("feat_{j}")).collect();
        let mut text = header.join(",");
        text.push('\n');
        for i in 0..set.len() {
            let row: Vec<String> = set.x.row(i).iter().map(|&v| fmt17(v)).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let path = dir.join(&features);
        fs::write(&path, text).map_err(io_err(&path))?;

        let mut text = String::from("label\n");
        for y in &set.y {
            text.push_str(&y.to_string());
            text.push('\n');
        }
        let path = dir.join(&labels);
        fs::write(&path, text).map_err(io_err(&path))?;

        files.push(DomainFiles {
            tag,
            features,
            labels,
            rows: set.len(),
        });
    }
    let manifest = Manifest {
        spec: task.spec.clone(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| TaskError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, TaskError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn read_features(path: &Path, rows: usize, dim: usize) -> Result<Tensor, TaskError> {
    let lines = read_lines(path)?;
    if lines.len() != rows {
        return Err(TaskError::Count {
            path: path.to_path_buf(),
            expected: rows,
            found: lines.len(),
        });
    }
    let mut data = Vec::with_capacity(rows * dim);
    for (line, text) in lines {
        let malformed = |message: String| TaskError::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        let fields: Vec<&str> = text.split(',').collect();
        if fields.len() != dim {
            return Err(malformed(format!("expected {dim} fields, found {}", fields.len())));
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| malformed(format!("not a number: {f:?}")))?;
            data.push(v);
        }
    }
    Ok(Tensor::matrix(rows, dim, data))
}

fn read_labels(path: &Path, rows: usize, classes: usize) -> Result<Vec<usize>, TaskError> {
    let lines = read_lines(path)?;
    if lines.len() != rows {
        return Err(TaskError::Count {
            path: path.to_path_buf(),
            expected: rows,
            found: lines.len(),
        });
    }
    lines
        .into_iter()
        .map(|(line, text)| {
            let malformed = |message: String| TaskError::Malformed {
                path: path.to_path_buf(),
                line,
                message,
            };
            let y: usize = text
                .trim()
                .parse()
                .map_err(|_| malformed(format!("not a class index: {text:?}")))?;
            if y >= classes {
                return Err(malformed(format!("label {y} out of range for {classes} classes")));
            }
            Ok(y)
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Manifest, TaskError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| TaskError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    manifest.spec.validate()?;
    if manifest.files.len() != manifest.spec.domains.len() {
        return Err(TaskError::Manifest {
            path: path.to_path_buf(),
            message: "file list does not match the domain list".into(),
        });
    }
    Ok(manifest)
}

/// Reads a task written by [`write_task`], validating counts and labels.
pub fn load_task(manifest_path: &Path) -> Result<Task, TaskError> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let spec = manifest.spec;
    let mut sources = Vec::new();
    let mut target = None;
    for f in &manifest.files {
        let x = read_features(&dir.join(&f.features), f.rows, spec.dim)?;
        let y = read_labels(&dir.join(&f.labels), f.rows, spec.classes)?;
        let set = LabeledSet { x, y };
        if f.tag == "t" {
            target = Some(set);
        } else {
            sources.push(set);
        }
    }
    let target = target.ok_or_else(|| TaskError::Manifest {
        path: manifest_path.to_path_buf(),
        message: "no target domain listed".into(),
    })?;
    Ok(Task { spec, sources, target })
}

/// Target features only: what the trainer is allowed to see of a task on disk.
pub fn load_train_data(manifest_path: &Path) -> Result<TrainData, TaskError> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let spec = &manifest.spec;
    let mut sources = Vec::new();
    let mut target_x = None;
    for f in &manifest.files {
        let x = read_features(&dir.join(&f.features), f.rows, spec.dim)?;
        if f.tag == "t" {
            target_x = Some(x);
        } else {
            let y = read_labels(&dir.join(&f.labels), f.rows, spec.classes)?;
            sources.push(LabeledSet { x, y });
        }
    }
    Ok(TrainData {
        sources,
        target_x: target_x.ok_or_else(|| TaskError::Manifest {
            path: manifest_path.to_path_buf(),
            message: "no target domain listed".into(),
        })?,
        classes: spec.classes,
    })
}

/// Ground-truth target labels, for evaluation.
pub fn load_target_labels(manifest_path: &Path) -> Result<Vec<usize>, TaskError> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let f = manifest
        .files
        .iter()
        .find(|f| f.tag == "t")
        .ok_or_else(|| TaskError::Manifest {
            path: manifest_path.to_path_buf(),
            message: "no target domain listed".into(),
        })?;
    read_labels(&dir.join(&f.labels), f.rows, manifest.spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_task_shape() {
        let task = generate_task(&TaskSpec::default_task(7)).unwrap();
        assert_eq!(task.sources.len(), 3);
        assert_eq!(task.target.len(), 800);
        assert!(task.target.y.iter().all(|&y| y < 4));
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut spec = TaskSpec::default_task(1);
        spec.domains[0].samples_per_class = 0;
        assert!(generate_task(&spec).is_err());
        let mut spec = TaskSpec::default_task(1);
        spec.domains.truncate(1);
        assert!(generate_task(&spec).is_err());
    }

    #[test]
    fn moons_base_generates() {
        let mut spec = TaskSpec::default_task(3);
        spec.base = BaseDistribution::TwoMoons {
            radius: 1.0,
            offset: 0.5,
            std: 0.1,
        };
        let task = generate_task(&spec).unwrap();
        assert!(task.target.x.all_finite());
    }
}
