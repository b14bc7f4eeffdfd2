//! Task streams: synthetic Gaussian clusters, IDX-file corpora split into
//! tasks, and a two-task probe whose second task can be moved from far away
//! onto the first task's clusters.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classes::ClassSet;
use crate::error::{config, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Task<S> {
    pub id: usize,
    pub classes: ClassSet,
    pub train_x: Tensor<S>,
    pub train_y: Vec<usize>,
    pub test_x: Tensor<S>,
    pub test_y: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream<S> {
    pub tasks: Vec<Task<S>>,
    pub feature_dim: usize,
    pub total_classes: usize,
}

impl<S: Scalar> TaskStream<S> {
    /// Checks disjoint class sets and label containment.
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tasks.iter().enumerate() {
            if t.train_y.iter().chain(&t.test_y).any(|&y| !t.classes.contains(y)) {
                return config(format!("task {i} has a label outside its class set"));
            }
            if t.train_x.cols() != self.feature_dim || t.test_x.cols() != self.feature_dim {
                return config(format!("task {i} feature dimension mismatch"));
            }
            for u in &self.tasks[i + 1..] {
                if !t.classes.is_disjoint(&u.classes) {
                    return config("task class sets overlap");
                }
            }
        }
        Ok(())
    }

    /// All tasks' training data merged into one task (joint-training reference).
    pub fn joint(&self) -> Result<Task<S>> {
        let mut train_x = Tensor::empty(self.feature_dim);
        let mut test_x = Tensor::empty(self.feature_dim);
        let mut train_y = Vec::new();
        let mut test_y = Vec::new();
        let mut classes = ClassSet::default();
        for t in &self.tasks {
            train_x = train_x.vstack(&t.train_x)?;
            test_x = test_x.vstack(&t.test_x)?;
            train_y.extend_from_slice(&t.train_y);
            test_y.extend_from_slice(&t.test_y);
            classes = classes.union(&t.classes);
        }
        Ok(Task {
            id: 0,
            classes,
            train_x,
            train_y,
            test_x,
            test_y,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Gaussian,
    IdxDataset,
    SimilarityProbe,
}

fn d_num_tasks() -> usize {
    5
}
fn d_classes_per_task() -> usize {
    2
}
fn d_samples_per_class() -> usize {
    200
}
fn d_feature_dim() -> usize {
    20
}
fn d_separation() -> f64 {
    4.0
}
fn d_std() -> f64 {
    1.0
}
fn d_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    #[serde(default = "d_num_tasks")]
    pub num_tasks: usize,
    #[serde(default = "d_classes_per_task")]
    pub classes_per_task: usize,
    #[serde(default = "d_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    /// Norm of each Gaussian class mean (in units of `cluster_std`).
    #[serde(default = "d_separation")]
    pub separation: f64,
    #[serde(default = "d_std")]
    pub cluster_std: f64,
    /// Similarity probe only: 0 puts task 2 far away, 1 on top of task 1.
    #[serde(default)]
    pub overlap: f64,
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub random_partition: bool,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn gaussian(num_tasks: usize, classes_per_task: usize, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::Gaussian,
            num_tasks,
            classes_per_task,
            samples_per_class: d_samples_per_class(),
            feature_dim: d_feature_dim(),
            separation: d_separation(),
            cluster_std: d_std(),
            overlap: 0.0,
            test_fraction: d_test_fraction(),
            random_partition: false,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            seed,
        }
    }

    pub fn similarity_probe(overlap: f64, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::SimilarityProbe,
            num_tasks: 2,
            overlap,
            ..Self::gaussian(2, 2, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.classes_per_task == 0 {
            return config("scenario needs at least one task and one class per task");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return config("test_fraction must lie in (0, 1)");
        }
        if self.kind != ScenarioKind::IdxDataset {
            if !(self.cluster_std > 0.0) || !self.cluster_std.is_finite() {
                return config("degenerate cluster covariance: cluster_std must be positive");
            }
            if self.feature_dim == 0 || self.samples_per_class < 2 {
                return config("feature_dim >= 1 and samples_per_class >= 2 required");
            }
        }
        Ok(())
    }

    pub fn build<S: Scalar>(&self) -> Result<TaskStream<S>> {
        match self.kind {
            ScenarioKind::Gaussian => make_gaussian_stream(self),
            ScenarioKind::IdxDataset => load_idx_stream(self),
            ScenarioKind::SimilarityProbe => make_similarity_probe(self),
        }
    }
}

/// Splits `total` classes into `num_tasks` groups of `per_task`, in
/// ascending order or shuffled by `seed`.
pub fn partition_classes(total: usize, num_tasks: usize, per_task: usize, shuffle: Option<u64>) -> Result<Vec<ClassSet>> {
    if num_tasks * per_task > total {
        return config(format!(
            "{num_tasks} tasks x {per_task} classes exceed {total} available classes"
        ));
    }
    let mut ids: Vec<usize> = (0..num_tasks * per_task).collect();
    if let Some(seed) = shuffle {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(ids.chunks(per_task).map(|c| ClassSet::new(c.to_vec())).collect())
}

/// Samples of each class listed in `per_class`, split per class into train/test.
fn split_tasks<S: Scalar>(
    partition: &[ClassSet],
    per_class: &[Vec<Vec<f64>>],
    test_fraction: f64,
    dim: usize,
) -> Result<Vec<Task<S>>> {
    let mut tasks = Vec::with_capacity(partition.len());
    for (id, classes) in partition.iter().enumerate() {
        let (mut trx, mut tr_y, mut tex, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &c in classes.ids() {
            let samples = &per_class[c];
            let n_test = ((samples.len() as f64) * test_fraction).round().max(1.0) as usize;
            let n_train = samples.len().saturating_sub(n_test);
            if n_train == 0 {
                return config(format!("class {c} has too few samples to split"));
            }
            for (i, s) in samples.iter().enumerate() {
                let conv = s.iter().map(|&v| S::lit(v));
                if i < n_train {
                    trx.extend(conv);
                    tr_y.push(c);
                } else {
                    tex.extend(conv);
                    te_y.push(c);
                }
            }
        }
        tasks.push(Task {
            id,
            classes: classes.clone(),
            train_x: Tensor::new(vec![tr_y.len(), dim], trx)?,
            train_y: tr_y,
            test_x: Tensor::new(vec![te_y.len(), dim], tex)?,
            test_y: te_y,
        });
    }
    Ok(tasks)
}

fn gaussian_samples(rng: &mut ChaCha8Rng, mean: &[f64], std: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            mean.iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + std * z
                })
                .collect()
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Isotropic Gaussian clusters, one per class, with means of norm
/// `separation * cluster_std` in random directions.
pub fn make_gaussian_stream<S: Scalar>(spec: &ScenarioSpec) -> Result<TaskStream<S>> {
    spec.validate()?;
    let total = spec.num_tasks * spec.classes_per_task;
    let partition = partition_classes(
        total,
        spec.num_tasks,
        spec.classes_per_task,
        spec.random_partition.then_some(spec.seed ^ 0xA5A5),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..total)
        .map(|_| {
            random_unit(&mut rng, spec.feature_dim)
                .into_iter()
                .map(|u| u * spec.separation * spec.cluster_std)
                .collect()
        })
        .collect();
    let per_class: Vec<Vec<Vec<f64>>> = means
        .iter()
        .map(|m| gaussian_samples(&mut rng, m, spec.cluster_std, spec.samples_per_class))
        .collect();
    let stream = TaskStream {
        tasks: split_tasks(&partition, &per_class, spec.test_fraction, spec.feature_dim)?,
        feature_dim: spec.feature_dim,
        total_classes: total,
    };
    stream.validate()?;
    Ok(stream)
}

/// Offset of task 2 from task 1 along a fresh axis, in units of `cluster_std`:
/// overlap 1 gives [`PROBE_NEAR`], overlap 0 gives [`PROBE_FAR`].
pub const PROBE_NEAR: f64 = 0.75;
pub const PROBE_FAR: f64 = 12.0;

/// Class means of the similarity probe: task 1 = classes 0, 1; task 2 = classes 2, 3.
pub fn probe_means(spec: &ScenarioSpec) -> Vec<Vec<f64>> {
    let d = spec.feature_dim.max(2);
    let s = spec.cluster_std;
    let half = 0.5 * spec.separation * s;
    let shift = (spec.overlap * PROBE_NEAR + (1.0 - spec.overlap) * PROBE_FAR) * s;
    let mut means = vec![vec![0.0; d]; 4];
    means[0][0] = half;
    means[1][0] = -half;
    means[2][0] = half;
    means[2][1] = shift;
    means[3][0] = -half;
    means[3][1] = shift;
    means
}

/// Two binary tasks; the second task's clusters slide from far away
/// (`overlap = 0`) to within one standard deviation of the first task's
/// clusters (`overlap = 1`).
pub fn make_similarity_probe<S: Scalar>(spec: &ScenarioSpec) -> Result<TaskStream<S>> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&spec.overlap) {
        return config("overlap must lie in [0, 1]");
    }
    let d = spec.feature_dim.max(2);
    let means = probe_means(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per_class: Vec<Vec<Vec<f64>>> = means
        .iter()
        .map(|m| gaussian_samples(&mut rng, m, spec.cluster_std, spec.samples_per_class))
        .collect();
    let partition = vec![ClassSet::new(vec![0, 1]), ClassSet::new(vec![2, 3])];
    let stream = TaskStream {
        tasks: split_tasks(&partition, &per_class, spec.test_fraction, d)?,
        feature_dim: d,
        total_classes: 4,
    };
    stream.validate()?;
    Ok(stream)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: "unexpected end of file".into(),
        })
}

/// Parses an unsigned-byte IDX image file into `(count, pixels_per_image, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let px = rows * cols;
    let need = 16 + n * px;
    if bytes.len() != need {
        return Err(Error::Format {
            offset: bytes.len().min(need) as u64,
            message: format!("image payload is {} bytes, header implies {}", bytes.len() - 16, n * px),
        });
    }
    Ok((n, px, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            offset: bytes.len().min(8 + n) as u64,
            message: format!("label payload is {} bytes, header implies {n}", bytes.len() - 8),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Serializes images (`count x rows x cols`, row-major) as an IDX file.
pub fn encode_idx_images(rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let per = (rows * cols) as usize;
    let n = if per == 0 { 0 } else { pixels.len() / per };
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_pair(images: &Path, labels: &Path) -> Result<(usize, Vec<u8>, Vec<u8>)> {
    let (n, px, pixels) = parse_idx_images(&fs::read(images)?)?;
    let labels = parse_idx_labels(&fs::read(labels)?)?;
    if labels.len() != n {
        return config(format!("{} images but {} labels", n, labels.len()));
    }
    Ok((px, pixels, labels))
}

/// Builds a split stream from IDX files: pixels scaled to [0, 1], classes
/// taken in ascending label order and partitioned like the Gaussian stream.
pub fn load_idx_stream<S: Scalar>(spec: &ScenarioSpec) -> Result<TaskStream<S>> {
    spec.validate()?;
    let path = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
        p.clone().ok_or_else(|| Error::Config(format!("idx scenario needs {what}")))
    };
    let (px, tr_pix, tr_lab) = read_pair(&path(&spec.train_images, "train_images")?, &path(&spec.train_labels, "train_labels")?)?;
    let (px2, te_pix, te_lab) = read_pair(&path(&spec.test_images, "test_images")?, &path(&spec.test_labels, "test_labels")?)?;
    if px != px2 {
        return config("train and test images differ in size");
    }
    let mut labels: Vec<u8> = tr_lab.clone();
    labels.sort_unstable();
    labels.dedup();
    let total = spec.num_tasks * spec.classes_per_task;
    let partition = partition_classes(
        labels.len(),
        spec.num_tasks,
        spec.classes_per_task,
        spec.random_partition.then_some(spec.seed ^ 0xA5A5),
    )?;
    // class id k corresponds to the k-th smallest label
    let class_of = |l: u8| labels.iter().position(|&x| x == l).filter(|&k| k < total);

    let build = |pix: &[u8], lab: &[u8], classes: &ClassSet| -> Result<(Tensor<S>, Vec<usize>)> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (i, &l) in lab.iter().enumerate() {
            if let Some(c) = class_of(l).filter(|&c| classes.contains(c)) {
                x.extend(pix[i * px..(i + 1) * px].iter().map(|&p| S::lit(f64::from(p) / 255.0)));
                y.push(c);
            }
        }
        Ok((Tensor::new(vec![y.len(), px], x)?, y))
    };
    let mut tasks = Vec::with_capacity(partition.len());
    for (id, classes) in partition.into_iter().enumerate() {
        let (train_x, train_y) = build(&tr_pix, &tr_lab, &classes)?;
        let (test_x, test_y) = build(&te_pix, &te_lab, &classes)?;
        if train_y.is_empty() || test_y.is_empty() {
            return config(format!("task {id} has no train or test samples"));
        }
        tasks.push(Task {
            id,
            classes,
            train_x,
            train_y,
            test_x,
            test_y,
        });
    }
    let stream = TaskStream {
        tasks,
        feature_dim: px,
        total_classes: total,
    };
    stream.validate()?;
    Ok(stream)
}
