//! Seeded synthetic heterogeneous datasets and the two-step weighted
//! sampler: weighted choice of a dataset, then a shuffled-epoch batch from
//! that dataset. Everything is a pure function of the configured seeds.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// Gaussian mixture classification: `classes` seeded centers in `d` dims.
    Blobs {
        d: usize,
        classes: usize,
        noise: f64,
        seed: u64,
    },
    /// Concentric-annulus classification embedded into `d` dims by a seeded
    /// linear transform; the decision boundary is nonlinear in the features.
    Rings {
        d: usize,
        classes: usize,
        noise: f64,
        seed: u64,
        /// Optional offset added to the 2-d ring plane before embedding.
        #[serde(default)]
        shift: f64,
        /// Optional rotation (radians) of the ring plane; used by the
        /// held-out "shifted rings" downstream variant.
        #[serde(default)]
        rotation: f64,
    },
    /// y = W·sin(A·x) + noise with seeded A, W.
    SineRegression {
        d: usize,
        out_dim: usize,
        noise: f64,
        seed: u64,
    },
    /// Blobs whose centers are rotated by a seeded orthogonal-ish mix;
    /// the held-out downstream classification variant.
    RotatedBlobs {
        d: usize,
        classes: usize,
        noise: f64,
        seed: u64,
        angle: f64,
    },
}

impl GeneratorSpec {
    pub fn input_dim(&self) -> usize {
        match *self {
            GeneratorSpec::Blobs { d, .. }
            | GeneratorSpec::Rings { d, .. }
            | GeneratorSpec::SineRegression { d, .. }
            | GeneratorSpec::RotatedBlobs { d, .. } => d,
        }
    }

    pub fn task_kind(&self) -> TaskKind {
        match self {
            GeneratorSpec::SineRegression { .. } => TaskKind::Regression,
            _ => TaskKind::Classification,
        }
    }

    /// Output width of the matching head: class count or regression out_dim.
    pub fn output_dim(&self) -> usize {
        match *self {
            GeneratorSpec::Blobs { classes, .. }
            | GeneratorSpec::Rings { classes, .. }
            | GeneratorSpec::RotatedBlobs { classes, .. } => classes,
            GeneratorSpec::SineRegression { out_dim, .. } => out_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.input_dim();
        if d < 1 {
            return Err(Error::Config("generator input dim must be >= 1".into()));
        }
        match *self {
            GeneratorSpec::Blobs { classes, .. }
            | GeneratorSpec::Rings { classes, .. }
            | GeneratorSpec::RotatedBlobs { classes, .. } => {
                if classes < 2 {
                    return Err(Error::Config("class count must be >= 2".into()));
                }
            }
            GeneratorSpec::SineRegression { out_dim, .. } => {
                if out_dim < 1 {
                    return Err(Error::Config("out_dim must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub dataset_id: u32,
    pub task_kind: TaskKind,
    pub generator: GeneratorSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub w_sample: f64,
    pub w_loss: f64,
    pub batch_size: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.task_kind != self.generator.task_kind() {
            return Err(Error::Config(format!(
                "dataset {}: task_kind does not match generator",
                self.dataset_id
            )));
        }
        if self.w_sample <= 0.0 || self.w_loss <= 0.0 {
            return Err(Error::Config(format!(
                "dataset {}: sampling and loss weights must be positive",
                self.dataset_id
            )));
        }
        if self.batch_size == 0 || self.n_train == 0 {
            return Err(Error::Config(format!(
                "dataset {}: batch_size and n_train must be positive",
                self.dataset_id
            )));
        }
        Ok(())
    }
}

/// Per-sample targets of a batch or split.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Tensor),
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub targets: Targets,
    pub dataset_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

enum RawTargets {
    Labels(Vec<usize>),
    Values(Vec<Vec<f64>>),
}

/// Materialized dataset: standardized features plus targets for both splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    d: usize,
    train_x: Vec<f64>,
    test_x: Vec<f64>,
    train_y: RawTargetsStore,
    test_y: RawTargetsStore,
}

#[derive(Debug, Clone)]
enum RawTargetsStore {
    Labels(Vec<usize>),
    Values(Vec<f64>, usize),
}

fn embed_2d(point: [f64; 2], basis: &[Vec<f64>; 2], d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| point[0] * basis[0][j] + point[1] * basis[1][j])
        .collect()
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
        spec.validate()?;
        let d = spec.generator.input_dim();
        let total = spec.n_train + spec.n_test;
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(total);
        let targets = match &spec.generator {
            GeneratorSpec::Blobs {
                classes,
                noise,
                seed,
                ..
            }
            | GeneratorSpec::RotatedBlobs {
                classes,
                noise,
                seed,
                ..
            } => {
                let mut setup = Rng::stream(*seed, 1);
                let mut centers: Vec<Vec<f64>> = (0..*classes)
                    .map(|_| (0..d).map(|_| 2.0 * setup.normal()).collect())
                    .collect();
                if let GeneratorSpec::RotatedBlobs { angle, .. } = spec.generator {
                    // rotate each adjacent coordinate pair of every center
                    for c in centers.iter_mut() {
                        for p in 0..d / 2 {
                            let (a, b) = (c[2 * p], c[2 * p + 1]);
                            c[2 * p] = a * angle.cos() - b * angle.sin();
                            c[2 * p + 1] = a * angle.sin() + b * angle.cos();
                        }
                    }
                }
                let mut rng = Rng::stream(*seed, 2);
                let mut labels = Vec::with_capacity(total);
                for _ in 0..total {
                    let class = rng.next_below(*classes as u64) as usize;
                    let x: Vec<f64> = centers[class]
                        .iter()
                        .map(|&c| c + noise * rng.normal())
                        .collect();
                    xs.push(x);
                    labels.push(class);
                }
                RawTargets::Labels(labels)
            }
            GeneratorSpec::Rings {
                classes,
                noise,
                seed,
                shift,
                rotation,
                ..
            } => {
                let mut setup = Rng::stream(*seed, 1);
                let mut basis = [vec![0.0; d], vec![0.0; d]];
                for b in basis.iter_mut() {
                    let mut norm = 0.0;
                    for v in b.iter_mut() {
                        *v = setup.normal();
                        norm += *v * *v;
                    }
                    let norm = norm.sqrt();
                    for v in b.iter_mut() {
                        *v /= norm;
                    }
                }
                let mut rng = Rng::stream(*seed, 2);
                let mut labels = Vec::with_capacity(total);
                for _ in 0..total {
                    let class = rng.next_below(*classes as u64) as usize;
                    let radius = 1.0 + 1.5 * class as f64 + noise * rng.normal();
                    let theta = rng.uniform(0.0, std::f64::consts::TAU) + rotation;
                    let p = [radius * theta.cos() + shift, radius * theta.sin() + shift];
                    let mut x = embed_2d(p, &basis, d);
                    for v in x.iter_mut() {
                        *v += 0.05 * noise * rng.normal();
                    }
                    xs.push(x);
                    labels.push(class);
                }
                RawTargets::Labels(labels)
            }
            GeneratorSpec::SineRegression {
                out_dim,
                noise,
                seed,
                ..
            } => {
                let hidden = 2 * (*out_dim).max(2);
                let mut setup = Rng::stream(*seed, 1);
                let a: Vec<Vec<f64>> = (0..hidden)
                    .map(|_| (0..d).map(|_| setup.normal() / (d as f64).sqrt()).collect())
                    .collect();
                let w: Vec<Vec<f64>> = (0..hidden)
                    .map(|_| (0..*out_dim).map(|_| setup.normal()).collect())
                    .collect();
                let mut rng = Rng::stream(*seed, 2);
                let mut values = Vec::with_capacity(total);
                for _ in 0..total {
                    let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                    let mut y = vec![0.0; *out_dim];
                    for m in 0..hidden {
                        let act: f64 = a[m].iter().zip(&x).map(|(av, xv)| av * xv).sum::<f64>().sin();
                        for (yj, wj) in y.iter_mut().zip(&w[m]) {
                            *yj += wj * act;
                        }
                    }
                    for yj in y.iter_mut() {
                        *yj += noise * rng.normal();
                    }
                    xs.push(x);
                    values.push(y);
                }
                RawTargets::Values(values)
            }
        };

        // standardize features to zero mean / unit variance per dimension,
        // with statistics taken over the train split only
        let n_train = spec.n_train;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for x in xs.iter().take(n_train) {
            for (j, &v) in x.iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n_train as f64;
        }
        for x in xs.iter().take(n_train) {
            for (j, &v) in x.iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        for v in var.iter_mut() {
            *v = (*v / n_train as f64).sqrt().max(1e-9);
        }
        for x in xs.iter_mut() {
            for j in 0..d {
                x[j] = (x[j] - mean[j]) / var[j];
            }
        }

        let flat = |range: std::ops::Range<usize>| -> Vec<f64> {
            xs[range].iter().flatten().copied().collect()
        };
        let train_x = flat(0..n_train);
        let test_x = flat(n_train..total);
        let (train_y, test_y) = match targets {
            RawTargets::Labels(labels) => (
                RawTargetsStore::Labels(labels[..n_train].to_vec()),
                RawTargetsStore::Labels(labels[n_train..].to_vec()),
            ),
            RawTargets::Values(values) => {
                let out = spec.generator.output_dim();
                let f = |r: &[Vec<f64>]| r.iter().flatten().copied().collect::<Vec<f64>>();
                (
                    RawTargetsStore::Values(f(&values[..n_train]), out),
                    RawTargetsStore::Values(f(&values[n_train..]), out),
                )
            }
        };
        Ok(Dataset {
            spec: spec.clone(),
            d,
            train_x,
            test_x,
            train_y,
            test_y,
        })
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_x.len() / self.d,
            Split::Test => self.test_x.len() / self.d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.train_x.is_empty()
    }

    /// Assemble a batch from explicit sample indices.
    pub fn batch(&self, split: Split, indices: &[usize]) -> Batch {
        let (xs, ys) = match split {
            Split::Train => (&self.train_x, &self.train_y),
            Split::Test => (&self.test_x, &self.test_y),
        };
        let mut x = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            x.extend_from_slice(&xs[i * self.d..(i + 1) * self.d]);
        }
        let targets = match ys {
            RawTargetsStore::Labels(labels) => {
                Targets::Labels(indices.iter().map(|&i| labels[i]).collect())
            }
            RawTargetsStore::Values(values, out) => {
                let mut y = Vec::with_capacity(indices.len() * out);
                for &i in indices {
                    y.extend_from_slice(&values[i * out..(i + 1) * out]);
                }
                Targets::Values(Tensor::matrix(indices.len(), *out, y).expect("target shape"))
            }
        };
        Batch {
            x: Tensor::matrix(indices.len(), self.d, x).expect("batch shape"),
            targets,
            dataset_id: self.spec.dataset_id,
        }
    }

    /// The whole split as one batch.
    pub fn full(&self, split: Split) -> Batch {
        let idx: Vec<usize> = (0..self.len(split)).collect();
        self.batch(split, &idx)
    }
}

/// Two-step sampling, step one: weighted choice of a dataset index.
pub fn sample_dataset(specs: &[DatasetSpec], rng: &mut Rng) -> Result<usize> {
    if specs.is_empty() {
        return Err(Error::Config("no datasets configured".into()));
    }
    let weights: Vec<f64> = specs.iter().map(|s| s.w_sample).collect();
    Ok(rng.weighted(&weights))
}

/// Shuffled-epoch cursor over one dataset's train split. Partial final
/// batches are dropped: the epoch reshuffles when fewer than batch_size
/// indices remain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchCursor {
    pub fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = Rng::stream(seed, stream);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        BatchCursor { order, pos: 0, rng }
    }

    pub fn next_indices(&mut self, batch_size: usize) -> &[usize] {
        if self.pos + batch_size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let slice = &self.order[self.pos..self.pos + batch_size];
        self.pos += batch_size;
        slice
    }
}

/// Serializable state of a [`BatchStream`], for bit-exact training resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchStreamState {
    pub sampler_rng: Rng,
    pub cursors: Vec<BatchCursor>,
}

/// The deterministic two-step batch stream: each `next` call picks a dataset
/// by sampling weight, then draws that dataset's next shuffled-epoch batch.
pub struct BatchStream {
    datasets: Vec<Dataset>,
    state: BatchStreamState,
}

impl BatchStream {
    pub fn new(datasets: Vec<Dataset>, seed: u64) -> Self {
        let cursors = datasets
            .iter()
            .enumerate()
            .map(|(i, ds)| BatchCursor::new(ds.len(Split::Train), seed, 100 + i as u64))
            .collect();
        BatchStream {
            datasets,
            state: BatchStreamState {
                sampler_rng: Rng::stream(seed, 99),
                cursors,
            },
        }
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    pub fn specs(&self) -> Vec<DatasetSpec> {
        self.datasets.iter().map(|d| d.spec.clone()).collect()
    }

    pub fn state(&self) -> &BatchStreamState {
        &self.state
    }

    pub fn restore_state(&mut self, state: BatchStreamState) -> Result<()> {
        if state.cursors.len() != self.datasets.len() {
            return Err(Error::Config(
                "batch stream state does not match dataset count".into(),
            ));
        }
        self.state = state;
        Ok(())
    }

    pub fn next(&mut self) -> Result<Batch> {
        let specs: Vec<DatasetSpec> = self.specs();
        let idx = sample_dataset(&specs, &mut self.state.sampler_rng)?;
        let bs = self.datasets[idx].spec.batch_size;
        let indices = self.state.cursors[idx].next_indices(bs).to_vec();
        Ok(self.datasets[idx].batch(Split::Train, &indices))
    }
}
