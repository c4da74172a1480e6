//! Datasets, synthetic generators, label noise, CSV ingestion and the
//! seeded batching trajectory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TwoLayerReLU;
use crate::numerics::{gaussian_vector, SeededStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Value(f64),
    Class(usize),
}

impl Label {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Label::Value(v) => Some(v),
            Label::Class(_) => None,
        }
    }

    pub fn class(&self) -> Option<usize> {
        match *self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }
}

/// One instance `z = (x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: Label,
    /// Set when the label was replaced by [`inject_label_noise`].
    pub noisy: bool,
}

impl Example {
    pub fn regression(x: Vec<f64>, y: f64) -> Self {
        Self {
            x,
            y: Label::Value(y),
            noisy: false,
        }
    }

    pub fn classification(x: Vec<f64>, class: usize) -> Self {
        Self {
            x,
            y: Label::Class(class),
            noisy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub task: Task,
    pub d0: usize,
    /// Number of classes; zero for regression.
    pub classes: usize,
    pub noise_level: f64,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn noisy_count(&self) -> usize {
        self.examples.iter().filter(|e| e.noisy).count()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&Example> {
        indices.iter().map(|&i| &self.examples[i]).collect()
    }

    pub fn refs(&self) -> Vec<&Example> {
        self.examples.iter().collect()
    }

    pub fn mean_sq_norm(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        self.examples
            .iter()
            .map(|e| e.x.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / self.examples.len() as f64
    }

    /// Largest deviation of `‖x‖` from 1 over the dataset.
    pub fn max_unit_norm_deviation(&self) -> f64 {
        self.examples
            .iter()
            .map(|e| (e.x.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
}

fn unit_gaussian_inputs(stream: &mut SeededStream, d0: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .map(|_| {
            let mut x = gaussian_vector(stream, d0, 1.0)?.into_vec();
            normalize(&mut x);
            Ok(x)
        })
        .collect()
}

/// Teacher network used by [`gen_teacher_student`]: a two-layer ReLU net with
/// standard Gaussian first layer and fixed ±1 output signs, followed by tanh.
pub fn teacher_network(d0: usize, teacher_width: usize, seed: u64) -> Result<(TwoLayerReLU, Vec<f64>)> {
    let root = SeededStream::new(seed);
    let teacher = TwoLayerReLU::new(d0, teacher_width, seed)?;
    let mut wstream = root.substream("teacher-weights");
    let w = gaussian_vector(&mut wstream, d0 * teacher_width, 1.0)?.into_vec();
    Ok((teacher, w))
}

fn teacher_examples(
    teacher: &TwoLayerReLU,
    w: &[f64],
    stream: &mut SeededStream,
    n: usize,
) -> Result<Vec<Example>> {
    let xs = unit_gaussian_inputs(stream, teacher.d0(), n)?;
    Ok(xs
        .into_iter()
        .map(|x| {
            let y = libm::tanh(teacher.predict(w, &x));
            Example::regression(x, y)
        })
        .collect())
}

fn check_generator(d0: usize, width: usize, n: usize) -> Result<()> {
    if d0 == 0 || width == 0 || n == 0 {
        return Err(Error::invalid(format!(
            "generator needs d0, width, n >= 1 (got {d0}, {width}, {n})"
        )));
    }
    Ok(())
}

/// Teacher-student regression data: `x ~ N(0, I)` normalized to the unit
/// sphere, `y = tanh(teacher(x))`.
pub fn gen_teacher_student(d0: usize, teacher_width: usize, n: usize, seed: u64) -> Result<Dataset> {
    Ok(gen_teacher_student_split(d0, teacher_width, n, 1, seed)?.0)
}

/// Train and held-out sets drawn from the same teacher via independent
/// sub-streams of `seed`.
pub fn gen_teacher_student_split(
    d0: usize,
    teacher_width: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    check_generator(d0, teacher_width, n_train)?;
    check_generator(d0, teacher_width, n_test)?;
    let (teacher, w) = teacher_network(d0, teacher_width, seed)?;
    let root = SeededStream::new(seed);
    let provenance = format!("teacher_student(d0={d0}, width={teacher_width}, seed={seed})");
    let make = |label: &str, n: usize| -> Result<Dataset> {
        let mut s = root.substream(label);
        Ok(Dataset {
            examples: teacher_examples(&teacher, &w, &mut s, n)?,
            task: Task::Regression,
            d0,
            classes: 0,
            noise_level: 0.0,
            provenance: provenance.clone(),
        })
    };
    Ok((make("train", n_train)?, make("test", n_test)?))
}

/// Gaussian-cluster classification data. Each class has a centre drawn from
/// `N(0, separation²·I)`; inputs are centre plus `N(0, noise_std²·I)` noise.
/// Train and held-out sets share centres and come from independent sub-streams.
pub fn gen_gaussian_clusters(
    d0: usize,
    classes: usize,
    n_train: usize,
    n_test: usize,
    separation: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(separation > 0.0 && separation.is_finite() && noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("cluster separation must be positive and noise std >= 0"));
    }
    check_generator(d0, classes, n_train)?;
    check_generator(d0, classes, n_test)?;
    if classes < 2 {
        return Err(Error::invalid("classification needs at least 2 classes"));
    }
    let root = SeededStream::new(seed);
    let mut cs = root.substream("centres");
    let centres = (0..classes)
        .map(|_| gaussian_vector(&mut cs, d0, separation).map(|v| v.into_vec()))
        .collect::<Result<Vec<_>>>()?;
    let provenance =
        format!("gaussian_clusters(d0={d0}, classes={classes}, separation={separation}, noise_std={noise_std}, seed={seed})");
    let make = |label: &str, n: usize| -> Result<Dataset> {
        let mut s = root.substream(label);
        let mut examples = Vec::with_capacity(n);
        for _ in 0..n {
            let c = s.next_below(classes as u64) as usize;
            let noise = gaussian_vector(&mut s, d0, noise_std)?;
            let x = centres[c]
                .iter()
                .zip(noise.as_slice())
                .map(|(m, e)| m + e)
                .collect();
            examples.push(Example::classification(x, c));
        }
        Ok(Dataset {
            examples,
            task: Task::Classification,
            d0,
            classes,
            noise_level: 0.0,
            provenance: provenance.clone(),
        })
    };
    Ok((make("train", n_train)?, make("test", n_test)?))
}

/// Replaces the labels of exactly `round(eps·n)` uniformly chosen examples
/// with labels drawn uniformly over all classes.
pub fn inject_label_noise(ds: &Dataset, eps: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("noise level must lie in [0, 1], got {eps}")));
    }
    if ds.task != Task::Classification {
        return Err(Error::invalid("label noise applies to classification datasets only"));
    }
    let n = ds.len();
    let count = (eps * n as f64).round() as usize;
    let mut stream = SeededStream::new(seed).substream("label-noise");
    let mut order: Vec<usize> = (0..n).collect();
    // Partial Fisher–Yates: the first `count` slots are a uniform subset.
    for i in 0..count {
        let j = i + stream.next_below((n - i) as u64) as usize;
        order.swap(i, j);
    }
    let mut out = ds.clone();
    for &i in &order[..count] {
        let c = stream.next_below(ds.classes as u64) as usize;
        out.examples[i].y = Label::Class(c);
        out.examples[i].noisy = true;
    }
    out.noise_level = eps;
    out.provenance = format!("{} + label_noise(eps={eps}, seed={seed})", ds.provenance);
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Re-normalize regression inputs to unit norm.
    pub normalize: bool,
}

/// Reads `d0` feature columns followed by a label column per line.
pub fn load_csv_dataset(path: &Path, task: Task, d0: usize, opts: &CsvOptions) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut max_class = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 && opts.has_header {
            continue;
        }
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d0 + 1 {
            return Err(Error::Schema {
                row: line_no,
                expected: d0 + 1,
                found: fields.len(),
            });
        }
        let mut x = Vec::with_capacity(d0);
        for f in &fields[..d0] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                detail: format!("not a float: {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("non-finite feature {f:?}"),
                });
            }
            x.push(v);
        }
        let label = fields[d0];
        let example = match task {
            Task::Regression => {
                let y: f64 = label.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    detail: format!("not a float label: {label:?}"),
                })?;
                if opts.normalize {
                    normalize(&mut x);
                }
                Example::regression(x, y)
            }
            Task::Classification => {
                let c: usize = label.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    detail: format!("not a class index: {label:?}"),
                })?;
                max_class = max_class.max(c);
                Example::classification(x, c)
            }
        };
        examples.push(example);
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let classes = match task {
        Task::Regression => 0,
        Task::Classification => max_class + 1,
    };
    Ok(Dataset {
        examples,
        task,
        d0,
        classes,
        noise_level: 0.0,
        provenance: format!(
            "csv({}{})",
            path.display(),
            if opts.normalize { ", normalized" } else { "" }
        ),
    })
}

/// Writes headerless rows in the layout accepted by [`load_csv_dataset`].
pub fn write_csv_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in &ds.examples {
        for v in &e.x {
            out.push_str(&format!("{v},"));
        }
        match e.y {
            Label::Value(y) => out.push_str(&format!("{y}\n")),
            Label::Class(c) => out.push_str(&format!("{c}\n")),
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The fixed batching trajectory: per epoch, a seeded shuffle of the indices
/// cut into `n / b` disjoint batches of size `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchTrajectory {
    seed: u64,
    n: usize,
    b: usize,
    epochs: usize,
}

impl BatchTrajectory {
    pub fn new(seed: u64, n: usize, b: usize, epochs: usize) -> Result<Self> {
        if n == 0 || b == 0 || epochs == 0 {
            return Err(Error::invalid("trajectory needs n, b, epochs >= 1"));
        }
        if n % b != 0 {
            return Err(Error::invalid(format!(
                "batch size must divide n (n={n}, b={b})"
            )));
        }
        Ok(Self { seed, n, b, epochs })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.b
    }

    pub fn batch_size(&self) -> usize {
        self.b
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch()
    }

    /// Batches of `epoch` (1-based) as lists of 0-based example indices.
    pub fn batches(&self, epoch: usize) -> Result<Vec<Vec<usize>>> {
        if epoch == 0 || epoch > self.epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside [1, {}]",
                self.epochs
            )));
        }
        let mut idx: Vec<usize> = (0..self.n).collect();
        SeededStream::new(self.seed)
            .substream_indexed("epoch", epoch as u64)
            .shuffle(&mut idx);
        Ok(idx.chunks(self.b).map(|c| c.to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_classification(n: usize, classes: usize) -> Dataset {
        Dataset {
            examples: (0..n)
                .map(|i| Example::classification(vec![i as f64], i % classes))
                .collect(),
            task: Task::Classification,
            d0: 1,
            classes,
            noise_level: 0.0,
            provenance: "toy".into(),
        }
    }

    #[test]
    fn teacher_student_unit_norm_and_bounded_labels() {
        let ds = gen_teacher_student(8, 50, 200, 3).unwrap();
        assert_eq!(ds.len(), 200);
        assert!(ds.max_unit_norm_deviation() <= 1e-12);
        for e in &ds.examples {
            assert!(e.y.value().unwrap().abs() <= 1.0);
        }
    }

    #[test]
    fn teacher_student_deterministic() {
        let a = gen_teacher_student_split(5, 20, 30, 10, 9).unwrap();
        let b = gen_teacher_student_split(5, 20, 30, 10, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_teacher_student(5, 20, 30, 10).unwrap();
        assert_ne!(a.0, c);
    }

    #[test]
    fn generator_rejects_zero_dims() {
        assert!(gen_teacher_student(0, 10, 10, 1).is_err());
        assert!(gen_teacher_student(3, 0, 10, 1).is_err());
    }

    #[test]
    fn noise_counts() {
        let ds = toy_classification(1000, 10);
        let clean = inject_label_noise(&ds, 0.0, 1).unwrap();
        assert_eq!(clean.noisy_count(), 0);
        assert_eq!(
            clean.examples.iter().map(|e| e.y).collect::<Vec<_>>(),
            ds.examples.iter().map(|e| e.y).collect::<Vec<_>>()
        );
        assert_eq!(inject_label_noise(&ds, 0.2, 1).unwrap().noisy_count(), 200);
        let small = toy_classification(100, 10);
        assert_eq!(inject_label_noise(&small, 1.0, 1).unwrap().noisy_count(), 100);
        assert!(inject_label_noise(&ds, 1.5, 1).is_err());
        assert!(inject_label_noise(&ds, -0.1, 1).is_err());
    }

    #[test]
    fn noise_is_reproducible() {
        let ds = toy_classification(300, 4);
        let a = inject_label_noise(&ds, 0.3, 17).unwrap();
        let b = inject_label_noise(&ds, 0.3, 17).unwrap();
        assert_eq!(a, b);
        let noisy_a: Vec<bool> = a.examples.iter().map(|e| e.noisy).collect();
        let noisy_b: Vec<bool> = b.examples.iter().map(|e| e.noisy).collect();
        assert_eq!(noisy_a, noisy_b);
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ok.csv");
        fs::write(&p, "0.1,0.2,1\n0.3,0.4,0\n0.5,0.6,2\n").unwrap();
        let ds = load_csv_dataset(&p, Task::Classification, 2, &CsvOptions::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.classes, 3);

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "0.1,0.2,1\n0.3,0\n").unwrap();
        let err = load_csv_dataset(&bad, Task::Classification, 2, &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Schema { row: 2, expected: 3, found: 2 }));

        let garbage = dir.path().join("garbage.csv");
        fs::write(&garbage, "0.1,abc,1\n").unwrap();
        let err = load_csv_dataset(&garbage, Task::Regression, 2, &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));

        let empty = dir.path().join("empty.csv");
        fs::write(&empty, "").unwrap();
        let err = load_csv_dataset(&empty, Task::Regression, 2, &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));

        let reg = gen_teacher_student(3, 5, 4, 2).unwrap();
        let rp = dir.path().join("reg.csv");
        write_csv_dataset(&reg, &rp).unwrap();
        let back = load_csv_dataset(&rp, Task::Regression, 3, &CsvOptions::default()).unwrap();
        assert_eq!(back.examples, reg.examples);
    }

    #[test]
    fn csv_header_and_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        fs::write(&p, "a,b,y\n3,4,0.5\n").unwrap();
        let opts = CsvOptions {
            has_header: true,
            normalize: true,
        };
        let ds = load_csv_dataset(&p, Task::Regression, 2, &opts).unwrap();
        assert_eq!(ds.examples[0].x, vec![0.6, 0.8]);
    }

    #[test]
    fn trajectory_examples() {
        let t = BatchTrajectory::new(1, 4, 2, 1).unwrap();
        let b = t.batches(1).unwrap();
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);

        let t = BatchTrajectory::new(1, 4, 4, 1).unwrap();
        let b = t.batches(1).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 4);

        assert!(BatchTrajectory::new(1, 5, 2, 1).is_err());
        let t = BatchTrajectory::new(3, 10, 5, 2).unwrap();
        assert_eq!(t.batches(2).unwrap(), t.batches(2).unwrap());
        assert!(t.batches(3).is_err());
        assert!(t.batches(0).is_err());
    }

    proptest! {
        #[test]
        fn batches_partition_indices(seed in any::<u64>(), m in 1usize..8, b in 1usize..8, epochs in 1usize..4) {
            let n = m * b;
            let t = BatchTrajectory::new(seed, n, b, epochs).unwrap();
            for e in 1..=epochs {
                let batches = t.batches(e).unwrap();
                prop_assert_eq!(batches.len(), m);
                prop_assert!(batches.iter().all(|x| x.len() == b));
                let mut all: Vec<usize> = batches.concat();
                all.sort();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
