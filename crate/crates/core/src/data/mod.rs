//! Synthetic image-classification tasks, low-data splits and the dataset
//! file format.
//!
//! Every sample is a pure function of `(spec, index)`: its label is
//! `index mod K` and its pixels come from a ChaCha stream keyed by the
//! index. Each generator has a closed-form labeling rule that is exact at
//! zero noise ([`oracle_label`]).

mod file;
mod generators;

pub use file::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, DatasetHeader, DATASET_MAGIC, DATASET_VERSION,
};
pub use generators::oracle_label;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::Images;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Sinusoidal grating; the class is its orientation.
    #[serde(rename = "STRIPES")]
    Stripes,
    /// Gaussian blob; the class is the angular sector of its centre.
    #[serde(rename = "BLOBS")]
    Blobs,
    /// `class + 1` separated 2×2 squares.
    #[serde(rename = "COUNT")]
    Count,
    /// Quadrant intensity levels whose sum mod K is the class.
    #[serde(rename = "XOR-PATCH")]
    XorPatch,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 4] = [
        GeneratorKind::Stripes,
        GeneratorKind::Blobs,
        GeneratorKind::Count,
        GeneratorKind::XorPatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Stripes => "STRIPES",
            GeneratorKind::Blobs => "BLOBS",
            GeneratorKind::Count => "COUNT",
            GeneratorKind::XorPatch => "XOR-PATCH",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown generator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: GeneratorKind,
    pub image_side: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let side = self.image_side;
        if side < 4 || self.channels == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "{}: image_side >= 4, channels >= 1 and num_classes >= 1 required",
                self.kind
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        let k = self.num_classes;
        match self.kind {
            GeneratorKind::Count if k > generators::max_count(side) => Err(Error::Config(format!(
                "COUNT supports at most {} classes at side {side}",
                generators::max_count(side)
            ))),
            GeneratorKind::XorPatch if !side.is_multiple_of(2) || k < 2 => Err(Error::Config(
                "XOR-PATCH needs an even image side and at least 2 classes".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Validates a task union: matching image geometry across parts.
pub fn validate_tasks(specs: &[TaskSpec]) -> Result<()> {
    let first = specs.first().ok_or_else(|| Error::Config("empty task list".into()))?;
    for s in specs {
        s.validate()?;
        if s.image_side != first.image_side || s.channels != first.channels {
            return Err(Error::Config(
                "all tasks in a union must share image_side and channels".into(),
            ));
        }
    }
    Ok(())
}

/// Labeled images `[n × C × side × side]`, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub side: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// Generator index of every sample.
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn images(&self) -> Images<'_> {
        Images {
            data: &self.images,
            batch: self.len(),
            channels: self.channels,
            height: self.side,
            width: self.side,
        }
    }

    /// Pixels and labels of the given samples, in order.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let m = self.image_len();
        let mut px = Vec::with_capacity(indices.len() * m);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            px.extend_from_slice(&self.images[i * m..(i + 1) * m]);
            labels.push(self.labels[i]);
        }
        (px, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            channels: self.channels,
            side: self.side,
            num_classes: self.num_classes,
            images,
            labels,
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

/// Samples `ids` of a single task or of a union of tasks. In a union the
/// parts' classes are laid end to end.
pub fn generate_ids(specs: &[TaskSpec], ids: impl IntoIterator<Item = u64>) -> Result<Dataset> {
    validate_tasks(specs)?;
    let total: usize = specs.iter().map(|s| s.num_classes).sum();
    let (side, channels) = (specs[0].image_side, specs[0].channels);
    let mut out = Dataset {
        channels,
        side,
        num_classes: total,
        images: Vec::new(),
        labels: Vec::new(),
        ids: Vec::new(),
    };
    for id in ids {
        let label = (id % total as u64) as usize;
        let mut local = label;
        let mut part = 0;
        while local >= specs[part].num_classes {
            local -= specs[part].num_classes;
            part += 1;
        }
        generators::render(&specs[part], id, local, &mut out.images);
        out.labels.push(label);
        out.ids.push(id);
    }
    Ok(out)
}

/// The first `n` samples of a task.
pub fn generate(spec: &TaskSpec, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("generate needs n >= 1".into()));
    }
    generate_ids(std::slice::from_ref(spec), 0..n as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_n: usize,
    pub val_n: usize,
    pub test_n: usize,
    /// Exactly this many training samples per class, drawn from the
    /// training pool.
    pub few_shot: Option<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_n: 800,
            val_n: 200,
            test_n: 2000,
            few_shot: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Train ids `[0, train_n)`, validation ids next, test ids after that.
/// A validation split of size 0 is allowed.
pub fn make_splits(specs: &[TaskSpec], split: &SplitSpec) -> Result<Splits> {
    if split.train_n == 0 || split.test_n == 0 {
        return Err(Error::Config("train_n and test_n must be positive".into()));
    }
    validate_tasks(specs)?;
    let k: usize = specs.iter().map(|s| s.num_classes).sum();
    let train_ids: Vec<u64> = match split.few_shot {
        None => (0..split.train_n as u64).collect(),
        Some(shots) => {
            if shots == 0 || shots * k > split.train_n {
                return Err(Error::Config(format!(
                    "{shots}-shot with {k} classes needs a training pool of {}, have {}",
                    shots * k,
                    split.train_n
                )));
            }
            // Class c occupies pool ids c, c + K, c + 2K, ...
            (0..k as u64)
                .flat_map(|c| (0..shots as u64).map(move |j| c + j * k as u64))
                .collect()
        }
    };
    let v0 = split.train_n as u64;
    let t0 = v0 + split.val_n as u64;
    Ok(Splits {
        train: generate_ids(specs, train_ids)?,
        val: generate_ids(specs, v0..t0)?,
        test: generate_ids(specs, t0..t0 + split.test_n as u64)?,
    })
}
