//! Long-tailed dataset construction and class-count metadata.
//!
//! Class ids are zero-based throughout the crate: class `0` is the head
//! class with the largest training count and class `C - 1` the rarest.

mod archive;
mod counts;
mod manifest;
mod synth;

pub use archive::{read_archive, write_archive, ElementType, RecordLayout};
pub use counts::{make_longtail_counts, split_divisions, ClassDivision, Division, LongTailSpec};
pub use manifest::{DatasetManifest, DivisionSizes};
pub use synth::{synth_gaussian_lt, SynthOptions};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Spatial layout of one input or feature map, `channels x height x width`.
/// Vector inputs use `height = width = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape3 {
            channels,
            height,
            width,
        }
    }

    pub const fn vector(len: usize) -> Self {
        Shape3::new(len, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// An immutable labelled sample set. Row `i` of `inputs` is the flattened
/// input of sample `i` in channel-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    input_shape: Shape3,
    spec: LongTailSpec,
    split: SplitTag,
}

impl LabeledDataset {
    /// Build a dataset and check the per-class count contract of its split:
    /// train sets must match `spec.counts` exactly, test sets must be balanced.
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        input_shape: Shape3,
        spec: LongTailSpec,
        split: SplitTag,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "dataset rows vs labels",
                expected: labels.len().to_string(),
                actual: inputs.nrows().to_string(),
            });
        }
        if inputs.ncols() != input_shape.len() {
            return Err(Error::ShapeMismatch {
                context: "dataset input width",
                expected: input_shape.to_string(),
                actual: inputs.ncols().to_string(),
            });
        }
        let c = spec.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidLabel {
                label: bad,
                num_classes: c,
            });
        }
        let ds = LabeledDataset {
            inputs,
            labels,
            input_shape,
            spec,
            split,
        };
        let per_class = ds.class_counts();
        match split {
            SplitTag::Train if per_class != ds.spec.counts() => {
                return Err(Error::invalid(
                    "counts",
                    format!(
                        "train split class counts {per_class:?} differ from spec {:?}",
                        ds.spec.counts()
                    ),
                ))
            }
            SplitTag::Test if per_class.windows(2).any(|w| w[0] != w[1]) => {
                return Err(Error::invalid(
                    "counts",
                    format!("test split must be balanced, got {per_class:?}"),
                ))
            }
            _ => {}
        }
        Ok(ds)
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    /// The long-tailed profile of the training distribution this set belongs to.
    pub fn spec(&self) -> &LongTailSpec {
        &self.spec
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Gather a batch of rows by index.
    pub fn batch(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.inputs.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }
}

/// Pass-through augmentation hook applied to every training batch.
///
/// No augmentation policy ships with the crate; implement this trait to
/// plug one in.
pub trait Augment: Send + Sync {
    fn apply(&self, batch: Array2<f64>, shape: Shape3, epoch: usize) -> Array2<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoAugment;

impl Augment for NoAugment {
    fn apply(&self, batch: Array2<f64>, _shape: Shape3, _epoch: usize) -> Array2<f64> {
        batch
    }
}

/// Draw a long-tailed subset from a (roughly) balanced source.
///
/// Source class `c` contributes `counts[c]` samples, chosen uniformly without
/// replacement. Since `counts` is non-increasing, class `0` receives the
/// largest share. The result is grouped by class in ascending order.
pub fn subsample_longtail(
    source: &LabeledDataset,
    counts: &[usize],
    seed: u64,
) -> Result<LabeledDataset> {
    let c = source.num_classes();
    if counts.len() != c {
        return Err(Error::ShapeMismatch {
            context: "subsample counts",
            expected: c.to_string(),
            actual: counts.len().to_string(),
        });
    }
    let spec = LongTailSpec::from_counts(counts.to_vec())?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in source.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut chosen = Vec::with_capacity(spec.total());
    for (class, (pool, &want)) in by_class.iter_mut().zip(counts).enumerate() {
        if pool.len() < want {
            return Err(Error::InsufficientSamples {
                class,
                available: pool.len(),
                requested: want,
            });
        }
        let mut r = rng::stream(seed, &[rng::tag::SUBSAMPLE, class as u64]);
        pool.shuffle(&mut r);
        chosen.extend_from_slice(&pool[..want]);
    }
    let (inputs, labels) = source.batch(&chosen);
    LabeledDataset::new(inputs, labels, source.input_shape, spec, SplitTag::Train)
}
