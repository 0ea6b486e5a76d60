use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, LongTailSpec, Shape3, SplitTag};
use crate::error::{Error, Result};
use crate::rng;

/// Knobs of the synthetic Gaussian benchmark beyond its core arguments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    /// Standard deviation of the isotropic noise around each center.
    pub noise_std: f64,
    /// Samples per class in the balanced test split.
    pub test_per_class: usize,
    /// Number of Gaussian modes per class. With more than one mode a class
    /// is no longer linearly separable from its neighbours.
    pub modes_per_class: usize,
    /// Distance of each mode from its class mean.
    pub mode_spread: f64,
    /// Number of superclasses; 0 draws every class mean independently.
    /// Class `c` belongs to superclass `c % superclasses`, so head and tail
    /// classes share groups.
    pub superclasses: usize,
    /// Distance of a class mean from its superclass center.
    pub subclass_spread: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            noise_std: 1.0,
            test_per_class: 100,
            modes_per_class: 1,
            mode_spread: 0.0,
            superclasses: 0,
            subclass_spread: 0.0,
        }
    }
}

fn random_direction<R: Rng>(r: &mut R, dims: usize, norm: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(r)).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-12 {
            return v.into_iter().map(|x| x * norm / len).collect();
        }
    }
}

/// Long-tailed Gaussian classification data plus a balanced test split.
///
/// Class means are random directions scaled to `class_separation`; each
/// class holds `modes_per_class` centers at distance `mode_spread` from its
/// mean. With superclasses the random directions are drawn per superclass
/// and each class mean sits `subclass_spread` away from its group's center. Both splits share the centers and are fully determined by `seed`.
pub fn synth_gaussian_lt(
    counts: &[usize],
    dims: usize,
    class_separation: f64,
    seed: u64,
    opts: &SynthOptions,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let c = counts.len();
    if c < 2 {
        return Err(Error::invalid("num_classes", "need at least two classes"));
    }
    if dims < 1 {
        return Err(Error::invalid("dims", "must be at least 1"));
    }
    if !(class_separation >= 0.0 && class_separation.is_finite()) {
        return Err(Error::invalid("class_separation", "must be finite and >= 0"));
    }
    if opts.modes_per_class == 0 || opts.test_per_class == 0 {
        return Err(Error::invalid("modes_per_class", "modes and test size must be positive"));
    }
    let spec = LongTailSpec::from_counts(counts.to_vec())?;

    if !(opts.subclass_spread >= 0.0 && opts.subclass_spread.is_finite()) {
        return Err(Error::invalid("subclass_spread", "must be finite and >= 0"));
    }
    let mut r = rng::stream(seed, &[rng::tag::DATA_MEANS]);
    let groups: Vec<Vec<f64>> = (0..opts.superclasses)
        .map(|_| random_direction(&mut r, dims, class_separation))
        .collect();
    let centers: Vec<Vec<Vec<f64>>> = (0..c)
        .map(|class| {
            let mean = if groups.is_empty() {
                random_direction(&mut r, dims, class_separation)
            } else {
                let off = random_direction(&mut r, dims, opts.subclass_spread);
                groups[class % groups.len()].iter().zip(off).map(|(g, o)| g + o).collect()
            };
            (0..opts.modes_per_class)
                .map(|_| {
                    let off = random_direction(&mut r, dims, opts.mode_spread);
                    mean.iter().zip(off).map(|(m, o)| m + o).collect()
                })
                .collect()
        })
        .collect();

    let draw = |per_class: &[usize], tag: u64| {
        let mut r = rng::stream(seed, &[tag]);
        let n: usize = per_class.iter().sum();
        let mut x = Array2::zeros((n, dims));
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (class, &k) in per_class.iter().enumerate() {
            for _ in 0..k {
                let mode = &centers[class][r.random_range(0..opts.modes_per_class)];
                for (d, &mu) in mode.iter().enumerate() {
                    let eps: f64 = StandardNormal.sample(&mut r);
                    x[[row, d]] = mu + opts.noise_std * eps;
                }
                labels.push(class);
                row += 1;
            }
        }
        (x, labels)
    };

    let (xtr, ytr) = draw(counts, rng::tag::DATA_TRAIN);
    let (xte, yte) = draw(&vec![opts.test_per_class; c], rng::tag::DATA_TEST);
    let shape = Shape3::vector(dims);
    let train = LabeledDataset::new(xtr, ytr, shape, spec.clone(), SplitTag::Train)?;
    let test = LabeledDataset::new(xte, yte, shape, spec, SplitTag::Test)?;
    Ok((train, test))
}
