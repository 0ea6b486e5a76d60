use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classes with more training samples than this are many-shot.
pub const MANY_SHOT_ABOVE: usize = 100;
/// Classes with fewer training samples than this are few-shot.
pub const FEW_SHOT_BELOW: usize = 20;

/// Per-class training counts of a long-tailed distribution, head first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    counts: Vec<usize>,
    imbalance_factor: f64,
}

impl LongTailSpec {
    /// Wrap an explicit count profile. The counts must be non-increasing and
    /// every class must hold at least one sample.
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("counts", "at least one class is required"));
        }
        if counts.contains(&0) {
            return Err(Error::invalid("counts", "every class needs at least one sample"));
        }
        if counts.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("counts", "counts must be non-increasing"));
        }
        let imbalance_factor = counts[0] as f64 / counts[counts.len() - 1] as f64;
        Ok(LongTailSpec {
            counts,
            imbalance_factor,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Realized `n_1 / n_C`.
    pub fn imbalance_factor(&self) -> f64 {
        self.imbalance_factor
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Exponential count profile `n_c = round(n_max * IF^(-(c-1)/(C-1)))`,
/// rounded half-up and clamped to at least one sample.
pub fn make_longtail_counts(
    num_classes: usize,
    n_max: usize,
    imbalance_factor: f64,
) -> Result<Vec<usize>> {
    if !imbalance_factor.is_finite() || imbalance_factor < 1.0 {
        return Err(Error::invalid(
            "imbalance_factor",
            format!("must be >= 1, got {imbalance_factor}"),
        ));
    }
    if num_classes == 0 {
        return Err(Error::invalid("num_classes", "must be positive"));
    }
    if num_classes < 2 && imbalance_factor != 1.0 {
        return Err(Error::invalid(
            "num_classes",
            "an imbalanced profile needs at least two classes",
        ));
    }
    if (n_max as f64) < imbalance_factor {
        return Err(Error::invalid(
            "n_max",
            format!(
                "n_max ({n_max}) must be >= imbalance_factor ({imbalance_factor}) so the rarest class is non-empty"
            ),
        ));
    }
    if num_classes == 1 {
        return Ok(vec![n_max]);
    }
    let denom = (num_classes - 1) as f64;
    let counts = (0..num_classes)
        .map(|c| {
            let v = n_max as f64 * imbalance_factor.powf(-(c as f64) / denom);
            ((v + 0.5).floor() as usize).max(1)
        })
        .collect();
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Division {
    Many,
    Medium,
    Few,
}

impl Division {
    pub const ALL: [Division; 3] = [Division::Many, Division::Medium, Division::Few];

    pub fn name(self) -> &'static str {
        match self {
            Division::Many => "many",
            Division::Medium => "medium",
            Division::Few => "few",
        }
    }

    pub fn of_count(n: usize) -> Division {
        if n > MANY_SHOT_ABOVE {
            Division::Many
        } else if n < FEW_SHOT_BELOW {
            Division::Few
        } else {
            Division::Medium
        }
    }
}

/// Many / medium / few partition of the class ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDivision {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

impl ClassDivision {
    pub fn members(&self, d: Division) -> &[usize] {
        match d {
            Division::Many => &self.many,
            Division::Medium => &self.medium,
            Division::Few => &self.few,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.many.len() + self.medium.len() + self.few.len()
    }

    /// Division of each class id, indexed by class.
    pub fn assignment(&self) -> Vec<Division> {
        let mut out = vec![Division::Medium; self.num_classes()];
        for d in Division::ALL {
            for &c in self.members(d) {
                out[c] = d;
            }
        }
        out
    }
}

pub fn split_divisions(spec: &LongTailSpec) -> ClassDivision {
    let mut div = ClassDivision::default();
    for (c, &n) in spec.counts().iter().enumerate() {
        match Division::of_count(n) {
            Division::Many => div.many.push(c),
            Division::Medium => div.medium.push(c),
            Division::Few => div.few.push(c),
        }
    }
    div
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cifar_profile_endpoints() {
        let counts = make_longtail_counts(100, 500, 100.0).unwrap();
        assert_eq!(counts.len(), 100);
        assert_eq!(counts[0], 500);
        assert_eq!(counts[99], 5);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn balanced_profile() {
        assert_eq!(make_longtail_counts(10, 50, 1.0).unwrap(), vec![50; 10]);
    }

    #[test]
    fn two_class_profile() {
        assert_eq!(make_longtail_counts(2, 10, 10.0).unwrap(), vec![10, 1]);
    }

    #[test]
    fn rejects_bad_profiles() {
        assert!(make_longtail_counts(10, 50, 0.5).is_err());
        let err = make_longtail_counts(10, 50, 100.0).unwrap_err();
        assert!(err.to_string().contains("n_max"));
        assert!(make_longtail_counts(1, 50, 2.0).is_err());
        assert_eq!(make_longtail_counts(1, 50, 1.0).unwrap(), vec![50]);
    }

    #[test]
    fn divisions_by_threshold() {
        let spec = LongTailSpec::from_counts(vec![150, 50, 10]).unwrap();
        let d = split_divisions(&spec);
        assert_eq!(d.many, vec![0]);
        assert_eq!(d.medium, vec![1]);
        assert_eq!(d.few, vec![2]);
    }

    #[test]
    fn all_many() {
        let spec = LongTailSpec::from_counts(vec![500; 6]).unwrap();
        let d = split_divisions(&spec);
        assert_eq!(d.many.len(), 6);
        assert!(d.medium.is_empty() && d.few.is_empty());
    }

    #[test]
    fn boundaries_fall_in_medium() {
        let spec = LongTailSpec::from_counts(vec![101, 100, 20, 19]).unwrap();
        let d = split_divisions(&spec);
        assert_eq!(d.many, vec![0]);
        assert_eq!(d.medium, vec![1, 2]);
        assert_eq!(d.few, vec![3]);
    }

    proptest! {
        #[test]
        fn generated_profiles_hold_invariants(c in 2usize..120, n_max in 1usize..2000, if_ in 1.0f64..200.0) {
            prop_assume!(n_max as f64 >= if_);
            let counts = make_longtail_counts(c, n_max, if_).unwrap();
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(counts[0], n_max);
            let target = n_max as f64 / if_;
            let last = counts[c - 1] as f64;
            prop_assert!((last - target).abs() <= 0.5 + 1e-9);
            let spec = LongTailSpec::from_counts(counts).unwrap();
            // realized IF agrees with the nominal one up to rounding of n_C
            let lo = n_max as f64 / (target + 0.5);
            let hi = n_max as f64 / (target - 0.5).max(1.0);
            prop_assert!(spec.imbalance_factor() >= lo - 1e-9 && spec.imbalance_factor() <= hi + 1e-9);
        }

        #[test]
        fn divisions_partition(mut counts in prop::collection::vec(1usize..400, 1..60)) {
            counts.sort_unstable_by(|a, b| b.cmp(a));
            let spec = LongTailSpec::from_counts(counts.clone()).unwrap();
            let d = split_divisions(&spec);
            let mut all: Vec<usize> = d.many.iter().chain(&d.medium).chain(&d.few).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..counts.len()).collect::<Vec<_>>());
            for (c, div) in d.assignment().into_iter().enumerate() {
                prop_assert_eq!(div, Division::of_count(counts[c]));
            }
        }
    }
}
