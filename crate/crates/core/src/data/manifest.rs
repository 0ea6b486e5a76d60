use serde::{Deserialize, Serialize};

use super::{split_divisions, LongTailSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisionSizes {
    pub many: usize,
    pub medium: usize,
    pub few: usize,
}

/// JSON summary written next to every generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub counts: Vec<usize>,
    pub imbalance_factor: f64,
    pub seed: u64,
    pub division_sizes: DivisionSizes,
}

impl DatasetManifest {
    pub fn new(spec: &LongTailSpec, seed: u64) -> Self {
        let d = split_divisions(spec);
        DatasetManifest {
            num_classes: spec.num_classes(),
            counts: spec.counts().to_vec(),
            imbalance_factor: spec.imbalance_factor(),
            seed,
            division_sizes: DivisionSizes {
                many: d.many.len(),
                medium: d.medium.len(),
                few: d.few.len(),
            },
        }
    }
}
