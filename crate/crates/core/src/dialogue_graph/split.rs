use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphError, TrainingExample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.90,
            valid_fraction: 0.05,
            test_fraction: 0.05,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, valid: f64, test: f64, seed: u64) -> Result<Self, GraphError> {
        let spec = Self {
            train_fraction: train,
            valid_fraction: valid,
            test_fraction: test,
            seed,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<(), GraphError> {
        let fr = [self.train_fraction, self.valid_fraction, self.test_fraction];
        if fr.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(GraphError::InvalidSplit(format!("fractions must lie in (0,1): {fr:?}")));
        }
        let total: f64 = fr.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GraphError::InvalidSplit(format!("fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TrainingExample>,
    pub valid: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

/// Partitions `examples` by their `group`, so related examples never straddle
/// splits. Groups are shuffled under the seed; validation and test each get
/// `round(fraction * groups)` groups (at least one) and training the rest.
/// Examples keep their input order inside each split.
pub fn split_dataset(examples: &[TrainingExample], spec: &SplitSpec) -> Result<DatasetSplit, GraphError> {
    spec.check()?;
    let mut order: Vec<&str> = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for e in examples {
        if !seen.contains_key(e.group.as_str()) {
            seen.insert(&e.group, order.len());
            order.push(&e.group);
        }
    }
    let groups = order.len();
    let n_valid = ((spec.valid_fraction * groups as f64).round() as usize).max(1);
    let n_test = ((spec.test_fraction * groups as f64).round() as usize).max(1);
    if groups < 3 || n_valid + n_test >= groups {
        return Err(GraphError::TooFewGroups { groups, splits: 3 });
    }
    let mut shuffled: Vec<usize> = (0..groups).collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    // 0 = train, 1 = valid, 2 = test
    let mut dest = vec![0u8; groups];
    for (rank, &g) in shuffled.iter().enumerate() {
        dest[g] = if rank < n_valid {
            1
        } else if rank < n_valid + n_test {
            2
        } else {
            0
        };
    }
    let mut out = DatasetSplit::default();
    for e in examples {
        let target = match dest[seen[e.group.as_str()]] {
            1 => &mut out.valid,
            2 => &mut out.test,
            _ => &mut out.train,
        };
        target.push(e.clone());
    }
    Ok(out)
}
