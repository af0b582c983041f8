//! Fine-tuning heads, evaluation metrics and the training-size ablation.

mod ablation;
mod finetune;
mod metrics;

pub use ablation::{ablation_run, subsample, write_tsv, AblationRow, TSV_HEADER};
pub use finetune::{
    finetune, finetune_admission, finetune_patient, finetune_stay, load_pretrained, DownstreamModel,
    PatientModel, HEAD_NAME,
};
pub use metrics::{aupr, auroc, f1_kappa};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, ItemRef, Level, Task};
use crate::error::{Error, Result};
use crate::nn::derive_seed;

/// Decision threshold for F1 and kappa.
pub const THRESHOLD: f64 = 0.5;

/// Which pretrained parameter subsets a downstream model starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Init {
    /// stay encoder and admission-level parameters
    Both,
    /// stay encoder only
    Stay,
    /// admission-level parameters only
    Admission,
    Scratch,
}

impl Init {
    pub fn as_str(self) -> &'static str {
        match self {
            Init::Both => "a+s",
            Init::Stay => "s",
            Init::Admission => "a",
            Init::Scratch => "scratch",
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a+s" => Ok(Init::Both),
            "s" => Ok(Init::Stay),
            "a" => Ok(Init::Admission),
            "scratch" => Ok(Init::Scratch),
            other => Err(Error::Config(format!(
                "unknown init `{other}` (expected a+s, s, a or scratch)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub task: Task,
    pub init: Init,
    /// share of the training split actually used, in (0, 1]
    pub train_fraction: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task: Task, init: Init, seed: u64) -> Self {
        TaskSpec {
            task,
            init,
            train_fraction: 1.0,
            seed,
        }
    }

    pub fn level(&self) -> Level {
        self.task.level()
    }
}

/// Metrics recorded after every fine-tuning epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_auroc: f64,
    pub test_f1: f64,
}

/// Test-split metrics of the model with the lowest validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub auroc: f64,
    pub aupr: f64,
    pub f1: f64,
    pub kappa: f64,
    /// epochs actually run
    pub epochs: usize,
    pub best_epoch: usize,
    pub series: Vec<EpochMetrics>,
}

impl EvalReport {
    /// First epoch whose test F1 reaches `share` of the reported F1.
    pub fn epochs_to_reach(&self, share: f64) -> usize {
        let target = share * self.f1;
        self.series
            .iter()
            .find(|m| m.test_f1 >= target)
            .map_or(self.epochs, |m| m.epoch)
    }
}

/// Seeded 8:1:1 partition of the items of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<ItemRef>,
    pub valid: Vec<ItemRef>,
    pub test: Vec<ItemRef>,
}

impl Split {
    pub fn new(ds: &Dataset, level: Level, seed: u64) -> Result<Self> {
        let mut items = ds.items(level);
        if items.len() < 3 {
            return Err(Error::EmptyDataset);
        }
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0)));
        let n = items.len();
        let n_test = (n as f64 / 10.0).round().max(1.0) as usize;
        let n_valid = n_test;
        let train = items.split_off(n_test + n_valid);
        let valid = items.split_off(n_test);
        Ok(Split {
            train,
            valid,
            test: items,
        })
    }
}

/// Labels of `items` for `task` as booleans.
pub fn labels_of(ds: &Dataset, items: &[ItemRef], task: Task) -> Result<Vec<bool>> {
    items.iter().map(|&it| ds.label(it, task)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};

    #[test]
    fn split_ratio_and_disjointness() {
        let ds = generate_dataset(&GenConfig {
            n_patients: 100,
            ..GenConfig::default()
        })
        .unwrap();
        let s = Split::new(&ds, Level::Patient, 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<ItemRef> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(s, Split::new(&ds, Level::Patient, 3).unwrap());
    }

    #[test]
    fn init_names() {
        for i in [Init::Both, Init::Stay, Init::Admission, Init::Scratch] {
            assert_eq!(i.as_str().parse::<Init>().unwrap(), i);
        }
        assert!("x".parse::<Init>().is_err());
    }

    #[test]
    fn epochs_to_reach_uses_series() {
        let m = |epoch, f1| EpochMetrics {
            epoch,
            train_loss: 0.0,
            val_loss: 0.0,
            test_auroc: 0.5,
            test_f1: f1,
        };
        let r = EvalReport {
            auroc: 0.5,
            aupr: 0.5,
            f1: 0.8,
            kappa: 0.0,
            epochs: 3,
            best_epoch: 3,
            series: vec![m(1, 0.1), m(2, 0.77), m(3, 0.8)],
        };
        assert_eq!(r.epochs_to_reach(0.95), 2);
    }
}
