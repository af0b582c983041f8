//! Patient → admission → stay hierarchy, synthetic generation, masking,
//! the frozen note embedder, text serialization and batching.

mod batch;
mod generator;
mod io;
mod mask;
mod note;

pub use batch::{batch_iter, pad_stays, ItemRef, Level, PaddedStays};
pub use generator::{generate_dataset, GenConfig, Generator};
pub use io::{load_dataset, parse_dataset, save_dataset, write_dataset};
pub use mask::{mask_codes, mask_count, MaskPlan};
pub use note::{note_embed, note_token_vector, NOTE_SALT};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Extents shared by every record of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// hours per stay
    pub t: usize,
    /// clinical features per hour
    pub d_f: usize,
    pub d_dem: usize,
    pub n_icd: usize,
    pub n_drug: usize,
    /// maximum stays per admission
    pub max_stays: usize,
}

impl Dims {
    /// Desk-scale defaults.
    pub const DESK: Dims = Dims {
        t: 16,
        d_f: 32,
        d_dem: 12,
        n_icd: 128,
        n_drug: 64,
        max_stays: 3,
    };

    /// Extents of the original clinical extraction. Used for shape tests only.
    pub const PAPER: Dims = Dims {
        t: 48,
        d_f: 1318,
        d_dem: 73,
        n_icd: 7686,
        n_drug: 1701,
        max_stays: 3,
    };
}

impl Default for Dims {
    fn default() -> Self {
        Dims::DESK
    }
}

/// Binary prediction targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Arf,
    Shock,
    Mortality,
    Readmission,
    Risk,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Arf, Task::Shock, Task::Mortality, Task::Readmission, Task::Risk];

    pub fn level(self) -> Level {
        match self {
            Task::Arf | Task::Shock | Task::Mortality => Level::Stay,
            Task::Readmission => Level::Admission,
            Task::Risk => Level::Patient,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Arf => "arf",
            Task::Shock => "shock",
            Task::Mortality => "mortality",
            Task::Readmission => "readmission",
            Task::Risk => "risk",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arf" => Ok(Task::Arf),
            "shock" => Ok(Task::Shock),
            "mortality" | "mort" => Ok(Task::Mortality),
            "readmission" | "readmit" => Ok(Task::Readmission),
            "risk" => Ok(Task::Risk),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StayLabels {
    pub arf: bool,
    pub shock: bool,
    pub mortality: bool,
}

impl StayLabels {
    pub fn get(&self, task: Task) -> Option<bool> {
        match task {
            Task::Arf => Some(self.arf),
            Task::Shock => Some(self.shock),
            Task::Mortality => Some(self.mortality),
            _ => None,
        }
    }
}

/// One monitoring stay: `[T, d_f]` hourly features in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StayRecord {
    pub features: Tensor,
    pub labels: StayLabels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmissionRecord {
    pub stays: Vec<StayRecord>,
    /// multi-hot over ICD codes
    pub icd: Tensor,
    /// multi-hot over drug codes
    pub drugs: Tensor,
    pub note_tokens: Vec<u32>,
    pub readmit: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub demographics: Tensor,
    pub admissions: Vec<AdmissionRecord>,
    pub risk: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub patients: Vec<PatientRecord>,
}

impl Dataset {
    pub fn empty(dims: Dims) -> Self {
        Dataset {
            dims,
            patients: Vec::new(),
        }
    }

    pub fn n_admissions(&self) -> usize {
        self.patients.iter().map(|p| p.admissions.len()).sum()
    }

    pub fn n_stays(&self) -> usize {
        self.patients
            .iter()
            .flat_map(|p| &p.admissions)
            .map(|a| a.stays.len())
            .sum()
    }

    pub fn admission(&self, patient: usize, admission: usize) -> &AdmissionRecord {
        &self.patients[patient].admissions[admission]
    }

    pub fn stay(&self, patient: usize, admission: usize, stay: usize) -> &StayRecord {
        &self.patients[patient].admissions[admission].stays[stay]
    }

    /// Label of `task` for the item referenced by `item`.
    pub fn label(&self, item: ItemRef, task: Task) -> Result<bool> {
        let mismatch = || Error::Config(format!("task {task} is not defined at the level of {item:?}"));
        match item {
            ItemRef::Stay { patient, admission, stay } => self
                .stay(patient, admission, stay)
                .labels
                .get(task)
                .ok_or_else(mismatch),
            ItemRef::Admission { patient, admission } if task == Task::Readmission => {
                Ok(self.admission(patient, admission).readmit)
            }
            ItemRef::Patient { patient } if task == Task::Risk => Ok(self.patients[patient].risk),
            _ => Err(mismatch()),
        }
    }

    /// Indices of active entries in a multi-hot vector.
    pub fn active(codes: &Tensor) -> Vec<usize> {
        codes
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Multi-hot vector of extent `n` with ones at `indices`.
pub fn multi_hot(n: usize, indices: &[usize]) -> Result<Tensor> {
    let mut v = vec![0.0; n];
    for &i in indices {
        if i >= n {
            return Err(Error::shape("multi_hot", format!("index {i} >= extent {n}")));
        }
        v[i] = 1.0;
    }
    Tensor::vector(v)
}
