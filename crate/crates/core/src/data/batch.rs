use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdmissionRecord, Dataset, StayRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Stay,
    Admission,
    Patient,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Stay => "stay",
            Level::Admission => "admission",
            Level::Patient => "patient",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stay" => Ok(Level::Stay),
            "admission" => Ok(Level::Admission),
            "patient" => Ok(Level::Patient),
            other => Err(Error::Config(format!("unknown level `{other}`"))),
        }
    }
}

/// Address of one item in the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ItemRef {
    Stay {
        patient: usize,
        admission: usize,
        stay: usize,
    },
    Admission {
        patient: usize,
        admission: usize,
    },
    Patient {
        patient: usize,
    },
}

impl ItemRef {
    pub fn patient(self) -> usize {
        match self {
            ItemRef::Stay { patient, .. }
            | ItemRef::Admission { patient, .. }
            | ItemRef::Patient { patient } => patient,
        }
    }
}

impl Dataset {
    /// Every item at `level`, in hierarchy order.
    pub fn items(&self, level: Level) -> Vec<ItemRef> {
        let mut out = Vec::new();
        for (p, pat) in self.patients.iter().enumerate() {
            match level {
                Level::Patient => out.push(ItemRef::Patient { patient: p }),
                Level::Admission => out.extend(
                    (0..pat.admissions.len()).map(|a| ItemRef::Admission {
                        patient: p,
                        admission: a,
                    }),
                ),
                Level::Stay => {
                    for (a, adm) in pat.admissions.iter().enumerate() {
                        out.extend((0..adm.stays.len()).map(|s| ItemRef::Stay {
                            patient: p,
                            admission: a,
                            stay: s,
                        }));
                    }
                }
            }
        }
        out
    }
}

/// Flattens to `level`, shuffles with `shuffle_seed`, and chunks into
/// batches of `batch_size` (the last one may be short).
pub fn batch_iter(
    ds: &Dataset,
    level: Level,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Vec<ItemRef>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut items = ds.items(level);
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(items.chunks(batch_size).map(<[ItemRef]>::to_vec).collect())
}

/// Admission stays laid out in `M` slots; absent slots are `None`.
#[derive(Clone, Debug)]
pub struct PaddedStays<'a> {
    pub slots: Vec<Option<&'a StayRecord>>,
    /// 1 for a real stay, 0 for padding
    pub presence: Vec<u8>,
}

pub fn pad_stays(adm: &AdmissionRecord, max_stays: usize) -> Result<PaddedStays<'_>> {
    if adm.stays.is_empty() || adm.stays.len() > max_stays {
        return Err(Error::shape(
            "pad_stays",
            format!("{} stays for {max_stays} slots", adm.stays.len()),
        ));
    }
    let mut slots: Vec<Option<&StayRecord>> = adm.stays.iter().map(Some).collect();
    slots.resize(max_stays, None);
    let presence = slots.iter().map(|s| s.is_some() as u8).collect();
    Ok(PaddedStays { slots, presence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};

    fn ds() -> Dataset {
        generate_dataset(&GenConfig {
            n_patients: 12,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn batch_sizes_with_ragged_tail() {
        let mut d = ds();
        // trim to exactly 10 stays
        let mut remaining = 10;
        for p in d.patients.iter_mut() {
            for a in p.admissions.iter_mut() {
                let keep = a.stays.len().min(remaining);
                a.stays.truncate(keep.max(1));
                remaining -= keep.min(remaining);
            }
        }
        let n = d.n_stays();
        let batches = batch_iter(&d, Level::Stay, 4, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), n);
        assert!(sizes[..sizes.len() - 1].iter().all(|&s| s == 4));
    }

    #[test]
    fn exact_four_four_two() {
        let d = ds();
        let items: Vec<ItemRef> = d.items(Level::Stay).into_iter().take(10).collect();
        let mut small = d.clone();
        // rebuild a dataset with exactly the first 10 stays
        small.patients.clear();
        for it in &items {
            if let ItemRef::Stay { patient, admission, stay } = *it {
                let mut p = d.patients[patient].clone();
                let mut a = p.admissions[admission].clone();
                a.stays = vec![a.stays[stay].clone()];
                p.admissions = vec![a];
                small.patients.push(p);
            }
        }
        let sizes: Vec<usize> = batch_iter(&small, Level::Stay, 4, 9)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn shuffle_is_seeded() {
        let d = ds();
        let a = batch_iter(&d, Level::Admission, 5, 3).unwrap();
        let b = batch_iter(&d, Level::Admission, 5, 3).unwrap();
        let c = batch_iter(&d, Level::Admission, 5, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn padding_mask() {
        let d = ds();
        let mut adm = d.patients[0].admissions[0].clone();
        adm.stays.truncate(1);
        let p = pad_stays(&adm, 3).unwrap();
        assert_eq!(p.presence, vec![1, 0, 0]);
        assert!(p.slots[1].is_none() && p.slots[2].is_none());
    }

    #[test]
    fn empty_and_zero_batch() {
        let d = Dataset::empty(crate::data::Dims::DESK);
        assert!(matches!(batch_iter(&d, Level::Stay, 4, 0), Err(Error::EmptyDataset)));
        assert!(batch_iter(&ds(), Level::Stay, 0, 0).is_err());
    }
}
