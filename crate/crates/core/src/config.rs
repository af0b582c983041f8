//! Run configuration. Values are layered as
//! defaults ← profile ← config file ← explicit overrides, rightmost wins.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{Dims, GenConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// Optimizer settings of one training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
}

/// Fine-tuning regime shared by all downstream levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    /// Full-batch AdamW steps fitting the head on frozen features before
    /// fine-tuning; 0 disables the warm start.
    pub probe_steps: usize,
    pub probe_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub profile: Profile,
    pub data: GenConfig,
    pub d_r: usize,
    pub stay: StageConfig,
    pub admission: StageConfig,
    pub lambda: f64,
    pub tau: f64,
    pub mask_rate: f64,
    pub finetune: FinetuneConfig,
    /// seed for parameter init and batch order
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config::profile(Profile::Desk)
    }
}

/// Every configurable key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("profile", "desk | paper"),
    ("seed", "training seed"),
    ("data_seed", "generator seed"),
    ("n_patients", "synthetic patients"),
    ("max_admissions", "admissions per patient, upper bound"),
    ("t", "hours per stay"),
    ("d_f", "clinical features per hour"),
    ("d_dem", "demographic features"),
    ("n_icd", "ICD vocabulary size"),
    ("n_drug", "drug vocabulary size"),
    ("max_stays", "stay slots per admission"),
    ("d_note", "note embedding extent"),
    ("latent_dim", "generator latent extent"),
    ("sparsity", "fraction of nonzero stay features"),
    ("d_r", "latent representation extent"),
    ("stay_lr", "stage-1 learning rate"),
    ("stay_epochs", "stage-1 epochs"),
    ("stay_batch", "stage-1 batch size"),
    ("stay_wd", "stage-1 weight decay"),
    ("adm_lr", "stage-2 learning rate"),
    ("adm_epochs", "stage-2 epochs"),
    ("adm_batch", "stage-2 batch size"),
    ("adm_wd", "stage-2 weight decay"),
    ("lambda", "contrastive loss weight"),
    ("tau", "contrastive temperature"),
    ("mask_rate", "masked code prediction rate"),
    ("ft_lr", "fine-tune learning rate"),
    ("ft_batch", "fine-tune batch size"),
    ("ft_epochs", "fine-tune epoch cap"),
    ("ft_patience", "early-stopping patience"),
    ("ft_wd", "fine-tune weight decay"),
    ("ft_probe_steps", "head warm-start steps on frozen features"),
    ("ft_probe_lr", "head warm-start learning rate"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl Config {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Config {
                profile,
                data: GenConfig::default(),
                d_r: 16,
                stay: StageConfig {
                    lr: 5e-3,
                    epochs: 20,
                    batch: 32,
                    weight_decay: 1e-8,
                },
                admission: StageConfig {
                    lr: 2e-3,
                    epochs: 15,
                    batch: 64,
                    weight_decay: 1e-8,
                },
                lambda: 10.0,
                tau: 0.1,
                mask_rate: 0.15,
                finetune: FinetuneConfig {
                    lr: 5e-3,
                    batch: 32,
                    max_epochs: 30,
                    patience: 5,
                    weight_decay: 1e-2,
                    probe_steps: 200,
                    probe_lr: 0.2,
                },
                seed: 0,
            },
            Profile::Paper => Config {
                profile,
                data: GenConfig {
                    dims: Dims::PAPER,
                    d_note: 768,
                    ..GenConfig::default()
                },
                d_r: 256,
                stay: StageConfig {
                    lr: 5e-4,
                    epochs: 200,
                    batch: 128,
                    weight_decay: 1e-8,
                },
                admission: StageConfig {
                    lr: 2e-5,
                    epochs: 300,
                    batch: 4096,
                    weight_decay: 1e-8,
                },
                lambda: 0.1,
                tau: 0.1,
                mask_rate: 0.15,
                finetune: FinetuneConfig {
                    lr: 1e-3,
                    batch: 32,
                    max_epochs: 30,
                    patience: 5,
                    weight_decay: 1e-2,
                    probe_steps: 0,
                    probe_lr: 0.2,
                },
                seed: 0,
            },
        }
    }

    /// Sets one key. `profile` resets everything to that profile first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data.dims;
        match key {
            "profile" => *self = Config::profile(parse(key, value)?),
            "seed" => self.seed = parse(key, value)?,
            "data_seed" => self.data.seed = parse(key, value)?,
            "n_patients" => self.data.n_patients = parse(key, value)?,
            "max_admissions" => self.data.max_admissions = parse(key, value)?,
            "t" => d.t = parse(key, value)?,
            "d_f" => d.d_f = parse(key, value)?,
            "d_dem" => d.d_dem = parse(key, value)?,
            "n_icd" => d.n_icd = parse(key, value)?,
            "n_drug" => d.n_drug = parse(key, value)?,
            "max_stays" => d.max_stays = parse(key, value)?,
            "d_note" => self.data.d_note = parse(key, value)?,
            "latent_dim" => self.data.latent_dim = parse(key, value)?,
            "sparsity" => self.data.sparsity = parse(key, value)?,
            "d_r" => self.d_r = parse(key, value)?,
            "stay_lr" => self.stay.lr = parse(key, value)?,
            "stay_epochs" => self.stay.epochs = parse(key, value)?,
            "stay_batch" => self.stay.batch = parse(key, value)?,
            "stay_wd" => self.stay.weight_decay = parse(key, value)?,
            "adm_lr" => self.admission.lr = parse(key, value)?,
            "adm_epochs" => self.admission.epochs = parse(key, value)?,
            "adm_batch" => self.admission.batch = parse(key, value)?,
            "adm_wd" => self.admission.weight_decay = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "mask_rate" => self.mask_rate = parse(key, value)?,
            "ft_lr" => self.finetune.lr = parse(key, value)?,
            "ft_batch" => self.finetune.batch = parse(key, value)?,
            "ft_epochs" => self.finetune.max_epochs = parse(key, value)?,
            "ft_patience" => self.finetune.patience = parse(key, value)?,
            "ft_wd" => self.finetune.weight_decay = parse(key, value)?,
            "ft_probe_steps" => self.finetune.probe_steps = parse(key, value)?,
            "ft_probe_lr" => self.finetune.probe_lr = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data.dims;
        Some(match key {
            "profile" => self.profile.to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data.seed.to_string(),
            "n_patients" => self.data.n_patients.to_string(),
            "max_admissions" => self.data.max_admissions.to_string(),
            "t" => d.t.to_string(),
            "d_f" => d.d_f.to_string(),
            "d_dem" => d.d_dem.to_string(),
            "n_icd" => d.n_icd.to_string(),
            "n_drug" => d.n_drug.to_string(),
            "max_stays" => d.max_stays.to_string(),
            "d_note" => self.data.d_note.to_string(),
            "latent_dim" => self.data.latent_dim.to_string(),
            "sparsity" => self.data.sparsity.to_string(),
            "d_r" => self.d_r.to_string(),
            "stay_lr" => self.stay.lr.to_string(),
            "stay_epochs" => self.stay.epochs.to_string(),
            "stay_batch" => self.stay.batch.to_string(),
            "stay_wd" => self.stay.weight_decay.to_string(),
            "adm_lr" => self.admission.lr.to_string(),
            "adm_epochs" => self.admission.epochs.to_string(),
            "adm_batch" => self.admission.batch.to_string(),
            "adm_wd" => self.admission.weight_decay.to_string(),
            "lambda" => self.lambda.to_string(),
            "tau" => self.tau.to_string(),
            "mask_rate" => self.mask_rate.to_string(),
            "ft_lr" => self.finetune.lr.to_string(),
            "ft_batch" => self.finetune.batch.to_string(),
            "ft_epochs" => self.finetune.max_epochs.to_string(),
            "ft_patience" => self.finetune.patience.to_string(),
            "ft_wd" => self.finetune.weight_decay.to_string(),
            "ft_probe_steps" => self.finetune.probe_steps.to_string(),
            "ft_probe_lr" => self.finetune.probe_lr.to_string(),
            _ => return None,
        })
    }

    /// `(key, value)` for every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::format(i + 1, format!("expected `key = value`, got `{line}`")));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.d_r == 0 {
            return Err(Error::Config("d_r must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!(
                "mask_rate must lie in [0, 1], got {}",
                self.mask_rate
            )));
        }
        for (name, b) in [
            ("stay_batch", self.stay.batch),
            ("adm_batch", self.admission.batch),
            ("ft_batch", self.finetune.batch),
        ] {
            if b == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}
