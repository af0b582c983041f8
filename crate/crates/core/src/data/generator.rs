// Latent-variable generator. Every patient carries a latent z; admissions
// perturb it, stays perturb the admission latent, and every modality and
// label is a noisy function of the relevant latent, so modalities of the same
// admission agree with each other more than with other admissions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{multi_hot, AdmissionRecord, Dataset, Dims, PatientRecord, StayLabels, StayRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Size of the pseudo-note vocabulary.
pub const NOTE_VOCAB: u64 = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_patients: usize,
    pub max_admissions: usize,
    pub dims: Dims,
    pub d_note: usize,
    pub latent_dim: usize,
    /// ceiling on the fraction of nonzero stay-feature entries
    pub sparsity: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_patients: 300,
            max_admissions: 3,
            dims: Dims::DESK,
            d_note: 32,
            latent_dim: 8,
            sparsity: 0.4,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let extents = [
            ("n_patients", self.n_patients),
            ("max_admissions", self.max_admissions),
            ("T", d.t),
            ("d_f", d.d_f),
            ("d_dem", d.d_dem),
            ("C", d.n_icd),
            ("G", d.n_drug),
            ("M", d.max_stays),
            ("d_note", self.d_note),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::Config(format!(
                "sparsity must lie in (0, 1], got {}",
                self.sparsity
            )));
        }
        Ok(())
    }
}

// Standard-normal quantiles for the label prevalences used below.
const Q_75: f64 = 0.674_489_750_196_081_7;
const Q_80: f64 = 0.841_621_233_572_914_2;
const Q_70: f64 = 0.524_400_512_708_041_1;

const ADMISSION_NOISE: f64 = 0.5;
const STAY_NOISE: f64 = 0.3;
const LABEL_NOISE: f64 = 0.3;

/// Fixed random projections drawn once from the seed.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GenConfig,
    /// `[d_dem, L]`
    pub dem_proj: Vec<f64>,
    /// `[d_f, L]`
    pub feat_proj: Vec<f64>,
    pub feat_phase: Vec<f64>,
    /// `[C, L]`
    pub icd_proj: Vec<f64>,
    /// `[G, L]`
    pub drug_proj: Vec<f64>,
    label_dirs: [Vec<f64>; 5],
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn project(mat: &[f64], rows: usize, z: &[f64]) -> Vec<f64> {
    let l = z.len();
    (0..rows)
        .map(|r| mat[r * l..(r + 1) * l].iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

impl Generator {
    pub fn new(cfg: GenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let l = cfg.latent_dim;
        let d = cfg.dims;
        let s = 1.0 / (l as f64).sqrt();
        let dem_proj = gaussian(&mut rng, d.d_dem * l, s);
        let feat_proj = gaussian(&mut rng, d.d_f * l, 1.5 * s);
        let feat_phase = (0..d.d_f)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let icd_proj = gaussian(&mut rng, d.n_icd * l, s);
        let drug_proj = gaussian(&mut rng, d.n_drug * l, s);
        let label_dirs = std::array::from_fn(|_| unit(gaussian(&mut rng, l, 1.0)));
        Ok(Generator {
            cfg,
            dem_proj,
            feat_proj,
            feat_phase,
            icd_proj,
            drug_proj,
            label_dirs,
        })
    }

    fn label(&self, rng: &mut ChaCha8Rng, dir: usize, z: &[f64], latent_var: f64, q: f64) -> bool {
        let sd = (latent_var + LABEL_NOISE * LABEL_NOISE).sqrt();
        let noise: f64 = rng.sample(StandardNormal);
        dot(&self.label_dirs[dir], z) + LABEL_NOISE * noise > q * sd
    }

    fn stay(&self, rng: &mut ChaCha8Rng, z_adm: &[f64]) -> Result<StayRecord> {
        let d = self.cfg.dims;
        let z: Vec<f64> = z_adm
            .iter()
            .map(|v| v + STAY_NOISE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let base = project(&self.feat_proj, d.d_f, &z);
        let observed = ((self.cfg.sparsity * d.d_f as f64).floor() as usize).max(1);
        let mut data = vec![0.0; d.t * d.d_f];
        for t in 0..d.t {
            let phase = std::f64::consts::TAU * t as f64 / d.t as f64;
            let act: Vec<f64> = (0..d.d_f)
                .map(|k| {
                    base[k]
                        + 0.5 * (phase + self.feat_phase[k]).sin()
                        + 0.3 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            for k in top_k(&act, observed) {
                data[t * d.d_f + k] = sigmoid(act[k]);
            }
        }
        let var = 1.0 + ADMISSION_NOISE.powi(2) + STAY_NOISE.powi(2);
        let labels = StayLabels {
            arf: self.label(rng, 0, &z, var, Q_75),
            shock: self.label(rng, 1, &z, var, Q_80),
            mortality: self.label(rng, 2, &z, var, Q_80),
        };
        Ok(StayRecord {
            features: Tensor::matrix(d.t, d.d_f, data)?,
            labels,
        })
    }

    fn codes(&self, rng: &mut ChaCha8Rng, proj: &[f64], n: usize, z: &[f64], k_range: (usize, usize)) -> Vec<usize> {
        let lo = k_range.0.min(n).max(1);
        let hi = k_range.1.min(n).max(lo);
        let k = rng.random_range(lo..=hi);
        let scores: Vec<f64> = project(proj, n, z)
            .into_iter()
            .map(|s| s + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        top_k(&scores, k)
    }

    fn admission(&self, rng: &mut ChaCha8Rng, z: &[f64]) -> Result<AdmissionRecord> {
        let d = self.cfg.dims;
        let z_adm: Vec<f64> = z
            .iter()
            .map(|v| v + ADMISSION_NOISE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n_stays = rng.random_range(1..=d.max_stays);
        let stays = (0..n_stays)
            .map(|_| self.stay(rng, &z_adm))
            .collect::<Result<Vec<_>>>()?;
        let icd = self.codes(rng, &self.icd_proj, d.n_icd, &z_adm, (3, 10));
        let drugs = self.codes(rng, &self.drug_proj, d.n_drug, &z_adm, (2, 8));
        let note_tokens = note_tokens_for(&icd);
        let readmit = self.label(rng, 3, &z_adm, 1.0 + ADMISSION_NOISE.powi(2), Q_75);
        Ok(AdmissionRecord {
            stays,
            icd: multi_hot(d.n_icd, &icd)?,
            drugs: multi_hot(d.n_drug, &drugs)?,
            note_tokens,
            readmit,
        })
    }

    pub fn generate(&self) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(2);
        let l = self.cfg.latent_dim;
        let d = self.cfg.dims;
        let mut patients = Vec::with_capacity(self.cfg.n_patients);
        for _ in 0..self.cfg.n_patients {
            let z = gaussian(&mut rng, l, 1.0);
            let dem: Vec<f64> = project(&self.dem_proj, d.d_dem, &z)
                .into_iter()
                .map(|v| {
                    let e: f64 = rng.sample(StandardNormal);
                    if v + 0.3 * e > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let n_adm = rng.random_range(1..=self.cfg.max_admissions);
            let admissions = (0..n_adm)
                .map(|_| self.admission(&mut rng, &z))
                .collect::<Result<Vec<_>>>()?;
            let risk = self.label(&mut rng, 4, &z, 1.0, Q_70);
            patients.push(PatientRecord {
                demographics: Tensor::vector(dem)?,
                admissions,
                risk,
            });
        }
        Ok(Dataset { dims: d, patients })
    }

    /// Latent-space readout `projᵀ · codes` of a multi-hot vector.
    pub fn latent_readout(proj: &[f64], codes: &Tensor, latent_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; latent_dim];
        for (r, &c) in codes.data().iter().enumerate() {
            if c != 0.0 {
                for (o, p) in out.iter_mut().zip(&proj[r * latent_dim..(r + 1) * latent_dim]) {
                    *o += c * p;
                }
            }
        }
        out
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Two pseudo-note tokens per active ICD code.
fn note_tokens_for(icd: &[usize]) -> Vec<u32> {
    icd.iter()
        .flat_map(|&c| {
            (0..2u64).map(move |r| (splitmix64((c as u64) << 1 | r) % NOTE_VOCAB) as u32)
        })
        .collect()
}

/// Generates the synthetic dataset for `cfg`; a pure function of `cfg`.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    Generator::new(cfg.clone())?.generate()
}
