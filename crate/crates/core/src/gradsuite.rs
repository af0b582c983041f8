//! Finite-difference gradient suite over every layer and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::admission::{AdmissionEncoder, AdmissionMasks};
use crate::data::{generate_dataset, Dataset, Dims, GenConfig, ItemRef, Level};
use crate::error::Result;
use crate::nn::{FusionBlock, Initializer, LinearLayer, LstmParams, LstmState, ParamStore, LAYER_NORM_EPS};
use crate::stay::{StayEncoder, StayInput};
use crate::tensor::{grad_check, grad_check_params, perturb_params, GradCheckReport, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst result of one layer over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub pass: bool,
}

const SUITE_DIMS: Dims = Dims {
    t: 3,
    d_f: 3,
    d_dem: 2,
    n_icd: 6,
    n_drug: 5,
    max_stays: 2,
};
const D_R: usize = 3;
const D_NOTE: usize = 3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape, data, false).expect("finite")
}

/// Tiny dataset whose stay features and demographics are redrawn in [-1, 1].
fn suite_data(seed: u64) -> Result<Dataset> {
    let mut ds = generate_dataset(&GenConfig {
        n_patients: 3,
        max_admissions: 2,
        dims: SUITE_DIMS,
        d_note: D_NOTE,
        latent_dim: 2,
        sparsity: 1.0,
        seed,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in ds.patients.iter_mut() {
        p.demographics = uniform(&mut rng, &[SUITE_DIMS.d_dem]);
        for a in p.admissions.iter_mut() {
            for s in a.stays.iter_mut() {
                s.features = uniform(&mut rng, &[SUITE_DIMS.t, SUITE_DIMS.d_f]);
            }
        }
    }
    Ok(ds)
}

fn admission_setup(seed: u64) -> Result<(Dataset, AdmissionEncoder, ParamStore, Vec<ItemRef>)> {
    let ds = suite_data(seed)?;
    let enc = AdmissionEncoder::new(SUITE_DIMS, D_R, D_NOTE);
    let mut store = ParamStore::new();
    enc.init(&mut store, &Initializer::new(seed));
    perturb_params(&mut store, 0.1, seed);
    store.set_trainable("stay.dec.", false);
    let mut items = ds.items(Level::Admission);
    items.truncate(3);
    Ok((ds, enc, store, items))
}

fn check_layer(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "linear" => {
            let layer = LinearLayer::new("lin", 4, 3);
            let mut store = ParamStore::new();
            layer.init(&mut store, &Initializer::new(seed));
            perturb_params(&mut store, 0.1, seed);
            let x = uniform(&mut rng, &[2, 4]);
            grad_check_params(
                &store,
                |t, s| {
                    let x = t.constant(x.clone());
                    let y = layer.affine(t, s, x)?;
                    let y = t.tanh(y)?;
                    t.sum(y)
                },
                STEP,
                TOLERANCE,
                None,
                seed,
            )
        }
        "lstm_step" => {
            let lstm = LstmParams::new("lstm", 3, 4);
            let mut store = ParamStore::new();
            lstm.init(&mut store, &Initializer::new(seed));
            perturb_params(&mut store, 0.1, seed);
            let (x, h, c) = (
                uniform(&mut rng, &[2, 3]),
                uniform(&mut rng, &[2, 4]),
                uniform(&mut rng, &[2, 4]),
            );
            grad_check_params(
                &store,
                |t, s| {
                    let x = t.constant(x.clone());
                    let state = LstmState {
                        h: t.constant(h.clone()),
                        c: t.constant(c.clone()),
                    };
                    let st = lstm.step(t, s, Some(x), state)?;
                    let hc = t.add(st.h, st.c)?;
                    let sq = t.mul(hc, hc)?;
                    t.sum(sq)
                },
                STEP,
                TOLERANCE,
                None,
                seed,
            )
        }
        "lstm_sequence" => {
            let lstm = LstmParams::new("lstm", 3, 4);
            let mut store = ParamStore::new();
            lstm.init(&mut store, &Initializer::new(seed));
            perturb_params(&mut store, 0.1, seed);
            let seq = uniform(&mut rng, &[5, 3]);
            let target = uniform(&mut rng, &[4]);
            grad_check_params(
                &store,
                |t, s| {
                    let (h, _) = lstm.encode(t, s, &seq)?;
                    let y = t.constant(target.clone());
                    t.sse(h, y)
                },
                STEP,
                TOLERANCE,
                None,
                seed,
            )
        }
        "fusion" => {
            let block = FusionBlock::new("fu", 4);
            let mut store = ParamStore::new();
            block.init(&mut store, &Initializer::new(seed));
            perturb_params(&mut store, 0.1, seed);
            let tokens = uniform(&mut rng, &[3, 4]);
            let w = uniform(&mut rng, &[4]);
            grad_check_params(
                &store,
                |t, s| {
                    let x = t.constant(tokens.clone());
                    let y = block.forward(t, s, x)?;
                    let w = t.constant(w.clone());
                    let y = t.mul(y, w)?;
                    t.sum(y)
                },
                STEP,
                TOLERANCE,
                None,
                seed,
            )
        }
        "layer_norm" => {
            let x = uniform(&mut rng, &[3, 5]);
            let gamma = uniform(&mut rng, &[5]);
            let beta = uniform(&mut rng, &[5]);
            let w = uniform(&mut rng, &[3, 5]);
            grad_check(
                |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
                    let w = t.constant(w.clone());
                    let y = t.mul(y, w)?;
                    t.sum(y)
                },
                &[x, gamma, beta],
                STEP,
                TOLERANCE,
            )
        }
        "stay_loss" => {
            let ds = suite_data(seed)?;
            let enc = StayEncoder::new(SUITE_DIMS, D_R);
            let mut store = ParamStore::new();
            enc.init(&mut store, &Initializer::new(seed));
            perturb_params(&mut store, 0.1, seed);
            let items: Vec<Option<StayInput>> = ds
                .items(Level::Stay)
                .into_iter()
                .take(3)
                .map(|r| StayInput::from_ref(&ds, r).map(Some))
                .collect::<Result<_>>()?;
            grad_check_params(&store, |t, s| enc.stay_loss(t, s, &items), STEP, TOLERANCE, None, seed)
        }
        "mcp_loss" => {
            let (ds, enc, store, items) = admission_setup(seed)?;
            let masks = items
                .iter()
                .map(|&it| AdmissionMasks::sample(&ds, it, 0.5, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            grad_check_params(
                &store,
                |t, s| {
                    let toks = enc.tokens(t, s, &ds, &items, None)?;
                    enc.mcp_loss_with(t, s, &ds, &items, &toks, &masks)
                },
                STEP,
                TOLERANCE,
                None,
                seed,
            )
        }
        "cl_loss" => {
            let (ds, enc, store, items) = admission_setup(seed)?;
            grad_check_params(
                &store,
                |t, s| {
                    let toks = enc.tokens(t, s, &ds, &items, None)?;
                    enc.cl_loss(t, s, &toks, 0.1)
                },
                STEP,
                TOLERANCE,
                None,
                seed,
            )
        }
        other => unreachable!("unknown suite layer {other}"),
    }
}

pub const LAYERS: [&str; 8] = [
    "linear",
    "lstm_step",
    "lstm_sequence",
    "fusion",
    "layer_norm",
    "stay_loss",
    "mcp_loss",
    "cl_loss",
];

/// Runs every layer over seeds `0..seeds`.
pub fn run_suite(seeds: usize) -> Result<Vec<SuiteEntry>> {
    LAYERS
        .iter()
        .map(|&name| {
            let mut entry = SuiteEntry {
                name,
                seeds,
                max_rel_error: 0.0,
                checked: 0,
                pass: true,
            };
            for seed in 0..seeds as u64 {
                let r = check_layer(name, seed)?;
                entry.max_rel_error = entry.max_rel_error.max(r.max_rel_error);
                entry.checked += r.checked;
                entry.pass &= r.pass;
            }
            Ok(entry)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes_on_two_seeds() {
        for e in run_suite(2).unwrap() {
            assert!(e.pass, "{e:?}");
        }
    }
}
