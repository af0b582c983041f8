//! Browser bindings for a few inspectable pieces of the core crate.

use hmp_core::data::{mask_codes, multi_hot};
use hmp_core::downstream::{aupr, auroc, f1_kappa};
use hmp_core::nn::{FusionBlock, Initializer, ParamStore};
use hmp_core::tensor::{Tape, Tensor};
use hmp_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Attention matrix `[n, n]` followed by the pooled vector `[d]`, flattened.
pub fn fusion_attention_impl(tokens: &[f64], n: usize, d: usize, seed: u64) -> Result<Vec<f64>> {
    let block = FusionBlock::new("demo.fusion", d);
    let mut store = ParamStore::new();
    block.init(&mut store, &Initializer::new(seed));
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(n, d, tokens.to_vec())?);
    let out = block.forward_with_attention(&mut tape, &store, x)?;
    let mut flat = tape.value(out.attention).data().to_vec();
    flat.extend_from_slice(tape.value(out.pooled).data());
    Ok(flat)
}

/// One state per code: 0 absent, 1 kept, 2 masked.
pub fn mask_plan_impl(n_codes: usize, active: &[u32], rate: f64, seed: u64) -> Result<Vec<u8>> {
    let idx: Vec<usize> = active.iter().map(|&i| i as usize).collect();
    let codes = multi_hot(n_codes, &idx)?;
    let plan = mask_codes(&codes, rate, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(plan
        .kept
        .data()
        .iter()
        .zip(plan.indicator.data())
        .map(|(&k, &m)| if m == 1.0 { 2 } else if k == 1.0 { 1 } else { 0 })
        .collect())
}

/// `[auroc, aupr, f1, kappa]`.
pub fn metrics_impl(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Vec<f64>> {
    let y: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let (f1, kappa) = f1_kappa(scores, &y, threshold);
    Ok(vec![auroc(scores, &y)?, aupr(scores, &y)?, f1, kappa])
}

fn js(e: hmp_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn fusion_attention(tokens: Vec<f64>, n: usize, d: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    fusion_attention_impl(&tokens, n, d, u64::from(seed)).map_err(js)
}

#[wasm_bindgen]
pub fn mask_plan(n_codes: usize, active: Vec<u32>, rate: f64, seed: u32) -> std::result::Result<Vec<u8>, JsError> {
    mask_plan_impl(n_codes, &active, rate, u64::from(seed)).map_err(js)
}

#[wasm_bindgen]
pub fn metrics(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> std::result::Result<Vec<f64>, JsError> {
    metrics_impl(&scores, &labels, threshold).map_err(js)
}
