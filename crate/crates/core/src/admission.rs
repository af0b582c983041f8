//! Stage 2: admission encoding over stays, codes and notes, trained with
//! masked code prediction plus a cross-modal contrastive term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::Config;
use crate::data::{batch_iter, mask_codes, note_embed, Dataset, Dims, ItemRef, Level, MaskPlan};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, FusionBlock, Initializer, LinearLayer, Optimizer, ParamStore};
use crate::stay::{StayEncoder, StayInput, STAY_PREFIX};
use crate::tensor::{Tape, Tensor, Var};

/// Prefix shared by every admission-level parameter.
pub const ADMISSION_PREFIX: &str = "adm.";

/// Modality tokens in canonical fusion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Stays,
    Icd,
    Drugs,
    Note,
}

/// The four `[d_r]` tokens of one admission; `l` is already projected.
#[derive(Clone, Copy, Debug)]
pub struct AdmissionTokens {
    pub s: Var,
    pub c: Var,
    pub g: Var,
    pub l: Var,
}

impl AdmissionTokens {
    pub fn get(&self, m: Modality) -> Var {
        match m {
            Modality::Stays => self.s,
            Modality::Icd => self.c,
            Modality::Drugs => self.g,
            Modality::Note => self.l,
        }
    }

    /// Every token except `drop`, in canonical order.
    pub fn without(&self, drop: Modality) -> Vec<(Modality, Var)> {
        [Modality::Stays, Modality::Icd, Modality::Drugs, Modality::Note]
            .into_iter()
            .filter(|&m| m != drop)
            .map(|m| (m, self.get(m)))
            .collect()
    }
}

/// Masks drawn for one admission.
#[derive(Clone, Debug)]
pub struct AdmissionMasks {
    pub icd: MaskPlan,
    pub drugs: MaskPlan,
}

impl AdmissionMasks {
    pub fn sample<R: Rng + ?Sized>(ds: &Dataset, item: ItemRef, rate: f64, rng: &mut R) -> Result<Self> {
        let adm = admission_of(ds, item)?;
        Ok(AdmissionMasks {
            icd: mask_codes(&adm.icd, rate, rng)?,
            drugs: mask_codes(&adm.drugs, rate, rng)?,
        })
    }
}

fn admission_of(ds: &Dataset, item: ItemRef) -> Result<&crate::data::AdmissionRecord> {
    match item {
        ItemRef::Admission { patient, admission } => Ok(ds.admission(patient, admission)),
        other => Err(Error::Config(format!("expected an admission reference, got {other:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdmissionEncoder {
    pub stay: StayEncoder,
    pub d_note: usize,
    pub stay_agg: LinearLayer,
    pub icd_mlp: LinearLayer,
    pub drug_mlp: LinearLayer,
    pub note_proj: LinearLayer,
    pub fusion: FusionBlock,
    pub mcp_icd: LinearLayer,
    pub mcp_drug: LinearLayer,
}

impl AdmissionEncoder {
    pub fn new(dims: Dims, d_r: usize, d_note: usize) -> Self {
        AdmissionEncoder {
            stay: StayEncoder::new(dims, d_r),
            d_note,
            stay_agg: LinearLayer::new("adm.stay_agg", dims.max_stays * d_r, d_r),
            icd_mlp: LinearLayer::new("adm.icd_mlp", dims.n_icd, d_r),
            drug_mlp: LinearLayer::new("adm.drug_mlp", dims.n_drug, d_r),
            note_proj: LinearLayer::new("adm.note_proj", d_note, d_r),
            fusion: FusionBlock::new("adm.fusion", d_r),
            mcp_icd: LinearLayer::new("adm.mcp_icd", d_r, dims.n_icd),
            mcp_drug: LinearLayer::new("adm.mcp_drug", d_r, dims.n_drug),
        }
    }

    pub fn d_r(&self) -> usize {
        self.stay.d_r
    }

    pub fn dims(&self) -> Dims {
        self.stay.dims
    }

    pub fn init(&self, store: &mut ParamStore, init: &Initializer) {
        self.stay.init(store, init);
        for l in [
            &self.stay_agg,
            &self.icd_mlp,
            &self.drug_mlp,
            &self.note_proj,
            &self.mcp_icd,
            &self.mcp_drug,
        ] {
            l.init(store, init);
        }
        self.fusion.init(store, init);
    }

    /// `s = W_s [b_1; …; b_M] + b_s` for a batch of admissions, padded slots as zeros.
    /// Returns `[B, d_r]`.
    pub fn aggregate_stays_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ds: &Dataset,
        items: &[ItemRef],
    ) -> Result<Var> {
        let m = self.dims().max_stays;
        let mut inputs = Vec::new();
        let mut counts = Vec::with_capacity(items.len());
        for &it in items {
            let adm = admission_of(ds, it)?;
            if adm.stays.is_empty() || adm.stays.len() > m {
                return Err(Error::shape(
                    "aggregate_stays",
                    format!("{} stays for {m} slots", adm.stays.len()),
                ));
            }
            let demo = &ds.patients[it.patient()].demographics;
            inputs.extend(adm.stays.iter().map(|s| StayInput {
                features: &s.features,
                demographics: demo,
            }));
            counts.push(adm.stays.len());
        }
        let b = self.stay.encode_batch(tape, store, &inputs)?;
        let zero = tape.constant(Tensor::zeros(&[self.d_r()]));
        let mut rows = Vec::with_capacity(items.len());
        let mut next = 0;
        for n in counts {
            let mut slots = Vec::with_capacity(m);
            for k in 0..m {
                slots.push(if k < n { tape.select(b, next + k)? } else { zero });
            }
            next += n;
            rows.push(tape.concat(&slots)?);
        }
        let stacked = tape.stack(&rows)?;
        self.stay_agg.affine(tape, store, stacked)
    }

    /// Single-admission form of [`Self::aggregate_stays_batch`].
    pub fn aggregate_stays(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ds: &Dataset,
        item: ItemRef,
    ) -> Result<Var> {
        let s = self.aggregate_stays_batch(tape, store, ds, &[item])?;
        tape.reshape(s, &[self.d_r()])
    }

    /// `c = ReLU(W_c icd + b_c)`, `g = ReLU(W_g drugs + b_g)`.
    /// Accepts single vectors or `[B, ·]` batches.
    pub fn embed_codes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        icd: Var,
        drugs: Var,
    ) -> Result<(Var, Var)> {
        let c = self.icd_mlp.mlp_forward(tape, store, icd)?;
        let g = self.drug_mlp.mlp_forward(tape, store, drugs)?;
        Ok((c, g))
    }

    /// Fuses ≥ 2 tokens after sorting them into canonical order.
    pub fn admission_fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[(Modality, Var)],
    ) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(Error::TooFewTokens {
                min: 2,
                got: tokens.len(),
            });
        }
        let mut sorted = tokens.to_vec();
        sorted.sort_by_key(|(m, _)| *m);
        let vars: Vec<Var> = sorted.into_iter().map(|(_, v)| v).collect();
        self.fusion.fuse(tape, store, &vars)
    }

    /// Tokens for a batch of admissions. With `masks`, the code tokens are
    /// embedded from the kept codes only.
    pub fn tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ds: &Dataset,
        items: &[ItemRef],
        masks: Option<&[AdmissionMasks]>,
    ) -> Result<Vec<AdmissionTokens>> {
        if items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let s = self.aggregate_stays_batch(tape, store, ds, items)?;
        let (c, g) = self.code_tokens(tape, store, ds, items, masks)?;
        let mut notes = Vec::with_capacity(items.len() * self.d_note);
        for &it in items {
            notes.extend_from_slice(note_embed(&admission_of(ds, it)?.note_tokens, self.d_note).data());
        }
        let notes = tape.constant(Tensor::new(&[items.len(), self.d_note], notes, false)?);
        let l = self.note_proj.affine(tape, store, notes)?;
        (0..items.len())
            .map(|i| {
                Ok(AdmissionTokens {
                    s: tape.select(s, i)?,
                    c: tape.select(c, i)?,
                    g: tape.select(g, i)?,
                    l: tape.select(l, i)?,
                })
            })
            .collect()
    }

    /// `[B, d_r]` ICD and drug embeddings, optionally from masked inputs.
    fn code_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ds: &Dataset,
        items: &[ItemRef],
        masks: Option<&[AdmissionMasks]>,
    ) -> Result<(Var, Var)> {
        let dims = self.dims();
        let mut icd = Vec::with_capacity(items.len() * dims.n_icd);
        let mut drugs = Vec::with_capacity(items.len() * dims.n_drug);
        for (i, &it) in items.iter().enumerate() {
            let adm = admission_of(ds, it)?;
            match masks {
                Some(m) => {
                    icd.extend_from_slice(m[i].icd.kept.data());
                    drugs.extend_from_slice(m[i].drugs.kept.data());
                }
                None => {
                    icd.extend_from_slice(adm.icd.data());
                    drugs.extend_from_slice(adm.drugs.data());
                }
            }
        }
        let icd = tape.constant(Tensor::new(&[items.len(), dims.n_icd], icd, false)?);
        let drugs = tape.constant(Tensor::new(&[items.len(), dims.n_drug], drugs, false)?);
        self.embed_codes(tape, store, icd, drugs)
    }

    /// Full-modality admission representations, `[B, d_r]`.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ds: &Dataset,
        items: &[ItemRef],
    ) -> Result<Var> {
        let toks = self.tokens(tape, store, ds, items, None)?;
        let mut fused = Vec::with_capacity(toks.len());
        for t in &toks {
            fused.push(self.admission_fuse(
                tape,
                store,
                &[
                    (Modality::Stays, t.s),
                    (Modality::Icd, t.c),
                    (Modality::Drugs, t.g),
                    (Modality::Note, t.l),
                ],
            )?);
        }
        tape.stack(&fused)
    }

    /// MCP head probabilities from fused `[B, d_r]`.
    pub fn mcp_heads(&self, tape: &mut Tape, store: &ParamStore, a: Var) -> Result<(Var, Var)> {
        let pc = self.mcp_icd.affine(tape, store, a)?;
        let pc = tape.sigmoid(pc)?;
        let pg = self.mcp_drug.affine(tape, store, a)?;
        let pg = tape.sigmoid(pg)?;
        Ok((pc, pg))
    }

    /// Masked code prediction over `items` with fresh masks drawn from `rng`.
    pub fn mcp_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ds: &Dataset,
        items: &[ItemRef],
        mask_rate: f64,
        rng: &mut R,
    ) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let masks = items
            .iter()
            .map(|&it| AdmissionMasks::sample(ds, it, mask_rate, rng))
            .collect::<Result<Vec<_>>>()?;
        let unmasked = self.tokens(tape, store, ds, items, None)?;
        self.mcp_loss_with(tape, store, ds, items, &unmasked, &masks)
    }

    /// MCP term given precomputed tokens (only `s` and `l` are reused) and masks.
    pub fn mcp_loss_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ds: &Dataset,
        items: &[ItemRef],
        tokens: &[AdmissionTokens],
        masks: &[AdmissionMasks],
    ) -> Result<Var> {
        let (c, g) = self.code_tokens(tape, store, ds, items, Some(masks))?;
        let mut fused = Vec::with_capacity(items.len());
        for (i, t) in tokens.iter().enumerate() {
            let ci = tape.select(c, i)?;
            let gi = tape.select(g, i)?;
            fused.push(self.admission_fuse(
                tape,
                store,
                &[
                    (Modality::Stays, t.s),
                    (Modality::Icd, ci),
                    (Modality::Drugs, gi),
                    (Modality::Note, t.l),
                ],
            )?);
        }
        let a = tape.stack(&fused)?;
        let (pc, pg) = self.mcp_heads(tape, store, a)?;
        let dims = self.dims();
        let ind_c: Vec<f64> = masks.iter().flat_map(|m| m.icd.indicator.data().to_vec()).collect();
        let ind_g: Vec<f64> = masks.iter().flat_map(|m| m.drugs.indicator.data().to_vec()).collect();
        let ind_c = tape.constant(Tensor::new(&[items.len(), dims.n_icd], ind_c, false)?);
        let ind_g = tape.constant(Tensor::new(&[items.len(), dims.n_drug], ind_g, false)?);
        mcp_objective(tape, pc, pg, ind_c, ind_g)
    }

    /// Contrastive loss over the batch; see [`contrastive_objective`].
    pub fn cl_loss(&self, tape: &mut Tape, store: &ParamStore, tokens: &[AdmissionTokens], tau: f64) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(Error::BatchTooSmall(tokens.len()));
        }
        let mut pairs = Vec::with_capacity(3);
        for m in [Modality::Icd, Modality::Drugs, Modality::Note] {
            let mut r = Vec::with_capacity(tokens.len());
            let mut a = Vec::with_capacity(tokens.len());
            for t in tokens {
                r.push(t.get(m));
                a.push(self.admission_fuse(tape, store, &t.without(m))?);
            }
            pairs.push((tape.stack(&r)?, tape.stack(&a)?));
        }
        contrastive_objective(tape, &pairs, tau)
    }
}

/// `(1/N) Σ_i (‖p^c_i − c^m_i‖² + ‖p^g_i − g^m_i‖²)` for `[N, ·]` operands.
pub fn mcp_objective(tape: &mut Tape, pc: Var, pg: Var, ind_c: Var, ind_g: Var) -> Result<Var> {
    let n = tape.shape(pc).first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let ec = tape.sse(pc, ind_c)?;
    let eg = tape.sse(pg, ind_g)?;
    let e = tape.add(ec, eg)?;
    tape.scale(e, 1.0 / n as f64)
}

/// For each `(R, A)` pair of `[B, d]` matrices, row `i` contributes
/// `−log(exp(cos(r_i, a_i)/τ) / Σ_{j≠i} exp(cos(r_i, a_j)/τ))`.
/// Returns the mean over all pairs and rows.
pub fn contrastive_objective(tape: &mut Tape, pairs: &[(Var, Var)], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let mut total = None;
    let mut count = 0;
    for &(r, a) in pairs {
        let rn = tape.normalize_rows(r)?;
        let an = tape.normalize_rows(a)?;
        let sim = tape.matmul_nt(rn, an)?;
        let logits = tape.scale(sim, 1.0 / tau)?;
        let u = tape.nce_rows(logits)?;
        count += tape.shape(u)[0];
        let s = tape.sum(u)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let total = total.ok_or(Error::EmptyBatch)?;
    tape.scale(total, 1.0 / count as f64)
}

/// Per-epoch stage-2 losses (batch means).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmissionEpoch {
    pub mcp: f64,
    pub cl: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct AdmissionRun {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<AdmissionEpoch>,
}

/// Builds the admission encoder and loads the stay encoder from a stage-1 checkpoint.
pub fn init_admission_model(
    dims: Dims,
    cfg: &Config,
    stage1: &Checkpoint,
) -> Result<(AdmissionEncoder, ParamStore)> {
    stage1.expect_stage(Stage::Stay)?;
    let enc = AdmissionEncoder::new(dims, cfg.d_r, cfg.data.d_note);
    let mut store = ParamStore::new();
    enc.init(&mut store, &Initializer::new(cfg.seed));
    store.load_from(&stage1.params, |n| n.starts_with(STAY_PREFIX))?;
    Ok((enc, store))
}

/// AdamW on `L_MCP + λ L_CL`. Masks are resampled every epoch. Batches of a
/// single admission carry no contrastive term. The stage-1 decoder is frozen.
pub fn pretrain_admission(
    ds: &Dataset,
    cfg: &Config,
    stage1: &Checkpoint,
    log: &mut dyn FnMut(&str),
) -> Result<AdmissionRun> {
    if ds.n_admissions() == 0 {
        return Err(Error::EmptyDataset);
    }
    let (enc, mut store) = init_admission_model(ds.dims, cfg, stage1)?;
    store.set_trainable("stay.dec.", false);
    let ac = cfg.admission;
    let mut opt = Optimizer::adamw(ac.lr, ac.weight_decay);
    let mut epochs = Vec::with_capacity(ac.epochs);
    for epoch in 1..=ac.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mask", epoch as u64));
        let order = derive_seed(cfg.seed, "admission-order", epoch as u64);
        let (mut mcp_sum, mut cl_sum, mut tot_sum) = (0.0, 0.0, 0.0);
        let mut n_batches = 0;
        for batch in batch_iter(ds, Level::Admission, ac.batch, order)? {
            let masks = batch
                .iter()
                .map(|&it| AdmissionMasks::sample(ds, it, cfg.mask_rate, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let tokens = enc.tokens(&mut tape, &store, ds, &batch, None)?;
            let mcp = enc.mcp_loss_with(&mut tape, &store, ds, &batch, &tokens, &masks)?;
            let (loss, cl_val) = if batch.len() >= 2 {
                let cl = enc.cl_loss(&mut tape, &store, &tokens, cfg.tau)?;
                let weighted = tape.scale(cl, cfg.lambda)?;
                (tape.add(mcp, weighted)?, tape.value(cl).item())
            } else {
                (mcp, 0.0)
            };
            mcp_sum += tape.value(mcp).item();
            cl_sum += cl_val;
            tot_sum += tape.value(loss).item();
            n_batches += 1;
            let grads = tape.backward(loss)?;
            store.accumulate(&tape, &grads)?;
            opt.step(&mut store)?;
        }
        let nb = n_batches as f64;
        let e = AdmissionEpoch {
            mcp: mcp_sum / nb,
            cl: cl_sum / nb,
            total: tot_sum / nb,
        };
        log(&format!(
            "epoch={epoch} mcp={:.6} cl={:.6} total={:.6}",
            e.mcp, e.cl, e.total
        ));
        epochs.push(e);
    }
    store.set_trainable("stay.dec.", true);
    Ok(AdmissionRun {
        checkpoint: Checkpoint {
            stage: Stage::Admission,
            seed: cfg.seed,
            config: cfg.entries(),
            params: store,
        },
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};
    use crate::stay::init_stay_model;
    use crate::tensor::{grad_check_params, perturb_params};

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.d_r = 4;
        cfg.data = GenConfig {
            n_patients: 6,
            dims: Dims {
                t: 3,
                d_f: 4,
                d_dem: 3,
                n_icd: 12,
                n_drug: 10,
                max_stays: 2,
            },
            d_note: 5,
            sparsity: 1.0,
            ..GenConfig::default()
        };
        cfg
    }

    fn model(cfg: &Config, seed: u64) -> (Dataset, AdmissionEncoder, ParamStore) {
        let ds = generate_dataset(&GenConfig { seed, ..cfg.data.clone() }).unwrap();
        let (_, stay_store) = init_stay_model(ds.dims, cfg.d_r, seed);
        let ck = Checkpoint {
            stage: Stage::Stay,
            seed,
            config: vec![],
            params: stay_store,
        };
        let (enc, store) = init_admission_model(ds.dims, cfg, &ck).unwrap();
        (ds, enc, store)
    }

    #[test]
    fn zero_aggregation_weight_gives_bias() {
        let cfg = tiny_cfg();
        let (ds, enc, mut store) = model(&cfg, 1);
        store.get_mut(&enc.stay_agg.weight_name()).unwrap().data_mut().fill(0.0);
        store
            .get_mut(&enc.stay_agg.bias_name())
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.4]);
        for it in ds.items(Level::Admission) {
            let mut t = Tape::new();
            let s = enc.aggregate_stays(&mut t, &store, &ds, it).unwrap();
            assert_eq!(t.value(s).data(), &[0.1, -0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn too_few_tokens() {
        let cfg = tiny_cfg();
        let (_, enc, store) = model(&cfg, 2);
        let mut t = Tape::new();
        let v = t.constant(Tensor::zeros(&[4]));
        assert!(matches!(
            enc.admission_fuse(&mut t, &store, &[(Modality::Icd, v)]),
            Err(Error::TooFewTokens { min: 2, got: 1 })
        ));
    }

    #[test]
    fn fuse_order_is_canonical() {
        let cfg = tiny_cfg();
        let (ds, enc, store) = model(&cfg, 3);
        let items = ds.items(Level::Admission);
        let mut t = Tape::new();
        let tok = enc.tokens(&mut t, &store, &ds, &items[..1], None).unwrap()[0];
        let a = enc.admission_fuse(&mut t, &store, &tok.without(Modality::Drugs)).unwrap();
        let b = enc
            .admission_fuse(
                &mut t,
                &store,
                &[(Modality::Note, tok.l), (Modality::Stays, tok.s), (Modality::Icd, tok.c)],
            )
            .unwrap();
        assert_eq!(t.value(a).data(), t.value(b).data());
    }

    #[test]
    fn forced_indicator_gives_zero_mcp() {
        let mut t = Tape::new();
        let ic = t.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let ig = t.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let l = mcp_objective(&mut t, ic, ig, ic, ig).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn zero_rate_targets_are_zero() {
        let cfg = tiny_cfg();
        let (ds, enc, store) = model(&cfg, 4);
        let items: Vec<ItemRef> = ds.items(Level::Admission).into_iter().take(3).collect();
        let mut t = Tape::new();
        let l = enc
            .mcp_loss(&mut t, &store, &ds, &items, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        // closed form from the head outputs on unmasked inputs
        let mut t2 = Tape::new();
        let a = enc.encode_batch(&mut t2, &store, &ds, &items).unwrap();
        let (pc, pg) = enc.mcp_heads(&mut t2, &store, a).unwrap();
        let energy: f64 = t2
            .value(pc)
            .data()
            .iter()
            .chain(t2.value(pg).data())
            .map(|p| p * p)
            .sum();
        assert!((t.value(l).item() - energy / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_gives_zero_contrastive() {
        let cfg = tiny_cfg();
        let (ds, enc, store) = model(&cfg, 5);
        let it = ds.items(Level::Admission)[0];
        let mut t = Tape::new();
        let toks = enc.tokens(&mut t, &store, &ds, &[it, it], None).unwrap();
        let l = enc.cl_loss(&mut t, &store, &toks, 0.1).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        assert!(matches!(
            enc.cl_loss(&mut t, &store, &toks[..1], 0.1),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn contrastive_matches_hand_cosines() {
        // r_i = e_i, a = identity → cos(r_1, a_1) = 1, others 0
        let mut t = Tape::new();
        let eye = t.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let l = contrastive_objective(&mut t, &[(eye, eye)], 0.1).unwrap();
        let expected = -10.0 + 2f64.ln();
        assert!((t.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn contrastive_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |v: &[f64]| -> Vec<f64> {
            v.chunks(4)
                .flat_map(|x| [c * x[0] - s * x[1], s * x[0] + c * x[1], x[2], x[3]])
                .collect()
        };
        let eval = |r: Vec<f64>, a: Vec<f64>| {
            let mut t = Tape::new();
            let r = t.constant(Tensor::matrix(3, 4, r).unwrap());
            let a = t.constant(Tensor::matrix(3, 4, a).unwrap());
            let l = contrastive_objective(&mut t, &[(r, a)], 0.1).unwrap();
            t.value(l).item()
        };
        let base = eval(r.clone(), a.clone());
        assert!((base - eval(rot(&r), rot(&a))).abs() < 1e-8);
    }

    #[test]
    fn combined_gradient_check() {
        let cfg = tiny_cfg();
        let (ds, enc, mut store) = model(&cfg, 6);
        perturb_params(&mut store, 0.1, 6);
        store.set_trainable("stay.dec.", false);
        let items: Vec<ItemRef> = ds.items(Level::Admission).into_iter().take(2).collect();
        let masks: Vec<AdmissionMasks> = items
            .iter()
            .map(|&it| AdmissionMasks::sample(&ds, it, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap())
            .collect();
        let rep = grad_check_params(
            &store,
            |t, s| {
                let toks = enc.tokens(t, s, &ds, &items, None)?;
                let mcp = enc.mcp_loss_with(t, s, &ds, &items, &toks, &masks)?;
                let cl = enc.cl_loss(t, s, &toks, 0.1)?;
                let cl = t.scale(cl, 0.1)?;
                t.add(mcp, cl)
            },
            1e-5,
            1e-4,
            Some(3),
            0,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn stage_mismatch_and_fidelity() {
        let cfg = tiny_cfg();
        let ds = generate_dataset(&cfg.data).unwrap();
        let (stay_enc, stay_store) = init_stay_model(ds.dims, cfg.d_r, 11);
        let ck = Checkpoint {
            stage: Stage::Admission,
            seed: 0,
            config: vec![],
            params: stay_store.clone(),
        };
        assert!(matches!(
            pretrain_admission(&ds, &cfg, &ck, &mut |_| {}),
            Err(Error::StageMismatch { .. })
        ));
        let ck = Checkpoint { stage: Stage::Stay, ..ck };
        let (enc, store) = init_admission_model(ds.dims, &cfg, &ck).unwrap();
        for it in ds.items(Level::Stay) {
            let s = StayInput::from_ref(&ds, it).unwrap();
            let mut t1 = Tape::new();
            let a = stay_enc.encode_stay(&mut t1, &stay_store, s).unwrap();
            let mut t2 = Tape::new();
            let b = enc.stay.encode_stay(&mut t2, &store, s).unwrap();
            assert_eq!(t1.value(a).data(), t2.value(b).data());
        }
    }

    #[test]
    fn pretraining_logs_components() {
        let mut cfg = tiny_cfg();
        cfg.admission.epochs = 2;
        cfg.admission.batch = 4;
        let ds = generate_dataset(&cfg.data).unwrap();
        let (_, stay_store) = init_stay_model(ds.dims, cfg.d_r, 0);
        let ck = Checkpoint {
            stage: Stage::Stay,
            seed: 0,
            config: vec![],
            params: stay_store.clone(),
        };
        let mut lines = Vec::new();
        let run = pretrain_admission(&ds, &cfg, &ck, &mut |l| lines.push(l.to_string())).unwrap();
        assert_eq!(run.checkpoint.stage, Stage::Admission);
        assert!(lines[1].starts_with("epoch=2 mcp="), "{}", lines[1]);
        assert!(lines[1].contains(" cl=") && lines[1].contains(" total="));
        // frozen decoder left as loaded
        for (name, t) in stay_store.iter().filter(|(n, _)| n.starts_with("stay.dec.")) {
            assert_eq!(run.checkpoint.params.get(name).unwrap().data(), t.data());
        }
        let again = pretrain_admission(&ds, &cfg, &ck, &mut |_| {}).unwrap();
        assert_eq!(run.epochs, again.epochs);
    }
}
