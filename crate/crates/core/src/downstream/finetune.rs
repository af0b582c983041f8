use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    aupr, auroc, f1_kappa, labels_of, subsample, EpochMetrics, EvalReport, Init, Split, TaskSpec,
    THRESHOLD,
};
use crate::admission::{AdmissionEncoder, ADMISSION_PREFIX};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{Config, FinetuneConfig};
use crate::data::{Dataset, Dims, ItemRef, Level, Task};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, Initializer, LinearLayer, LstmParams, LstmState, Optimizer, ParamStore};
use crate::stay::{StayEncoder, StayInput, STAY_PREFIX};
use crate::tensor::{Tape, Tensor, Var};

/// Binary classification head shared by every level.
pub const HEAD_NAME: &str = "ft.head";

const EVAL_BATCH: usize = 256;

/// ICD embedding followed by an LSTM over the admission sequence. The
/// embedding carries the admission-level name so it can be loaded from stage 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientModel {
    pub icd_mlp: LinearLayer,
    pub lstm: LstmParams,
}

impl PatientModel {
    pub fn new(dims: Dims, d_r: usize) -> Self {
        PatientModel {
            icd_mlp: LinearLayer::new("adm.icd_mlp", dims.n_icd, d_r),
            lstm: LstmParams::new("patient.lstm", d_r, d_r),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &Initializer) {
        self.icd_mlp.init(store, init);
        self.lstm.init(store, init);
    }

    /// Final hidden state for one patient, `[d_r]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, ds: &Dataset, patient: usize) -> Result<Var> {
        let adms = &ds.patients[patient].admissions;
        if adms.is_empty() {
            return Err(Error::shape("patient_encode", format!("patient {patient} has no admissions")));
        }
        let n_icd = ds.dims.n_icd;
        let mut icd = Vec::with_capacity(adms.len() * n_icd);
        for a in adms {
            icd.extend_from_slice(a.icd.data());
        }
        let icd = tape.constant(Tensor::new(&[adms.len(), n_icd], icd, false)?);
        let emb = self.icd_mlp.mlp_forward(tape, store, icd)?;
        let hidden = self.lstm.hidden;
        let mut state = LstmState {
            h: tape.constant(Tensor::zeros(&[1, hidden])),
            c: tape.constant(Tensor::zeros(&[1, hidden])),
        };
        for t in 0..adms.len() {
            let x = tape.select(emb, t)?;
            let x = tape.reshape(x, &[1, hidden])?;
            state = self.lstm.step(tape, store, Some(x), state)?;
        }
        tape.reshape(state.h, &[hidden])
    }
}

/// Encoder plus head for one task level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DownstreamModel {
    Stay(StayEncoder),
    Admission(AdmissionEncoder),
    Patient(PatientModel),
}

impl DownstreamModel {
    pub fn new(level: Level, cfg: &Config, dims: Dims) -> Self {
        match level {
            Level::Stay => DownstreamModel::Stay(StayEncoder::new(dims, cfg.d_r)),
            Level::Admission => {
                DownstreamModel::Admission(AdmissionEncoder::new(dims, cfg.d_r, cfg.data.d_note))
            }
            Level::Patient => DownstreamModel::Patient(PatientModel::new(dims, cfg.d_r)),
        }
    }

    fn d_r(&self) -> usize {
        match self {
            DownstreamModel::Stay(e) => e.d_r,
            DownstreamModel::Admission(e) => e.d_r(),
            DownstreamModel::Patient(p) => p.lstm.hidden,
        }
    }

    fn head(&self) -> LinearLayer {
        LinearLayer::new(HEAD_NAME, self.d_r(), 1)
    }

    /// Seeded parameters; pretraining-only parts are frozen.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let init = Initializer::new(seed);
        match self {
            DownstreamModel::Stay(e) => e.init(&mut store, &init),
            DownstreamModel::Admission(e) => e.init(&mut store, &init),
            DownstreamModel::Patient(p) => p.init(&mut store, &init),
        }
        self.head().init(&mut store, &init);
        store.set_trainable("stay.dec.", false);
        store.set_trainable("adm.mcp_", false);
        store
    }

    /// `[B, d_r]` representations of `items`.
    pub fn represent(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ds: &Dataset,
        items: &[ItemRef],
    ) -> Result<Var> {
        match self {
            DownstreamModel::Stay(e) => {
                let inputs = items
                    .iter()
                    .map(|&it| StayInput::from_ref(ds, it))
                    .collect::<Result<Vec<_>>>()?;
                e.encode_batch(tape, store, &inputs)
            }
            DownstreamModel::Admission(e) => e.encode_batch(tape, store, ds, items),
            DownstreamModel::Patient(p) => {
                let reps = items
                    .iter()
                    .map(|it| p.encode(tape, store, ds, it.patient()))
                    .collect::<Result<Vec<_>>>()?;
                tape.stack(&reps)
            }
        }
    }

    /// `[B]` logits.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ds: &Dataset,
        items: &[ItemRef],
    ) -> Result<Var> {
        let rep = self.represent(tape, store, ds, items)?;
        let z = self.head().affine(tape, store, rep)?;
        tape.reshape(z, &[items.len()])
    }
}

/// Copies the parameter subset that `init` selects for `level` from `ckpt`.
/// Returns the names loaded.
///
/// | init    | stay level          | admission level        | patient level  |
/// |---------|---------------------|------------------------|----------------|
/// | a+s     | `stay.*` (stage 2)  | `stay.*`, `adm.*` (2)  | ICD MLP (2)    |
/// | s       | `stay.*` (any)      | `stay.*` (any)         | invalid        |
/// | a       | invalid             | `adm.*` (stage 2)      | ICD MLP (2)    |
/// | scratch | nothing             | nothing                | nothing        |
pub fn load_pretrained(
    store: &mut ParamStore,
    level: Level,
    init: Init,
    ckpt: Option<&Checkpoint>,
) -> Result<Vec<String>> {
    if init == Init::Scratch {
        return Ok(Vec::new());
    }
    let ckpt = ckpt.ok_or_else(|| Error::Config(format!("init `{init}` needs a checkpoint")))?;
    let invalid = || Err(Error::Config(format!("init `{init}` is not defined for {level}-level tasks")));
    let filter: Box<dyn Fn(&str) -> bool> = match (level, init) {
        (Level::Stay, Init::Admission) | (Level::Patient, Init::Stay) => return invalid(),
        (_, Init::Stay) => Box::new(|n: &str| n.starts_with(STAY_PREFIX)),
        (Level::Stay, Init::Both) => {
            ckpt.expect_stage(Stage::Admission)?;
            Box::new(|n: &str| n.starts_with(STAY_PREFIX))
        }
        (Level::Admission, Init::Both) => {
            ckpt.expect_stage(Stage::Admission)?;
            Box::new(|n: &str| n.starts_with(STAY_PREFIX) || n.starts_with(ADMISSION_PREFIX))
        }
        (Level::Admission, Init::Admission) => {
            ckpt.expect_stage(Stage::Admission)?;
            Box::new(|n: &str| n.starts_with(ADMISSION_PREFIX))
        }
        (Level::Patient, _) => {
            ckpt.expect_stage(Stage::Admission)?;
            Box::new(|n: &str| n.starts_with("adm.icd_mlp."))
        }
        (_, Init::Scratch) => unreachable!("handled above"),
    };
    store.load_from(&ckpt.params, filter)
}

fn predict(
    model: &DownstreamModel,
    store: &ParamStore,
    ds: &Dataset,
    items: &[ItemRef],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let z = model.logits(&mut tape, store, ds, chunk)?;
        out.extend(tape.value(z).data().iter().copied());
    }
    Ok(out)
}

fn mean_bce(logits: &[f64], labels: &[bool]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| x.max(0.0) - x * (y as u8 as f64) + (-x.abs()).exp().ln_1p())
        .sum::<f64>()
        / logits.len() as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fine-tunes on the training split (optionally subsampled), early-stops on
/// validation cross-entropy and reports test metrics of the best epoch.
pub fn finetune(
    ds: &Dataset,
    cfg: &Config,
    ckpt: Option<&Checkpoint>,
    spec: &TaskSpec,
) -> Result<EvalReport> {
    let level = spec.level();
    let split = Split::new(ds, level, spec.seed)?;
    let train = subsample(ds, &split.train, spec.task, spec.train_fraction, spec.seed)?;
    let model = DownstreamModel::new(level, cfg, ds.dims);
    let mut store = model.init(derive_seed(spec.seed, "finetune-init", 0));
    load_pretrained(&mut store, level, spec.init, ckpt)?;
    train_and_evaluate(ds, &model, store, &cfg.finetune, spec, &train, &split)
}

/// Fits the head alone on frozen training features (full batch, AdamW) so
/// both arms start fine-tuning from a fitted linear readout.
fn warm_start_head(
    ds: &Dataset,
    model: &DownstreamModel,
    store: &mut ParamStore,
    fc: &FinetuneConfig,
    task: Task,
    train: &[ItemRef],
) -> Result<()> {
    if fc.probe_steps == 0 {
        return Ok(());
    }
    let mut feats = Vec::new();
    for chunk in train.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let rep = model.represent(&mut tape, store, ds, chunk)?;
        feats.extend_from_slice(tape.value(rep).data());
    }
    let feats = Tensor::new(&[train.len(), model.d_r()], feats, false)?;
    let y: Vec<f64> = labels_of(ds, train, task)?
        .into_iter()
        .map(|b| b as u8 as f64)
        .collect();
    let head = model.head();
    let mut hs = ParamStore::new();
    for name in [format!("{HEAD_NAME}.weight"), format!("{HEAD_NAME}.bias")] {
        hs.insert(name.clone(), store.get(&name)?.clone());
    }
    let mut opt = Optimizer::adamw(fc.probe_lr, fc.weight_decay);
    for _ in 0..fc.probe_steps {
        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let z = head.affine(&mut tape, &hs, x)?;
        let z = tape.reshape(z, &[train.len()])?;
        let loss = tape.bce_with_logits(z, &y)?;
        let grads = tape.backward(loss)?;
        hs.accumulate(&tape, &grads)?;
        opt.step(&mut hs)?;
    }
    store.load_from(&hs, |_| true)?;
    Ok(())
}

fn train_and_evaluate(
    ds: &Dataset,
    model: &DownstreamModel,
    mut store: ParamStore,
    fc: &FinetuneConfig,
    spec: &TaskSpec,
    train: &[ItemRef],
    split: &Split,
) -> Result<EvalReport> {
    warm_start_head(ds, model, &mut store, fc, spec.task, train)?;
    let valid_y = labels_of(ds, &split.valid, spec.task)?;
    let test_y = labels_of(ds, &split.test, spec.task)?;
    let mut opt = Optimizer::sgd(fc.lr, fc.weight_decay);
    let mut best = (f64::INFINITY, 0usize, store.clone());
    let mut series = Vec::new();
    let mut stale = 0;
    for epoch in 1..=fc.max_epochs {
        let mut order = train.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            spec.seed,
            "finetune-order",
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        for batch in order.chunks(fc.batch) {
            let y: Vec<f64> = labels_of(ds, batch, spec.task)?
                .into_iter()
                .map(|b| b as u8 as f64)
                .collect();
            let mut tape = Tape::new();
            let z = model.logits(&mut tape, &store, ds, batch)?;
            let loss = tape.bce_with_logits(z, &y)?;
            loss_sum += tape.value(loss).item() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            store.accumulate(&tape, &grads)?;
            opt.step(&mut store)?;
        }
        let val_loss = mean_bce(&predict(model, &store, ds, &split.valid)?, &valid_y);
        let test_p: Vec<f64> = predict(model, &store, ds, &split.test)?
            .into_iter()
            .map(sigmoid)
            .collect();
        series.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
            test_auroc: auroc(&test_p, &test_y)?,
            test_f1: f1_kappa(&test_p, &test_y, THRESHOLD).0,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= fc.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_store) = best;
    let test_p: Vec<f64> = predict(model, &best_store, ds, &split.test)?
        .into_iter()
        .map(sigmoid)
        .collect();
    let (f1, kappa) = f1_kappa(&test_p, &test_y, THRESHOLD);
    Ok(EvalReport {
        auroc: auroc(&test_p, &test_y)?,
        aupr: aupr(&test_p, &test_y)?,
        f1,
        kappa,
        epochs: series.len(),
        best_epoch,
        series,
    })
}

fn check_level(spec: &TaskSpec, level: Level) -> Result<()> {
    if spec.level() != level {
        return Err(Error::Config(format!(
            "task `{}` is {}-level, not {level}-level",
            spec.task,
            spec.level()
        )));
    }
    Ok(())
}

pub fn finetune_stay(ds: &Dataset, cfg: &Config, ckpt: Option<&Checkpoint>, spec: &TaskSpec) -> Result<EvalReport> {
    check_level(spec, Level::Stay)?;
    finetune(ds, cfg, ckpt, spec)
}

pub fn finetune_admission(
    ds: &Dataset,
    cfg: &Config,
    ckpt: Option<&Checkpoint>,
    spec: &TaskSpec,
) -> Result<EvalReport> {
    check_level(spec, Level::Admission)?;
    finetune(ds, cfg, ckpt, spec)
}

pub fn finetune_patient(
    ds: &Dataset,
    cfg: &Config,
    ckpt: Option<&Checkpoint>,
    spec: &TaskSpec,
) -> Result<EvalReport> {
    check_level(spec, Level::Patient)?;
    finetune(ds, cfg, ckpt, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};

    fn admission_ckpt(cfg: &Config, dims: Dims, seed: u64) -> Checkpoint {
        let enc = AdmissionEncoder::new(dims, cfg.d_r, cfg.data.d_note);
        let mut params = ParamStore::new();
        enc.init(&mut params, &Initializer::new(seed));
        Checkpoint {
            stage: Stage::Admission,
            seed,
            config: vec![],
            params,
        }
    }

    #[test]
    fn loading_rules_select_documented_subsets() {
        let cfg = Config::default();
        let dims = Dims::DESK;
        let ck = admission_ckpt(&cfg, dims, 99);
        let adm = DownstreamModel::new(Level::Admission, &cfg, dims);
        let count = |init| {
            let mut s = adm.init(1);
            load_pretrained(&mut s, Level::Admission, init, Some(&ck)).unwrap()
        };
        assert!(count(Init::Scratch).is_empty());
        assert!(count(Init::Stay).iter().all(|n| n.starts_with("stay.")));
        assert!(count(Init::Admission).iter().all(|n| n.starts_with("adm.")));
        let both = count(Init::Both);
        assert_eq!(both.len(), count(Init::Stay).len() + count(Init::Admission).len());

        let pat = DownstreamModel::new(Level::Patient, &cfg, dims);
        let mut s = pat.init(1);
        let loaded = load_pretrained(&mut s, Level::Patient, Init::Both, Some(&ck)).unwrap();
        assert_eq!(loaded, vec!["adm.icd_mlp.weight", "adm.icd_mlp.bias"]);

        let stay_ck = Checkpoint {
            stage: Stage::Stay,
            ..ck.clone()
        };
        let mut s = adm.init(1);
        assert!(matches!(
            load_pretrained(&mut s, Level::Admission, Init::Both, Some(&stay_ck)),
            Err(Error::StageMismatch { .. })
        ));
        assert!(load_pretrained(&mut s, Level::Admission, Init::Stay, Some(&stay_ck)).is_ok());
    }

    #[test]
    fn separable_toy_reaches_perfect_auroc() {
        // the risk label copied into a dedicated ICD code of every admission
        let mut ds = generate_dataset(&GenConfig {
            n_patients: 200,
            ..GenConfig::default()
        })
        .unwrap();
        let last = ds.dims.n_icd - 1;
        for p in ds.patients.iter_mut() {
            let flag = if p.risk { 1.0 } else { 0.0 };
            for a in p.admissions.iter_mut() {
                a.icd.data_mut()[last] = flag;
            }
        }
        let mut cfg = Config::default();
        cfg.finetune.lr = 0.1;
        let spec = TaskSpec::new(Task::Risk, Init::Scratch, 0);
        let r = finetune_patient(&ds, &cfg, None, &spec).unwrap();
        assert_eq!(r.auroc, 1.0, "{r:?}");
    }

    #[test]
    fn single_admission_patient_is_one_step() {
        let ds = generate_dataset(&GenConfig {
            n_patients: 30,
            ..GenConfig::default()
        })
        .unwrap();
        let p = ds.patients.iter().position(|p| p.admissions.len() == 1).unwrap();
        let cfg = Config::default();
        let m = PatientModel::new(ds.dims, cfg.d_r);
        let mut store = ParamStore::new();
        m.init(&mut store, &Initializer::new(0));
        let mut t = Tape::new();
        let h = m.encode(&mut t, &store, &ds, p).unwrap();
        let mut t2 = Tape::new();
        let x = t2.constant(ds.patients[p].admissions[0].icd.clone());
        let e = m.icd_mlp.mlp_forward(&mut t2, &store, x).unwrap();
        let e = t2.reshape(e, &[1, cfg.d_r]).unwrap();
        let z = t2.constant(Tensor::zeros(&[1, cfg.d_r]));
        let st = m.lstm.step(&mut t2, &store, Some(e), LstmState { h: z, c: z }).unwrap();
        assert_eq!(t.value(h).data(), t2.value(st.h).data());
    }

    #[test]
    fn level_mismatch_rejected() {
        let ds = generate_dataset(&GenConfig {
            n_patients: 20,
            ..GenConfig::default()
        })
        .unwrap();
        let spec = TaskSpec::new(Task::Risk, Init::Scratch, 0);
        assert!(finetune_stay(&ds, &Config::default(), None, &spec).is_err());
    }
}
