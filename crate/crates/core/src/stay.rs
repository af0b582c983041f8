//! Stage 1: bimodal stay encoding and hourly-feature reconstruction.

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::Config;
use crate::data::{batch_iter, Dataset, Dims, ItemRef, Level};
use crate::error::{Error, Result};
use crate::nn::{
    derive_seed, sequence_steps, FusionBlock, Initializer, LinearLayer, LstmDecoder, LstmParams,
    Optimizer, ParamStore,
};
use crate::tensor::{Tape, Tensor, Var};

/// Prefix shared by every stay-encoder parameter.
pub const STAY_PREFIX: &str = "stay.";

/// One stay with the demographics of its patient.
#[derive(Clone, Copy, Debug)]
pub struct StayInput<'a> {
    pub features: &'a Tensor,
    pub demographics: &'a Tensor,
}

impl<'a> StayInput<'a> {
    pub fn from_ref(ds: &'a Dataset, item: ItemRef) -> Result<Self> {
        match item {
            ItemRef::Stay {
                patient,
                admission,
                stay,
            } => Ok(StayInput {
                features: &ds.stay(patient, admission, stay).features,
                demographics: &ds.patients[patient].demographics,
            }),
            other => Err(Error::Config(format!("expected a stay reference, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StayEncoder {
    pub dims: Dims,
    pub d_r: usize,
    pub lstm_enc: LstmParams,
    pub demo_mlp: LinearLayer,
    pub fusion: FusionBlock,
    pub decoder: LstmDecoder,
}

impl StayEncoder {
    pub fn new(dims: Dims, d_r: usize) -> Self {
        StayEncoder {
            dims,
            d_r,
            lstm_enc: LstmParams::new("stay.enc", dims.d_f, d_r),
            demo_mlp: LinearLayer::new("stay.demo", dims.d_dem, d_r),
            fusion: FusionBlock::new("stay.fusion", d_r),
            decoder: LstmDecoder::new("stay.dec", d_r, dims.d_f),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &Initializer) {
        self.lstm_enc.init(store, init);
        self.demo_mlp.init(store, init);
        self.fusion.init(store, init);
        self.decoder.init(store, init);
    }

    /// Encodes a batch; returns `[B, d_r]` and the hourly input steps.
    fn encode_with_steps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        items: &[StayInput<'_>],
    ) -> Result<(Var, Vec<Var>)> {
        if items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let seqs: Vec<&Tensor> = items.iter().map(|s| s.features).collect();
        let steps = sequence_steps(tape, &seqs, self.dims.d_f)?;
        let state = self.lstm_enc.run(tape, store, &steps)?;

        let mut demo = Vec::with_capacity(items.len() * self.dims.d_dem);
        for s in items {
            if s.demographics.shape() != [self.dims.d_dem] {
                return Err(Error::shape(
                    "encode_stay",
                    format!("demographics {:?}, expected [{}]", s.demographics.shape(), self.dims.d_dem),
                ));
            }
            demo.extend_from_slice(s.demographics.data());
        }
        let demo = tape.constant(Tensor::new(&[items.len(), self.dims.d_dem], demo, false)?);
        let d = self.demo_mlp.mlp_forward(tape, store, demo)?;

        let mut fused = Vec::with_capacity(items.len());
        for i in 0..items.len() {
            let h = tape.select(state.h, i)?;
            let di = tape.select(d, i)?;
            fused.push(self.fusion.fuse(tape, store, &[h, di])?);
        }
        Ok((tape.stack(&fused)?, steps))
    }

    /// `[B, d_r]` stay representations.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        items: &[StayInput<'_>],
    ) -> Result<Var> {
        Ok(self.encode_with_steps(tape, store, items)?.0)
    }

    /// Fused representation `b` of a single stay.
    pub fn encode_stay(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stay: StayInput<'_>,
    ) -> Result<Var> {
        let b = self.encode_batch(tape, store, &[stay])?;
        tape.reshape(b, &[self.d_r])
    }

    /// Reconstructs every hour of each stay from its fused representation.
    pub fn reconstruct(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        items: &[StayInput<'_>],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let (b, steps) = self.encode_with_steps(tape, store, items)?;
        let recon = self.decoder.decode(tape, store, b, steps.len())?;
        Ok((recon, steps))
    }

    /// Mean squared hourly reconstruction error over the real stays of the batch.
    /// `None` entries are padding and contribute nothing.
    pub fn stay_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[Option<StayInput<'_>>],
    ) -> Result<Var> {
        let real: Vec<StayInput<'_>> = batch.iter().flatten().copied().collect();
        let (recon, steps) = self.reconstruct(tape, store, &real)?;
        reconstruction_loss(tape, &recon, &steps, real.len())
    }
}

/// `Σ_t ‖m_t − m̃_t‖² / (n_stays · T)` for step-aligned `[B, d_f]` pairs.
pub fn reconstruction_loss(
    tape: &mut Tape,
    recon: &[Var],
    target: &[Var],
    n_stays: usize,
) -> Result<Var> {
    if recon.is_empty() || n_stays == 0 {
        return Err(Error::EmptyBatch);
    }
    if recon.len() != target.len() {
        return Err(Error::shape(
            "stay_loss",
            format!("{} reconstructed steps vs {} inputs", recon.len(), target.len()),
        ));
    }
    let mut total = None;
    for (&r, &m) in recon.iter().zip(target) {
        let e = tape.sse(r, m)?;
        total = Some(match total {
            None => e,
            Some(acc) => tape.add(acc, e)?,
        });
    }
    let total = total.expect("non-empty");
    tape.scale(total, 1.0 / (n_stays * recon.len()) as f64)
}

/// Builds the stay encoder and a freshly initialized store.
pub fn init_stay_model(dims: Dims, d_r: usize, seed: u64) -> (StayEncoder, ParamStore) {
    let enc = StayEncoder::new(dims, d_r);
    let mut store = ParamStore::new();
    enc.init(&mut store, &Initializer::new(seed));
    (enc, store)
}

/// Result of a stage-1 run.
#[derive(Clone, Debug)]
pub struct StayRun {
    pub checkpoint: Checkpoint,
    /// mean training loss per epoch
    pub losses: Vec<f64>,
}

/// AdamW over shuffled stay batches for `cfg.stay.epochs` epochs.
/// Each epoch emits `epoch=<n> loss=<mean>` through `log`.
pub fn pretrain_stay(ds: &Dataset, cfg: &Config, log: &mut dyn FnMut(&str)) -> Result<StayRun> {
    if ds.n_stays() == 0 {
        return Err(Error::EmptyDataset);
    }
    let sc = cfg.stay;
    let (enc, mut store) = init_stay_model(ds.dims, cfg.d_r, cfg.seed);
    let mut opt = Optimizer::adamw(sc.lr, sc.weight_decay);
    let mut losses = Vec::with_capacity(sc.epochs);
    for epoch in 1..=sc.epochs {
        let order = derive_seed(cfg.seed, "stay-order", epoch as u64);
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in batch_iter(ds, Level::Stay, sc.batch, order)? {
            let items = batch
                .iter()
                .map(|&r| StayInput::from_ref(ds, r).map(Some))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let loss = enc.stay_loss(&mut tape, &store, &items)?;
            sum += tape.value(loss).item() * items.len() as f64;
            count += items.len();
            let grads = tape.backward(loss)?;
            store.accumulate(&tape, &grads)?;
            opt.step(&mut store)?;
        }
        let mean = sum / count as f64;
        log(&format!("epoch={epoch} loss={mean:.6}"));
        losses.push(mean);
    }
    Ok(StayRun {
        checkpoint: Checkpoint {
            stage: Stage::Stay,
            seed: cfg.seed,
            config: cfg.entries(),
            params: store,
        },
        losses,
    })
}
