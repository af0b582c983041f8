use super::{Initializer, LinearLayer, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const GATES: [&str; 4] = ["i", "f", "o", "c"];

/// LSTM weights: per gate `w_*: [hidden, input]`, `u_*: [hidden, hidden]`, `b_*: [hidden]`.
/// `input_dim == 0` drops the input projections (the decoder runs on zero inputs).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub name: String,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Final state of a recurrence over a batch.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmParams {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            name: name.into(),
            input_dim,
            hidden,
        }
    }

    fn pname(&self, kind: &str, gate: &str) -> String {
        format!("{}.{kind}_{gate}", self.name)
    }

    /// Glorot weights, zero biases except the forget gate at 1.0.
    pub fn init(&self, store: &mut ParamStore, init: &Initializer) {
        for g in GATES {
            if self.input_dim > 0 {
                init.glorot(store, &self.pname("w", g), self.hidden, self.input_dim);
            }
            init.glorot(store, &self.pname("u", g), self.hidden, self.hidden);
            let bias = if g == "f" { 1.0 } else { 0.0 };
            init.constant(store, &self.pname("b", g), self.hidden, bias);
        }
    }

    /// One step over a batch. `x: [B, input]` (None for zero input), `h, c: [B, hidden]`.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Option<Var>,
        state: LstmState,
    ) -> Result<LstmState> {
        let gate = |tape: &mut Tape, g: &str| -> Result<Var> {
            let u = tape.param(store, &self.pname("u", g))?;
            let b = tape.param(store, &self.pname("b", g))?;
            let mut pre = tape.matmul_nt(state.h, u)?;
            if let (Some(x), true) = (x, self.input_dim > 0) {
                let w = tape.param(store, &self.pname("w", g))?;
                let wx = tape.matmul_nt(x, w)?;
                pre = tape.add(wx, pre)?;
            }
            tape.add(pre, b)
        };
        let i = gate(tape, "i")?;
        let f = gate(tape, "f")?;
        let o = gate(tape, "o")?;
        let c_hat = gate(tape, "c")?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let o = tape.sigmoid(o)?;
        let c_hat = tape.tanh(c_hat)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, c_hat)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Runs the recurrence from zero states over `steps` (each `[B, input]`).
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, steps: &[Var]) -> Result<LstmState> {
        let Some(&first) = steps.first() else {
            return Err(Error::shape("lstm_encode", "sequence has no steps"));
        };
        let shape = tape.shape(first).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::shape(
                "lstm_encode",
                format!("`{}` expects [B, {}], got {shape:?}", self.name, self.input_dim),
            ));
        }
        let batch = shape[0];
        let h = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut state = LstmState { h, c };
        for &x in steps {
            state = self.step(tape, store, Some(x), state)?;
        }
        Ok(state)
    }

    /// Encodes one `[T, input]` sequence; returns `(h_T, c_T)` as `[hidden]` vectors.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &Tensor,
    ) -> Result<(Var, Var)> {
        let steps = sequence_steps(tape, &[seq], self.input_dim)?;
        let st = self.run(tape, store, &steps)?;
        let h = tape.reshape(st.h, &[self.hidden])?;
        let c = tape.reshape(st.c, &[self.hidden])?;
        Ok((h, c))
    }
}

/// Splits a batch of `[T, d]` sequences into `T` step constants of shape `[B, d]`.
pub fn sequence_steps(tape: &mut Tape, seqs: &[&Tensor], dim: usize) -> Result<Vec<Var>> {
    let Some(first) = seqs.first() else {
        return Err(Error::EmptyBatch);
    };
    let steps = first.shape().first().copied().unwrap_or(0);
    for s in seqs {
        if s.shape() != [steps, dim] {
            return Err(Error::shape(
                "sequence_steps",
                format!("expected [{steps}, {dim}], got {:?}", s.shape()),
            ));
        }
    }
    if steps == 0 {
        return Err(Error::shape("sequence_steps", "empty sequence"));
    }
    let b = seqs.len();
    Ok((0..steps)
        .map(|t| {
            let mut data = Vec::with_capacity(b * dim);
            for s in seqs {
                data.extend_from_slice(s.row(t));
            }
            tape.constant(Tensor::from_parts(vec![b, dim], data))
        })
        .collect())
}

/// Decoder: `h0 = b`, `c0 = tanh(W_c0 b + b_c0)`, zero inputs, per-step output `W_out h_t + b_out`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmDecoder {
    pub lstm: LstmParams,
    pub c0: LinearLayer,
    pub out: LinearLayer,
}

impl LstmDecoder {
    pub fn new(name: &str, hidden: usize, out_dim: usize) -> Self {
        LstmDecoder {
            lstm: LstmParams::new(format!("{name}.lstm"), 0, hidden),
            c0: LinearLayer::new(format!("{name}.c0"), hidden, hidden),
            out: LinearLayer::new(format!("{name}.out"), hidden, out_dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &Initializer) {
        self.lstm.init(store, init);
        self.c0.init(store, init);
        self.out.init(store, init);
    }

    /// `b: [B, hidden]` → `steps` outputs of shape `[B, out]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        b: Var,
        steps: usize,
    ) -> Result<Vec<Var>> {
        if steps == 0 {
            return Err(Error::shape("lstm_decode", "steps must be >= 1"));
        }
        let c0 = self.c0.affine(tape, store, b)?;
        let c0 = tape.tanh(c0)?;
        let mut state = LstmState { h: b, c: c0 };
        let mut outs = Vec::with_capacity(steps);
        for _ in 0..steps {
            state = self.lstm.step(tape, store, None, state)?;
            outs.push(self.out.affine(tape, store, state.h)?);
        }
        Ok(outs)
    }
}
