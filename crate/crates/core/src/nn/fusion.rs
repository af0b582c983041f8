use super::{Initializer, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Single-head self-attention over stacked modality tokens, followed by a
/// token-wise residual, LayerNorm over features and max pooling over tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionBlock {
    pub name: String,
    pub dim: usize,
}

/// Output of a fusion pass with the attention matrix kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub pooled: Var,
    /// `[n, n]`, row-stochastic
    pub attention: Var,
}

impl FusionBlock {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        FusionBlock {
            name: name.into(),
            dim,
        }
    }

    fn pname(&self, p: &str) -> String {
        format!("{}.{p}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, init: &Initializer) {
        for p in ["w_q", "w_k", "w_v"] {
            init.glorot(store, &self.pname(p), self.dim, self.dim);
        }
        init.constant(store, &self.pname("ln_gamma"), self.dim, 1.0);
        init.constant(store, &self.pname("ln_beta"), self.dim, 0.0);
    }

    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
    ) -> Result<FusionOutput> {
        let shape = tape.shape(tokens).to_vec();
        match shape.as_slice() {
            [n, d] if *n >= 1 && *d == self.dim => {}
            _ => {
                return Err(Error::shape(
                    "fusion",
                    format!("`{}` expects [n, {}], got {shape:?}", self.name, self.dim),
                ))
            }
        }
        let wq = tape.param(store, &self.pname("w_q"))?;
        let wk = tape.param(store, &self.pname("w_k"))?;
        let wv = tape.param(store, &self.pname("w_v"))?;
        let gamma = tape.param(store, &self.pname("ln_gamma"))?;
        let beta = tape.param(store, &self.pname("ln_beta"))?;

        // row t of q is W_Q · token_t
        let q = tape.matmul_nt(tokens, wq)?;
        let k = tape.matmul_nt(tokens, wk)?;
        let v = tape.matmul_nt(tokens, wv)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt())?;
        let attention = tape.softmax_last_axis(scores)?;
        let attended = tape.matmul(attention, v)?;
        let resid = tape.add(tokens, attended)?;
        let normed = tape.layer_norm(resid, gamma, beta, LAYER_NORM_EPS)?;
        let pooled = tape.max_pool_axis(normed, 0)?;
        Ok(FusionOutput { pooled, attention })
    }

    /// `[n, dim]` tokens → `[dim]` fused vector.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<Var> {
        Ok(self.forward_with_attention(tape, store, tokens)?.pooled)
    }

    /// Stacks `[dim]` token vectors and fuses them.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, tokens: &[Var]) -> Result<Var> {
        let stacked = tape.stack(tokens)?;
        self.forward(tape, store, stacked)
    }
}
