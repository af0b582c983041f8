use super::{Initializer, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Affine map `W x + b` with `W: [out, in]`, stored as `<name>.weight`, `<name>.bias`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, init: &Initializer) {
        init.glorot(store, &self.weight_name(), self.out_dim, self.in_dim);
        init.constant(store, &self.bias_name(), self.out_dim, 0.0);
    }

    /// `W x + b` for `x: [in]` or a batch `x: [B, in]`.
    pub fn affine(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight_name())?;
        let b = tape.param(store, &self.bias_name())?;
        let shape = tape.shape(x).to_vec();
        match shape.as_slice() {
            [n] if *n == self.in_dim => {
                let x2 = tape.reshape(x, &[1, *n])?;
                let y = tape.matmul_nt(x2, w)?;
                let y = tape.reshape(y, &[self.out_dim])?;
                tape.add(y, b)
            }
            [_, n] if *n == self.in_dim => {
                let y = tape.matmul_nt(x, w)?;
                tape.add(y, b)
            }
            _ => Err(Error::shape(
                "linear",
                format!("`{}` expects [.., {}], got {shape:?}", self.name, self.in_dim),
            )),
        }
    }

    /// `ReLU(W x + b)`
    pub fn mlp_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.affine(tape, store, x)?;
        tape.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_params, Tensor};

    #[test]
    fn init_shapes_and_zero_bias() {
        let mut store = ParamStore::new();
        let l = LinearLayer::new("l", 4, 3);
        l.init(&mut store, &Initializer::new(0));
        assert_eq!(store.get("l.weight").unwrap().shape(), &[3, 4]);
        assert_eq!(store.get("l.bias").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_and_identity_maps() {
        let l = LinearLayer::new("l", 2, 2);
        let mut store = ParamStore::new();
        store.insert("l.weight", Tensor::new(&[2, 2], vec![0.0; 4], true).unwrap());
        store.insert("l.bias", Tensor::new(&[2], vec![0.0; 2], true).unwrap());
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.3, -0.7]).unwrap());
        let y = l.mlp_forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);

        store.get_mut("l.weight").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 2.0]).unwrap());
        let y = l.mlp_forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);

        let bad = t.constant(Tensor::vector(vec![1.0; 3]).unwrap());
        assert!(matches!(
            l.mlp_forward(&mut t, &store, bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mlp_gradient_check() {
        let l = LinearLayer::new("l", 5, 3);
        let mut store = ParamStore::new();
        l.init(&mut store, &Initializer::new(2));
        // nonzero bias keeps ReLU away from the kink
        store.get_mut("l.bias").unwrap().data_mut().copy_from_slice(&[0.3, -0.2, 0.5]);
        let x = Tensor::matrix(2, 5, vec![0.1, -0.4, 0.9, 0.2, -0.6, 0.5, 0.3, -0.8, 0.7, 0.05]).unwrap();
        let report = grad_check_params(
            &store,
            |t, s| {
                let xv = t.constant(x.clone());
                let y = l.mlp_forward(t, s, xv)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            1e-5,
            1e-4,
            None,
            0,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
