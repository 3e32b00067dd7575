use rand::Rng;

use super::{Init, ParamId, ParamStore, Tensor2};
use crate::error::{Error, Result};

/// Affine map `y = x W + b` applied to every row of `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.init(
            format!("{name}.weight"),
            in_dim,
            out_dim,
            Init::Uniform { fan_in: in_dim },
            rng,
        )?;
        let bias = store.init(
            format!("{name}.bias"),
            1,
            out_dim,
            Init::Uniform { fan_in: in_dim },
            rng,
        )?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Re-attaches a layer to parameters already present in `store`.
    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let weight = store
            .id(&format!("{name}.weight"))
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}.weight")))?;
        let bias = store
            .id(&format!("{name}.bias"))
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}.bias")))?;
        let (in_dim, out_dim) = store.value(weight).shape();
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.in_dim {
            return Err(Error::dim("linear input width", self.in_dim, x.cols()));
        }
        let mut y = x.matmul(store.value(self.weight))?;
        y.add_row_broadcast(store.value(self.bias).data())?;
        Ok(y)
    }

    /// Single-vector convenience wrapper around [`Linear::forward`].
    pub fn forward_vec(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(store, &Tensor2::row_vector(x))?.into_data())
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
        let dw = x.t_matmul(dy)?;
        store.grad_mut(self.weight).add_assign(&dw)?;
        let db = dy.sum_rows();
        for (g, d) in store.grad_mut(self.bias).data_mut().iter_mut().zip(&db) {
            *g += d;
        }
        dy.matmul_t(store.value(self.weight))
    }

    /// Backward pass that touches only the input gradient.
    pub fn backward_input(&self, store: &ParamStore, dy: &Tensor2) -> Result<Tensor2> {
        dy.matmul_t(store.value(self.weight))
    }

    pub fn zero_out(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).fill(0.0);
        store.value_mut(self.bias).fill(0.0);
    }
}
