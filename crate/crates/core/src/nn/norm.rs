use rand::Rng;

use super::{Init, ParamId, ParamStore, Tensor2};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Tensor2,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            gain: store.init(format!("{name}.gain"), 1, dim, Init::Ones, rng)?,
            shift: store.init(format!("{name}.shift"), 1, dim, Init::Zeros, rng)?,
            dim,
        })
    }

    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let gain = store
            .id(&format!("{name}.gain"))
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}.gain")))?;
        let shift = store
            .id(&format!("{name}.shift"))
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}.shift")))?;
        Ok(Self {
            gain,
            shift,
            dim: store.value(gain).cols(),
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<(Tensor2, LayerNormCache)> {
        if x.cols() != self.dim {
            return Err(Error::dim("layer norm width", self.dim, x.cols()));
        }
        let gain = store.value(self.gain).data();
        let shift = store.value(self.shift).data();
        let mut normalized = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        let n = self.dim as f64;
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, (nv, ov)) in normalized
                .row_mut(r)
                .iter_mut()
                .zip(out.row_mut(r).iter_mut())
                .enumerate()
            {
                *nv = (row[c] - mean) * is;
                *ov = *nv * gain[c] + shift[c];
            }
        }
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor2,
    ) -> Result<Tensor2> {
        let n = self.dim as f64;
        let gain = store.value(self.gain).data().to_vec();
        let mut dx = Tensor2::zeros(dy.rows(), dy.cols());
        let mut d_gain = vec![0.0; self.dim];
        let mut d_shift = vec![0.0; self.dim];
        for r in 0..dy.rows() {
            let xh = cache.normalized.row(r);
            let g = dy.row(r);
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for c in 0..self.dim {
                d_gain[c] += g[c] * xh[c];
                d_shift[c] += g[c];
                let dxh = g[c] * gain[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[c];
            }
            let is = cache.inv_std[r];
            for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                let dxh = g[c] * gain[c];
                *out = is / n * (n * dxh - sum_dxh - xh[c] * sum_dxh_xh);
            }
        }
        for (a, b) in store.grad_mut(self.gain).data_mut().iter_mut().zip(&d_gain) {
            *a += b;
        }
        for (a, b) in store.grad_mut(self.shift).data_mut().iter_mut().zip(&d_shift) {
            *a += b;
        }
        Ok(dx)
    }
}

pub fn relu(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient of ReLU given its pre-activation input.
pub fn relu_backward(pre: &Tensor2, dy: &Tensor2) -> Tensor2 {
    let mut out = dy.clone();
    for (g, p) in out.data_mut().iter_mut().zip(pre.data()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
