use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::softmax_in_place;
use super::{Linear, ParamStore, Tensor2};
use crate::error::{Error, FieldError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seed: u64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            n_heads: 4,
            n_layers: 2,
            seed: 0,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.model_dim == 0 {
            errs.push(FieldError::new(format!("{prefix}.model_dim"), "must be positive"));
        }
        if self.n_heads == 0 {
            errs.push(FieldError::new(format!("{prefix}.n_heads"), "must be positive"));
        } else if self.model_dim % self.n_heads != 0 {
            errs.push(FieldError::new(
                format!("{prefix}.n_heads"),
                format!("model_dim {} is not divisible by {}", self.model_dim, self.n_heads),
            ));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.field_errors("attention");
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Scaled dot-product attention for one head.
///
/// `score_shift` is added to every pre-softmax score; the result does not
/// depend on it. Returns `(output, weights)` with weights of shape
/// `queries.rows × keys.rows`.
pub fn attend(
    queries: &Tensor2,
    keys: &Tensor2,
    values: &Tensor2,
    score_shift: f64,
) -> Result<(Tensor2, Tensor2)> {
    if keys.rows() != values.rows() {
        return Err(Error::dim("attention key/value rows", keys.rows(), values.rows()));
    }
    let scale = 1.0 / (queries.cols() as f64).sqrt();
    let mut weights = queries.matmul_t(keys)?;
    for r in 0..weights.rows() {
        let row = weights.row_mut(r);
        row.iter_mut().for_each(|s| *s = *s * scale + score_shift);
        softmax_in_place(row);
    }
    let out = weights.matmul(values)?;
    Ok((out, weights))
}

/// Multi-head attention with input/output projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub head_dim: usize,
}

/// Intermediate values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    queries_in: Tensor2,
    kv_in: Tensor2,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    /// Per-head attention weights, `n_queries × n_keys`.
    pub weights: Vec<Tensor2>,
    concat: Tensor2,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            key: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            output: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
        })
    }

    pub fn attach(store: &ParamStore, name: &str, n_heads: usize) -> Result<Self> {
        let query = Linear::attach(store, &format!("{name}.q"))?;
        let model_dim = query.out_dim;
        Ok(Self {
            query,
            key: Linear::attach(store, &format!("{name}.k"))?,
            value: Linear::attach(store, &format!("{name}.v"))?,
            output: Linear::attach(store, &format!("{name}.o"))?,
            n_heads,
            head_dim: model_dim / n_heads,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        queries: &Tensor2,
        keys_values: &Tensor2,
    ) -> Result<(Tensor2, AttentionCache)> {
        let d = self.model_dim();
        if queries.cols() != d {
            return Err(Error::dim("attention query width", d, queries.cols()));
        }
        if keys_values.cols() != d {
            return Err(Error::dim("attention key/value width", d, keys_values.cols()));
        }
        if keys_values.rows() == 0 {
            return Err(Error::dim("attention key count", 1, 0));
        }
        let q = self.query.forward(store, queries)?;
        let k = self.key.forward(store, keys_values)?;
        let v = self.value.forward(store, keys_values)?;
        let mut concat = Tensor2::zeros(queries.rows(), d);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let off = h * self.head_dim;
            let (out_h, w_h) = attend(
                &q.col_slice(off, self.head_dim),
                &k.col_slice(off, self.head_dim),
                &v.col_slice(off, self.head_dim),
                0.0,
            )?;
            concat.add_col_slice(off, &out_h);
            weights.push(w_h);
        }
        let out = self.output.forward(store, &concat)?;
        out.check_finite("attention output")?;
        Ok((
            out,
            AttentionCache {
                queries_in: queries.clone(),
                kv_in: keys_values.clone(),
                q,
                k,
                v,
                weights,
                concat,
            },
        ))
    }

    /// Returns `(dL/dqueries, dL/dkeys_values)`. For self-attention the two
    /// must be summed by the caller.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &AttentionCache,
        d_out: &Tensor2,
    ) -> Result<(Tensor2, Tensor2)> {
        let d = self.model_dim();
        let d_concat = self.output.backward(store, &cache.concat, d_out)?;
        let n = cache.q.rows();
        let m = cache.k.rows();
        let mut dq = Tensor2::zeros(n, d);
        let mut dk = Tensor2::zeros(m, d);
        let mut dv = Tensor2::zeros(m, d);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        for h in 0..self.n_heads {
            let off = h * self.head_dim;
            let a = &cache.weights[h];
            let q_h = cache.q.col_slice(off, self.head_dim);
            let k_h = cache.k.col_slice(off, self.head_dim);
            let v_h = cache.v.col_slice(off, self.head_dim);
            let d_out_h = d_concat.col_slice(off, self.head_dim);

            let d_a = d_out_h.matmul_t(&v_h)?;
            dv.add_col_slice(off, &a.t_matmul(&d_out_h)?);

            // softmax Jacobian, row by row
            let mut d_s = Tensor2::zeros(n, m);
            for r in 0..n {
                let ar = a.row(r);
                let gr = d_a.row(r);
                let inner: f64 = ar.iter().zip(gr).map(|(p, g)| p * g).sum();
                for ((s, p), g) in d_s.row_mut(r).iter_mut().zip(ar).zip(gr) {
                    *s = p * (g - inner) * scale;
                }
            }
            dq.add_col_slice(off, &d_s.matmul(&k_h)?);
            dk.add_col_slice(off, &d_s.t_matmul(&q_h)?);
        }
        let d_queries = self.query.backward(store, &cache.queries_in, &dq)?;
        let mut d_kv = self.key.backward(store, &cache.kv_in, &dk)?;
        d_kv.add_assign(&self.value.backward(store, &cache.kv_in, &dv)?)?;
        Ok((d_queries, d_kv))
    }

    /// Attention mass received by each key row, summed over heads and
    /// queries.
    pub fn key_mass(cache: &AttentionCache) -> Vec<f64> {
        let m = cache.k.rows();
        let mut mass = vec![0.0; m];
        for w in &cache.weights {
            for row in w.iter_rows() {
                for (acc, v) in mass.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        mass
    }
}
