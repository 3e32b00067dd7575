//! Pairwise cross-modal aggregation: residual cross-modal and self-modal
//! attention over clip features, mean-pooled and scored against each answer
//! by cosine similarity.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};
use crate::features::{VideoQAInstance, N_ANSWERS};
use crate::intervention::CausalGate;
use crate::nn::loss::{cosine_backward, cosine_unchecked};
use crate::nn::{
    load_checkpoint, save_checkpoint, softmax_cross_entropy, AttentionCache, AttentionConfig, Linear,
    MultiHeadAttention, ParamStore, Tensor2,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcmaConfig {
    pub video_dim: usize,
    pub text_dim: usize,
    pub attention: AttentionConfig,
    /// Cosine scores are divided by this before cross-entropy.
    pub temperature: f64,
    /// Adds the five projected answers as extra keys in cross-attention.
    pub answer_conditioning: bool,
    /// Logit gain of the causal gate.
    pub gate_gain: f64,
}

impl Default for PcmaConfig {
    fn default() -> Self {
        Self {
            video_dim: 32,
            text_dim: 32,
            attention: AttentionConfig::default(),
            temperature: 0.1,
            answer_conditioning: false,
            gate_gain: 8.0,
        }
    }
}

impl PcmaConfig {
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = self.attention.field_errors(&format!("{prefix}.attention"));
        if self.video_dim == 0 {
            errs.push(FieldError::new(format!("{prefix}.video_dim"), "must be positive"));
        }
        if self.text_dim == 0 {
            errs.push(FieldError::new(format!("{prefix}.text_dim"), "must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push(FieldError::new(format!("{prefix}.temperature"), "must be positive"));
        }
        if !(self.gate_gain > 0.0 && self.gate_gain.is_finite()) {
            errs.push(FieldError::new(format!("{prefix}.gate_gain"), "must be positive"));
        }
        errs
    }
}

/// One residual block: `h = v + cross(v, kv)`, then `out = h + self(h, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcmaLayer {
    pub cross: MultiHeadAttention,
    pub self_attn: MultiHeadAttention,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    cross: AttentionCache,
    self_attn: AttentionCache,
}

impl LayerCache {
    pub fn self_attention(&self) -> &AttentionCache {
        &self.self_attn
    }
}

impl PcmaLayer {
    pub fn forward(&self, store: &ParamStore, video: &Tensor2, keys: &Tensor2) -> Result<(Tensor2, LayerCache)> {
        let (cross_out, cross) = self.cross.forward(store, video, keys)?;
        let h = video.add(&cross_out)?;
        let (self_out, self_attn) = self.self_attn.forward(store, &h, &h)?;
        let out = h.add(&self_out)?;
        Ok((out, LayerCache { cross, self_attn }))
    }

    /// Returns `(d_video, d_keys)`.
    pub fn backward(&self, store: &mut ParamStore, cache: &LayerCache, d_out: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        let (dq, dkv) = self.self_attn.backward(store, &cache.self_attn, d_out)?;
        let mut d_h = d_out.add(&dq)?;
        d_h.add_assign(&dkv)?;
        let (dv_cross, d_keys) = self.cross.backward(store, &cache.cross, &d_h)?;
        let d_video = d_h.add(&dv_cross)?;
        Ok((d_video, d_keys))
    }
}

/// Output of [`PcmaModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerScores {
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub aggregated_video: Vec<f64>,
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Cache of the video/question encoder.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    video_in: Tensor2,
    key_text: Tensor2,
    layer_inputs: Vec<Tensor2>,
    layers: Vec<LayerCache>,
    n_rows: usize,
}

impl EncodeCache {
    pub fn layer_caches(&self) -> &[LayerCache] {
        &self.layers
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub encode: EncodeCache,
    answers_in: Tensor2,
    answers_proj: Tensor2,
    aggregated: Vec<f64>,
}

/// Gradients w.r.t. the raw inputs of a forward pass.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub video: Tensor2,
    pub question: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PcmaModel {
    pub cfg: PcmaConfig,
    pub params: ParamStore,
    pub video_proj: Linear,
    pub question_proj: Linear,
    pub answer_proj: Linear,
    pub layers: Vec<PcmaLayer>,
    pub gate: CausalGate,
}

impl PcmaModel {
    pub fn new(cfg: PcmaConfig) -> Result<Self> {
        let errs = cfg.field_errors("model");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.attention.seed);
        let mut params = ParamStore::new();
        let d = cfg.attention.model_dim;
        let video_proj = Linear::new(&mut params, "video_proj", cfg.video_dim, d, &mut rng)?;
        let question_proj = Linear::new(&mut params, "question_proj", cfg.text_dim, d, &mut rng)?;
        let answer_proj = Linear::new(&mut params, "answer_proj", cfg.text_dim, d, &mut rng)?;
        let mut layers = Vec::with_capacity(cfg.attention.n_layers);
        for l in 0..cfg.attention.n_layers {
            layers.push(PcmaLayer {
                cross: MultiHeadAttention::new(&mut params, &format!("layer{l}.cross"), &cfg.attention, &mut rng)?,
                self_attn: MultiHeadAttention::new(&mut params, &format!("layer{l}.self"), &cfg.attention, &mut rng)?,
            });
        }
        let gate = CausalGate::new(&mut params, "gate", cfg.video_dim, cfg.text_dim, cfg.gate_gain, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            video_proj,
            question_proj,
            answer_proj,
            layers,
            gate,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.cfg.attention.model_dim
    }

    /// Zeroes every attention output projection, turning each residual
    /// block into the identity.
    pub fn zero_attention_outputs(&mut self) {
        for layer in self.layers.clone() {
            layer.cross.output.zero_out(&mut self.params);
            layer.self_attn.output.zero_out(&mut self.params);
        }
    }

    fn check_inputs(&self, video: &Tensor2, question: &[f64]) -> Result<()> {
        if video.cols() != self.cfg.video_dim {
            return Err(Error::dim("video feature width", self.cfg.video_dim, video.cols()));
        }
        if video.rows() == 0 {
            return Err(Error::dim("clip count", 1, 0));
        }
        if question.len() != self.cfg.text_dim {
            return Err(Error::dim("question width", self.cfg.text_dim, question.len()));
        }
        Ok(())
    }

    fn key_rows(&self, question: &[f64], answers: Option<&[Vec<f64>]>) -> Result<Tensor2> {
        let mut rows = vec![question.to_vec()];
        if self.cfg.answer_conditioning {
            let answers = answers.ok_or_else(|| Error::Invalid("answer-conditioned model needs answers".into()))?;
            rows.extend(answers.iter().cloned());
        }
        Tensor2::from_rows(&rows)
    }

    fn encode_with_keys(&self, video: &Tensor2, key_text: Tensor2) -> Result<(Vec<f64>, EncodeCache)> {
        let keys = if key_text.rows() == 1 {
            self.question_proj.forward(&self.params, &key_text)?
        } else {
            let q = self.question_proj.forward(&self.params, &key_text.select_rows(&[0]))?;
            let a_idx: Vec<usize> = (1..key_text.rows()).collect();
            let a = self.answer_proj.forward(&self.params, &key_text.select_rows(&a_idx))?;
            let mut rows = q.to_rows();
            rows.extend(a.to_rows());
            Tensor2::from_rows(&rows)?
        };
        let mut v = self.video_proj.forward(&self.params, video)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(&self.params, &v, &keys)?;
            layer_inputs.push(v);
            caches.push(cache);
            v = out;
        }
        let agg = v.mean_rows();
        crate::error::check_finite("aggregated video", &agg)?;
        Ok((
            agg,
            EncodeCache {
                video_in: video.clone(),
                key_text,
                layer_inputs,
                layers: caches,
                n_rows: video.rows(),
            },
        ))
    }

    /// Question-conditioned aggregated video representation.
    pub fn encode(
        &self,
        video: &Tensor2,
        question: &[f64],
        answers: Option<&[Vec<f64>]>,
    ) -> Result<(Vec<f64>, EncodeCache)> {
        self.check_inputs(video, question)?;
        let keys = self.key_rows(question, answers)?;
        self.encode_with_keys(video, keys)
    }

    /// Backpropagates `d_agg` through the encoder, accumulating parameter
    /// gradients. Returns gradients of the raw video and question.
    pub fn backward_encode(&mut self, cache: &EncodeCache, d_agg: &[f64]) -> Result<InputGrads> {
        let d = self.model_dim();
        let n = cache.n_rows;
        let mut d_v = Tensor2::zeros(n, d);
        for r in 0..n {
            for (o, g) in d_v.row_mut(r).iter_mut().zip(d_agg) {
                *o = g / n as f64;
            }
        }
        let mut d_keys = Tensor2::zeros(cache.key_text.rows(), d);
        for (layer, lc) in self.layers.clone().iter().zip(&cache.layers).rev() {
            let (dv, dk) = layer.backward(&mut self.params, lc, &d_v)?;
            d_keys.add_assign(&dk)?;
            d_v = dv;
        }
        let d_video = self.video_proj.backward(&mut self.params, &cache.video_in, &d_v)?;
        let q_in = cache.key_text.select_rows(&[0]);
        let dq = self
            .question_proj
            .backward(&mut self.params, &q_in, &d_keys.select_rows(&[0]))?;
        if cache.key_text.rows() > 1 {
            let idx: Vec<usize> = (1..cache.key_text.rows()).collect();
            self.answer_proj
                .backward(&mut self.params, &cache.key_text.select_rows(&idx), &d_keys.select_rows(&idx))?;
        }
        Ok(InputGrads {
            video: d_video,
            question: dq.into_data(),
        })
    }

    /// Scores arbitrary (video, question, answers) parts.
    pub fn forward_parts(
        &self,
        video: &Tensor2,
        question: &[f64],
        answers: &[Vec<f64>],
    ) -> Result<(AnswerScores, ForwardCache)> {
        if answers.len() != N_ANSWERS {
            return Err(Error::dim("answer count", N_ANSWERS, answers.len()));
        }
        for a in answers {
            if a.len() != self.cfg.text_dim {
                return Err(Error::dim("answer width", self.cfg.text_dim, a.len()));
            }
        }
        let (agg, encode) = self.encode(video, question, Some(answers))?;
        let answers_in = Tensor2::from_rows(answers)?;
        let answers_proj = self.answer_proj.forward(&self.params, &answers_in)?;
        let scores: Vec<f64> = answers_proj.iter_rows().map(|a| cosine_unchecked(&agg, a)).collect();
        crate::error::check_finite("answer scores", &scores)?;
        let predicted = argmax(&scores);
        Ok((
            AnswerScores {
                scores,
                predicted,
                aggregated_video: agg.clone(),
            },
            ForwardCache {
                encode,
                answers_in,
                answers_proj,
                aggregated: agg,
            },
        ))
    }

    pub fn forward(&self, instance: &VideoQAInstance) -> Result<(AnswerScores, ForwardCache)> {
        self.forward_parts(&instance.video, &instance.question, &instance.answers)
    }

    /// Scores without keeping the cache.
    pub fn predict(&self, instance: &VideoQAInstance) -> Result<AnswerScores> {
        Ok(self.forward(instance)?.0)
    }

    /// Backpropagates `d_scores` (one entry per answer).
    pub fn backward(&mut self, cache: &ForwardCache, d_scores: &[f64]) -> Result<InputGrads> {
        let d = self.model_dim();
        let mut d_agg = vec![0.0; d];
        let mut d_ans = Tensor2::zeros(N_ANSWERS, d);
        for (j, &g) in d_scores.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let (da, db) = cosine_backward(&cache.aggregated, cache.answers_proj.row(j), g);
            for (o, v) in d_agg.iter_mut().zip(&da) {
                *o += v;
            }
            d_ans.row_mut(j).copy_from_slice(&db);
        }
        self.answer_proj.backward(&mut self.params, &cache.answers_in, &d_ans)?;
        self.backward_encode(&cache.encode, &d_agg)
    }

    /// Attention mass each clip receives in the final self-attention layer,
    /// normalized to a distribution.
    pub fn final_attention_mass(cache: &EncodeCache) -> Vec<f64> {
        match cache.layers.last() {
            Some(lc) => {
                let mass = MultiHeadAttention::key_mass(&lc.self_attn);
                let total: f64 = mass.iter().sum();
                mass.iter().map(|m| m / total).collect()
            }
            None => vec![1.0 / cache.n_rows as f64; cache.n_rows],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).map_err(|e| Error::Invalid(e.to_string()))?;
        save_checkpoint(path, &self.params, cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, cfg) = load_checkpoint(path)?;
        let cfg: PcmaConfig = serde_json::from_value(cfg).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut model = Self::new(cfg)?;
        model.params.load_values(&tensors)?;
        Ok(model)
    }

    /// Layer inputs retained by the encoder, exposed for tests that
    /// recompute individual layers.
    pub fn layer_inputs(cache: &EncodeCache) -> &[Tensor2] {
        &cache.layer_inputs
    }
}

/// Cross-entropy of temperature-scaled cosine scores. Returns the loss and
/// its gradient w.r.t. the raw scores.
pub fn pcma_loss(scores: &AnswerScores, gold: usize, temperature: f64) -> Result<(f64, Vec<f64>)> {
    let logits: Vec<f64> = scores.scores.iter().map(|s| s / temperature).collect();
    let (loss, grad) = softmax_cross_entropy(&logits, gold)?;
    Ok((loss, grad.into_iter().map(|g| g / temperature).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_synthetic, SyntheticSpec};
    use crate::nn::gradcheck::{central_difference_vec, check_params, relative_error};
    use rand::Rng;

    fn small_cfg() -> PcmaConfig {
        PcmaConfig {
            video_dim: 6,
            text_dim: 5,
            attention: AttentionConfig { model_dim: 8, n_heads: 2, n_layers: 2, seed: 4 },
            ..Default::default()
        }
    }

    fn instance(seed: u64) -> VideoQAInstance {
        let spec = SyntheticSpec { seed, n_instances: 1, n_clips: 4, video_dim: 6, text_dim: 5, ..Default::default() };
        generate_synthetic(&spec).unwrap().instances.remove(0)
    }

    #[test]
    fn zero_output_projection_makes_layer_identity() {
        let mut model = PcmaModel::new(small_cfg()).unwrap();
        model.zero_attention_outputs();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = Tensor2::from_vec(3, 8, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let q = Tensor2::from_vec(1, 8, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (out, _) = model.layers[0].forward(&model.params, &v, &q).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn single_clip_shape() {
        let model = PcmaModel::new(small_cfg()).unwrap();
        let v = Tensor2::from_vec(1, 8, vec![0.1; 8]).unwrap();
        let q = Tensor2::from_vec(1, 8, vec![0.2; 8]).unwrap();
        let (out, _) = model.layers[0].forward(&model.params, &v, &q).unwrap();
        assert_eq!(out.shape(), (1, 8));
    }

    #[test]
    fn layer_gradient_wrt_question_matches_finite_differences() {
        let mut model = PcmaModel::new(small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Tensor2::from_vec(3, 8, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = model.layers[0];
        let (out, cache) = layer.forward(&model.params, &v, &Tensor2::row_vector(&q)).unwrap();
        let ones = Tensor2::from_vec(3, 8, vec![1.0; 24]).unwrap();
        let (_, dq) = layer.backward(&mut model.params, &cache, &ones).unwrap();
        assert_eq!(out.shape(), (3, 8));
        assert!(dq.data().iter().any(|g| g.abs() > 1e-6));
        for i in 0..8 {
            let num = central_difference_vec(&mut q, i, 1e-5, &mut |qv| {
                let (o, _) = layer.forward(&model.params, &v, &Tensor2::row_vector(qv)).unwrap();
                o.data().iter().sum()
            });
            assert!(relative_error(dq.data()[i], num) < 1e-4, "coord {i}: {} vs {num}", dq.data()[i]);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for conditioning in [false, true] {
            let mut model = PcmaModel::new(PcmaConfig { answer_conditioning: conditioning, ..small_cfg() }).unwrap();
            let inst = instance(5);
            let (scores, cache) = model.forward(&inst).unwrap();
            let (_, d) = pcma_loss(&scores, inst.gold, 0.1).unwrap();
            model.params.zero_grads();
            model.backward(&cache, &d).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let cfg_t = model.cfg.temperature;
            let frozen = model.clone();
            let mut store = model.params.clone();
            let report = check_params(&mut store, 40, &mut rng, |s| {
                let mut m = frozen.clone();
                m.params = s.clone();
                let (sc, _) = m.forward(&inst).unwrap();
                pcma_loss(&sc, inst.gold, cfg_t).unwrap().0
            });
            assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
        }
    }

    #[test]
    fn identical_answers_tie_to_zero() {
        let model = PcmaModel::new(small_cfg()).unwrap();
        let mut inst = instance(1);
        let a = inst.answers[3].clone();
        inst.answers = vec![a; 5];
        let s = model.predict(&inst).unwrap();
        assert!(s.scores.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(s.predicted, 0);
    }

    #[test]
    fn clip_permutation_leaves_aggregate_unchanged() {
        let model = PcmaModel::new(small_cfg()).unwrap();
        let inst = instance(9);
        let mut permuted = inst.clone();
        permuted.video = inst.video.select_rows(&[2, 0, 3, 1]);
        let a = model.predict(&inst).unwrap();
        let b = model.predict(&permuted).unwrap();
        for (x, y) in a.aggregated_video.iter().zip(&b.aggregated_video) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = PcmaModel::new(small_cfg()).unwrap();
        model.params.round_to_f32();
        let path = dir.path().join("ckpt.json");
        model.save(&path).unwrap();
        let back = PcmaModel::load(&path).unwrap();
        assert_eq!(back.params.values(), model.params.values());
        assert_eq!(back.cfg, model.cfg);
    }

    #[test]
    fn loss_closed_forms() {
        let even = AnswerScores { scores: vec![0.3; 5], predicted: 0, aggregated_video: vec![] };
        assert!((pcma_loss(&even, 2, 0.1).unwrap().0 - 5f64.ln()).abs() < 1e-12);
        let gap = AnswerScores { scores: vec![1.0, 0.0, 0.0, 0.0, 0.0], predicted: 0, aggregated_video: vec![] };
        // ln(1 + 4 e^{-10})
        let l = pcma_loss(&gap, 0, 0.1).unwrap().0;
        assert!((l - (1.0 + 4.0 * (-10f64).exp()).ln()).abs() < 1e-12);
        assert!(l < 1e-3);
        assert!(pcma_loss(&gap, 7, 0.1).is_err());
    }

    #[test]
    fn dim_mismatch_rejected() {
        let model = PcmaModel::new(small_cfg()).unwrap();
        let mut inst = instance(2);
        inst.question.push(0.0);
        assert!(matches!(model.forward(&inst), Err(Error::DimMismatch { .. })));
    }
}
