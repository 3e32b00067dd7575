use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{top_s, Provenance, SamplerOutput};
use crate::error::{Error, FieldError, Result};
use crate::features::VideoQAInstance;
use crate::nn::{
    dot, kl_divergence, softmax, Adam, AdamConfig, AttentionConfig, Linear, MultiHeadAttention, ParamStore, Tensor2,
};
use crate::pcma::{pcma_loss, LayerCache, PcmaLayer, PcmaModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct S3StudentConfig {
    pub frame_dim: usize,
    pub text_dim: usize,
    pub attention: AttentionConfig,
    /// Frames kept by top-S selection.
    #[serde(rename = "S")]
    pub select: usize,
}

impl Default for S3StudentConfig {
    fn default() -> Self {
        Self {
            frame_dim: 32,
            text_dim: 32,
            attention: AttentionConfig {
                model_dim: 32,
                n_heads: 2,
                n_layers: 1,
                seed: 0,
            },
            select: 8,
        }
    }
}

impl S3StudentConfig {
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = self.attention.field_errors(&format!("{prefix}.attention"));
        if self.select == 0 {
            errs.push(FieldError::new(format!("{prefix}.S"), "must be positive"));
        }
        if self.frame_dim == 0 || self.text_dim == 0 {
            errs.push(FieldError::new(format!("{prefix}.frame_dim"), "feature widths must be positive"));
        }
        errs
    }
}

/// Frame scorer: stacked `v + cross(v, q)` layers, a linear read-out and a
/// softmax over frames.
///
/// A single question key makes the cross-attention output identical for
/// every frame, which the softmax would cancel. Each layer therefore also
/// has the self-attention sublayer of [`PcmaLayer`].
#[derive(Debug, Clone)]
pub struct S3Student {
    pub cfg: S3StudentConfig,
    pub params: ParamStore,
    frame_proj: Linear,
    question_proj: Linear,
    layers: Vec<PcmaLayer>,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct StudentCache {
    frames_in: Tensor2,
    question_in: Tensor2,
    caches: Vec<LayerCache>,
    hidden: Tensor2,
    pub probs: Vec<f64>,
}

impl S3Student {
    pub fn new(cfg: S3StudentConfig) -> Result<Self> {
        let errs = cfg.field_errors("s3_student");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.attention.seed);
        let mut params = ParamStore::new();
        let d = cfg.attention.model_dim;
        let frame_proj = Linear::new(&mut params, "frame_proj", cfg.frame_dim, d, &mut rng)?;
        let question_proj = Linear::new(&mut params, "question_proj", cfg.text_dim, d, &mut rng)?;
        let layers = (0..cfg.attention.n_layers)
            .map(|l| {
                Ok(PcmaLayer {
                    cross: MultiHeadAttention::new(&mut params, &format!("layer{l}.cross"), &cfg.attention, &mut rng)?,
                    self_attn: MultiHeadAttention::new(&mut params, &format!("layer{l}.self"), &cfg.attention, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut params, "head", d, 1, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            frame_proj,
            question_proj,
            layers,
            head,
        })
    }

    /// Zeroes the read-out, making the output uniform.
    pub fn zero_head(&mut self) {
        self.head.zero_out(&mut self.params);
    }

    pub fn forward(&self, frames: &Tensor2, question: &[f64]) -> Result<(Vec<f64>, StudentCache)> {
        if frames.rows() == 0 {
            return Err(Error::dim("student frame count", 1, 0));
        }
        let question_in = Tensor2::row_vector(question);
        let q = self.question_proj.forward(&self.params, &question_in)?;
        let mut v = self.frame_proj.forward(&self.params, frames)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(&self.params, &v, &q)?;
            v = out;
            caches.push(cache);
        }
        let logits = self.head.forward(&self.params, &v)?;
        let probs = softmax(logits.data());
        crate::error::check_finite("student probabilities", &probs)?;
        Ok((
            probs.clone(),
            StudentCache {
                frames_in: frames.clone(),
                question_in,
                caches,
                hidden: v,
                probs,
            },
        ))
    }

    /// Backpropagates a gradient w.r.t. the pre-softmax logits.
    pub fn backward_logits(&mut self, cache: &StudentCache, d_logits: &[f64]) -> Result<()> {
        let d = Tensor2::from_vec(d_logits.len(), 1, d_logits.to_vec())?;
        let mut d_v = self.head.backward(&mut self.params, &cache.hidden, &d)?;
        let mut d_q = Tensor2::zeros(1, self.cfg.attention.model_dim);
        for (layer, lc) in self.layers.clone().iter().zip(&cache.caches).rev() {
            let (dv, dk) = layer.backward(&mut self.params, lc, &d_v)?;
            d_v = dv;
            d_q.add_assign(&dk)?;
        }
        self.frame_proj.backward(&mut self.params, &cache.frames_in, &d_v)?;
        self.question_proj.backward(&mut self.params, &cache.question_in, &d_q)?;
        Ok(())
    }
}

/// Frame probabilities and the top-`S` frames (lowest index on ties).
pub fn s3_student_probs(student: &S3Student, video: &Tensor2, question: &[f64]) -> Result<SamplerOutput> {
    if video.cols() != student.cfg.frame_dim {
        return Err(Error::dim("student frame width", student.cfg.frame_dim, video.cols()));
    }
    if question.len() != student.cfg.text_dim {
        return Err(Error::dim("student question width", student.cfg.text_dim, question.len()));
    }
    let (probs, _) = student.forward(video, question)?;
    let indices = top_s(&probs, student.cfg.select.min(probs.len()));
    Ok(SamplerOutput {
        provenance: vec![Provenance::Policy; indices.len()],
        indices,
        probs: Some(probs),
        with_replacement: false,
    })
}

/// `task_loss + λ·KL(teacher ‖ student)`.
pub fn s3_student_loss(student: &[f64], teacher: &[f64], task_loss: f64, lambda: f64) -> Result<f64> {
    let kl = kl_divergence(teacher, student)?;
    Ok(if lambda == 0.0 { task_loss } else { task_loss + lambda * kl })
}

/// The full-frame backbone's final self-attention mass per frame.
pub fn teacher_distribution(backbone: &PcmaModel, instance: &VideoQAInstance) -> Result<Vec<f64>> {
    let (_, cache) = backbone.encode(&instance.video, &instance.question, Some(&instance.answers))?;
    Ok(PcmaModel::final_attention_mass(&cache))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentReport {
    /// `(task, kl)` per step.
    pub curve: Vec<(f64, f64)>,
}

/// Trains the student against `backbone`, which stays frozen.
///
/// The task loss is the backbone's answer loss on the probability-weighted
/// video `n · p_i · v_i`, so it is differentiable in the student's output.
pub fn train_student<R: Rng + ?Sized>(
    student: &mut S3Student,
    backbone: &PcmaModel,
    data: &[VideoQAInstance],
    steps: usize,
    lambda: f64,
    adam: AdamConfig,
    rng: &mut R,
) -> Result<StudentReport> {
    if data.is_empty() {
        return Err(Error::Invalid("student training needs data".into()));
    }
    let mut opt = Adam::new(adam, &student.params);
    let mut scratch = backbone.clone();
    let mut curve = Vec::with_capacity(steps);
    let tau = backbone.cfg.temperature;
    for step in 0..steps {
        let x = &data[rng.random_range(0..data.len())];
        let teacher = teacher_distribution(backbone, x)?;
        let (probs, cache) = student.forward(&x.video, &x.question)?;
        let n = probs.len() as f64;
        let mut weighted = x.video.clone();
        for (r, p) in probs.iter().enumerate() {
            weighted.row_mut(r).iter_mut().for_each(|v| *v *= n * p);
        }
        let (scores, bc) = scratch.forward_parts(&weighted, &x.question, &x.answers)?;
        let (task, d_scores) = pcma_loss(&scores, x.gold, tau)?;
        let d_weighted = scratch.backward(&bc, &d_scores)?.video;
        let d_probs: Vec<f64> = (0..probs.len()).map(|r| n * dot(d_weighted.row(r), x.video.row(r))).collect();
        let inner = dot(&probs, &d_probs);
        let d_logits: Vec<f64> = probs
            .iter()
            .zip(&d_probs)
            .zip(&teacher)
            .map(|((s, dp), t)| s * (dp - inner) + lambda * (s - t))
            .collect();
        let kl = kl_divergence(&teacher, &probs)?;
        if !(task.is_finite() && kl.is_finite()) {
            return Err(Error::Diverged { step });
        }
        student.params.zero_grads();
        student.backward_logits(&cache, &d_logits)?;
        opt.step(&mut student.params);
        curve.push((task, kl));
    }
    Ok(StudentReport { curve })
}
