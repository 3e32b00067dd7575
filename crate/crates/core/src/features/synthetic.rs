use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{MomentWindow, QuestionType, SaliencyAnnotation, VideoQAInstance, N_ANSWERS};
use crate::error::{Error, FieldError, Result};
use crate::nn::Tensor2;

/// Parameters of the planted-signal generator.
///
/// Every video gets a random background scene shared by all of its clips.
/// A contiguous run of `ceil(causal_fraction * n_clips)` clips additionally
/// carries the gold answer mapped into video space (`signal_strength`) and a
/// question signature (`question_strength`). `leak_strength` adds the raw
/// gold answer vector to every clip, which requires `video_dim == text_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Seed of the answer and question maps into video space. Datasets that
    /// share it share the planted task, so one can train on a set and test on
    /// another.
    pub map_seed: u64,
    pub n_instances: usize,
    pub n_clips: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    pub causal_fraction: f64,
    pub leak_strength: f64,
    pub noise_std: f64,
    pub signal_strength: f64,
    pub question_strength: f64,
    pub background_strength: f64,
    /// Frames per clip in the emitted saliency annotations.
    pub frames_per_clip: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            map_seed: 0,
            n_instances: 500,
            n_clips: 16,
            video_dim: 32,
            text_dim: 32,
            causal_fraction: 0.25,
            leak_strength: 0.0,
            noise_std: 0.1,
            signal_strength: 1.0,
            question_strength: 0.5,
            background_strength: 0.5,
            frames_per_clip: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut bad = |f: &str, m: &str| errs.push(FieldError::new(format!("{prefix}.{f}"), m));
        if self.n_clips == 0 {
            bad("n_clips", "must be positive");
        }
        if self.video_dim == 0 {
            bad("video_dim", "must be positive");
        }
        if self.text_dim == 0 {
            bad("text_dim", "must be positive");
        }
        if !(self.causal_fraction > 0.0 && self.causal_fraction <= 1.0) {
            bad("causal_fraction", "must lie in (0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            bad("noise_std", "must be finite and non-negative");
        }
        if !self.leak_strength.is_finite() {
            bad("leak_strength", "must be finite");
        }
        if self.leak_strength != 0.0 && self.video_dim != self.text_dim {
            bad("leak_strength", "answer leakage needs video_dim == text_dim");
        }
        if self.frames_per_clip == 0 {
            bad("frames_per_clip", "must be positive");
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("question_strength", self.question_strength),
            ("background_strength", self.background_strength),
        ] {
            if !v.is_finite() {
                bad(name, "must be finite");
            }
        }
        errs
    }

    pub fn n_causal(&self) -> usize {
        ((self.causal_fraction * self.n_clips as f64).ceil() as usize).clamp(1, self.n_clips)
    }
}

/// Generator output. `causal_masks` is ground truth for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub instances: Vec<VideoQAInstance>,
    pub saliency: Vec<SaliencyAnnotation>,
    pub causal_masks: Vec<Vec<bool>>,
}

/// Signed coordinate permutation `text -> video` without fixed points, so
/// `aᵀ M a` has zero mean for isotropic `a` when the dims agree.
struct SignedShift {
    cols: Vec<usize>,
    signs: Vec<f64>,
}

impl SignedShift {
    fn new(video_dim: usize, text_dim: usize, shift: usize, rng: &mut ChaCha8Rng) -> Self {
        let shift = shift.max(1);
        Self {
            cols: (0..video_dim).map(|r| (r + shift) % text_dim).collect(),
            signs: (0..video_dim)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect(),
        }
    }

    fn apply(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += scale * self.signs[r] * x[self.cols[r]];
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[inline]
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let errs = spec.field_errors("synthetic");
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut map_rng = ChaCha8Rng::seed_from_u64(spec.map_seed);
    let answer_map = SignedShift::new(spec.video_dim, spec.text_dim, spec.text_dim / 2, &mut map_rng);
    let question_map = SignedShift::new(spec.video_dim, spec.text_dim, spec.text_dim / 3 + 1, &mut map_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_causal = spec.n_causal();
    let fpc = spec.frames_per_clip;

    let mut instances = Vec::with_capacity(spec.n_instances);
    let mut saliency = Vec::with_capacity(spec.n_instances);
    let mut masks = Vec::with_capacity(spec.n_instances);

    for idx in 0..spec.n_instances {
        let answers: Vec<Vec<f64>> = (0..N_ANSWERS).map(|_| unit_vector(&mut rng, spec.text_dim)).collect();
        let gold = rng.random_range(0..N_ANSWERS);
        let qtype = QuestionType::ALL[rng.random_range(0..QuestionType::ALL.len())];
        let question = unit_vector(&mut rng, spec.text_dim);
        let background: Vec<f64> = unit_vector(&mut rng, spec.video_dim)
            .into_iter()
            .map(|v| v * spec.background_strength)
            .collect();
        let start = rng.random_range(0..=spec.n_clips - n_causal);
        let mask: Vec<bool> = (0..spec.n_clips)
            .map(|c| c >= start && c < start + n_causal)
            .collect();

        let mut video = Tensor2::zeros(spec.n_clips, spec.video_dim);
        for (c, &causal) in mask.iter().enumerate() {
            let row = video.row_mut(c);
            row.copy_from_slice(&background);
            if causal {
                answer_map.apply(&answers[gold], spec.signal_strength, row);
                question_map.apply(&question, spec.question_strength, row);
            }
            if spec.leak_strength != 0.0 {
                for (o, a) in row.iter_mut().zip(&answers[gold]) {
                    *o += spec.leak_strength * a;
                }
            }
            for o in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *o = f32_exact(*o + spec.noise_std * z);
            }
        }

        let n_frames = spec.n_clips * fpc;
        let frame_scores: Vec<f64> = (0..n_frames)
            .map(|f| {
                let u: f64 = rng.random_range(0.0..0.4);
                f32_exact(if mask[f / fpc] { 0.6 + u } else { u })
            })
            .collect();
        let window_score = |s: usize, e: usize| f32_exact(frame_scores[s..e].iter().sum::<f64>() / (e - s) as f64);
        let (ws, we) = (start * fpc, (start + n_causal) * fpc);
        let mut windows = vec![MomentWindow {
            start: ws,
            end: we,
            score: window_score(ws, we),
        }];
        // one decoy window over non-causal frames, when there is room
        let (lo, hi) = if ws >= n_frames - we { (0, ws) } else { (we, n_frames) };
        if hi > lo {
            let len = rng.random_range(1..=(hi - lo).min(we - ws));
            let s = rng.random_range(lo..=hi - len);
            windows.push(MomentWindow {
                start: s,
                end: s + len,
                score: window_score(s, s + len),
            });
        }
        windows.sort_by_key(|w| w.start);

        instances.push(VideoQAInstance {
            video,
            question: question.into_iter().map(f32_exact).collect(),
            answers: answers
                .into_iter()
                .map(|a| a.into_iter().map(f32_exact).collect())
                .collect(),
            gold,
            qtype,
            video_id: format!("syn{:05}-{idx:05}", spec.seed % 100_000),
        });
        saliency.push(SaliencyAnnotation {
            n_frames,
            saliency: frame_scores,
            windows,
        });
        masks.push(mask);
    }

    Ok(SyntheticDataset {
        instances,
        saliency,
        causal_masks: masks,
    })
}
