//! Embedding-level data model: instances, saliency annotations, the on-disk
//! feature format and the planted-signal synthetic generator.

mod io;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::nn::Tensor2;

pub use io::{load_dataset, load_saliency, save_dataset, FeatureFiles, FeatureManifest, MANIFEST_VERSION};
pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec};

/// Number of answer choices per question.
pub const N_ANSWERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionType {
    Causal,
    Temporal,
    Descriptive,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [Self::Causal, Self::Temporal, Self::Descriptive];

    pub fn code(self) -> u8 {
        match self {
            Self::Causal => 0,
            Self::Temporal => 1,
            Self::Descriptive => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::Causal),
            1 => Ok(Self::Temporal),
            2 => Ok(Self::Descriptive),
            other => Err(Error::Invalid(format!("unknown question type code {other}"))),
        }
    }
}

/// One multiple-choice question over a clip feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoQAInstance {
    /// `n_clips × video_dim`.
    pub video: Tensor2,
    pub question: Vec<f64>,
    pub answers: Vec<Vec<f64>>,
    pub gold: usize,
    pub qtype: QuestionType,
    pub video_id: String,
}

impl VideoQAInstance {
    pub fn n_clips(&self) -> usize {
        self.video.rows()
    }

    pub fn video_dim(&self) -> usize {
        self.video.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.question.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.answers.len() != N_ANSWERS {
            return Err(Error::dim("answer count", N_ANSWERS, self.answers.len()));
        }
        if self.gold >= N_ANSWERS {
            return Err(Error::GoldOutOfRange {
                gold: self.gold,
                n: N_ANSWERS,
            });
        }
        self.video.check_finite("video features")?;
        check_finite("question embedding", &self.question)?;
        for (i, a) in self.answers.iter().enumerate() {
            if a.len() != self.question.len() {
                return Err(Error::dim(format!("answer {i} width"), self.question.len(), a.len()));
            }
            check_finite("answer embedding", a)?;
        }
        Ok(())
    }
}

/// A scored temporal window `[start, end)` over frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentWindow {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Per-frame saliency and detected moment windows for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyAnnotation {
    pub n_frames: usize,
    pub saliency: Vec<f64>,
    pub windows: Vec<MomentWindow>,
}

impl SaliencyAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::Invalid("saliency annotation with zero frames".into()));
        }
        if self.saliency.len() != self.n_frames {
            return Err(Error::dim("saliency length", self.n_frames, self.saliency.len()));
        }
        check_finite("saliency", &self.saliency)?;
        for w in &self.windows {
            if !(w.start < w.end && w.end <= self.n_frames) {
                return Err(Error::Invalid(format!(
                    "moment window [{}, {}) outside 0..{}",
                    w.start, w.end, self.n_frames
                )));
            }
            if !w.score.is_finite() {
                return Err(Error::Invalid("non-finite window score".into()));
            }
        }
        Ok(())
    }
}
