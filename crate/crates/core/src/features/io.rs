use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QuestionType, SaliencyAnnotation, VideoQAInstance, N_ANSWERS};
use crate::binio;
use crate::error::{Error, Result};
use crate::nn::Tensor2;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFiles {
    pub video: String,
    pub question: String,
    pub answers: String,
    pub gold: String,
    pub qtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<String>,
    /// JSON array of video ids; positional ids `"{index}"` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_ids: Option<String>,
}

/// JSON manifest describing a directory of raw little-endian payloads.
///
/// Payload layouts (row-major, f32 LE):
/// * `video`:    `count × n_clips × video_dim`
/// * `question`: `count × text_dim`
/// * `answers`:  `count × 5 × text_dim`
/// * `gold`, `qtype`: `count` bytes
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub version: u32,
    pub count: usize,
    pub n_clips: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    #[serde(default = "default_n_answers")]
    pub n_answers: usize,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    #[serde(default = "default_endianness")]
    pub endianness: String,
    pub files: FeatureFiles,
}

fn default_n_answers() -> usize {
    N_ANSWERS
}
fn default_dtype() -> String {
    "f32".into()
}
fn default_endianness() -> String {
    "little".into()
}

impl FeatureManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_answers != N_ANSWERS {
            return Err(Error::dim("manifest n_answers", N_ANSWERS, self.n_answers));
        }
        if self.dtype != "f32" {
            return Err(Error::Invalid(format!("unsupported dtype `{}`", self.dtype)));
        }
        if self.endianness != "little" {
            return Err(Error::Invalid(format!("unsupported endianness `{}`", self.endianness)));
        }
        if self.count > 0 && (self.n_clips == 0 || self.video_dim == 0 || self.text_dim == 0) {
            return Err(Error::Invalid("manifest dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Writes `instances` next to `manifest_path` and returns the manifest.
/// Values are stored as f32; f32-representable inputs round-trip exactly.
pub fn save_dataset(
    instances: &[VideoQAInstance],
    manifest_path: &Path,
    saliency: Option<&[SaliencyAnnotation]>,
) -> Result<FeatureManifest> {
    let (n_clips, video_dim, text_dim) = match instances.first() {
        Some(first) => (first.n_clips(), first.video_dim(), first.text_dim()),
        None => (0, 0, 0),
    };
    for (i, inst) in instances.iter().enumerate() {
        inst.validate()?;
        if inst.n_clips() != n_clips {
            return Err(Error::dim(format!("instance {i} clip count"), n_clips, inst.n_clips()));
        }
        if inst.video_dim() != video_dim {
            return Err(Error::dim(format!("instance {i} video_dim"), video_dim, inst.video_dim()));
        }
        if inst.text_dim() != text_dim {
            return Err(Error::dim(format!("instance {i} text_dim"), text_dim, inst.text_dim()));
        }
    }
    if let Some(s) = saliency {
        if s.len() != instances.len() {
            return Err(Error::dim("saliency annotation count", instances.len(), s.len()));
        }
        for a in s {
            a.validate()?;
        }
    }

    binio::ensure_parent(manifest_path)?;
    let files = FeatureFiles {
        video: "video.f32".into(),
        question: "question.f32".into(),
        answers: "answers.f32".into(),
        gold: "gold.u8".into(),
        qtype: "qtype.u8".into(),
        saliency: saliency.map(|_| "saliency.json".into()),
        video_ids: Some("video_ids.json".into()),
    };
    let at = |f: &str| binio::sibling(manifest_path, f);

    binio::write_f32_le(
        &at(&files.video),
        instances.iter().flat_map(|i| i.video.data().iter().copied()),
    )?;
    binio::write_f32_le(
        &at(&files.question),
        instances.iter().flat_map(|i| i.question.iter().copied()),
    )?;
    binio::write_f32_le(
        &at(&files.answers),
        instances
            .iter()
            .flat_map(|i| i.answers.iter().flat_map(|a| a.iter().copied())),
    )?;
    let gold: Vec<u8> = instances.iter().map(|i| i.gold as u8).collect();
    binio::write_u8(&at(&files.gold), &gold)?;
    let qtype: Vec<u8> = instances.iter().map(|i| i.qtype.code()).collect();
    binio::write_u8(&at(&files.qtype), &qtype)?;
    let ids: Vec<&str> = instances.iter().map(|i| i.video_id.as_str()).collect();
    binio::write_json(&at(files.video_ids.as_deref().unwrap_or_default()), &ids)?;
    if let (Some(name), Some(s)) = (&files.saliency, saliency) {
        binio::write_json(&at(name), &s)?;
    }

    let manifest = FeatureManifest {
        version: MANIFEST_VERSION,
        count: instances.len(),
        n_clips,
        video_dim,
        text_dim,
        n_answers: N_ANSWERS,
        dtype: default_dtype(),
        endianness: default_endianness(),
        files,
    };
    binio::write_json(manifest_path, &manifest)?;
    Ok(manifest)
}

fn read_manifest(manifest_path: &Path) -> Result<FeatureManifest> {
    let manifest: FeatureManifest = binio::read_json(manifest_path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Invalid(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Vec<VideoQAInstance>> {
    let m = read_manifest(manifest_path)?;
    let at = |f: &str| binio::sibling(manifest_path, f);
    let video_len = m.n_clips * m.video_dim;
    let video = binio::read_f32_le(&at(&m.files.video), m.count * video_len)?;
    let question = binio::read_f32_le(&at(&m.files.question), m.count * m.text_dim)?;
    let answers = binio::read_f32_le(&at(&m.files.answers), m.count * N_ANSWERS * m.text_dim)?;
    let gold = binio::read_u8(&at(&m.files.gold), m.count)?;
    let qtype = binio::read_u8(&at(&m.files.qtype), m.count)?;
    let ids: Vec<String> = match &m.files.video_ids {
        Some(f) => binio::read_json(&at(f))?,
        None => (0..m.count).map(|i| i.to_string()).collect(),
    };
    if ids.len() != m.count {
        return Err(Error::dim("video id count", m.count, ids.len()));
    }

    let mut out = Vec::with_capacity(m.count);
    for i in 0..m.count {
        let answers_i = &answers[i * N_ANSWERS * m.text_dim..(i + 1) * N_ANSWERS * m.text_dim];
        let inst = VideoQAInstance {
            video: Tensor2::from_vec(
                m.n_clips,
                m.video_dim,
                video[i * video_len..(i + 1) * video_len].to_vec(),
            )?,
            question: question[i * m.text_dim..(i + 1) * m.text_dim].to_vec(),
            answers: answers_i.chunks_exact(m.text_dim).map(<[f64]>::to_vec).collect(),
            gold: gold[i] as usize,
            qtype: QuestionType::from_code(qtype[i])?,
            video_id: ids[i].clone(),
        };
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

/// Saliency annotations, when the manifest references them.
pub fn load_saliency(manifest_path: &Path) -> Result<Option<Vec<SaliencyAnnotation>>> {
    let m = read_manifest(manifest_path)?;
    let Some(f) = &m.files.saliency else {
        return Ok(None);
    };
    let s: Vec<SaliencyAnnotation> = binio::read_json(&binio::sibling(manifest_path, f))?;
    if s.len() != m.count {
        return Err(Error::dim("saliency annotation count", m.count, s.len()));
    }
    for a in &s {
        a.validate()?;
    }
    Ok(Some(s))
}
