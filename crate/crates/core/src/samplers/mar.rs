use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Provenance, SamplerOutput};
use crate::error::{Error, FieldError, Result};
use crate::features::SaliencyAnnotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarVariant {
    #[serde(rename = "MAR-16")]
    Mar16,
    #[serde(rename = "MAR-32")]
    Mar32,
}

/// Config-file form: a variant name and a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarSpec {
    pub variant: MarVariant,
    #[serde(default)]
    pub seed: u64,
}

impl MarSpec {
    pub fn config(&self) -> MarConfig {
        match self.variant {
            MarVariant::Mar16 => MarConfig::mar16(self.seed),
            MarVariant::Mar32 => MarConfig::mar32(self.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarConfig {
    pub total: usize,
    pub moment_count: usize,
    pub segment_count: usize,
    pub per_segment: usize,
    pub seed: u64,
}

impl MarConfig {
    pub fn mar16(seed: u64) -> Self {
        Self {
            total: 16,
            moment_count: 8,
            segment_count: 4,
            per_segment: 2,
            seed,
        }
    }

    pub fn mar32(seed: u64) -> Self {
        Self {
            total: 32,
            moment_count: 16,
            segment_count: 4,
            per_segment: 4,
            seed,
        }
    }

    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.total != self.moment_count + self.segment_count * self.per_segment {
            errs.push(FieldError::new(
                format!("{prefix}.total"),
                "must equal moment_count + segment_count * per_segment",
            ));
        }
        if self.segment_count == 0 {
            errs.push(FieldError::new(format!("{prefix}.segment_count"), "must be positive"));
        }
        errs
    }
}

/// Draws `count` indices from `candidates`, without replacement when
/// possible. Returns whether replacement was needed.
fn draw<R: Rng>(candidates: &[usize], count: usize, rng: &mut R, out: &mut Vec<usize>) -> bool {
    if candidates.len() >= count {
        out.extend(sample(rng, candidates.len(), count).into_iter().map(|i| candidates[i]));
        false
    } else {
        out.extend_from_slice(candidates);
        for _ in candidates.len()..count {
            out.push(candidates[rng.random_range(0..candidates.len())]);
        }
        true
    }
}

/// Saliency-window sampling: `moment_count` frames from the best window
/// (highest score, earliest on ties) plus `per_segment` frames from each of
/// `segment_count` equal spans, never repeating a moment frame.
pub fn mar_sample(saliency: &SaliencyAnnotation, cfg: &MarConfig) -> Result<SamplerOutput> {
    let errs = cfg.field_errors("mar");
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    saliency.validate()?;
    let best = saliency
        .windows
        .iter()
        .min_by(|a, b| b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)))
        .ok_or(Error::NoWindows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = saliency.n_frames;

    let window: Vec<usize> = (best.start..best.end).collect();
    let mut moment = Vec::with_capacity(cfg.moment_count);
    let mut replaced = draw(&window, cfg.moment_count, &mut rng, &mut moment);
    let mut taken = vec![false; n];
    for &i in &moment {
        taken[i] = true;
    }
    let mut tagged: Vec<(usize, Provenance)> = moment.into_iter().map(|i| (i, Provenance::Moment)).collect();

    let seg_len = n / cfg.segment_count;
    for s in 0..cfg.segment_count {
        let lo = s * seg_len;
        let hi = if s + 1 == cfg.segment_count { n } else { lo + seg_len };
        // a re-drawn duplicate is uniform over the remaining free frames
        let free: Vec<usize> = (lo..hi).filter(|&i| !taken[i]).collect();
        let mut picked = Vec::with_capacity(cfg.per_segment);
        if free.is_empty() && hi > lo {
            let span: Vec<usize> = (lo..hi).collect();
            draw(&span, cfg.per_segment, &mut rng, &mut picked);
            replaced |= cfg.per_segment > 0;
        } else if free.is_empty() {
            return Err(Error::Invalid(format!("segment {s} of {n} frames is empty")));
        } else {
            replaced |= draw(&free, cfg.per_segment, &mut rng, &mut picked);
        }
        for &i in &picked {
            taken[i] = true;
        }
        tagged.extend(picked.into_iter().map(|i| (i, Provenance::Segment(s))));
    }
    Ok(SamplerOutput::from_tagged(tagged, None, replaced))
}
