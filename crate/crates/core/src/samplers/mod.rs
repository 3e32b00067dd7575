//! Frame selection: saliency-window sampling, uniform pool resampling and
//! two learned samplers (a distilled scorer and a policy-gradient agent).

mod mar;
mod pool;
mod rl;
mod student;

use serde::{Deserialize, Serialize};

pub use mar::{mar_sample, MarConfig, MarSpec, MarVariant};
pub use pool::{pcma80_pool, pcma80_resample, pcma80_resample_frames, Pcma80Config};
pub use rl::{
    pred_loss_on_selection, s3_rl_reward, s3_rl_step, train_rl, RlAgent, RlAgentConfig, RlAction, RlEpisodeState,
    RlReport,
};
pub use student::{
    s3_student_loss, s3_student_probs, teacher_distribution, train_student, S3Student, S3StudentConfig, StudentReport,
};

/// Why an index was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Moment,
    Segment(usize),
    Policy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    /// Ascending frame indices.
    pub indices: Vec<usize>,
    pub probs: Option<Vec<f64>>,
    /// Parallel to `indices`.
    pub provenance: Vec<Provenance>,
    /// Set when some phase had fewer candidates than draws and sampled
    /// with replacement.
    pub with_replacement: bool,
}

impl SamplerOutput {
    fn from_tagged(mut tagged: Vec<(usize, Provenance)>, probs: Option<Vec<f64>>, with_replacement: bool) -> Self {
        tagged.sort_by_key(|&(i, _)| i);
        let (indices, provenance) = tagged.into_iter().unzip();
        Self {
            indices,
            probs,
            provenance,
            with_replacement,
        }
    }
}

/// Top-`s` indices by value, lowest index first on ties, returned ascending.
pub fn top_s(values: &[f64], s: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(s);
    order.sort_unstable();
    order
}
