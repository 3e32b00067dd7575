use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::CurvePoint;
use crate::error::{Error, Result};
use crate::features::{QuestionType, VideoQAInstance};
use crate::intervention::{estimate_causal_mask_with, CausalSplit, InterventionConfig, MemorySource};
use crate::mnse::{mnse_do, random_do, MemoryBank, MnseConfig, Regime, Target};
use crate::nn::loss::cosine_unchecked;
use crate::pcma::{argmax, PcmaModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub count: usize,
    pub correct: usize,
    /// `None` when the type has no instances.
    pub accuracy: Option<f64>,
}

impl TypeAccuracy {
    fn new(count: usize, correct: usize) -> Self {
        Self {
            count,
            correct,
            accuracy: (count > 0).then(|| correct as f64 / count as f64),
        }
    }
}

/// Accuracy overall and per question type. Accuracies of empty groups are
/// `null` in JSON rather than 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub correct: usize,
    pub overall: Option<f64>,
    pub acc_causal: Option<f64>,
    pub acc_temporal: Option<f64>,
    pub acc_descriptive: Option<f64>,
    pub per_type: BTreeMap<String, TypeAccuracy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<CurvePoint>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub deltas: BTreeMap<String, f64>,
}

fn type_key(t: QuestionType) -> &'static str {
    match t {
        QuestionType::Causal => "causal",
        QuestionType::Temporal => "temporal",
        QuestionType::Descriptive => "descriptive",
    }
}

impl MetricsReport {
    /// Scores `predictions[i]` against `data[i].gold`.
    pub fn from_predictions(data: &[VideoQAInstance], predictions: &[usize]) -> Result<Self> {
        if data.len() != predictions.len() {
            return Err(Error::dim("prediction count", data.len(), predictions.len()));
        }
        let mut tally: BTreeMap<&'static str, (usize, usize)> =
            QuestionType::ALL.iter().map(|&t| (type_key(t), (0, 0))).collect();
        for (x, &p) in data.iter().zip(predictions) {
            let entry = tally.get_mut(type_key(x.qtype)).expect("all types present");
            entry.0 += 1;
            entry.1 += usize::from(p == x.gold);
        }
        let per_type: BTreeMap<String, TypeAccuracy> = tally
            .iter()
            .map(|(k, &(n, c))| (k.to_string(), TypeAccuracy::new(n, c)))
            .collect();
        let count = data.len();
        let correct: usize = tally.values().map(|&(_, c)| c).sum();
        let acc = |t: QuestionType| per_type[type_key(t)].accuracy;
        Ok(Self {
            count,
            correct,
            overall: (count > 0).then(|| correct as f64 / count as f64),
            acc_causal: acc(QuestionType::Causal),
            acc_temporal: acc(QuestionType::Temporal),
            acc_descriptive: acc(QuestionType::Descriptive),
            per_type,
            loss_curve: Vec::new(),
            deltas: BTreeMap::new(),
        })
    }

    pub fn overall_or_zero(&self) -> f64 {
        self.overall.unwrap_or(0.0)
    }
}

/// Applies `f` to every instance on all available cores and returns the
/// results in input order.
fn par_map<T, F>(data: &[VideoQAInstance], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &VideoQAInstance) -> Result<T> + Sync,
{
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(data.len().max(1));
    let chunk = data.len().div_ceil(workers).max(1);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, x)| f(ci * chunk + j, x))
                        .collect::<Result<Vec<T>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn predict_all(model: &PcmaModel, data: &[VideoQAInstance]) -> Result<Vec<usize>> {
    par_map(data, |_, x| Ok(model.predict(x)?.predicted))
}

pub fn evaluate(model: &PcmaModel, data: &[VideoQAInstance]) -> Result<MetricsReport> {
    MetricsReport::from_predictions(data, &predict_all(model, data)?)
}

/// Parameter-free answer-leak probe: each answer is scored by its cosine
/// with the mean clip vector.
pub fn shortcut_probe(data: &[VideoQAInstance]) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(data.len());
    for (i, x) in data.iter().enumerate() {
        x.validate()?;
        if x.video_dim() != x.text_dim() {
            return Err(Error::dim(format!("probe instance {i} video_dim vs text_dim"), x.text_dim(), x.video_dim()));
        }
        let mean = x.video.mean_rows();
        let scores: Vec<f64> = x.answers.iter().map(|a| cosine_unchecked(&mean, a)).collect();
        preds.push(argmax(&scores));
    }
    MetricsReport::from_predictions(data, &preds)
}

/// Which substitute scenes an intervention draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    Mnse,
    Random,
}

impl From<MemorySource> for InterventionMode {
    fn from(s: MemorySource) -> Self {
        match s {
            MemorySource::Mnse => InterventionMode::Mnse,
            MemorySource::RandomBank => InterventionMode::Random,
        }
    }
}

impl InterventionMode {
    pub fn other(self) -> Self {
        match self {
            InterventionMode::Mnse => InterventionMode::Random,
            InterventionMode::Random => InterventionMode::Mnse,
        }
    }
}

/// Replaces the complement rows named by `splits[i]` and scores the
/// model on the result with unchanged gold labels.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_intervened(
    model: &PcmaModel,
    data: &[VideoQAInstance],
    splits: &[CausalSplit],
    bank: &MemoryBank,
    mode: InterventionMode,
    k: usize,
    exclude_self: bool,
    seed: u64,
) -> Result<MetricsReport> {
    if splits.len() != data.len() {
        return Err(Error::dim("split count", data.len(), splits.len()));
    }
    let preds = par_map(data, |i, x| {
        // one stream per instance keeps the result independent of sharding
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let exclude = exclude_self.then_some(x.video_id.as_str());
        let video = match mode {
            InterventionMode::Mnse => mnse_do(&x.video, &splits[i], bank, Target::Complement, k, exclude, &mut rng)?,
            InterventionMode::Random => random_do(&x.video, &splits[i], bank, Target::Complement, exclude, &mut rng)?,
        };
        Ok(model.forward_parts(&video, &x.question, &x.answers)?.0.predicted)
    })?;
    MetricsReport::from_predictions(data, &preds)
}

/// The model's own gate split for every instance.
pub fn gate_splits(model: &PcmaModel, data: &[VideoQAInstance], icfg: &InterventionConfig) -> Result<Vec<CausalSplit>> {
    par_map(data, |_, x| {
        Ok(estimate_causal_mask_with(model, &x.video, &x.question, icfg.selection())?.ensure_causal())
    })
}

/// A static bank over every clip of `data`.
pub fn static_bank(data: &[VideoQAInstance], mnse: &MnseConfig) -> Result<MemoryBank> {
    let dim = data.first().map_or(0, VideoQAInstance::video_dim);
    let mut bank = MemoryBank::new(dim, mnse.metric, Regime::F1Static, 1);
    bank.populate_videos(data.iter().map(|x| (&x.video, x.video_id.as_str())))?;
    bank.freeze();
    Ok(bank)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    /// The intervener the model was trained with; its "seen" regime.
    pub seen_mode: InterventionMode,
    pub clean: MetricsReport,
    pub seen: MetricsReport,
    pub unseen: MetricsReport,
    pub seen_drop: f64,
    pub unseen_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub model_a: ArmReport,
    pub model_b: ArmReport,
}

/// One model under its own and the other intervener.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_arm(
    model: &PcmaModel,
    seen_mode: InterventionMode,
    data: &[VideoQAInstance],
    splits: &[CausalSplit],
    bank: &MemoryBank,
    mnse: &MnseConfig,
    seed: u64,
) -> Result<ArmReport> {
    let clean = evaluate(model, data)?;
    let run = |mode: InterventionMode| {
        evaluate_intervened(model, data, splits, bank, mode, mnse.k, mnse.exclude_self, seed)
    };
    let seen = run(seen_mode)?;
    let unseen = run(seen_mode.other())?;
    let base = clean.overall_or_zero();
    Ok(ArmReport {
        seen_mode,
        seen_drop: base - seen.overall_or_zero(),
        unseen_drop: base - unseen.overall_or_zero(),
        clean,
        seen,
        unseen,
    })
}

/// Seen/unseen robustness protocol. `model_a` was trained with nearest-scene
/// interventions and `model_b` with random ones (or none); each is split by
/// its own gate and intervened on its complement clips from a static bank
/// over `data`.
pub fn seen_unseen_protocol(
    model_a: &PcmaModel,
    model_b: &PcmaModel,
    data: &[VideoQAInstance],
    icfg: &InterventionConfig,
    mnse: &MnseConfig,
) -> Result<ProtocolReport> {
    let bank = static_bank(data, mnse)?;
    let arm = |model: &PcmaModel, mode: InterventionMode, salt: u64| -> Result<ArmReport> {
        let splits = gate_splits(model, data, icfg)?;
        evaluate_arm(model, mode, data, &splits, &bank, mnse, icfg.seed ^ salt)
    };
    Ok(ProtocolReport {
        model_a: arm(model_a, InterventionMode::Mnse, 0xA)?,
        model_b: arm(model_b, InterventionMode::Random, 0xB)?,
    })
}
