use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{evaluate, MetricsReport};
use crate::error::{Error, Result};
use crate::features::VideoQAInstance;
use crate::intervention::{intervention_step, SceneSampler, StepContext};
use crate::mnse::{BankEntry, MemoryBank, Regime};
use crate::nn::{Adam, AdamConfig, Tensor2};
use crate::pcma::PcmaModel;

/// Batch-mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub erm_loss: f64,
    pub cl_loss: f64,
    pub total_loss: f64,
}

pub const CURVE_HEADER: &str = "step,erm_loss,cl_loss,total_loss";

pub fn write_curves_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    crate::binio::ensure_parent(path)?;
    let mut text = String::with_capacity(32 * (curve.len() + 1));
    text.push_str(CURVE_HEADER);
    text.push('\n');
    for p in curve {
        // `{}` on f64 prints the shortest round-tripping form
        text.push_str(&format!("{},{},{},{}\n", p.step, p.erm_loss, p.cl_loss, p.total_loss));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PcmaModel,
    pub curve: Vec<CurvePoint>,
    /// Accuracy on the training data before the first update.
    pub initial: MetricsReport,
    /// Accuracy on the training data after the last update, with the loss
    /// curve attached.
    pub train: MetricsReport,
}

fn video_entries(x: &VideoQAInstance) -> impl Iterator<Item = BankEntry> + '_ {
    x.video
        .iter_rows()
        .enumerate()
        .map(|(c, row)| BankEntry::new(row.to_vec(), x.video_id.clone(), c))
}

fn mixed_entries<'a>(v: &'a Tensor2, anchor_id: &str) -> impl Iterator<Item = BankEntry> + 'a {
    let id = anchor_id.to_string();
    v.iter_rows()
        .enumerate()
        .map(move |(c, row)| BankEntry::new(row.to_vec(), id.clone(), c))
}

/// An index other than `batch[j]`: another batch member when the batch has
/// one, otherwise any other instance.
fn pick_other<R: Rng>(batch: &[usize], j: usize, n: usize, rng: &mut R) -> usize {
    if batch.len() > 1 {
        let r = rng.random_range(0..batch.len() - 1);
        batch[if r >= j { r + 1 } else { r }]
    } else if n > 1 {
        let own = batch[j];
        let r = rng.random_range(0..n - 1);
        if r >= own {
            r + 1
        } else {
            r
        }
    } else {
        batch[j]
    }
}

fn check_dims(model: &PcmaModel, data: &[VideoQAInstance]) -> Result<()> {
    for (i, x) in data.iter().enumerate() {
        if x.video_dim() != model.cfg.video_dim {
            return Err(Error::dim(format!("instance {i} video_dim"), model.cfg.video_dim, x.video_dim()));
        }
        if x.text_dim() != model.cfg.text_dim {
            return Err(Error::dim(format!("instance {i} text_dim"), model.cfg.text_dim, x.text_dim()));
        }
    }
    Ok(())
}

/// Loads the configured training data and trains on it.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = cfg.load_train()?;
    train_on(cfg, &data.instances)
}

/// Adam on the batch-mean objective. The bank used by the contrastive
/// branch is built from `data`: filled once and frozen for F1, otherwise
/// refreshed after every batch (with the batch's mixed videos under F3).
pub fn train_on(cfg: &ExperimentConfig, data: &[VideoQAInstance]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training data is empty".into()));
    }
    let mut model = PcmaModel::new(cfg.model.clone())?;
    check_dims(&model, data)?;
    // checkpoints are f32, so start from representable values
    model.params.round_to_f32();
    let initial = evaluate(&model, data)?;

    let opt_cfg = &cfg.optimizer;
    let icfg = &cfg.intervention;
    let mut rng = ChaCha8Rng::seed_from_u64(opt_cfg.seed);
    let mut opt = Adam::new(
        AdamConfig {
            lr: opt_cfg.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let n = data.len();
    let b = opt_cfg.batch_size.min(n);

    let mut bank = if icfg.beta_cl != 0.0 {
        let mut bank = MemoryBank::from_config(cfg.model.video_dim, &cfg.mnse);
        if cfg.mnse.regime == Regime::F1Static {
            bank.populate(data.iter().flat_map(video_entries))?;
            bank.freeze();
        } else {
            for _ in 0..cfg.mnse.window {
                let warm = sample(&mut rng, n, b);
                bank.advance_batch(warm.iter().flat_map(|i| video_entries(&data[i])).collect(), Vec::new())?;
            }
        }
        Some(bank)
    } else {
        None
    };

    let mut curve = Vec::with_capacity(opt_cfg.steps);
    for step in 0..opt_cfg.steps {
        let batch = sample(&mut rng, n, b).into_vec();
        model.params.zero_grads();
        let (mut erm, mut cl, mut total) = (0.0, 0.0, 0.0);
        let mut mixed = Vec::new();
        for j in 0..batch.len() {
            let x = &data[batch[j]];
            let partner = pick_other(&batch, j, n, &mut rng);
            let q_r = pick_other(&batch, j, n, &mut rng);
            let ctx = StepContext {
                partner: &data[partner],
                q_r: &data[q_r].question,
                sampler: bank.as_ref().map(|bank| SceneSampler {
                    bank,
                    source: icfg.memory_source,
                    k: cfg.mnse.k,
                    exclude_video_id: cfg.mnse.exclude_self.then_some(x.video_id.as_str()),
                }),
            };
            let losses = intervention_step(&mut model, x, &ctx, icfg, &mut rng)?;
            erm += losses.erm;
            cl += losses.cl;
            total += losses.total;
            if let Some(v) = losses.v_star {
                mixed.extend(mixed_entries(&v, &x.video_id));
            }
        }
        let inv = 1.0 / b as f64;
        let point = CurvePoint {
            step,
            erm_loss: erm * inv,
            cl_loss: cl * inv,
            total_loss: total * inv,
        };
        if !(point.erm_loss.is_finite() && point.cl_loss.is_finite() && point.total_loss.is_finite()) {
            return Err(Error::Diverged { step });
        }
        model.params.scale_grads(inv);
        opt.step(&mut model.params);
        if let Some(bank) = bank.as_mut() {
            if bank.regime() != Regime::F1Static {
                bank.advance_batch(batch.iter().flat_map(|&i| video_entries(&data[i])).collect(), mixed)?;
            }
        }
        curve.push(point);
    }

    model.params.round_to_f32();
    let mut train = evaluate(&model, data)?;
    train.loss_curve = curve.clone();
    Ok(TrainOutcome {
        model,
        curve,
        initial,
        train,
    })
}
