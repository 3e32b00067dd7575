use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, LoadedDataset, S3Mode};
use super::eval::{evaluate, seen_unseen_protocol, shortcut_probe, MetricsReport};
use super::train::{train_on, write_curves_csv, CurvePoint};
use crate::error::{Error, Result};
use crate::features::save_dataset;
use crate::nn::AdamConfig;
use crate::pcma::PcmaModel;
use crate::samplers::{
    mar_sample, pcma80_pool, pcma80_resample, s3_student_probs, train_rl, train_student, RlAgent, S3Student,
};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const DATASET_DIR: &str = "dataset";

#[derive(Debug, Parser)]
#[command(name = "causalvqa", version, about = "Train and evaluate causal-intervention VideoQA models on clip features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct ConfigArg {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured dataset as a feature manifest with payloads.
    GenData(ConfigArg),
    /// Train a model and write its checkpoint and loss curve.
    Train(ConfigArg),
    /// Evaluate `checkpoint` on the eval dataset.
    Eval(ConfigArg),
    /// Seen/unseen intervention protocol over `model_a` and `model_b`.
    InterveneEval(ConfigArg),
    /// Answer-video cosine shortcut probe.
    Probe(ConfigArg),
    /// Run the configured frame samplers.
    Sample(ConfigArg),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::InterveneEval(_) => "intervene-eval",
            Command::Probe(_) => "probe",
            Command::Sample(_) => "sample",
        }
    }

    fn config(&self) -> &Path {
        match self {
            Command::GenData(a)
            | Command::Train(a)
            | Command::Eval(a)
            | Command::InterveneEval(a)
            | Command::Probe(a)
            | Command::Sample(a) => &a.config,
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on a run error, 2 on a usage error.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(dir) => {
            println!("{}: wrote {}", cli.command.name(), dir.display());
            0
        }
        Err(Error::Config(fields)) => {
            eprintln!("error: invalid configuration in {}", cli.command.config().display());
            for f in fields {
                eprintln!("  {f}");
            }
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: &Command) -> Result<PathBuf> {
    let cfg = ExperimentConfig::from_file(cmd.config())?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let (body, curve) = match cmd {
        Command::GenData(_) => gen_data(&cfg)?,
        Command::Train(_) => train_cmd(&cfg)?,
        Command::Eval(_) => (json!({ "eval": evaluate(&load_model(&cfg.checkpoint, "checkpoint")?, &cfg.load_eval()?.instances)? }), Vec::new()),
        Command::InterveneEval(_) => intervene_eval(&cfg)?,
        Command::Probe(_) => (json!({ "probe": shortcut_probe(&cfg.load_eval()?.instances)? }), Vec::new()),
        Command::Sample(_) => sample_cmd(&cfg)?,
    };
    write_metrics(&out.join(METRICS_FILE), cmd.name(), body)?;
    write_curves_csv(&out.join(CURVES_FILE), &curve)?;
    Ok(out)
}

/// Writes `body` with the schema version and command name added.
pub fn write_metrics(path: &Path, command: &str, body: Value) -> Result<()> {
    let mut doc = match body {
        Value::Object(m) => m,
        other => {
            let mut m = serde_json::Map::new();
            m.insert("result".into(), other);
            m
        }
    };
    doc.insert("schema_version".into(), json!(METRICS_SCHEMA_VERSION));
    doc.insert("command".into(), json!(command));
    crate::binio::write_json(path, &Value::Object(doc))
}

fn load_model(path: &Option<PathBuf>, field: &str) -> Result<PcmaModel> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Config(vec![crate::FieldError::new(field, "required by this command")]))?;
    PcmaModel::load(p)
}

type CommandOutput = (Value, Vec<CurvePoint>);

fn gen_data(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let data = cfg.load_train()?;
    let manifest_path = cfg.output_dir.join(DATASET_DIR).join("manifest.json");
    let manifest = save_dataset(&data.instances, &manifest_path, data.saliency.as_deref())?;
    Ok((
        json!({
            "dataset": {
                "manifest": DATASET_DIR.to_string() + "/manifest.json",
                "count": manifest.count,
                "n_clips": manifest.n_clips,
                "video_dim": manifest.video_dim,
                "text_dim": manifest.text_dim,
            }
        }),
        Vec::new(),
    ))
}

fn train_cmd(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let data = cfg.load_train()?;
    let outcome = train_on(cfg, &data.instances)?;
    outcome.model.save(&cfg.output_dir.join(CHECKPOINT_FILE))?;
    let mut body = json!({
        "initial": outcome.initial,
        "train": without_curve(&outcome.train),
        "checkpoint": CHECKPOINT_FILE,
    });
    if cfg.eval_dataset.is_some() {
        body["eval"] = serde_json::to_value(evaluate(&outcome.model, &cfg.load_eval()?.instances)?)
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    Ok((body, outcome.curve))
}

/// The curve goes to its own CSV; the JSON keeps the final point only.
fn without_curve(r: &MetricsReport) -> Value {
    let mut v = serde_json::to_value(MetricsReport {
        loss_curve: Vec::new(),
        ..r.clone()
    })
    .expect("report serializes");
    if let Some(last) = r.loss_curve.last() {
        v["final_losses"] = json!(last);
    }
    v
}

fn intervene_eval(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let a = load_model(&cfg.model_a, "model_a")?;
    let b = load_model(&cfg.model_b, "model_b")?;
    let data = cfg.load_eval()?;
    let report = seen_unseen_protocol(&a, &b, &data.instances, &cfg.intervention, &cfg.mnse)?;
    Ok((json!({ "protocol": report }), Vec::new()))
}

fn frame_count(data: &LoadedDataset, i: usize) -> usize {
    data.saliency
        .as_ref()
        .map_or(data.instances[i].n_clips(), |s| s[i].n_frames)
}

fn sample_cmd(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let data = cfg.load_train()?;
    let sc = &cfg.sampler;
    if sc.mar.is_none() && sc.pcma80.is_none() && sc.s3.is_none() {
        return Err(Error::Config(vec![crate::FieldError::new("sampler", "no sampler configured")]));
    }
    let mut body = serde_json::Map::new();

    if let Some(spec) = &sc.mar {
        let saliency = data
            .saliency
            .as_ref()
            .ok_or_else(|| Error::Invalid("MAR sampling needs saliency annotations".into()))?;
        let mar = spec.config();
        let mut indices = Vec::with_capacity(saliency.len());
        let mut replaced = 0usize;
        for s in saliency {
            let out = mar_sample(s, &mar)?;
            replaced += usize::from(out.with_replacement);
            indices.push(out.indices);
        }
        body.insert(
            "mar".into(),
            json!({ "variant": spec.variant, "total": mar.total, "with_replacement": replaced, "indices": indices }),
        );
    }

    if let Some(p) = &sc.pcma80 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed);
        let mut indices = Vec::with_capacity(data.instances.len());
        for i in 0..data.instances.len() {
            let pool = pcma80_pool(frame_count(&data, i), p.pool, &mut rng)?;
            let pos = pcma80_resample(pool.len(), p.subsample, &mut rng)?;
            indices.push(pos.into_iter().map(|j| pool[j]).collect::<Vec<_>>());
        }
        body.insert("pcma80".into(), json!({ "pool": p.pool, "subsample": p.subsample, "indices": indices }));
    }

    if let Some(s3) = &sc.s3 {
        let backbone = load_model(&cfg.checkpoint, "checkpoint")?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed);
        let value = match s3.mode {
            S3Mode::Student => {
                let mut student = S3Student::new(s3.student.clone())?;
                let adam = AdamConfig {
                    lr: cfg.optimizer.lr,
                    ..AdamConfig::default()
                };
                let report = train_student(&mut student, &backbone, &data.instances, s3.steps, s3.lambda, adam, &mut rng)?;
                let mut indices = Vec::with_capacity(data.instances.len());
                let mut kept_correct = 0usize;
                for x in &data.instances {
                    let out = s3_student_probs(&student, &x.video, &x.question)?;
                    let (scores, _) = backbone.forward_parts(&x.video.select_rows(&out.indices), &x.question, &x.answers)?;
                    kept_correct += usize::from(scores.predicted == x.gold);
                    indices.push(out.indices);
                }
                let full = evaluate(&backbone, &data.instances)?;
                let (task, kl) = report.curve.last().copied().unwrap_or((0.0, 0.0));
                json!({
                    "mode": "student",
                    "S": student.cfg.select,
                    "final_task_loss": task,
                    "final_kl": kl,
                    "accuracy_selected": kept_correct as f64 / data.instances.len().max(1) as f64,
                    "accuracy_all": full.overall,
                    "curve": report.curve,
                    "indices": indices,
                })
            }
            S3Mode::Rl => {
                let mut agent = RlAgent::new(s3.rl.clone())?;
                let report = train_rl(&mut agent, &backbone, &data.instances, s3.steps, &mut rng)?;
                json!({ "mode": "rl", "report": report })
            }
        };
        body.insert("s3".into(), value);
    }
    Ok((Value::Object(body), Vec::new()))
}
