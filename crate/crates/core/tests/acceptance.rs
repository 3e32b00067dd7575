//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line
//! straight to stdout so the summary survives output capture; the test
//! fails if any gating criterion fails. The learned-policy line is
//! informational.

mod common;

use std::any::Any;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use causalvqa::features::{generate_synthetic, load_dataset, load_saliency, save_dataset, SyntheticSpec, VideoQAInstance};
use causalvqa::harness::{
    gate_splits, seen_unseen_protocol, shortcut_probe, static_bank, train_on, DatasetSource, ExperimentConfig,
};
use causalvqa::intervention::{
    build_triplet, infonce_loss, intervention_step, mixup_with_lambdas, total_loss, CausalSplit, ContrastiveTriplet,
    InterventionConfig, MemorySource, SceneSampler, StepContext,
};
use causalvqa::mnse::{mnse_do, random_do, MemoryBank, Metric, MnseConfig, NeighborQuery, Regime, Target};
use causalvqa::nn::gradcheck::{central_difference_vec, check_params, check_params_except, relative_error, GradCheckReport};
use causalvqa::nn::loss::cosine_unchecked;
use causalvqa::nn::{AttentionConfig, MultiHeadAttention, ParamStore, Tensor2};
use causalvqa::pcma::{pcma_loss, PcmaConfig, PcmaModel};
use causalvqa::samplers::{
    mar_sample, pcma80_resample, s3_student_loss, s3_student_probs, train_rl, MarConfig, Provenance, RlAgent,
    RlAgentConfig, S3Student, S3StudentConfig,
};
use causalvqa::Error;
use common::{brute_force, random_entries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Settings of the robustness benchmark. At 500 instances the models
/// memorize the training set and neither intervener separates them; at this
/// size held-out accuracy is well above chance and the comparison is
/// meaningful.
const ROBUST_TRAIN: usize = 2000;
const ROBUST_STEPS: usize = 1200;
const ROBUST_SEEDS: u64 = 5;
const ROBUST_BETA: f64 = 0.5;
const ROBUST_K: usize = 5;
const ROBUST_REGIME: Regime = Regime::F3DynamicMixup;
const ROBUST_SPARSITY: f64 = 0.5;

fn say(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn panic_text(p: Box<dyn Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

struct Run {
    failures: Vec<String>,
}

impl Run {
    fn check(&mut self, label: &str, gating: bool, f: impl FnOnce() -> String) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f));
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(detail) => ("PASS", detail),
            Err(p) => {
                if gating {
                    self.failures.push(label.to_string());
                }
                ("FAIL", panic_text(p))
            }
        };
        let kind = if gating { "" } else { " (non-gating)" };
        say(format!("{label}{kind}: {status} [{secs:.1}s] {detail}"));
    }
}

fn within(limit: Duration, start: Instant, what: &str) {
    let took = start.elapsed();
    assert!(took < limit, "{what} took {took:?}, limit {limit:?}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn planted(seed: u64, n: usize) -> causalvqa::features::SyntheticDataset {
    generate_synthetic(&SyntheticSpec { seed, n_instances: n, ..Default::default() }).unwrap()
}

/// Finite differences at eps 1e-5 carry rounding noise near 1e-11, so
/// probes whose gradient is below 1e-6 only have to agree on being zero;
/// at least `min_probes` of the rest must meet the relative tolerance.
fn grad_ok(what: &str, r: &GradCheckReport, min_probes: usize) -> String {
    let (informative, flat): (Vec<_>, Vec<_>) = r.probes.iter().partition(|p| p.analytic.abs().max(p.numeric.abs()) >= 1e-6);
    assert!(informative.len() >= min_probes, "{what}: only {} informative probes", informative.len());
    let worst = informative.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{what}: {:?}", informative.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)));
    for p in &flat {
        assert!((p.analytic - p.numeric).abs() < 1e-9, "{what}: {p:?}");
    }
    format!("{what} {} probes max {worst:.1e}", informative.len())
}

fn gradient_suite() -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut parts = Vec::new();

    // attention: cross (queries ≠ keys) and self
    for (n_q, n_k) in [(3, 5), (4, 4)] {
        let cfg = AttentionConfig { model_dim: 8, n_heads: 2, n_layers: 1, seed: 0 };
        let mut store = ParamStore::new();
        let att = MultiHeadAttention::new(&mut store, "att", &cfg, &mut rng).unwrap();
        let (q, kv, w) = (rand_tensor(&mut rng, n_q, 8), rand_tensor(&mut rng, n_k, 8), rand_tensor(&mut rng, n_q, 8));
        let readout = |o: &Tensor2| o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = att.forward(&store, &q, &kv).unwrap();
        store.zero_grads();
        let (dq, dkv) = att.backward(&mut store, &cache, &w).unwrap();
        let r = check_params(&mut store, 40, &mut rng, |s| readout(&att.forward(s, &q, &kv).unwrap().0));
        parts.push(grad_ok("attention", &r, 20));
        let mut qv = q.data().to_vec();
        let mut kvv = kv.data().to_vec();
        for i in 0..qv.len() {
            let num = central_difference_vec(&mut qv, i, 1e-5, &mut |x| {
                readout(&att.forward(&store, &Tensor2::from_vec(n_q, 8, x.to_vec()).unwrap(), &kv).unwrap().0)
            });
            assert!(relative_error(dq.data()[i], num) < 1e-4, "attention dq[{i}]");
        }
        for i in 0..kvv.len() {
            let num = central_difference_vec(&mut kvv, i, 1e-5, &mut |x| {
                readout(&att.forward(&store, &q, &Tensor2::from_vec(n_k, 8, x.to_vec()).unwrap()).unwrap().0)
            });
            assert!(relative_error(dkv.data()[i], num) < 1e-4, "attention dkv[{i}]");
        }
    }

    // answer-scoring loss through the whole model
    let pcfg = PcmaConfig {
        video_dim: 6,
        text_dim: 5,
        attention: AttentionConfig { model_dim: 8, n_heads: 2, n_layers: 2, seed: 4 },
        ..Default::default()
    };
    let inst = generate_synthetic(&SyntheticSpec { seed: 5, n_instances: 1, n_clips: 4, video_dim: 6, text_dim: 5, ..Default::default() })
        .unwrap()
        .instances
        .remove(0);
    let mut model = PcmaModel::new(pcfg).unwrap();
    let (scores, cache) = model.forward(&inst).unwrap();
    let tau = model.cfg.temperature;
    let (_, d) = pcma_loss(&scores, inst.gold, tau).unwrap();
    model.params.zero_grads();
    model.backward(&cache, &d).unwrap();
    let frozen = model.clone();
    let mut store = model.params.clone();
    let r = check_params(&mut store, 40, &mut rng, |s| {
        let mut m = frozen.clone();
        m.params = s.clone();
        pcma_loss(&m.forward(&inst).unwrap().0, inst.gold, tau).unwrap().0
    });
    parts.push(grad_ok("pcma-loss", &r, 20));

    // contrastive loss in its inputs
    let v = |rng: &mut ChaCha8Rng| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let t = ContrastiveTriplet { anchor: v(&mut rng), positive: v(&mut rng), negatives: (0..3).map(|_| v(&mut rng)).collect() };
    let g = infonce_loss(&t).unwrap();
    let mut flat: Vec<f64> = [t.anchor.clone(), t.positive.clone()].into_iter().chain(t.negatives.clone()).flatten().collect();
    let analytic: Vec<f64> = [g.d_anchor, g.d_positive].into_iter().chain(g.d_negatives).flatten().collect();
    let mut worst = 0f64;
    for _ in 0..24 {
        let i = rng.random_range(0..flat.len());
        let num = central_difference_vec(&mut flat, i, 1e-5, &mut |x| {
            let c: Vec<Vec<f64>> = x.chunks(6).map(<[f64]>::to_vec).collect();
            infonce_loss(&ContrastiveTriplet { anchor: c[0].clone(), positive: c[1].clone(), negatives: c[2..].to_vec() }).unwrap().loss
        });
        worst = worst.max(relative_error(analytic[i], num));
    }
    assert!(worst < 1e-4, "infonce {worst}");
    parts.push(format!("infonce 24 probes max {worst:.1e}"));

    // gate scorer
    let gm = PcmaModel::new(PcmaConfig {
        video_dim: 6,
        text_dim: 6,
        attention: AttentionConfig { model_dim: 8, n_heads: 2, n_layers: 1, seed: 3 },
        ..Default::default()
    })
    .unwrap();
    let x = generate_synthetic(&SyntheticSpec { seed: 8, n_instances: 1, n_clips: 5, video_dim: 6, text_dim: 6, ..Default::default() })
        .unwrap()
        .instances
        .remove(0);
    let w: Vec<f64> = (0..5).map(|i| (i as f64 - 1.5) * 0.7).collect();
    let mut store = gm.params.clone();
    store.zero_grads();
    let (_, gc) = gm.gate.forward(&store, &x.video, &x.question).unwrap();
    gm.gate.backward(&mut store, &gc, &w).unwrap();
    let r = check_params_except(&mut store, 40, &mut rng, |n| !n.starts_with("gate"), |s| {
        gm.gate.forward(s, &x.video, &x.question).unwrap().0.iter().zip(&w).map(|(a, b)| a * b).sum()
    });
    parts.push(grad_ok("gate", &r, 20));

    // full intervention objective, both branches
    let d = generate_synthetic(&SyntheticSpec { seed: 31, n_instances: 6, n_clips: 5, video_dim: 6, text_dim: 6, ..Default::default() })
        .unwrap()
        .instances;
    let mut bank = MemoryBank::new(6, Metric::Cosine, Regime::F1Static, 1);
    bank.populate_videos(d.iter().map(|i| (&i.video, i.video_id.as_str()))).unwrap();
    let icfg = InterventionConfig { beta_cl: 0.7, n_negatives: 3, ..Default::default() };
    let sampler = SceneSampler { bank: &bank, source: MemorySource::Mnse, k: 2, exclude_video_id: Some(&d[0].video_id) };
    let ctx = StepContext { partner: &d[1], q_r: &d[2].question, sampler: Some(sampler) };
    let mut sm = gm.clone();
    sm.params.zero_grads();
    intervention_step(&mut sm, &d[0], &ctx, &icfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let frozen = sm.clone();
    let mut store = sm.params.clone();
    let r = check_params(&mut store, 40, &mut rng, |s| {
        let mut m = frozen.clone();
        m.params = s.clone();
        intervention_step(&mut m, &d[0], &ctx, &icfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().total
    });
    parts.push(grad_ok("intervention-step", &r, 20));

    // student distillation KL
    let mut st = S3Student::new(S3StudentConfig {
        frame_dim: 5,
        text_dim: 4,
        attention: AttentionConfig { model_dim: 6, n_heads: 2, n_layers: 1, seed: 1 },
        select: 3,
    })
    .unwrap();
    let frames = rand_tensor(&mut rng, 6, 5);
    let q = [0.3, -0.2, 0.5, 0.1];
    let teacher = [0.1, 0.3, 0.05, 0.25, 0.2, 0.1];
    let lambda = 0.8;
    let (p, sc) = st.forward(&frames, &q).unwrap();
    let dl: Vec<f64> = p.iter().zip(&teacher).map(|(a, b)| lambda * (a - b)).collect();
    st.params.zero_grads();
    st.backward_logits(&sc, &dl).unwrap();
    let frozen = st.clone();
    let r = check_params(&mut st.params, 100, &mut rng, |s| {
        let mut m = frozen.clone();
        m.params = s.clone();
        s3_student_loss(&m.forward(&frames, &q).unwrap().0, &teacher, 0.0, lambda).unwrap()
    });
    parts.push(grad_ok("student-kl", &r, 20));

    within(Duration::from_secs(60), start, "gradient suite");
    parts.join(", ")
}

fn knn_exactness() -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7_000);
    let (mut queries, mut mismatches) = (0, 0);
    for b in 0..100 {
        let n = if b == 0 { 10_000 } else { 10f64.powf(rng.random_range(1.0..4.0)).round() as usize };
        let dim = if b == 0 { 128 } else { rng.random_range(1..=128) };
        let metric = if b % 2 == 0 { Metric::Cosine } else { Metric::L2 };
        let entries = random_entries(&mut rng, n, dim, b % 4 == 1);
        let mut bank = MemoryBank::new(dim, metric, Regime::F1Static, 1);
        bank.populate(entries.clone()).unwrap();
        for j in 0..2 {
            let query: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let exclude = (j == 1).then(|| entries[rng.random_range(0..n)].video_id.clone());
            for k in [1, 3, 5] {
                queries += 1;
                let q = NeighborQuery { vector: &query, k, exclude_video_id: exclude.as_deref() };
                match bank.query_knn(&q) {
                    Ok(hits) => {
                        let got: Vec<usize> = hits.iter().map(|h| h.index).collect();
                        mismatches += usize::from(got != brute_force(&entries, metric, &query, k, exclude.as_deref()));
                    }
                    Err(Error::InsufficientEntries { .. }) => {}
                    Err(e) => panic!("bank {b}: {e}"),
                }
            }
        }
    }
    assert_eq!(mismatches, 0, "{mismatches}/{queries} mismatches");
    within(Duration::from_secs(120), start, "kNN check");
    format!("{queries} queries over 100 banks, 0 mismatches")
}

fn intervention_algebra() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3_000);
    let lerp = |a: f64, b: f64, l: f64| l * a + (1.0 - l) * b;
    let split = |rng: &mut ChaCha8Rng, n: usize| {
        let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        m[rng.random_range(0..n)] = true;
        CausalSplit::from_mask(m)
    };
    for _ in 0..1000 {
        let n = rng.random_range(2..9);
        let d = generate_synthetic(&SyntheticSpec { seed: rng.random(), n_instances: 2, n_clips: n, video_dim: 4, text_dim: 3, ..Default::default() })
            .unwrap()
            .instances;
        let (x, p) = (&d[0], &d[1]);
        let (s, ps) = (split(&mut rng, n), split(&mut rng, n));
        let (l0, l1) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let m = mixup_with_lambdas(x, &s, p, &ps, l0, l1).unwrap();
        for (j, &row) in s.causal().iter().enumerate() {
            let prow = ps.causal()[j % ps.causal().len()];
            for c in 0..4 {
                let (a, b) = (x.video.get(row, c), p.video.get(prow, c));
                let v = m.v_star.get(row, c);
                assert_eq!(v, lerp(a, b, l0));
                assert!(a.min(b) <= v && v <= a.max(b));
            }
        }
        for (j, &row) in s.complement().iter().enumerate() {
            for c in 0..4 {
                let a = x.video.get(row, c);
                let pt = ps.complement();
                let e = if pt.is_empty() { a } else { lerp(a, p.video.get(pt[j % pt.len()], c), l1) };
                assert_eq!(m.v_star.get(row, c), e);
            }
        }
        for c in 0..3 {
            assert_eq!(m.q_star[c], lerp(x.question[c], p.question[c], l0));
            assert_eq!(m.a_star[c], lerp(x.answers[x.gold][c], p.answers[p.gold][c], l0));
        }
        let other = mixup_with_lambdas(x, &s, p, &ps, rng.random_range(0.0..=1.0), l1).unwrap();
        assert_eq!(other.t_star, m.t_star);
        let one = mixup_with_lambdas(x, &s, p, &s, 1.0, 1.0).unwrap();
        assert_eq!((&one.v_star, &one.q_star), (&x.video, &x.question));
        let zero = mixup_with_lambdas(x, &s, p, &s, 0.0, 0.0).unwrap();
        assert_eq!((&zero.v_star, &zero.q_star), (&p.video, &p.question));
    }
    for n in [1usize, 4, 8] {
        let a: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l = infonce_loss(&ContrastiveTriplet { anchor: a, negatives: vec![b.clone(); n], positive: b }).unwrap().loss;
        assert!((l - ((n + 1) as f64).ln()).abs() < 1e-12, "N={n}");
    }
    // β = 0 leaves exactly the ERM objective and its gradient
    let d = generate_synthetic(&SyntheticSpec { seed: 4, n_instances: 4, n_clips: 6, video_dim: 8, text_dim: 8, ..Default::default() })
        .unwrap()
        .instances;
    let mut bank = MemoryBank::new(8, Metric::Cosine, Regime::F1Static, 1);
    bank.populate_videos(d.iter().map(|x| (&x.video, x.video_id.as_str()))).unwrap();
    let cfg = InterventionConfig { beta_cl: 0.0, ..Default::default() };
    let base = PcmaModel::new(PcmaConfig {
        video_dim: 8,
        text_dim: 8,
        attention: AttentionConfig { model_dim: 8, n_heads: 2, n_layers: 1, seed: 1 },
        ..Default::default()
    })
    .unwrap();
    let step = |sampler: Option<SceneSampler>| {
        let mut m = base.clone();
        m.params.zero_grads();
        let ctx = StepContext { partner: &d[1], q_r: &d[2].question, sampler };
        (intervention_step(&mut m, &d[0], &ctx, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), m.params)
    };
    let (l1, g1) = step(Some(SceneSampler { bank: &bank, source: MemorySource::Mnse, k: 2, exclude_video_id: None }));
    let (l2, g2) = step(None);
    assert_eq!(l1.total.to_bits(), l1.erm.to_bits());
    assert_eq!(l1, l2);
    assert!(g1.ids().all(|id| g1.grad(id) == g2.grad(id)));
    assert_eq!(total_loss(0.375, 12.0, 0.0).to_bits(), 0.375f64.to_bits());
    "1000 mixup draws exact, ln(1+N) for N in {1,4,8}, beta=0 bit-exact".into()
}

fn sampler_contracts() -> String {
    for (total, moment, per) in [(16usize, 8usize, 2usize), (32, 16, 4)] {
        let d = generate_synthetic(&SyntheticSpec { seed: total as u64, n_instances: 50, frames_per_clip: 8, ..Default::default() }).unwrap();
        for (i, s) in d.saliency.iter().enumerate() {
            let cfg = if total == 16 { MarConfig::mar16(i as u64) } else { MarConfig::mar32(i as u64) };
            let out = mar_sample(s, &cfg).unwrap();
            assert_eq!(out.indices.len(), total);
            assert!(out.indices.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(out.provenance.iter().filter(|p| **p == Provenance::Moment).count(), moment);
            for seg in 0..4 {
                assert_eq!(out.provenance.iter().filter(|p| **p == Provenance::Segment(seg)).count(), per);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut counts = [0usize; 80];
    for _ in 0..10_000 {
        for i in pcma80_resample(80, 16, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let worst = counts.iter().map(|&c| (c as f64 / 1e4 - 0.2).abs()).fold(0.0, f64::max);
    assert!(worst <= 0.02, "frequency deviation {worst}");
    let st = S3Student::new(S3StudentConfig {
        frame_dim: 6,
        text_dim: 5,
        attention: AttentionConfig { model_dim: 8, n_heads: 2, n_layers: 2, seed: 2 },
        select: 4,
    })
    .unwrap();
    let mut drift = 0f64;
    for n in 1..40 {
        let frames = rand_tensor(&mut rng, n, 6).scale(rng.random_range(0.01..20.0));
        let q: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = s3_student_probs(&st, &frames, &q).unwrap().probs.unwrap();
        drift = drift.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    assert!(drift < 1e-6);
    format!("MAR 8+2x4 and 16+4x4, PCMA-80 max deviation {worst:.4}, student sum drift {drift:.1e}")
}

fn learning_run() -> (String, PcmaModel) {
    let start = Instant::now();
    let spec = SyntheticSpec { seed: 50, n_instances: 500, ..Default::default() };
    assert!(spec.noise_std <= 0.1);
    let data = generate_synthetic(&spec).unwrap();
    let mut cfg = ExperimentConfig::new(DatasetSource::Synthetic(spec), 50);
    cfg.intervention.beta_cl = 0.0;
    cfg.optimizer.steps = 300;
    let out = train_on(&cfg, &data.instances).unwrap();
    let acc = out.train.overall.unwrap();
    let mut control = cfg.clone();
    control.optimizer.lr = 0.0;
    let ctl = train_on(&control, &data.instances).unwrap();
    assert_eq!(ctl.train.correct, ctl.initial.correct, "lr=0 moved accuracy");
    assert_eq!(ctl.initial.correct, out.initial.correct);
    within(Duration::from_secs(300), start, "learning run");
    assert!(acc > 0.6, "train accuracy {acc}");
    (
        format!("train accuracy {acc:.3} (init {:.3}), lr=0 control {:.3}", out.initial.overall.unwrap(), ctl.train.overall.unwrap()),
        out.model,
    )
}

fn robustness() -> String {
    let start = Instant::now();
    let (mut drop_a, mut drop_b) = (0.0, 0.0);
    let mut rows = Vec::new();
    let mut separation = (0.0, 0.0, 0usize);
    for seed in 0..ROBUST_SEEDS {
        let spec = SyntheticSpec { seed: 100 + seed, n_instances: ROBUST_TRAIN, ..Default::default() };
        let eval = generate_synthetic(&SyntheticSpec { seed: 1000 + seed, n_instances: 300, ..Default::default() }).unwrap().instances;
        let train_data = generate_synthetic(&spec).unwrap().instances;
        let mut base = ExperimentConfig::new(DatasetSource::Synthetic(spec), seed);
        base.model.attention.seed = seed;
        base.optimizer.steps = ROBUST_STEPS;
        base.intervention.gate_sparsity = ROBUST_SPARSITY;
        let mut cb = base.clone();
        cb.intervention.beta_cl = 0.0;
        let mut ca = base;
        ca.intervention.beta_cl = ROBUST_BETA;
        ca.intervention.memory_source = MemorySource::Mnse;
        ca.mnse.k = ROBUST_K;
        ca.mnse.regime = ROBUST_REGIME;
        let b = train_on(&cb, &train_data).unwrap().model;
        let a = train_on(&ca, &train_data).unwrap().model;
        let r = seen_unseen_protocol(&a, &b, &eval, &ca.intervention, &ca.mnse).unwrap();
        drop_a += r.model_a.unseen_drop;
        drop_b += r.model_b.unseen_drop;
        rows.push(format!("{:.3}/{:.3}", r.model_a.unseen_drop, r.model_b.unseen_drop));

        // contrastive geometry of the intervention-trained model
        let bank = static_bank(&eval, &MnseConfig::default()).unwrap();
        let splits = gate_splits(&a, &eval, &ca.intervention).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, (x, s)) in eval.iter().zip(&splits).enumerate().take(100) {
            let sampler = SceneSampler { bank: &bank, source: MemorySource::Mnse, k: ROBUST_K, exclude_video_id: Some(&x.video_id) };
            let q_r = &eval[(i + 1) % eval.len()].question;
            let (t, _) = build_triplet(&a, &x.video, &x.question, s, &sampler, q_r, 2, &mut rng).unwrap();
            separation.0 += cosine_unchecked(&t.anchor, &t.positive);
            separation.1 += t.negatives.iter().map(|n| cosine_unchecked(&t.anchor, n)).sum::<f64>() / t.negatives.len() as f64;
            separation.2 += 1;
        }
    }
    let n = ROBUST_SEEDS as f64;
    let (ma, mb) = (drop_a / n, drop_b / n);
    let (pos, neg) = (separation.0 / separation.2 as f64, separation.1 / separation.2 as f64);
    within(Duration::from_secs(20 * 60), start, "robustness benchmark");
    assert!(pos > neg, "anchor-positive cosine {pos:.3} vs anchor-negative {neg:.3}");
    assert!(ma <= mb, "mean unseen drop {ma:.4} (beta>0, MNSE) vs {mb:.4} (beta=0); per seed A/B {}", rows.join(" "));
    format!(
        "mean unseen drop {ma:.4} (beta={ROBUST_BETA}, MNSE) <= {mb:.4} (beta=0) over {ROBUST_SEEDS} seeds [A/B {}]; anchor cos positive {pos:.3} > negatives {neg:.3}",
        rows.join(" ")
    )
}

fn proximity() -> String {
    let d = planted(70, 120);
    let (data, pool) = d.instances.split_at(60);
    let bank = static_bank(pool, &MnseConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let (mut near, mut rand_sum, mut count) = (0.0, 0.0, 0usize);
    for (x, mask) in data.iter().zip(&d.causal_masks) {
        let split = CausalSplit::from_mask(mask.clone());
        let m = mnse_do(&x.video, &split, &bank, Target::Complement, 3, Some(&x.video_id), &mut rng).unwrap();
        let r = random_do(&x.video, &split, &bank, Target::Complement, Some(&x.video_id), &mut rng).unwrap();
        for row in split.complement() {
            if count == 500 {
                break;
            }
            near += cosine_unchecked(m.row(row), x.video.row(row));
            rand_sum += cosine_unchecked(r.row(row), x.video.row(row));
            count += 1;
        }
    }
    assert_eq!(count, 500);
    let (a, b) = (near / 500.0, rand_sum / 500.0);
    assert!(a > b, "mnse {a} vs random {b}");
    format!("mean cosine to original over 500 replacements: mnse_do {a:.3} > random_do {b:.3}")
}

fn probe() -> String {
    let leaky = generate_synthetic(&SyntheticSpec { seed: 80, n_instances: 1000, leak_strength: 0.9, ..Default::default() }).unwrap();
    let clean = planted(81, 2000);
    let hi = shortcut_probe(&leaky.instances).unwrap().overall.unwrap();
    let lo = shortcut_probe(&clean.instances).unwrap().overall.unwrap();
    assert!(hi > 0.5, "leak 0.9 probe {hi}");
    assert!((lo - 0.2).abs() <= 0.03, "leak 0 probe {lo}");
    format!("probe {hi:.3} at leak 0.9, {lo:.3} at leak 0")
}

fn cli(dir: &Path, cmd: &str, cfg: &Path, out: &Path) {
    let o = Command::new(env!("CARGO_BIN_EXE_causalvqa"))
        .args([cmd, "--config"])
        .arg(cfg)
        .env("CAUSALVQA_OUTPUT_DIR", out)
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
}

fn determinism() -> String {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = serde_json::json!({
        "dataset": {"synthetic": {"seed": 90, "n_instances": 60, "n_clips": 8, "video_dim": 16, "text_dim": 16}},
        "model": {"video_dim": 16, "text_dim": 16, "attention": {"model_dim": 16, "n_heads": 2, "n_layers": 1}},
        "intervention": {"beta_cl": 0.3},
        "optimizer": {"seed": 9, "steps": 20, "batch_size": 4}
    });
    let path = root.join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let mut compared = 0;
    for cmd in ["gen-data", "train", "probe"] {
        let (a, b) = (root.join(format!("{cmd}-a")), root.join(format!("{cmd}-b")));
        cli(root, cmd, &path, &a);
        cli(root, cmd, &path, &b);
        for f in ["metrics.json", "curves.csv"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{cmd} {f}");
            compared += 1;
        }
    }
    let d = planted(91, 25);
    let manifest = root.join("rt/manifest.json");
    save_dataset(&d.instances, &manifest, Some(&d.saliency)).unwrap();
    let back: Vec<VideoQAInstance> = load_dataset(&manifest).unwrap();
    let bits = |xs: &[VideoQAInstance]| -> Vec<u64> {
        xs.iter().flat_map(|x| x.video.data().iter().chain(&x.question).chain(x.answers.iter().flatten()).map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&back), bits(&d.instances));
    assert_eq!(back, d.instances);
    assert_eq!(load_saliency(&manifest).unwrap(), Some(d.saliency));
    format!("{compared} output files byte-identical across reruns, dataset round trip bit-exact")
}

fn rl_soft(backbone: &PcmaModel) -> String {
    let data = planted(60, 100).instances;
    let mut agent = RlAgent::new(RlAgentConfig { seed: 6, ..Default::default() }).unwrap();
    let r = train_rl(&mut agent, backbone, &data, 500, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert!(r.rewards.iter().all(|x| x.is_finite()), "diverged");
    let rel = (r.mean_pred_loss - r.all_frames_loss) / r.all_frames_loss;
    let line = format!(
        "selected fraction {:.3}, pred_loss {:.4} vs all-frames {:.4} ({:+.1}%)",
        r.mean_selected_fraction,
        r.mean_pred_loss,
        r.all_frames_loss,
        100.0 * rel
    );
    assert!(r.mean_selected_fraction <= 0.5 && rel <= 0.10, "{line}");
    line
}

#[test]
fn acceptance_criteria() {
    let mut run = Run { failures: Vec::new() };
    run.check("criterion 1 gradient suite", true, gradient_suite);
    run.check("criterion 2 kNN exactness", true, knn_exactness);
    run.check("criterion 3 intervention algebra", true, intervention_algebra);
    run.check("criterion 4 sampler contracts", true, sampler_contracts);
    let mut backbone = None;
    run.check("criterion 5 synthetic learning", true, || {
        let (line, model) = learning_run();
        backbone = Some(model);
        line
    });
    run.check("criterion 6 robustness direction", true, robustness);
    run.check("criterion 7 MNSE proximity", true, proximity);
    run.check("criterion 8 shortcut probe", true, probe);
    run.check("criterion 9 determinism and round trip", true, determinism);
    run.check("S3-RL soft criterion", false, || match &backbone {
        Some(m) => rl_soft(m),
        None => panic!("no trained backbone"),
    });
    assert!(run.failures.is_empty(), "failed: {:?}", run.failures);
}
