//! Scene intervener and causal disruptor.
//!
//! A question-conditioned gate splits clips into a causal part `C` and a
//! complement `T`. Two instances are mixed part-wise (`c*`, `q*`, `a*` with
//! `λ0 ~ Beta(α, α)`, `t*` with an independent `λ1 ~ U(0, 1)`), and the mixed
//! video is contrasted against a complement-substituted positive and
//! causal-substituted / question-swapped negatives under InfoNCE.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};
use crate::features::VideoQAInstance;
use crate::mnse::{MemoryBank, NeighborQuery};
use crate::nn::{dot, log_sum_exp, sigmoid, Linear, ParamStore, Tensor2};
use crate::pcma::{pcma_loss, EncodeCache, PcmaModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemorySource {
    /// Uniformly random bank scenes.
    RandomBank,
    /// A scene sampled among the nearest neighbours of the replaced row.
    Mnse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    pub alpha: f64,
    pub beta_cl: f64,
    pub n_negatives: usize,
    pub memory_source: MemorySource,
    pub topk_mode: bool,
    pub k: usize,
    /// Weight of the mean-gate penalty added to the grounding objective.
    pub gate_sparsity: f64,
    pub seed: u64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_cl: 0.1,
            n_negatives: 2,
            memory_source: MemorySource::Mnse,
            topk_mode: false,
            k: 4,
            gate_sparsity: 0.05,
            seed: 0,
        }
    }
}

impl InterventionConfig {
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            errs.push(FieldError::new(format!("{prefix}.alpha"), "must be positive"));
        }
        if !(self.beta_cl >= 0.0 && self.beta_cl.is_finite()) {
            errs.push(FieldError::new(format!("{prefix}.beta_cl"), "must be non-negative"));
        }
        if self.n_negatives == 0 {
            errs.push(FieldError::new(format!("{prefix}.n_negatives"), "must be at least 1"));
        }
        if self.topk_mode && self.k == 0 {
            errs.push(FieldError::new(format!("{prefix}.k"), "must be at least 1 in top-k mode"));
        }
        if !(self.gate_sparsity >= 0.0 && self.gate_sparsity.is_finite()) {
            errs.push(FieldError::new(format!("{prefix}.gate_sparsity"), "must be non-negative"));
        }
        errs
    }

    pub fn selection(&self) -> GateSelection {
        if self.topk_mode {
            GateSelection::TopK(self.k)
        } else {
            GateSelection::Threshold
        }
    }
}

/// Per-clip gate `σ(s · (qᵀ (W v_i + b) + u · v_i + c))` with a fixed gain `s`.
///
/// The logit is bilinear in clip and question, so every clip's score depends
/// on the question, yet linear in the parameters. The gain acts as a larger
/// step size for the gate under Adam, whose updates do not scale with the
/// gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CausalGate {
    /// `W`, `b`: clip features into question space.
    pub video: Linear,
    /// `u`, `c`: question-independent clip score.
    pub score: Linear,
    pub gain: f64,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    video_in: Tensor2,
    question: Vec<f64>,
    pub gates: Vec<f64>,
}

impl CausalGate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        video_dim: usize,
        text_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            video: Linear::new(store, &format!("{name}.video"), video_dim, text_dim, rng)?,
            score: Linear::new(store, &format!("{name}.score"), video_dim, 1, rng)?,
            gain,
        })
    }

    pub fn forward(&self, store: &ParamStore, video: &Tensor2, question: &[f64]) -> Result<(Vec<f64>, GateCache)> {
        let hv = self.video.forward(store, video)?;
        if hv.cols() != question.len() {
            return Err(Error::dim("gate question width", hv.cols(), question.len()));
        }
        let base = self.score.forward(store, video)?;
        let gates: Vec<f64> = (0..video.rows())
            .map(|r| sigmoid(self.gain * (dot(hv.row(r), question) + base.data()[r])))
            .collect();
        Ok((
            gates.clone(),
            GateCache {
                video_in: video.clone(),
                question: question.to_vec(),
                gates,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the video gradient.
    pub fn backward(&self, store: &mut ParamStore, cache: &GateCache, d_gates: &[f64]) -> Result<Tensor2> {
        let n = cache.gates.len();
        let d_logit: Vec<f64> = cache.gates.iter().zip(d_gates).map(|(g, d)| self.gain * d * g * (1.0 - g)).collect();
        let mut d_hv = Tensor2::zeros(n, cache.question.len());
        for (r, dl) in d_logit.iter().enumerate() {
            d_hv.row_mut(r).iter_mut().zip(&cache.question).for_each(|(o, q)| *o = dl * q);
        }
        let mut d_video = self.video.backward(store, &cache.video_in, &d_hv)?;
        let d_base = self.score.backward(store, &cache.video_in, &Tensor2::from_vec(n, 1, d_logit)?)?;
        d_video.add_assign(&d_base)?;
        Ok(d_video)
    }

    /// Zeroes every gate parameter so all gates equal 0.5.
    pub fn zero_out(&self, store: &mut ParamStore) {
        self.video.zero_out(store);
        self.score.zero_out(store);
    }
}

/// How gate values become a hard mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateSelection {
    /// Causal iff `gate >= 0.5`.
    Threshold,
    /// The `k` highest gates, lowest index first on ties.
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalSplit {
    /// `true` marks a causal clip.
    pub mask: Vec<bool>,
    pub gates: Vec<f64>,
}

impl CausalSplit {
    /// A split with placeholder gates (1 on causal clips, 0 elsewhere).
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let gates = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self { mask, gates }
    }

    pub fn from_gates(gates: Vec<f64>, selection: GateSelection) -> Self {
        let mask = match selection {
            GateSelection::Threshold => gates.iter().map(|&g| g >= 0.5).collect(),
            GateSelection::TopK(k) => {
                let mut order: Vec<usize> = (0..gates.len()).collect();
                order.sort_by(|&a, &b| gates[b].total_cmp(&gates[a]).then(a.cmp(&b)));
                let mut mask = vec![false; gates.len()];
                for &i in order.iter().take(k) {
                    mask[i] = true;
                }
                mask
            }
        };
        Self { mask, gates }
    }

    pub fn n_clips(&self) -> usize {
        self.mask.len()
    }

    pub fn causal(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn complement(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    /// Marks the highest-gate clip causal when no clip is.
    pub fn ensure_causal(mut self) -> Self {
        if !self.mask.iter().any(|&b| b) && !self.mask.is_empty() {
            let best = crate::pcma::argmax(&self.gates);
            self.mask[best] = true;
        }
        self
    }
}

pub fn estimate_causal_mask(model: &PcmaModel, instance: &VideoQAInstance) -> Result<CausalSplit> {
    estimate_causal_mask_with(model, &instance.video, &instance.question, GateSelection::Threshold)
}

pub fn estimate_causal_mask_with(
    model: &PcmaModel,
    video: &Tensor2,
    question: &[f64],
    selection: GateSelection,
) -> Result<CausalSplit> {
    if video.cols() != model.cfg.video_dim {
        return Err(Error::dim("video feature width", model.cfg.video_dim, video.cols()));
    }
    if question.len() != model.cfg.text_dim {
        return Err(Error::dim("question width", model.cfg.text_dim, question.len()));
    }
    let (gates, _) = model.gate.forward(&model.params, video, question)?;
    Ok(CausalSplit::from_gates(gates, selection))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixupResult {
    pub c_star: Tensor2,
    pub t_star: Tensor2,
    pub q_star: Vec<f64>,
    /// Mixed gold-answer embedding.
    pub a_star: Vec<f64>,
    pub lambda0: f64,
    pub lambda1: f64,
    pub partner_id: String,
    /// `c*` and `t*` reassembled at the anchor's clip positions.
    pub v_star: Tensor2,
}

fn mix(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect()
}

/// Rows `rows[j % rows.len()]` for `j < count`.
fn cyclic_rows(rows: &[usize], count: usize) -> Vec<usize> {
    (0..count).map(|j| rows[j % rows.len()]).collect()
}

/// Mixup with explicit coefficients.
///
/// Partner causal rows are repeated cyclically or truncated to the
/// anchor's causal count, and likewise for the complement. If the partner
/// has no complement rows, `t*` keeps the anchor's complement.
pub fn mixup_with_lambdas(
    x: &VideoQAInstance,
    split: &CausalSplit,
    partner: &VideoQAInstance,
    partner_split: &CausalSplit,
    lambda0: f64,
    lambda1: f64,
) -> Result<MixupResult> {
    if x.video.cols() != partner.video.cols() || x.text_dim() != partner.text_dim() {
        return Err(Error::dim("mixup partner width", x.video.cols(), partner.video.cols()));
    }
    if split.n_clips() != x.n_clips() {
        return Err(Error::dim("split mask", x.n_clips(), split.n_clips()));
    }
    if partner_split.n_clips() != partner.n_clips() {
        return Err(Error::dim("partner split mask", partner.n_clips(), partner_split.n_clips()));
    }
    let (c, t) = (split.causal(), split.complement());
    let (pc, pt) = (partner_split.causal(), partner_split.complement());
    if c.is_empty() || pc.is_empty() {
        return Err(Error::DegenerateSplit("mixup needs a non-empty causal part on both sides".into()));
    }
    let dim = x.video.cols();
    let mut v_star = Tensor2::zeros(x.n_clips(), dim);
    let mut c_star = Tensor2::zeros(c.len(), dim);
    for (j, (&row, &prow)) in c.iter().zip(&cyclic_rows(&pc, c.len())).enumerate() {
        let m = mix(x.video.row(row), partner.video.row(prow), lambda0);
        c_star.row_mut(j).copy_from_slice(&m);
        v_star.row_mut(row).copy_from_slice(&m);
    }
    let mut t_star = Tensor2::zeros(t.len(), dim);
    let partner_t = if pt.is_empty() { None } else { Some(cyclic_rows(&pt, t.len())) };
    for (j, &row) in t.iter().enumerate() {
        let m = match &partner_t {
            Some(p) => mix(x.video.row(row), partner.video.row(p[j]), lambda1),
            None => x.video.row(row).to_vec(),
        };
        t_star.row_mut(j).copy_from_slice(&m);
        v_star.row_mut(row).copy_from_slice(&m);
    }
    Ok(MixupResult {
        c_star,
        t_star,
        q_star: mix(&x.question, &partner.question, lambda0),
        a_star: mix(&x.answers[x.gold], &partner.answers[partner.gold], lambda0),
        lambda0,
        lambda1,
        partner_id: partner.video_id.clone(),
        v_star,
    })
}

/// Draws `λ0 ~ Beta(α, α)` and `λ1 ~ U(0, 1)` and applies the mixup.
pub fn mixup_intervene<R: Rng + ?Sized>(
    x: &VideoQAInstance,
    split: &CausalSplit,
    partner: &VideoQAInstance,
    partner_split: &CausalSplit,
    alpha: f64,
    rng: &mut R,
) -> Result<MixupResult> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Invalid(format!("Beta({alpha}, {alpha}): {e}")))?;
    let lambda0 = beta.sample(rng).clamp(0.0, 1.0);
    let lambda1 = rng.random_range(0.0..1.0);
    mixup_with_lambdas(x, split, partner, partner_split, lambda0, lambda1)
}

/// Source of substitute scenes for triplet construction.
#[derive(Debug, Clone, Copy)]
pub struct SceneSampler<'a> {
    pub bank: &'a MemoryBank,
    pub source: MemorySource,
    pub k: usize,
    pub exclude_video_id: Option<&'a str>,
}

impl SceneSampler<'_> {
    pub fn draw<R: Rng + ?Sized>(&self, row: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let entry = match self.source {
            MemorySource::RandomBank => self.bank.sample_random_scene(self.exclude_video_id, rng)?,
            MemorySource::Mnse => self.bank.sample_neighbor_scene(
                &NeighborQuery {
                    vector: row,
                    k: self.k,
                    exclude_video_id: self.exclude_video_id,
                },
                rng,
            )?,
        };
        Ok(entry.vector.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTriplet {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

impl ContrastiveTriplet {
    pub fn validate(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(Error::Invalid("triplet needs at least one negative".into()));
        }
        let d = self.anchor.len();
        if self.positive.len() != d {
            return Err(Error::dim("triplet positive", d, self.positive.len()));
        }
        for n in &self.negatives {
            if n.len() != d {
                return Err(Error::dim("triplet negative", d, n.len()));
            }
        }
        Ok(())
    }
}

/// Soft substitution of a set of rows: `V_i + w_i (s_i − V_i)`, where the
/// weight `w_i` is `1 − g_i` (positive) or `g_i` (negative).
#[derive(Debug, Clone)]
struct Substitution {
    rows: Vec<usize>,
    diffs: Vec<Vec<f64>>,
    /// `+1` when the weight is `g_i`, `-1` when it is `1 − g_i`.
    sign: f64,
}

fn substitute<R: Rng + ?Sized>(
    v_star: &Tensor2,
    rows: Vec<usize>,
    gates: &[f64],
    keep_weight: bool,
    sampler: &SceneSampler,
    rng: &mut R,
) -> Result<(Tensor2, Substitution)> {
    let mut out = v_star.clone();
    let mut diffs = Vec::with_capacity(rows.len());
    for &r in &rows {
        let scene = sampler.draw(v_star.row(r), rng)?;
        let w = if keep_weight { gates[r] } else { 1.0 - gates[r] };
        let diff: Vec<f64> = scene.iter().zip(v_star.row(r)).map(|(s, v)| s - v).collect();
        for (o, d) in out.row_mut(r).iter_mut().zip(&diff) {
            *o += w * d;
        }
        diffs.push(diff);
    }
    Ok((
        out,
        Substitution {
            rows,
            diffs,
            sign: if keep_weight { 1.0 } else { -1.0 },
        },
    ))
}

#[derive(Debug, Clone)]
pub struct TripletCache {
    anchor: EncodeCache,
    positive: (EncodeCache, Substitution),
    negatives: Vec<(EncodeCache, Option<Substitution>)>,
}

/// Encodes anchor `(V*, q*)`, positive `(V⁺, q*)` with complement rows
/// substituted and negatives: `(V*, q_r)` always, plus `N − 1`
/// causal-substituted `(V⁻, q*)` draws when `N ≥ 2`.
#[allow(clippy::too_many_arguments)]
pub fn build_triplet<R: Rng + ?Sized>(
    backbone: &PcmaModel,
    v_star: &Tensor2,
    q_star: &[f64],
    split: &CausalSplit,
    sampler: &SceneSampler,
    q_r: &[f64],
    n_negatives: usize,
    rng: &mut R,
) -> Result<(ContrastiveTriplet, TripletCache)> {
    if sampler.bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if n_negatives == 0 {
        return Err(Error::Invalid("n_negatives must be at least 1".into()));
    }
    if backbone.cfg.answer_conditioning {
        return Err(Error::Invalid("triplets need a model without answer conditioning".into()));
    }
    let (anchor, anchor_cache) = backbone.encode(v_star, q_star, None)?;
    let (v_plus, sub_plus) = substitute(v_star, split.complement(), &split.gates, false, sampler, rng)?;
    let (positive, pos_cache) = backbone.encode(&v_plus, q_star, None)?;
    let mut negatives = Vec::with_capacity(n_negatives);
    let mut neg_caches = Vec::with_capacity(n_negatives);
    for _ in 1..n_negatives {
        let (v_minus, sub) = substitute(v_star, split.causal(), &split.gates, true, sampler, rng)?;
        let (neg, cache) = backbone.encode(&v_minus, q_star, None)?;
        negatives.push(neg);
        neg_caches.push((cache, Some(sub)));
    }
    let (neg_q, cache_q) = backbone.encode(v_star, q_r, None)?;
    negatives.push(neg_q);
    neg_caches.push((cache_q, None));
    Ok((
        ContrastiveTriplet {
            anchor,
            positive,
            negatives,
        },
        TripletCache {
            anchor: anchor_cache,
            positive: (pos_cache, sub_plus),
            negatives: neg_caches,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// `−log(exp(a·a⁺) / (exp(a·a⁺) + Σ exp(a·a⁻ₙ)))` over raw dot products.
pub fn infonce_loss(t: &ContrastiveTriplet) -> Result<InfoNce> {
    t.validate()?;
    let mut logits = Vec::with_capacity(1 + t.negatives.len());
    logits.push(dot(&t.anchor, &t.positive));
    logits.extend(t.negatives.iter().map(|n| dot(&t.anchor, n)));
    crate::error::check_finite("InfoNCE similarities", &logits)?;
    let lse = log_sum_exp(&logits);
    // ln(1 + Σ exp(s⁻ − s⁺)) keeps precision when the positive dominates
    let loss = if logits[1..].iter().all(|&l| l <= logits[0]) {
        logits[1..].iter().map(|l| (l - logits[0]).exp()).sum::<f64>().ln_1p()
    } else {
        lse - logits[0]
    };
    let p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let mut d_anchor: Vec<f64> = t.positive.iter().map(|x| (p[0] - 1.0) * x).collect();
    for (n, pn) in t.negatives.iter().zip(&p[1..]) {
        d_anchor.iter_mut().zip(n).for_each(|(d, x)| *d += pn * x);
    }
    Ok(InfoNce {
        loss,
        d_anchor,
        d_positive: t.anchor.iter().map(|a| (p[0] - 1.0) * a).collect(),
        d_negatives: p[1..].iter().map(|pn| t.anchor.iter().map(|a| pn * a).collect()).collect(),
    })
}

/// `erm + β·cl`; exactly `erm` when `β = 0`, whatever `cl` is.
pub fn total_loss(erm: f64, cl: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        erm
    } else {
        erm + beta * cl
    }
}

/// Backpropagates scaled InfoNCE gradients through every branch. Returns
/// the gradient of the gates used by the soft substitutions.
pub fn backward_triplet(
    model: &mut PcmaModel,
    cache: &TripletCache,
    grads: &InfoNce,
    scale: f64,
    n_clips: usize,
) -> Result<Vec<f64>> {
    let sc = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<f64>>();
    let mut d_gates = vec![0.0; n_clips];
    model.backward_encode(&cache.anchor, &sc(&grads.d_anchor))?;
    let mut through = |model: &mut PcmaModel, enc: &EncodeCache, sub: Option<&Substitution>, d: &[f64]| -> Result<()> {
        let g = model.backward_encode(enc, &sc(d))?;
        if let Some(sub) = sub {
            for (&r, diff) in sub.rows.iter().zip(&sub.diffs) {
                d_gates[r] += sub.sign * dot(g.video.row(r), diff);
            }
        }
        Ok(())
    };
    through(model, &cache.positive.0, Some(&cache.positive.1), &grads.d_positive)?;
    for ((enc, sub), d) in cache.negatives.iter().zip(&grads.d_negatives) {
        through(model, enc, sub.as_ref(), d)?;
    }
    Ok(d_gates)
}

/// Loss components of one training instance.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    /// Answer loss on the clean video plus the gate grounding terms.
    pub erm: f64,
    pub cl: f64,
    pub total: f64,
    /// Mixed video, when the contrastive branch ran.
    pub v_star: Option<Tensor2>,
}

/// Everything besides the model that one intervention step needs.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub partner: &'a VideoQAInstance,
    pub q_r: &'a [f64],
    pub sampler: Option<SceneSampler<'a>>,
}

/// One instance of the combined objective, accumulating gradients into
/// `model.params`.
///
/// The ERM part is the clean answer loss, the answer loss on the
/// gate-scaled video `g ⊙ V` and `ρ · mean(g)`. With `β > 0` the InfoNCE
/// branch runs on the mixup of `x` with `ctx.partner`.
pub fn intervention_step<R: Rng + ?Sized>(
    model: &mut PcmaModel,
    x: &VideoQAInstance,
    ctx: &StepContext,
    cfg: &InterventionConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    let tau = model.cfg.temperature;
    let (clean, clean_cache) = model.forward(x)?;
    let (clean_loss, d_clean) = pcma_loss(&clean, x.gold, tau)?;
    model.backward(&clean_cache, &d_clean)?;

    let gate = model.gate;
    let (gates, gate_cache) = gate.forward(&model.params, &x.video, &x.question)?;
    let n = gates.len();
    let mut scaled = x.video.clone();
    for (r, g) in gates.iter().enumerate() {
        scaled.row_mut(r).iter_mut().for_each(|v| *v *= g);
    }
    let (grounded, grounded_cache) = model.forward_parts(&scaled, &x.question, &x.answers)?;
    let (grounded_loss, d_grounded) = pcma_loss(&grounded, x.gold, tau)?;
    let d_scaled = model.backward(&grounded_cache, &d_grounded)?.video;
    let rho = cfg.gate_sparsity;
    let mut d_gates: Vec<f64> = (0..n)
        .map(|r| dot(d_scaled.row(r), x.video.row(r)) + rho / n as f64)
        .collect();
    let erm = clean_loss + grounded_loss + rho * gates.iter().sum::<f64>() / n as f64;

    let mut cl = 0.0;
    let mut v_star = None;
    if cfg.beta_cl != 0.0 {
        let sampler = ctx
            .sampler
            .ok_or_else(|| Error::Invalid("contrastive branch needs a scene bank".into()))?;
        let selection = cfg.selection();
        let split = CausalSplit::from_gates(gates.clone(), selection).ensure_causal();
        let partner_split = estimate_causal_mask_with(model, &ctx.partner.video, &ctx.partner.question, selection)?
            .ensure_causal();
        let mixed = mixup_intervene(x, &split, ctx.partner, &partner_split, cfg.alpha, rng)?;
        let (triplet, cache) = build_triplet(
            model,
            &mixed.v_star,
            &mixed.q_star,
            &split,
            &sampler,
            ctx.q_r,
            cfg.n_negatives,
            rng,
        )?;
        let nce = infonce_loss(&triplet)?;
        cl = nce.loss;
        let dg = backward_triplet(model, &cache, &nce, cfg.beta_cl, n)?;
        d_gates.iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
        v_star = Some(mixed.v_star);
    }
    gate.backward(&mut model.params, &gate_cache, &d_gates)?;
    Ok(StepLosses {
        erm,
        cl,
        total: total_loss(erm, cl, cfg.beta_cl),
        v_star,
    })
}
