use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};
use crate::features::{VideoQAInstance, N_ANSWERS};
use crate::nn::{
    dot, relu, relu_backward, softmax, Adam, AdamConfig, AttentionCache, AttentionConfig, LayerNorm, Linear,
    MultiHeadAttention, ParamStore, Tensor2,
};
use crate::nn::norm::LayerNormCache;
use crate::pcma::{pcma_loss, PcmaModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlAgentConfig {
    pub frame_dim: usize,
    pub text_dim: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub hidden: usize,
    pub max_steps: usize,
    /// Weight of the selection ratio in the reward.
    pub gamma: f64,
    pub lr: f64,
    /// Decay of the moving-average reward baseline.
    pub baseline_momentum: f64,
    pub seed: u64,
}

impl Default for RlAgentConfig {
    fn default() -> Self {
        Self {
            frame_dim: 32,
            text_dim: 32,
            model_dim: 32,
            n_heads: 2,
            ffn_dim: 64,
            hidden: 32,
            max_steps: 8,
            gamma: 0.5,
            lr: 3e-3,
            baseline_momentum: 0.9,
            seed: 0,
        }
    }
}

impl RlAgentConfig {
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = AttentionConfig {
            model_dim: self.model_dim,
            n_heads: self.n_heads,
            n_layers: 1,
            seed: self.seed,
        }
        .field_errors(prefix);
        for (name, v) in [
            ("frame_dim", self.frame_dim),
            ("text_dim", self.text_dim),
            ("ffn_dim", self.ffn_dim),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                errs.push(FieldError::new(format!("{prefix}.{name}"), "must be positive"));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            errs.push(FieldError::new(format!("{prefix}.gamma"), "must be non-negative"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push(FieldError::new(format!("{prefix}.lr"), "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            errs.push(FieldError::new(format!("{prefix}.baseline_momentum"), "must lie in [0, 1)"));
        }
        errs
    }
}

/// State encoder (one transformer-encoder block over the buffer) plus a
/// two-layer policy MLP.
#[derive(Debug, Clone)]
pub struct RlAgent {
    pub cfg: RlAgentConfig,
    pub params: ParamStore,
    frame_in: Linear,
    text_in: Linear,
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln2: LayerNorm,
    pol1: Linear,
    pol2: Linear,
    frame_key: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlAction {
    Select(usize),
    Stop,
}

struct PolicyPass {
    /// Unselected frames, in pool order; the last logit is STOP.
    available: Vec<usize>,
    probs: Vec<f64>,
    cache: PolicyCache,
}

struct PolicyCache {
    buffer_frames: Tensor2,
    question_in: Tensor2,
    x0: Tensor2,
    attn: AttentionCache,
    ln1: LayerNormCache,
    x1: Tensor2,
    ffn_pre: Tensor2,
    ffn_act: Tensor2,
    ln2: LayerNormCache,
    state: Vec<f64>,
    pol_pre: Tensor2,
    pol_act: Tensor2,
    u: Vec<f64>,
    keys_in: Tensor2,
    keys: Tensor2,
}

impl RlAgent {
    pub fn new(cfg: RlAgentConfig) -> Result<Self> {
        let errs = cfg.field_errors("s3_rl");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new();
        let d = cfg.model_dim;
        let acfg = AttentionConfig {
            model_dim: d,
            n_heads: cfg.n_heads,
            n_layers: 1,
            seed: cfg.seed,
        };
        Ok(Self {
            frame_in: Linear::new(&mut p, "state.frame_in", cfg.frame_dim, d, &mut rng)?,
            text_in: Linear::new(&mut p, "state.text_in", cfg.text_dim, d, &mut rng)?,
            attn: MultiHeadAttention::new(&mut p, "state.attn", &acfg, &mut rng)?,
            ln1: LayerNorm::new(&mut p, "state.ln1", d, &mut rng)?,
            ffn1: Linear::new(&mut p, "state.ffn1", d, cfg.ffn_dim, &mut rng)?,
            ffn2: Linear::new(&mut p, "state.ffn2", cfg.ffn_dim, d, &mut rng)?,
            ln2: LayerNorm::new(&mut p, "state.ln2", d, &mut rng)?,
            pol1: Linear::new(&mut p, "policy.l1", d, cfg.hidden, &mut rng)?,
            pol2: Linear::new(&mut p, "policy.l2", cfg.hidden, d + 1, &mut rng)?,
            frame_key: Linear::new(&mut p, "policy.frame_key", cfg.frame_dim, d, &mut rng)?,
            params: p,
            cfg,
        })
    }

    /// Last row of the encoder output over `[question; selected frames]`.
    pub fn state(&self, question: &[f64], pool: &Tensor2, selected: &[usize]) -> Result<Vec<f64>> {
        Ok(self.encode(question, &pool.select_rows(selected))?.0)
    }

    #[allow(clippy::type_complexity)]
    fn encode(
        &self,
        question: &[f64],
        buffer_frames: &Tensor2,
    ) -> Result<(Vec<f64>, (Tensor2, Tensor2, AttentionCache, LayerNormCache, Tensor2, Tensor2, Tensor2, LayerNormCache))>
    {
        let question_in = Tensor2::row_vector(question);
        let mut rows = self.text_in.forward(&self.params, &question_in)?.to_rows();
        if buffer_frames.rows() > 0 {
            rows.extend(self.frame_in.forward(&self.params, buffer_frames)?.to_rows());
        }
        let x0 = Tensor2::from_rows(&rows)?;
        let (a, attn) = self.attn.forward(&self.params, &x0, &x0)?;
        let (x1, ln1) = self.ln1.forward(&self.params, &x0.add(&a)?)?;
        let ffn_pre = self.ffn1.forward(&self.params, &x1)?;
        let ffn_act = relu(&ffn_pre);
        let f = self.ffn2.forward(&self.params, &ffn_act)?;
        let (x2, ln2) = self.ln2.forward(&self.params, &x1.add(&f)?)?;
        let state = x2.row(x2.rows() - 1).to_vec();
        Ok((state, (question_in, x0, attn, ln1, x1, ffn_pre, ffn_act, ln2)))
    }

    fn policy(&self, question: &[f64], pool: &Tensor2, selected: &[usize]) -> Result<PolicyPass> {
        let buffer_frames = pool.select_rows(selected);
        let (state, (question_in, x0, attn, ln1, x1, ffn_pre, ffn_act, ln2)) = self.encode(question, &buffer_frames)?;
        let pol_pre = self.pol1.forward(&self.params, &Tensor2::row_vector(&state))?;
        let pol_act = relu(&pol_pre);
        let out = self.pol2.forward(&self.params, &pol_act)?.into_data();
        let d = self.cfg.model_dim;
        let u = out[..d].to_vec();
        let available: Vec<usize> = (0..pool.rows()).filter(|i| !selected.contains(i)).collect();
        let keys_in = pool.select_rows(&available);
        let keys = if available.is_empty() {
            Tensor2::zeros(0, d)
        } else {
            self.frame_key.forward(&self.params, &keys_in)?
        };
        let mut logits: Vec<f64> = keys.iter_rows().map(|k| dot(&u, k)).collect();
        logits.push(out[d]);
        crate::error::check_finite("policy logits", &logits)?;
        let probs = softmax(&logits);
        Ok(PolicyPass {
            available,
            probs,
            cache: PolicyCache {
                buffer_frames,
                question_in,
                x0,
                attn,
                ln1,
                x1,
                ffn_pre,
                ffn_act,
                ln2,
                state,
                pol_pre,
                pol_act,
                u,
                keys_in,
                keys,
            },
        })
    }

    fn backward(&mut self, c: &PolicyCache, d_logits: &[f64]) -> Result<()> {
        let d = self.cfg.model_dim;
        let n_av = c.keys.rows();
        let mut d_out = vec![0.0; d + 1];
        d_out[d] = d_logits[n_av];
        let mut d_keys = Tensor2::zeros(n_av, d);
        for j in 0..n_av {
            let g = d_logits[j];
            for (o, k) in d_out[..d].iter_mut().zip(c.keys.row(j)) {
                *o += g * k;
            }
            for (o, u) in d_keys.row_mut(j).iter_mut().zip(&c.u) {
                *o = g * u;
            }
        }
        if n_av > 0 {
            self.frame_key.backward(&mut self.params, &c.keys_in, &d_keys)?;
        }
        let d_act = self.pol2.backward(&mut self.params, &c.pol_act, &Tensor2::row_vector(&d_out))?;
        let d_pre = relu_backward(&c.pol_pre, &d_act);
        let d_state = self
            .pol1
            .backward(&mut self.params, &Tensor2::row_vector(&c.state), &d_pre)?;
        let rows = c.x0.rows();
        let mut d_x2 = Tensor2::zeros(rows, d);
        d_x2.row_mut(rows - 1).copy_from_slice(d_state.row(0));
        let d_s2 = self.ln2.backward(&mut self.params, &c.ln2, &d_x2)?;
        let d_act = self.ffn2.backward(&mut self.params, &c.ffn_act, &d_s2)?;
        let d_pre = relu_backward(&c.ffn_pre, &d_act);
        let mut d_x1 = self.ffn1.backward(&mut self.params, &c.x1, &d_pre)?;
        d_x1.add_assign(&d_s2)?;
        let d_s1 = self.ln1.backward(&mut self.params, &c.ln1, &d_x1)?;
        let (dq, dkv) = self.attn.backward(&mut self.params, &c.attn, &d_s1)?;
        let mut d_x0 = d_s1.add(&dq)?;
        d_x0.add_assign(&dkv)?;
        self.text_in
            .backward(&mut self.params, &c.question_in, &d_x0.select_rows(&[0]))?;
        if rows > 1 {
            let idx: Vec<usize> = (1..rows).collect();
            self.frame_in
                .backward(&mut self.params, &c.buffer_frames, &d_x0.select_rows(&idx))?;
        }
        Ok(())
    }

    /// `log π(action | selected)`.
    pub fn log_prob(&self, question: &[f64], pool: &Tensor2, selected: &[usize], action: RlAction) -> Result<f64> {
        let pass = self.policy(question, pool, selected)?;
        Ok(pass.probs[action_slot(&pass.available, action)?].ln())
    }

    /// Accumulates `scale · ∇ log π(action | selected)`.
    pub fn accumulate_log_prob_grad(
        &mut self,
        question: &[f64],
        pool: &Tensor2,
        selected: &[usize],
        action: RlAction,
        scale: f64,
    ) -> Result<()> {
        let pass = self.policy(question, pool, selected)?;
        let slot = action_slot(&pass.available, action)?;
        let d: Vec<f64> = pass
            .probs
            .iter()
            .enumerate()
            .map(|(i, p)| scale * (if i == slot { 1.0 } else { 0.0 } - p))
            .collect();
        self.backward(&pass.cache, &d)
    }
}

fn action_slot(available: &[usize], action: RlAction) -> Result<usize> {
    match action {
        RlAction::Stop => Ok(available.len()),
        RlAction::Select(f) => available
            .iter()
            .position(|&a| a == f)
            .ok_or_else(|| Error::Invalid(format!("frame {f} is not available"))),
    }
}

/// One agent episode. The buffer is the question embedding followed by the
/// selected frames in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct RlEpisodeState {
    pub question: Vec<f64>,
    pub selected: Vec<usize>,
    pub state: Vec<f64>,
    pub steps: usize,
    pub max_steps: usize,
    pub done: bool,
    /// `(selected before the step, action taken)` per step.
    pub history: Vec<(Vec<usize>, RlAction)>,
}

impl RlEpisodeState {
    pub fn new(agent: &RlAgent, question: &[f64], pool: &Tensor2) -> Result<Self> {
        Ok(Self {
            question: question.to_vec(),
            selected: Vec::new(),
            state: agent.state(question, pool, &[])?,
            steps: 0,
            max_steps: agent.cfg.max_steps,
            done: agent.cfg.max_steps == 0,
            history: Vec::new(),
        })
    }

    pub fn buffer_len(&self) -> usize {
        1 + self.selected.len()
    }
}

/// Samples one action and applies it.
pub fn s3_rl_step<R: Rng + ?Sized>(
    episode: &mut RlEpisodeState,
    pool: &Tensor2,
    agent: &RlAgent,
    rng: &mut R,
) -> Result<RlAction> {
    if episode.done {
        return Err(Error::EpisodeDone);
    }
    let pass = agent.policy(&episode.question, pool, &episode.selected)?;
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    let mut slot = pass.probs.len() - 1;
    for (i, p) in pass.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            slot = i;
            break;
        }
    }
    let action = if slot == pass.available.len() {
        RlAction::Stop
    } else {
        RlAction::Select(pass.available[slot])
    };
    episode.history.push((episode.selected.clone(), action));
    episode.steps += 1;
    match action {
        RlAction::Stop => episode.done = true,
        RlAction::Select(f) => {
            episode.selected.push(f);
            episode.state = agent.state(&episode.question, pool, &episode.selected)?;
        }
    }
    if episode.steps >= episode.max_steps {
        episode.done = true;
    }
    Ok(action)
}

/// `−pred_loss − γ · |selected| / n_total`.
pub fn s3_rl_reward(episode: &RlEpisodeState, pred_loss: f64, n_total: usize, gamma: f64) -> Result<f64> {
    if !episode.done {
        return Err(Error::EpisodeNotDone);
    }
    let ratio = if n_total == 0 { 0.0 } else { episode.selected.len() as f64 / n_total as f64 };
    Ok(-pred_loss - gamma * ratio)
}

/// Backbone answer loss on the selected frames; with nothing selected the
/// prediction is uniform and the loss is `ln 5`.
pub fn pred_loss_on_selection(backbone: &PcmaModel, x: &VideoQAInstance, selected: &[usize]) -> Result<f64> {
    if selected.is_empty() {
        return Ok((N_ANSWERS as f64).ln());
    }
    let mut idx = selected.to_vec();
    idx.sort_unstable();
    let (scores, _) = backbone.forward_parts(&x.video.select_rows(&idx), &x.question, &x.answers)?;
    Ok(pcma_loss(&scores, x.gold, backbone.cfg.temperature)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RlReport {
    pub rewards: Vec<f64>,
    /// Averages over the final fifth of episodes.
    pub mean_selected_fraction: f64,
    pub mean_pred_loss: f64,
    pub all_frames_loss: f64,
}

/// REINFORCE with a moving-average baseline against a frozen backbone.
pub fn train_rl<R: Rng + ?Sized>(
    agent: &mut RlAgent,
    backbone: &PcmaModel,
    data: &[VideoQAInstance],
    episodes: usize,
    rng: &mut R,
) -> Result<RlReport> {
    if data.is_empty() {
        return Err(Error::Invalid("RL training needs data".into()));
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr: agent.cfg.lr,
            ..AdamConfig::default()
        },
        &agent.params,
    );
    let mut baseline: Option<f64> = None;
    let m = agent.cfg.baseline_momentum;
    let tail_from = episodes - episodes / 5;
    let (mut frac_sum, mut loss_sum, mut full_sum, mut tail) = (0.0, 0.0, 0.0, 0usize);
    let mut rewards = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let x = &data[rng.random_range(0..data.len())];
        let mut episode = RlEpisodeState::new(agent, &x.question, &x.video)?;
        while !episode.done {
            s3_rl_step(&mut episode, &x.video, agent, rng)?;
        }
        let loss = pred_loss_on_selection(backbone, x, &episode.selected)?;
        let reward = s3_rl_reward(&episode, loss, x.n_clips(), agent.cfg.gamma)?;
        if !reward.is_finite() {
            return Err(Error::Diverged { step: ep });
        }
        let b = baseline.unwrap_or(reward);
        let advantage = reward - b;
        baseline = Some(m * b + (1.0 - m) * reward);
        agent.params.zero_grads();
        // minimizing −A·log π
        for (selected, action) in &episode.history {
            agent.accumulate_log_prob_grad(&x.question, &x.video, selected, *action, -advantage)?;
        }
        opt.step(&mut agent.params);
        rewards.push(reward);
        if ep >= tail_from {
            tail += 1;
            frac_sum += episode.selected.len() as f64 / x.n_clips() as f64;
            loss_sum += loss;
            full_sum += pred_loss_on_selection(backbone, x, &(0..x.n_clips()).collect::<Vec<_>>())?;
        }
    }
    let t = tail.max(1) as f64;
    Ok(RlReport {
        rewards,
        mean_selected_fraction: frac_sum / t,
        mean_pred_loss: loss_sum / t,
        all_frames_loss: full_sum / t,
    })
}
