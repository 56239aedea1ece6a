//! Clipped-surrogate policy optimization: rollout storage, two-stream
//! GAE, the objective with entropy bonus, distribution math for both action
//! heads, and the minibatch update loop.
//!
//! Rewards arrive in two streams (task reward and a curiosity term stored
//! separately). Each stream gets its own discount and its own value head;
//! their advantages are summed before normalization.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{
    adam_update, lr_at, recast, sc, softmax_rows, to64, ActorCritic, AdamState, HeadKind,
    LrMode, LrSchedule, Scalar,
};

/// Clip, discount, batching, and loss-weight settings for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub epsilon: f64,
    /// Initial entropy coefficient; decays with the learning-rate schedule.
    pub entropy_coef: f64,
    pub gamma: f64,
    /// Discount for the curiosity reward stream.
    pub intrinsic_gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub horizon: usize,
    pub value_coef: f64,
    pub normalize_advantages: bool,
    /// Global L2 gradient-norm ceiling per minibatch step; 0 disables.
    /// Without it the value heads, which regress targets in the thousands,
    /// flood the shared trunk early in training.
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            epsilon: 0.2,
            entropy_coef: 0.03,
            gamma: 0.99,
            intrinsic_gamma: 0.99,
            lambda: 0.95,
            epochs: 3,
            minibatch_size: 1024,
            horizon: 512,
            value_coef: 0.5,
            normalize_advantages: true,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        for (name, v) in [("gamma", self.gamma), ("intrinsic_gamma", self.intrinsic_gamma), ("lambda", self.lambda)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} {v} outside (0, 1]")));
            }
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.horizon == 0 {
            return Err(Error::Config("epochs, minibatch_size and horizon must be positive".into()));
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0) {
            return Err(Error::Config("loss coefficients must be nonnegative".into()));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return Err(Error::Config(format!(
                "max_grad_norm {} must be finite and nonnegative",
                self.max_grad_norm
            )));
        }
        Ok(())
    }
}

/// Scale `grads` so its global L2 norm is at most `max_norm` (0 disables).
/// Returns the pre-clip norm. The norm is accumulated in f64 so f32 nets
/// clip at the same boundary as f64 ones.
pub fn clip_global_norm<S: Scalar>(grads: &mut [S], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| to64(g) * to64(g)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = sc::<S>(max_norm / norm);
        for g in grads.iter_mut() {
            *g = *g * scale;
        }
    }
    norm
}

/// Fixed-capacity on-policy store, written once per step and read-only
/// during the update. Index layout is time-major: step t of instance i
/// lives at `t * num_instances + i`.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub discrete: bool,
    pub horizon: usize,
    pub num_instances: usize,
    pub obs: Vec<f32>,
    /// Raw pre-clamp action vectors; unused when `discrete`.
    pub actions: Vec<f32>,
    /// Zero-based action indices; unused when continuous.
    pub action_ids: Vec<u8>,
    pub log_prob_old: Vec<f32>,
    pub value_ext_old: Vec<f32>,
    pub value_int_old: Vec<f32>,
    pub reward_ext: Vec<f32>,
    pub reward_int: Vec<f32>,
    /// Stream ended by the agent's own terminal case: bootstrap zero.
    pub terminal: Vec<bool>,
    /// Stream cut for outside reasons: bootstrap `bootstrap_*`.
    pub truncated: Vec<bool>,
    /// Sample belongs to a live stream; inactive samples never train.
    pub active: Vec<bool>,
    pub bootstrap_ext: Vec<f32>,
    pub bootstrap_int: Vec<f32>,
    /// Value estimates of the observation after the final stored step.
    pub final_value_ext: Vec<f32>,
    pub final_value_int: Vec<f32>,
    steps: usize,
}

/// One step's worth of records across every instance.
#[derive(Debug, Clone, Copy)]
pub struct StepBatch<'a> {
    pub obs: &'a [f32],
    pub actions: &'a [f32],
    pub action_ids: &'a [u8],
    pub log_probs: &'a [f32],
    pub values_ext: &'a [f32],
    pub values_int: &'a [f32],
    pub rewards_ext: &'a [f32],
    pub rewards_int: &'a [f32],
    pub terminal: &'a [bool],
    pub truncated: &'a [bool],
    pub active: &'a [bool],
    pub bootstrap_ext: &'a [f32],
    pub bootstrap_int: &'a [f32],
}

impl RolloutBuffer {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        discrete: bool,
        horizon: usize,
        num_instances: usize,
    ) -> Self {
        let cap = horizon * num_instances;
        RolloutBuffer {
            obs_dim,
            act_dim,
            discrete,
            horizon,
            num_instances,
            obs: Vec::with_capacity(cap * obs_dim),
            actions: Vec::with_capacity(if discrete { 0 } else { cap * act_dim }),
            action_ids: Vec::with_capacity(if discrete { cap } else { 0 }),
            log_prob_old: Vec::with_capacity(cap),
            value_ext_old: Vec::with_capacity(cap),
            value_int_old: Vec::with_capacity(cap),
            reward_ext: Vec::with_capacity(cap),
            reward_int: Vec::with_capacity(cap),
            terminal: Vec::with_capacity(cap),
            truncated: Vec::with_capacity(cap),
            active: Vec::with_capacity(cap),
            bootstrap_ext: Vec::with_capacity(cap),
            bootstrap_int: Vec::with_capacity(cap),
            final_value_ext: vec![0.0; num_instances],
            final_value_int: vec![0.0; num_instances],
            steps: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.horizon * self.num_instances
    }

    pub fn steps_written(&self) -> usize {
        self.steps
    }

    pub fn is_full(&self) -> bool {
        self.steps == self.horizon
    }

    pub fn clear(&mut self) {
        self.obs.clear();
        self.actions.clear();
        self.action_ids.clear();
        self.log_prob_old.clear();
        self.value_ext_old.clear();
        self.value_int_old.clear();
        self.reward_ext.clear();
        self.reward_int.clear();
        self.terminal.clear();
        self.truncated.clear();
        self.active.clear();
        self.bootstrap_ext.clear();
        self.bootstrap_int.clear();
        self.steps = 0;
    }

    pub fn push_step(&mut self, batch: &StepBatch<'_>) -> Result<()> {
        if self.is_full() {
            return Err(Error::Lifecycle("rollout buffer is already full".into()));
        }
        let n = self.num_instances;
        let action_values_ok = if self.discrete {
            batch.action_ids.len() == n
        } else {
            batch.actions.len() == n * self.act_dim
        };
        if batch.obs.len() != n * self.obs_dim
            || !action_values_ok
            || batch.log_probs.len() != n
            || batch.values_ext.len() != n
            || batch.values_int.len() != n
            || batch.rewards_ext.len() != n
            || batch.rewards_int.len() != n
            || batch.terminal.len() != n
            || batch.truncated.len() != n
            || batch.active.len() != n
            || batch.bootstrap_ext.len() != n
            || batch.bootstrap_int.len() != n
        {
            return Err(Error::Shape("step batch arrays disagree with the pool size".into()));
        }
        self.obs.extend_from_slice(batch.obs);
        if self.discrete {
            self.action_ids.extend_from_slice(batch.action_ids);
        } else {
            self.actions.extend_from_slice(batch.actions);
        }
        self.log_prob_old.extend_from_slice(batch.log_probs);
        self.value_ext_old.extend_from_slice(batch.values_ext);
        self.value_int_old.extend_from_slice(batch.values_int);
        self.reward_ext.extend_from_slice(batch.rewards_ext);
        self.reward_int.extend_from_slice(batch.rewards_int);
        self.terminal.extend_from_slice(batch.terminal);
        self.truncated.extend_from_slice(batch.truncated);
        self.active.extend_from_slice(batch.active);
        self.bootstrap_ext.extend_from_slice(batch.bootstrap_ext);
        self.bootstrap_int.extend_from_slice(batch.bootstrap_int);
        self.steps += 1;
        Ok(())
    }

    pub fn set_final_bootstrap(&mut self, values_ext: &[f32], values_int: &[f32]) -> Result<()> {
        if values_ext.len() != self.num_instances || values_int.len() != self.num_instances {
            return Err(Error::Shape("final bootstrap arrays disagree with the pool size".into()));
        }
        self.final_value_ext.copy_from_slice(values_ext);
        self.final_value_int.copy_from_slice(values_int);
        Ok(())
    }
}

/// GAE over one trajectory. `values` carries one bootstrap entry beyond the
/// horizon (`values[T]` is the value after the last step, zeroed by the
/// caller for true terminals). Returns (advantages, returns).
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 || dones.len() != t_len {
        return Err(Error::Shape(format!(
            "GAE lengths disagree: {} rewards, {} values, {} dones",
            t_len,
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; t_len];
    let mut carry = 0.0;
    for t in (0..t_len).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * cont - values[t];
        carry = delta + gamma * lambda * cont * carry;
        advantages[t] = carry;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// Clamp a probability ratio into [1 - eps, 1 + eps].
#[inline]
pub fn clip_ratio(ratio: f64, epsilon: f64) -> f64 {
    ratio.clamp(1.0 - epsilon, 1.0 + epsilon)
}

/// Per-batch health numbers reported with every loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoDiagnostics {
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub surrogate: f64,
}

/// The scalar objective: minus (mean clipped surrogate plus entropy bonus)
/// plus the weighted value loss.
pub fn ppo_objective(
    log_prob_new: &[f64],
    log_prob_old: &[f64],
    advantages: &[f64],
    entropy: f64,
    entropy_coef: f64,
    value_loss: f64,
    value_coef: f64,
    epsilon: f64,
) -> Result<(f64, PpoDiagnostics)> {
    let n = log_prob_new.len();
    if log_prob_old.len() != n || advantages.len() != n || n == 0 {
        return Err(Error::Shape("objective batch arrays disagree".into()));
    }
    if log_prob_new.iter().chain(log_prob_old).any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("log-probabilities must be finite".into()));
    }
    let mut surrogate = 0.0;
    let mut clipped = 0usize;
    let mut ratio_sum = 0.0;
    for i in 0..n {
        let ratio = (log_prob_new[i] - log_prob_old[i]).exp();
        let clip = clip_ratio(ratio, epsilon);
        surrogate += (ratio * advantages[i]).min(clip * advantages[i]);
        ratio_sum += ratio;
        if (ratio - clip).abs() > 0.0 {
            clipped += 1;
        }
    }
    surrogate /= n as f64;
    let loss = -(surrogate + entropy_coef * entropy) + value_coef * value_loss;
    Ok((
        loss,
        PpoDiagnostics {
            clip_fraction: clipped as f64 / n as f64,
            mean_ratio: ratio_sum / n as f64,
            surrogate,
        },
    ))
}

/// Mean policy entropy of a batch of distribution rows.
pub fn policy_entropy(head: HeadKind, head_out: &[f64], log_std: &[f64], batch: usize) -> f64 {
    match head {
        HeadKind::Continuous { dim } => {
            debug_assert_eq!(log_std.len(), dim);
            let half_ln_2pi_e = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
            log_std.iter().map(|ls| half_ln_2pi_e + ls).sum()
        }
        HeadKind::Discrete { n } => {
            let probs = softmax_rows(head_out, batch);
            let mut total = 0.0;
            for bi in 0..batch {
                let row = &probs[bi * n..(bi + 1) * n];
                total -= row.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
            }
            total / batch as f64
        }
    }
}

/// Normalize in place to mean zero and unit standard deviation. Degenerate
/// batches (fewer than two samples or zero spread) are only centered.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len();
    if n == 0 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    for a in adv.iter_mut() {
        *a -= mean;
    }
    if n < 2 {
        return;
    }
    let var = adv.iter().map(|a| a * a).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std > 1e-12 {
        for a in adv.iter_mut() {
            *a /= std;
        }
    }
}

/// Log-density of a diagonal Gaussian and its gradients with respect to the
/// mean and the log standard deviation.
pub fn gaussian_log_prob_grad<S: Scalar>(
    mean: &[S],
    log_std: &[S],
    action: &[S],
) -> (S, Vec<S>, Vec<S>) {
    let half_ln_2pi = sc::<S>(0.5 * (2.0 * std::f64::consts::PI).ln());
    let mut lp = S::zero();
    let mut d_mean = Vec::with_capacity(mean.len());
    let mut d_log_std = Vec::with_capacity(mean.len());
    for i in 0..mean.len() {
        let std = log_std[i].exp();
        let z = (action[i] - mean[i]) / std;
        lp = lp - (sc::<S>(0.5) * z * z + log_std[i] + half_ln_2pi);
        d_mean.push(z / std);
        d_log_std.push(z * z - S::one());
    }
    (lp, d_mean, d_log_std)
}

/// Log-probability of one categorical draw plus its gradient in logits and
/// the softmax row itself.
pub fn categorical_log_prob_grad<S: Scalar>(logits: &[S], action: usize) -> (S, Vec<S>, Vec<S>) {
    let max = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    let exps: Vec<S> = logits
        .iter()
        .map(|&v| {
            let e = (v - max).exp();
            sum += e;
            e
        })
        .collect();
    let probs: Vec<S> = exps.iter().map(|&e| e / sum).collect();
    let lp = logits[action] - max - sum.ln();
    let d_logits = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| if j == action { S::one() - p } else { -p })
        .collect();
    (lp, d_logits, probs)
}

/// Gaussian sampling, or the distribution mode when `deterministic`.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    /// Raw (pre-clamp) action rows, batch x act_dim; empty for discrete.
    pub actions: Vec<f64>,
    /// Zero-based category choices; empty for continuous.
    pub action_ids: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values_ext: Vec<f64>,
    pub values_int: Vec<f64>,
}

/// Run the policy on a batch of observations and draw one action per row.
pub fn sample_policy<S: Scalar>(
    net: &ActorCritic<S>,
    obs: &[S],
    batch: usize,
    rng: &mut ChaCha8Rng,
    deterministic: bool,
) -> Result<SampledBatch> {
    let trace = net.forward(obs, batch)?;
    let act = net.head.act_dim();
    let mut out = SampledBatch {
        actions: Vec::new(),
        action_ids: Vec::new(),
        log_probs: Vec::with_capacity(batch),
        values_ext: trace.value_ext.iter().map(|&v| to64(v)).collect(),
        values_int: trace.value_int.iter().map(|&v| to64(v)).collect(),
    };
    match net.head {
        HeadKind::Continuous { dim } => {
            out.actions.reserve(batch * dim);
            for bi in 0..batch {
                let mean = &trace.head_out[bi * act..(bi + 1) * act];
                let mut action = Vec::with_capacity(dim);
                for i in 0..dim {
                    let noise: f64 = if deterministic { 0.0 } else { rng.sample(StandardNormal) };
                    let a = to64(mean[i]) + to64(net.log_std[i].exp()) * noise;
                    action.push(sc::<S>(a));
                }
                let (lp, _, _) = gaussian_log_prob_grad(mean, &net.log_std, &action);
                out.log_probs.push(to64(lp));
                out.actions.extend(action.iter().map(|&a| to64(a)));
            }
        }
        HeadKind::Discrete { n } => {
            out.action_ids.reserve(batch);
            for bi in 0..batch {
                let logits = &trace.head_out[bi * act..(bi + 1) * act];
                let (choice, lp) = if deterministic {
                    let mut best = 0;
                    for j in 1..n {
                        if logits[j] > logits[best] {
                            best = j;
                        }
                    }
                    let (lp, _, _) = categorical_log_prob_grad(logits, best);
                    (best, lp)
                } else {
                    let (_, _, probs) = categorical_log_prob_grad(logits, 0);
                    let u: f64 = rng.gen::<f64>();
                    let mut acc = 0.0;
                    let mut choice = n - 1;
                    for (j, &p) in probs.iter().enumerate() {
                        acc += to64(p);
                        if u < acc {
                            choice = j;
                            break;
                        }
                    }
                    let (lp, _, _) = categorical_log_prob_grad(logits, choice);
                    (choice, lp)
                };
                out.action_ids.push(choice);
                out.log_probs.push(to64(lp));
            }
        }
    }
    Ok(out)
}

/// Everything reported from one `ppo_update` call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub entropy_coef: f64,
    pub adv_mean_abs: f64,
    pub adv_std: f64,
    pub minibatches: usize,
}

/// Gathered training arrays for one minibatch, already in the learner's
/// scalar type.
struct Minibatch<S> {
    obs: Vec<S>,
    actions: Vec<S>,
    action_ids: Vec<usize>,
    log_prob_old: Vec<S>,
    advantages: Vec<f64>,
    returns_ext: Vec<S>,
    returns_int: Vec<S>,
}

/// Loss + exact gradients for one minibatch; the single building block both
/// `ppo_update` and the gradient-oracle tests drive.
pub fn ppo_loss_and_grads<S: Scalar>(
    net: &ActorCritic<S>,
    obs: &[S],
    actions: &[S],
    action_ids: &[usize],
    log_prob_old: &[S],
    advantages: &[f64],
    returns_ext: &[S],
    returns_int: &[S],
    entropy_coef: f64,
    value_coef: f64,
    epsilon: f64,
    grads: &mut ActorCritic<S>,
) -> Result<(f64, PpoDiagnostics, f64, f64)> {
    let batch = log_prob_old.len();
    if batch == 0 {
        return Err(Error::Batch("empty minibatch".into()));
    }
    let act = net.head.act_dim();
    let trace = net.forward(obs, batch)?;
    let nf = sc::<S>(batch as f64);

    let mut d_head = vec![S::zero(); batch * act];
    let mut d_log_std = vec![S::zero(); net.log_std.len()];
    let mut d_ve = vec![S::zero(); batch];
    let mut d_vi = vec![S::zero(); batch];

    let mut lp_new = vec![0.0f64; batch];
    let mut surrogate = 0.0f64;
    let mut ratio_sum = 0.0f64;
    let mut clipped = 0usize;
    let mut entropy_rows = 0.0f64;

    for bi in 0..batch {
        let row = &trace.head_out[bi * act..(bi + 1) * act];
        let adv = advantages[bi];
        let (lp, surr_grad_coef): (S, f64) = match net.head {
            HeadKind::Continuous { .. } => {
                let a_row = &actions[bi * act..(bi + 1) * act];
                let (lp, d_mean, d_ls) = gaussian_log_prob_grad(row, &net.log_std, a_row);
                let ratio = to64(lp - log_prob_old[bi]).exp();
                let clip = clip_ratio(ratio, epsilon);
                let unclipped = ratio * adv;
                let clipped_term = clip * adv;
                surrogate += unclipped.min(clipped_term);
                ratio_sum += ratio;
                if (ratio - clip).abs() > 0.0 {
                    clipped += 1;
                }
                // d(min)/d(lp_new): the unclipped branch when it is the min,
                // zero when the clamp is holding.
                let g = if unclipped <= clipped_term { unclipped } else { 0.0 };
                let coef = sc::<S>(-g / batch as f64);
                for (j, (&dm, &dls)) in d_mean.iter().zip(&d_ls).enumerate() {
                    d_head[bi * act + j] += coef * dm;
                    d_log_std[j] += coef * dls;
                }
                (lp, g)
            }
            HeadKind::Discrete { .. } => {
                let a = action_ids[bi];
                let (lp, d_logits, probs) = categorical_log_prob_grad(row, a);
                let ratio = to64(lp - log_prob_old[bi]).exp();
                let clip = clip_ratio(ratio, epsilon);
                let unclipped = ratio * adv;
                let clipped_term = clip * adv;
                surrogate += unclipped.min(clipped_term);
                ratio_sum += ratio;
                if (ratio - clip).abs() > 0.0 {
                    clipped += 1;
                }
                let g = if unclipped <= clipped_term { unclipped } else { 0.0 };
                let coef = sc::<S>(-g / batch as f64);
                for (j, &dl) in d_logits.iter().enumerate() {
                    d_head[bi * act + j] += coef * dl;
                }
                // entropy bonus gradient for this row
                let mut h_row = S::zero();
                for &p in &probs {
                    if p > S::zero() {
                        h_row -= p * p.ln();
                    }
                }
                entropy_rows += to64(h_row);
                let ec = sc::<S>(entropy_coef / batch as f64);
                for (j, &p) in probs.iter().enumerate() {
                    if p > S::zero() {
                        d_head[bi * act + j] += ec * p * (p.ln() + h_row);
                    }
                }
                (lp, g)
            }
        };
        let _ = surr_grad_coef;
        lp_new[bi] = to64(lp);

        // value heads: squared error against each stream's returns
        let ve = trace.value_ext[bi];
        let vi = trace.value_int[bi];
        let vc = sc::<S>(value_coef);
        d_ve[bi] = vc * sc::<S>(2.0) * (ve - returns_ext[bi]) / nf;
        d_vi[bi] = vc * sc::<S>(2.0) * (vi - returns_int[bi]) / nf;
    }

    let entropy = match net.head {
        HeadKind::Continuous { dim } => {
            let half_ln_2pi_e = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
            let h: f64 = net.log_std.iter().map(|&ls| half_ln_2pi_e + to64(ls)).sum();
            // state-independent: gradient is -entropy_coef per component
            for g in d_log_std.iter_mut() {
                *g += sc::<S>(-entropy_coef);
            }
            let _ = dim;
            h
        }
        HeadKind::Discrete { .. } => entropy_rows / batch as f64,
    };

    surrogate /= batch as f64;
    let mut value_loss = 0.0f64;
    for bi in 0..batch {
        value_loss += (to64(trace.value_ext[bi] - returns_ext[bi])).powi(2);
        value_loss += (to64(trace.value_int[bi] - returns_int[bi])).powi(2);
    }
    value_loss /= batch as f64;

    net.backward(&trace, &d_head, &d_log_std, &d_ve, &d_vi, grads)?;

    let loss = -(surrogate + entropy_coef * entropy) + value_coef * value_loss;
    let diags = PpoDiagnostics {
        clip_fraction: clipped as f64 / batch as f64,
        mean_ratio: ratio_sum / batch as f64,
        surrogate,
    };
    Ok((loss, diags, entropy, value_loss))
}

/// Two-stream GAE over the whole buffer. Returns (advantages, returns_ext,
/// returns_int) indexed like the buffer.
fn buffer_advantages(buffer: &RolloutBuffer, cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = buffer.num_instances;
    let t_len = buffer.steps_written();
    let total = t_len * n;
    let mut advantages = vec![0.0; total];
    let mut returns_ext = vec![0.0; total];
    let mut returns_int = vec![0.0; total];
    for i in 0..n {
        let mut carry_ext = 0.0;
        let mut carry_int = 0.0;
        // value of the state after step t, still unknown below the horizon
        let mut next_ext = buffer.final_value_ext[i] as f64;
        let mut next_int = buffer.final_value_int[i] as f64;
        for t in (0..t_len).rev() {
            let idx = t * n + i;
            if !buffer.active[idx] {
                carry_ext = 0.0;
                carry_int = 0.0;
                next_ext = 0.0;
                next_int = 0.0;
                advantages[idx] = 0.0;
                continue;
            }
            let v_ext = buffer.value_ext_old[idx] as f64;
            let v_int = buffer.value_int_old[idx] as f64;
            let (nv_ext, nv_int, boundary) = if buffer.terminal[idx] {
                (0.0, 0.0, true)
            } else if buffer.truncated[idx] {
                (buffer.bootstrap_ext[idx] as f64, buffer.bootstrap_int[idx] as f64, true)
            } else {
                (next_ext, next_int, false)
            };
            let delta_ext = buffer.reward_ext[idx] as f64 + cfg.gamma * nv_ext - v_ext;
            let delta_int = buffer.reward_int[idx] as f64 + cfg.intrinsic_gamma * nv_int - v_int;
            if boundary {
                carry_ext = delta_ext;
                carry_int = delta_int;
            } else {
                carry_ext = delta_ext + cfg.gamma * cfg.lambda * carry_ext;
                carry_int = delta_int + cfg.intrinsic_gamma * cfg.lambda * carry_int;
            }
            advantages[idx] = carry_ext + carry_int;
            returns_ext[idx] = carry_ext + v_ext;
            returns_int[idx] = carry_int + v_int;
            next_ext = v_ext;
            next_int = v_int;
        }
    }
    (advantages, returns_ext, returns_int)
}

fn gather_minibatch<S: Scalar>(
    buffer: &RolloutBuffer,
    indices: &[usize],
    advantages: &[f64],
    returns_ext: &[f64],
    returns_int: &[f64],
    normalize: bool,
) -> Minibatch<S> {
    let od = buffer.obs_dim;
    let ad = buffer.act_dim;
    let mut mb = Minibatch {
        obs: Vec::with_capacity(indices.len() * od),
        actions: Vec::with_capacity(if buffer.discrete { 0 } else { indices.len() * ad }),
        action_ids: Vec::with_capacity(if buffer.discrete { indices.len() } else { 0 }),
        log_prob_old: Vec::with_capacity(indices.len()),
        advantages: Vec::with_capacity(indices.len()),
        returns_ext: Vec::with_capacity(indices.len()),
        returns_int: Vec::with_capacity(indices.len()),
    };
    for &idx in indices {
        mb.obs.extend(buffer.obs[idx * od..(idx + 1) * od].iter().map(|&v| recast::<f32, S>(v)));
        if buffer.discrete {
            mb.action_ids.push(buffer.action_ids[idx] as usize);
        } else {
            mb.actions
                .extend(buffer.actions[idx * ad..(idx + 1) * ad].iter().map(|&v| recast::<f32, S>(v)));
        }
        mb.log_prob_old.push(recast::<f32, S>(buffer.log_prob_old[idx]));
        mb.advantages.push(advantages[idx]);
        mb.returns_ext.push(sc(returns_ext[idx]));
        mb.returns_int.push(sc(returns_int[idx]));
    }
    if normalize {
        normalize_advantages(&mut mb.advantages);
    }
    mb
}

/// Full PPO update pass: two-stream GAE, per-epoch shuffling, minibatch
/// gradient steps through Adam at the scheduled rate.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<S: Scalar>(
    net: &mut ActorCritic<S>,
    opt: &mut AdamState<S>,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    schedule: &LrSchedule,
    global_step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    cfg.validate()?;
    if !buffer.is_full() {
        return Err(Error::Lifecycle(format!(
            "rollout buffer holds {} of {} steps",
            buffer.steps_written(),
            buffer.horizon
        )));
    }
    let (advantages, returns_ext, returns_int) = buffer_advantages(buffer, cfg);
    let mut indices: Vec<usize> =
        (0..buffer.capacity()).filter(|&idx| buffer.active[idx]).collect();
    if indices.is_empty() {
        return Err(Error::Batch("rollout buffer has no active samples".into()));
    }

    let lr = lr_at(schedule, global_step);
    let frac = match schedule.mode {
        LrMode::Constant => 1.0,
        LrMode::Linear => {
            if schedule.initial_rate > 0.0 {
                lr / schedule.initial_rate
            } else {
                1.0
            }
        }
    };
    let entropy_coef = cfg.entropy_coef * frac;

    let mut stats = UpdateStats { lr, entropy_coef, ..Default::default() };
    let mut grads = net.zeros_like();
    let mut flat_grads = vec![S::zero(); net.param_len()];
    let mut adv_abs_sum = 0.0;
    let mut adv_sq_sum = 0.0;
    let mut adv_count = 0usize;

    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.minibatch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mb: Minibatch<S> = gather_minibatch(
                buffer,
                chunk,
                &advantages,
                &returns_ext,
                &returns_int,
                cfg.normalize_advantages,
            );
            for &a in &mb.advantages {
                adv_abs_sum += a.abs();
                adv_sq_sum += a * a;
            }
            adv_count += mb.advantages.len();

            let zeros = net.zeros_like();
            grads.clone_from(&zeros);
            let (loss, diags, entropy, value_loss) = ppo_loss_and_grads(
                net,
                &mb.obs,
                &mb.actions,
                &mb.action_ids,
                &mb.log_prob_old,
                &mb.advantages,
                &mb.returns_ext,
                &mb.returns_int,
                entropy_coef,
                cfg.value_coef,
                cfg.epsilon,
                &mut grads,
            )?;
            let _ = loss;
            flat_grads.clear();
            flat_grads.extend(grads.flatten_params());
            let grad_norm = clip_global_norm(&mut flat_grads, cfg.max_grad_norm);
            let mut flat_params = net.flatten_params();
            adam_update(&mut flat_params, &flat_grads, opt, lr)?;
            net.set_flat_params(&flat_params)?;

            stats.grad_norm += grad_norm;
            stats.policy_loss += -diags.surrogate;
            stats.value_loss += value_loss;
            stats.entropy += entropy;
            stats.clip_fraction += diags.clip_fraction;
            stats.mean_ratio += diags.mean_ratio;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let k = stats.minibatches as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.clip_fraction /= k;
        stats.mean_ratio /= k;
        stats.grad_norm /= k;
    }
    if adv_count > 0 {
        stats.adv_mean_abs = adv_abs_sum / adv_count as f64;
        stats.adv_std = (adv_sq_sum / adv_count as f64).sqrt();
    }
    Ok(stats)
}
