//! Curiosity module: a feature encoder, a forward model predicting the next
//! feature vector from (features, action), and an inverse model recovering
//! the action from consecutive feature vectors.
//!
//! The forward error drives the intrinsic reward. Its gradient never reaches
//! the encoder: both the prediction target and the feature input of the
//! forward model are detached, so the encoder is shaped by the inverse loss
//! alone. That keeps the features tied to what the agent can influence
//! instead of collapsing to a constant.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    adam_update, gate_backward_into, gate_into, recast, sc, to64, AdamState, HeadKind, Linear,
    Scalar, Trunk, HIDDEN_DIM,
};
use crate::ppo::categorical_log_prob_grad;

/// Width of the learned feature space.
pub const FEATURE_DIM: usize = 128;

/// Weights and reward scale for the curiosity module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcmConfig {
    /// Multiplier turning forward error into intrinsic reward.
    pub strength: f64,
    pub learning_rate: f64,
    /// Mix between the forward loss and the inverse loss in [0, 1].
    pub forward_weight: f64,
}

impl Default for IcmConfig {
    fn default() -> Self {
        IcmConfig { strength: 0.02, learning_rate: 3e-4, forward_weight: 0.2 }
    }
}

impl IcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strength < 0.0 || !self.strength.is_finite() {
            return Err(Error::Config(format!("curiosity strength {} is negative", self.strength)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("curiosity learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.forward_weight) {
            return Err(Error::Config(format!(
                "forward weight {} outside [0, 1]",
                self.forward_weight
            )));
        }
        Ok(())
    }
}

/// One gated hidden layer between two dense maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedNet<S> {
    pub l1: Linear<S>,
    pub l2: Linear<S>,
}

/// Activations kept by a `GatedNet` forward pass.
#[derive(Debug, Clone)]
pub struct GatedTrace<S> {
    pub batch: usize,
    pub input: Vec<S>,
    z1: Vec<S>,
    g: Vec<S>,
    pub out: Vec<S>,
}

impl<S: Scalar> GatedNet<S> {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        GatedNet {
            l1: Linear::new(in_dim, hidden, 1.0, rng),
            l2: Linear::new(hidden, out_dim, 1.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GatedNet {
            l1: Linear::zeros(self.l1.in_dim, self.l1.out_dim),
            l2: Linear::zeros(self.l2.in_dim, self.l2.out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.l1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.l2.out_dim
    }

    pub fn forward(&self, x: &[S], batch: usize) -> Result<GatedTrace<S>> {
        if batch == 0 || x.len() != batch * self.l1.in_dim {
            return Err(Error::Shape(format!(
                "gated net expected {} x {} inputs, got {}",
                batch,
                self.l1.in_dim,
                x.len()
            )));
        }
        let mut z1 = Vec::new();
        self.l1.forward_into(x, batch, &mut z1);
        let mut g = Vec::new();
        gate_into(&z1, &mut g);
        let mut out = Vec::new();
        self.l2.forward_into(&g, batch, &mut out);
        Ok(GatedTrace { batch, input: x.to_vec(), z1, g, out })
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(
        &self,
        trace: &GatedTrace<S>,
        d_out: &[S],
        grads: &mut GatedNet<S>,
    ) -> Result<Vec<S>> {
        if d_out.len() != trace.batch * self.l2.out_dim {
            return Err(Error::Shape("gated net upstream gradient has the wrong size".into()));
        }
        self.l2.accumulate_grads(&trace.g, trace.batch, d_out, &mut grads.l2);
        let mut d_g = Vec::new();
        self.l2.backward_input_into(d_out, trace.batch, &mut d_g);
        let mut d_z1 = Vec::new();
        gate_backward_into(&trace.z1, &d_g, &mut d_z1);
        self.l1.accumulate_grads(&trace.input, trace.batch, &d_z1, &mut grads.l1);
        let mut d_x = Vec::new();
        self.l1.backward_input_into(&d_z1, trace.batch, &mut d_x);
        Ok(d_x)
    }

    pub fn param_len(&self) -> usize {
        self.l1.param_len() + self.l2.param_len()
    }

    pub(crate) fn cast<T: Scalar>(&self) -> GatedNet<T> {
        GatedNet { l1: self.l1.cast(), l2: self.l2.cast() }
    }
}

/// The three curiosity networks for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct IcmNets<S> {
    pub head: HeadKind,
    pub feature_dim: usize,
    pub encoder: Trunk<S>,
    pub encoder_out: Linear<S>,
    pub forward_net: GatedNet<S>,
    pub inverse_net: GatedNet<S>,
}

impl<S: Scalar> IcmNets<S> {
    /// Full-size networks for the given observation width and action head.
    pub fn new(obs_dim: usize, head: HeadKind, rng: &mut ChaCha8Rng) -> Self {
        Self::with_dims(obs_dim, head, HIDDEN_DIM, FEATURE_DIM, rng)
    }

    /// Draw order is fixed: encoder trunk, encoder output, forward net,
    /// inverse net.
    pub fn with_dims(
        obs_dim: usize,
        head: HeadKind,
        hidden: usize,
        feature_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let act = head.act_dim();
        IcmNets {
            head,
            feature_dim,
            encoder: Trunk::new(obs_dim, hidden, rng),
            encoder_out: Linear::new(hidden, feature_dim, 1.0, rng),
            forward_net: GatedNet::new(feature_dim + act, hidden, feature_dim, rng),
            inverse_net: GatedNet::new(2 * feature_dim, hidden, act, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        IcmNets {
            head: self.head,
            feature_dim: self.feature_dim,
            encoder: self.encoder.zeros_like(),
            encoder_out: Linear::zeros(self.encoder_out.in_dim, self.encoder_out.out_dim),
            forward_net: self.forward_net.zeros_like(),
            inverse_net: self.inverse_net.zeros_like(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    /// Map observations to feature rows (batch x feature_dim).
    pub fn encode(&self, obs: &[S], batch: usize) -> Result<Vec<S>> {
        let trace = self.encoder.forward(obs, batch)?;
        let mut feat = Vec::new();
        self.encoder_out.forward_into(&trace.g2, batch, &mut feat);
        Ok(feat)
    }

    /// Forward-model prediction of the next feature rows.
    pub fn predict_features(&self, features: &[S], encoded_actions: &[S], batch: usize) -> Result<Vec<S>> {
        let x = concat_rows(features, self.feature_dim, encoded_actions, self.head.act_dim(), batch)?;
        Ok(self.forward_net.forward(&x, batch)?.out)
    }

    /// Inverse-model output (logits or regressed action vector).
    pub fn predict_action(&self, features: &[S], next_features: &[S], batch: usize) -> Result<Vec<S>> {
        let x = concat_rows(features, self.feature_dim, next_features, self.feature_dim, batch)?;
        Ok(self.inverse_net.forward(&x, batch)?.out)
    }

    pub fn tensor_names(&self) -> Vec<&'static str> {
        vec![
            "encoder.l1.w",
            "encoder.l1.b",
            "encoder.l2.w",
            "encoder.l2.b",
            "encoder_out.w",
            "encoder_out.b",
            "forward.l1.w",
            "forward.l1.b",
            "forward.l2.w",
            "forward.l2.b",
            "inverse.l1.w",
            "inverse.l1.b",
            "inverse.l2.w",
            "inverse.l2.b",
        ]
    }

    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let lin = |l: &Linear<S>| [(l.out_dim, l.in_dim), (l.out_dim, 1)];
        let mut shapes = Vec::new();
        shapes.extend(lin(&self.encoder.l1));
        shapes.extend(lin(&self.encoder.l2));
        shapes.extend(lin(&self.encoder_out));
        shapes.extend(lin(&self.forward_net.l1));
        shapes.extend(lin(&self.forward_net.l2));
        shapes.extend(lin(&self.inverse_net.l1));
        shapes.extend(lin(&self.inverse_net.l2));
        shapes
    }

    pub fn param_len(&self) -> usize {
        self.encoder.l1.param_len()
            + self.encoder.l2.param_len()
            + self.encoder_out.param_len()
            + self.forward_net.param_len()
            + self.inverse_net.param_len()
    }

    fn linears(&self) -> [&Linear<S>; 7] {
        [
            &self.encoder.l1,
            &self.encoder.l2,
            &self.encoder_out,
            &self.forward_net.l1,
            &self.forward_net.l2,
            &self.inverse_net.l1,
            &self.inverse_net.l2,
        ]
    }

    fn linears_mut(&mut self) -> [&mut Linear<S>; 7] {
        [
            &mut self.encoder.l1,
            &mut self.encoder.l2,
            &mut self.encoder_out,
            &mut self.forward_net.l1,
            &mut self.forward_net.l2,
            &mut self.inverse_net.l1,
            &mut self.inverse_net.l2,
        ]
    }

    pub fn flatten_params(&self) -> Vec<S> {
        let mut flat = Vec::with_capacity(self.param_len());
        for lin in self.linears() {
            flat.extend_from_slice(&lin.w);
            flat.extend_from_slice(&lin.b);
        }
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_len(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for lin in self.linears_mut() {
            let wl = lin.w.len();
            lin.w.copy_from_slice(&flat[offset..offset + wl]);
            offset += wl;
            let bl = lin.b.len();
            lin.b.copy_from_slice(&flat[offset..offset + bl]);
            offset += bl;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> IcmNets<T> {
        IcmNets {
            head: self.head,
            feature_dim: self.feature_dim,
            encoder: self.encoder.cast(),
            encoder_out: self.encoder_out.cast(),
            forward_net: self.forward_net.cast(),
            inverse_net: self.inverse_net.cast(),
        }
    }
}

fn concat_rows<S: Scalar>(
    a: &[S],
    a_dim: usize,
    b: &[S],
    b_dim: usize,
    batch: usize,
) -> Result<Vec<S>> {
    if a.len() != batch * a_dim || b.len() != batch * b_dim {
        return Err(Error::Shape("row blocks disagree with the batch size".into()));
    }
    let mut out = Vec::with_capacity(batch * (a_dim + b_dim));
    for bi in 0..batch {
        out.extend_from_slice(&a[bi * a_dim..(bi + 1) * a_dim]);
        out.extend_from_slice(&b[bi * b_dim..(bi + 1) * b_dim]);
    }
    Ok(out)
}

/// Actions as the forward model consumes them: raw vectors for the
/// continuous head, one-hot rows for the discrete head.
pub fn encode_actions<S: Scalar>(
    head: HeadKind,
    actions: &[S],
    action_ids: &[usize],
    batch: usize,
) -> Result<Vec<S>> {
    match head {
        HeadKind::Continuous { dim } => {
            if actions.len() != batch * dim {
                return Err(Error::Shape("continuous action rows disagree with the batch".into()));
            }
            Ok(actions.to_vec())
        }
        HeadKind::Discrete { n } => {
            if action_ids.len() != batch {
                return Err(Error::Shape("action ids disagree with the batch".into()));
            }
            let mut out = vec![S::zero(); batch * n];
            for (bi, &id) in action_ids.iter().enumerate() {
                if id >= n {
                    return Err(Error::Action(format!("action id {id} outside 0..{n}")));
                }
                out[bi * n + id] = S::one();
            }
            Ok(out)
        }
    }
}

/// Losses from one curiosity batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IcmStats {
    pub total: f64,
    pub forward_loss: f64,
    pub inverse_loss: f64,
}

/// Loss and exact gradients for one transition batch. The forward loss
/// trains only the forward net; the inverse loss trains the inverse net and
/// the encoder through both feature arguments.
#[allow(clippy::too_many_arguments)]
pub fn icm_loss_and_grads<S: Scalar>(
    nets: &IcmNets<S>,
    obs: &[S],
    next_obs: &[S],
    actions: &[S],
    action_ids: &[usize],
    forward_weight: f64,
    grads: &mut IcmNets<S>,
) -> Result<IcmStats> {
    let fd = nets.feature_dim;
    let act = nets.head.act_dim();
    let obs_dim = nets.obs_dim();
    if obs.is_empty() || obs.len() % obs_dim != 0 || next_obs.len() != obs.len() {
        return Err(Error::Shape("observation rows disagree".into()));
    }
    let batch = obs.len() / obs_dim;
    let encoded_actions = encode_actions(nets.head, actions, action_ids, batch)?;
    let nf = sc::<S>(batch as f64);

    let trace_s = nets.encoder.forward(obs, batch)?;
    let mut feat_s = Vec::new();
    nets.encoder_out.forward_into(&trace_s.g2, batch, &mut feat_s);
    let trace_n = nets.encoder.forward(next_obs, batch)?;
    let mut feat_n = Vec::new();
    nets.encoder_out.forward_into(&trace_n.g2, batch, &mut feat_n);

    // forward model on detached features
    let x_f = concat_rows(&feat_s, fd, &encoded_actions, act, batch)?;
    let fwd_trace = nets.forward_net.forward(&x_f, batch)?;
    let mut forward_loss = 0.0f64;
    let mut d_pred = vec![S::zero(); batch * fd];
    let beta = sc::<S>(forward_weight);
    for i in 0..batch * fd {
        let diff = fwd_trace.out[i] - feat_n[i];
        forward_loss += 0.5 * to64(diff) * to64(diff);
        d_pred[i] = beta * diff / nf;
    }
    forward_loss /= batch as f64;
    // gradient stops here: d_x_f is dropped, so neither the action nor the
    // encoder sees the forward error
    let _ = nets.forward_net.backward(&fwd_trace, &d_pred, &mut grads.forward_net)?;

    // inverse model
    let x_i = concat_rows(&feat_s, fd, &feat_n, fd, batch)?;
    let inv_trace = nets.inverse_net.forward(&x_i, batch)?;
    let mut inverse_loss = 0.0f64;
    let mut d_inv_out = vec![S::zero(); batch * act];
    let inv_w = sc::<S>(1.0 - forward_weight);
    match nets.head {
        HeadKind::Discrete { .. } => {
            for bi in 0..batch {
                let row = &inv_trace.out[bi * act..(bi + 1) * act];
                let (lp, d_logits, _) = categorical_log_prob_grad(row, action_ids[bi]);
                inverse_loss -= to64(lp);
                for j in 0..act {
                    // d(-lp)/d(logits) = probs - onehot
                    d_inv_out[bi * act + j] = -inv_w * d_logits[j] / nf;
                }
            }
        }
        HeadKind::Continuous { .. } => {
            for i in 0..batch * act {
                let diff = inv_trace.out[i] - actions[i];
                inverse_loss += to64(diff) * to64(diff);
                d_inv_out[i] = inv_w * sc::<S>(2.0) * diff / nf;
            }
        }
    }
    inverse_loss /= batch as f64;

    let d_x_i = nets.inverse_net.backward(&inv_trace, &d_inv_out, &mut grads.inverse_net)?;
    let mut d_feat_s = vec![S::zero(); batch * fd];
    let mut d_feat_n = vec![S::zero(); batch * fd];
    for bi in 0..batch {
        d_feat_s[bi * fd..(bi + 1) * fd].copy_from_slice(&d_x_i[bi * 2 * fd..bi * 2 * fd + fd]);
        d_feat_n[bi * fd..(bi + 1) * fd]
            .copy_from_slice(&d_x_i[bi * 2 * fd + fd..(bi + 1) * 2 * fd]);
    }
    for (trace, d_feat) in [(&trace_s, &d_feat_s), (&trace_n, &d_feat_n)] {
        nets.encoder_out.accumulate_grads(&trace.g2, batch, d_feat, &mut grads.encoder_out);
        let mut d_g2 = Vec::new();
        nets.encoder_out.backward_input_into(d_feat, batch, &mut d_g2);
        nets.encoder.backward(trace, &d_g2, &mut grads.encoder)?;
    }

    Ok(IcmStats {
        total: forward_weight * forward_loss + (1.0 - forward_weight) * inverse_loss,
        forward_loss,
        inverse_loss,
    })
}

/// Per-transition curiosity reward: strength times the forward error.
/// Always nonnegative; exactly zero when the strength is zero.
pub fn intrinsic_rewards<S: Scalar>(
    nets: &IcmNets<S>,
    obs: &[S],
    next_obs: &[S],
    actions: &[S],
    action_ids: &[usize],
    strength: f64,
) -> Result<Vec<f64>> {
    let obs_dim = nets.obs_dim();
    if obs.is_empty() || obs.len() % obs_dim != 0 || next_obs.len() != obs.len() {
        return Err(Error::Shape("observation rows disagree".into()));
    }
    let batch = obs.len() / obs_dim;
    if strength == 0.0 {
        return Ok(vec![0.0; batch]);
    }
    let fd = nets.feature_dim;
    let encoded = encode_actions(nets.head, actions, action_ids, batch)?;
    let feat_s = nets.encode(obs, batch)?;
    let feat_n = nets.encode(next_obs, batch)?;
    let pred = nets.predict_features(&feat_s, &encoded, batch)?;
    let mut rewards = Vec::with_capacity(batch);
    for bi in 0..batch {
        let mut err = 0.0;
        for j in 0..fd {
            let diff = to64(pred[bi * fd + j] - feat_n[bi * fd + j]);
            err += 0.5 * diff * diff;
        }
        rewards.push(strength * err);
    }
    Ok(rewards)
}

/// One Adam step on the combined curiosity loss.
#[allow(clippy::too_many_arguments)]
pub fn icm_update<S: Scalar>(
    nets: &mut IcmNets<S>,
    opt: &mut AdamState<S>,
    obs: &[S],
    next_obs: &[S],
    actions: &[S],
    action_ids: &[usize],
    cfg: &IcmConfig,
    lr: f64,
) -> Result<IcmStats> {
    cfg.validate()?;
    let mut grads = nets.zeros_like();
    let stats = icm_loss_and_grads(
        nets,
        obs,
        next_obs,
        actions,
        action_ids,
        cfg.forward_weight,
        &mut grads,
    )?;
    let mut flat = nets.flatten_params();
    adam_update(&mut flat, &grads.flatten_params(), opt, lr)?;
    nets.set_flat_params(&flat)?;
    Ok(stats)
}

/// Flat (s, a, s') store filled during collection and drained for curiosity
/// updates.
#[derive(Debug, Clone)]
pub struct TransitionStore {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub discrete: bool,
    capacity: usize,
    pub obs: Vec<f32>,
    pub next_obs: Vec<f32>,
    pub actions: Vec<f32>,
    pub action_ids: Vec<u8>,
    len: usize,
}

impl TransitionStore {
    pub fn new(obs_dim: usize, act_dim: usize, discrete: bool, capacity: usize) -> Self {
        TransitionStore {
            obs_dim,
            act_dim,
            discrete,
            capacity,
            obs: Vec::with_capacity(capacity * obs_dim),
            next_obs: Vec::with_capacity(capacity * obs_dim),
            actions: Vec::with_capacity(if discrete { 0 } else { capacity * act_dim }),
            action_ids: Vec::with_capacity(if discrete { capacity } else { 0 }),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    pub fn clear(&mut self) {
        self.obs.clear();
        self.next_obs.clear();
        self.actions.clear();
        self.action_ids.clear();
        self.len = 0;
    }

    pub fn push(&mut self, obs: &[f32], next_obs: &[f32], action: &[f32], action_id: u8) -> Result<()> {
        if self.is_full() {
            return Err(Error::Lifecycle("transition store is already full".into()));
        }
        if obs.len() != self.obs_dim || next_obs.len() != self.obs_dim {
            return Err(Error::Shape("transition observation width is wrong".into()));
        }
        if !self.discrete && action.len() != self.act_dim {
            return Err(Error::Shape("transition action width is wrong".into()));
        }
        self.obs.extend_from_slice(obs);
        self.next_obs.extend_from_slice(next_obs);
        if self.discrete {
            self.action_ids.push(action_id);
        } else {
            self.actions.extend_from_slice(action);
        }
        self.len += 1;
        Ok(())
    }

    /// Copy the chosen transitions into learner-typed arrays.
    pub fn gather<S: Scalar>(&self, indices: &[usize]) -> (Vec<S>, Vec<S>, Vec<S>, Vec<usize>) {
        let od = self.obs_dim;
        let ad = self.act_dim;
        let mut obs = Vec::with_capacity(indices.len() * od);
        let mut next = Vec::with_capacity(indices.len() * od);
        let mut acts = Vec::new();
        let mut ids = Vec::new();
        for &i in indices {
            obs.extend(self.obs[i * od..(i + 1) * od].iter().map(|&v| recast::<f32, S>(v)));
            next.extend(self.next_obs[i * od..(i + 1) * od].iter().map(|&v| recast::<f32, S>(v)));
            if self.discrete {
                ids.push(self.action_ids[i] as usize);
            } else {
                acts.extend(
                    self.actions[i * ad..(i + 1) * ad].iter().map(|&v| recast::<f32, S>(v)),
                );
            }
        }
        (obs, next, acts, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny(head: HeadKind, seed: u64) -> IcmNets<f64> {
        IcmNets::with_dims(5, head, 12, 6, &mut rng(seed))
    }

    fn random_batch(
        nets: &IcmNets<f64>,
        batch: usize,
        seed: u64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<usize>) {
        let mut r = rng(seed);
        let od = nets.obs_dim();
        let obs: Vec<f64> = (0..batch * od).map(|_| r.gen_range(-1.0..1.0)).collect();
        let next: Vec<f64> = (0..batch * od).map(|_| r.gen_range(-1.0..1.0)).collect();
        match nets.head {
            HeadKind::Continuous { dim } => {
                let acts = (0..batch * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
                (obs, next, acts, Vec::new())
            }
            HeadKind::Discrete { n } => {
                let ids = (0..batch).map(|_| r.gen_range(0..n)).collect();
                (obs, next, Vec::new(), ids)
            }
        }
    }

    #[test]
    fn features_have_the_contract_width() {
        for obs_dim in [68usize, 33] {
            let nets: IcmNets<f32> =
                IcmNets::new(obs_dim, HeadKind::Discrete { n: 8 }, &mut rng(1));
            let obs = vec![0.25f32; 2 * obs_dim];
            let feat = nets.encode(&obs, 2).unwrap();
            assert_eq!(feat.len(), 2 * FEATURE_DIM);
            assert!(feat.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_loss_matches_a_loop_oracle() {
        let nets = tiny(HeadKind::Continuous { dim: 3 }, 2);
        let (obs, next, acts, ids) = random_batch(&nets, 4, 3);
        let mut grads = nets.zeros_like();
        let stats = icm_loss_and_grads(&nets, &obs, &next, &acts, &ids, 0.2, &mut grads).unwrap();

        let feat_s = nets.encode(&obs, 4).unwrap();
        let feat_n = nets.encode(&next, 4).unwrap();
        let encoded = encode_actions(nets.head, &acts, &ids, 4).unwrap();
        let pred = nets.predict_features(&feat_s, &encoded, 4).unwrap();
        let fd = nets.feature_dim;
        let mut oracle = 0.0;
        for i in 0..4 * fd {
            oracle += 0.5 * (pred[i] - feat_n[i]).powi(2);
        }
        oracle /= 4.0;
        assert!((stats.forward_loss - oracle).abs() <= 1e-12);
        assert!(
            (stats.total - (0.2 * stats.forward_loss + 0.8 * stats.inverse_loss)).abs() <= 1e-12
        );
    }

    #[test]
    fn untrained_inverse_head_scores_ln_n() {
        let mut nets = tiny(HeadKind::Discrete { n: 8 }, 4);
        nets.inverse_net = nets.inverse_net.zeros_like();
        let (obs, next, acts, ids) = random_batch(&nets, 6, 5);
        let mut grads = nets.zeros_like();
        let stats = icm_loss_and_grads(&nets, &obs, &next, &acts, &ids, 0.2, &mut grads).unwrap();
        assert!((stats.inverse_loss - (8.0f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn forward_error_never_reaches_the_encoder() {
        // pure forward loss: every encoder gradient must be exactly zero
        for head in [HeadKind::Continuous { dim: 3 }, HeadKind::Discrete { n: 4 }] {
            let nets = tiny(head, 6);
            let (obs, next, acts, ids) = random_batch(&nets, 4, 7);
            let mut grads = nets.zeros_like();
            icm_loss_and_grads(&nets, &obs, &next, &acts, &ids, 1.0, &mut grads).unwrap();
            for lin in [&grads.encoder.l1, &grads.encoder.l2, &grads.encoder_out] {
                assert!(lin.w.iter().all(|&g| g == 0.0));
                assert!(lin.b.iter().all(|&g| g == 0.0));
            }
            let moved = grads.forward_net.l1.w.iter().any(|&g| g != 0.0);
            assert!(moved, "forward net should still receive gradient");
        }
    }

    /// The declared objective with the detachment written out: the forward
    /// branch consumes frozen feature constants, the inverse branch live
    /// ones. Its full derivative is what `icm_loss_and_grads` reports.
    fn detached_total(
        probe: &IcmNets<f64>,
        obs: &[f64],
        next: &[f64],
        acts: &[f64],
        ids: &[usize],
        frozen_s: &[f64],
        frozen_n: &[f64],
        beta: f64,
        batch: usize,
    ) -> f64 {
        let fd = probe.feature_dim;
        let act = probe.head.act_dim();
        let encoded = encode_actions(probe.head, acts, ids, batch).unwrap();
        let pred = probe.predict_features(frozen_s, &encoded, batch).unwrap();
        let mut l_f = 0.0;
        for i in 0..batch * fd {
            l_f += 0.5 * (pred[i] - frozen_n[i]).powi(2);
        }
        l_f /= batch as f64;
        let live_s = probe.encode(obs, batch).unwrap();
        let live_n = probe.encode(next, batch).unwrap();
        let inv = probe.predict_action(&live_s, &live_n, batch).unwrap();
        let mut l_i = 0.0;
        match probe.head {
            HeadKind::Discrete { .. } => {
                for bi in 0..batch {
                    let (lp, _, _) =
                        categorical_log_prob_grad(&inv[bi * act..(bi + 1) * act], ids[bi]);
                    l_i -= lp;
                }
            }
            HeadKind::Continuous { .. } => {
                for i in 0..batch * act {
                    l_i += (inv[i] - acts[i]).powi(2);
                }
            }
        }
        l_i /= batch as f64;
        beta * l_f + (1.0 - beta) * l_i
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (head, seed) in [
            (HeadKind::Continuous { dim: 3 }, 8u64),
            (HeadKind::Discrete { n: 4 }, 9),
        ] {
            let nets = tiny(head, seed);
            let batch = 5;
            let (obs, next, acts, ids) = random_batch(&nets, batch, seed + 10);
            let frozen_s = nets.encode(&obs, batch).unwrap();
            let frozen_n = nets.encode(&next, batch).unwrap();
            let mut grads = nets.zeros_like();
            let stats =
                icm_loss_and_grads(&nets, &obs, &next, &acts, &ids, 0.2, &mut grads).unwrap();
            let at_base = detached_total(
                &nets, &obs, &next, &acts, &ids, &frozen_s, &frozen_n, 0.2, batch,
            );
            assert!((stats.total - at_base).abs() <= 1e-12);

            let analytic = grads.flatten_params();
            let base = nets.flatten_params();
            let mut probe = nets.clone();
            let h = 1e-5;
            let stride = (base.len() / 150).max(1);
            let mut worst: f64 = 0.0;
            for idx in (0..base.len()).step_by(stride) {
                let mut plus = base.clone();
                plus[idx] += h;
                probe.set_flat_params(&plus).unwrap();
                let up = detached_total(
                    &probe, &obs, &next, &acts, &ids, &frozen_s, &frozen_n, 0.2, batch,
                );
                let mut minus = base.clone();
                minus[idx] -= h;
                probe.set_flat_params(&minus).unwrap();
                let down = detached_total(
                    &probe, &obs, &next, &acts, &ids, &frozen_s, &frozen_n, 0.2, batch,
                );
                let fd = (up - down) / (2.0 * h);
                let denom = fd.abs().max(analytic[idx].abs()).max(1e-6);
                worst = worst.max((fd - analytic[idx]).abs() / denom);
            }
            assert!(worst <= 1e-4, "{head:?}: worst rel err {worst}");
        }
    }

    #[test]
    fn forward_loss_overfits_a_fixed_batch() {
        let mut nets = tiny(HeadKind::Continuous { dim: 3 }, 20);
        let (obs, next, acts, ids) = random_batch(&nets, 8, 21);
        let mut opt = AdamState::new(nets.param_len());
        let cfg = IcmConfig { forward_weight: 1.0, ..Default::default() };
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..50 {
            let stats =
                icm_update(&mut nets, &mut opt, &obs, &next, &acts, &ids, &cfg, 1e-2).unwrap();
            if step == 0 {
                first = stats.forward_loss;
            }
            last = stats.forward_loss;
        }
        assert!(last < first, "forward loss went {first} -> {last}");
        assert!(last < 0.5 * first, "forward loss only reached {last} from {first}");
    }

    #[test]
    fn inverse_loss_overfits_below_half_ln_n() {
        let mut nets = tiny(HeadKind::Discrete { n: 8 }, 22);
        let (obs, next, acts, ids) = random_batch(&nets, 16, 23);
        let mut opt = AdamState::new(nets.param_len());
        let cfg = IcmConfig::default();
        let mut final_loss = f64::INFINITY;
        for _ in 0..200 {
            let stats =
                icm_update(&mut nets, &mut opt, &obs, &next, &acts, &ids, &cfg, 1e-2).unwrap();
            final_loss = stats.inverse_loss;
        }
        assert!(
            final_loss < 0.5 * (8.0f64).ln(),
            "inverse loss stalled at {final_loss}"
        );
    }

    #[test]
    fn intrinsic_rewards_are_nonnegative_and_scale() {
        let nets = tiny(HeadKind::Continuous { dim: 3 }, 24);
        let (obs, next, acts, ids) = random_batch(&nets, 6, 25);
        let rewards = intrinsic_rewards(&nets, &obs, &next, &acts, &ids, 0.05).unwrap();
        assert_eq!(rewards.len(), 6);
        assert!(rewards.iter().all(|&r| r >= 0.0));

        // oracle from the public pieces
        let feat_s = nets.encode(&obs, 6).unwrap();
        let feat_n = nets.encode(&next, 6).unwrap();
        let encoded = encode_actions(nets.head, &acts, &ids, 6).unwrap();
        let pred = nets.predict_features(&feat_s, &encoded, 6).unwrap();
        let fd = nets.feature_dim;
        for bi in 0..6 {
            let mut err = 0.0;
            for j in 0..fd {
                err += 0.5 * (pred[bi * fd + j] - feat_n[bi * fd + j]).powi(2);
            }
            assert!((rewards[bi] - 0.05 * err).abs() <= 1e-12);
        }

        let off = intrinsic_rewards(&nets, &obs, &next, &acts, &ids, 0.0).unwrap();
        assert!(off.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn init_is_deterministic_and_casts_round_trip() {
        let a: IcmNets<f32> = IcmNets::with_dims(7, HeadKind::Discrete { n: 8 }, 16, 8, &mut rng(26));
        let b: IcmNets<f32> = IcmNets::with_dims(7, HeadKind::Discrete { n: 8 }, 16, 8, &mut rng(26));
        assert_eq!(a.flatten_params(), b.flatten_params());
        let round: IcmNets<f32> = a.cast::<f64>().cast::<f32>();
        assert_eq!(a.flatten_params(), round.flatten_params());
        let total: usize = a.tensor_shapes().iter().map(|(r, c)| r * c).sum();
        assert_eq!(total, a.param_len());
        assert_eq!(a.tensor_names().len(), a.tensor_shapes().len());
    }

    #[test]
    fn transition_store_lifecycle() {
        let mut store = TransitionStore::new(3, 2, false, 2);
        assert!(store.is_empty());
        store.push(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[0.1, 0.2], 0).unwrap();
        assert!(matches!(
            store.push(&[1.0], &[4.0, 5.0, 6.0], &[0.1, 0.2], 0),
            Err(Error::Shape(_))
        ));
        store.push(&[7.0, 8.0, 9.0], &[1.0, 1.0, 1.0], &[0.3, 0.4], 0).unwrap();
        assert!(store.is_full());
        assert!(matches!(
            store.push(&[0.0; 3], &[0.0; 3], &[0.0; 2], 0),
            Err(Error::Lifecycle(_))
        ));
        let (obs, next, acts, ids): (Vec<f64>, _, _, _) = store.gather(&[1, 0]);
        assert_eq!(obs, vec![7.0, 8.0, 9.0, 1.0, 2.0, 3.0]);
        assert_eq!(next[0], 1.0);
        let widened: Vec<f64> = [0.3f32, 0.4, 0.1, 0.2].iter().map(|&v| v as f64).collect();
        assert_eq!(acts, widened);
        assert!(ids.is_empty());
        store.clear();
        assert!(store.is_empty());
    }
}
