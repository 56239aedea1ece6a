//! Dense network stack: gated MLP trunks, actor and critic heads, exact
//! reverse-mode gradients, Adam, and the linear learning-rate schedule.
//!
//! Everything is generic over the scalar type. Training runs in `f32`;
//! the gradient oracles in the test suites instantiate the same code with
//! `f64` so finite differences have headroom. All reductions run in a fixed
//! order, so identical inputs give bit-identical outputs.

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar the network stack is generic over.
pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Shorthand f64-to-scalar cast used throughout the numeric code.
#[inline]
pub fn sc<S: Scalar>(v: f64) -> S {
    S::from(v).expect("f64 always casts into a float scalar")
}

/// Scalar-to-f64 widening.
#[inline]
pub fn to64<S: Scalar>(v: S) -> f64 {
    v.to_f64().expect("float scalars always widen to f64")
}

/// Exact-order rescaling between scalar types (f32 <-> f64 via f64).
#[inline]
pub fn recast<S: Scalar, T: Scalar>(v: S) -> T {
    sc(to64(v))
}

/// Dot product with eight parallel accumulator lanes folded in a fixed
/// order; the hot kernel under every layer.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [S::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let rest_a = chunks_a.remainder();
    let rest_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..8 {
            lanes[k] += ca[k] * cb[k];
        }
    }
    let mut acc = S::zero();
    for lane in lanes {
        acc += lane;
    }
    for (x, y) in rest_a.iter().zip(rest_b) {
        acc += *x * *y;
    }
    acc
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// The gating nonlinearity: x times its own sigmoid, elementwise.
pub fn gate<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub(crate) fn gate_into<S: Scalar>(x: &[S], out: &mut Vec<S>) {
    out.clear();
    out.extend(x.iter().map(|&v| v * sigmoid(v)));
}

/// d(gate)/dz = s + z s (1 - s) with s = sigmoid(z), applied to an upstream
/// gradient.
pub(crate) fn gate_backward_into<S: Scalar>(z: &[S], d_gate: &[S], out: &mut Vec<S>) {
    out.clear();
    out.extend(z.iter().zip(d_gate).map(|(&z, &d)| {
        let s = sigmoid(z);
        d * (s + z * s * (S::one() - s))
    }));
}

/// Row-major dense layer: y = W x + b with W stored [out][in].
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<S>,
    pub b: Vec<S>,
}

impl<S: Scalar> Linear<S> {
    /// Uniform init in +-sqrt(6 / (fan_in + fan_out)), optionally rescaled;
    /// biases start at zero. Draws in f64 so the stream is identical no
    /// matter which scalar instantiates the layer.
    pub fn new(in_dim: usize, out_dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt() * scale;
        let w = (0..in_dim * out_dim).map(|_| sc(rng.gen_range(-bound..bound))).collect();
        Linear { in_dim, out_dim, w, b: vec![S::zero(); out_dim] }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { in_dim, out_dim, w: vec![S::zero(); in_dim * out_dim], b: vec![S::zero(); out_dim] }
    }

    pub fn forward_into(&self, x: &[S], batch: usize, y: &mut Vec<S>) {
        debug_assert_eq!(x.len(), batch * self.in_dim);
        y.clear();
        y.reserve(batch * self.out_dim);
        for bi in 0..batch {
            let row = &x[bi * self.in_dim..(bi + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let w_row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                y.push(self.b[o] + dot(w_row, row));
            }
        }
    }

    /// Accumulate dL/dW and dL/db given the layer input and dL/dy.
    pub fn accumulate_grads(&self, x: &[S], batch: usize, d_y: &[S], grad: &mut Linear<S>) {
        debug_assert_eq!(d_y.len(), batch * self.out_dim);
        debug_assert_eq!(grad.w.len(), self.w.len());
        for bi in 0..batch {
            let row = &x[bi * self.in_dim..(bi + 1) * self.in_dim];
            let dy = &d_y[bi * self.out_dim..(bi + 1) * self.out_dim];
            for o in 0..self.out_dim {
                let g = dy[o];
                if g == S::zero() {
                    continue;
                }
                let gw = &mut grad.w[o * self.in_dim..(o + 1) * self.in_dim];
                for (gw_i, x_i) in gw.iter_mut().zip(row) {
                    *gw_i += g * *x_i;
                }
                grad.b[o] += g;
            }
        }
    }

    /// dL/dx = W^T dL/dy, per batch row.
    pub fn backward_input_into(&self, d_y: &[S], batch: usize, d_x: &mut Vec<S>) {
        d_x.clear();
        d_x.resize(batch * self.in_dim, S::zero());
        for bi in 0..batch {
            let dy = &d_y[bi * self.out_dim..(bi + 1) * self.out_dim];
            let dx = &mut d_x[bi * self.in_dim..(bi + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let g = dy[o];
                if g == S::zero() {
                    continue;
                }
                let w_row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                for (dx_i, w_i) in dx.iter_mut().zip(w_row) {
                    *dx_i += g * *w_i;
                }
            }
        }
    }

    pub fn param_len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub(crate) fn cast<T: Scalar>(&self) -> Linear<T> {
        Linear {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            w: self.w.iter().map(|&v| recast(v)).collect(),
            b: self.b.iter().map(|&v| recast(v)).collect(),
        }
    }
}

/// Shared feature trunk: gate on the input, then two gated hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk<S> {
    pub l1: Linear<S>,
    pub l2: Linear<S>,
}

/// Activations recorded by a trunk forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct TrunkTrace<S> {
    pub batch: usize,
    pub input: Vec<S>,
    g0: Vec<S>,
    z1: Vec<S>,
    g1: Vec<S>,
    z2: Vec<S>,
    /// Trunk output: gate(z2).
    pub g2: Vec<S>,
}

impl<S: Scalar> Trunk<S> {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Trunk { l1: Linear::new(in_dim, hidden, 1.0, rng), l2: Linear::new(hidden, hidden, 1.0, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        Trunk {
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

    pub fn forward(&self, x: &[S], batch: usize) -> Result<TrunkTrace<S>> {
        if batch == 0 || x.len() != batch * self.l1.in_dim {
            return Err(Error::Shape(format!(
                "trunk input of {} values is not a batch of {batch} x {}",
                x.len(),
                self.l1.in_dim
            )));
        }
        let mut trace = TrunkTrace {
            batch,
            input: x.to_vec(),
            g0: Vec::new(),
            z1: Vec::new(),
            g1: Vec::new(),
            z2: Vec::new(),
            g2: Vec::new(),
        };
        gate_into(x, &mut trace.g0);
        self.l1.forward_into(&trace.g0, batch, &mut trace.z1);
        gate_into(&trace.z1, &mut trace.g1);
        self.l2.forward_into(&trace.g1, batch, &mut trace.z2);
        gate_into(&trace.z2, &mut trace.g2);
        Ok(trace)
    }

    /// Backpropagate dL/d(trunk output); accumulates parameter gradients and
    /// returns dL/d(input).
    pub fn backward(
        &self,
        trace: &TrunkTrace<S>,
        d_out: &[S],
        grads: &mut Trunk<S>,
    ) -> Result<Vec<S>> {
        if trace.batch == 0 || trace.g2.is_empty() {
            return Err(Error::Lifecycle("trunk backward called without a forward trace".into()));
        }
        if d_out.len() != trace.batch * self.l2.out_dim {
            return Err(Error::Shape(format!(
                "trunk upstream gradient has {} values, expected {}",
                d_out.len(),
                trace.batch * self.l2.out_dim
            )));
        }
        let mut d_z2 = Vec::new();
        gate_backward_into(&trace.z2, d_out, &mut d_z2);
        self.l2.accumulate_grads(&trace.g1, trace.batch, &d_z2, &mut grads.l2);
        let mut d_g1 = Vec::new();
        self.l2.backward_input_into(&d_z2, trace.batch, &mut d_g1);
        let mut d_z1 = Vec::new();
        gate_backward_into(&trace.z1, &d_g1, &mut d_z1);
        self.l1.accumulate_grads(&trace.g0, trace.batch, &d_z1, &mut grads.l1);
        let mut d_g0 = Vec::new();
        self.l1.backward_input_into(&d_z1, trace.batch, &mut d_g0);
        let mut d_input = Vec::new();
        gate_backward_into(&trace.input, &d_g0, &mut d_input);
        Ok(d_input)
    }

    pub(crate) fn cast<T: Scalar>(&self) -> Trunk<T> {
        Trunk { l1: self.l1.cast(), l2: self.l2.cast() }
    }
}

/// Policy head family: a Gaussian mean with a learnable state-independent
/// log-std, or categorical logits. Continuous means are unbounded; sampled
/// commands are clamped at the vehicle boundary instead, which keeps the
/// surrogate gradient alive when the mean sits outside the command box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Continuous { dim: usize },
    Discrete { n: usize },
}

impl HeadKind {
    pub fn act_dim(&self) -> usize {
        match *self {
            HeadKind::Continuous { dim } => dim,
            HeadKind::Discrete { n } => n,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, HeadKind::Continuous { .. })
    }
}

/// Initial value for the learnable log standard deviation.
pub const LOG_STD_INIT: f64 = -0.5;
/// Policy-head init scale; keeps the initial policy near uniform.
pub const POLICY_HEAD_SCALE: f64 = 0.01;
/// Hidden width used by every trunk in the artifact.
pub const HIDDEN_DIM: usize = 256;

/// Actor-critic network: shared gated trunk, one policy head, and two value
/// heads (one per reward stream).
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic<S> {
    pub head: HeadKind,
    pub trunk: Trunk<S>,
    pub policy: Linear<S>,
    /// Learnable log-std vector; empty for discrete heads.
    pub log_std: Vec<S>,
    pub value_ext: Linear<S>,
    pub value_int: Linear<S>,
}

/// Forward-pass record for [`ActorCritic::backward`].
#[derive(Debug, Clone)]
pub struct AcTrace<S> {
    pub batch: usize,
    trunk: TrunkTrace<S>,
    /// Distribution parameter rows: Gaussian means (continuous) or raw
    /// logits (discrete), batch x act_dim.
    pub head_out: Vec<S>,
    pub value_ext: Vec<S>,
    pub value_int: Vec<S>,
}

impl<S: Scalar> ActorCritic<S> {
    pub fn new(obs_dim: usize, head: HeadKind, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let trunk = Trunk::new(obs_dim, hidden, rng);
        let policy = Linear::new(hidden, head.act_dim(), POLICY_HEAD_SCALE, rng);
        let log_std = match head {
            HeadKind::Continuous { dim } => vec![sc(LOG_STD_INIT); dim],
            HeadKind::Discrete { .. } => Vec::new(),
        };
        let value_ext = Linear::new(hidden, 1, 1.0, rng);
        let value_int = Linear::new(hidden, 1, 1.0, rng);
        ActorCritic { head, trunk, policy, log_std, value_ext, value_int }
    }

    pub fn zeros_like(&self) -> Self {
        ActorCritic {
            head: self.head,
            trunk: self.trunk.zeros_like(),
            policy: Linear::zeros(self.policy.in_dim, self.policy.out_dim),
            log_std: vec![S::zero(); self.log_std.len()],
            value_ext: Linear::zeros(self.value_ext.in_dim, 1),
            value_int: Linear::zeros(self.value_int.in_dim, 1),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn forward(&self, obs: &[S], batch: usize) -> Result<AcTrace<S>> {
        let trunk = self.trunk.forward(obs, batch)?;
        let mut head_out = Vec::new();
        self.policy.forward_into(&trunk.g2, batch, &mut head_out);
        let mut value_ext = Vec::new();
        self.value_ext.forward_into(&trunk.g2, batch, &mut value_ext);
        let mut value_int = Vec::new();
        self.value_int.forward_into(&trunk.g2, batch, &mut value_int);
        Ok(AcTrace { batch, trunk, head_out, value_ext, value_int })
    }

    /// Backpropagate head-space gradients.
    ///
    /// `d_head` is dL/d(head_out). `d_log_std` (continuous only, may be
    /// empty otherwise) adds straight into the log-std gradient. `d_value_*`
    /// are per-sample dL/d(value). Returns dL/d(obs).
    pub fn backward(
        &self,
        trace: &AcTrace<S>,
        d_head: &[S],
        d_log_std: &[S],
        d_value_ext: &[S],
        d_value_int: &[S],
        grads: &mut Self,
    ) -> Result<Vec<S>> {
        let (batch, act) = (trace.batch, self.head.act_dim());
        if batch == 0 || trace.head_out.is_empty() {
            return Err(Error::Lifecycle("backward called without a forward trace".into()));
        }
        if d_head.len() != batch * act
            || d_value_ext.len() != batch
            || d_value_int.len() != batch
            || d_log_std.len() != self.log_std.len()
        {
            return Err(Error::Shape(format!(
                "head gradient shapes ({}, {}, {}, {}) do not match batch {batch} x act {act}",
                d_head.len(),
                d_log_std.len(),
                d_value_ext.len(),
                d_value_int.len()
            )));
        }
        for (g, d) in grads.log_std.iter_mut().zip(d_log_std) {
            *g += *d;
        }
        self.policy.accumulate_grads(&trace.trunk.g2, batch, d_head, &mut grads.policy);
        self.value_ext.accumulate_grads(&trace.trunk.g2, batch, d_value_ext, &mut grads.value_ext);
        self.value_int.accumulate_grads(&trace.trunk.g2, batch, d_value_int, &mut grads.value_int);

        let mut d_g2 = Vec::new();
        self.policy.backward_input_into(d_head, batch, &mut d_g2);
        let mut tmp = Vec::new();
        self.value_ext.backward_input_into(d_value_ext, batch, &mut tmp);
        for (a, b) in d_g2.iter_mut().zip(&tmp) {
            *a += *b;
        }
        self.value_int.backward_input_into(d_value_int, batch, &mut tmp);
        for (a, b) in d_g2.iter_mut().zip(&tmp) {
            *a += *b;
        }
        self.trunk.backward(&trace.trunk, &d_g2, &mut grads.trunk)
    }

    /// Named parameter tensors in the fixed flatten order.
    pub fn tensor_names(&self) -> Vec<&'static str> {
        let mut names = vec!["trunk.l1.w", "trunk.l1.b", "trunk.l2.w", "trunk.l2.b", "policy.w", "policy.b"];
        if !self.log_std.is_empty() {
            names.push("log_std");
        }
        names.extend(["value_ext.w", "value_ext.b", "value_int.w", "value_int.b"]);
        names
    }

    fn tensors(&self) -> Vec<&[S]> {
        let mut t: Vec<&[S]> = vec![
            &self.trunk.l1.w,
            &self.trunk.l1.b,
            &self.trunk.l2.w,
            &self.trunk.l2.b,
            &self.policy.w,
            &self.policy.b,
        ];
        if !self.log_std.is_empty() {
            t.push(&self.log_std);
        }
        t.extend([
            &self.value_ext.w as &[S],
            &self.value_ext.b,
            &self.value_int.w,
            &self.value_int.b,
        ]);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<S>> {
        let mut t: Vec<&mut Vec<S>> = vec![
            &mut self.trunk.l1.w,
            &mut self.trunk.l1.b,
            &mut self.trunk.l2.w,
            &mut self.trunk.l2.b,
            &mut self.policy.w,
            &mut self.policy.b,
        ];
        if !self.log_std.is_empty() {
            t.push(&mut self.log_std);
        }
        t.extend([
            &mut self.value_ext.w,
            &mut self.value_ext.b,
            &mut self.value_int.w,
            &mut self.value_int.b,
        ]);
        t
    }

    /// Tensor shapes (rows, cols) aligned with `tensor_names`.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let lin = |l: &Linear<S>| [(l.out_dim, l.in_dim), (l.out_dim, 1)];
        let mut shapes = Vec::new();
        shapes.extend(lin(&self.trunk.l1));
        shapes.extend(lin(&self.trunk.l2));
        shapes.extend(lin(&self.policy));
        if !self.log_std.is_empty() {
            shapes.push((self.log_std.len(), 1));
        }
        shapes.extend(lin(&self.value_ext));
        shapes.extend(lin(&self.value_int));
        shapes
    }

    pub fn param_len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten_params(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_len());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, network needs {}",
                flat.len(),
                self.param_len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ActorCritic<T> {
        ActorCritic {
            head: self.head,
            trunk: self.trunk.cast(),
            policy: self.policy.cast(),
            log_std: self.log_std.iter().map(|&v| recast(v)).collect(),
            value_ext: self.value_ext.cast(),
            value_int: self.value_int.cast(),
        }
    }
}

/// Softmax per row, numerically shifted by the row max.
pub fn softmax_rows<S: Scalar>(logits: &[S], batch: usize) -> Vec<S> {
    let n = logits.len() / batch.max(1);
    let mut out = Vec::with_capacity(logits.len());
    for bi in 0..batch {
        let row = &logits[bi * n..(bi + 1) * n];
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        let exps: Vec<S> = row
            .iter()
            .map(|&v| {
                let e = (v - max).exp();
                sum += e;
                e
            })
            .collect();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

/// Adam accumulators over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> AdamState<S> {
    pub fn new(param_len: usize) -> Self {
        AdamState { m: vec![S::zero(); param_len], v: vec![S::zero(); param_len], t: 0 }
    }

    pub fn cast<T: Scalar>(&self) -> AdamState<T> {
        AdamState {
            m: self.m.iter().map(|&v| recast(v)).collect(),
            v: self.v.iter().map(|&v| recast(v)).collect(),
            t: self.t,
        }
    }
}

/// One bias-corrected Adam step over flat parameter/gradient vectors.
pub fn adam_update<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    state: &mut AdamState<S>,
    rate: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam shapes disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = sc::<S>(ADAM_BETA1);
    let b2 = sc::<S>(ADAM_BETA2);
    let eps = sc::<S>(ADAM_EPS);
    let bc1 = S::one() - sc::<S>(ADAM_BETA1.powi(state.t as i32));
    let bc2 = S::one() - sc::<S>(ADAM_BETA2.powi(state.t as i32));
    let lr = sc::<S>(rate);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (S::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (S::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Learning-rate decay mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrMode {
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial_rate: f64,
    pub total_steps: u64,
    pub mode: LrMode,
}

impl LrSchedule {
    pub fn linear(initial_rate: f64, total_steps: u64) -> Self {
        LrSchedule { initial_rate, total_steps, mode: LrMode::Linear }
    }

    pub fn constant(initial_rate: f64) -> Self {
        LrSchedule { initial_rate, total_steps: 0, mode: LrMode::Constant }
    }
}

/// Rate at a global step: linear decay to zero at `total_steps`, never
/// negative; constant mode ignores the step.
pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    match schedule.mode {
        LrMode::Constant => schedule.initial_rate,
        LrMode::Linear => {
            if schedule.total_steps == 0 {
                return schedule.initial_rate;
            }
            let frac = 1.0 - step as f64 / schedule.total_steps as f64;
            schedule.initial_rate * frac.max(0.0)
        }
    }
}
