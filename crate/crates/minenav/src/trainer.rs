//! Two-stage training orchestration.
//!
//! Stage 1 trains the quadrotor alone while the ground vehicle holds
//! position; a windowed reward gate decides when the found-target behavior
//! is reliable enough to start stage 2, which trains both agents jointly.
//! A simultaneous mode skips the gate and trains both from scratch as a
//! baseline. All state needed to resume bit-exactly lives in one
//! checkpoint file.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::env::{
    EnvConfig, EnvSnapshot, StreamEvent, UgvControl, VectorEnv, UAV_OBS_DIM, UGV_OBS_DIM,
};
use crate::error::{Error, Result};
use crate::icm::{icm_update, intrinsic_rewards, IcmConfig, IcmNets, IcmStats, TransitionStore};
use crate::nn::{ActorCritic, AdamState, HeadKind, LrMode, LrSchedule, HIDDEN_DIM};
use crate::ppo::{ppo_update, sample_policy, PpoConfig, RolloutBuffer, StepBatch, UpdateStats};
use crate::rng::{RngState, SeedTree};
use crate::vehicles::{UavCommand, UgvAction};
use crate::world::EnvVariant;

pub const CHECKPOINT_MAGIC: &str = "mnckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Windowed reward gate between the stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    /// Environment transitions per window.
    pub window_steps: u64,
    /// Mean per-step reward a window must reach.
    pub threshold: f64,
    /// Consecutive passing windows required.
    pub required_consecutive: u32,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { window_steps: 10_000, threshold: 5_000.0, required_consecutive: 50 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_steps == 0 || self.required_consecutive == 0 {
            return Err(Error::Config("gate window and counter target must be positive".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("gate threshold must be finite".into()));
        }
        Ok(())
    }
}

/// A completed gate window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowResult {
    pub index: u64,
    pub mean: f64,
    pub counter: u32,
    pub passed: bool,
}

/// Live gate state: a window accumulator plus the consecutive counter.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGate {
    pub cfg: GateConfig,
    pub window_sum: f64,
    pub window_steps: u64,
    pub counter: u32,
    pub passed: bool,
    pub windows_completed: u64,
}

impl StageGate {
    pub fn new(cfg: GateConfig) -> Self {
        StageGate {
            cfg,
            window_sum: 0.0,
            window_steps: 0,
            counter: 0,
            passed: false,
            windows_completed: 0,
        }
    }

    /// Feed one environment transition's reward; returns the window result
    /// when this transition closes a window.
    pub fn push_reward(&mut self, reward: f64) -> Option<WindowResult> {
        self.window_sum += reward;
        self.window_steps += 1;
        if self.window_steps < self.cfg.window_steps {
            return None;
        }
        let mean = self.window_sum / self.cfg.window_steps as f64;
        self.window_sum = 0.0;
        self.window_steps = 0;
        self.windows_completed += 1;
        let passed = gate_update(self, mean);
        Some(WindowResult { index: self.windows_completed, mean, counter: self.counter, passed })
    }
}

/// The counter rule: increment on a passing window, reset to zero
/// otherwise; the gate opens at the required consecutive count.
pub fn gate_update(gate: &mut StageGate, window_mean: f64) -> bool {
    if window_mean >= gate.cfg.threshold {
        gate.counter += 1;
    } else {
        gate.counter = 0;
    }
    if gate.counter >= gate.cfg.required_consecutive {
        gate.passed = true;
    }
    gate.passed
}

/// Per-component scale applied to raw observations at the learner boundary.
/// Lidar, flags, quaternions and one-hot blocks are already bounded; only
/// positions and angles need shrinking.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsScaler {
    scale: Vec<f64>,
}

impl ObsScaler {
    pub fn uav(variant: &EnvVariant) -> Self {
        let pos = (variant.corridor_length + variant.branch_length).max(1.0);
        let height = variant.wall_height.max(1.0);
        let mut scale = vec![1.0; UAV_OBS_DIM];
        // ring 19, scan 38, then position
        scale[57] = 1.0 / pos;
        scale[58] = 1.0 / pos;
        scale[59] = 1.0 / height;
        ObsScaler { scale }
    }

    pub fn ugv(variant: &EnvVariant, max_range: f64) -> Self {
        let pos = (variant.corridor_length + variant.branch_length).max(1.0);
        let range = max_range.max(1.0);
        let mut scale = vec![1.0; UGV_OBS_DIM];
        // lidar 19, then relative pose and own pose
        scale[19] = 1.0 / range;
        scale[20] = 1.0 / range;
        scale[21] = 1.0 / std::f64::consts::PI;
        scale[22] = 1.0 / pos;
        scale[23] = 1.0 / pos;
        scale[24] = 1.0 / std::f64::consts::PI;
        ObsScaler { scale }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply_into(&self, raw: &[f64], out: &mut Vec<f32>) {
        debug_assert_eq!(raw.len(), self.scale.len());
        out.extend(raw.iter().zip(&self.scale).map(|(&v, &s)| (v * s) as f32));
    }
}

/// Hyperparameters owned by one agent's learner.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentHyper {
    pub ppo: PpoConfig,
    pub icm: IcmConfig,
    pub learning_rate: f64,
    pub lr_mode: LrMode,
    /// Environment steps over which the linear schedule reaches zero.
    pub schedule_steps: u64,
    pub hidden: usize,
    pub icm_feature: usize,
    /// Initial log standard deviation of the Gaussian policy; ignored by
    /// discrete heads. Smaller values start exploration tighter, which suits
    /// narrow passages where wide action noise mostly ends in collisions.
    pub log_std_init: f64,
}

impl AgentHyper {
    pub fn uav_defaults(schedule_steps: u64) -> Self {
        AgentHyper {
            ppo: PpoConfig { epsilon: 0.2, ..Default::default() },
            icm: IcmConfig { strength: 0.02, learning_rate: 3e-4, forward_weight: 0.2 },
            learning_rate: 3e-4,
            lr_mode: LrMode::Linear,
            schedule_steps,
            hidden: HIDDEN_DIM,
            icm_feature: crate::icm::FEATURE_DIM,
            log_std_init: crate::nn::LOG_STD_INIT,
        }
    }

    pub fn ugv_defaults(schedule_steps: u64) -> Self {
        AgentHyper {
            ppo: PpoConfig { epsilon: 0.3, ..Default::default() },
            icm: IcmConfig { strength: 0.05, learning_rate: 3e-4, forward_weight: 0.2 },
            learning_rate: 2e-4,
            lr_mode: LrMode::Linear,
            schedule_steps,
            hidden: HIDDEN_DIM,
            icm_feature: crate::icm::FEATURE_DIM,
            log_std_init: crate::nn::LOG_STD_INIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.icm.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.hidden == 0 || self.icm_feature == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !(self.log_std_init.is_finite() && (-5.0..=2.0).contains(&self.log_std_init)) {
            return Err(Error::Config(format!(
                "log_std_init {} outside [-5, 2]",
                self.log_std_init
            )));
        }
        Ok(())
    }
}

/// Everything one agent needs to learn: policy, optimizer, curiosity nets,
/// and private RNG streams.
#[derive(Debug, Clone)]
pub struct LearnerBundle {
    pub name: &'static str,
    pub hyper: AgentHyper,
    pub net: ActorCritic<f32>,
    pub opt: AdamState<f32>,
    pub icm: IcmNets<f32>,
    pub icm_opt: AdamState<f32>,
    pub schedule: LrSchedule,
    /// Environment transitions this agent has trained on.
    pub trained_steps: u64,
    pub sample_rng: ChaCha8Rng,
    pub update_rng: ChaCha8Rng,
}

impl LearnerBundle {
    fn new(name: &'static str, obs_dim: usize, head: HeadKind, hyper: AgentHyper, tree: &SeedTree) -> Self {
        let mut init = tree.stream(&format!("train/{name}/init"));
        let mut net = ActorCritic::new(obs_dim, head, hyper.hidden, &mut init);
        for p in net.log_std.iter_mut() {
            *p = hyper.log_std_init as f32;
        }
        let mut icm_init = tree.stream(&format!("train/{name}/icm_init"));
        let icm = IcmNets::with_dims(obs_dim, head, hyper.hidden, hyper.icm_feature, &mut icm_init);
        let opt = AdamState::new(net.param_len());
        let icm_opt = AdamState::new(icm.param_len());
        let schedule = LrSchedule {
            initial_rate: hyper.learning_rate,
            total_steps: hyper.schedule_steps,
            mode: hyper.lr_mode,
        };
        LearnerBundle {
            name,
            hyper,
            net,
            opt,
            icm,
            icm_opt,
            schedule,
            trained_steps: 0,
            sample_rng: tree.stream(&format!("train/{name}/sample")),
            update_rng: tree.stream(&format!("train/{name}/update")),
        }
    }
}

/// Rolling per-episode return statistics across the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTracker {
    cur_uav: Vec<f64>,
    cur_ugv: Vec<f64>,
    cur_len: Vec<u32>,
    recent_uav: VecDeque<f64>,
    recent_ugv: VecDeque<f64>,
    recent_len: VecDeque<u32>,
    cap: usize,
    pub episodes_completed: u64,
}

impl EpisodeTracker {
    pub fn new(num_instances: usize, cap: usize) -> Self {
        EpisodeTracker {
            cur_uav: vec![0.0; num_instances],
            cur_ugv: vec![0.0; num_instances],
            cur_len: vec![0; num_instances],
            recent_uav: VecDeque::with_capacity(cap),
            recent_ugv: VecDeque::with_capacity(cap),
            recent_len: VecDeque::with_capacity(cap),
            cap,
            episodes_completed: 0,
        }
    }

    pub fn push(&mut self, instance: usize, reward_uav: f64, reward_ugv: f64, done: bool) {
        self.cur_uav[instance] += reward_uav;
        self.cur_ugv[instance] += reward_ugv;
        self.cur_len[instance] += 1;
        if done {
            if self.recent_uav.len() == self.cap {
                self.recent_uav.pop_front();
                self.recent_ugv.pop_front();
                self.recent_len.pop_front();
            }
            self.recent_uav.push_back(self.cur_uav[instance]);
            self.recent_ugv.push_back(self.cur_ugv[instance]);
            self.recent_len.push_back(self.cur_len[instance]);
            self.cur_uav[instance] = 0.0;
            self.cur_ugv[instance] = 0.0;
            self.cur_len[instance] = 0;
            self.episodes_completed += 1;
        }
    }

    fn mean(values: &VecDeque<f64>) -> f64 {
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    }

    pub fn mean_return_uav(&self) -> f64 {
        Self::mean(&self.recent_uav)
    }

    pub fn mean_return_ugv(&self) -> f64 {
        Self::mean(&self.recent_ugv)
    }
}

/// Where the loop is in Algorithm-1 terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
    Done,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::Done => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Stage2),
            3 => Ok(Stage::Done),
            other => Err(Error::Checkpoint(format!("unknown stage code {other}"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Done => "done",
        })
    }
}

/// Loop-level knobs independent of either agent.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub num_instances: usize,
    /// Liveness ceiling for stage 1 (environment transitions).
    pub stage1_max_steps: u64,
    /// Stage-2 budget in environment transitions.
    pub stage2_max_steps: u64,
    /// Checkpoint cadence in updates; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub master_seed: u64,
    pub icm_minibatch: usize,
    /// Episodes kept for the rolling mean return.
    pub recent_episodes: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            num_instances: 30,
            stage1_max_steps: 20_000_000,
            stage2_max_steps: 10_000_000,
            checkpoint_every: 50,
            master_seed: 0,
            icm_minibatch: 1024,
            recent_episodes: 100,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.num_instances == 0 {
            return Err(Error::Config("need at least one environment instance".into()));
        }
        if self.icm_minibatch < 2 {
            return Err(Error::Config("curiosity minibatch must be at least 2".into()));
        }
        if self.recent_episodes == 0 {
            return Err(Error::Config("recent episode window must be positive".into()));
        }
        Ok(())
    }
}

/// Output destinations for one run; all optional so tests can run silent.
#[derive(Default)]
pub struct Sinks<'a> {
    pub metrics: Option<&'a mut dyn Write>,
    pub gate_report: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<std::path::PathBuf>,
    pub verbose: bool,
}

pub const METRICS_HEADER: &str = "step,stage,agent,ep_return_mean,policy_loss,value_loss,entropy,clip_fraction,intrinsic_reward_mean,icm_forward_loss,icm_inverse_loss,lr,entropy_coef";

/// Stats from one rollout-plus-update cycle.
#[derive(Debug, Clone, Copy, Default)]
pub struct CycleReport {
    pub uav: UpdateStats,
    pub ugv: Option<UpdateStats>,
    pub icm_uav: IcmStats,
    pub icm_ugv: Option<IcmStats>,
    pub intrinsic_mean_uav: f64,
    pub intrinsic_mean_ugv: f64,
}

/// The whole training loop state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub settings: TrainSettings,
    pub env_template: EnvConfig,
    pub gate_cfg: GateConfig,
    pub simultaneous: bool,
    pub stage: Stage,
    pub global_step: u64,
    pub updates: u64,
    pub uav: LearnerBundle,
    pub ugv: LearnerBundle,
    pub gate: StageGate,
    pub tracker: EpisodeTracker,
    pub envs: VectorEnv,
    /// Canonical configuration text this run was built from; embedded in
    /// checkpoints so a resume can recover the exact setup.
    pub config_text: String,
    pub config_hash: String,
    uav_scaler: ObsScaler,
    ugv_scaler: ObsScaler,
    cur_uav_obs: Vec<f32>,
    cur_ugv_obs: Vec<f32>,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        env_template: EnvConfig,
        gate_cfg: GateConfig,
        uav_hyper: AgentHyper,
        ugv_hyper: AgentHyper,
        settings: TrainSettings,
        simultaneous: bool,
        config_text: String,
    ) -> Result<Self> {
        settings.validate()?;
        gate_cfg.validate()?;
        uav_hyper.validate()?;
        ugv_hyper.validate()?;
        env_template.validate()?;
        if uav_hyper.ppo.horizon != ugv_hyper.ppo.horizon {
            return Err(Error::Config(
                "both agents must share one rollout horizon; the pool steps in lockstep".into(),
            ));
        }
        let tree = SeedTree::new(settings.master_seed);
        let uav = LearnerBundle::new("uav", UAV_OBS_DIM, HeadKind::Continuous { dim: 4 }, uav_hyper, &tree);
        let ugv = LearnerBundle::new("ugv", UGV_OBS_DIM, HeadKind::Discrete { n: 8 }, ugv_hyper, &tree);
        let stage = if simultaneous { Stage::Stage2 } else { Stage::Stage1 };
        let env_cfg = stage_env_config(&env_template, stage);
        let envs = VectorEnv::new(env_cfg, settings.num_instances, settings.master_seed)?;
        let uav_scaler = ObsScaler::uav(&env_template.variant);
        let ugv_scaler = ObsScaler::ugv(&env_template.variant, env_template.max_range);
        let tracker = EpisodeTracker::new(settings.num_instances, settings.recent_episodes);
        let config_hash = config_fingerprint(&config_text);
        let mut trainer = Trainer {
            settings,
            env_template,
            gate_cfg,
            simultaneous,
            stage,
            global_step: 0,
            updates: 0,
            uav,
            ugv,
            gate: StageGate::new(gate_cfg),
            tracker,
            envs,
            config_text,
            config_hash,
            uav_scaler,
            ugv_scaler,
            cur_uav_obs: Vec::new(),
            cur_ugv_obs: Vec::new(),
        };
        trainer.refresh_observations()?;
        Ok(trainer)
    }

    fn refresh_observations(&mut self) -> Result<()> {
        self.cur_uav_obs.clear();
        self.cur_ugv_obs.clear();
        for (uav_obs, ugv_obs) in self.envs.observe_all()? {
            self.uav_scaler.apply_into(&uav_obs.to_vec(), &mut self.cur_uav_obs);
            self.ugv_scaler.apply_into(&ugv_obs.to_vec(), &mut self.cur_ugv_obs);
        }
        Ok(())
    }

    /// One rollout of `horizon` pool steps followed by both learners'
    /// updates. `track_gate` feeds the stage gate from UAV rewards.
    pub fn run_cycle(
        &mut self,
        train_ugv: bool,
        track_gate: bool,
        sinks: &mut Sinks<'_>,
    ) -> Result<CycleReport> {
        let n = self.settings.num_instances;
        let horizon = self.uav.hyper.ppo.horizon;
        let mut uav_buf = RolloutBuffer::new(UAV_OBS_DIM, 4, false, horizon, n);
        let mut ugv_buf = RolloutBuffer::new(UGV_OBS_DIM, 8, true, horizon, n);
        let mut uav_store = TransitionStore::new(UAV_OBS_DIM, 4, false, horizon * n);
        let mut ugv_store = TransitionStore::new(UGV_OBS_DIM, 8, true, horizon * n);
        let mut intrinsic_sum_uav = 0.0;
        let mut intrinsic_count_uav = 0u64;
        let mut intrinsic_sum_ugv = 0.0;
        let mut intrinsic_count_ugv = 0u64;

        for _ in 0..horizon {
            let uav_sample =
                sample_policy(&self.uav.net, &self.cur_uav_obs, n, &mut self.uav.sample_rng, false)?;
            let ugv_sample = if train_ugv {
                Some(sample_policy(&self.ugv.net, &self.cur_ugv_obs, n, &mut self.ugv.sample_rng, false)?)
            } else {
                None
            };

            let mut cmds = Vec::with_capacity(n);
            let mut raw_actions = Vec::with_capacity(n * 4);
            let mut clamped_actions = Vec::with_capacity(n * 4);
            for i in 0..n {
                let row = &uav_sample.actions[i * 4..(i + 1) * 4];
                let cmd = UavCommand::new([row[0], row[1], row[2], row[3]])?;
                raw_actions.extend(row.iter().map(|&v| v as f32));
                clamped_actions.extend(cmd.a.iter().map(|&v| v as f32));
                cmds.push(cmd);
            }
            let mut ctls = Vec::with_capacity(n);
            let mut ugv_ids = Vec::with_capacity(n);
            if let Some(sg) = &ugv_sample {
                for i in 0..n {
                    let id = sg.action_ids[i];
                    ugv_ids.push(id as u8);
                    ctls.push(UgvControl::Act(UgvAction::from_id(id as u8 + 1)?));
                }
            } else {
                ctls.resize(n, UgvControl::Hold);
            }

            let results = self.envs.step(&cmds, &ctls)?;

            // next observations of the transition just taken (terminal
            // snapshot when the episode ended, otherwise the step result)
            let mut next_uav = Vec::with_capacity(n * UAV_OBS_DIM);
            let mut next_ugv = Vec::with_capacity(n * UGV_OBS_DIM);
            for res in &results {
                match &res.terminal_uav_obs {
                    Some(obs) => self.uav_scaler.apply_into(&obs.to_vec(), &mut next_uav),
                    None => self.uav_scaler.apply_into(&res.result.uav_obs.to_vec(), &mut next_uav),
                }
                match &res.terminal_ugv_obs {
                    Some(obs) => self.ugv_scaler.apply_into(&obs.to_vec(), &mut next_ugv),
                    None => self.ugv_scaler.apply_into(&res.result.ugv_obs.to_vec(), &mut next_ugv),
                }
            }

            let r_int_uav = intrinsic_rewards(
                &self.uav.icm,
                &self.cur_uav_obs,
                &next_uav,
                &clamped_actions,
                &[],
                self.uav.hyper.icm.strength,
            )?;
            let r_int_ugv = if train_ugv {
                let ids: Vec<usize> = ugv_ids.iter().map(|&v| v as usize).collect();
                intrinsic_rewards(
                    &self.ugv.icm,
                    &self.cur_ugv_obs,
                    &next_ugv,
                    &[],
                    &ids,
                    self.ugv.hyper.icm.strength,
                )?
            } else {
                vec![0.0; n]
            };

            // per-instance stream bookkeeping
            let mut uav_terminal = vec![false; n];
            let mut uav_truncated = vec![false; n];
            let mut uav_active = vec![true; n];
            let mut ugv_terminal = vec![false; n];
            let mut ugv_truncated = vec![false; n];
            let mut ugv_active = vec![true; n];
            for (i, res) in results.iter().enumerate() {
                match res.result.uav_stream {
                    StreamEvent::Running => {}
                    StreamEvent::Terminal => uav_terminal[i] = true,
                    StreamEvent::Truncated => uav_truncated[i] = true,
                    StreamEvent::Inactive => uav_active[i] = false,
                }
                match res.result.ugv_stream {
                    StreamEvent::Running => {}
                    StreamEvent::Terminal => ugv_terminal[i] = true,
                    StreamEvent::Truncated => ugv_truncated[i] = true,
                    StreamEvent::Inactive => ugv_active[i] = false,
                }
            }

            // bootstrap values where a stream was cut mid-episode
            let mut uav_bootstrap_ext = vec![0.0f32; n];
            let mut uav_bootstrap_int = vec![0.0f32; n];
            let mut ugv_bootstrap_ext = vec![0.0f32; n];
            let mut ugv_bootstrap_int = vec![0.0f32; n];
            for i in 0..n {
                if uav_truncated[i] {
                    let row = &next_uav[i * UAV_OBS_DIM..(i + 1) * UAV_OBS_DIM];
                    let trace = self.uav.net.forward(row, 1)?;
                    uav_bootstrap_ext[i] = trace.value_ext[0];
                    uav_bootstrap_int[i] = trace.value_int[0];
                }
                if train_ugv && ugv_truncated[i] {
                    let row = &next_ugv[i * UGV_OBS_DIM..(i + 1) * UGV_OBS_DIM];
                    let trace = self.ugv.net.forward(row, 1)?;
                    ugv_bootstrap_ext[i] = trace.value_ext[0];
                    ugv_bootstrap_int[i] = trace.value_int[0];
                }
            }

            let uav_log_probs: Vec<f32> = uav_sample.log_probs.iter().map(|&v| v as f32).collect();
            let uav_ve: Vec<f32> = uav_sample.values_ext.iter().map(|&v| v as f32).collect();
            let uav_vi: Vec<f32> = uav_sample.values_int.iter().map(|&v| v as f32).collect();
            let uav_re: Vec<f32> = results.iter().map(|r| r.result.reward_uav as f32).collect();
            let uav_ri: Vec<f32> = r_int_uav.iter().map(|&v| v as f32).collect();
            uav_buf.push_step(&StepBatch {
                obs: &self.cur_uav_obs,
                actions: &raw_actions,
                action_ids: &[],
                log_probs: &uav_log_probs,
                values_ext: &uav_ve,
                values_int: &uav_vi,
                rewards_ext: &uav_re,
                rewards_int: &uav_ri,
                terminal: &uav_terminal,
                truncated: &uav_truncated,
                active: &uav_active,
                bootstrap_ext: &uav_bootstrap_ext,
                bootstrap_int: &uav_bootstrap_int,
            })?;
            if let Some(sg) = &ugv_sample {
                let lps: Vec<f32> = sg.log_probs.iter().map(|&v| v as f32).collect();
                let ve: Vec<f32> = sg.values_ext.iter().map(|&v| v as f32).collect();
                let vi: Vec<f32> = sg.values_int.iter().map(|&v| v as f32).collect();
                let re: Vec<f32> = results.iter().map(|r| r.result.reward_ugv as f32).collect();
                let ri: Vec<f32> = r_int_ugv.iter().map(|&v| v as f32).collect();
                ugv_buf.push_step(&StepBatch {
                    obs: &self.cur_ugv_obs,
                    actions: &[],
                    action_ids: &ugv_ids,
                    log_probs: &lps,
                    values_ext: &ve,
                    values_int: &vi,
                    rewards_ext: &re,
                    rewards_int: &ri,
                    terminal: &ugv_terminal,
                    truncated: &ugv_truncated,
                    active: &ugv_active,
                    bootstrap_ext: &ugv_bootstrap_ext,
                    bootstrap_int: &ugv_bootstrap_int,
                })?;
            }

            for i in 0..n {
                if uav_active[i] {
                    uav_store.push(
                        &self.cur_uav_obs[i * UAV_OBS_DIM..(i + 1) * UAV_OBS_DIM],
                        &next_uav[i * UAV_OBS_DIM..(i + 1) * UAV_OBS_DIM],
                        &clamped_actions[i * 4..(i + 1) * 4],
                        0,
                    )?;
                    intrinsic_sum_uav += r_int_uav[i];
                    intrinsic_count_uav += 1;
                }
                if train_ugv && ugv_active[i] {
                    ugv_store.push(
                        &self.cur_ugv_obs[i * UGV_OBS_DIM..(i + 1) * UGV_OBS_DIM],
                        &next_ugv[i * UGV_OBS_DIM..(i + 1) * UGV_OBS_DIM],
                        &[],
                        ugv_ids[i],
                    )?;
                    intrinsic_sum_ugv += r_int_ugv[i];
                    intrinsic_count_ugv += 1;
                }
            }

            for (i, res) in results.iter().enumerate() {
                self.tracker.push(i, res.result.reward_uav, res.result.reward_ugv, res.result.done);
                if track_gate {
                    if let Some(window) = self.gate.push_reward(res.result.reward_uav) {
                        write_gate_line(sinks, &window)?;
                    }
                }
            }

            // advance to the post-step (possibly freshly reset) observations
            self.cur_uav_obs.clear();
            self.cur_ugv_obs.clear();
            for res in &results {
                self.uav_scaler.apply_into(&res.result.uav_obs.to_vec(), &mut self.cur_uav_obs);
                self.ugv_scaler.apply_into(&res.result.ugv_obs.to_vec(), &mut self.cur_ugv_obs);
            }
            self.global_step += n as u64;
        }

        // bootstrap the open streams at the horizon edge
        let uav_tail = self.uav.net.forward(&self.cur_uav_obs, n)?;
        uav_buf.set_final_bootstrap(&uav_tail.value_ext, &uav_tail.value_int)?;
        if train_ugv {
            let ugv_tail = self.ugv.net.forward(&self.cur_ugv_obs, n)?;
            ugv_buf.set_final_bootstrap(&ugv_tail.value_ext, &ugv_tail.value_int)?;
        }

        let uav_stats = ppo_update(
            &mut self.uav.net,
            &mut self.uav.opt,
            &uav_buf,
            &self.uav.hyper.ppo,
            &self.uav.schedule,
            self.uav.trained_steps,
            &mut self.uav.update_rng,
        )?;
        self.uav.trained_steps += (horizon * n) as u64;
        let icm_uav = icm_pass(&mut self.uav, &uav_store, self.settings.icm_minibatch)?;

        let mut ugv_stats = None;
        let mut icm_ugv = None;
        if train_ugv {
            ugv_stats = Some(ppo_update(
                &mut self.ugv.net,
                &mut self.ugv.opt,
                &ugv_buf,
                &self.ugv.hyper.ppo,
                &self.ugv.schedule,
                self.ugv.trained_steps,
                &mut self.ugv.update_rng,
            )?);
            self.ugv.trained_steps += (horizon * n) as u64;
            icm_ugv = Some(icm_pass(&mut self.ugv, &ugv_store, self.settings.icm_minibatch)?);
        }
        self.updates += 1;

        let report = CycleReport {
            uav: uav_stats,
            ugv: ugv_stats,
            icm_uav,
            icm_ugv,
            intrinsic_mean_uav: if intrinsic_count_uav > 0 {
                intrinsic_sum_uav / intrinsic_count_uav as f64
            } else {
                0.0
            },
            intrinsic_mean_ugv: if intrinsic_count_ugv > 0 {
                intrinsic_sum_ugv / intrinsic_count_ugv as f64
            } else {
                0.0
            },
        };
        self.write_metrics(sinks, &report)?;
        Ok(report)
    }

    fn write_metrics(&self, sinks: &mut Sinks<'_>, report: &CycleReport) -> Result<()> {
        if sinks.metrics.is_none() && !sinks.verbose {
            return Ok(());
        }
        let mut line = String::new();
        metrics_row(
            &mut line,
            self.global_step,
            self.stage,
            "uav",
            self.tracker.mean_return_uav(),
            &report.uav,
            report.intrinsic_mean_uav,
            &report.icm_uav,
        );
        if let (Some(stats), Some(icm)) = (&report.ugv, &report.icm_ugv) {
            metrics_row(
                &mut line,
                self.global_step,
                self.stage,
                "ugv",
                self.tracker.mean_return_ugv(),
                stats,
                report.intrinsic_mean_ugv,
                icm,
            );
        }
        if sinks.verbose {
            print!("{line}");
        }
        if let Some(out) = sinks.metrics.as_deref_mut() {
            out.write_all(line.as_bytes()).map_err(Error::Io)?;
        }
        Ok(())
    }

    fn maybe_checkpoint(&self, sinks: &Sinks<'_>) -> Result<()> {
        let every = self.settings.checkpoint_every;
        if every == 0 || self.updates % every != 0 {
            return Ok(());
        }
        if let Some(dir) = &sinks.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(Error::Io)?;
            self.save_checkpoint(&dir.join("checkpoint_latest.mnckpt"))?;
        }
        Ok(())
    }

    /// Stage 1: UAV learns, UGV holds. Returns whether the gate passed
    /// before the step ceiling.
    pub fn run_stage1(&mut self, sinks: &mut Sinks<'_>) -> Result<bool> {
        if self.simultaneous {
            return Err(Error::Lifecycle("the simultaneous baseline has no stage 1".into()));
        }
        if self.stage != Stage::Stage1 {
            return Err(Error::Lifecycle("trainer is past stage 1".into()));
        }
        if self.updates == 0 {
            write_metrics_header(sinks)?;
        }
        while !self.gate.passed {
            if self.global_step >= self.settings.stage1_max_steps {
                if let Some(report) = sinks.gate_report.as_deref_mut() {
                    writeln!(
                        report,
                        "gate_timeout step={} windows={} counter={}",
                        self.global_step, self.gate.windows_completed, self.gate.counter
                    )
                    .map_err(Error::Io)?;
                }
                return Ok(false);
            }
            self.run_cycle(false, true, sinks)?;
            self.maybe_checkpoint(sinks)?;
        }
        self.enter_stage2()?;
        Ok(true)
    }

    fn enter_stage2(&mut self) -> Result<()> {
        self.stage = Stage::Stage2;
        let cfg = stage_env_config(&self.env_template, Stage::Stage2);
        let seed = SeedTree::new(self.settings.master_seed)
            .stream("train/stage2_env")
            .gen::<u64>();
        self.envs = VectorEnv::new(cfg, self.settings.num_instances, seed)?;
        self.refresh_observations()
    }

    /// Stage 2 (or the simultaneous baseline): both agents learn until the
    /// UGV has consumed the stage-2 step budget.
    pub fn run_stage2(&mut self, sinks: &mut Sinks<'_>) -> Result<()> {
        if self.stage != Stage::Stage2 {
            return Err(Error::Lifecycle("trainer is not in stage 2".into()));
        }
        if !self.gate.passed && !self.simultaneous {
            return Err(Error::Lifecycle("stage 2 is unreachable before the gate passes".into()));
        }
        if self.updates == 0 {
            write_metrics_header(sinks)?;
        }
        while self.ugv.trained_steps < self.settings.stage2_max_steps {
            self.run_cycle(true, false, sinks)?;
            self.maybe_checkpoint(sinks)?;
        }
        self.stage = Stage::Done;
        Ok(())
    }

    /// Drive the remaining stages to completion.
    pub fn run(&mut self, sinks: &mut Sinks<'_>) -> Result<()> {
        if self.stage == Stage::Stage1 {
            let passed = self.run_stage1(sinks)?;
            if !passed {
                return Err(Error::Lifecycle(format!(
                    "stage-1 gate did not pass within {} steps; see the gate report",
                    self.settings.stage1_max_steps
                )));
            }
        }
        if self.stage == Stage::Stage2 {
            self.run_stage2(sinks)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes();
        std::fs::write(path, bytes).map_err(Error::Io)
    }

    fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut blob: Vec<u8> = Vec::new();
        let mut tensor_lines = String::new();

        let push_tensor = |lines: &mut String, name: &str, rows: usize, cols: usize, data: &[f32], blob: &mut Vec<u8>| {
            let offset = blob.len();
            for &v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            let len = blob.len() - offset;
            let sha = hex(&Sha256::digest(&blob[offset..offset + len]));
            lines.push_str(&format!("tensor {name} {rows} {cols} {offset} {len} {sha}\n"));
        };

        for bundle in [&self.uav, &self.ugv] {
            let agent = bundle.name;
            let names = bundle.net.tensor_names();
            let shapes = bundle.net.tensor_shapes();
            let flat = bundle.net.flatten_params();
            let mut offset = 0;
            for (name, (rows, cols)) in names.iter().zip(&shapes) {
                let len = rows * cols;
                push_tensor(&mut tensor_lines, &format!("{agent}.ac.{name}"), *rows, *cols, &flat[offset..offset + len], &mut blob);
                offset += len;
            }
            push_tensor(&mut tensor_lines, &format!("{agent}.opt.m"), bundle.opt.m.len(), 1, &bundle.opt.m, &mut blob);
            push_tensor(&mut tensor_lines, &format!("{agent}.opt.v"), bundle.opt.v.len(), 1, &bundle.opt.v, &mut blob);
            let names = bundle.icm.tensor_names();
            let shapes = bundle.icm.tensor_shapes();
            let flat = bundle.icm.flatten_params();
            let mut offset = 0;
            for (name, (rows, cols)) in names.iter().zip(&shapes) {
                let len = rows * cols;
                push_tensor(&mut tensor_lines, &format!("{agent}.icm.{name}"), *rows, *cols, &flat[offset..offset + len], &mut blob);
                offset += len;
            }
            push_tensor(&mut tensor_lines, &format!("{agent}.icm_opt.m"), bundle.icm_opt.m.len(), 1, &bundle.icm_opt.m, &mut blob);
            push_tensor(&mut tensor_lines, &format!("{agent}.icm_opt.v"), bundle.icm_opt.v.len(), 1, &bundle.icm_opt.v, &mut blob);
        }

        // canonical configuration text, so a resume needs only this file
        let text_offset = blob.len();
        blob.extend_from_slice(self.config_text.as_bytes());
        let text_len = blob.len() - text_offset;
        let text_sha = hex(&Sha256::digest(&blob[text_offset..text_offset + text_len]));

        // environment snapshots
        let snaps = self.envs.snapshot_all();
        let snap_offset = blob.len();
        blob.extend_from_slice(&(snaps.len() as u32).to_le_bytes());
        for snap in &snaps {
            blob.extend_from_slice(&snap.to_bytes());
        }
        let snap_len = blob.len() - snap_offset;
        let snap_sha = hex(&Sha256::digest(&blob[snap_offset..snap_offset + snap_len]));

        // episode tracker
        let tracker_offset = blob.len();
        encode_tracker(&self.tracker, &mut blob);
        let tracker_len = blob.len() - tracker_offset;
        let tracker_sha = hex(&Sha256::digest(&blob[tracker_offset..tracker_offset + tracker_len]));

        let blob_sha = hex(&Sha256::digest(&blob));

        let mut manifest = String::new();
        manifest.push_str(&format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n"));
        manifest.push_str(&format!("config {}\n", self.config_hash));
        manifest.push_str(&format!("simultaneous {}\n", u8::from(self.simultaneous)));
        manifest.push_str(&format!("stage {}\n", self.stage.code()));
        manifest.push_str(&format!("global_step {}\n", self.global_step));
        manifest.push_str(&format!("updates {}\n", self.updates));
        manifest.push_str(&format!("episodes_started {}\n", self.envs.episodes_started()));
        manifest.push_str(&format!("uav_trained {}\n", self.uav.trained_steps));
        manifest.push_str(&format!("ugv_trained {}\n", self.ugv.trained_steps));
        manifest.push_str(&format!("uav_opt_t {}\n", self.uav.opt.t));
        manifest.push_str(&format!("uav_icm_opt_t {}\n", self.uav.icm_opt.t));
        manifest.push_str(&format!("ugv_opt_t {}\n", self.ugv.opt.t));
        manifest.push_str(&format!("ugv_icm_opt_t {}\n", self.ugv.icm_opt.t));
        manifest.push_str(&format!(
            "gate counter={} passed={} windows={} wsum={:016x} wsteps={}\n",
            self.gate.counter,
            u8::from(self.gate.passed),
            self.gate.windows_completed,
            self.gate.window_sum.to_bits(),
            self.gate.window_steps
        ));
        for (name, rng) in [
            ("uav.sample", &self.uav.sample_rng),
            ("uav.update", &self.uav.update_rng),
            ("ugv.sample", &self.ugv.sample_rng),
            ("ugv.update", &self.ugv.update_rng),
        ] {
            manifest.push_str(&format!("rng {name} {}\n", hex(&RngState::capture(rng).to_bytes())));
        }
        manifest.push_str(&format!("rng env.reset {}\n", hex(&self.envs.rng_state().to_bytes())));
        manifest.push_str(&tensor_lines);
        manifest.push_str(&format!("section config_text {text_offset} {text_len} {text_sha}\n"));
        manifest.push_str(&format!("section env_snapshots {snap_offset} {snap_len} {snap_sha}\n"));
        manifest.push_str(&format!("section tracker {tracker_offset} {tracker_len} {tracker_sha}\n"));
        manifest.push_str(&format!("blob {} {blob_sha}\n", blob.len()));

        let mut out = manifest.into_bytes();
        out.extend_from_slice(&blob);
        out
    }

    /// Rebuild a trainer from a checkpoint plus the exact configuration it
    /// was trained under (guarded by the stored config hash).
    #[allow(clippy::too_many_arguments)]
    pub fn load_checkpoint(
        path: &Path,
        env_template: EnvConfig,
        gate_cfg: GateConfig,
        uav_hyper: AgentHyper,
        ugv_hyper: AgentHyper,
        settings: TrainSettings,
        config_text: String,
    ) -> Result<Trainer> {
        let bytes = std::fs::read(path).map_err(Error::Io)?;
        let manifest_end = find_blob_line_end(&bytes)?;
        let manifest = std::str::from_utf8(&bytes[..manifest_end])
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let blob = &bytes[manifest_end..];

        let mut lines = manifest.lines();
        let header = lines.next().ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
        let expected = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        if header != expected {
            return Err(Error::Checkpoint(format!(
                "version mismatch: found {header:?}, this build reads {expected:?}"
            )));
        }

        let mut fields: Vec<(String, String)> = Vec::new();
        for line in lines {
            let (key, rest) = line
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad manifest line {line:?}")))?;
            fields.push((key.to_string(), rest.to_string()));
        }
        let take = |key: &str| -> Result<String> {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Checkpoint(format!("manifest is missing {key}")))
        };
        let parse_u64 = |key: &str| -> Result<u64> {
            take(key)?.parse().map_err(|_| Error::Checkpoint(format!("bad integer for {key}")))
        };

        let stored_hash = take("config")?;
        let config_hash = config_fingerprint(&config_text);
        if stored_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint was trained under {stored_hash}, this run is {config_hash}"
            )));
        }
        let simultaneous = take("simultaneous")? == "1";
        let stage = Stage::from_code(parse_u64("stage")? as u8)?;

        // blob-wide integrity first, then per-section
        let blob_line = take("blob")?;
        let mut parts = blob_line.split(' ');
        let blob_len: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("bad blob length".into()))?;
        let blob_sha = parts.next().unwrap_or_default();
        if blob.len() != blob_len {
            return Err(Error::Checkpoint(format!(
                "blob holds {} bytes, manifest says {blob_len}",
                blob.len()
            )));
        }
        if hex(&Sha256::digest(blob)) != blob_sha {
            return Err(Error::Checkpoint("blob checksum failed; the file is corrupt".into()));
        }

        let mut trainer = Trainer::new(
            env_template,
            gate_cfg,
            uav_hyper,
            ugv_hyper,
            settings,
            simultaneous,
            config_text,
        )?;
        trainer.stage = stage;
        trainer.global_step = parse_u64("global_step")?;
        trainer.updates = parse_u64("updates")?;
        trainer.uav.trained_steps = parse_u64("uav_trained")?;
        trainer.ugv.trained_steps = parse_u64("ugv_trained")?;
        trainer.uav.opt.t = parse_u64("uav_opt_t")?;
        trainer.uav.icm_opt.t = parse_u64("uav_icm_opt_t")?;
        trainer.ugv.opt.t = parse_u64("ugv_opt_t")?;
        trainer.ugv.icm_opt.t = parse_u64("ugv_icm_opt_t")?;

        let gate_line = take("gate")?;
        parse_gate_line(&gate_line, &mut trainer.gate)?;

        for (key, value) in &fields {
            if key == "rng" {
                let (name, hex_state) = value
                    .split_once(' ')
                    .ok_or_else(|| Error::Checkpoint("bad rng line".into()))?;
                let raw = unhex(hex_state)?;
                let arr: [u8; 48] = raw
                    .try_into()
                    .map_err(|_| Error::Checkpoint("rng state must be 48 bytes".into()))?;
                let state = RngState::from_bytes(&arr);
                match name {
                    "uav.sample" => trainer.uav.sample_rng = state.restore(),
                    "uav.update" => trainer.uav.update_rng = state.restore(),
                    "ugv.sample" => trainer.ugv.sample_rng = state.restore(),
                    "ugv.update" => trainer.ugv.update_rng = state.restore(),
                    "env.reset" => trainer.envs.restore_rng(&state),
                    other => {
                        return Err(Error::Checkpoint(format!("unknown rng stream {other}")))
                    }
                }
            }
        }

        // tensors, in manifest order, verifying shape and checksum
        let mut uav_ac = trainer.uav.net.flatten_params();
        let mut ugv_ac = trainer.ugv.net.flatten_params();
        let mut uav_icm = trainer.uav.icm.flatten_params();
        let mut ugv_icm = trainer.ugv.icm.flatten_params();
        let mut ac_offsets = (0usize, 0usize);
        let mut icm_offsets = (0usize, 0usize);
        for (key, value) in &fields {
            if key != "tensor" {
                continue;
            }
            let mut parts = value.split(' ');
            let name = parts.next().unwrap_or_default();
            let rows: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
            let cols: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
            let offset: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(usize::MAX);
            let len: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
            let sha = parts.next().unwrap_or_default();
            if offset.saturating_add(len) > blob.len() {
                return Err(Error::Checkpoint(format!("tensor {name} points outside the blob")));
            }
            let raw = &blob[offset..offset + len];
            if hex(&Sha256::digest(raw)) != sha {
                return Err(Error::Checkpoint(format!("tensor {name} failed its checksum")));
            }
            if len != rows * cols * 4 {
                return Err(Error::Checkpoint(format!("tensor {name} has a bad byte count")));
            }
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let count = rows * cols;
            if let Some(rest) = name.strip_prefix("uav.ac.") {
                copy_tensor(&mut uav_ac, &mut ac_offsets.0, rest, count, &values)?;
            } else if let Some(rest) = name.strip_prefix("ugv.ac.") {
                copy_tensor(&mut ugv_ac, &mut ac_offsets.1, rest, count, &values)?;
            } else if let Some(rest) = name.strip_prefix("uav.icm.") {
                copy_tensor(&mut uav_icm, &mut icm_offsets.0, rest, count, &values)?;
            } else if let Some(rest) = name.strip_prefix("ugv.icm.") {
                copy_tensor(&mut ugv_icm, &mut icm_offsets.1, rest, count, &values)?;
            } else {
                match name {
                    "uav.opt.m" => trainer.uav.opt.m = values,
                    "uav.opt.v" => trainer.uav.opt.v = values,
                    "ugv.opt.m" => trainer.ugv.opt.m = values,
                    "ugv.opt.v" => trainer.ugv.opt.v = values,
                    "uav.icm_opt.m" => trainer.uav.icm_opt.m = values,
                    "uav.icm_opt.v" => trainer.uav.icm_opt.v = values,
                    "ugv.icm_opt.m" => trainer.ugv.icm_opt.m = values,
                    "ugv.icm_opt.v" => trainer.ugv.icm_opt.v = values,
                    other => {
                        return Err(Error::Checkpoint(format!("unexpected tensor {other}")))
                    }
                }
            }
        }
        trainer.uav.net.set_flat_params(&uav_ac)?;
        trainer.ugv.net.set_flat_params(&ugv_ac)?;
        trainer.uav.icm.set_flat_params(&uav_icm)?;
        trainer.ugv.icm.set_flat_params(&ugv_icm)?;
        if trainer.uav.opt.m.len() != trainer.uav.net.param_len()
            || trainer.ugv.opt.m.len() != trainer.ugv.net.param_len()
            || trainer.uav.icm_opt.m.len() != trainer.uav.icm.param_len()
            || trainer.ugv.icm_opt.m.len() != trainer.ugv.icm.param_len()
        {
            return Err(Error::Checkpoint("optimizer state does not match the networks".into()));
        }

        // sections
        for (key, value) in &fields {
            if key != "section" {
                continue;
            }
            let mut parts = value.split(' ');
            let name = parts.next().unwrap_or_default();
            let offset: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(usize::MAX);
            let len: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
            let sha = parts.next().unwrap_or_default();
            if offset.saturating_add(len) > blob.len() {
                return Err(Error::Checkpoint(format!("section {name} points outside the blob")));
            }
            let raw = &blob[offset..offset + len];
            if hex(&Sha256::digest(raw)) != sha {
                return Err(Error::Checkpoint(format!("section {name} failed its checksum")));
            }
            match name {
                "config_text" => {
                    // integrity already verified; content equals the
                    // provided text because the hashes matched
                }
                "env_snapshots" => {
                    if raw.len() < 4 {
                        return Err(Error::Checkpoint("snapshot section is truncated".into()));
                    }
                    let count = u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as usize;
                    if raw.len() != 4 + count * EnvSnapshot::BYTE_LEN {
                        return Err(Error::Checkpoint("snapshot section has a bad length".into()));
                    }
                    let mut snaps = Vec::with_capacity(count);
                    for i in 0..count {
                        let start = 4 + i * EnvSnapshot::BYTE_LEN;
                        snaps.push(EnvSnapshot::from_bytes(&raw[start..start + EnvSnapshot::BYTE_LEN])?);
                    }
                    let cfg = stage_env_config(&trainer.env_template, trainer.stage);
                    trainer.envs.restore_all(&cfg, &snaps)?;
                }
                "tracker" => {
                    trainer.tracker = decode_tracker(raw, trainer.settings.num_instances)?;
                }
                other => return Err(Error::Checkpoint(format!("unknown section {other}"))),
            }
        }
        trainer.envs.set_episodes_started(parse_u64("episodes_started")?);
        trainer.refresh_observations()?;
        Ok(trainer)
    }
}

/// Recover the canonical configuration text embedded in a checkpoint,
/// without rebuilding the trainer. Verifies the section checksum.
pub fn checkpoint_config_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(Error::Io)?;
    let manifest_end = find_blob_line_end(&bytes)?;
    let manifest = std::str::from_utf8(&bytes[..manifest_end])
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let blob = &bytes[manifest_end..];
    let expected = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    let header = manifest.lines().next().unwrap_or_default();
    if header != expected {
        return Err(Error::Checkpoint(format!(
            "version mismatch: found {header:?}, this build reads {expected:?}"
        )));
    }
    for line in manifest.lines() {
        let Some(rest) = line.strip_prefix("section config_text ") else {
            continue;
        };
        let mut parts = rest.split(' ');
        let offset: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(usize::MAX);
        let len: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
        let sha = parts.next().unwrap_or_default();
        if offset.saturating_add(len) > blob.len() {
            return Err(Error::Checkpoint("config section points outside the blob".into()));
        }
        let raw = &blob[offset..offset + len];
        if hex(&Sha256::digest(raw)) != sha {
            return Err(Error::Checkpoint("config section failed its checksum".into()));
        }
        return String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint("embedded config is not UTF-8".into()));
    }
    Err(Error::Checkpoint("checkpoint holds no embedded config".into()))
}

/// Stage 1 ends episodes on UAV arrival; stage 2 freezes the UAV instead so
/// the UGV can finish the job.
pub fn stage_env_config(template: &EnvConfig, stage: Stage) -> EnvConfig {
    let mut cfg = template.clone();
    cfg.uav_arrive_ends_episode = matches!(stage, Stage::Stage1);
    cfg
}

fn icm_pass(bundle: &mut LearnerBundle, store: &TransitionStore, minibatch: usize) -> Result<IcmStats> {
    if store.is_empty() {
        return Ok(IcmStats::default());
    }
    let mut indices: Vec<usize> = (0..store.len()).collect();
    indices.shuffle(&mut bundle.update_rng);
    let mut total = IcmStats::default();
    let mut batches = 0usize;
    for chunk in indices.chunks(minibatch) {
        if chunk.len() < 2 {
            continue;
        }
        let (obs, next, acts, ids) = store.gather::<f32>(chunk);
        let stats = icm_update(
            &mut bundle.icm,
            &mut bundle.icm_opt,
            &obs,
            &next,
            &acts,
            &ids,
            &bundle.hyper.icm,
            bundle.hyper.icm.learning_rate,
        )?;
        total.total += stats.total;
        total.forward_loss += stats.forward_loss;
        total.inverse_loss += stats.inverse_loss;
        batches += 1;
    }
    if batches > 0 {
        total.total /= batches as f64;
        total.forward_loss /= batches as f64;
        total.inverse_loss /= batches as f64;
    }
    Ok(total)
}

fn write_metrics_header(sinks: &mut Sinks<'_>) -> Result<()> {
    if sinks.verbose {
        println!("{METRICS_HEADER}");
    }
    if let Some(out) = sinks.metrics.as_deref_mut() {
        writeln!(out, "{METRICS_HEADER}").map_err(Error::Io)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn metrics_row(
    line: &mut String,
    step: u64,
    stage: Stage,
    agent: &str,
    ep_return_mean: f64,
    stats: &UpdateStats,
    intrinsic_mean: f64,
    icm: &IcmStats,
) {
    use std::fmt::Write as _;
    let _ = writeln!(
        line,
        "{step},{},{agent},{ep_return_mean},{},{},{},{},{intrinsic_mean},{},{},{},{}",
        stage.code(),
        stats.policy_loss,
        stats.value_loss,
        stats.entropy,
        stats.clip_fraction,
        icm.forward_loss,
        icm.inverse_loss,
        stats.lr,
        stats.entropy_coef,
    );
}

fn write_gate_line(sinks: &mut Sinks<'_>, window: &WindowResult) -> Result<()> {
    if let Some(out) = sinks.gate_report.as_deref_mut() {
        writeln!(
            out,
            "window={} mean={} counter={} passed={}",
            window.index, window.mean, window.counter, window.passed
        )
        .map_err(Error::Io)?;
    }
    Ok(())
}

fn copy_tensor(
    flat: &mut [f32],
    offset: &mut usize,
    name: &str,
    count: usize,
    values: &[f32],
) -> Result<()> {
    if *offset + count > flat.len() {
        return Err(Error::Checkpoint(format!("tensor {name} overflows its network")));
    }
    flat[*offset..*offset + count].copy_from_slice(values);
    *offset += count;
    Ok(())
}

fn parse_gate_line(line: &str, gate: &mut StageGate) -> Result<()> {
    for part in line.split(' ') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint("bad gate field".into()))?;
        match key {
            "counter" => {
                gate.counter =
                    value.parse().map_err(|_| Error::Checkpoint("bad gate counter".into()))?
            }
            "passed" => gate.passed = value == "1",
            "windows" => {
                gate.windows_completed =
                    value.parse().map_err(|_| Error::Checkpoint("bad gate windows".into()))?
            }
            "wsum" => {
                let bits = u64::from_str_radix(value, 16)
                    .map_err(|_| Error::Checkpoint("bad gate sum bits".into()))?;
                gate.window_sum = f64::from_bits(bits);
            }
            "wsteps" => {
                gate.window_steps =
                    value.parse().map_err(|_| Error::Checkpoint("bad gate steps".into()))?
            }
            other => return Err(Error::Checkpoint(format!("unknown gate field {other}"))),
        }
    }
    Ok(())
}

fn encode_tracker(tracker: &EpisodeTracker, out: &mut Vec<u8>) {
    out.extend_from_slice(&tracker.episodes_completed.to_le_bytes());
    out.extend_from_slice(&(tracker.cap as u32).to_le_bytes());
    out.extend_from_slice(&(tracker.cur_uav.len() as u32).to_le_bytes());
    for &v in &tracker.cur_uav {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &tracker.cur_ugv {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &tracker.cur_len {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for deque in [&tracker.recent_uav, &tracker.recent_ugv] {
        out.extend_from_slice(&(deque.len() as u32).to_le_bytes());
        for &v in deque {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(tracker.recent_len.len() as u32).to_le_bytes());
    for &v in &tracker.recent_len {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    raw: &'a [u8],
    cursor: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.cursor + n > self.raw.len() {
            return Err(Error::Checkpoint("tracker section is truncated".into()));
        }
        let slice = &self.raw[self.cursor..self.cursor + n];
        self.cursor += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(f64::from_le_bytes(self.take(8)?.try_into().unwrap()));
        }
        Ok(out)
    }
}

fn decode_tracker(raw: &[u8], expected_instances: usize) -> Result<EpisodeTracker> {
    let mut r = ByteReader { raw, cursor: 0 };
    let episodes = r.u64()?;
    let cap = r.u32()? as usize;
    let n = r.u32()? as usize;
    if n != expected_instances {
        return Err(Error::Checkpoint(format!(
            "tracker covers {n} instances, the pool has {expected_instances}"
        )));
    }
    let cur_uav = r.f64s(n)?;
    let cur_ugv = r.f64s(n)?;
    let mut cur_len = Vec::with_capacity(n);
    for _ in 0..n {
        cur_len.push(r.u32()?);
    }
    let k1 = r.u32()? as usize;
    let recent_uav: VecDeque<f64> = r.f64s(k1)?.into();
    let k2 = r.u32()? as usize;
    let recent_ugv: VecDeque<f64> = r.f64s(k2)?.into();
    let k3 = r.u32()? as usize;
    let mut recent_len = VecDeque::with_capacity(k3);
    for _ in 0..k3 {
        recent_len.push_back(r.u32()?);
    }
    if r.cursor != raw.len() {
        return Err(Error::Checkpoint("tracker section has trailing bytes".into()));
    }
    Ok(EpisodeTracker {
        cur_uav,
        cur_ugv,
        cur_len,
        recent_uav,
        recent_ugv,
        recent_len,
        cap,
        episodes_completed: episodes,
    })
}

/// Byte offset one past the `blob <len> <sha>` line, where raw data starts.
fn find_blob_line_end(bytes: &[u8]) -> Result<usize> {
    let mut line_start = 0usize;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            let line = &bytes[line_start..i];
            if line.starts_with(b"blob ") {
                return Ok(i + 1);
            }
            line_start = i + 1;
        }
    }
    Err(Error::Checkpoint("no blob marker; not a checkpoint file".into()))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Checkpoint("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| Error::Checkpoint("bad hex digit".into()))
        })
        .collect()
}

/// Hash of the canonical configuration text; stored in checkpoints so a
/// resume under different hyperparameters is refused.
pub fn config_fingerprint(canonical_text: &str) -> String {
    hex(&Sha256::digest(canonical_text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_hyper(horizon: usize) -> (AgentHyper, AgentHyper) {
        let mut uav = AgentHyper::uav_defaults(100_000);
        uav.hidden = 16;
        uav.icm_feature = 8;
        uav.ppo.horizon = horizon;
        uav.ppo.minibatch_size = 16;
        uav.ppo.epochs = 2;
        let mut ugv = AgentHyper::ugv_defaults(100_000);
        ugv.hidden = 16;
        ugv.icm_feature = 8;
        ugv.ppo.horizon = horizon;
        ugv.ppo.minibatch_size = 16;
        ugv.ppo.epochs = 2;
        (uav, ugv)
    }

    fn tiny_trainer(seed: u64, simultaneous: bool) -> Trainer {
        let variant = EnvVariant::short_corridor();
        let mut env = EnvConfig::new(variant);
        env.step_limit = 60;
        let (uav, ugv) = tiny_hyper(8);
        let settings = TrainSettings {
            num_instances: 2,
            master_seed: seed,
            icm_minibatch: 16,
            checkpoint_every: 0,
            ..Default::default()
        };
        Trainer::new(
            env,
            GateConfig::default(),
            uav,
            ugv,
            settings,
            simultaneous,
            "deadbeef".into(),
        )
        .unwrap()
    }

    #[test]
    fn gate_worked_examples() {
        let cfg = GateConfig { window_steps: 1, threshold: 5000.0, required_consecutive: 50 };
        let mut gate = StageGate::new(cfg);
        for i in 0..50 {
            let w = gate.push_reward(5000.0).unwrap();
            assert_eq!(w.counter, i + 1);
            assert_eq!(w.passed, i == 49);
        }
        assert!(gate.passed);

        let mut gate = StageGate::new(cfg);
        for _ in 0..49 {
            gate.push_reward(5000.0).unwrap();
        }
        let w = gate.push_reward(4999.9).unwrap();
        assert_eq!(w.counter, 0);
        assert!(!w.passed);

        let mut gate = StageGate::new(cfg);
        for i in 0..400 {
            let r = if i % 2 == 0 { 6000.0 } else { 0.0 };
            gate.push_reward(r);
        }
        assert!(!gate.passed);
    }

    #[test]
    fn gate_windows_cut_exactly_on_step_counts() {
        let cfg = GateConfig { window_steps: 10, threshold: 1.0, required_consecutive: 2 };
        let mut gate = StageGate::new(cfg);
        let mut windows = Vec::new();
        // feed 3 at a time so boundaries land mid-batch
        for step in 0..30 {
            let r = if step < 10 { 2.0 } else { 0.5 };
            if let Some(w) = gate.push_reward(r) {
                windows.push(w);
            }
        }
        assert_eq!(windows.len(), 3);
        assert_eq!(windows[0].mean, 2.0);
        assert_eq!(windows[0].counter, 1);
        assert_eq!(windows[1].mean, 0.5);
        assert_eq!(windows[1].counter, 0);
        assert!(!gate.passed);
    }

    #[test]
    fn gate_matches_a_literal_transcription() {
        use rand::{Rng, SeedableRng};
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let c = r.gen_range(1..6u32);
            let tau = r.gen_range(-1.0..1.0);
            let cfg = GateConfig { window_steps: 1, threshold: tau, required_consecutive: c };
            let mut gate = StageGate::new(cfg);
            let mut oracle_counter = 0u32;
            let mut oracle_passed = false;
            for _ in 0..r.gen_range(1..120) {
                let mean = r.gen_range(-2.0..2.0);
                let w = gate.push_reward(mean).unwrap();
                if !oracle_passed {
                    if mean >= tau {
                        oracle_counter += 1;
                    } else {
                        oracle_counter = 0;
                    }
                    if oracle_counter >= c {
                        oracle_passed = true;
                    }
                }
                assert_eq!(w.passed, oracle_passed);
                if !oracle_passed {
                    assert_eq!(w.counter, oracle_counter);
                }
            }
        }
    }

    #[test]
    fn scalers_keep_observations_bounded() {
        let trainer = tiny_trainer(3, false);
        assert_eq!(trainer.cur_uav_obs.len(), 2 * UAV_OBS_DIM);
        assert_eq!(trainer.cur_ugv_obs.len(), 2 * UGV_OBS_DIM);
        for &v in trainer.cur_uav_obs.iter().chain(&trainer.cur_ugv_obs) {
            assert!(v.is_finite() && v.abs() <= 1.5, "scaled component {v}");
        }
    }

    #[test]
    fn stage1_trains_uav_and_leaves_ugv_untouched() {
        let mut trainer = tiny_trainer(4, false);
        let uav_before = trainer.uav.net.flatten_params();
        let ugv_before = trainer.ugv.net.flatten_params();
        let ugv_icm_before = trainer.ugv.icm.flatten_params();
        let mut sinks = Sinks::default();
        trainer.run_cycle(false, true, &mut sinks).unwrap();
        trainer.run_cycle(false, true, &mut sinks).unwrap();
        assert_ne!(trainer.uav.net.flatten_params(), uav_before);
        assert_eq!(trainer.ugv.net.flatten_params(), ugv_before);
        assert_eq!(trainer.ugv.icm.flatten_params(), ugv_icm_before);
        assert_eq!(trainer.global_step, 2 * 8 * 2);
        assert_eq!(trainer.updates, 2);
    }

    #[test]
    fn stage1_episodes_never_move_the_ugv() {
        let mut trainer = tiny_trainer(5, false);
        let mut sinks = Sinks::default();
        trainer.run_cycle(false, true, &mut sinks).unwrap();
        for i in 0..trainer.settings.num_instances {
            let inst = trainer.envs.instance(i);
            assert_eq!(inst.ugv_state().speed, 0.0);
        }
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let run = |seed: u64| {
            let mut trainer = tiny_trainer(seed, true);
            let mut metrics = Vec::new();
            let mut sinks = Sinks { metrics: Some(&mut metrics), ..Default::default() };
            trainer.run_cycle(true, false, &mut sinks).unwrap();
            trainer.run_cycle(true, false, &mut sinks).unwrap();
            (
                trainer.uav.net.flatten_params(),
                trainer.ugv.net.flatten_params(),
                trainer.uav.icm.flatten_params(),
                metrics,
            )
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_eq!(a.3, b.3);
        let c = run(10);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn stage1_timeout_writes_a_gate_report() {
        let mut trainer = tiny_trainer(11, false);
        trainer.settings.stage1_max_steps = 32;
        // a gate that can never pass at this reward scale
        trainer.gate = StageGate::new(GateConfig {
            window_steps: 8,
            threshold: 1e12,
            required_consecutive: 2,
        });
        let mut report = Vec::new();
        let mut sinks = Sinks { gate_report: Some(&mut report), ..Default::default() };
        let err = trainer.run(&mut sinks).unwrap_err();
        assert!(matches!(err, Error::Lifecycle(_)));
        let text = String::from_utf8(report).unwrap();
        assert!(text.contains("gate_timeout"), "report was: {text}");
        assert!(text.contains("window="));
    }

    #[test]
    fn gate_pass_hands_off_to_stage2_with_uav_params_intact() {
        let mut trainer = tiny_trainer(12, false);
        // trivially passable gate: one cheap window
        trainer.gate = StageGate::new(GateConfig {
            window_steps: 8,
            threshold: -1e18,
            required_consecutive: 1,
        });
        let mut sinks = Sinks::default();
        let passed = trainer.run_stage1(&mut sinks).unwrap();
        assert!(passed);
        assert_eq!(trainer.stage, Stage::Stage2);
        let uav_at_handoff = trainer.uav.net.flatten_params();
        let ugv_at_handoff = trainer.ugv.net.flatten_params();
        trainer.run_cycle(true, false, &mut sinks).unwrap();
        // both evolve in stage 2
        assert_ne!(trainer.uav.net.flatten_params(), uav_at_handoff);
        assert_ne!(trainer.ugv.net.flatten_params(), ugv_at_handoff);
    }

    #[test]
    fn stage2_is_gated_without_the_baseline_flag() {
        let mut trainer = tiny_trainer(13, false);
        trainer.stage = Stage::Stage2;
        let mut sinks = Sinks::default();
        assert!(matches!(trainer.run_stage2(&mut sinks), Err(Error::Lifecycle(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = tiny_trainer(14, true);
        let mut sinks = Sinks::default();
        trainer.run_cycle(true, false, &mut sinks).unwrap();
        let p1 = dir.path().join("a.mnckpt");
        trainer.save_checkpoint(&p1).unwrap();

        let variant = EnvVariant::short_corridor();
        let mut env = EnvConfig::new(variant);
        env.step_limit = 60;
        let (uav, ugv) = tiny_hyper(8);
        let settings = TrainSettings {
            num_instances: 2,
            master_seed: 14,
            icm_minibatch: 16,
            checkpoint_every: 0,
            ..Default::default()
        };
        let loaded = Trainer::load_checkpoint(
            &p1,
            env,
            GateConfig::default(),
            uav,
            ugv,
            settings,
            "deadbeef".into(),
        )
        .unwrap();
        let p2 = dir.path().join("b.mnckpt");
        loaded.save_checkpoint(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(checkpoint_config_text(&p1).unwrap(), "deadbeef");
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        // uninterrupted: four cycles
        let mut straight = tiny_trainer(15, true);
        let mut straight_metrics = Vec::new();
        {
            let mut sinks =
                Sinks { metrics: Some(&mut straight_metrics), ..Default::default() };
            for _ in 0..4 {
                straight.run_cycle(true, false, &mut sinks).unwrap();
            }
        }

        // interrupted twin: two cycles, checkpoint, reload, two more
        let mut first_half = tiny_trainer(15, true);
        let mut resumed_metrics = Vec::new();
        {
            let mut sinks = Sinks { metrics: Some(&mut resumed_metrics), ..Default::default() };
            for _ in 0..2 {
                first_half.run_cycle(true, false, &mut sinks).unwrap();
            }
        }
        let path = dir.path().join("mid.mnckpt");
        first_half.save_checkpoint(&path).unwrap();
        drop(first_half);

        let variant = EnvVariant::short_corridor();
        let mut env = EnvConfig::new(variant);
        env.step_limit = 60;
        let (uav, ugv) = tiny_hyper(8);
        let settings = TrainSettings {
            num_instances: 2,
            master_seed: 15,
            icm_minibatch: 16,
            checkpoint_every: 0,
            ..Default::default()
        };
        let mut resumed = Trainer::load_checkpoint(
            &path,
            env,
            GateConfig::default(),
            uav,
            ugv,
            settings,
            "deadbeef".into(),
        )
        .unwrap();
        {
            let mut sinks = Sinks { metrics: Some(&mut resumed_metrics), ..Default::default() };
            for _ in 0..2 {
                resumed.run_cycle(true, false, &mut sinks).unwrap();
            }
        }

        assert_eq!(straight.uav.net.flatten_params(), resumed.uav.net.flatten_params());
        assert_eq!(straight.ugv.net.flatten_params(), resumed.ugv.net.flatten_params());
        assert_eq!(straight.uav.icm.flatten_params(), resumed.uav.icm.flatten_params());
        assert_eq!(straight.uav.opt.m, resumed.uav.opt.m);
        assert_eq!(straight.global_step, resumed.global_step);
        assert_eq!(straight.tracker, resumed.tracker);
        assert_eq!(straight_metrics, resumed_metrics);
    }

    #[test]
    fn tampered_checkpoints_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = tiny_trainer(16, true);
        let mut sinks = Sinks::default();
        trainer.run_cycle(true, false, &mut sinks).unwrap();
        let path = dir.path().join("t.mnckpt");
        trainer.save_checkpoint(&path).unwrap();

        let variant = EnvVariant::short_corridor();
        let mut env = EnvConfig::new(variant);
        env.step_limit = 60;
        let (uav, ugv) = tiny_hyper(8);
        let settings = TrainSettings {
            num_instances: 2,
            master_seed: 16,
            icm_minibatch: 16,
            checkpoint_every: 0,
            ..Default::default()
        };

        // flip one byte near the end of the blob
        let mut bytes = std::fs::read(&path).unwrap();
        let at = bytes.len() - 16;
        bytes[at] ^= 0x40;
        let tampered = dir.path().join("tampered.mnckpt");
        std::fs::write(&tampered, &bytes).unwrap();
        let err = Trainer::load_checkpoint(
            &tampered,
            env.clone(),
            GateConfig::default(),
            uav.clone(),
            ugv.clone(),
            settings.clone(),
            "deadbeef".into(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err:?}");

        // mismatched config hash
        let err = Trainer::load_checkpoint(
            &path,
            env.clone(),
            GateConfig::default(),
            uav.clone(),
            ugv.clone(),
            settings.clone(),
            "feedface".into(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("config"), "got {err}");

        // wrong version header
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[7] = b'9';
        let versioned = dir.path().join("versioned.mnckpt");
        std::fs::write(&versioned, &bytes).unwrap();
        let err = Trainer::load_checkpoint(
            &versioned,
            env,
            GateConfig::default(),
            uav,
            ugv,
            settings,
            "deadbeef".into(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("version"), "got {err}");
    }

    #[test]
    fn metrics_lines_follow_the_documented_schema() {
        let mut trainer = tiny_trainer(17, true);
        let mut metrics = Vec::new();
        {
            let mut sinks = Sinks { metrics: Some(&mut metrics), ..Default::default() };
            write_metrics_header(&mut sinks).unwrap();
            trainer.run_cycle(true, false, &mut sinks).unwrap();
        }
        let text = String::from_utf8(metrics).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let columns = METRICS_HEADER.split(',').count();
        let uav_line = lines.next().unwrap();
        assert_eq!(uav_line.split(',').count(), columns);
        assert!(uav_line.contains(",uav,"));
        let ugv_line = lines.next().unwrap();
        assert!(ugv_line.contains(",ugv,"));
    }
}
