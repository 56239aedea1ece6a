//! Episode protocol: observation assembly, reward evaluation, and the
//! batched environment pool.
//!
//! An [`EnvInstance`] owns one world plus one UAV and one UGV. Both vehicles
//! advance by the same `dt` each step, collisions and rewards are evaluated
//! on the post-step state, and fresh observations are assembled for both
//! agents. [`VectorEnv`] steps N instances in lockstep and auto-resets any
//! that finish, which is the shape the rollout collector consumes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{RngState, SeedTree};
use crate::vehicles::{
    step_ugv, step_uav_planar, step_uav_rigid, UavCommand, UavParams, UavState, UgvAction,
    UgvState,
};
use crate::world::{build_world, EnvVariant, HitKind, WorldGeometry};

/// Beams per sweep, every 10 degrees from +90 (left) down to -90 (right).
pub const NUM_BEAMS: usize = 19;
/// Flattened UAV observation width.
pub const UAV_OBS_DIM: usize = 68;
/// Flattened UGV observation width.
pub const UGV_OBS_DIM: usize = 33;
/// Default lidar range; misses report this distance (normalized 1.0).
pub const DEFAULT_MAX_RANGE: f64 = 20.0;
/// Downward pitch of the UAV's scanning sweep (radians).
pub const SCAN_PITCH: f64 = 30.0 * std::f64::consts::PI / 180.0;
/// Simulation step for both vehicles (s).
pub const DEFAULT_DT: f64 = 0.05;
/// Height of the UGV's body center and lidar above the ground (m).
pub const UGV_BODY_HEIGHT: f64 = 0.5;

/// Azimuth of beam `i` in the body frame, radians. Beam 0 points left
/// (+90 degrees, toward +y), beam 9 straight ahead, beam 18 right.
#[inline]
pub fn beam_azimuth(i: usize) -> f64 {
    (90.0 - 10.0 * i as f64) * std::f64::consts::PI / 180.0
}

/// UAV observation: a horizontal ring sweep, a downward-pitched scanning
/// sweep that also reports target returns, and proprioception.
#[derive(Debug, Clone, PartialEq)]
pub struct UavObs {
    /// Normalized distances in [0, 1], left to right.
    pub ring_lidar: [f64; NUM_BEAMS],
    /// (normalized distance, target flag) per beam; flag is 1.0 only when
    /// the beam's nearest hit is the target sphere.
    pub scan_lidar: [(f64, f64); NUM_BEAMS],
    /// World position (m).
    pub position: [f64; 3],
    /// Unit quaternion (w, x, y, z).
    pub orientation: [f64; 4],
    /// Command issued on the previous step, zeros right after reset.
    pub prev_action: [f64; 4],
}

impl UavObs {
    pub const DIM: usize = UAV_OBS_DIM;

    /// Flat layout: ring (19), scan pairs interleaved (38), position (3),
    /// orientation (4), previous action (4).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::DIM);
        v.extend_from_slice(&self.ring_lidar);
        for &(d, f) in &self.scan_lidar {
            v.push(d);
            v.push(f);
        }
        v.extend_from_slice(&self.position);
        v.extend_from_slice(&self.orientation);
        v.extend_from_slice(&self.prev_action);
        v
    }
}

/// UGV observation: a horizontal sweep with no target channel, the UAV's
/// planar offset in the UGV's ego frame, and proprioception.
#[derive(Debug, Clone, PartialEq)]
pub struct UgvObs {
    pub lidar: [f64; NUM_BEAMS],
    /// UGV-to-UAV offset rotated into the ego frame (m); +y is left.
    pub rel_uav: [f64; 2],
    /// Bearing to the UAV, radians; +pi/2 means directly left.
    pub rel_angle: f64,
    pub position: [f64; 2],
    pub heading: f64,
    /// One-hot of the previous discrete action; all zeros after reset or a
    /// hold step.
    pub prev_action_onehot: [f64; 8],
}

impl UgvObs {
    pub const DIM: usize = UGV_OBS_DIM;

    /// Flat layout: lidar (19), rel_uav (2), rel_angle (1), position (2),
    /// heading (1), previous-action one-hot (8).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::DIM);
        v.extend_from_slice(&self.lidar);
        v.extend_from_slice(&self.rel_uav);
        v.push(self.rel_angle);
        v.extend_from_slice(&self.position);
        v.push(self.heading);
        v.extend_from_slice(&self.prev_action_onehot);
        v
    }
}

/// Reward constants for both agents. Values are summed case by case each
/// step; the terminal cases short-circuit everything except the time cost.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardParams {
    pub r_arrive_uav: f64,
    pub r_collision_uav: f64,
    pub r_forward: f64,
    pub alpha: f64,
    pub r_collision_ugv: f64,
    pub r_distance: f64,
    pub r_follow: f64,
    pub c_r1: f64,
    pub c_r2: f64,
    pub r_arrive_ugv: f64,
    pub r_time: f64,
    /// Arrival radius around the target (m), shared by both agents.
    pub theta1: f64,
    /// Follow-bonus radius around the UAV (m).
    pub theta2: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            r_arrive_uav: 7000.0,
            r_collision_uav: -7000.0,
            r_forward: 0.5,
            alpha: 5000.0,
            r_collision_ugv: -15000.0,
            r_distance: 5.0,
            r_follow: -20.0,
            c_r1: 4000.0,
            c_r2: 8000.0,
            r_arrive_ugv: 3000.0,
            r_time: -0.1,
            theta1: 2.0,
            theta2: 6.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.r_arrive_uav,
            self.r_collision_uav,
            self.r_forward,
            self.alpha,
            self.r_collision_ugv,
            self.r_distance,
            self.r_follow,
            self.c_r1,
            self.c_r2,
            self.r_arrive_ugv,
            self.r_time,
            self.theta1,
            self.theta2,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("reward parameters must be finite".into()));
        }
        if self.theta1 <= 0.0 || self.theta2 <= 0.0 {
            return Err(Error::Config("theta1 and theta2 must be positive".into()));
        }
        Ok(())
    }
}

/// One reward evaluation broken into its active cases, so tests and the
/// debug log can audit exactly which rows fired.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardEval {
    pub total: f64,
    pub terminal: bool,
    pub cases: Vec<(&'static str, f64)>,
}

impl RewardEval {
    fn from_cases(cases: Vec<(&'static str, f64)>, terminal: bool) -> Self {
        let total = cases.iter().map(|(_, v)| v).sum();
        RewardEval { total, terminal, cases }
    }

    fn inactive() -> Self {
        RewardEval { total: 0.0, terminal: false, cases: Vec::new() }
    }
}

/// UAV reward with per-case breakdown. `x_cross` and `d_cross` come from the
/// world; `d_t` is the planar distance to the target after the step, `x_t`
/// and `x_prev` the along-corridor coordinate after and before it.
pub fn uav_reward_cases(
    p: &RewardParams,
    x_cross: f64,
    d_cross: f64,
    collision: bool,
    d_t: f64,
    x_t: f64,
    x_prev: f64,
) -> RewardEval {
    let mut cases = Vec::with_capacity(3);
    let mut terminal = false;
    if collision {
        cases.push(("collision", p.r_collision_uav));
        terminal = true;
    } else if d_t < p.theta1 {
        cases.push(("arrive", p.r_arrive_uav));
        terminal = true;
    } else {
        if x_prev < x_t && x_t < x_cross {
            cases.push(("forward", p.r_forward));
        }
        if x_t > x_cross {
            cases.push(("approach", p.alpha * (d_cross - d_t) / d_cross));
        }
    }
    cases.push(("time", p.r_time));
    RewardEval::from_cases(cases, terminal)
}

/// UAV reward against a concrete world. Returns (reward, terminal).
pub fn uav_reward(
    p: &RewardParams,
    world: &WorldGeometry,
    collision: bool,
    d_t: f64,
    x_t: f64,
    x_prev: f64,
) -> (f64, bool) {
    let eval = uav_reward_cases(p, world.x_cross, world.d_cross, collision, d_t, x_t, x_prev);
    (eval.total, eval.terminal)
}

/// UGV reward with per-case breakdown. `d_t` is the UGV's planar distance to
/// the target, `d_to_uav` its planar distance to the UAV, `x_ugv`/`x_uav`
/// the along-corridor coordinates after the step.
pub fn ugv_reward_cases(
    p: &RewardParams,
    x_cross: f64,
    d_cross: f64,
    collision: bool,
    d_t: f64,
    d_to_uav: f64,
    x_ugv: f64,
    x_uav: f64,
) -> RewardEval {
    let mut cases = Vec::with_capacity(4);
    let mut terminal = false;
    if collision {
        cases.push(("collision", p.r_collision_ugv));
        terminal = true;
    } else if d_t < p.theta1 {
        cases.push(("arrive", p.r_arrive_ugv));
        terminal = true;
    } else {
        if d_to_uav < p.theta2 {
            cases.push(("distance", p.r_distance));
        }
        if x_ugv > x_uav {
            cases.push(("follow", p.r_follow));
        }
        if x_ugv < x_cross {
            cases.push(("progress", p.c_r1 * x_ugv / x_cross));
        }
        if x_ugv > x_cross {
            cases.push(("beyond", p.c_r1 + p.c_r2 * (d_cross - d_t) / d_cross));
        }
    }
    cases.push(("time", p.r_time));
    RewardEval::from_cases(cases, terminal)
}

/// UGV reward against a concrete world. Returns (reward, terminal).
#[allow(clippy::too_many_arguments)]
pub fn ugv_reward(
    p: &RewardParams,
    world: &WorldGeometry,
    collision: bool,
    d_t: f64,
    d_to_uav: f64,
    x_ugv: f64,
    x_uav: f64,
) -> (f64, bool) {
    let eval =
        ugv_reward_cases(p, world.x_cross, world.d_cross, collision, d_t, d_to_uav, x_ugv, x_uav);
    (eval.total, eval.terminal)
}

#[inline]
fn dist2d(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Assemble the UAV observation: 19 horizontal rays plus 19 rays pitched
/// down by [`SCAN_PITCH`], all in the body frame, left to right.
pub fn assemble_uav_obs(
    world: &WorldGeometry,
    uav: &UavState,
    prev_cmd: &UavCommand,
    max_range: f64,
) -> Result<UavObs> {
    if !uav.is_finite() {
        return Err(Error::NumericInput("UAV state must be finite".into()));
    }
    let origin = uav.position();
    let (sp, cp) = SCAN_PITCH.sin_cos();
    let mut ring = [0.0; NUM_BEAMS];
    let mut scan = [(0.0, 0.0); NUM_BEAMS];
    for i in 0..NUM_BEAMS {
        let (sa, ca) = beam_azimuth(i).sin_cos();
        let ring_dir = uav.rot * nalgebra::Vector3::new(ca, sa, 0.0);
        let hit = world.raycast_filtered(
            origin,
            [ring_dir.x, ring_dir.y, ring_dir.z],
            max_range,
            true,
        )?;
        ring[i] = hit.normalized_distance;
        // +z is down, so a downward pitch has a positive z component.
        let scan_dir = uav.rot * nalgebra::Vector3::new(ca * cp, sa * cp, sp);
        let hit = world.raycast_filtered(
            origin,
            [scan_dir.x, scan_dir.y, scan_dir.z],
            max_range,
            true,
        )?;
        scan[i] = (hit.normalized_distance, if hit.hit_kind == HitKind::Target { 1.0 } else { 0.0 });
    }
    let obs = UavObs {
        ring_lidar: ring,
        scan_lidar: scan,
        position: origin,
        orientation: uav.quaternion(),
        prev_action: prev_cmd.a,
    };
    validate_unit_interval(obs.ring_lidar.iter().chain(obs.scan_lidar.iter().map(|(d, _)| d)))?;
    Ok(obs)
}

/// Assemble the UGV observation. The sweep deliberately has no target
/// channel and its rays ignore the target sphere entirely, so nothing in
/// this observation depends on which branch hides the target.
pub fn assemble_ugv_obs(
    world: &WorldGeometry,
    ugv: &UgvState,
    uav: &UavState,
    prev_action: Option<&UgvAction>,
    max_range: f64,
) -> Result<UgvObs> {
    if !ugv.position.iter().all(|v| v.is_finite()) || !ugv.heading.is_finite() {
        return Err(Error::NumericInput("UGV state must be finite".into()));
    }
    let origin = [ugv.position[0], ugv.position[1], -UGV_BODY_HEIGHT];
    let mut lidar = [0.0; NUM_BEAMS];
    for (i, slot) in lidar.iter_mut().enumerate() {
        let (s, c) = (ugv.heading + beam_azimuth(i)).sin_cos();
        let hit = world.raycast_filtered(origin, [c, s, 0.0], max_range, false)?;
        *slot = hit.normalized_distance;
    }
    let dx = uav.p_w.x - ugv.position[0];
    let dy = uav.p_w.y - ugv.position[1];
    let (sh, ch) = ugv.heading.sin_cos();
    let rel = [ch * dx + sh * dy, -sh * dx + ch * dy];
    let mut onehot = [0.0; 8];
    if let Some(a) = prev_action {
        onehot[(a.id - 1) as usize] = 1.0;
    }
    let obs = UgvObs {
        lidar,
        rel_uav: rel,
        rel_angle: rel[1].atan2(rel[0]),
        position: ugv.position,
        heading: ugv.heading,
        prev_action_onehot: onehot,
    };
    validate_unit_interval(obs.lidar.iter())?;
    Ok(obs)
}

fn validate_unit_interval<'a>(values: impl Iterator<Item = &'a f64>) -> Result<()> {
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Step(format!("lidar entry {v} escaped [0, 1]")));
        }
    }
    Ok(())
}

/// How the UAV integrates: the planar command layer used for training, or
/// the full rigid-body layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UavMode {
    Planar,
    Rigid,
}

/// UGV input for one step; stage 1 holds the vehicle in place.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UgvControl {
    Hold,
    Act(UgvAction),
}

/// Why an episode ended, or `Running` while it has not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoneReason {
    Running,
    UavArrived,
    UavCollision,
    UgvArrived,
    UgvCollision,
    Timeout,
}

impl DoneReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DoneReason::Running => "running",
            DoneReason::UavArrived => "uav_arrived",
            DoneReason::UavCollision => "uav_collision",
            DoneReason::UgvArrived => "ugv_arrived",
            DoneReason::UgvCollision => "ugv_collision",
            DoneReason::Timeout => "timeout",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "running" => DoneReason::Running,
            "uav_arrived" => DoneReason::UavArrived,
            "uav_collision" => DoneReason::UavCollision,
            "ugv_arrived" => DoneReason::UgvArrived,
            "ugv_collision" => DoneReason::UgvCollision,
            "timeout" => DoneReason::Timeout,
            other => return Err(Error::Config(format!("unknown done reason {other:?}"))),
        })
    }

    fn code(self) -> u8 {
        match self {
            DoneReason::Running => 0,
            DoneReason::UavArrived => 1,
            DoneReason::UavCollision => 2,
            DoneReason::UgvArrived => 3,
            DoneReason::UgvCollision => 4,
            DoneReason::Timeout => 5,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => DoneReason::Running,
            1 => DoneReason::UavArrived,
            2 => DoneReason::UavCollision,
            3 => DoneReason::UgvArrived,
            4 => DoneReason::UgvCollision,
            5 => DoneReason::Timeout,
            other => return Err(Error::Checkpoint(format!("bad done-reason code {other}"))),
        })
    }
}

/// What this step meant for one agent's experience stream.
///
/// `Terminal` ends the stream through the agent's own arrive/collide case
/// (bootstrap zero); `Truncated` cuts it off for outside reasons such as a
/// timeout or the other agent ending the episode (bootstrap the value
/// estimate); `Inactive` means the agent already finished earlier and only
/// idles in place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamEvent {
    Running,
    Terminal,
    Truncated,
    Inactive,
}

/// Everything one step returns. When the episode just ended, the
/// observations here are the terminal ones; [`VectorEnv`] swaps in the
/// post-reset observations and hands the terminal pair over separately.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub uav_obs: UavObs,
    pub ugv_obs: UgvObs,
    pub reward_uav: f64,
    pub reward_ugv: f64,
    pub done: bool,
    pub done_reason: DoneReason,
    pub uav_stream: StreamEvent,
    pub ugv_stream: StreamEvent,
}

/// Static configuration shared by every instance in a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub variant: EnvVariant,
    pub dt: f64,
    pub step_limit: u32,
    pub uav_mode: UavMode,
    /// Stage 1 ends the episode when the UAV reaches the target; stage 2
    /// instead freezes the UAV there so the UGV can finish the job.
    pub uav_arrive_ends_episode: bool,
    pub reward: RewardParams,
    pub max_range: f64,
    pub uav_radius: f64,
    pub ugv_radius: f64,
    pub uav_params: UavParams,
    /// Uniform jitter applied to both spawn points on reset (m).
    pub spawn_jitter: f64,
    /// Collect per-step reward-case lines readable via `take_debug_lines`.
    pub debug_log: bool,
}

impl EnvConfig {
    pub fn new(variant: EnvVariant) -> Self {
        EnvConfig {
            variant,
            dt: DEFAULT_DT,
            step_limit: 1500,
            uav_mode: UavMode::Planar,
            uav_arrive_ends_episode: true,
            reward: RewardParams::default(),
            max_range: DEFAULT_MAX_RANGE,
            uav_radius: 0.3,
            ugv_radius: 0.5,
            uav_params: UavParams::default(),
            spawn_jitter: 0.5,
            debug_log: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.reward.validate()?;
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return Err(Error::Config(format!("dt {} outside (0, 0.1]", self.dt)));
        }
        if self.step_limit == 0 {
            return Err(Error::Config("step_limit must be at least 1".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        if !(self.uav_radius > 0.0 && self.ugv_radius > 0.0) {
            return Err(Error::Config("body radii must be positive".into()));
        }
        if !(self.spawn_jitter >= 0.0 && self.spawn_jitter <= 1.0) {
            return Err(Error::Config("spawn_jitter outside 0..=1".into()));
        }
        Ok(())
    }
}

/// Nominal spawn points; reset jitters around these.
const UAV_SPAWN: [f64; 3] = [2.0, 0.0, -2.0];
const UGV_SPAWN: [f64; 2] = [1.0, 0.0];

/// Serializable dynamic state of one instance. The world itself is rebuilt
/// from `episode_seed`, so a snapshot stays small and exact.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSnapshot {
    pub episode_seed: u64,
    pub uav_p: [f64; 3],
    pub uav_v: [f64; 3],
    pub uav_rot: [f64; 9],
    pub uav_yaw: f64,
    pub ugv_pos: [f64; 2],
    pub ugv_heading: f64,
    pub ugv_speed: f64,
    pub prev_cmd: [f64; 4],
    /// Previous UGV action id, 0 when none was taken yet.
    pub prev_ugv_id: u8,
    pub step_count: u32,
    pub uav_finished: bool,
    pub done_reason: DoneReason,
}

impl EnvSnapshot {
    pub const BYTE_LEN: usize = 8 + 24 * 8 + 1 + 4 + 1 + 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::BYTE_LEN);
        out.extend_from_slice(&self.episode_seed.to_le_bytes());
        let floats = self
            .uav_p
            .iter()
            .chain(self.uav_v.iter())
            .chain(self.uav_rot.iter())
            .chain(std::iter::once(&self.uav_yaw))
            .chain(self.ugv_pos.iter())
            .chain(std::iter::once(&self.ugv_heading))
            .chain(std::iter::once(&self.ugv_speed))
            .chain(self.prev_cmd.iter());
        for f in floats {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.push(self.prev_ugv_id);
        out.extend_from_slice(&self.step_count.to_le_bytes());
        out.push(self.uav_finished as u8);
        out.push(self.done_reason.code());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::BYTE_LEN {
            return Err(Error::Checkpoint(format!(
                "environment snapshot must be {} bytes, got {}",
                Self::BYTE_LEN,
                bytes.len()
            )));
        }
        let mut pos = 0usize;
        let mut take8 = || {
            let chunk: [u8; 8] = bytes[pos..pos + 8].try_into().unwrap();
            pos += 8;
            chunk
        };
        let episode_seed = u64::from_le_bytes(take8());
        let mut floats = [0.0f64; 24];
        for f in &mut floats {
            *f = f64::from_le_bytes(take8());
        }
        let prev_ugv_id = bytes[pos];
        let step_count = u32::from_le_bytes(bytes[pos + 1..pos + 5].try_into().unwrap());
        let uav_finished = match bytes[pos + 5] {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Checkpoint(format!("bad snapshot flag byte {other}")));
            }
        };
        let done_reason = DoneReason::from_code(bytes[pos + 6])?;
        if prev_ugv_id > 8 {
            return Err(Error::Checkpoint(format!("bad snapshot action id {prev_ugv_id}")));
        }
        Ok(EnvSnapshot {
            episode_seed,
            uav_p: floats[0..3].try_into().unwrap(),
            uav_v: floats[3..6].try_into().unwrap(),
            uav_rot: floats[6..15].try_into().unwrap(),
            uav_yaw: floats[15],
            ugv_pos: floats[16..18].try_into().unwrap(),
            ugv_heading: floats[18],
            ugv_speed: floats[19],
            prev_cmd: floats[20..24].try_into().unwrap(),
            prev_ugv_id,
            step_count,
            uav_finished,
            done_reason,
        })
    }
}

/// One simulated episode: a world, a UAV, a UGV, and the step counter.
#[derive(Debug, Clone)]
pub struct EnvInstance {
    cfg: EnvConfig,
    world: WorldGeometry,
    episode_seed: u64,
    uav: UavState,
    ugv: UgvState,
    prev_cmd: UavCommand,
    prev_ugv_action: Option<UgvAction>,
    step_count: u32,
    done_reason: DoneReason,
    uav_finished: bool,
    debug_lines: Vec<String>,
}

impl EnvInstance {
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut inst = EnvInstance {
            world: build_world(&cfg.variant, seed)?,
            cfg,
            episode_seed: seed,
            uav: UavState::at(UAV_SPAWN),
            ugv: UgvState::at(UGV_SPAWN),
            prev_cmd: UavCommand::zero(),
            prev_ugv_action: None,
            step_count: 0,
            done_reason: DoneReason::Running,
            uav_finished: false,
            debug_lines: Vec::new(),
        };
        inst.reset(seed)?;
        Ok(inst)
    }

    /// Start a fresh episode: rebuild the world (new target branch, new
    /// obstacle jitter where the variant has any) and respawn both vehicles
    /// near the corridor entrance.
    pub fn reset(&mut self, seed: u64) -> Result<()> {
        let tree = SeedTree::new(seed);
        self.world = build_world(&self.cfg.variant, tree.stream("env/world").gen())?;
        self.episode_seed = seed;
        let j = self.cfg.spawn_jitter;
        let mut spawn = tree.stream("env/spawn");
        let mut draw = |half: f64| if half > 0.0 { spawn.gen_range(-half..half) } else { 0.0 };
        let uav_p = [UAV_SPAWN[0] + draw(j), UAV_SPAWN[1] + draw(j), UAV_SPAWN[2]];
        let ugv_p = [UGV_SPAWN[0] + draw(j), UGV_SPAWN[1] + draw(j)];
        self.uav = UavState::at(uav_p);
        self.ugv = UgvState::at(ugv_p);
        if self.world.check_collision(uav_p, self.cfg.uav_radius)?
            || self
                .world
                .check_collision([ugv_p[0], ugv_p[1], -UGV_BODY_HEIGHT], self.cfg.ugv_radius)?
        {
            return Err(Error::Config("spawn placement collides with the world".into()));
        }
        self.prev_cmd = UavCommand::zero();
        self.prev_ugv_action = None;
        self.step_count = 0;
        self.done_reason = DoneReason::Running;
        self.uav_finished = false;
        self.debug_lines.clear();
        Ok(())
    }

    /// Observations of the current state, used for the first step of an
    /// episode; later steps read them from [`StepResult`].
    pub fn observe(&self) -> Result<(UavObs, UgvObs)> {
        let uav_obs = assemble_uav_obs(&self.world, &self.uav, &self.prev_cmd, self.cfg.max_range)?;
        let ugv_obs = assemble_ugv_obs(
            &self.world,
            &self.ugv,
            &self.uav,
            self.prev_ugv_action.as_ref(),
            self.cfg.max_range,
        )?;
        Ok((uav_obs, ugv_obs))
    }

    /// Teleport both vehicles; scenario setup for tests and scripted
    /// evaluations. Does not touch the step counter or episode status.
    pub fn place_vehicles(
        &mut self,
        uav_pos: [f64; 3],
        uav_yaw: f64,
        ugv_pos: [f64; 2],
        ugv_heading: f64,
    ) -> Result<()> {
        if !uav_pos.iter().all(|v| v.is_finite())
            || !uav_yaw.is_finite()
            || !ugv_pos.iter().all(|v| v.is_finite())
            || !ugv_heading.is_finite()
        {
            return Err(Error::NumericInput("placement must be finite".into()));
        }
        let mut uav = UavState::at(uav_pos);
        uav.yaw = uav_yaw;
        uav.rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), uav_yaw)
            .matrix()
            .to_owned();
        self.uav = uav;
        self.ugv = UgvState { position: ugv_pos, heading: ugv_heading, speed: 0.0 };
        Ok(())
    }

    /// Advance both vehicles one tick. Errors if the episode already ended.
    pub fn step(&mut self, cmd: &UavCommand, ugv_ctl: UgvControl) -> Result<StepResult> {
        if self.done_reason != DoneReason::Running {
            return Err(Error::Lifecycle(format!(
                "episode already finished ({}); reset before stepping",
                self.done_reason.as_str()
            )));
        }
        self.step_count += 1;
        let uav_was_finished = self.uav_finished;
        let x_prev = self.uav.p_w.x;

        if !uav_was_finished {
            self.uav = match self.cfg.uav_mode {
                UavMode::Planar => step_uav_planar(&self.uav, cmd, self.cfg.dt, &self.cfg.uav_params)?,
                UavMode::Rigid => step_uav_rigid(&self.uav, cmd, self.cfg.dt, &self.cfg.uav_params)?,
            };
            self.prev_cmd = *cmd;
        }
        let ugv_acted = match ugv_ctl {
            UgvControl::Hold => {
                self.prev_ugv_action = None;
                false
            }
            UgvControl::Act(a) => {
                self.ugv = step_ugv(&self.ugv, &a, self.cfg.dt)?;
                self.prev_ugv_action = Some(a);
                true
            }
        };

        let uav_pos = self.uav.position();
        let mut uav_coll = if uav_was_finished {
            false
        } else {
            self.world.check_collision(uav_pos, self.cfg.uav_radius)?
        };
        if self.cfg.uav_mode == UavMode::Rigid && !uav_was_finished {
            let alt = self.uav.altitude();
            if alt <= self.cfg.uav_radius || alt >= self.world.wall_height {
                uav_coll = true;
            }
        }
        let ugv_center = [self.ugv.position[0], self.ugv.position[1], -UGV_BODY_HEIGHT];
        let ugv_coll =
            ugv_acted && self.world.check_collision(ugv_center, self.cfg.ugv_radius)?;

        let target = self.world.target_position;
        let d_uav = dist2d([uav_pos[0], uav_pos[1]], target);
        let d_ugv = dist2d(self.ugv.position, target);
        let d_to_uav = dist2d(self.ugv.position, [uav_pos[0], uav_pos[1]]);

        let p = &self.cfg.reward;
        let uav_eval = if uav_was_finished {
            RewardEval::inactive()
        } else {
            uav_reward_cases(p, self.world.x_cross, self.world.d_cross, uav_coll, d_uav, uav_pos[0], x_prev)
        };
        let ugv_eval = ugv_reward_cases(
            p,
            self.world.x_cross,
            self.world.d_cross,
            ugv_coll,
            d_ugv,
            d_to_uav,
            self.ugv.position[0],
            uav_pos[0],
        );
        let uav_arrived_event = uav_eval.terminal && !uav_coll;
        let ugv_arrived_event = ugv_eval.terminal && !ugv_coll;

        let reason = if uav_coll {
            DoneReason::UavCollision
        } else if ugv_coll {
            DoneReason::UgvCollision
        } else if ugv_arrived_event {
            DoneReason::UgvArrived
        } else if uav_arrived_event && self.cfg.uav_arrive_ends_episode {
            DoneReason::UavArrived
        } else if self.step_count >= self.cfg.step_limit {
            DoneReason::Timeout
        } else {
            DoneReason::Running
        };
        self.done_reason = reason;
        if uav_arrived_event && !self.cfg.uav_arrive_ends_episode {
            self.uav_finished = true;
        }

        let uav_stream = if uav_was_finished {
            StreamEvent::Inactive
        } else if uav_eval.terminal {
            StreamEvent::Terminal
        } else if reason != DoneReason::Running {
            StreamEvent::Truncated
        } else {
            StreamEvent::Running
        };
        let ugv_stream = if ugv_eval.terminal {
            StreamEvent::Terminal
        } else if reason != DoneReason::Running {
            StreamEvent::Truncated
        } else {
            StreamEvent::Running
        };

        if self.cfg.debug_log {
            self.push_debug_line("uav", &uav_eval);
            self.push_debug_line("ugv", &ugv_eval);
        }

        let (uav_obs, ugv_obs) = self.observe()?;
        Ok(StepResult {
            uav_obs,
            ugv_obs,
            reward_uav: uav_eval.total,
            reward_ugv: ugv_eval.total,
            done: reason != DoneReason::Running,
            done_reason: reason,
            uav_stream,
            ugv_stream,
        })
    }

    fn push_debug_line(&mut self, agent: &str, eval: &RewardEval) {
        use std::fmt::Write;
        let mut line = format!("step={} agent={agent} cases=", self.step_count);
        for (i, (name, value)) in eval.cases.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            let _ = write!(line, "{name}:{value}");
        }
        let _ = write!(line, " total={} terminal={}", eval.total, eval.terminal);
        self.debug_lines.push(line);
    }

    /// Drain the per-step reward-case lines collected so far.
    pub fn take_debug_lines(&mut self) -> Vec<String> {
        std::mem::take(&mut self.debug_lines)
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        let r = &self.uav.rot;
        EnvSnapshot {
            episode_seed: self.episode_seed,
            uav_p: self.uav.position(),
            uav_v: [self.uav.v_w.x, self.uav.v_w.y, self.uav.v_w.z],
            uav_rot: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            uav_yaw: self.uav.yaw,
            ugv_pos: self.ugv.position,
            ugv_heading: self.ugv.heading,
            ugv_speed: self.ugv.speed,
            prev_cmd: self.prev_cmd.a,
            prev_ugv_id: self.prev_ugv_action.map_or(0, |a| a.id),
            step_count: self.step_count,
            uav_finished: self.uav_finished,
            done_reason: self.done_reason,
        }
    }

    /// Rebuild an instance from a snapshot, reconstructing the world from
    /// the stored episode seed.
    pub fn restore(cfg: EnvConfig, snap: &EnvSnapshot) -> Result<Self> {
        let mut inst = EnvInstance::new(cfg, snap.episode_seed)?;
        inst.uav = UavState {
            p_w: nalgebra::Vector3::new(snap.uav_p[0], snap.uav_p[1], snap.uav_p[2]),
            v_w: nalgebra::Vector3::new(snap.uav_v[0], snap.uav_v[1], snap.uav_v[2]),
            rot: nalgebra::Matrix3::new(
                snap.uav_rot[0],
                snap.uav_rot[1],
                snap.uav_rot[2],
                snap.uav_rot[3],
                snap.uav_rot[4],
                snap.uav_rot[5],
                snap.uav_rot[6],
                snap.uav_rot[7],
                snap.uav_rot[8],
            ),
            yaw: snap.uav_yaw,
        };
        inst.ugv =
            UgvState { position: snap.ugv_pos, heading: snap.ugv_heading, speed: snap.ugv_speed };
        inst.prev_cmd = UavCommand::new(snap.prev_cmd)?;
        inst.prev_ugv_action = match snap.prev_ugv_id {
            0 => None,
            id => Some(UgvAction::from_id(id)?),
        };
        inst.step_count = snap.step_count;
        inst.uav_finished = snap.uav_finished;
        inst.done_reason = snap.done_reason;
        Ok(inst)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn world(&self) -> &WorldGeometry {
        &self.world
    }

    pub fn uav_state(&self) -> &UavState {
        &self.uav
    }

    pub fn ugv_state(&self) -> &UgvState {
        &self.ugv
    }

    pub fn step_count(&self) -> u32 {
        self.step_count
    }

    pub fn done_reason(&self) -> DoneReason {
        self.done_reason
    }

    pub fn is_done(&self) -> bool {
        self.done_reason != DoneReason::Running
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }
}

/// One pool entry's step outcome. `result.uav_obs`/`result.ugv_obs` always
/// hold what the policy should see next (post-reset observations when the
/// episode just ended); the pre-reset terminal observations ride alongside
/// for value bootstrapping.
#[derive(Debug, Clone)]
pub struct VecStepResult {
    pub result: StepResult,
    pub terminal_uav_obs: Option<UavObs>,
    pub terminal_ugv_obs: Option<UgvObs>,
    /// Step count the episode had reached when this result was produced.
    pub steps_in_episode: u32,
}

/// Fixed-size pool of instances stepped in lockstep, with deterministic
/// auto-reset seeding.
#[derive(Debug, Clone)]
pub struct VectorEnv {
    instances: Vec<EnvInstance>,
    reset_rng: ChaCha8Rng,
    episodes_started: u64,
}

impl VectorEnv {
    pub fn new(cfg: EnvConfig, n: usize, master_seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Batch("environment pool needs at least one instance".into()));
        }
        let tree = SeedTree::new(master_seed);
        let mut reset_rng = tree.stream("vecenv/reset");
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            instances.push(EnvInstance::new(cfg.clone(), reset_rng.gen())?);
        }
        Ok(VectorEnv { instances, reset_rng, episodes_started: n as u64 })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance(&self, i: usize) -> &EnvInstance {
        &self.instances[i]
    }

    pub fn episodes_started(&self) -> u64 {
        self.episodes_started
    }

    pub fn observe_all(&self) -> Result<Vec<(UavObs, UgvObs)>> {
        self.instances.iter().map(|inst| inst.observe()).collect()
    }

    /// Step every instance. Finished instances are reset with a fresh seed
    /// drawn from the pool's reset stream, so a fixed master seed fixes the
    /// entire run.
    pub fn step(
        &mut self,
        uav_cmds: &[UavCommand],
        ugv_ctls: &[UgvControl],
    ) -> Result<Vec<VecStepResult>> {
        let n = self.instances.len();
        if uav_cmds.len() != n || ugv_ctls.len() != n {
            return Err(Error::Batch(format!(
                "batch shapes ({}, {}) do not match pool size {n}",
                uav_cmds.len(),
                ugv_ctls.len()
            )));
        }
        let mut out = Vec::with_capacity(n);
        for (i, inst) in self.instances.iter_mut().enumerate() {
            let mut result = inst.step(&uav_cmds[i], ugv_ctls[i])?;
            let steps_in_episode = inst.step_count();
            let (terminal_uav_obs, terminal_ugv_obs) = if result.done {
                let terminal = (result.uav_obs.clone(), result.ugv_obs.clone());
                inst.reset(self.reset_rng.gen())?;
                self.episodes_started += 1;
                let (fresh_uav, fresh_ugv) = inst.observe()?;
                result.uav_obs = fresh_uav;
                result.ugv_obs = fresh_ugv;
                (Some(terminal.0), Some(terminal.1))
            } else {
                (None, None)
            };
            out.push(VecStepResult { result, terminal_uav_obs, terminal_ugv_obs, steps_in_episode });
        }
        Ok(out)
    }

    /// Reset-stream position, captured into checkpoints.
    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.reset_rng)
    }

    pub fn restore_rng(&mut self, state: &RngState) {
        self.reset_rng = state.restore();
    }

    pub fn snapshot_all(&self) -> Vec<EnvSnapshot> {
        self.instances.iter().map(|inst| inst.snapshot()).collect()
    }

    pub fn restore_all(&mut self, cfg: &EnvConfig, snaps: &[EnvSnapshot]) -> Result<()> {
        if snaps.len() != self.instances.len() {
            return Err(Error::Checkpoint(format!(
                "snapshot count {} does not match pool size {}",
                snaps.len(),
                self.instances.len()
            )));
        }
        for (inst, snap) in self.instances.iter_mut().zip(snaps) {
            *inst = EnvInstance::restore(cfg.clone(), snap)?;
        }
        Ok(())
    }

    pub fn set_episodes_started(&mut self, count: u64) {
        self.episodes_started = count;
    }
}
