//! Run configuration: defaults, strict parsing, canonical printing.
//!
//! The file grammar is line oriented: `section.key = value`, one setting
//! per line, `#` starting a full-line comment. Unknown keys, duplicate
//! keys, type mismatches and out-of-range values are all hard errors that
//! name the offending line; with reward constants in the thousands, a
//! silently ignored typo is far worse than a rejected file.
//!
//! `env.variant` re-bases the whole geometry block on the named layout and
//! is therefore applied before any other key from the same source; later
//! geometry keys then override individual fields. Environment variables of
//! the form `MINENAV_SECTION_KEY` apply after the file.

use std::path::Path;

use crate::env::{EnvConfig, UavMode};
use crate::error::{Error, Result};
use crate::nn::LrMode;
use crate::trainer::{config_fingerprint, AgentHyper, GateConfig, TrainSettings};
use crate::world::EnvVariant;

pub const ENV_PREFIX: &str = "MINENAV_";

/// Everything one run needs, reproducing the published hyperparameters by
/// default: UAV lr 3e-4 and clip 0.2, UGV lr 2e-4 and clip 0.3, entropy
/// 0.03 with linear decay, gamma 0.99, lambda 0.95, curiosity strengths
/// 0.02/0.05 at lr 3e-4, 30 environment instances.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub uav: AgentHyper,
    pub ugv: AgentHyper,
    pub gate: GateConfig,
    pub settings: TrainSettings,
    pub out_dir: String,
    pub eval_episodes: usize,
    pub eval_deterministic: bool,
    pub eval_workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig::new(EnvVariant::original()),
            // each agent's rate decays over its own stage budget
            uav: AgentHyper::uav_defaults(20_000_000),
            ugv: AgentHyper::ugv_defaults(10_000_000),
            gate: GateConfig::default(),
            settings: TrainSettings::default(),
            out_dir: "runs".to_string(),
            eval_episodes: 1000,
            eval_deterministic: true,
            eval_workers: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.uav.validate()?;
        self.ugv.validate()?;
        self.gate.validate()?;
        self.settings.validate()?;
        if self.uav.ppo.horizon != self.ugv.ppo.horizon {
            return Err(Error::Config(format!(
                "uav.horizon ({}) and ugv.horizon ({}) must match; the pool steps in lockstep",
                self.uav.ppo.horizon, self.ugv.ppo.horizon
            )));
        }
        if self.uav.schedule_steps == 0 || self.ugv.schedule_steps == 0 {
            return Err(Error::Config("schedule_steps must be positive".into()));
        }
        if self.out_dir.is_empty() {
            return Err(Error::Config("train.out_dir must not be empty".into()));
        }
        if self.eval_episodes == 0 || self.eval_workers == 0 {
            return Err(Error::Config("eval.episodes and eval.workers must be positive".into()));
        }
        Ok(())
    }

    /// The canonical text form: every key in registry order. Parsing this
    /// text reproduces the config exactly, and printing again reproduces
    /// the same text (fixed point), so the text doubles as the identity
    /// that checkpoints fingerprint.
    pub fn canonical_text(&self) -> String {
        let mut out = String::with_capacity(4096);
        out.push_str("# run configuration: section.key = value, '#' comments a whole line\n");
        let mut section = "";
        for &key in KNOWN_KEYS {
            let (sec, _) = key.split_once('.').unwrap();
            if sec != section {
                out.push('\n');
                section = sec;
            }
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&emit_value(self, key));
            out.push('\n');
        }
        out
    }

    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.canonical_text())
    }
}

/// All accepted keys, in canonical print order.
pub const KNOWN_KEYS: &[&str] = &[
    "env.variant",
    "env.corridor_length",
    "env.corridor_width",
    "env.fork_half_angle",
    "env.target_branch_angle",
    "env.branch_width",
    "env.leg1_length",
    "env.branch_length",
    "env.target_path_dist",
    "env.target_radius",
    "env.has_fork",
    "env.num_obstacles",
    "env.obstacle_layout_id",
    "env.obstacle_jitter",
    "env.wall_height",
    "env.obstacle_height",
    "env.dt",
    "env.step_limit",
    "env.uav_mode",
    "env.max_range",
    "env.uav_radius",
    "env.ugv_radius",
    "env.spawn_jitter",
    "vehicle.mass",
    "vehicle.gravity",
    "vehicle.v_max",
    "vehicle.yaw_rate_max",
    "vehicle.v_z_max",
    "vehicle.h_min",
    "vehicle.h_max",
    "vehicle.roll_pitch_rate_max",
    "reward.r_arrive_uav",
    "reward.r_collision_uav",
    "reward.r_forward",
    "reward.alpha",
    "reward.r_collision_ugv",
    "reward.r_distance",
    "reward.r_follow",
    "reward.c_r1",
    "reward.c_r2",
    "reward.r_arrive_ugv",
    "reward.r_time",
    "reward.theta1",
    "reward.theta2",
    "uav.learning_rate",
    "uav.lr_mode",
    "uav.schedule_steps",
    "uav.epsilon",
    "uav.entropy_coef",
    "uav.gamma",
    "uav.intrinsic_gamma",
    "uav.lambda",
    "uav.epochs",
    "uav.minibatch_size",
    "uav.horizon",
    "uav.value_coef",
    "uav.max_grad_norm",
    "uav.log_std_init",
    "uav.normalize_advantages",
    "uav.curiosity_strength",
    "uav.curiosity_lr",
    "uav.forward_weight",
    "uav.hidden",
    "uav.feature_dim",
    "ugv.learning_rate",
    "ugv.lr_mode",
    "ugv.schedule_steps",
    "ugv.epsilon",
    "ugv.entropy_coef",
    "ugv.gamma",
    "ugv.intrinsic_gamma",
    "ugv.lambda",
    "ugv.epochs",
    "ugv.minibatch_size",
    "ugv.horizon",
    "ugv.value_coef",
    "ugv.max_grad_norm",
    "ugv.log_std_init",
    "ugv.normalize_advantages",
    "ugv.curiosity_strength",
    "ugv.curiosity_lr",
    "ugv.forward_weight",
    "ugv.hidden",
    "ugv.feature_dim",
    "gate.window_steps",
    "gate.threshold",
    "gate.required_consecutive",
    "train.num_instances",
    "train.stage1_max_steps",
    "train.stage2_max_steps",
    "train.checkpoint_every",
    "train.icm_minibatch",
    "train.recent_episodes",
    "train.seed",
    "train.out_dir",
    "eval.episodes",
    "eval.deterministic",
    "eval.workers",
];

fn bad(at: &str, key: &str, msg: &str) -> Error {
    Error::Config(format!("{at}: {key} {msg}"))
}

fn parse_f64(at: &str, key: &str, v: &str) -> Result<f64> {
    let x: f64 =
        v.parse().map_err(|_| bad(at, key, &format!("expects a number, got {v:?}")))?;
    if !x.is_finite() {
        return Err(bad(at, key, "must be finite"));
    }
    Ok(x)
}

fn parse_u64(at: &str, key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad(at, key, &format!("expects a nonnegative integer, got {v:?}")))
}

fn parse_u32(at: &str, key: &str, v: &str) -> Result<u32> {
    v.parse().map_err(|_| bad(at, key, &format!("expects a nonnegative integer, got {v:?}")))
}

fn parse_usize(at: &str, key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(at, key, &format!("expects a nonnegative integer, got {v:?}")))
}

fn parse_bool(at: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(at, key, &format!("expects true or false, got {v:?}"))),
    }
}

fn positive(at: &str, key: &str, x: f64) -> Result<f64> {
    if x > 0.0 {
        Ok(x)
    } else {
        Err(bad(at, key, &format!("must be positive, got {x}")))
    }
}

fn nonnegative(at: &str, key: &str, x: f64) -> Result<f64> {
    if x >= 0.0 {
        Ok(x)
    } else {
        Err(bad(at, key, &format!("must be nonnegative, got {x}")))
    }
}

fn open_unit(at: &str, key: &str, x: f64) -> Result<f64> {
    if x > 0.0 && x < 1.0 {
        Ok(x)
    } else {
        Err(bad(at, key, &format!("must lie in (0, 1), got {x}")))
    }
}

fn half_open_unit(at: &str, key: &str, x: f64) -> Result<f64> {
    if x > 0.0 && x <= 1.0 {
        Ok(x)
    } else {
        Err(bad(at, key, &format!("must lie in (0, 1], got {x}")))
    }
}

fn closed_unit(at: &str, key: &str, x: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(bad(at, key, &format!("must lie in [0, 1], got {x}")))
    }
}

fn apply_agent(h: &mut AgentHyper, key: &str, full: &str, value: &str, at: &str) -> Result<bool> {
    match key {
        "learning_rate" => h.learning_rate = positive(at, full, parse_f64(at, full, value)?)?,
        "lr_mode" => {
            h.lr_mode = match value {
                "linear" => LrMode::Linear,
                "constant" => LrMode::Constant,
                _ => return Err(bad(at, full, &format!("expects linear or constant, got {value:?}"))),
            }
        }
        "schedule_steps" => {
            h.schedule_steps = parse_u64(at, full, value)?;
            if h.schedule_steps == 0 {
                return Err(bad(at, full, "must be positive"));
            }
        }
        "epsilon" => h.ppo.epsilon = open_unit(at, full, parse_f64(at, full, value)?)?,
        "entropy_coef" => h.ppo.entropy_coef = nonnegative(at, full, parse_f64(at, full, value)?)?,
        "gamma" => h.ppo.gamma = half_open_unit(at, full, parse_f64(at, full, value)?)?,
        "intrinsic_gamma" => {
            h.ppo.intrinsic_gamma = half_open_unit(at, full, parse_f64(at, full, value)?)?
        }
        "lambda" => h.ppo.lambda = closed_unit(at, full, parse_f64(at, full, value)?)?,
        "epochs" => {
            h.ppo.epochs = parse_usize(at, full, value)?;
            if h.ppo.epochs == 0 {
                return Err(bad(at, full, "must be positive"));
            }
        }
        "minibatch_size" => {
            h.ppo.minibatch_size = parse_usize(at, full, value)?;
            if h.ppo.minibatch_size < 2 {
                return Err(bad(at, full, "must be at least 2"));
            }
        }
        "horizon" => {
            h.ppo.horizon = parse_usize(at, full, value)?;
            if h.ppo.horizon == 0 {
                return Err(bad(at, full, "must be positive"));
            }
        }
        "value_coef" => h.ppo.value_coef = nonnegative(at, full, parse_f64(at, full, value)?)?,
        "max_grad_norm" => {
            h.ppo.max_grad_norm = nonnegative(at, full, parse_f64(at, full, value)?)?
        }
        "log_std_init" => h.log_std_init = parse_f64(at, full, value)?,
        "normalize_advantages" => h.ppo.normalize_advantages = parse_bool(at, full, value)?,
        "curiosity_strength" => {
            h.icm.strength = nonnegative(at, full, parse_f64(at, full, value)?)?
        }
        "curiosity_lr" => h.icm.learning_rate = positive(at, full, parse_f64(at, full, value)?)?,
        "forward_weight" => {
            h.icm.forward_weight = closed_unit(at, full, parse_f64(at, full, value)?)?
        }
        "hidden" => {
            h.hidden = parse_usize(at, full, value)?;
            if h.hidden == 0 {
                return Err(bad(at, full, "must be positive"));
            }
        }
        "feature_dim" => {
            h.icm_feature = parse_usize(at, full, value)?;
            if h.icm_feature == 0 {
                return Err(bad(at, full, "must be positive"));
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn apply(cfg: &mut RunConfig, section: &str, key: &str, value: &str, at: &str) -> Result<()> {
    let full = format!("{section}.{key}");
    let full = full.as_str();
    match section {
        "env" => match key {
            "variant" => {
                let base = EnvVariant::by_name(value).ok_or_else(|| {
                    bad(
                        at,
                        full,
                        &format!(
                            "expects original, complex, short_corridor or short_fork, got {value:?}"
                        ),
                    )
                })?;
                cfg.env.variant = base;
            }
            "corridor_length" => {
                cfg.env.variant.corridor_length = positive(at, full, parse_f64(at, full, value)?)?
            }
            "corridor_width" => {
                cfg.env.variant.corridor_width = positive(at, full, parse_f64(at, full, value)?)?
            }
            "fork_half_angle" => {
                cfg.env.variant.fork_half_angle = positive(at, full, parse_f64(at, full, value)?)?
            }
            "target_branch_angle" => {
                cfg.env.variant.target_branch_angle =
                    positive(at, full, parse_f64(at, full, value)?)?
            }
            "branch_width" => {
                cfg.env.variant.branch_width = positive(at, full, parse_f64(at, full, value)?)?
            }
            "leg1_length" => {
                cfg.env.variant.leg1_length = positive(at, full, parse_f64(at, full, value)?)?
            }
            "branch_length" => {
                cfg.env.variant.branch_length = positive(at, full, parse_f64(at, full, value)?)?
            }
            "target_path_dist" => {
                cfg.env.variant.target_path_dist = positive(at, full, parse_f64(at, full, value)?)?
            }
            "target_radius" => {
                cfg.env.variant.target_radius = positive(at, full, parse_f64(at, full, value)?)?
            }
            "has_fork" => cfg.env.variant.has_fork = parse_bool(at, full, value)?,
            "num_obstacles" => cfg.env.variant.num_obstacles = parse_usize(at, full, value)?,
            "obstacle_layout_id" => {
                cfg.env.variant.obstacle_layout_id = parse_u32(at, full, value)?
            }
            "obstacle_jitter" => {
                cfg.env.variant.obstacle_jitter = nonnegative(at, full, parse_f64(at, full, value)?)?
            }
            "wall_height" => {
                cfg.env.variant.wall_height = positive(at, full, parse_f64(at, full, value)?)?
            }
            "obstacle_height" => {
                cfg.env.variant.obstacle_height = positive(at, full, parse_f64(at, full, value)?)?
            }
            "dt" => cfg.env.dt = positive(at, full, parse_f64(at, full, value)?)?,
            "step_limit" => {
                cfg.env.step_limit = parse_u32(at, full, value)?;
                if cfg.env.step_limit == 0 {
                    return Err(bad(at, full, "must be positive"));
                }
            }
            "uav_mode" => {
                cfg.env.uav_mode = match value {
                    "planar" => UavMode::Planar,
                    "rigid" => UavMode::Rigid,
                    _ => return Err(bad(at, full, &format!("expects planar or rigid, got {value:?}"))),
                }
            }
            "max_range" => cfg.env.max_range = positive(at, full, parse_f64(at, full, value)?)?,
            "uav_radius" => cfg.env.uav_radius = positive(at, full, parse_f64(at, full, value)?)?,
            "ugv_radius" => cfg.env.ugv_radius = positive(at, full, parse_f64(at, full, value)?)?,
            "spawn_jitter" => {
                cfg.env.spawn_jitter = nonnegative(at, full, parse_f64(at, full, value)?)?
            }
            _ => return Err(unknown_key(at, full)),
        },
        "vehicle" => {
            let p = &mut cfg.env.uav_params;
            match key {
                "mass" => p.mass = positive(at, full, parse_f64(at, full, value)?)?,
                "gravity" => p.gravity = positive(at, full, parse_f64(at, full, value)?)?,
                "v_max" => p.v_max = positive(at, full, parse_f64(at, full, value)?)?,
                "yaw_rate_max" => p.yaw_rate_max = positive(at, full, parse_f64(at, full, value)?)?,
                "v_z_max" => p.v_z_max = positive(at, full, parse_f64(at, full, value)?)?,
                "h_min" => p.h_min = positive(at, full, parse_f64(at, full, value)?)?,
                "h_max" => p.h_max = positive(at, full, parse_f64(at, full, value)?)?,
                "roll_pitch_rate_max" => {
                    p.roll_pitch_rate_max = positive(at, full, parse_f64(at, full, value)?)?
                }
                _ => return Err(unknown_key(at, full)),
            }
        }
        "reward" => {
            let r = &mut cfg.env.reward;
            let x = parse_f64(at, full, value)?;
            match key {
                "r_arrive_uav" => r.r_arrive_uav = x,
                "r_collision_uav" => r.r_collision_uav = x,
                "r_forward" => r.r_forward = x,
                "alpha" => r.alpha = x,
                "r_collision_ugv" => r.r_collision_ugv = x,
                "r_distance" => r.r_distance = x,
                "r_follow" => r.r_follow = x,
                "c_r1" => r.c_r1 = x,
                "c_r2" => r.c_r2 = x,
                "r_arrive_ugv" => r.r_arrive_ugv = x,
                "r_time" => r.r_time = x,
                "theta1" => r.theta1 = positive(at, full, x)?,
                "theta2" => r.theta2 = positive(at, full, x)?,
                _ => return Err(unknown_key(at, full)),
            }
        }
        "uav" => {
            if !apply_agent(&mut cfg.uav, key, full, value, at)? {
                return Err(unknown_key(at, full));
            }
        }
        "ugv" => {
            if !apply_agent(&mut cfg.ugv, key, full, value, at)? {
                return Err(unknown_key(at, full));
            }
        }
        "gate" => match key {
            "window_steps" => {
                cfg.gate.window_steps = parse_u64(at, full, value)?;
                if cfg.gate.window_steps == 0 {
                    return Err(bad(at, full, "must be positive"));
                }
            }
            "threshold" => cfg.gate.threshold = parse_f64(at, full, value)?,
            "required_consecutive" => {
                cfg.gate.required_consecutive = parse_u32(at, full, value)?;
                if cfg.gate.required_consecutive == 0 {
                    return Err(bad(at, full, "must be positive"));
                }
            }
            _ => return Err(unknown_key(at, full)),
        },
        "train" => match key {
            "num_instances" => {
                cfg.settings.num_instances = parse_usize(at, full, value)?;
                if cfg.settings.num_instances == 0 {
                    return Err(bad(at, full, "must be positive"));
                }
            }
            "stage1_max_steps" => cfg.settings.stage1_max_steps = parse_u64(at, full, value)?,
            "stage2_max_steps" => cfg.settings.stage2_max_steps = parse_u64(at, full, value)?,
            "checkpoint_every" => cfg.settings.checkpoint_every = parse_u64(at, full, value)?,
            "icm_minibatch" => {
                cfg.settings.icm_minibatch = parse_usize(at, full, value)?;
                if cfg.settings.icm_minibatch < 2 {
                    return Err(bad(at, full, "must be at least 2"));
                }
            }
            "recent_episodes" => {
                cfg.settings.recent_episodes = parse_usize(at, full, value)?;
                if cfg.settings.recent_episodes == 0 {
                    return Err(bad(at, full, "must be positive"));
                }
            }
            "seed" => cfg.settings.master_seed = parse_u64(at, full, value)?,
            "out_dir" => {
                if value.is_empty() {
                    return Err(bad(at, full, "must not be empty"));
                }
                cfg.out_dir = value.to_string();
            }
            _ => return Err(unknown_key(at, full)),
        },
        "eval" => match key {
            "episodes" => {
                cfg.eval_episodes = parse_usize(at, full, value)?;
                if cfg.eval_episodes == 0 {
                    return Err(bad(at, full, "must be positive"));
                }
            }
            "deterministic" => cfg.eval_deterministic = parse_bool(at, full, value)?,
            "workers" => {
                cfg.eval_workers = parse_usize(at, full, value)?;
                if cfg.eval_workers == 0 {
                    return Err(bad(at, full, "must be positive"));
                }
            }
            _ => return Err(unknown_key(at, full)),
        },
        _ => return Err(unknown_key(at, full)),
    }
    Ok(())
}

fn emit_agent(h: &AgentHyper, key: &str) -> String {
    match key {
        "learning_rate" => h.learning_rate.to_string(),
        "lr_mode" => match h.lr_mode {
            LrMode::Linear => "linear".to_string(),
            LrMode::Constant => "constant".to_string(),
        },
        "schedule_steps" => h.schedule_steps.to_string(),
        "epsilon" => h.ppo.epsilon.to_string(),
        "entropy_coef" => h.ppo.entropy_coef.to_string(),
        "gamma" => h.ppo.gamma.to_string(),
        "intrinsic_gamma" => h.ppo.intrinsic_gamma.to_string(),
        "lambda" => h.ppo.lambda.to_string(),
        "epochs" => h.ppo.epochs.to_string(),
        "minibatch_size" => h.ppo.minibatch_size.to_string(),
        "horizon" => h.ppo.horizon.to_string(),
        "value_coef" => h.ppo.value_coef.to_string(),
        "max_grad_norm" => h.ppo.max_grad_norm.to_string(),
        "log_std_init" => h.log_std_init.to_string(),
        "normalize_advantages" => h.ppo.normalize_advantages.to_string(),
        "curiosity_strength" => h.icm.strength.to_string(),
        "curiosity_lr" => h.icm.learning_rate.to_string(),
        "forward_weight" => h.icm.forward_weight.to_string(),
        "hidden" => h.hidden.to_string(),
        "feature_dim" => h.icm_feature.to_string(),
        _ => unreachable!("emit of unknown agent key {key}"),
    }
}

fn emit_value(cfg: &RunConfig, dotted: &str) -> String {
    let (section, key) = dotted.split_once('.').unwrap();
    match section {
        "env" => match key {
            "variant" => cfg.env.variant.name.as_str().to_string(),
            "corridor_length" => cfg.env.variant.corridor_length.to_string(),
            "corridor_width" => cfg.env.variant.corridor_width.to_string(),
            "fork_half_angle" => cfg.env.variant.fork_half_angle.to_string(),
            "target_branch_angle" => cfg.env.variant.target_branch_angle.to_string(),
            "branch_width" => cfg.env.variant.branch_width.to_string(),
            "leg1_length" => cfg.env.variant.leg1_length.to_string(),
            "branch_length" => cfg.env.variant.branch_length.to_string(),
            "target_path_dist" => cfg.env.variant.target_path_dist.to_string(),
            "target_radius" => cfg.env.variant.target_radius.to_string(),
            "has_fork" => cfg.env.variant.has_fork.to_string(),
            "num_obstacles" => cfg.env.variant.num_obstacles.to_string(),
            "obstacle_layout_id" => cfg.env.variant.obstacle_layout_id.to_string(),
            "obstacle_jitter" => cfg.env.variant.obstacle_jitter.to_string(),
            "wall_height" => cfg.env.variant.wall_height.to_string(),
            "obstacle_height" => cfg.env.variant.obstacle_height.to_string(),
            "dt" => cfg.env.dt.to_string(),
            "step_limit" => cfg.env.step_limit.to_string(),
            "uav_mode" => match cfg.env.uav_mode {
                UavMode::Planar => "planar".to_string(),
                UavMode::Rigid => "rigid".to_string(),
            },
            "max_range" => cfg.env.max_range.to_string(),
            "uav_radius" => cfg.env.uav_radius.to_string(),
            "ugv_radius" => cfg.env.ugv_radius.to_string(),
            "spawn_jitter" => cfg.env.spawn_jitter.to_string(),
            _ => unreachable!("emit of unknown key {dotted}"),
        },
        "vehicle" => {
            let p = &cfg.env.uav_params;
            match key {
                "mass" => p.mass.to_string(),
                "gravity" => p.gravity.to_string(),
                "v_max" => p.v_max.to_string(),
                "yaw_rate_max" => p.yaw_rate_max.to_string(),
                "v_z_max" => p.v_z_max.to_string(),
                "h_min" => p.h_min.to_string(),
                "h_max" => p.h_max.to_string(),
                "roll_pitch_rate_max" => p.roll_pitch_rate_max.to_string(),
                _ => unreachable!("emit of unknown key {dotted}"),
            }
        }
        "reward" => {
            let r = &cfg.env.reward;
            match key {
                "r_arrive_uav" => r.r_arrive_uav.to_string(),
                "r_collision_uav" => r.r_collision_uav.to_string(),
                "r_forward" => r.r_forward.to_string(),
                "alpha" => r.alpha.to_string(),
                "r_collision_ugv" => r.r_collision_ugv.to_string(),
                "r_distance" => r.r_distance.to_string(),
                "r_follow" => r.r_follow.to_string(),
                "c_r1" => r.c_r1.to_string(),
                "c_r2" => r.c_r2.to_string(),
                "r_arrive_ugv" => r.r_arrive_ugv.to_string(),
                "r_time" => r.r_time.to_string(),
                "theta1" => r.theta1.to_string(),
                "theta2" => r.theta2.to_string(),
                _ => unreachable!("emit of unknown key {dotted}"),
            }
        }
        "uav" => emit_agent(&cfg.uav, key),
        "ugv" => emit_agent(&cfg.ugv, key),
        "gate" => match key {
            "window_steps" => cfg.gate.window_steps.to_string(),
            "threshold" => cfg.gate.threshold.to_string(),
            "required_consecutive" => cfg.gate.required_consecutive.to_string(),
            _ => unreachable!("emit of unknown key {dotted}"),
        },
        "train" => match key {
            "num_instances" => cfg.settings.num_instances.to_string(),
            "stage1_max_steps" => cfg.settings.stage1_max_steps.to_string(),
            "stage2_max_steps" => cfg.settings.stage2_max_steps.to_string(),
            "checkpoint_every" => cfg.settings.checkpoint_every.to_string(),
            "icm_minibatch" => cfg.settings.icm_minibatch.to_string(),
            "recent_episodes" => cfg.settings.recent_episodes.to_string(),
            "seed" => cfg.settings.master_seed.to_string(),
            "out_dir" => cfg.out_dir.clone(),
            _ => unreachable!("emit of unknown key {dotted}"),
        },
        "eval" => match key {
            "episodes" => cfg.eval_episodes.to_string(),
            "deterministic" => cfg.eval_deterministic.to_string(),
            "workers" => cfg.eval_workers.to_string(),
            _ => unreachable!("emit of unknown key {dotted}"),
        },
        _ => unreachable!("emit of unknown key {dotted}"),
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn unknown_key(at: &str, full: &str) -> Error {
    let (best, dist) = KNOWN_KEYS
        .iter()
        .map(|&k| (k, levenshtein(full, k)))
        .min_by_key(|&(_, d)| d)
        .unwrap();
    let limit = (full.len() / 3).max(2);
    if dist <= limit {
        Error::Config(format!("{at}: unknown key {full:?}; did you mean {best:?}?"))
    } else {
        Error::Config(format!("{at}: unknown key {full:?}"))
    }
}

struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

fn tokenize(text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (lhs, rhs) = trimmed.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {line}: expected 'section.key = value', got {trimmed:?}"))
        })?;
        let dotted = lhs.trim();
        let value = rhs.trim();
        let (section, key) = dotted.split_once('.').ok_or_else(|| {
            Error::Config(format!("line {line}: key {dotted:?} lacks a 'section.' prefix"))
        })?;
        if section.is_empty() || key.is_empty() || key.contains('.') {
            return Err(Error::Config(format!(
                "line {line}: key {dotted:?} is not of the form section.key"
            )));
        }
        if value.is_empty() {
            return Err(Error::Config(format!("line {line}: {dotted} has no value")));
        }
        if !seen.insert(dotted.to_string()) {
            return Err(Error::Config(format!("line {line}: duplicate key {dotted:?}")));
        }
        entries.push(Entry {
            section: section.to_string(),
            key: key.to_string(),
            value: value.to_string(),
            line,
        });
    }
    Ok(entries)
}

fn apply_entries(cfg: &mut RunConfig, entries: &[Entry], at_prefix: &str) -> Result<()> {
    // the variant re-bases geometry, so it must land first
    for e in entries {
        if e.section == "env" && e.key == "variant" {
            apply(cfg, &e.section, &e.key, &e.value, &format!("{at_prefix}{}", e.line))?;
        }
    }
    for e in entries {
        if e.section == "env" && e.key == "variant" {
            continue;
        }
        apply(cfg, &e.section, &e.key, &e.value, &format!("{at_prefix}{}", e.line))?;
    }
    Ok(())
}

/// Parse config text over the defaults, then apply environment-variable
/// overrides (`MINENAV_SECTION_KEY = value`). Validation runs last so
/// cross-field rules see the final state.
pub fn parse_config(text: &str, env_overrides: &[(String, String)]) -> Result<RunConfig> {
    let entries = tokenize(text)?;
    let mut cfg = RunConfig::default();
    apply_entries(&mut cfg, &entries, "line ")?;

    // map MINENAV_UAV_LEARNING_RATE back to uav.learning_rate
    let mut override_entries = Vec::new();
    for (name, value) in env_overrides {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let dotted = KNOWN_KEYS.iter().find(|&&k| {
            k.replace('.', "_").to_ascii_uppercase() == rest.to_ascii_uppercase()
        });
        match dotted {
            Some(&k) => {
                let (section, key) = k.split_once('.').unwrap();
                override_entries.push(Entry {
                    section: section.to_string(),
                    key: key.to_string(),
                    value: value.clone(),
                    line: 0,
                });
            }
            None => {
                let guess = format!("{}.{}", "?", rest.to_ascii_lowercase());
                let (best, _) = KNOWN_KEYS
                    .iter()
                    .map(|&k| (k, levenshtein(&guess[2..], &k.replace('.', "_"))))
                    .min_by_key(|&(_, d)| d)
                    .unwrap();
                return Err(Error::Config(format!(
                    "environment override {name} matches no key; nearest is {best:?}"
                )));
            }
        }
    }
    for e in &override_entries {
        if e.section == "env" && e.key == "variant" {
            apply(&mut cfg, &e.section, &e.key, &e.value, &format!("{ENV_PREFIX}ENV_VARIANT"))?;
        }
    }
    for e in &override_entries {
        if e.section == "env" && e.key == "variant" {
            continue;
        }
        let at = format!(
            "{ENV_PREFIX}{}_{}",
            e.section.to_ascii_uppercase(),
            e.key.to_ascii_uppercase()
        );
        apply(&mut cfg, &e.section, &e.key, &e.value, &at)?;
    }

    cfg.validate()?;
    Ok(cfg)
}

/// Read and parse a config file; a missing `=` or bad value names the line.
pub fn parse_config_file(path: &Path, env_overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::File(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, env_overrides)
}

/// The `MINENAV_*` variables of this process, for [`parse_config`].
pub fn process_env_overrides() -> Vec<(String, String)> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::VariantName;

    #[test]
    fn empty_text_yields_published_defaults() {
        let cfg = parse_config("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.uav.learning_rate, 3e-4);
        assert_eq!(cfg.ugv.learning_rate, 2e-4);
        assert_eq!(cfg.uav.ppo.epsilon, 0.2);
        assert_eq!(cfg.ugv.ppo.epsilon, 0.3);
        assert_eq!(cfg.uav.ppo.entropy_coef, 0.03);
        assert_eq!(cfg.ugv.ppo.entropy_coef, 0.03);
        assert_eq!(cfg.uav.ppo.gamma, 0.99);
        assert_eq!(cfg.uav.ppo.lambda, 0.95);
        assert_eq!(cfg.ugv.ppo.lambda, 0.95);
        assert_eq!(cfg.uav.icm.strength, 0.02);
        assert_eq!(cfg.ugv.icm.strength, 0.05);
        assert_eq!(cfg.uav.icm.learning_rate, 3e-4);
        assert_eq!(cfg.ugv.icm.learning_rate, 3e-4);
        assert_eq!(cfg.uav.lr_mode, crate::nn::LrMode::Linear);
        assert_eq!(cfg.settings.num_instances, 30);
        assert_eq!(cfg.env.step_limit, 1500);
        assert_eq!(cfg.env.variant.corridor_length, 60.0);
        assert_eq!(cfg.eval_episodes, 1000);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "\n# a comment\n   \nuav.epsilon = 0.25\n# another\n";
        let cfg = parse_config(text, &[]).unwrap();
        assert_eq!(cfg.uav.ppo.epsilon, 0.25);
    }

    #[test]
    fn epsilon_out_of_range_names_the_line() {
        let err = parse_config("\nuav.epsilon = 1.5\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "got {msg}");
        assert!(msg.contains("uav.epsilon") && msg.contains("(0, 1)"), "got {msg}");
    }

    #[test]
    fn misspelled_key_suggests_the_nearest() {
        let err = parse_config("uav.lamda = 0.95", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("uav.lambda"), "got {msg}");
        assert!(msg.contains("line 1"), "got {msg}");
    }

    #[test]
    fn unknown_section_is_rejected() {
        let err = parse_config("rocket.thrust = 9000", &[]).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "got {err}");
    }

    #[test]
    fn duplicates_are_rejected() {
        let err = parse_config("uav.epsilon = 0.2\nuav.epsilon = 0.3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "got {err}");
    }

    #[test]
    fn type_mismatch_names_line_and_field() {
        let err = parse_config("train.num_instances = many", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("train.num_instances"), "got {msg}");
    }

    #[test]
    fn print_parse_print_is_a_fixed_point() {
        let defaults = RunConfig::default();
        let t1 = defaults.canonical_text();
        let parsed = parse_config(&t1, &[]).unwrap();
        assert_eq!(parsed, defaults);
        assert_eq!(parsed.canonical_text(), t1);
    }

    #[test]
    fn modified_config_round_trips() {
        let text = "env.variant = short_fork\n\
                    env.uav_mode = rigid\n\
                    uav.lr_mode = constant\n\
                    uav.normalize_advantages = false\n\
                    ugv.minibatch_size = 256\n\
                    reward.r_time = -0.25\n\
                    gate.threshold = 12.5\n\
                    train.out_dir = out/exp1\n\
                    eval.deterministic = false\n";
        let cfg = parse_config(text, &[]).unwrap();
        assert_eq!(cfg.env.variant.name, VariantName::ShortFork);
        let reparsed = parse_config(&cfg.canonical_text(), &[]).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn variant_rebases_then_overrides_apply() {
        let text = "env.corridor_length = 22\nenv.variant = short_corridor\n";
        let cfg = parse_config(text, &[]).unwrap();
        assert_eq!(cfg.env.variant.name, VariantName::ShortCorridor);
        assert!(!cfg.env.variant.has_fork);
        assert_eq!(cfg.env.variant.corridor_length, 22.0);
        assert_eq!(cfg.env.variant.num_obstacles, 2);
    }

    #[test]
    fn environment_overrides_win_over_the_file() {
        let vars = vec![("MINENAV_UAV_LEARNING_RATE".to_string(), "0.001".to_string())];
        let cfg = parse_config("uav.learning_rate = 0.0005", &vars).unwrap();
        assert_eq!(cfg.uav.learning_rate, 0.001);
    }

    #[test]
    fn unknown_environment_override_is_rejected() {
        let vars = vec![("MINENAV_UAV_LAMDA".to_string(), "0.9".to_string())];
        let err = parse_config("", &vars).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("MINENAV_UAV_LAMDA"), "got {msg}");
        assert!(msg.contains("uav.lambda"), "got {msg}");
    }

    #[test]
    fn bad_override_value_names_the_variable() {
        let vars = vec![("MINENAV_UAV_EPSILON".to_string(), "2.0".to_string())];
        let err = parse_config("", &vars).unwrap_err();
        assert!(err.to_string().contains("MINENAV_UAV_EPSILON"), "got {err}");
    }

    #[test]
    fn horizon_mismatch_is_caught() {
        let err = parse_config("uav.horizon = 256", &[]).unwrap_err();
        assert!(err.to_string().contains("horizon"), "got {err}");
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::default().fingerprint();
        let b = parse_config("uav.epsilon = 0.21", &[]).unwrap().fingerprint();
        assert_ne!(a, b);
        let c = parse_config("", &[]).unwrap().fingerprint();
        assert_eq!(a, c);
    }

    #[test]
    fn every_known_key_parses_its_own_default() {
        // canonical text touches all keys once; any drift between the
        // apply and emit tables would surface here as an unknown key
        let text = RunConfig::default().canonical_text();
        let mut keys_seen = 0;
        for line in text.lines() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            keys_seen += 1;
        }
        assert_eq!(keys_seen, KNOWN_KEYS.len());
        parse_config(&text, &[]).unwrap();
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(parse_config("just words", &[]).is_err());
        assert!(parse_config("nodot = 3", &[]).is_err());
        assert!(parse_config("a.b.c = 3", &[]).is_err());
        assert!(parse_config("uav.epsilon =", &[]).is_err());
    }
}
