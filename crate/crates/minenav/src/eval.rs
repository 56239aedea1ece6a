//! Inference-mode evaluation and rendering.
//!
//! Runs frozen policies for N episodes, summarizes success statistics with
//! a Wilson interval, exports per-episode trajectories as CSV, and renders
//! top-view trajectory pictures or metric curves as standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::env::{DoneReason, EnvConfig, EnvInstance, UgvControl, UAV_OBS_DIM, UGV_OBS_DIM};
use crate::error::{Error, Result};
use crate::nn::{ActorCritic, HeadKind};
use crate::ppo::sample_policy;
use crate::rng::SeedTree;
use crate::trainer::ObsScaler;
use crate::vehicles::{UavCommand, UgvAction};
use crate::world::WorldGeometry;

/// One evaluated episode. Poses are kept at single precision, which the
/// CSV format round-trips exactly at nine significant digits.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub variant: String,
    /// Environment transitions taken; both paths hold `steps + 1` poses.
    pub steps: u32,
    pub done_reason: DoneReason,
    /// Rows of `[t, x, y, z]`.
    pub uav_path: Vec<[f32; 4]>,
    /// Rows of `[t, x, y]`.
    pub ugv_path: Vec<[f32; 3]>,
    /// Per-transition rewards, length `steps`.
    pub rewards_uav: Vec<f32>,
    pub rewards_ugv: Vec<f32>,
    pub return_uav: f64,
    pub return_ugv: f64,
    /// The system succeeded: the ground vehicle reached the target.
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Mode actions (Gaussian mean / argmax logits) instead of sampling.
    pub deterministic: bool,
    /// Worker threads; records are merged back in seed order regardless.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { deterministic: true, workers: 1 }
    }
}

fn check_shapes(uav_net: &ActorCritic<f32>, ugv_net: &ActorCritic<f32>) -> Result<()> {
    if uav_net.trunk.l1.in_dim != UAV_OBS_DIM
        || !matches!(uav_net.head, HeadKind::Continuous { dim: 4 })
    {
        return Err(Error::Shape(format!(
            "UAV policy expects {} inputs and a 4-dim continuous head",
            UAV_OBS_DIM
        )));
    }
    if ugv_net.trunk.l1.in_dim != UGV_OBS_DIM || !matches!(ugv_net.head, HeadKind::Discrete { n: 8 })
    {
        return Err(Error::Shape(format!(
            "UGV policy expects {} inputs and an 8-way discrete head",
            UGV_OBS_DIM
        )));
    }
    Ok(())
}

/// Roll one episode to completion under frozen policies.
pub fn run_episode(
    uav_net: &ActorCritic<f32>,
    ugv_net: &ActorCritic<f32>,
    cfg: &EnvConfig,
    env_seed: u64,
    sample_seed: u64,
    deterministic: bool,
) -> Result<EpisodeRecord> {
    check_shapes(uav_net, ugv_net)?;
    let mut env = EnvInstance::new(cfg.clone(), env_seed)?;
    let uav_scaler = ObsScaler::uav(&cfg.variant);
    let ugv_scaler = ObsScaler::ugv(&cfg.variant, cfg.max_range);
    let tree = SeedTree::new(sample_seed);
    let mut uav_rng = tree.stream("eval/uav");
    let mut ugv_rng = tree.stream("eval/ugv");

    let snapshot_uav = |env: &EnvInstance, t: u32| {
        let s = env.uav_state();
        [t as f32, s.p_w.x as f32, s.p_w.y as f32, s.p_w.z as f32]
    };
    let snapshot_ugv = |env: &EnvInstance, t: u32| {
        let s = env.ugv_state();
        [t as f32, s.position[0] as f32, s.position[1] as f32]
    };

    let mut record = EpisodeRecord {
        seed: env_seed,
        variant: cfg.variant.name.as_str().to_string(),
        steps: 0,
        done_reason: DoneReason::Running,
        uav_path: vec![snapshot_uav(&env, 0)],
        ugv_path: vec![snapshot_ugv(&env, 0)],
        rewards_uav: Vec::new(),
        rewards_ugv: Vec::new(),
        return_uav: 0.0,
        return_ugv: 0.0,
        success: false,
    };

    let mut uav_obs = Vec::with_capacity(UAV_OBS_DIM);
    let mut ugv_obs = Vec::with_capacity(UGV_OBS_DIM);
    while !env.is_done() {
        let (raw_uav, raw_ugv) = env.observe()?;
        uav_obs.clear();
        ugv_obs.clear();
        uav_scaler.apply_into(&raw_uav.to_vec(), &mut uav_obs);
        ugv_scaler.apply_into(&raw_ugv.to_vec(), &mut ugv_obs);

        let uav_sample = sample_policy(uav_net, &uav_obs, 1, &mut uav_rng, deterministic)?;
        let ugv_sample = sample_policy(ugv_net, &ugv_obs, 1, &mut ugv_rng, deterministic)?;
        let cmd = UavCommand::new([
            uav_sample.actions[0],
            uav_sample.actions[1],
            uav_sample.actions[2],
            uav_sample.actions[3],
        ])?;
        let ctl = UgvControl::Act(UgvAction::from_id(ugv_sample.action_ids[0] as u8 + 1)?);

        let res = env.step(&cmd, ctl)?;
        record.steps += 1;
        record.uav_path.push(snapshot_uav(&env, record.steps));
        record.ugv_path.push(snapshot_ugv(&env, record.steps));
        record.rewards_uav.push(res.reward_uav as f32);
        record.rewards_ugv.push(res.reward_ugv as f32);
        record.return_uav += res.reward_uav;
        record.return_ugv += res.reward_ugv;
    }
    record.done_reason = env.done_reason();
    record.success = record.done_reason == DoneReason::UgvArrived;
    Ok(record)
}

/// Evaluate `episodes` episodes under a fixed seed stream. With more than
/// one worker the episodes run in parallel, but the result order and
/// contents are identical to the serial run.
pub fn run_inference(
    uav_net: &ActorCritic<f32>,
    ugv_net: &ActorCritic<f32>,
    cfg: &EnvConfig,
    episodes: usize,
    master_seed: u64,
    options: EvalOptions,
) -> Result<Vec<EpisodeRecord>> {
    check_shapes(uav_net, ugv_net)?;
    if episodes == 0 {
        return Ok(Vec::new());
    }
    let tree = SeedTree::new(master_seed);
    let seeds: Vec<(u64, u64)> = (0..episodes)
        .map(|i| {
            (
                tree.stream_indexed("eval/env", i).gen::<u64>(),
                tree.stream_indexed("eval/sample", i).gen::<u64>(),
            )
        })
        .collect();

    let workers = options.workers.clamp(1, episodes);
    if workers == 1 {
        return seeds
            .iter()
            .map(|&(env_seed, sample_seed)| {
                run_episode(uav_net, ugv_net, cfg, env_seed, sample_seed, options.deterministic)
            })
            .collect();
    }

    let mut indexed: Vec<(usize, EpisodeRecord)> = Vec::with_capacity(episodes);
    let chunk_len = episodes.div_ceil(workers);
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (chunk_id, chunk) in seeds.chunks(chunk_len).enumerate() {
            let start = chunk_id * chunk_len;
            handles.push(scope.spawn(move || -> Result<Vec<(usize, EpisodeRecord)>> {
                chunk
                    .iter()
                    .enumerate()
                    .map(|(j, &(env_seed, sample_seed))| {
                        run_episode(
                            uav_net,
                            ugv_net,
                            cfg,
                            env_seed,
                            sample_seed,
                            options.deterministic,
                        )
                        .map(|rec| (start + j, rec))
                    })
                    .collect()
            }));
        }
        for handle in handles {
            let batch = handle
                .join()
                .map_err(|_| Error::Lifecycle("an evaluation worker panicked".into()))??;
            indexed.extend(batch);
        }
        Ok(())
    })?;
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, rec)| rec).collect())
}

/// Aggregate statistics over a batch of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub episodes: usize,
    pub successes: usize,
    /// Fraction of episodes where the ground vehicle arrived.
    pub success_rate: f64,
    /// Mean steps over successful episodes; absent when none succeeded.
    pub mean_steps_success: Option<f64>,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    /// Episodes that ended at UAV arrival (only possible when the
    /// configuration ends episodes there).
    pub uav_arrived_rate: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

/// Wilson score interval for a binomial proportion at 95% confidence.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    assert!(trials > 0, "interval of zero trials");
    // two-sided 95%: Phi^-1(0.975)
    let z = 1.959963984540054_f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn compute_metrics(records: &[EpisodeRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::Usage("cannot summarize zero episodes".into()));
    }
    let n = records.len();
    let mut successes = 0usize;
    let mut collisions = 0usize;
    let mut timeouts = 0usize;
    let mut uav_arrivals = 0usize;
    let mut success_steps = 0u64;
    for rec in records {
        match rec.done_reason {
            DoneReason::UgvArrived => {
                successes += 1;
                success_steps += u64::from(rec.steps);
            }
            DoneReason::UavCollision | DoneReason::UgvCollision => collisions += 1,
            DoneReason::Timeout => timeouts += 1,
            DoneReason::UavArrived => uav_arrivals += 1,
            DoneReason::Running => {
                return Err(Error::Usage("a record is still running; not a finished episode".into()))
            }
        }
    }
    let (wilson_low, wilson_high) = wilson_interval(successes, n);
    Ok(Metrics {
        episodes: n,
        successes,
        success_rate: successes as f64 / n as f64,
        mean_steps_success: (successes > 0)
            .then(|| success_steps as f64 / successes as f64),
        collision_rate: collisions as f64 / n as f64,
        timeout_rate: timeouts as f64 / n as f64,
        uav_arrived_rate: uav_arrivals as f64 / n as f64,
        wilson_low,
        wilson_high,
    })
}

/// Human-readable summary table.
pub fn format_metrics_table(m: &Metrics) -> String {
    let mean_steps = match m.mean_steps_success {
        Some(v) => format!("{v:.1}"),
        None => "-".to_string(),
    };
    format!(
        "episodes           {}\n\
         successes          {}\n\
         success rate       {:.1}%  (95% CI {:.1}%..{:.1}%)\n\
         mean steps (succ)  {}\n\
         collision rate     {:.1}%\n\
         timeout rate       {:.1}%\n\
         uav-arrival rate   {:.1}%\n",
        m.episodes,
        m.successes,
        m.success_rate * 100.0,
        m.wilson_low * 100.0,
        m.wilson_high * 100.0,
        mean_steps,
        m.collision_rate * 100.0,
        m.timeout_rate * 100.0,
        m.uav_arrived_rate * 100.0,
    )
}

/// Machine-readable key=value form of the same summary.
pub fn format_metrics_kv(m: &Metrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "episodes={}", m.episodes);
    let _ = writeln!(out, "successes={}", m.successes);
    let _ = writeln!(out, "success_rate={}", m.success_rate);
    match m.mean_steps_success {
        Some(v) => {
            let _ = writeln!(out, "mean_steps_success={v}");
        }
        None => {
            let _ = writeln!(out, "mean_steps_success=");
        }
    }
    let _ = writeln!(out, "collision_rate={}", m.collision_rate);
    let _ = writeln!(out, "timeout_rate={}", m.timeout_rate);
    let _ = writeln!(out, "uav_arrived_rate={}", m.uav_arrived_rate);
    let _ = writeln!(out, "wilson_low={}", m.wilson_low);
    let _ = writeln!(out, "wilson_high={}", m.wilson_high);
    out
}

pub const TRAJECTORY_CSV_HEADER: &str = "t,agent,x,y,z,reward,cum_reward,done_reason";

/// Render one record as CSV text: a header plus one row per agent per pose.
/// Floats are written in shortest exact form, so parsing reproduces the
/// single-precision values bit for bit.
pub fn to_trajectory_csv(record: &EpisodeRecord) -> Result<String> {
    if record.uav_path.is_empty() || record.ugv_path.is_empty() {
        return Err(Error::Usage("record has an empty path; nothing to export".into()));
    }
    if record.uav_path.len() != record.steps as usize + 1
        || record.ugv_path.len() != record.steps as usize + 1
    {
        return Err(Error::Shape("path lengths disagree with the step count".into()));
    }
    let mut out = String::new();
    out.push_str(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    let mut cum_uav = 0.0f32;
    let mut cum_ugv = 0.0f32;
    for t in 0..=record.steps as usize {
        let reason = if t == record.steps as usize {
            record.done_reason.as_str()
        } else {
            DoneReason::Running.as_str()
        };
        let (r_uav, r_ugv) = if t == 0 {
            (0.0f32, 0.0f32)
        } else {
            (record.rewards_uav[t - 1], record.rewards_ugv[t - 1])
        };
        cum_uav += r_uav;
        cum_ugv += r_ugv;
        let u = record.uav_path[t];
        let _ = writeln!(out, "{t},uav,{},{},{},{r_uav},{cum_uav},{reason}", u[1], u[2], u[3]);
        let g = record.ugv_path[t];
        let _ = writeln!(out, "{t},ugv,{},{},0,{r_ugv},{cum_ugv},{reason}", g[1], g[2]);
    }
    Ok(out)
}

pub fn export_trajectory_csv(record: &EpisodeRecord, path: &Path) -> Result<()> {
    let text = to_trajectory_csv(record)?;
    std::fs::write(path, text)
        .map_err(|e| Error::File(format!("cannot write {}: {e}", path.display())))
}

/// Rebuild a record from exported CSV text. Seed and variant are not part
/// of the format and come back as placeholders; returns are reconstructed
/// from the cumulative column at single precision.
pub fn parse_trajectory_csv(text: &str) -> Result<EpisodeRecord> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Usage("empty trajectory CSV".into()))?;
    if header != TRAJECTORY_CSV_HEADER {
        return Err(Error::Config(format!(
            "unexpected CSV header {header:?}; want {TRAJECTORY_CSV_HEADER:?}"
        )));
    }
    let mut uav_rows: Vec<(u32, [f32; 3], f32, f32, DoneReason)> = Vec::new();
    let mut ugv_rows: Vec<(u32, [f32; 2], f32, f32, DoneReason)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Config(format!(
                "line {}: expected 8 fields, found {}",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Config(format!("line {}: bad {what}", lineno + 2));
        let t: u32 = fields[0].parse().map_err(|_| bad("step index"))?;
        let x: f32 = fields[2].parse().map_err(|_| bad("x"))?;
        let y: f32 = fields[3].parse().map_err(|_| bad("y"))?;
        let z: f32 = fields[4].parse().map_err(|_| bad("z"))?;
        let reward: f32 = fields[5].parse().map_err(|_| bad("reward"))?;
        let cum: f32 = fields[6].parse().map_err(|_| bad("cum_reward"))?;
        let reason = DoneReason::from_str(fields[7])?;
        match fields[1] {
            "uav" => uav_rows.push((t, [x, y, z], reward, cum, reason)),
            "ugv" => ugv_rows.push((t, [x, y], reward, cum, reason)),
            other => return Err(Error::Config(format!("line {}: unknown agent {other:?}", lineno + 2))),
        }
    }
    if uav_rows.is_empty() || ugv_rows.is_empty() || uav_rows.len() != ugv_rows.len() {
        return Err(Error::Config("CSV does not hold matched uav/ugv rows".into()));
    }
    let steps = (uav_rows.len() - 1) as u32;
    for (i, (row_u, row_g)) in uav_rows.iter().zip(&ugv_rows).enumerate() {
        if row_u.0 != i as u32 || row_g.0 != i as u32 {
            return Err(Error::Config("CSV rows are not consecutive from t=0".into()));
        }
    }
    let done_reason = uav_rows.last().unwrap().4;
    Ok(EpisodeRecord {
        seed: 0,
        variant: "csv".to_string(),
        steps,
        done_reason,
        uav_path: uav_rows.iter().map(|r| [r.0 as f32, r.1[0], r.1[1], r.1[2]]).collect(),
        ugv_path: ugv_rows.iter().map(|r| [r.0 as f32, r.1[0], r.1[1]]).collect(),
        rewards_uav: uav_rows.iter().skip(1).map(|r| r.2).collect(),
        rewards_ugv: ugv_rows.iter().skip(1).map(|r| r.2).collect(),
        return_uav: f64::from(uav_rows.last().unwrap().3),
        return_ugv: f64::from(ugv_rows.last().unwrap().3),
        success: done_reason == DoneReason::UgvArrived,
    })
}

const UAV_STROKE: &str = "#d62728";
const UGV_STROKE: &str = "#1f77b4";
const CURVE_PALETTE: [&str; 6] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Top-view picture: walls and obstacles as strokes, the target as a
/// circle, and one polyline per agent per record, plus a legend.
pub fn render_trajectory_svg(world: &WorldGeometry, records: &[EpisodeRecord]) -> String {
    // world bounds over every primitive we draw
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    let mut grow = |x: f64, y: f64| {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    };
    for w in &world.wall_segments {
        grow(w.a[0], w.a[1]);
        grow(w.b[0], w.b[1]);
    }
    for o in &world.obstacles {
        for corner in obstacle_corners(o.center, o.half_extents, o.rotation) {
            grow(corner[0], corner[1]);
        }
    }
    grow(world.target_position[0] - world.target_radius, world.target_position[1] - world.target_radius);
    grow(world.target_position[0] + world.target_radius, world.target_position[1] + world.target_radius);
    for rec in records {
        for p in &rec.uav_path {
            grow(f64::from(p[1]), f64::from(p[2]));
        }
        for p in &rec.ugv_path {
            grow(f64::from(p[1]), f64::from(p[2]));
        }
    }
    drop(grow);
    if !min_x.is_finite() {
        min_x = 0.0;
        min_y = 0.0;
        max_x = 1.0;
        max_y = 1.0;
    }
    let margin = 2.0;
    min_x -= margin;
    min_y -= margin;
    max_x += margin;
    max_y += margin;

    let width = 900.0;
    let scale = width / (max_x - min_x).max(1e-9);
    let height = ((max_y - min_y) * scale).max(120.0);
    // SVG y grows downward; world y grows upward
    let px = |x: f64| (x - min_x) * scale;
    let py = |y: f64| (max_y - y) * scale;

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"#ffffff\"/>");

    for o in &world.obstacles {
        let corners = obstacle_corners(o.center, o.half_extents, o.rotation);
        let pts: Vec<String> =
            corners.iter().map(|c| format!("{:.2},{:.2}", px(c[0]), py(c[1]))).collect();
        let _ = writeln!(svg, "<polygon points=\"{}\" fill=\"#9a9a9a\"/>", pts.join(" "));
    }
    for w in &world.wall_segments {
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#333333\" stroke-width=\"2\"/>",
            px(w.a[0]),
            py(w.a[1]),
            px(w.b[0]),
            py(w.b[1])
        );
    }
    let _ = writeln!(
        svg,
        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{:.2}\" fill=\"#2ca02c\" fill-opacity=\"0.35\" stroke=\"#2ca02c\" stroke-width=\"2\"/>",
        px(world.target_position[0]),
        py(world.target_position[1]),
        world.target_radius * scale
    );

    for rec in records {
        let uav_pts: Vec<String> = rec
            .uav_path
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(f64::from(p[1])), py(f64::from(p[2]))))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{UAV_STROKE}\" stroke-width=\"1.5\"/>",
            uav_pts.join(" ")
        );
        let ugv_pts: Vec<String> = rec
            .ugv_path
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(f64::from(p[1])), py(f64::from(p[2]))))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{UGV_STROKE}\" stroke-width=\"1.5\" stroke-dasharray=\"6 3\"/>",
            ugv_pts.join(" ")
        );
    }

    svg.push_str(&legend(&[("UAV", UAV_STROKE), ("UGV", UGV_STROKE)]));
    svg.push_str("</svg>\n");
    svg
}

/// One labeled curve for the metrics plot.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Pull `(step, ep_return_mean)` points for one agent out of a training
/// metrics log (the trainer's CSV schema).
pub fn parse_metrics_log(text: &str, agent: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty metrics log".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    let col = |name: &str| {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Config(format!("metrics log lacks a {name:?} column")))
    };
    let step_col = col("step")?;
    let agent_col = col("agent")?;
    let value_col = col("ep_return_mean")?;
    let mut points = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Config(format!("metrics log line {} is ragged", lineno + 2)));
        }
        if fields[agent_col] != agent {
            continue;
        }
        let step: f64 = fields[step_col]
            .parse()
            .map_err(|_| Error::Config(format!("metrics log line {}: bad step", lineno + 2)))?;
        let value: f64 = fields[value_col]
            .parse()
            .map_err(|_| Error::Config(format!("metrics log line {}: bad value", lineno + 2)))?;
        points.push((step, value));
    }
    Ok(points)
}

/// Reward-versus-step curves, one polyline per series, with a legend.
pub fn render_curves_svg(series: &[CurveSeries]) -> String {
    let width = 900.0;
    let height = 480.0;
    let pad = 60.0;

    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if !min_x.is_finite() {
        min_x = 0.0;
        max_x = 1.0;
        min_y = 0.0;
        max_y = 1.0;
    }
    if max_x - min_x < 1e-12 {
        max_x = min_x + 1.0;
    }
    if max_y - min_y < 1e-12 {
        max_y = min_y + 1.0;
    }
    let sx = (width - 2.0 * pad) / (max_x - min_x);
    let sy = (height - 2.0 * pad) / (max_y - min_y);
    let px = |x: f64| pad + (x - min_x) * sx;
    let py = |y: f64| height - pad - (y - min_y) * sy;

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"#ffffff\"/>");
    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#333333\" stroke-width=\"1\"/>",
        height - pad,
        width - pad,
        height - pad
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{:.2}\" stroke=\"#333333\" stroke-width=\"1\"/>",
        height - pad
    );
    let _ = writeln!(
        svg,
        "<text x=\"{pad}\" y=\"{:.2}\" font-size=\"12\" fill=\"#333333\">{}</text>",
        height - pad + 16.0,
        fmt_tick(min_x)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"#333333\" text-anchor=\"end\">{}</text>",
        width - pad,
        height - pad + 16.0,
        fmt_tick(max_x)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"#333333\" text-anchor=\"end\">{}</text>",
        pad - 6.0,
        height - pad,
        fmt_tick(min_y)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"#333333\" text-anchor=\"end\">{}</text>",
        pad - 6.0,
        pad + 4.0,
        fmt_tick(max_y)
    );

    let mut legend_entries = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let stroke = CURVE_PALETTE[i % CURVE_PALETTE.len()];
        legend_entries.push((s.label.as_str(), stroke));
        if s.points.len() < 2 {
            continue;
        }
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"/>",
            pts.join(" ")
        );
    }
    svg.push_str(&legend(&legend_entries));
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e5 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{v:.1}")
    }
}

fn legend(entries: &[(&str, &str)]) -> String {
    let mut out = String::from("<g id=\"legend\">\n");
    for (i, (label, stroke)) in entries.iter().enumerate() {
        let y = 22.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            "<line x1=\"70\" y1=\"{y:.1}\" x2=\"100\" y2=\"{y:.1}\" stroke=\"{stroke}\" stroke-width=\"2\"/>"
        );
        let _ = writeln!(
            out,
            "<text x=\"106\" y=\"{:.1}\" font-size=\"13\" fill=\"#333333\">{}</text>",
            y + 4.0,
            xml_escape(label)
        );
    }
    out.push_str("</g>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn obstacle_corners(center: [f64; 2], half: [f64; 2], rotation: f64) -> [[f64; 2]; 4] {
    let (s, c) = rotation.sin_cos();
    let mut corners = [[0.0; 2]; 4];
    for (k, (dx, dy)) in
        [(half[0], half[1]), (-half[0], half[1]), (-half[0], -half[1]), (half[0], -half[1])]
            .into_iter()
            .enumerate()
    {
        corners[k] = [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy];
    }
    corners
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ActorCritic, HeadKind};
    use crate::rng::SeedTree;
    use crate::world::{build_world, EnvVariant};

    fn tiny_nets(seed: u64) -> (ActorCritic<f32>, ActorCritic<f32>) {
        let tree = SeedTree::new(seed);
        let uav = ActorCritic::new(
            UAV_OBS_DIM,
            HeadKind::Continuous { dim: 4 },
            16,
            &mut tree.stream("uav"),
        );
        let ugv =
            ActorCritic::new(UGV_OBS_DIM, HeadKind::Discrete { n: 8 }, 16, &mut tree.stream("ugv"));
        (uav, ugv)
    }

    fn short_cfg() -> EnvConfig {
        let mut cfg = EnvConfig::new(EnvVariant::short_corridor());
        cfg.step_limit = 40;
        cfg.uav_arrive_ends_episode = false;
        cfg
    }

    fn fake_record(steps: u32, done_reason: DoneReason) -> EpisodeRecord {
        let poses = steps as usize + 1;
        EpisodeRecord {
            seed: 1,
            variant: "short_corridor".into(),
            steps,
            done_reason,
            uav_path: (0..poses)
                .map(|t| [t as f32, t as f32 * 0.3, 0.1, -2.0])
                .collect(),
            ugv_path: (0..poses).map(|t| [t as f32, t as f32 * 0.15, -0.1]).collect(),
            rewards_uav: (0..steps).map(|t| t as f32 - 0.25).collect(),
            rewards_ugv: (0..steps).map(|t| 0.5 - t as f32).collect(),
            return_uav: (0..steps).map(|t| f64::from(t) - 0.25).sum(),
            return_ugv: (0..steps).map(|t| 0.5 - f64::from(t)).sum(),
            success: done_reason == DoneReason::UgvArrived,
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let (uav, ugv) = tiny_nets(1);
        let cfg = short_cfg();
        let a = run_inference(&uav, &ugv, &cfg, 3, 77, EvalOptions::default()).unwrap();
        let b = run_inference(&uav, &ugv, &cfg, 3, 77, EvalOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for rec in &a {
            assert_eq!(rec.uav_path.len(), rec.steps as usize + 1);
            assert_eq!(rec.ugv_path.len(), rec.steps as usize + 1);
            assert_eq!(rec.rewards_uav.len(), rec.steps as usize);
            assert!(rec.done_reason != DoneReason::Running);
        }
    }

    #[test]
    fn parallel_workers_match_the_serial_order() {
        let (uav, ugv) = tiny_nets(2);
        let cfg = short_cfg();
        let serial = run_inference(&uav, &ugv, &cfg, 5, 123, EvalOptions::default()).unwrap();
        let parallel = run_inference(
            &uav,
            &ugv,
            &cfg,
            5,
            123,
            EvalOptions { workers: 3, ..Default::default() },
        )
        .unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn stochastic_mode_differs_but_stays_seed_stable() {
        let (uav, ugv) = tiny_nets(3);
        let cfg = short_cfg();
        let det = run_inference(&uav, &ugv, &cfg, 2, 5, EvalOptions::default()).unwrap();
        let sto1 = run_inference(
            &uav,
            &ugv,
            &cfg,
            2,
            5,
            EvalOptions { deterministic: false, workers: 1 },
        )
        .unwrap();
        let sto2 = run_inference(
            &uav,
            &ugv,
            &cfg,
            2,
            5,
            EvalOptions { deterministic: false, workers: 1 },
        )
        .unwrap();
        assert_eq!(sto1, sto2);
        assert_ne!(det[0].uav_path, sto1[0].uav_path);
    }

    #[test]
    fn zero_weight_policies_never_succeed() {
        let (mut uav, mut ugv) = tiny_nets(4);
        let zeros_u = vec![0.0f32; uav.param_len()];
        let zeros_g = vec![0.0f32; ugv.param_len()];
        uav.set_flat_params(&zeros_u).unwrap();
        ugv.set_flat_params(&zeros_g).unwrap();
        let records = run_inference(&uav, &ugv, &short_cfg(), 4, 9, EvalOptions::default()).unwrap();
        let metrics = compute_metrics(&records).unwrap();
        assert_eq!(metrics.success_rate, 0.0);
        assert_eq!(metrics.successes, 0);
        assert!(metrics.mean_steps_success.is_none());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let tree = SeedTree::new(5);
        let wrong =
            ActorCritic::new(10, HeadKind::Continuous { dim: 4 }, 8, &mut tree.stream("w"));
        let (_, ugv) = tiny_nets(5);
        let err = run_inference(&wrong, &ugv, &short_cfg(), 1, 1, EvalOptions::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn paper_success_rate_is_exact() {
        let mut records = Vec::new();
        for i in 0..1000u32 {
            let reason =
                if i < 891 { DoneReason::UgvArrived } else { DoneReason::Timeout };
            records.push(fake_record(10 + (i % 5), reason));
        }
        let m = compute_metrics(&records).unwrap();
        assert_eq!(m.success_rate, 891.0 / 1000.0);
        assert_eq!(m.episodes, 1000);
        assert_eq!(m.successes, 891);
        assert!(m.wilson_low < m.success_rate && m.success_rate < m.wilson_high);
    }

    #[test]
    fn zero_successes_and_all_successes_hit_the_bounds() {
        let none: Vec<EpisodeRecord> =
            (0..50).map(|_| fake_record(5, DoneReason::UgvCollision)).collect();
        let m = compute_metrics(&none).unwrap();
        assert_eq!(m.success_rate, 0.0);
        assert_eq!(m.wilson_low, 0.0);
        assert!(m.mean_steps_success.is_none());

        let all: Vec<EpisodeRecord> =
            (0..50).map(|_| fake_record(7, DoneReason::UgvArrived)).collect();
        let m = compute_metrics(&all).unwrap();
        assert_eq!(m.success_rate, 1.0);
        assert_eq!(m.wilson_high, 1.0);
        assert_eq!(m.mean_steps_success, Some(7.0));
    }

    #[test]
    fn done_reason_rates_partition_the_batch() {
        let mut records = Vec::new();
        for reason in [
            DoneReason::UgvArrived,
            DoneReason::UgvArrived,
            DoneReason::UavCollision,
            DoneReason::UgvCollision,
            DoneReason::Timeout,
            DoneReason::UavArrived,
            DoneReason::Timeout,
        ] {
            records.push(fake_record(3, reason));
        }
        let m = compute_metrics(&records).unwrap();
        let total = m.success_rate + m.collision_rate + m.timeout_rate + m.uav_arrived_rate;
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_record_sets_are_a_usage_error() {
        assert!(matches!(compute_metrics(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn csv_row_count_matches_the_documented_shape() {
        let rec = fake_record(3, DoneReason::UgvArrived);
        let csv = to_trajectory_csv(&rec).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 8);
        assert_eq!(lines[0], TRAJECTORY_CSV_HEADER);
        assert!(lines[1].starts_with("0,uav,"));
        assert!(lines[2].starts_with("0,ugv,"));
        assert!(lines[8].ends_with("ugv_arrived"));
    }

    #[test]
    fn csv_round_trip_reproduces_paths_exactly() {
        let mut rec = fake_record(6, DoneReason::Timeout);
        // awkward values that expose lossy formatting
        rec.uav_path[2] = [2.0, 0.1f32 + 0.2f32, -16.049999f32, 1.0 / 3.0];
        rec.ugv_path[3] = [3.0, std::f32::consts::PI, -0.000123f32];
        let csv = to_trajectory_csv(&rec).unwrap();
        let back = parse_trajectory_csv(&csv).unwrap();
        assert_eq!(back.uav_path, rec.uav_path);
        assert_eq!(back.ugv_path, rec.ugv_path);
        assert_eq!(back.rewards_uav, rec.rewards_uav);
        assert_eq!(back.steps, rec.steps);
        assert_eq!(back.done_reason, rec.done_reason);
        assert_eq!(back.success, rec.success);
    }

    #[test]
    fn metrics_recomputed_from_csv_match_exactly() {
        let records: Vec<EpisodeRecord> = (0..20)
            .map(|i| {
                let reason = match i % 4 {
                    0 | 1 => DoneReason::UgvArrived,
                    2 => DoneReason::Timeout,
                    _ => DoneReason::UavCollision,
                };
                fake_record(4 + i, reason)
            })
            .collect();
        let direct = compute_metrics(&records).unwrap();
        let reparsed: Vec<EpisodeRecord> = records
            .iter()
            .map(|r| parse_trajectory_csv(&to_trajectory_csv(r).unwrap()).unwrap())
            .collect();
        let indirect = compute_metrics(&reparsed).unwrap();
        assert_eq!(direct, indirect);
    }

    #[test]
    fn empty_paths_are_refused() {
        let mut rec = fake_record(2, DoneReason::Timeout);
        rec.uav_path.clear();
        assert!(matches!(to_trajectory_csv(&rec), Err(Error::Usage(_))));
    }

    #[test]
    fn export_failure_names_the_path() {
        let rec = fake_record(2, DoneReason::Timeout);
        let bad = Path::new("/nonexistent-dir-for-sure/out.csv");
        let err = export_trajectory_csv(&rec, bad).unwrap_err();
        assert!(err.to_string().contains("nonexistent-dir-for-sure"), "got {err}");
    }

    // minimal well-formedness scan: every opened tag closes in order
    fn assert_well_formed_xml(doc: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = doc;
        while let Some(open) = rest.find('<') {
            let close = rest[open..].find('>').expect("unclosed angle bracket") + open;
            let tag = &rest[open + 1..close];
            rest = &rest[close + 1..];
            if tag.starts_with('?') || tag.starts_with('!') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                let top = stack.pop().unwrap_or_else(|| panic!("stray closer </{name}>"));
                assert_eq!(top, name, "mismatched closer");
            } else if !tag.ends_with('/') {
                let name: String =
                    tag.chars().take_while(|c| !c.is_whitespace()).collect();
                stack.push(name);
            }
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn geometry_only_svg_is_well_formed() {
        let world = build_world(&EnvVariant::original(), 3).unwrap();
        let svg = render_trajectory_svg(&world, &[]);
        assert!(svg.contains("<svg"));
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("<polyline"));
        assert_well_formed_xml(&svg);
    }

    #[test]
    fn one_record_renders_two_polylines_and_a_legend() {
        let world = build_world(&EnvVariant::short_corridor(), 3).unwrap();
        let rec = fake_record(5, DoneReason::UgvArrived);
        let svg = render_trajectory_svg(&world, &[rec]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("id=\"legend\""));
        assert!(svg.contains(UAV_STROKE) && svg.contains(UGV_STROKE));
        assert_well_formed_xml(&svg);
    }

    #[test]
    fn two_runs_render_distinct_curves() {
        let a = CurveSeries {
            label: "with curiosity".into(),
            points: (0..50).map(|i| (f64::from(i) * 100.0, f64::from(i))).collect(),
        };
        let b = CurveSeries {
            label: "without curiosity".into(),
            points: (0..50).map(|i| (f64::from(i) * 100.0, f64::from(i) * 0.4)).collect(),
        };
        let svg = render_curves_svg(&[a, b]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(CURVE_PALETTE[0]) && svg.contains(CURVE_PALETTE[1]));
        assert!(svg.contains("with curiosity") && svg.contains("without curiosity"));
        assert_well_formed_xml(&svg);
    }

    #[test]
    fn metrics_log_parsing_filters_by_agent() {
        let log = format!(
            "{}\n{}\n{}\n{}\n",
            crate::trainer::METRICS_HEADER,
            "1024,1,uav,1.5,0.1,0.2,2.9,0.05,0.01,0.3,2.0,0.0003,0.03",
            "1024,1,ugv,-4,0.2,0.4,2.0,0.02,0.02,0.5,1.9,0.0002,0.03",
            "2048,1,uav,2.5,0.1,0.2,2.8,0.04,0.01,0.2,1.8,0.0003,0.03",
        );
        let uav = parse_metrics_log(&log, "uav").unwrap();
        assert_eq!(uav, vec![(1024.0, 1.5), (2048.0, 2.5)]);
        let ugv = parse_metrics_log(&log, "ugv").unwrap();
        assert_eq!(ugv, vec![(1024.0, -4.0)]);
    }

    #[test]
    fn kv_summary_round_trips_through_parse() {
        let records: Vec<EpisodeRecord> = (0..10)
            .map(|i| {
                fake_record(
                    6,
                    if i < 7 { DoneReason::UgvArrived } else { DoneReason::Timeout },
                )
            })
            .collect();
        let m = compute_metrics(&records).unwrap();
        let kv = format_metrics_kv(&m);
        for line in kv.lines() {
            assert!(line.contains('='), "bad kv line {line:?}");
        }
        let rate: f64 = kv
            .lines()
            .find_map(|l| l.strip_prefix("success_rate="))
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(rate, m.success_rate);
        let table = format_metrics_table(&m);
        assert!(table.contains("70.0%"));
    }
}
