//! Vehicle models: a quadrotor in rigid-body and planar-kinematic modes,
//! and the ground vehicle's discretized kinematics.
//!
//! The world frame matches [`crate::world`]: +z points along gravity, so a
//! climbing aircraft moves toward negative z and altitude is -p.z.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

/// Physical and control limits for the aircraft.
#[derive(Debug, Clone, PartialEq)]
pub struct UavParams {
    pub mass: f64,
    pub gravity: f64,
    /// Planar mode: body-frame horizontal speed per unit command.
    pub v_max: f64,
    /// Planar mode: yaw rate per unit command (rad/s).
    pub yaw_rate_max: f64,
    /// Planar mode: vertical speed per unit command.
    pub v_z_max: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Rigid mode: roll/pitch rate per unit command (rad/s).
    pub roll_pitch_rate_max: f64,
}

impl Default for UavParams {
    fn default() -> Self {
        UavParams {
            mass: 1.0,
            gravity: 9.81,
            v_max: 5.0,
            yaw_rate_max: std::f64::consts::PI,
            v_z_max: 2.0,
            h_min: 1.0,
            h_max: 4.0,
            roll_pitch_rate_max: std::f64::consts::FRAC_PI_2,
        }
    }
}

/// Ground-vehicle turn rate: 90 degrees per second.
pub const UGV_TURN_RATE: f64 = std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, PartialEq)]
pub struct UavState {
    /// World-frame position (m).
    pub p_w: Vector3<f64>,
    /// World-frame velocity (m/s).
    pub v_w: Vector3<f64>,
    /// Body-to-world rotation.
    pub rot: Matrix3<f64>,
    /// Planar-mode heading (radians); kept in sync with `rot` there.
    pub yaw: f64,
}

impl UavState {
    pub fn at(position: [f64; 3]) -> Self {
        UavState {
            p_w: Vector3::new(position[0], position[1], position[2]),
            v_w: Vector3::zeros(),
            rot: Matrix3::identity(),
            yaw: 0.0,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.p_w.x, self.p_w.y, self.p_w.z]
    }

    pub fn altitude(&self) -> f64 {
        -self.p_w.z
    }

    /// Orientation as a unit quaternion (w, x, y, z).
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.rot);
        [q.w, q.i, q.j, q.k]
    }

    pub fn is_finite(&self) -> bool {
        self.p_w.iter().all(|v| v.is_finite())
            && self.v_w.iter().all(|v| v.is_finite())
            && self.rot.iter().all(|v| v.is_finite())
            && self.yaw.is_finite()
    }
}

/// Normalized 4-component command; every entry is clamped to [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UavCommand {
    pub a: [f64; 4],
}

impl UavCommand {
    pub fn new(a: [f64; 4]) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("UAV command must be finite".into()));
        }
        Ok(UavCommand {
            a: [
                a[0].clamp(-1.0, 1.0),
                a[1].clamp(-1.0, 1.0),
                a[2].clamp(-1.0, 1.0),
                a[3].clamp(-1.0, 1.0),
            ],
        })
    }

    pub fn zero() -> Self {
        UavCommand { a: [0.0; 4] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UgvState {
    pub position: [f64; 2],
    /// Wrapped to (-pi, pi].
    pub heading: f64,
    /// Last commanded speed (m/s).
    pub speed: f64,
}

impl UgvState {
    pub fn at(position: [f64; 2]) -> Self {
        UgvState { position, heading: 0.0, speed: 0.0 }
    }
}

/// One row of the discrete action table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UgvAction {
    pub id: u8,
    pub speed_magnitude: f64,
    pub turning_direction: f64,
}

/// (speed, turn) rows for action ids 1..=8: three speed levels crossed with
/// turn directions, with the slowest level omitting the straight option.
const UGV_TABLE: [(f64, f64); 8] = [
    (1.5, -1.0),
    (1.5, 0.0),
    (1.5, 1.0),
    (3.0, -1.0),
    (3.0, 0.0),
    (3.0, 1.0),
    (0.75, -1.0),
    (0.75, 1.0),
];

impl UgvAction {
    pub fn from_id(id: u8) -> Result<Self> {
        if !(1..=8).contains(&id) {
            return Err(Error::Action(format!("UGV action id {id} outside 1..=8")));
        }
        let (speed_magnitude, turning_direction) = UGV_TABLE[(id - 1) as usize];
        Ok(UgvAction { id, speed_magnitude, turning_direction })
    }
}

/// Skew-symmetric matrix of a body-rate vector: skew(w) u = w x u.
pub fn skew(w: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -w.z, w.y, //
        w.z, 0.0, -w.x, //
        -w.y, w.x, 0.0,
    )
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0 && dt <= 0.1) {
        return Err(Error::Step(format!("dt {dt} outside (0, 0.1]")));
    }
    Ok(())
}

/// Re-orthonormalize a drifting rotation matrix (modified Gram-Schmidt on
/// the columns, third column from the cross product so det stays +1).
fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = m.column(0).normalize();
    let mut c1 = m.column(1).into_owned();
    c1 -= c0 * c0.dot(&c1);
    let c1 = c1.normalize();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

/// Full rigid-body step: semi-implicit Euler for translation, matrix
/// exponential (via Rodrigues) for attitude.
///
/// Command mapping: a1, a2 are roll/pitch rates, a3 the yaw rate, and the
/// thrust is m g (1 + a4) so a zero command hovers.
pub fn step_uav_rigid(state: &UavState, cmd: &UavCommand, dt: f64, params: &UavParams) -> Result<UavState> {
    check_dt(dt)?;
    if !state.is_finite() {
        return Err(Error::NumericInput("UAV state must be finite".into()));
    }
    let w_b = Vector3::new(
        cmd.a[0] * params.roll_pitch_rate_max,
        cmd.a[1] * params.roll_pitch_rate_max,
        cmd.a[2] * params.yaw_rate_max,
    );
    let thrust = params.mass * params.gravity * (1.0 + cmd.a[3]);
    // Thrust acts along the body -z axis (upward, away from gravity).
    let accel = state.rot * Vector3::new(0.0, 0.0, -thrust / params.mass)
        + Vector3::new(0.0, 0.0, params.gravity);
    let v_w = state.v_w + accel * dt;
    let p_w = state.p_w + v_w * dt;
    let rot = if w_b == Vector3::zeros() {
        state.rot
    } else {
        let dr = Rotation3::from_scaled_axis(w_b * dt);
        orthonormalize(&(state.rot * dr.matrix()))
    };
    let yaw = f64::atan2(rot[(1, 0)], rot[(0, 0)]);
    Ok(UavState { p_w, v_w, rot, yaw })
}

/// Planar training mode: roll and pitch stay zero. a1/a2 command body-frame
/// horizontal velocity, a3 the yaw rate, a4 vertical velocity; altitude is
/// clamped to [h_min, h_max]. Yaw integrates before translation.
pub fn step_uav_planar(state: &UavState, cmd: &UavCommand, dt: f64, params: &UavParams) -> Result<UavState> {
    check_dt(dt)?;
    if !state.is_finite() {
        return Err(Error::NumericInput("UAV state must be finite".into()));
    }
    let yaw = wrap_angle(state.yaw + cmd.a[2] * params.yaw_rate_max * dt);
    let (sin, cos) = yaw.sin_cos();
    let vx_b = cmd.a[0] * params.v_max;
    let vy_b = cmd.a[1] * params.v_max;
    let v_w = Vector3::new(
        cos * vx_b - sin * vy_b,
        sin * vx_b + cos * vy_b,
        -cmd.a[3] * params.v_z_max,
    );
    let mut p_w = state.p_w + v_w * dt;
    p_w.z = p_w.z.clamp(-params.h_max, -params.h_min);
    let rot = Matrix3::new(
        cos, -sin, 0.0, //
        sin, cos, 0.0, //
        0.0, 0.0, 1.0,
    );
    Ok(UavState { p_w, v_w, rot, yaw })
}

/// One discrete UGV step: the heading turns first, then the vehicle moves
/// along the new heading.
pub fn step_ugv(state: &UgvState, action: &UgvAction, dt: f64) -> Result<UgvState> {
    check_dt(dt)?;
    if !state.position.iter().all(|v| v.is_finite()) || !state.heading.is_finite() {
        return Err(Error::NumericInput("UGV state must be finite".into()));
    }
    let heading = wrap_angle(state.heading + action.turning_direction * UGV_TURN_RATE * dt);
    let (sin, cos) = heading.sin_cos();
    let step = action.speed_magnitude * dt;
    Ok(UgvState {
        position: [state.position[0] + step * cos, state.position[1] + step * sin],
        heading,
        speed: action.speed_magnitude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn skew_matches_definition() {
        assert_eq!(skew(Vector3::zeros()), Matrix3::zeros());
        let m = skew(Vector3::new(1.0, 2.0, 3.0));
        let expect = Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0);
        assert_eq!(m, expect);
    }

    #[test]
    fn skew_is_cross_product() {
        let mut rng = crate::rng::SeedTree::new(11).stream("test/skew");
        for _ in 0..100 {
            let w = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let u = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let err = (skew(w) * u - w.cross(&u)).norm();
            assert!(err <= 1e-12, "cross mismatch {err}");
            let anti = (skew(w) + skew(w).transpose()).norm();
            assert_eq!(anti, 0.0);
        }
    }

    #[test]
    fn hover_is_exact_equilibrium() {
        let state = UavState::at([1.0, 2.0, -2.0]);
        let cmd = UavCommand::zero(); // thrust = m g, rates zero
        let next = step_uav_rigid(&state, &cmd, 0.05, &UavParams::default()).unwrap();
        assert_eq!(next.v_w, Vector3::zeros());
        assert_eq!(next.rot, Matrix3::identity());
        assert_eq!(next.p_w, state.p_w);
    }

    #[test]
    fn free_fall_accelerates_along_gravity() {
        let params = UavParams::default();
        let mut state = UavState::at([0.0, 0.0, -3.0]);
        let cmd = UavCommand::new([0.0, 0.0, 0.0, -1.0]).unwrap(); // thrust 0
        state = step_uav_rigid(&state, &cmd, 0.05, &params).unwrap();
        assert_eq!(state.v_w, Vector3::new(0.0, 0.0, params.gravity * 0.05));
        // Velocity keeps growing linearly at g per second.
        let before = state.v_w.z;
        state = step_uav_rigid(&state, &cmd, 0.05, &params).unwrap();
        assert!((state.v_w.z - before - params.gravity * 0.05).abs() <= 1e-9);
    }

    #[test]
    fn full_yaw_turn_returns_attitude() {
        let params = UavParams::default();
        let mut state = UavState::at([0.0, 0.0, -2.0]);
        // w_z = pi/2 rad/s for 4 seconds = one full turn.
        let cmd = UavCommand::new([0.0, 0.0, 0.5, 0.0]).unwrap();
        for _ in 0..400 {
            state = step_uav_rigid(&state, &cmd, 0.01, &params).unwrap();
        }
        let err = (state.rot - Matrix3::identity()).norm();
        assert!(err <= 1e-4, "attitude error after 2 pi yaw: {err}");
    }

    #[test]
    fn rigid_steps_keep_rotation_orthonormal() {
        let params = UavParams::default();
        let mut rng = crate::rng::SeedTree::new(5).stream("test/rigid");
        let mut state = UavState::at([0.0, 0.0, -2.0]);
        for _ in 0..2000 {
            let cmd = UavCommand::new([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ])
            .unwrap();
            state = step_uav_rigid(&state, &cmd, 0.05, &params).unwrap();
            // Keep the fuzz bounded; we only care about the attitude here.
            state.p_w = Vector3::zeros();
            state.v_w = Vector3::zeros();
            let drift = (state.rot.transpose() * state.rot - Matrix3::identity()).norm();
            assert!(drift <= 1e-6, "orthonormality drift {drift}");
        }
        assert!((state.rot.determinant() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn planar_zero_command_holds_still() {
        let params = UavParams::default();
        let state = UavState::at([3.0, 1.0, -2.0]);
        let next = step_uav_planar(&state, &UavCommand::zero(), 0.05, &params).unwrap();
        assert_eq!(next.p_w, state.p_w);
        assert_eq!(next.yaw, state.yaw);
    }

    #[test]
    fn planar_forward_command_advances_x() {
        let params = UavParams::default();
        let state = UavState::at([0.0, 0.0, -2.0]);
        let cmd = UavCommand::new([1.0, 0.0, 0.0, 0.0]).unwrap();
        let next = step_uav_planar(&state, &cmd, 0.1, &params).unwrap();
        assert!((next.p_w.x - 0.5).abs() <= 1e-12, "x = {}", next.p_w.x);
        assert_eq!(next.p_w.y, 0.0);
    }

    #[test]
    fn planar_altitude_stays_clamped() {
        let params = UavParams::default();
        let mut rng = crate::rng::SeedTree::new(6).stream("test/planar");
        let mut state = UavState::at([0.0, 0.0, -2.0]);
        for _ in 0..5000 {
            let cmd = UavCommand::new([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ])
            .unwrap();
            state = step_uav_planar(&state, &cmd, 0.05, &params).unwrap();
            let alt = state.altitude();
            assert!((params.h_min..=params.h_max).contains(&alt), "altitude {alt}");
        }
    }

    #[test]
    fn ugv_table_matches_spec() {
        let speeds: Vec<f64> = (1..=8).map(|i| UgvAction::from_id(i).unwrap().speed_magnitude).collect();
        let turns: Vec<f64> = (1..=8).map(|i| UgvAction::from_id(i).unwrap().turning_direction).collect();
        assert_eq!(speeds, vec![1.5, 1.5, 1.5, 3.0, 3.0, 3.0, 0.75, 0.75]);
        assert_eq!(turns, vec![-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 1.0]);
        assert!(UgvAction::from_id(0).is_err());
        assert!(UgvAction::from_id(9).is_err());
    }

    #[test]
    fn ugv_straight_step() {
        let state = UgvState::at([0.0, 0.0]);
        let next = step_ugv(&state, &UgvAction::from_id(2).unwrap(), 0.1).unwrap();
        assert!((next.position[0] - 0.15).abs() <= 1e-12);
        assert_eq!(next.position[1], 0.0);
        assert_eq!(next.heading, 0.0);
    }

    #[test]
    fn ugv_fast_action_doubles_displacement() {
        let state = UgvState::at([2.0, 1.0]);
        let slow = step_ugv(&state, &UgvAction::from_id(2).unwrap(), 0.05).unwrap();
        let fast = step_ugv(&state, &UgvAction::from_id(5).unwrap(), 0.05).unwrap();
        let d_slow = ((slow.position[0] - 2.0).powi(2) + (slow.position[1] - 1.0).powi(2)).sqrt();
        let d_fast = ((fast.position[0] - 2.0).powi(2) + (fast.position[1] - 1.0).powi(2)).sqrt();
        assert!((d_fast - 2.0 * d_slow).abs() <= 1e-12);
    }

    #[test]
    fn ugv_quarter_turn() {
        let mut state = UgvState::at([0.0, 0.0]);
        let action = UgvAction::from_id(1).unwrap(); // turn = -1
        let steps = 20; // (pi/2) / UGV_TURN_RATE seconds at dt = 0.05
        for _ in 0..steps {
            state = step_ugv(&state, &action, 0.05).unwrap();
        }
        assert!((state.heading + std::f64::consts::FRAC_PI_2).abs() <= 1e-9, "heading {}", state.heading);
    }

    #[test]
    fn ugv_displacement_magnitude_is_speed_dt() {
        let mut rng = crate::rng::SeedTree::new(8).stream("test/ugv");
        for _ in 0..200 {
            let state = UgvState {
                position: [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)],
                heading: rng.gen_range(-3.0..3.0),
                speed: 0.0,
            };
            let id = rng.gen_range(1..=8u8);
            let action = UgvAction::from_id(id).unwrap();
            let dt = rng.gen_range(0.01..0.1);
            let next = step_ugv(&state, &action, dt).unwrap();
            let d = ((next.position[0] - state.position[0]).powi(2)
                + (next.position[1] - state.position[1]).powi(2))
            .sqrt();
            assert!((d - action.speed_magnitude * dt).abs() <= 1e-12);
        }
    }

    #[test]
    fn bad_dt_rejected() {
        let state = UavState::at([0.0, 0.0, -2.0]);
        let params = UavParams::default();
        assert!(step_uav_rigid(&state, &UavCommand::zero(), 0.0, &params).is_err());
        assert!(step_uav_rigid(&state, &UavCommand::zero(), 0.2, &params).is_err());
        let ugv = UgvState::at([0.0, 0.0]);
        assert!(step_ugv(&ugv, &UgvAction::from_id(1).unwrap(), -0.05).is_err());
    }

    #[test]
    fn command_clamps_and_rejects_nan() {
        let cmd = UavCommand::new([2.0, -3.0, 0.5, 1.0]).unwrap();
        assert_eq!(cmd.a, [1.0, -1.0, 0.5, 1.0]);
        assert!(UavCommand::new([f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }
}
