//! Action spaces and their realization.
//!
//! Agents either drive with primitive steer/accel/brake commands or issue
//! desires (target lane position and target speed) that a pair of PID
//! controllers turns into primitive commands every control step.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::sensing::SensorFrame;

/// Upper end of the desire speed range, km/h.
pub const SPEED_CAP_KMH: f64 = 300.0;
/// Anti-windup bound on the accumulated PID error.
pub const INTEGRAL_LIMIT: f64 = 10.0;
/// Below this speed a zero-speed desire clamps the brakes on.
pub const STANDSTILL_SPEED: f64 = 0.1;
pub const DEFAULT_PID_LATENCY: u32 = 5;
pub const DEFAULT_ACCEL_SCALE: f64 = 0.03;
pub const DEFAULT_STEER_SCALE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrimitiveAction {
    pub steer: f64,
    pub accel: f64,
    pub brake: f64,
    /// `None` hands gear selection to the automatic gearbox.
    pub gear: Option<i32>,
}

impl PrimitiveAction {
    pub fn new(steer: f64, accel: f64, brake: f64) -> Self {
        Self {
            steer,
            accel,
            brake,
            gear: None,
        }
    }

    /// Build from channels that were all normalized to [-1, 1].
    pub fn from_normalized(steer: f64, accel: f64, brake: f64) -> Self {
        Self::new(steer, 0.5 * (accel + 1.0), 0.5 * (brake + 1.0)).clipped()
    }

    pub fn clipped(&self) -> Self {
        Self {
            steer: clip_or_zero(self.steer, -1.0, 1.0),
            accel: clip_or_zero(self.accel, 0.0, 1.0),
            brake: clip_or_zero(self.brake, 0.0, 1.0),
            gear: self.gear,
        }
    }
}

fn clip_or_zero(v: f64, lo: f64, hi: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(lo, hi)
    }
}

/// A hierarchical action: where on the road to be and how fast to go.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DesireAction {
    /// Target lane position in [-1, 1].
    pub track_pos: f64,
    /// Target speed normalized to [-1, 1] over [0, SPEED_CAP_KMH].
    pub speed: f64,
}

impl DesireAction {
    pub fn new(track_pos: f64, speed: f64) -> Self {
        Self { track_pos, speed }.clipped()
    }

    pub fn from_kmh(track_pos: f64, speed_kmh: f64) -> Self {
        Self::new(track_pos, normalize_speed_kmh(speed_kmh))
    }

    pub fn clipped(&self) -> Self {
        Self {
            track_pos: clip_or_zero(self.track_pos, -1.0, 1.0),
            speed: clip_or_zero(self.speed, -1.0, 1.0),
        }
    }

    pub fn target_speed_kmh(&self) -> f64 {
        0.5 * (self.speed + 1.0) * SPEED_CAP_KMH
    }

    pub fn target_speed_mps(&self) -> f64 {
        self.target_speed_kmh() / 3.6
    }
}

pub fn normalize_speed_kmh(speed_kmh: f64) -> f64 {
    2.0 * speed_kmh / SPEED_CAP_KMH - 1.0
}

/// Either kind of action an agent can submit in one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AgentAction {
    Primitive(PrimitiveAction),
    Desire(DesireAction),
}

impl Default for AgentAction {
    fn default() -> Self {
        AgentAction::Primitive(PrimitiveAction::default())
    }
}

/// Gains written as a `[kp, ki, kd]` list in documents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl From<[f64; 3]> for PidGains {
    fn from([kp, ki, kd]: [f64; 3]) -> Self {
        Self { kp, ki, kd }
    }
}

impl From<PidGains> for [f64; 3] {
    fn from(g: PidGains) -> Self {
        [g.kp, g.ki, g.kd]
    }
}

impl PidGains {
    pub const ACCEL: PidGains = PidGains {
        kp: 10.5,
        ki: 0.05,
        kd: 2.8,
    };
    pub const STEER: PidGains = PidGains {
        kp: 5.1,
        ki: 0.001,
        kd: 0.000001,
    };

    pub fn scaled(&self, c: f64) -> PidGains {
        PidGains {
            kp: self.kp * c,
            ki: self.ki * c,
            kd: self.kd * c,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.kp.is_finite() && self.ki.is_finite() && self.kd.is_finite()) {
            return Err("PID gains must be finite".into());
        }
        if self.kp < 0.0 {
            return Err(format!("kp must be non-negative, got {}", self.kp));
        }
        Ok(())
    }
}

/// Gains for both realization loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidSettings {
    #[serde(rename = "accel_pid", default = "default_accel_gains")]
    pub accel: PidGains,
    #[serde(rename = "steer_pid", default = "default_steer_gains")]
    pub steer: PidGains,
}

fn default_accel_gains() -> PidGains {
    PidGains::ACCEL
}

fn default_steer_gains() -> PidGains {
    PidGains::STEER
}

impl Default for PidSettings {
    fn default() -> Self {
        Self {
            accel: PidGains::ACCEL,
            steer: PidGains::STEER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub initialized: bool,
}

/// One discrete PID update. The derivative on the first call differences
/// against zero, so a nonzero first error produces a large kick.
pub fn pid_step(gains: &PidGains, state: &PidState, error: f64, dt: f64) -> (f64, PidState) {
    debug_assert!(dt > 0.0);
    let integral = (state.integral + error * dt).clamp(-INTEGRAL_LIMIT, INTEGRAL_LIMIT);
    let derivative = (error - state.prev_error) / dt;
    let u = gains.kp * error + gains.ki * integral + gains.kd * derivative;
    let next = PidState {
        integral,
        prev_error: error,
        initialized: true,
    };
    (u, next)
}

/// Lane-keeping error: heading term minus the scaled lane offset.
///
/// `angle_prev` follows the controller convention where positive means the
/// track turns left relative to the car, the opposite of the sensor frame.
pub fn ts_error_track_pos(angle_prev: f64, track_pos_prev: f64, target: f64, scale: f64) -> f64 {
    angle_prev - (track_pos_prev - target) * scale
}

/// Speed error; positive when over the target (braking direction).
pub fn ts_error_speed(v_prev: f64, v_target: f64, scale: f64) -> f64 {
    (v_prev - v_target) * scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsController {
    pub steer_gains: PidGains,
    pub accel_gains: PidGains,
    pub steer_pid: PidState,
    pub accel_pid: PidState,
    pub held_desire: Option<DesireAction>,
    pub hold_countdown: u32,
    pub pid_latency: u32,
    pub accel_scale: f64,
    pub steer_scale: f64,
}

impl Default for TsController {
    fn default() -> Self {
        Self::new(PidGains::STEER, PidGains::ACCEL, DEFAULT_PID_LATENCY, DEFAULT_ACCEL_SCALE, DEFAULT_STEER_SCALE)
    }
}

impl TsController {
    pub fn new(steer_gains: PidGains, accel_gains: PidGains, pid_latency: u32, accel_scale: f64, steer_scale: f64) -> Self {
        assert!(pid_latency >= 1, "pid_latency must be at least 1");
        Self {
            steer_gains,
            accel_gains,
            steer_pid: PidState::default(),
            accel_pid: PidState::default(),
            held_desire: None,
            hold_countdown: 0,
            pid_latency,
            accel_scale,
            steer_scale,
        }
    }

    pub fn reset(&mut self) {
        self.steer_pid = PidState::default();
        self.accel_pid = PidState::default();
        self.held_desire = None;
        self.hold_countdown = 0;
    }

    /// The desire currently being tracked after applying the latency hold.
    pub fn latch(&mut self, desire: DesireAction) -> DesireAction {
        match self.held_desire {
            Some(held) if self.hold_countdown > 0 => {
                self.hold_countdown -= 1;
                held
            }
            _ => {
                self.held_desire = Some(desire);
                self.hold_countdown = self.pid_latency - 1;
                desire
            }
        }
    }

    /// Realize a desire from the latest observation. Speeds in the frame are km/h.
    pub fn ts_to_primitive(&mut self, desire: DesireAction, frame: &SensorFrame, dt: f64) -> PrimitiveAction {
        let target = self.latch(desire.clipped());
        self.track(target, frame.angle, frame.track_pos, frame.speed_x / 3.6, dt)
    }

    fn track(&mut self, target: DesireAction, angle: f64, track_pos: f64, speed: f64, dt: f64) -> PrimitiveAction {
        let e_steer = ts_error_track_pos(-angle, track_pos, target.track_pos, self.steer_scale);
        let (u_steer, steer_pid) = pid_step(&self.steer_gains, &self.steer_pid, e_steer, dt);
        self.steer_pid = steer_pid;
        let steer = u_steer.clamp(-1.0, 1.0);

        let v_target = target.target_speed_mps();
        if v_target <= 0.0 && speed.abs() < STANDSTILL_SPEED {
            self.accel_pid = PidState::default();
            return PrimitiveAction::new(steer, 0.0, 1.0);
        }
        let e_speed = ts_error_speed(speed, v_target, self.accel_scale);
        let (u, accel_pid) = pid_step(&self.accel_gains, &self.accel_pid, e_speed, dt);
        self.accel_pid = accel_pid;
        PrimitiveAction::new(steer, (-u).clamp(0.0, 1.0), u.clamp(0.0, 1.0))
    }
}

/// Zero-mean Gaussian offsets, one per channel; empty noise draws nothing.
pub fn gaussian_offsets<R: Rng + ?Sized, const N: usize>(std: f64, rng: &mut R) -> [f64; N] {
    let mut out = [0.0; N];
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite non-negative std");
        for v in &mut out {
            *v = normal.sample(rng);
        }
    }
    out
}

pub fn add_action_noise<R: Rng + ?Sized>(action: &PrimitiveAction, std: f64, rng: &mut R) -> PrimitiveAction {
    if std <= 0.0 {
        return *action;
    }
    let [ds, da, db] = gaussian_offsets::<R, 3>(std, rng);
    PrimitiveAction {
        steer: action.steer + ds,
        accel: action.accel + da,
        brake: action.brake + db,
        gear: action.gear,
    }
    .clipped()
}

pub fn add_desire_noise<R: Rng + ?Sized>(action: &DesireAction, std: f64, rng: &mut R) -> DesireAction {
    if std <= 0.0 {
        return *action;
    }
    let [dp, dv] = gaussian_offsets::<R, 2>(std, rng);
    DesireAction {
        track_pos: action.track_pos + dp,
        speed: action.speed + dv,
    }
    .clipped()
}

pub fn add_agent_action_noise<R: Rng + ?Sized>(action: &AgentAction, std: f64, rng: &mut R) -> AgentAction {
    match action {
        AgentAction::Primitive(p) => AgentAction::Primitive(add_action_noise(p, std, rng)),
        AgentAction::Desire(d) => AgentAction::Desire(add_desire_noise(d, std, rng)),
    }
}
