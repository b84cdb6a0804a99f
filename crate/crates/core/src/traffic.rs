//! Scripted traffic agents. Each behavior emits a desire every control step;
//! a collision-avoidance override then adjusts it and the shared PID stack
//! turns it into primitive commands.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{DesireAction, PidSettings, PrimitiveAction, TsController, DEFAULT_ACCEL_SCALE, DEFAULT_STEER_SCALE};
use crate::sensing::SensorFrame;

/// Comfortable deceleration used to plan the parking approach, m/s^2.
pub const PARKING_DECEL: f64 = 1.0;
/// Sectors treated as "ahead" by the collision check (bearings -10° to +10°).
pub const FRONT_SECTORS: [usize; 2] = [17, 18];
pub const EDGE_GUARD: f64 = 0.9;
pub const LANE_SWITCH_RANGE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrafficBehavior {
    ConstVelTrafficAgent,
    SinusoidalSpeedAgent,
    RandomLaneSwitchAgent,
    DriveAndParkAgent,
    ParkedAgent,
    RandomStoppingAgent,
}

impl TrafficBehavior {
    pub const ALL: [TrafficBehavior; 6] = [
        TrafficBehavior::ConstVelTrafficAgent,
        TrafficBehavior::SinusoidalSpeedAgent,
        TrafficBehavior::RandomLaneSwitchAgent,
        TrafficBehavior::DriveAndParkAgent,
        TrafficBehavior::ParkedAgent,
        TrafficBehavior::RandomStoppingAgent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrafficBehavior::ConstVelTrafficAgent => "ConstVelTrafficAgent",
            TrafficBehavior::SinusoidalSpeedAgent => "SinusoidalSpeedAgent",
            TrafficBehavior::RandomLaneSwitchAgent => "RandomLaneSwitchAgent",
            TrafficBehavior::DriveAndParkAgent => "DriveAndParkAgent",
            TrafficBehavior::ParkedAgent => "ParkedAgent",
            TrafficBehavior::RandomStoppingAgent => "RandomStoppingAgent",
        }
    }
}

impl FromStr for TrafficBehavior {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrafficBehavior::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown traffic behavior `{s}`"))
    }
}

impl fmt::Display for TrafficBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parking {
    /// Distance from the start line, meters.
    pub distance: f64,
    pub track_pos: f64,
}

/// One traffic record; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    #[serde(rename = "name")]
    pub behavior: TrafficBehavior,
    /// km/h
    pub target_speed: f64,
    pub target_lane_pos: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parking: Option<Parking>,
    pub initial_distance: (f64, f64),
    #[serde(rename = "initial_trackpos")]
    pub initial_track_pos: (f64, f64),
    /// seconds
    pub collision_time_window: f64,
    pub pid_settings: PidSettings,
    pub accel_scale: f64,
    pub steer_scale: f64,
    pub pid_latency: u32,
    /// Accepted for compatibility; the loaded track defines its own length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub track_len: Option<f64>,
    /// Sinusoid period, control steps.
    pub period: f64,
    pub p_switch: f64,
    pub p_stop: f64,
    /// Stop length, control steps.
    pub stop_duration: u64,
    /// Stop outright when a car ahead is closer than this, meters.
    pub min_gap: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            behavior: TrafficBehavior::ConstVelTrafficAgent,
            target_speed: 50.0,
            target_lane_pos: 0.0,
            parking: None,
            initial_distance: (50.0, 100.0),
            initial_track_pos: (-0.5, 0.5),
            collision_time_window: 2.0,
            pid_settings: PidSettings::default(),
            accel_scale: DEFAULT_ACCEL_SCALE,
            steer_scale: DEFAULT_STEER_SCALE,
            pid_latency: 1,
            track_len: None,
            period: 200.0,
            p_switch: 0.01,
            p_stop: 0.005,
            stop_duration: 100,
            min_gap: 6.0,
        }
    }
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.target_speed >= 0.0) {
            return Err(format!("target_speed must be non-negative, got {}", self.target_speed));
        }
        if !(self.target_lane_pos.abs() <= 1.0) {
            return Err(format!("target_lane_pos must lie in [-1, 1], got {}", self.target_lane_pos));
        }
        if !(self.collision_time_window > 0.0) {
            return Err(format!(
                "collision_time_window must be positive, got {}",
                self.collision_time_window
            ));
        }
        if self.initial_distance.0 > self.initial_distance.1 || self.initial_track_pos.0 > self.initial_track_pos.1 {
            return Err("initial ranges must be (min, max) with min <= max".into());
        }
        if self.initial_track_pos.0 < -1.0 || self.initial_track_pos.1 > 1.0 {
            return Err("initial_trackpos must lie within [-1, 1]".into());
        }
        if !(self.period > 0.0) {
            return Err("period must be positive".into());
        }
        for (name, p) in [("p_switch", self.p_switch), ("p_stop", self.p_stop)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be a probability, got {p}"));
            }
        }
        if !(self.accel_scale > 0.0 && self.steer_scale > 0.0) {
            return Err("accel_scale and steer_scale must be positive".into());
        }
        if self.pid_latency < 1 {
            return Err("pid_latency must be at least 1".into());
        }
        if self.behavior == TrafficBehavior::DriveAndParkAgent && self.parking.is_none() {
            return Err("DriveAndParkAgent needs a parking target".into());
        }
        self.pid_settings.accel.validate()?;
        self.pid_settings.steer.validate()
    }
}

/// Mutable per-agent behavior state.
#[derive(Debug, Clone)]
pub struct TrafficState {
    pub lane: f64,
    pub stopped_for: u64,
    /// Race coordinate of the spawn point, used to measure parking distance.
    pub spawn_distance: f64,
    pub parked: bool,
    rng: ChaCha8Rng,
}

impl TrafficState {
    pub fn new(cfg: &TrafficConfig, spawn_distance: f64, seed: u64) -> Self {
        let lane = match (cfg.behavior, cfg.parking) {
            (TrafficBehavior::DriveAndParkAgent, Some(p)) => p.track_pos,
            _ => cfg.target_lane_pos,
        };
        Self {
            lane,
            stopped_for: 0,
            spawn_distance,
            parked: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

pub fn traffic_policy_step(cfg: &TrafficConfig, frame: &SensorFrame, state: &mut TrafficState, step: u64) -> DesireAction {
    let target = cfg.target_speed;
    match cfg.behavior {
        TrafficBehavior::ConstVelTrafficAgent => DesireAction::from_kmh(state.lane, target),
        TrafficBehavior::SinusoidalSpeedAgent => {
            let v = target * (1.0 + 0.5 * (TAU * step as f64 / cfg.period).sin());
            DesireAction::from_kmh(state.lane, v)
        }
        TrafficBehavior::RandomLaneSwitchAgent => {
            if state.rng.random_bool(cfg.p_switch) {
                state.lane = state.rng.random_range(-LANE_SWITCH_RANGE..=LANE_SWITCH_RANGE);
            }
            DesireAction::from_kmh(state.lane, target)
        }
        TrafficBehavior::DriveAndParkAgent => {
            let parking = cfg.parking.expect("validated parking target");
            let travelled = state.spawn_distance + frame.dist_raced;
            let remaining = parking.distance - travelled;
            if remaining <= 0.0 {
                state.parked = true;
            }
            let v = if state.parked {
                0.0
            } else {
                (target / 3.6).min((2.0 * PARKING_DECEL * remaining).sqrt()) * 3.6
            };
            DesireAction::from_kmh(parking.track_pos, v)
        }
        TrafficBehavior::ParkedAgent => DesireAction::from_kmh(state.lane, 0.0),
        TrafficBehavior::RandomStoppingAgent => {
            if state.stopped_for > 0 {
                state.stopped_for -= 1;
            } else if state.rng.random_bool(cfg.p_stop) {
                state.stopped_for = cfg.stop_duration;
            }
            let v = if state.stopped_for > 0 { 0.0 } else { target };
            DesireAction::from_kmh(state.lane, v)
        }
    }
}

/// Nearest opponent distance in the forward sectors, if any is in range.
pub fn front_distance(frame: &SensorFrame) -> Option<f64> {
    FRONT_SECTORS
        .iter()
        .filter_map(|&k| frame.opponents.get(k).copied())
        .filter(|&d| d < crate::sensing::MAX_RANGE)
        .reduce(f64::min)
}

/// Time-to-collision guard against whatever is directly ahead, treating it
/// as stationary, plus a guard that steers back from the track edges.
pub fn collision_avoidance_override(frame: &SensorFrame, cfg: &TrafficConfig, desire: DesireAction) -> DesireAction {
    let mut out = desire;
    if let Some(d) = front_distance(frame) {
        let closing = frame.speed_x / 3.6;
        let ttc = if closing > 0.0 { d / closing } else { f64::INFINITY };
        if ttc < cfg.collision_time_window || d < cfg.min_gap {
            out.speed = DesireAction::from_kmh(0.0, 0.0).speed;
        }
    }
    if frame.track_pos.abs() > EDGE_GUARD {
        out.track_pos = 0.0;
    }
    out
}

/// A complete traffic driver: behavior, override and PID realization.
#[derive(Debug, Clone)]
pub struct TrafficAgent {
    pub config: TrafficConfig,
    pub state: TrafficState,
    pub controller: TsController,
}

impl TrafficAgent {
    pub fn new(config: TrafficConfig, spawn_distance: f64, seed: u64) -> Self {
        let state = TrafficState::new(&config, spawn_distance, seed);
        let controller = TsController::new(
            config.pid_settings.steer,
            config.pid_settings.accel,
            config.pid_latency,
            config.accel_scale,
            config.steer_scale,
        );
        Self {
            config,
            state,
            controller,
        }
    }

    pub fn act(&mut self, frame: &SensorFrame, step: u64, dt: f64) -> PrimitiveAction {
        let desire = traffic_policy_step(&self.config, frame, &mut self.state, step);
        let desire = collision_avoidance_override(frame, &self.config, desire);
        let mut action = self.controller.ts_to_primitive(desire, frame, dt);
        // A stop request is held with the full brake rather than the speed PID.
        if desire.target_speed_kmh() <= 0.0 {
            action.accel = 0.0;
            action.brake = 1.0;
        }
        action
    }
}

/// Parking slots on alternating sides of the road: slot `k` sits near
/// `first + k * spacing`, jittered uniformly by `jitter_s` meters along the
/// track and `jitter_lateral` meters across it.
pub fn alternating_parking_slots<R: Rng + ?Sized>(
    n: usize,
    first: f64,
    spacing: f64,
    side_track_pos: f64,
    half_width: f64,
    jitter_s: f64,
    jitter_lateral: f64,
    rng: &mut R,
) -> Vec<Parking> {
    (0..n)
        .map(|k| {
            let side = if k % 2 == 0 { 1.0 } else { -1.0 };
            let ds = if jitter_s > 0.0 { rng.random_range(-jitter_s..=jitter_s) } else { 0.0 };
            let dl = if jitter_lateral > 0.0 {
                rng.random_range(-jitter_lateral..=jitter_lateral)
            } else {
                0.0
            };
            Parking {
                distance: first + k as f64 * spacing + ds,
                track_pos: (side * side_track_pos + dl / half_width).clamp(-1.0, 1.0),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn frame() -> SensorFrame {
        SensorFrame::default()
    }

    #[test]
    fn behavior_names_round_trip() {
        for b in TrafficBehavior::ALL {
            assert_eq!(b.name().parse::<TrafficBehavior>().unwrap(), b);
        }
        assert!("Bus".parse::<TrafficBehavior>().is_err());
    }

    #[test]
    fn override_examples() {
        let cfg = TrafficConfig::default();
        let desire = DesireAction::from_kmh(0.2, 50.0);
        assert_eq!(collision_avoidance_override(&frame(), &cfg, desire), desire);

        let mut f = frame();
        f.opponents[18] = 5.0;
        f.speed_x = 36.0;
        let out = collision_avoidance_override(&f, &cfg, desire);
        assert_eq!(out.target_speed_kmh(), 0.0);
        assert_eq!(out.track_pos, 0.2);

        let mut f = frame();
        f.track_pos = 0.95;
        let out = collision_avoidance_override(&f, &cfg, desire);
        assert_eq!(out.track_pos, 0.0);
    }

    #[test]
    fn parked_is_a_fixed_point() {
        let cfg = TrafficConfig {
            behavior: TrafficBehavior::ParkedAgent,
            ..Default::default()
        };
        let mut st = TrafficState::new(&cfg, 0.0, 1);
        let first = traffic_policy_step(&cfg, &frame(), &mut st, 0);
        for k in 1..100 {
            assert_eq!(traffic_policy_step(&cfg, &frame(), &mut st, k), first);
        }
        assert_eq!(first.target_speed_kmh(), 0.0);
    }

    #[test]
    fn sinusoid_swings_half_the_target() {
        let cfg = TrafficConfig {
            behavior: TrafficBehavior::SinusoidalSpeedAgent,
            period: 200.0,
            ..Default::default()
        };
        let mut st = TrafficState::new(&cfg, 0.0, 1);
        let peak = traffic_policy_step(&cfg, &frame(), &mut st, 50);
        let trough = traffic_policy_step(&cfg, &frame(), &mut st, 150);
        assert!((peak.target_speed_kmh() - 75.0).abs() < 1e-9);
        assert!((trough.target_speed_kmh() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn random_behaviors_respect_bounds() {
        for behavior in [TrafficBehavior::RandomLaneSwitchAgent, TrafficBehavior::RandomStoppingAgent] {
            let cfg = TrafficConfig {
                behavior,
                p_switch: 0.2,
                p_stop: 0.05,
                stop_duration: 10,
                ..Default::default()
            };
            let mut st = TrafficState::new(&cfg, 0.0, 7);
            let mut stops = 0;
            let mut lanes = std::collections::BTreeSet::new();
            for k in 0..2000 {
                let d = traffic_policy_step(&cfg, &frame(), &mut st, k);
                assert!(d.track_pos.abs() <= LANE_SWITCH_RANGE + 1e-12);
                assert!((-1.0..=1.0).contains(&d.speed));
                if d.target_speed_kmh() == 0.0 {
                    stops += 1;
                }
                lanes.insert(d.track_pos.to_bits());
            }
            match behavior {
                TrafficBehavior::RandomLaneSwitchAgent => assert!(lanes.len() > 50),
                _ => assert!(stops > 100),
            }
        }
    }

    #[test]
    fn drive_and_park_holds_after_arrival() {
        let cfg = TrafficConfig {
            behavior: TrafficBehavior::DriveAndParkAgent,
            parking: Some(Parking {
                distance: 300.0,
                track_pos: 0.5,
            }),
            ..Default::default()
        };
        let mut st = TrafficState::new(&cfg, 100.0, 1);
        let mut f = frame();
        f.dist_raced = 100.0;
        let d = traffic_policy_step(&cfg, &f, &mut st, 0);
        assert_eq!(d.track_pos, 0.5);
        assert!((d.target_speed_kmh() - 50.0).abs() < 1e-9);
        f.dist_raced = 200.5;
        let arrived = traffic_policy_step(&cfg, &f, &mut st, 1);
        assert_eq!(arrived.target_speed_kmh(), 0.0);
        f.dist_raced = 199.0;
        assert_eq!(traffic_policy_step(&cfg, &f, &mut st, 2), arrived);
    }

    #[test]
    fn slots_alternate_and_stay_spaced() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let slots = alternating_parking_slots(4, 60.0, 40.0, 0.6, 2.5, 5.0, 0.25, &mut rng);
            for (k, s) in slots.iter().enumerate() {
                let side = if k % 2 == 0 { 1.0 } else { -1.0 };
                assert!((s.track_pos - side * 0.6).abs() <= 0.1 + 1e-12);
            }
            for w in slots.windows(2) {
                assert!(w[1].distance - w[0].distance >= 30.0 - 1e-9);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(TrafficConfig::default().validate().is_ok());
        let bad = TrafficConfig {
            collision_time_window: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrafficConfig {
            behavior: TrafficBehavior::DriveAndParkAgent,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
