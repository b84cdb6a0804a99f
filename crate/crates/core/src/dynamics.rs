//! Simplified per-car dynamics: a dynamic bicycle model with linear tires,
//! friction-circle saturation and an automatic gearbox, integrated with
//! explicit Euler steps.
//!
//! Below [`KINEMATIC_SPEED`] the slip angles of the dynamic model become
//! ill-conditioned, so the lateral state follows the kinematic bicycle there.

use std::f64::consts::PI;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::PrimitiveAction;
use crate::geom::{Pose, Vec2};
use crate::track::Track;

pub mod collision;

pub use collision::{apply_damage, detect_collisions, resolve_contact, Obb};

/// Physics integration step, seconds.
pub const PHYSICS_DT: f64 = 0.002;
/// Standard gravity, m/s^2.
pub const GRAVITY: f64 = 9.81;
/// Forward speed below which the kinematic bicycle drives the lateral state.
pub const KINEMATIC_SPEED: f64 = 2.0;
/// Tire cornering stiffness per newton of axle load, per radian.
pub const CORNERING_STIFFNESS: f64 = 12.0;
/// Grip multiplier applied while the car is off the track surface.
pub const OFF_TRACK_GRIP: f64 = 0.5;
/// Largest share of the driven axle's grip that tractive force may use.
pub const TRACTION_SHARE: f64 = 0.7;
/// Automatic gearbox shift points as fractions of the rev limit.
pub const UPSHIFT_FRACTION: f64 = 0.95;
pub const DOWNSHIFT_FRACTION: f64 = 0.40;
/// Wheelbase as a fraction of body length; the CG sits mid-wheelbase.
const WHEELBASE_FRACTION: f64 = 0.6;
const RPM_HEADROOM: f64 = 1.05;

#[derive(Debug, Error)]
pub enum CarModelError {
    #[error("malformed car document: {0}")]
    Parse(String),
    #[error("invalid car model `{name}`: {reason}")]
    Invalid { name: String, reason: String },
    #[error("failed to read car document: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown built-in car `{0}`")]
    UnknownBuiltin(String),
}

#[derive(Debug, Error)]
#[error("simulation fault: non-finite {field} after physics tick (state: {state})")]
pub struct SimulationFault {
    pub field: &'static str,
    pub state: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriveType {
    #[serde(rename = "RWD")]
    Rwd,
    #[serde(rename = "4WD")]
    FourWheel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarModel {
    pub name: String,
    /// kg
    pub mass: f64,
    /// m
    pub cg_height: f64,
    pub drive_type: DriveType,
    pub length: f64,
    pub width: f64,
    /// (rpm, torque N·m) points with strictly increasing rpm.
    pub torque_curve: Vec<(f64, f64)>,
    pub gear_ratios: Vec<f64>,
    pub final_drive: f64,
    pub wheel_radius: f64,
    pub max_steer_lock: f64,
    /// Aerodynamic drag, N per (m/s)^2.
    pub drag_coeff: f64,
    /// Rolling resistance, N per (m/s).
    pub rolling_resist: f64,
    pub brake_force_max: f64,
    /// (idle_rpm, max_rpm)
    pub rpm_range: (f64, f64),
}

impl CarModel {
    pub fn validate(&self) -> Result<(), CarModelError> {
        let fail = |reason: String| CarModelError::Invalid {
            name: self.name.clone(),
            reason,
        };
        let positive = [
            ("mass", self.mass),
            ("length", self.length),
            ("width", self.width),
            ("final_drive", self.final_drive),
            ("wheel_radius", self.wheel_radius),
            ("max_steer_lock", self.max_steer_lock),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(fail(format!("{field} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("cg_height", self.cg_height),
            ("drag_coeff", self.drag_coeff),
            ("rolling_resist", self.rolling_resist),
            ("brake_force_max", self.brake_force_max),
        ];
        for (field, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(fail(format!("{field} must be non-negative, got {v}")));
            }
        }
        if self.torque_curve.is_empty() {
            return Err(fail("torque_curve needs at least one point".into()));
        }
        for w in self.torque_curve.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(fail(format!(
                    "torque_curve rpm must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(rpm, t)) = self.torque_curve.iter().find(|(_, t)| !(*t >= 0.0 && t.is_finite())) {
            return Err(fail(format!("torque at {rpm} rpm must be non-negative, got {t}")));
        }
        if self.gear_ratios.is_empty() || self.gear_ratios.iter().any(|g| !(*g > 0.0)) {
            return Err(fail("gear_ratios must be a non-empty list of positive ratios".into()));
        }
        let (idle, max) = self.rpm_range;
        if !(idle >= 0.0 && idle < max) {
            return Err(fail(format!("rpm_range needs idle < max, got ({idle}, {max})")));
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        WHEELBASE_FRACTION * self.length
    }

    pub fn idle_rpm(&self) -> f64 {
        self.rpm_range.0
    }

    pub fn max_rpm(&self) -> f64 {
        self.rpm_range.1
    }

    /// Yaw moment of inertia of a uniform rectangular body.
    pub fn yaw_inertia(&self) -> f64 {
        self.mass * (self.length * self.length + self.width * self.width) / 12.0
    }

    pub fn top_gear(&self) -> i32 {
        self.gear_ratios.len() as i32
    }

    /// Signed overall gear ratio; reverse reuses first gear, neutral is zero.
    fn ratio(&self, gear: i32) -> f64 {
        match gear {
            g if g >= 1 => self.gear_ratios[(g.min(self.top_gear()) - 1) as usize],
            -1 => -self.gear_ratios[0],
            _ => 0.0,
        }
    }

    /// Engine speed implied by the wheel speed through the gear train.
    pub fn engine_rpm(&self, v_long: f64, gear: i32) -> f64 {
        let wheel_rpm = v_long.abs() / self.wheel_radius * 60.0 / (2.0 * PI);
        let rpm = wheel_rpm * self.ratio(gear).abs() * self.final_drive;
        rpm.max(self.idle_rpm()).min(self.max_rpm() * RPM_HEADROOM)
    }

    /// Lateral grip multiplier from load transfer at the given lateral acceleration.
    fn lateral_grip_factor(&self, lateral_accel: f64) -> f64 {
        let transfer = (lateral_accel.abs() * self.cg_height / (GRAVITY * 0.5 * self.width)).min(1.0);
        1.0 - 0.25 * transfer * transfer
    }
}

/// Piecewise-linear torque lookup, clamped to the end points of the curve.
pub fn torque_at(model: &CarModel, rpm: f64) -> f64 {
    let curve = &model.torque_curve;
    let first = curve[0];
    let last = curve[curve.len() - 1];
    if rpm <= first.0 {
        return first.1;
    }
    if rpm >= last.0 {
        return last.1;
    }
    let i = curve.partition_point(|&(r, _)| r <= rpm);
    let (r0, t0) = curve[i - 1];
    let (r1, t1) = curve[i];
    t0 + (t1 - t0) * (rpm - r0) / (r1 - r0)
}

pub fn parse_car(text: &str) -> Result<CarModel, CarModelError> {
    let model: CarModel = toml::from_str(text).map_err(|e| CarModelError::Parse(e.message().to_string()))?;
    model.validate()?;
    Ok(model)
}

pub fn load_car(mut source: impl Read) -> Result<CarModel, CarModelError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    parse_car(&text)
}

pub const BUILTIN_CARS: [&str; 5] = ["stock", "sedan", "coupe", "buggy", "dtm"];

pub fn builtin_car_source(name: &str) -> Option<&'static str> {
    match name {
        "stock" => Some(include_str!("../assets/cars/stock.toml")),
        "sedan" => Some(include_str!("../assets/cars/sedan.toml")),
        "coupe" => Some(include_str!("../assets/cars/coupe.toml")),
        "buggy" => Some(include_str!("../assets/cars/buggy.toml")),
        "dtm" => Some(include_str!("../assets/cars/dtm.toml")),
        _ => None,
    }
}

pub fn builtin_car(name: &str) -> Result<CarModel, CarModelError> {
    let src = builtin_car_source(name).ok_or_else(|| CarModelError::UnknownBuiltin(name.to_string()))?;
    parse_car(src)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec2,
    pub heading: f64,
    /// Forward speed in the body frame, m/s.
    pub v_long: f64,
    /// Leftward speed in the body frame, m/s.
    pub v_lat: f64,
    pub yaw_rate: f64,
    pub rpm: f64,
    pub gear: i32,
    pub damage: f64,
    /// Furthest signed progress along the centerline since spawn; never decreases.
    pub distance_raced: f64,
    /// Signed along-track travel since spawn (backward motion subtracts).
    pub progress: f64,
    /// Last projected arc length.
    pub s: f64,
    pub alive: bool,
}

impl VehicleState {
    /// A car at rest on the centerline-aligned pose at (s, track_pos).
    pub fn spawn(track: &Track, model: &CarModel, s: f64, track_pos: f64) -> Result<Self, crate::track::TrackError> {
        let pose = track.spawn_pose(s, track_pos)?;
        Ok(Self::at_pose(track, model, pose))
    }

    pub fn at_pose(track: &Track, model: &CarModel, pose: Pose) -> Self {
        let f = track.project_to_frenet(pose.position, pose.heading);
        Self {
            position: pose.position,
            heading: pose.heading,
            v_long: 0.0,
            v_lat: 0.0,
            yaw_rate: 0.0,
            rpm: model.idle_rpm(),
            gear: 1,
            damage: 0.0,
            distance_raced: 0.0,
            progress: 0.0,
            s: f.s,
            alive: true,
        }
    }

    pub fn speed(&self) -> f64 {
        self.v_long.hypot(self.v_lat)
    }

    /// Velocity in the world frame.
    pub fn world_velocity(&self) -> Vec2 {
        Vec2::new(self.v_long, self.v_lat).rotate(self.heading)
    }

    pub fn set_world_velocity(&mut self, v: Vec2) {
        let body = v.rotate(-self.heading);
        self.v_long = body.x;
        self.v_lat = body.y;
    }

    /// Translational plus rotational kinetic energy, joules.
    pub fn kinetic_energy(&self, model: &CarModel) -> f64 {
        0.5 * model.mass * (self.v_long * self.v_long + self.v_lat * self.v_lat)
            + 0.5 * model.yaw_inertia() * self.yaw_rate * self.yaw_rate
    }

    fn check_finite(&self) -> Result<(), SimulationFault> {
        let fields = [
            ("position", self.position.x + self.position.y),
            ("heading", self.heading),
            ("v_long", self.v_long),
            ("v_lat", self.v_lat),
            ("yaw_rate", self.yaw_rate),
            ("rpm", self.rpm),
            ("distance_raced", self.distance_raced),
        ];
        match fields.iter().find(|(_, v)| !v.is_finite()) {
            Some((field, _)) => Err(SimulationFault {
                field,
                state: format!("{self:?}"),
            }),
            None => Ok(()),
        }
    }
}

/// Clamp a friction-limited force to a circle of radius `cap` shared with `other`.
fn friction_circle(force: f64, cap: f64, other: f64) -> f64 {
    let room = (cap * cap - other * other).max(0.0).sqrt();
    force.clamp(-room, room)
}

/// One explicit Euler step of the vehicle dynamics.
pub fn physics_tick(
    state: &VehicleState,
    model: &CarModel,
    controls: &PrimitiveAction,
    track: &Track,
    dt: f64,
) -> Result<VehicleState, SimulationFault> {
    let controls = controls.clipped();
    let mut next = state.clone();

    let frenet = track.project_to_frenet(state.position, state.heading);
    let mut mu = track.friction_at(frenet.s);
    if frenet.track_pos.abs() > 1.0 {
        mu *= OFF_TRACK_GRIP;
    }

    let automatic = controls.gear.is_none();
    let mut gear = controls.gear.unwrap_or(state.gear).clamp(-1, model.top_gear());
    if automatic && gear < 1 {
        gear = 1;
    }

    let m = model.mass;
    let wheelbase = model.wheelbase();
    let lf = 0.5 * wheelbase;
    let lr = 0.5 * wheelbase;
    let axle_load = 0.5 * m * GRAVITY;
    let delta = controls.steer * model.max_steer_lock;

    // Longitudinal forces.
    let rpm = model.engine_rpm(state.v_long, gear);
    let torque = if rpm >= model.max_rpm() { 0.0 } else { torque_at(model, rpm) };
    let mut drive = torque * model.ratio(gear) * model.final_drive / model.wheel_radius * controls.accel;
    let driven_load = match model.drive_type {
        DriveType::Rwd => axle_load,
        DriveType::FourWheel => 2.0 * axle_load,
    };
    let traction = TRACTION_SHARE * mu * driven_load;
    drive = drive.clamp(-traction, traction);
    let vx = state.v_long;
    let vy = state.v_lat;
    let r = state.yaw_rate;
    let resist = -(model.drag_coeff * vx * vx.abs() + model.rolling_resist * vx);
    let brake = if vx == 0.0 {
        0.0
    } else {
        -(controls.brake * model.brake_force_max).min(mu * m * GRAVITY) * vx.signum()
    };

    let h = state.heading;
    let (ax, vy_next, r_next);
    if vx > KINEMATIC_SPEED {
        let grip = mu * model.lateral_grip_factor(vx * r);
        let (drive_front, drive_rear) = match model.drive_type {
            DriveType::Rwd => (0.0, drive),
            DriveType::FourWheel => (0.5 * drive, 0.5 * drive),
        };
        let alpha_f = delta - (vy + lf * r).atan2(vx);
        let alpha_r = -(vy - lr * r).atan2(vx);
        let c_axle = CORNERING_STIFFNESS * axle_load;
        let fy_f = friction_circle(c_axle * alpha_f, grip * axle_load, drive_front);
        let fy_r = friction_circle(c_axle * alpha_r, grip * axle_load, drive_rear);
        let fx = drive + resist + brake;
        ax = (fx - fy_f * delta.sin()) / m + vy * r;
        let ay = (fy_f * delta.cos() + fy_r) / m - vx * r;
        let yaw_acc = (lf * fy_f * delta.cos() - lr * fy_r) / model.yaw_inertia();
        vy_next = vy + dt * ay;
        r_next = r + dt * yaw_acc;
        next.position = state.position + Vec2::new(vx, vy).rotate(h) * dt;
        next.heading = h + dt * r;
    } else {
        ax = (drive + resist + brake) / m;
        let slip = lr * delta.tan() / wheelbase;
        let r_kin = vx * delta.tan() / wheelbase;
        next.position = state.position + Vec2::new(vx, vx * slip).rotate(h) * dt;
        next.heading = h + dt * r_kin;
        let vx_new = vx + dt * ax;
        vy_next = vx_new * slip;
        r_next = vx_new * delta.tan() / wheelbase;
    }

    let mut vx_next = vx + dt * ax;
    // Resistance and brakes stop the car; they never push it backwards.
    if vx != 0.0 && vx_next.signum() != vx.signum() && (drive == 0.0 || drive.signum() != vx_next.signum()) {
        vx_next = 0.0;
    }
    next.v_long = vx_next;
    next.v_lat = vy_next;
    next.yaw_rate = r_next;

    if automatic {
        let rpm_now = model.engine_rpm(vx_next, gear);
        if rpm_now > UPSHIFT_FRACTION * model.max_rpm() && gear < model.top_gear() {
            gear += 1;
        } else if rpm_now < DOWNSHIFT_FRACTION * model.max_rpm() && gear > 1 {
            gear -= 1;
        }
    }
    next.gear = gear;
    next.rpm = model.engine_rpm(vx_next, gear);

    let after = track.project_to_frenet(next.position, next.heading);
    let ds = track.arc_delta(state.s, after.s);
    next.s = after.s;
    next.progress = state.progress + ds;
    next.distance_raced = state.distance_raced.max(next.progress);

    next.check_finite()?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{builtin_track, TrackSegment};

    pub(crate) fn long_straight() -> Track {
        Track::new("straight", vec![TrackSegment::straight(5000.0, 10.0)], false).unwrap()
    }

    fn simple_model(mass: f64, curve: Vec<(f64, f64)>) -> CarModel {
        CarModel {
            name: format!("test-{mass}"),
            mass,
            cg_height: 0.3,
            drive_type: DriveType::Rwd,
            length: 4.5,
            width: 1.9,
            torque_curve: curve,
            gear_ratios: vec![3.3, 2.2, 1.6, 1.25, 1.0, 0.85],
            final_drive: 3.9,
            wheel_radius: 0.33,
            max_steer_lock: 0.366,
            drag_coeff: 0.4,
            rolling_resist: 15.0,
            brake_force_max: 15000.0,
            rpm_range: (800.0, 8000.0),
        }
    }

    #[test]
    fn torque_clamps_below_and_above_curve() {
        let m = simple_model(1000.0, vec![(1000.0, 200.0), (3000.0, 400.0)]);
        assert_eq!(torque_at(&m, 0.0), 200.0);
        assert_eq!(torque_at(&m, 500.0), 200.0);
        assert_eq!(torque_at(&m, 9000.0), 400.0);
    }

    #[test]
    fn torque_interpolates_linearly() {
        let m = simple_model(1000.0, vec![(1000.0, 200.0), (3000.0, 400.0)]);
        assert!((torque_at(&m, 2000.0) - 300.0).abs() < 1e-12);
        assert!((torque_at(&m, 1500.0) - 250.0).abs() < 1e-12);
    }

    #[test]
    fn hat_and_cup_shaped_builtin_curves() {
        let stock = builtin_car("stock").unwrap();
        let (lo, hi) = stock.rpm_range;
        let mid = 0.5 * (lo + hi);
        assert!(torque_at(&stock, mid) > torque_at(&stock, lo));
        assert!(torque_at(&stock, mid) > torque_at(&stock, hi));

        let buggy = builtin_car("buggy").unwrap();
        let (lo, hi) = buggy.rpm_range;
        let mid = 0.5 * (lo + hi);
        assert!(torque_at(&buggy, mid) < torque_at(&buggy, lo));
        assert!(torque_at(&buggy, mid) < torque_at(&buggy, hi));
    }

    #[test]
    fn car_validation_rejects_bad_curves() {
        let mut m = simple_model(1000.0, vec![(3000.0, 200.0), (1000.0, 400.0)]);
        assert!(m.validate().is_err());
        m.torque_curve = vec![(1000.0, -1.0)];
        assert!(m.validate().is_err());
        m.torque_curve = vec![(1000.0, 1.0)];
        m.mass = 0.0;
        assert!(m.validate().is_err());
        assert!(parse_car("name = \"x\"\nwings = 2\n").is_err());
    }

    #[test]
    fn builtin_cars_are_valid() {
        for name in BUILTIN_CARS {
            let car = builtin_car(name).unwrap();
            // Consecutive ratios must leave the auto box room between shift points.
            for w in car.gear_ratios.windows(2) {
                assert!(w[1] / w[0] * UPSHIFT_FRACTION > DOWNSHIFT_FRACTION, "{name}");
            }
        }
    }

    #[test]
    fn rest_with_zero_controls_only_idles() {
        let track = long_straight();
        let model = simple_model(1200.0, vec![(1000.0, 200.0), (3000.0, 400.0)]);
        let mut s0 = VehicleState::spawn(&track, &model, 100.0, 0.0).unwrap();
        s0.rpm = 0.0;
        let s1 = physics_tick(&s0, &model, &PrimitiveAction::default(), &track, PHYSICS_DT).unwrap();
        let mut expected = s0.clone();
        expected.rpm = model.idle_rpm();
        assert_eq!(s1, expected);
    }

    #[test]
    fn full_throttle_accelerates_then_plateaus() {
        let track = long_straight();
        let model = simple_model(1200.0, vec![(800.0, 250.0), (8000.0, 250.0)]);
        let mut s = VehicleState::spawn(&track, &model, 0.0, 0.0).unwrap();
        let throttle = PrimitiveAction {
            accel: 1.0,
            ..Default::default()
        };
        let mut prev = s.v_long;
        let mut increments = 0;
        for _ in 0..60_000 {
            s = physics_tick(&s, &model, &throttle, &track, PHYSICS_DT).unwrap();
            if s.distance_raced > 4900.0 {
                break;
            }
            if s.v_long > prev {
                increments += 1;
            }
            // Never loses speed under full throttle except across a gear change.
            assert!(s.v_long >= prev - 0.05, "{} < {}", s.v_long, prev);
            prev = s.v_long;
        }
        assert!(increments > 1000);
        assert!(s.v_long > 40.0, "terminal speed too low: {}", s.v_long);
    }

    #[test]
    fn heavier_car_accelerates_less() {
        let track = long_straight();
        // Low enough that neither car is traction limited, where acceleration
        // would no longer depend on mass.
        let curve = vec![(800.0, 75.0), (8000.0, 75.0)];
        let heavy = simple_model(1550.0, curve.clone());
        let light = simple_model(650.0, curve);
        let throttle = PrimitiveAction {
            accel: 1.0,
            ..Default::default()
        };
        let mut a = VehicleState::spawn(&track, &heavy, 0.0, 0.0).unwrap();
        let mut b = VehicleState::spawn(&track, &light, 0.0, 0.0).unwrap();
        for _ in 0..2000 {
            let na = physics_tick(&a, &heavy, &throttle, &track, PHYSICS_DT).unwrap();
            let nb = physics_tick(&b, &light, &throttle, &track, PHYSICS_DT).unwrap();
            let acc_heavy = na.v_long - a.v_long;
            let acc_light = nb.v_long - b.v_long;
            assert!(acc_heavy < acc_light, "heavy {acc_heavy} light {acc_light}");
            a = na;
            b = nb;
        }
    }

    #[test]
    fn tick_is_deterministic() {
        let track = builtin_track("oval").unwrap();
        let model = builtin_car("stock").unwrap();
        let mut s = VehicleState::spawn(&track, &model, 10.0, 0.2).unwrap();
        s.v_long = 20.0;
        s.yaw_rate = 0.1;
        let c = PrimitiveAction {
            steer: 0.3,
            accel: 0.5,
            ..Default::default()
        };
        let a = physics_tick(&s, &model, &c, &track, PHYSICS_DT).unwrap();
        let b = physics_tick(&s, &model, &c, &track, PHYSICS_DT).unwrap();
        assert_eq!(a, b);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn non_finite_state_faults() {
        let track = long_straight();
        let model = simple_model(1200.0, vec![(1000.0, 200.0)]);
        let mut s = VehicleState::spawn(&track, &model, 10.0, 0.0).unwrap();
        s.v_lat = f64::NAN;
        s.v_long = 10.0;
        let err = physics_tick(&s, &model, &PrimitiveAction::default(), &track, PHYSICS_DT).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn brakes_stop_without_reversing() {
        let track = long_straight();
        let model = simple_model(1200.0, vec![(1000.0, 200.0)]);
        let mut s = VehicleState::spawn(&track, &model, 10.0, 0.0).unwrap();
        s.v_long = 5.0;
        let brake = PrimitiveAction {
            brake: 1.0,
            ..Default::default()
        };
        for _ in 0..2000 {
            s = physics_tick(&s, &model, &brake, &track, PHYSICS_DT).unwrap();
            assert!(s.v_long >= 0.0);
        }
        assert_eq!(s.v_long, 0.0);
    }

    #[test]
    fn automatic_box_upshifts_under_throttle() {
        let track = long_straight();
        let model = builtin_car("stock").unwrap();
        let mut s = VehicleState::spawn(&track, &model, 0.0, 0.0).unwrap();
        let throttle = PrimitiveAction {
            accel: 1.0,
            ..Default::default()
        };
        for _ in 0..10_000 {
            s = physics_tick(&s, &model, &throttle, &track, PHYSICS_DT).unwrap();
            assert!(s.rpm <= model.max_rpm() * RPM_HEADROOM && s.rpm >= 0.0);
        }
        assert!(s.gear >= 3, "gear {}", s.gear);
    }

    #[test]
    fn steering_left_turns_left() {
        let track = long_straight();
        let model = builtin_car("sedan").unwrap();
        let mut s = VehicleState::spawn(&track, &model, 100.0, 0.0).unwrap();
        s.v_long = 15.0;
        let c = PrimitiveAction {
            steer: 0.2,
            accel: 0.2,
            ..Default::default()
        };
        for _ in 0..200 {
            s = physics_tick(&s, &model, &c, &track, PHYSICS_DT).unwrap();
        }
        assert!(s.heading > 0.05);
        assert!(s.position.y > 0.0);
    }

    #[test]
    fn distance_raced_tracks_forward_progress() {
        let track = builtin_track("oval").unwrap();
        let model = builtin_car("sedan").unwrap();
        let mut s = VehicleState::spawn(&track, &model, 20.0, 0.0).unwrap();
        s.v_long = 10.0;
        for _ in 0..500 {
            s = physics_tick(&s, &model, &PrimitiveAction::default(), &track, PHYSICS_DT).unwrap();
        }
        // About ten meters in one second of coasting.
        assert!((s.distance_raced - 10.0).abs() < 0.5, "{}", s.distance_raced);
        assert!((s.s - 20.0 - s.distance_raced).abs() < 1e-9);
    }
}
