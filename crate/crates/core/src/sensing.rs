//! Egocentric observations: rangefinders against the track edges, opponent
//! sectors, optional range noise and affine normalization to [-1, 1].

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleState;
use crate::geom::{wrap_angle, Vec2};
use crate::track::{EdgePiece, Track};

pub const NUM_BEAMS: usize = 19;
pub const NUM_SECTORS: usize = 36;
pub const MAX_RANGE: f64 = 200.0;
/// Reading reported by every beam while the car is off the track.
pub const OUT_OF_TRACK_READING: f64 = -1.0;
pub const RANGE_NOISE_STD: f64 = 0.1;
pub const MPS_TO_KMH: f64 = 3.6;
const SECTOR_WIDTH: f64 = TAU / NUM_SECTORS as f64;

/// 19 beams evenly spaced over [-90, 90] degrees, returned in radians.
pub fn default_beam_angles() -> [f64; NUM_BEAMS] {
    let mut out = [0.0; NUM_BEAMS];
    for (i, a) in out.iter_mut().enumerate() {
        *a = (-90.0 + 10.0 * i as f64).to_radians();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub angle: f64,
    pub track: Vec<f64>,
    pub track_pos: f64,
    /// km/h
    pub speed_x: f64,
    pub speed_y: f64,
    pub speed_z: f64,
    pub opponents: Vec<f64>,
    pub rpm: f64,
    pub gear: i32,
    pub damage: f64,
    pub dist_from_start: f64,
    pub dist_raced: f64,
    pub cur_lap_time: f64,
    pub race_pos: u32,
    /// Peer variables from the communication buffer, empty when unused.
    pub comms: Vec<f64>,
}

impl Default for SensorFrame {
    fn default() -> Self {
        Self {
            angle: 0.0,
            track: vec![MAX_RANGE; NUM_BEAMS],
            track_pos: 0.0,
            speed_x: 0.0,
            speed_y: 0.0,
            speed_z: 0.0,
            opponents: vec![MAX_RANGE; NUM_SECTORS],
            rpm: 0.0,
            gear: 0,
            damage: 0.0,
            dist_from_start: 0.0,
            dist_raced: 0.0,
            cur_lap_time: 0.0,
            race_pos: 1,
            comms: Vec::new(),
        }
    }
}

fn ray_hit_line(origin: Vec2, dir: Vec2, a: Vec2, b: Vec2) -> Option<f64> {
    let e = b - a;
    let denom = dir.cross(e);
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = a - origin;
    let t = w.cross(e) / denom;
    let u = w.cross(dir) / denom;
    (t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&u)).then_some(t)
}

fn ray_hit_arc(origin: Vec2, dir: Vec2, center: Vec2, radius: f64, sign: f64, start_heading: f64, span: f64) -> Option<f64> {
    let w = origin - center;
    let b = w.dot(dir);
    let c = w.norm_sq() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let mut best: Option<f64> = None;
    for t in [-b - root, -b + root] {
        if t <= 0.0 || best.is_some_and(|bt| bt <= t) {
            continue;
        }
        let v = w + dir * t;
        let h = (sign * v.x).atan2(-sign * v.y);
        let along = (sign * (h - start_heading)).rem_euclid(TAU);
        if along <= span + 1e-9 || along >= TAU - 1e-9 {
            best = Some(t);
        }
    }
    best
}

/// Distance along one beam (radians relative to the car heading, positive to
/// the left) to the nearest track edge, capped at [`MAX_RANGE`].
fn cast_beam(track: &Track, origin: Vec2, direction: f64) -> f64 {
    let dir = Vec2::from_heading(direction);
    let mut best = MAX_RANGE;
    for piece in track.edge_pieces() {
        let hit = match piece {
            EdgePiece::Line { a, b } => ray_hit_line(origin, dir, a, b),
            EdgePiece::Arc {
                center,
                radius,
                sign,
                start_heading,
                span,
            } => ray_hit_arc(origin, dir, center, radius, sign, start_heading, span),
        };
        if let Some(t) = hit {
            best = best.min(t);
        }
    }
    best
}

pub fn rangefinder_scan(track: &Track, position: Vec2, heading: f64, beam_angles: &[f64]) -> Vec<f64> {
    let frenet = track.project_to_frenet(position, heading);
    if frenet.track_pos.abs() > 1.0 {
        return vec![OUT_OF_TRACK_READING; beam_angles.len()];
    }
    beam_angles.iter().map(|a| cast_beam(track, position, heading + a)).collect()
}

/// Sector index for a bearing relative to the car heading; sector 0 starts
/// directly behind and indices increase counterclockwise.
pub fn sector_of(bearing: f64) -> usize {
    let k = ((wrap_angle(bearing) + PI) / SECTOR_WIDTH).floor() as i64;
    k.rem_euclid(NUM_SECTORS as i64) as usize
}

pub fn opponents_scan(ego: &VehicleState, others: &[&VehicleState]) -> Vec<f64> {
    let mut out = vec![MAX_RANGE; NUM_SECTORS];
    for other in others {
        let rel = other.position - ego.position;
        let d = rel.norm();
        if d >= MAX_RANGE {
            continue;
        }
        let bearing = rel.y.atan2(rel.x) - ego.heading;
        let k = sector_of(bearing);
        out[k] = out[k].min(d);
    }
    out
}

/// Everything frame construction needs from the world at one instant.
#[derive(Debug, Clone, Copy)]
pub struct WorldSnapshot<'a> {
    pub track: &'a Track,
    pub cars: &'a [VehicleState],
    /// Position along the race for ranking (spawn offset plus progress).
    pub race_coords: &'a [f64],
    pub lap_times: &'a [f64],
}

/// 1-based rank; equal race coordinates go to the lower car index.
pub fn race_position(race_coords: &[f64], agent: usize) -> u32 {
    let me = race_coords[agent];
    let ahead = race_coords
        .iter()
        .enumerate()
        .filter(|&(j, &c)| j != agent && (c > me || (c == me && j < agent)))
        .count();
    ahead as u32 + 1
}

pub fn build_sensor_frame(world: &WorldSnapshot<'_>, agent: usize, beam_angles: &[f64]) -> SensorFrame {
    let car = &world.cars[agent];
    let frenet = world.track.project_to_frenet(car.position, car.heading);
    let others: Vec<&VehicleState> = world
        .cars
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != agent)
        .map(|(_, c)| c)
        .collect();
    SensorFrame {
        angle: frenet.angle,
        track: rangefinder_scan(world.track, car.position, car.heading, beam_angles),
        track_pos: frenet.track_pos,
        speed_x: car.v_long * MPS_TO_KMH,
        speed_y: car.v_lat * MPS_TO_KMH,
        speed_z: 0.0,
        opponents: opponents_scan(car, &others),
        rpm: car.rpm,
        gear: car.gear,
        damage: car.damage,
        dist_from_start: frenet.s,
        dist_raced: car.distance_raced,
        cur_lap_time: world.lap_times[agent],
        race_pos: race_position(world.race_coords, agent),
        comms: Vec::new(),
    }
}

fn noisy(d: f64, eps: f64) -> f64 {
    if d < 0.0 {
        d
    } else {
        (d * (1.0 + eps)).clamp(0.0, MAX_RANGE)
    }
}

/// Multiplicative Gaussian noise on range readings; off-track sentinels are kept.
pub fn apply_observation_noise<R: Rng + ?Sized>(frame: &SensorFrame, enabled: bool, rng: &mut R) -> SensorFrame {
    let mut out = frame.clone();
    if !enabled {
        return out;
    }
    let normal = Normal::new(0.0, RANGE_NOISE_STD).expect("valid std");
    for d in out.track.iter_mut().chain(out.opponents.iter_mut()) {
        *d = noisy(*d, normal.sample(rng));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    Basic,
    Traffic,
    Comms,
}

#[derive(Debug, Error, PartialEq)]
pub enum ObservationError {
    #[error("unknown observation mode `{0}` (expected basic, traffic or comms)")]
    UnknownMode(String),
    #[error("unknown observation variable `{0}`")]
    UnknownVariable(String),
    #[error("bounds for `{name}` must satisfy obs_min < obs_max, got [{min}, {max}]")]
    EmptyRange { name: String, min: f64, max: f64 },
    #[error("buff_size must be at least 1")]
    BuffSize,
}

impl std::str::FromStr for ObservationMode {
    type Err = ObservationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(Self::Basic),
            "traffic" => Ok(Self::Traffic),
            "comms" => Ok(Self::Comms),
            other => Err(ObservationError::UnknownMode(other.to_string())),
        }
    }
}

/// Names of variables that carry normalization bounds.
pub const BOUNDED_VARIABLES: [&str; 7] = ["angle", "track", "trackPos", "speedX", "speedY", "speedZ", "opponents"];

pub fn default_bounds() -> BTreeMap<String, (f64, f64)> {
    [
        ("angle", (-PI, PI)),
        ("track", (0.0, MAX_RANGE)),
        ("trackPos", (-1.0, 1.0)),
        ("speedX", (-100.0, 300.0)),
        ("speedY", (-100.0, 100.0)),
        ("speedZ", (-100.0, 100.0)),
        ("opponents", (0.0, MAX_RANGE)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub mode: ObservationMode,
    pub normalize: bool,
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub noisy: bool,
    pub buff_size: usize,
}

impl Default for ObservationSpec {
    fn default() -> Self {
        Self {
            mode: ObservationMode::Basic,
            normalize: true,
            bounds: default_bounds(),
            noisy: false,
            buff_size: 1,
        }
    }
}

impl ObservationSpec {
    pub fn validate(&self) -> Result<(), ObservationError> {
        if self.buff_size < 1 {
            return Err(ObservationError::BuffSize);
        }
        for (name, &(min, max)) in &self.bounds {
            if !BOUNDED_VARIABLES.contains(&name.as_str()) {
                return Err(ObservationError::UnknownVariable(name.clone()));
            }
            if !(min < max) {
                return Err(ObservationError::EmptyRange {
                    name: name.clone(),
                    min,
                    max,
                });
            }
        }
        Ok(())
    }

    /// Vector length for this mode, given the width of the peer block.
    pub fn vector_len(&self, comms_len: usize) -> usize {
        match self.mode {
            ObservationMode::Basic => 24,
            ObservationMode::Traffic => 24 + NUM_SECTORS,
            ObservationMode::Comms => 24 + NUM_SECTORS + comms_len,
        }
    }

    fn bound(&self, name: &str) -> (f64, f64) {
        self.bounds
            .get(name)
            .copied()
            .unwrap_or_else(|| default_bounds()[name])
    }
}

/// Affine map of `[min, max]` onto [-1, 1], clipped.
pub fn normalize_value(v: f64, min: f64, max: f64) -> f64 {
    (2.0 * (v - min) / (max - min) - 1.0).clamp(-1.0, 1.0)
}

/// Flatten a frame in the fixed order angle, track, trackPos, speedX,
/// speedY, speedZ, then opponents (traffic and comms modes), then the peer
/// block (comms mode, never normalized).
pub fn normalize_observation(frame: &SensorFrame, spec: &ObservationSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.vector_len(frame.comms.len()));
    let mut push = |name: &str, v: f64| {
        if spec.normalize {
            let (lo, hi) = spec.bound(name);
            out.push(normalize_value(v, lo, hi));
        } else {
            out.push(v);
        }
    };
    push("angle", frame.angle);
    for &d in &frame.track {
        push("track", d);
    }
    push("trackPos", frame.track_pos);
    push("speedX", frame.speed_x);
    push("speedY", frame.speed_y);
    push("speedZ", frame.speed_z);
    if spec.mode != ObservationMode::Basic {
        for &d in &frame.opponents {
            push("opponents", d);
        }
    }
    if spec.mode == ObservationMode::Comms {
        out.extend_from_slice(&frame.comms);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::builtin_car;
    use crate::geom::Pose;
    use crate::track::{builtin_track, TrackSegment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight() -> Track {
        Track::new("s", vec![TrackSegment::straight(1000.0, 10.0)], false).unwrap()
    }

    #[test]
    fn side_beams_measure_half_width() {
        let t = straight();
        let r = rangefinder_scan(&t, Vec2::new(100.0, 0.0), 0.0, &[PI / 2.0, -PI / 2.0, 0.0]);
        assert!((r[0] - 5.0).abs() < 1e-9);
        assert!((r[1] - 5.0).abs() < 1e-9);
        assert_eq!(r[2], MAX_RANGE);
    }

    #[test]
    fn offset_car_sees_asymmetric_edges() {
        let t = straight();
        let r = rangefinder_scan(&t, Vec2::new(100.0, 2.5), 0.0, &[PI / 2.0, -PI / 2.0]);
        assert!((r[0] - 2.5).abs() < 1e-9);
        assert!((r[1] - 7.5).abs() < 1e-9);
    }

    #[test]
    fn beams_are_symmetric_on_centerline() {
        let t = straight();
        let beams = default_beam_angles();
        let r = rangefinder_scan(&t, Vec2::new(500.0, 0.0), 0.0, &beams);
        for i in 0..NUM_BEAMS {
            assert!((r[i] - r[NUM_BEAMS - 1 - i]).abs() < 1e-9);
        }
    }

    #[test]
    fn off_track_reads_sentinel() {
        let t = straight();
        let r = rangefinder_scan(&t, Vec2::new(100.0, 6.0), 0.0, &default_beam_angles());
        assert!(r.iter().all(|&d| d == OUT_OF_TRACK_READING));
    }

    #[test]
    fn beams_see_outer_wall_in_a_curve() {
        let t = builtin_track("oval").unwrap();
        // Middle of the first arc, on the centerline, facing along the track.
        let pose = t.spawn_pose(100.0 + 25.0 * PI / 2.0 * 2.0 / 2.0, 0.0).unwrap();
        let r = rangefinder_scan(&t, pose.position, pose.heading, &default_beam_angles());
        assert!(r[9] < MAX_RANGE, "forward beam should meet the outer edge, got {}", r[9]);
        assert!((r[0] - 5.0).abs() < 1e-6, "right beam {}", r[0]);
        assert!((r[18] - 5.0).abs() < 1e-6, "left beam {}", r[18]);
        for d in r {
            assert!(d > 0.0 && d <= MAX_RANGE);
        }
    }

    fn car(t: &Track, x: f64, y: f64, h: f64) -> VehicleState {
        let m = builtin_car("sedan").unwrap();
        VehicleState::at_pose(t, &m, Pose::new(x, y, h))
    }

    #[test]
    fn opponent_sectors() {
        let t = straight();
        let ego = car(&t, 100.0, 0.0, 0.0);
        assert!(opponents_scan(&ego, &[]).iter().all(|&d| d == MAX_RANGE));
        let a = car(&t, 130.0, 0.0, 0.0);
        let b = car(&t, 150.0, 0.0, 0.0);
        let scan = opponents_scan(&ego, &[&a, &b]);
        for (k, d) in scan.iter().enumerate() {
            if k == 18 {
                assert!((d - 30.0).abs() < 1e-9);
            } else {
                assert_eq!(*d, MAX_RANGE);
            }
        }
        assert_eq!(sector_of(-PI), 0);
        assert_eq!(sector_of(PI / 2.0 + 0.01), 27);
        assert_eq!(sector_of(-PI / 2.0 + 0.01), 9);
    }

    #[test]
    fn frame_ranks_and_units() {
        let t = straight();
        let mut a = car(&t, 100.0, 0.0, 0.0);
        a.v_long = 13.89;
        let b = car(&t, 120.0, 0.0, 0.0);
        let cars = [a, b];
        let world = WorldSnapshot {
            track: &t,
            cars: &cars,
            race_coords: &[100.0, 120.0],
            lap_times: &[0.0, 0.0],
        };
        let f = build_sensor_frame(&world, 0, &default_beam_angles());
        assert_eq!(f.race_pos, 2);
        assert!((f.speed_x - 50.004).abs() < 1e-9);
        let g = build_sensor_frame(&world, 1, &default_beam_angles());
        assert_eq!(g.race_pos, 1);
        assert_eq!(g.speed_x, 0.0);
        assert_eq!(g.angle, 0.0);
    }

    #[test]
    fn noise_disabled_is_identity_and_support_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = SensorFrame::default();
        assert_eq!(apply_observation_noise(&f, false, &mut rng), f);
        for _ in 0..100 {
            let n = apply_observation_noise(&f, true, &mut rng);
            assert!(n.track.iter().chain(&n.opponents).all(|&d| (0.0..=MAX_RANGE).contains(&d)));
        }
    }

    #[test]
    fn normalization_endpoints_and_lengths() {
        assert_eq!(normalize_value(-100.0, -100.0, 300.0), -1.0);
        assert_eq!(normalize_value(300.0, -100.0, 300.0), 1.0);
        assert!((normalize_value(50.0, -100.0, 300.0) + 0.25).abs() < 1e-12);
        let f = SensorFrame::default();
        let mut spec = ObservationSpec::default();
        assert_eq!(normalize_observation(&f, &spec).len(), 24);
        spec.mode = ObservationMode::Traffic;
        assert_eq!(normalize_observation(&f, &spec).len(), 60);
        assert_eq!("vision".parse::<ObservationMode>(), Err(ObservationError::UnknownMode("vision".into())));
    }
}
