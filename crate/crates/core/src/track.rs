//! Track geometry and the Frenet (arc length, lateral offset) frame.
//!
//! A track is a chain of straight and circular-arc centerline segments that
//! starts at the world origin heading along +x. Lateral offsets are positive
//! to the left of the direction of travel, and `track_pos` normalizes the
//! offset by the local half-width so that the edges sit at +1 (left) and -1
//! (right).
//!
//! # Track documents
//!
//! Tracks are described in TOML:
//!
//! ```toml
//! name = "oval"
//! closed = true
//!
//! [[segment]]
//! kind = "straight"
//! length = 100.0      # meters
//! width = 10.0        # meters
//! friction = 1.0      # optional, defaults to 1.0
//!
//! [[segment]]
//! kind = "arc"
//! radius = 50.0       # meters
//! sweep = 90.0        # degrees, positive turns left
//! width = 10.0
//! ```
//!
//! Unknown keys are rejected, as are keys that do not belong to the
//! segment's kind (a `radius` on a straight, for instance).

use std::f64::consts::TAU;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Pose, Vec2};

/// Closure tolerance for closed tracks, meters and radians.
pub const CLOSURE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("malformed track document{}: {message}", fmt_segment(*.segment))]
    Parse {
        segment: Option<usize>,
        message: String,
    },
    #[error("invalid track{}: {reason}", fmt_segment(*.segment))]
    Invalid {
        segment: Option<usize>,
        reason: String,
    },
    #[error("arc length {s} is outside the open track [0, {total}]")]
    OutOfRange { s: f64, total: f64 },
    #[error("failed to read track document: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown built-in track `{0}`")]
    UnknownBuiltin(String),
}

fn fmt_segment(segment: Option<usize>) -> String {
    match segment {
        Some(i) => format!(" (segment {i})"),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SegmentShape {
    Straight { length: f64 },
    /// `sweep` is signed in radians; positive sweeps turn left.
    Arc { radius: f64, sweep: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSegment {
    pub shape: SegmentShape,
    pub width: f64,
    pub friction: f64,
}

impl TrackSegment {
    pub fn straight(length: f64, width: f64) -> Self {
        Self {
            shape: SegmentShape::Straight { length },
            width,
            friction: 1.0,
        }
    }

    pub fn arc(radius: f64, sweep: f64, width: f64) -> Self {
        Self {
            shape: SegmentShape::Arc { radius, sweep },
            width,
            friction: 1.0,
        }
    }

    pub fn with_friction(mut self, friction: f64) -> Self {
        self.friction = friction;
        self
    }

    /// Centerline length of the segment.
    pub fn length(&self) -> f64 {
        match self.shape {
            SegmentShape::Straight { length } => length,
            SegmentShape::Arc { radius, sweep } => radius * sweep.abs(),
        }
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.width
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(format!("width must be positive, got {}", self.width));
        }
        if !(self.friction > 0.0 && self.friction <= 2.0) {
            return Err(format!("friction must lie in (0, 2], got {}", self.friction));
        }
        match self.shape {
            SegmentShape::Straight { length } => {
                if !(length.is_finite() && length > 0.0) {
                    return Err(format!("straight length must be positive, got {length}"));
                }
            }
            SegmentShape::Arc { radius, sweep } => {
                if !(radius.is_finite() && radius > self.half_width()) {
                    return Err(format!(
                        "arc radius {radius} must exceed the half-width {}",
                        self.half_width()
                    ));
                }
                if !(sweep.is_finite() && sweep.abs() > 0.0 && sweep.abs() < TAU) {
                    return Err(format!("arc sweep must lie in (0, 2pi) in magnitude, got {sweep}"));
                }
            }
        }
        Ok(())
    }
}

/// Track-relative coordinates of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrenetPose {
    /// Arc length along the centerline, in [0, total_length).
    pub s: f64,
    /// Signed offset from the centerline, positive to the left.
    pub lateral: f64,
    /// `lateral / (width / 2)`; magnitude exceeds 1 off the track.
    pub track_pos: f64,
    /// Vehicle heading minus centerline tangent, wrapped to [-pi, pi].
    pub angle: f64,
}

/// A segment placed in the world, with its start pose and starting arc length.
#[derive(Debug, Clone, Copy)]
struct Placed {
    segment: TrackSegment,
    start: Pose,
    s0: f64,
    length: f64,
}

/// Closest-point result on a single segment.
#[derive(Debug, Clone, Copy)]
struct LocalProjection {
    u: f64,
    lateral: f64,
    tangent: f64,
    dist_sq: f64,
}

impl Placed {
    fn center_and_sign(&self, radius: f64, sweep: f64) -> (Vec2, f64) {
        let sign = sweep.signum();
        let c = self.start.position + Vec2::from_heading(self.start.heading).perp() * (sign * radius);
        (c, sign)
    }

    /// Point and tangent heading at local arc length `u` and lateral offset.
    fn point_at(&self, u: f64, lateral: f64) -> (Vec2, f64) {
        match self.segment.shape {
            SegmentShape::Straight { .. } => {
                let dir = Vec2::from_heading(self.start.heading);
                (self.start.position + dir * u + dir.perp() * lateral, self.start.heading)
            }
            SegmentShape::Arc { radius, sweep } => {
                let (c, sign) = self.center_and_sign(radius, sweep);
                let h = self.start.heading + sign * u / radius;
                let radial = Vec2::new(h.sin(), -h.cos());
                (c + radial * (sign * radius - lateral), h)
            }
        }
    }

    fn end_pose(&self) -> Pose {
        let (p, h) = self.point_at(self.length, 0.0);
        Pose {
            position: p,
            heading: h,
        }
    }

    fn project(&self, q: Vec2) -> LocalProjection {
        match self.segment.shape {
            SegmentShape::Straight { length } => {
                let dir = Vec2::from_heading(self.start.heading);
                let rel = q - self.start.position;
                let along = rel.dot(dir);
                let u = along.clamp(0.0, length);
                let lateral = rel.dot(dir.perp());
                let foot = self.start.position + dir * u;
                LocalProjection {
                    u,
                    lateral,
                    tangent: self.start.heading,
                    dist_sq: (q - foot).norm_sq(),
                }
            }
            SegmentShape::Arc { radius, sweep } => {
                let (c, sign) = self.center_and_sign(radius, sweep);
                let v = q - c;
                let r = v.norm();
                if r == 0.0 {
                    // The arc center is equidistant from the whole arc; pick its start.
                    return LocalProjection {
                        u: 0.0,
                        lateral: sign * radius,
                        tangent: self.start.heading,
                        dist_sq: radius * radius,
                    };
                }
                let h = (sign * v.x).atan2(-sign * v.y);
                let delta = (sign * (h - self.start.heading)).rem_euclid(TAU);
                let span = sweep.abs();
                if delta <= span {
                    LocalProjection {
                        u: radius * delta,
                        lateral: sign * (radius - r),
                        tangent: h,
                        dist_sq: (r - radius) * (r - radius),
                    }
                } else {
                    let u = if delta - span < TAU - delta { self.length } else { 0.0 };
                    let (foot, tangent) = self.point_at(u, 0.0);
                    let lateral = (q - foot).dot(Vec2::from_heading(tangent).perp());
                    LocalProjection {
                        u,
                        lateral,
                        tangent,
                        dist_sq: (q - foot).norm_sq(),
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Track {
    name: String,
    closed: bool,
    placed: Vec<Placed>,
    total_length: f64,
}

impl Track {
    /// Build and validate a track from its segments.
    pub fn new(
        name: impl Into<String>,
        segments: Vec<TrackSegment>,
        closed: bool,
    ) -> Result<Self, TrackError> {
        if segments.is_empty() {
            return Err(TrackError::Invalid {
                segment: None,
                reason: "a track needs at least one segment".into(),
            });
        }
        let mut placed = Vec::with_capacity(segments.len());
        let mut start = Pose::new(0.0, 0.0, 0.0);
        let mut s0 = 0.0;
        for (i, segment) in segments.into_iter().enumerate() {
            segment.validate().map_err(|reason| TrackError::Invalid {
                segment: Some(i),
                reason,
            })?;
            let p = Placed {
                segment,
                start,
                s0,
                length: segment.length(),
            };
            start = p.end_pose();
            s0 += p.length;
            placed.push(p);
        }
        if closed {
            let gap = start.position.norm();
            let turn = wrap_angle(start.heading).abs();
            if gap > CLOSURE_TOLERANCE || turn > CLOSURE_TOLERANCE {
                return Err(TrackError::Invalid {
                    segment: Some(placed.len() - 1),
                    reason: format!(
                        "closed track does not close: end is {gap:.3e} m and {turn:.3e} rad from the start"
                    ),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            closed,
            placed,
            total_length: s0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn segments(&self) -> impl Iterator<Item = &TrackSegment> {
        self.placed.iter().map(|p| &p.segment)
    }

    pub fn segment_count(&self) -> usize {
        self.placed.len()
    }

    /// Normalize an arc length: wraps on closed tracks, range-checks open ones.
    pub fn wrap_s(&self, s: f64) -> Result<f64, TrackError> {
        if self.closed {
            let w = s.rem_euclid(self.total_length);
            // rem_euclid can round up to the modulus for tiny negative inputs.
            Ok(if w >= self.total_length { 0.0 } else { w })
        } else if (0.0..=self.total_length).contains(&s) {
            Ok(s)
        } else {
            Err(TrackError::OutOfRange {
                s,
                total: self.total_length,
            })
        }
    }

    fn segment_index_at(&self, s: f64) -> usize {
        match self.placed.binary_search_by(|p| p.s0.partial_cmp(&s).expect("finite arc length")) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
    }

    /// Segment containing arc length `s` (wrapped on closed tracks, clamped on open ones).
    pub fn segment_at(&self, s: f64) -> &TrackSegment {
        let s = self
            .wrap_s(s)
            .unwrap_or_else(|_| s.clamp(0.0, self.total_length));
        &self.placed[self.segment_index_at(s)].segment
    }

    pub fn width_at(&self, s: f64) -> f64 {
        self.segment_at(s).width
    }

    pub fn friction_at(&self, s: f64) -> f64 {
        self.segment_at(s).friction
    }

    /// Nearest-centerline projection of a world pose.
    ///
    /// Ties between segments go to the smallest arc length.
    pub fn project_to_frenet(&self, position: Vec2, heading: f64) -> FrenetPose {
        let mut best: Option<(usize, LocalProjection)> = None;
        for (i, p) in self.placed.iter().enumerate() {
            let proj = p.project(position);
            let better = match &best {
                None => true,
                Some((_, b)) => proj.dist_sq < b.dist_sq - 1e-12,
            };
            if better {
                best = Some((i, proj));
            }
        }
        let (i, proj) = best.expect("track has at least one segment");
        let seg = &self.placed[i];
        let mut s = seg.s0 + proj.u;
        if self.closed && s >= self.total_length {
            s -= self.total_length;
        }
        FrenetPose {
            s,
            lateral: proj.lateral,
            track_pos: proj.lateral / seg.segment.half_width(),
            angle: wrap_angle(heading - proj.tangent),
        }
    }

    /// World position and centerline tangent heading at (s, lateral).
    pub fn frenet_to_world(&self, s: f64, lateral: f64) -> Result<(Vec2, f64), TrackError> {
        let s = self.wrap_s(s)?;
        let p = &self.placed[self.segment_index_at(s)];
        let u = (s - p.s0).clamp(0.0, p.length);
        Ok(p.point_at(u, lateral))
    }

    /// World pose of a car placed at (s, track_pos) and aligned with the centerline.
    pub fn spawn_pose(&self, s: f64, track_pos: f64) -> Result<Pose, TrackError> {
        let half = 0.5 * self.width_at(s);
        let (p, h) = self.frenet_to_world(s, track_pos * half)?;
        Ok(Pose {
            position: p,
            heading: h,
        })
    }

    /// Signed arc-length difference `to - from`, taking the short way around closed tracks.
    pub fn arc_delta(&self, from: f64, to: f64) -> f64 {
        let d = to - from;
        if !self.closed {
            return d;
        }
        let half = 0.5 * self.total_length;
        if d > half {
            d - self.total_length
        } else if d < -half {
            d + self.total_length
        } else {
            d
        }
    }

    /// Track edge pieces at lateral offset +half_width and -half_width, for ray casting.
    pub(crate) fn edge_pieces(&self) -> impl Iterator<Item = EdgePiece> + '_ {
        self.placed.iter().flat_map(|p| {
            let half = p.segment.half_width();
            [half, -half].into_iter().map(move |lateral| match p.segment.shape {
                SegmentShape::Straight { length } => {
                    let a = p.point_at(0.0, lateral).0;
                    let b = p.point_at(length, lateral).0;
                    EdgePiece::Line { a, b }
                }
                SegmentShape::Arc { radius, sweep } => {
                    let (center, sign) = p.center_and_sign(radius, sweep);
                    EdgePiece::Arc {
                        center,
                        radius: (radius - sign * lateral).abs(),
                        sign,
                        start_heading: p.start.heading,
                        span: sweep.abs(),
                    }
                }
            })
        })
    }
}

/// One side of one segment's drivable boundary.
#[derive(Debug, Clone, Copy)]
pub(crate) enum EdgePiece {
    Line {
        a: Vec2,
        b: Vec2,
    },
    Arc {
        center: Vec2,
        radius: f64,
        sign: f64,
        start_heading: f64,
        span: f64,
    },
}

/// Distance raced expressed as laps; not capped at one.
pub fn lap_fraction(track: &Track, distance_raced: f64) -> f64 {
    distance_raced / track.total_length()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackDocument {
    name: String,
    #[serde(default = "default_closed")]
    closed: bool,
    #[serde(default)]
    segment: Vec<toml::Value>,
}

fn default_closed() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    kind: String,
    length: Option<f64>,
    radius: Option<f64>,
    sweep: Option<f64>,
    width: f64,
    #[serde(default = "default_friction")]
    friction: f64,
}

fn default_friction() -> f64 {
    1.0
}

impl SegmentRecord {
    fn into_segment(self) -> Result<TrackSegment, String> {
        let shape = match self.kind.as_str() {
            "straight" => {
                if self.radius.is_some() || self.sweep.is_some() {
                    return Err("straight segments take no radius or sweep".into());
                }
                SegmentShape::Straight {
                    length: self.length.ok_or("straight segment is missing `length`")?,
                }
            }
            "arc" => {
                if self.length.is_some() {
                    return Err("arc segments take radius and sweep, not length".into());
                }
                SegmentShape::Arc {
                    radius: self.radius.ok_or("arc segment is missing `radius`")?,
                    sweep: self.sweep.ok_or("arc segment is missing `sweep`")?.to_radians(),
                }
            }
            other => return Err(format!("unknown segment kind `{other}`")),
        };
        Ok(TrackSegment {
            shape,
            width: self.width,
            friction: self.friction,
        })
    }
}

/// Parse and validate a track document.
pub fn parse_track(text: &str) -> Result<Track, TrackError> {
    let doc: TrackDocument = toml::from_str(text).map_err(|e| TrackError::Parse {
        segment: None,
        message: e.message().to_string(),
    })?;
    let mut segments = Vec::with_capacity(doc.segment.len());
    for (i, raw) in doc.segment.into_iter().enumerate() {
        let record: SegmentRecord = raw.try_into().map_err(|e: toml::de::Error| TrackError::Parse {
            segment: Some(i),
            message: e.message().to_string(),
        })?;
        let seg = record.into_segment().map_err(|message| TrackError::Parse {
            segment: Some(i),
            message,
        })?;
        segments.push(seg);
    }
    Track::new(doc.name, segments, doc.closed)
}

/// Read a track document from any byte stream.
pub fn load_track(mut source: impl Read) -> Result<Track, TrackError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    parse_track(&text)
}

/// Names of the tracks shipped with the crate.
pub const BUILTIN_TRACKS: [&str; 4] = ["oval", "serpent", "hairpin", "narrow"];

pub fn builtin_track_source(name: &str) -> Option<&'static str> {
    match name {
        "oval" => Some(include_str!("../assets/tracks/oval.toml")),
        "serpent" => Some(include_str!("../assets/tracks/serpent.toml")),
        "hairpin" => Some(include_str!("../assets/tracks/hairpin.toml")),
        "narrow" => Some(include_str!("../assets/tracks/narrow.toml")),
        _ => None,
    }
}

pub fn builtin_track(name: &str) -> Result<Track, TrackError> {
    let src = builtin_track_source(name).ok_or_else(|| TrackError::UnknownBuiltin(name.to_string()))?;
    parse_track(src)
}
