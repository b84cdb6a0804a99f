//! The simulation document: server, learning-agent and traffic sections, an
//! optional parking layout and curriculum, and the communication links.
//! Also per-episode setup sampling and curriculum stage application.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{PidSettings, TsController, DEFAULT_ACCEL_SCALE, DEFAULT_PID_LATENCY, DEFAULT_STEER_SCALE};
use crate::dynamics::{builtin_car, builtin_car_source, parse_car, CarModel};
use crate::reward::{DoneCondition, DoneSpec, RewardKind, RewardSpec, RewardTerm};
use crate::sensing::{default_bounds, ObservationMode, ObservationSpec, BOUNDED_VARIABLES};
use crate::track::{builtin_track, builtin_track_source, parse_track, Track};
use crate::traffic::{alternating_parking_slots, Parking, TrafficBehavior, TrafficConfig};

pub const DEFAULT_BASE_PORT: u16 = 3001;
/// Gap between consecutive learning-agent spawn points, meters.
pub const LEARNER_SPACING: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Dotted key path of the offending entry, when there is one.
    pub fn key_path(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { path, .. } => Some(path),
            ConfigError::Io { .. } => None,
        }
    }
}

type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    /// First port handed out; sessions take consecutive ports from here.
    pub torcs_server_port: u16,
    pub max_cars: usize,
    pub min_traffic_cars: usize,
    pub track_names: Vec<String>,
    pub track_limits: (f64, f64),
    pub distance_to_start: f64,
    pub traffic_car: String,
    pub learning_car: Vec<String>,
    pub randomize_env: bool,
    pub add_noise_to_actions: bool,
    pub action_noise_std: f64,
    pub noisy_observations: bool,
    /// Accepted and ignored: the simulator is headless.
    pub visualise: bool,
    /// Accepted and ignored: the simulator is headless.
    pub no_of_visualisations: u32,
    pub max_steps: u64,
    /// Extra directory searched for `<track>.toml` before the built-in tracks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub torcs_server_config_dir: Option<PathBuf>,
    /// Extra directory searched for `<car>.toml` before the built-in cars.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scr_server_config_dir: Option<PathBuf>,
    /// Wall-clock seconds the network server waits for an action before
    /// repeating the previous one.
    pub action_timeout: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            torcs_server_port: DEFAULT_BASE_PORT,
            max_cars: 1,
            min_traffic_cars: 0,
            track_names: vec!["oval".into()],
            track_limits: (-1.0, 1.0),
            distance_to_start: 0.0,
            traffic_car: "sedan".into(),
            learning_car: vec!["stock".into()],
            randomize_env: false,
            add_noise_to_actions: false,
            action_noise_std: 0.1,
            noisy_observations: false,
            visualise: false,
            no_of_visualisations: 1,
            max_steps: 10_000,
            torcs_server_config_dir: None,
            scr_server_config_dir: None,
            action_timeout: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationsConfig {
    pub mode: ObservationMode,
    pub multi_flag: bool,
    pub buff_size: usize,
    pub normalize: bool,
}

impl Default for ObservationsConfig {
    fn default() -> Self {
        Self {
            mode: ObservationMode::Basic,
            multi_flag: false,
            buff_size: 1,
            normalize: true,
        }
    }
}

/// A reward entry is either a bare scale or a table with `scale` plus
/// component parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewardWeight {
    Scale(f64),
    Detailed {
        scale: f64,
        #[serde(flatten)]
        params: BTreeMap<String, f64>,
    },
}

impl RewardWeight {
    pub fn scale(&self) -> f64 {
        match self {
            RewardWeight::Scale(s) | RewardWeight::Detailed { scale: s, .. } => *s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub vision: bool,
    pub throttle: bool,
    pub gear_change: bool,
    /// Per-agent step cap; -1 means only the server cap applies.
    pub client_max_steps: i64,
    /// km/h
    pub target_speed: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_dim: Option<usize>,
    pub normalize_actions: bool,
    /// true selects track-position/speed desires, false primitive commands.
    pub pid_assist: bool,
    pub pid_settings: PidSettings,
    pub accel_scale: f64,
    pub steer_scale: f64,
    pub pid_latency: u32,
    pub observations: ObservationsConfig,
    pub obs_min: BTreeMap<String, f64>,
    pub obs_max: BTreeMap<String, f64>,
    pub rewards: BTreeMap<String, RewardWeight>,
    pub dones: Vec<String>,
    /// Overrides the default spawn distance for this agent, meters from the start line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spawn_distance: Option<f64>,
    pub spawn_track_pos: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            vision: false,
            throttle: true,
            gear_change: false,
            client_max_steps: -1,
            target_speed: 50.0,
            state_dim: None,
            normalize_actions: true,
            pid_assist: true,
            pid_settings: PidSettings::default(),
            accel_scale: DEFAULT_ACCEL_SCALE,
            steer_scale: DEFAULT_STEER_SCALE,
            pid_latency: DEFAULT_PID_LATENCY,
            observations: ObservationsConfig::default(),
            obs_min: BTreeMap::new(),
            obs_max: BTreeMap::new(),
            rewards: BTreeMap::from([("progress".to_string(), RewardWeight::Scale(1.0))]),
            dones: vec!["out_of_track".into(), "turn_backward".into(), "one_lap".into()],
            spawn_distance: None,
            spawn_track_pos: 0.0,
        }
    }
}

impl AgentConfig {
    pub fn reward_spec(&self) -> Result<RewardSpec, String> {
        let mut components = Vec::with_capacity(self.rewards.len());
        for (name, w) in &self.rewards {
            let kind: RewardKind = name.parse().map_err(|e: crate::reward::RewardSpecError| e.to_string())?;
            let params = match w {
                RewardWeight::Scale(_) => BTreeMap::new(),
                RewardWeight::Detailed { params, .. } => params.clone(),
            };
            components.push(RewardTerm {
                kind,
                weight: w.scale(),
                params,
            });
        }
        let spec = RewardSpec { components };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn done_spec(&self, server: &ServerConfig) -> Result<DoneSpec, String> {
        let conditions = self
            .dones
            .iter()
            .map(|d| d.parse::<DoneCondition>().map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        let max_steps = if self.client_max_steps > 0 {
            (self.client_max_steps as u64).min(server.max_steps)
        } else {
            server.max_steps
        };
        let spec = DoneSpec {
            conditions,
            max_steps,
            track_limits: server.track_limits,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn observation_spec(&self, noisy: bool) -> Result<ObservationSpec, String> {
        let defaults = default_bounds();
        let mut bounds = BTreeMap::new();
        for name in self.obs_min.keys().chain(self.obs_max.keys()) {
            if !BOUNDED_VARIABLES.contains(&name.as_str()) {
                return Err(format!("unknown observation variable `{name}`"));
            }
        }
        for (name, (lo, hi)) in defaults {
            let lo = self.obs_min.get(&name).copied().unwrap_or(lo);
            let hi = self.obs_max.get(&name).copied().unwrap_or(hi);
            bounds.insert(name, (lo, hi));
        }
        let spec = ObservationSpec {
            mode: self.observations.mode,
            normalize: self.observations.normalize,
            bounds,
            noisy,
            buff_size: self.observations.buff_size,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn controller(&self) -> TsController {
        TsController::new(
            self.pid_settings.steer,
            self.pid_settings.accel,
            self.pid_latency,
            self.accel_scale,
            self.steer_scale,
        )
    }

    /// Values sent per step when a peer observes this agent's actions.
    pub fn action_width(&self) -> usize {
        if self.pid_assist {
            2
        } else {
            3
        }
    }
}

/// Variables a learning agent may share with its peers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum CommVar {
    PeerActions,
    Angle,
    TrackPos,
    SpeedX,
    SpeedY,
    DistRaced,
    RacePos,
}

/// Agent `id` observes `vars` of every agent in `comms` over the last
/// `buff_size` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommLink {
    pub id: usize,
    pub vars: Vec<CommVar>,
    pub comms: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buff_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommsDocument {
    #[serde(default)]
    agent: Vec<CommLink>,
}

fn default_jitter_along() -> f64 {
    5.0
}

fn default_jitter_across() -> f64 {
    0.25
}

fn default_lead() -> f64 {
    40.0
}

/// Where parking-type traffic (DriveAndParkAgent, ParkedAgent) is placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParkingLayout {
    /// Slots on alternating sides, the first at `first_distance` from the
    /// start line. Drive-and-park cars start `lead` meters short of their slot.
    Alternating {
        first_distance: f64,
        spacing: f64,
        side_track_pos: f64,
        #[serde(default = "default_jitter_along")]
        jitter_along: f64,
        #[serde(default = "default_jitter_across")]
        jitter_across: f64,
        #[serde(default = "default_lead")]
        lead: f64,
    },
    /// Two cars parked abreast on opposite sides, `parking_distance` meters
    /// ahead of the learners' start, leaving a gap of `gap_width` meters.
    Bottleneck {
        parking_distance: (f64, f64),
        gap_width: (f64, f64),
    },
}

/// Overrides applied while the episode number is at most `until_episode`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    pub until_episode: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_learning_agents: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_car: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub track_names: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_traffic_cars: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_cars: Option<usize>,
    /// Behaviors given, in order, to the leading traffic records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traffic_behaviors: Option<Vec<TrafficBehavior>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_speed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub add_noise_to_actions: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_noise_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy_observations: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_to_start: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_distance: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_trackpos: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parking_distance: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_width: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub server: ServerConfig,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub traffic: Vec<TrafficConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub communications: Vec<CommLink>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parking_layout: Option<ParkingLayout>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curriculum: Vec<CurriculumStage>,
    /// Directory relative asset paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn deserialize_document<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::invalid("(document)", e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.message().to_string();
        ConfigError::invalid(if path == "." { "(document)".to_string() } else { path }, message)
    })
}

/// Parse and validate a main configuration document.
pub fn parse_config(text: &str) -> Result<SimulationConfig> {
    let cfg: SimulationConfig = deserialize_document(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read a configuration file; asset directories resolve relative to it and
/// every track and car name must load.
pub fn load_config(path: &Path) -> Result<SimulationConfig> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg: SimulationConfig = deserialize_document(&text)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf);
    cfg.validate()?;
    cfg.check_assets()?;
    Ok(cfg)
}

/// Parse a standalone communications document (`[[agent]]` records).
pub fn parse_communications(text: &str) -> Result<Vec<CommLink>> {
    let doc: CommsDocument = deserialize_document(text)?;
    Ok(doc.agent)
}

pub fn load_communications(path: &Path) -> Result<Vec<CommLink>> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_communications(&text)
}

fn check_range(path: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && lo <= hi {
        Ok(())
    } else {
        Err(ConfigError::invalid(path, format!("expected a range (min, max) with min <= max, got ({lo}, {hi})")))
    }
}

impl SimulationConfig {
    pub fn n_learning(&self) -> usize {
        self.agents.len()
    }

    /// Upper end of the traffic-count range.
    pub fn max_traffic(&self) -> usize {
        self.server.max_cars.saturating_sub(self.n_learning())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.server;
        let n_l = self.n_learning();
        if n_l == 0 {
            return Err(ConfigError::invalid("agents", "at least one learning agent is required"));
        }
        if s.max_cars == 0 {
            return Err(ConfigError::invalid("server.max_cars", "must be positive"));
        }
        if n_l + s.min_traffic_cars > s.max_cars {
            return Err(ConfigError::invalid(
                "server.min_traffic_cars",
                format!(
                    "number of learning agents + min_traffic_cars must not exceed max_cars ({n_l} + {} > {})",
                    s.min_traffic_cars, s.max_cars
                ),
            ));
        }
        if !(0.0..=1.0).contains(&s.action_noise_std) {
            return Err(ConfigError::invalid(
                "server.action_noise_std",
                format!("must lie in [0, 1], got {}", s.action_noise_std),
            ));
        }
        if s.track_names.is_empty() {
            return Err(ConfigError::invalid("server.track_names", "must name at least one track"));
        }
        if s.learning_car.is_empty() {
            return Err(ConfigError::invalid("server.learning_car", "must name at least one car"));
        }
        check_range("server.track_limits", s.track_limits)?;
        if s.max_steps == 0 {
            return Err(ConfigError::invalid("server.max_steps", "must be positive"));
        }
        if !(s.action_timeout > 0.0) {
            return Err(ConfigError::invalid("server.action_timeout", "must be positive"));
        }
        if !s.distance_to_start.is_finite() {
            return Err(ConfigError::invalid("server.distance_to_start", "must be finite"));
        }
        if usize::from(s.torcs_server_port) + s.max_cars > 65536 {
            return Err(ConfigError::invalid("server.torcs_server_port", "port range exceeds 65535"));
        }

        for (i, a) in self.agents.iter().enumerate() {
            self.validate_agent(i, a)?;
        }

        if self.traffic.len() < self.max_traffic() {
            return Err(ConfigError::invalid(
                "traffic",
                format!(
                    "up to {} traffic cars can be spawned but only {} records are given",
                    self.max_traffic(),
                    self.traffic.len()
                ),
            ));
        }
        for (k, t) in self.traffic.iter().enumerate() {
            let mut t = t.clone();
            if self.parking_layout.is_some() && is_parking(t.behavior) && t.parking.is_none() {
                t.parking = Some(Parking {
                    distance: 0.0,
                    track_pos: 0.0,
                });
            }
            t.validate().map_err(|m| ConfigError::invalid(format!("traffic[{k}]"), m))?;
        }

        let mut seen = Vec::new();
        for (k, link) in self.communications.iter().enumerate() {
            let path = format!("communications[{k}]");
            if link.id >= n_l {
                return Err(ConfigError::invalid(format!("{path}.id"), format!("no learning agent {}", link.id)));
            }
            if seen.contains(&link.id) {
                return Err(ConfigError::invalid(format!("{path}.id"), format!("agent {} listed twice", link.id)));
            }
            seen.push(link.id);
            if let Some(&j) = link.comms.iter().find(|&&j| j >= n_l || j == link.id) {
                return Err(ConfigError::invalid(format!("{path}.comms"), format!("invalid source agent {j}")));
            }
            if link.buff_size == Some(0) {
                return Err(ConfigError::invalid(format!("{path}.buff_size"), "must be at least 1"));
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            if let Some(dim) = a.state_dim {
                let spec = a
                    .observation_spec(false)
                    .map_err(|m| ConfigError::invalid(format!("agents[{i}].observations"), m))?;
                let expected = spec.vector_len(self.comms_len(i));
                if dim != expected {
                    return Err(ConfigError::invalid(
                        format!("agents[{i}].state_dim"),
                        format!("mode {:?} produces {expected} values, not {dim}", a.observations.mode),
                    ));
                }
            }
        }

        if let Some(layout) = &self.parking_layout {
            match layout {
                ParkingLayout::Alternating {
                    spacing,
                    side_track_pos,
                    jitter_along,
                    jitter_across,
                    lead,
                    ..
                } => {
                    if !(*spacing > 0.0) || !(side_track_pos.abs() <= 1.0) || *jitter_along < 0.0 || *jitter_across < 0.0 || *lead < 0.0 {
                        return Err(ConfigError::invalid(
                            "parking_layout",
                            "spacing must be positive, side_track_pos within [-1, 1], jitters and lead non-negative",
                        ));
                    }
                }
                ParkingLayout::Bottleneck {
                    parking_distance,
                    gap_width,
                } => {
                    check_range("parking_layout.parking_distance", *parking_distance)?;
                    check_range("parking_layout.gap_width", *gap_width)?;
                    if gap_width.0 < 0.0 {
                        return Err(ConfigError::invalid("parking_layout.gap_width", "must be non-negative"));
                    }
                }
            }
        }

        let mut last = None;
        for (k, stage) in self.curriculum.iter().enumerate() {
            if last.is_some_and(|l| stage.until_episode <= l) {
                return Err(ConfigError::invalid(
                    format!("curriculum[{k}].until_episode"),
                    "stage boundaries must be strictly increasing",
                ));
            }
            last = Some(stage.until_episode);
        }
        Ok(())
    }

    fn validate_agent(&self, i: usize, a: &AgentConfig) -> Result<()> {
        let path = |key: &str| format!("agents[{i}].{key}");
        if a.vision {
            return Err(ConfigError::invalid(path("vision"), "visual observations are not supported"));
        }
        if !(a.target_speed >= 0.0 && a.target_speed.is_finite()) {
            return Err(ConfigError::invalid(path("target_speed"), "must be non-negative"));
        }
        if a.client_max_steps == 0 || a.client_max_steps < -1 {
            return Err(ConfigError::invalid(path("client_max_steps"), "must be positive or -1"));
        }
        if a.pid_latency < 1 {
            return Err(ConfigError::invalid(path("pid_latency"), "must be at least 1"));
        }
        if !(a.accel_scale > 0.0) {
            return Err(ConfigError::invalid(path("accel_scale"), "must be positive"));
        }
        if !(a.steer_scale > 0.0) {
            return Err(ConfigError::invalid(path("steer_scale"), "must be positive"));
        }
        a.pid_settings
            .accel
            .validate()
            .map_err(|m| ConfigError::invalid(path("pid_settings.accel_pid"), m))?;
        a.pid_settings
            .steer
            .validate()
            .map_err(|m| ConfigError::invalid(path("pid_settings.steer_pid"), m))?;
        a.reward_spec().map_err(|m| ConfigError::invalid(path("rewards"), m))?;
        a.done_spec(&self.server).map_err(|m| ConfigError::invalid(path("dones"), m))?;
        a.observation_spec(false)
            .map_err(|m| ConfigError::invalid(path("observations"), m))?;
        if !(a.spawn_track_pos.abs() <= 1.0) {
            return Err(ConfigError::invalid(path("spawn_track_pos"), "must lie in [-1, 1]"));
        }
        Ok(())
    }

    fn resolve_dir(&self, dir: &Option<PathBuf>) -> Option<PathBuf> {
        let dir = dir.as_ref()?;
        Some(match &self.base_dir {
            Some(base) if dir.is_relative() => base.join(dir),
            _ => dir.clone(),
        })
    }

    fn read_asset(&self, dir: &Option<PathBuf>, name: &str) -> Result<Option<String>> {
        let Some(dir) = self.resolve_dir(dir) else {
            return Ok(None);
        };
        let path = dir.join(format!("{name}.toml"));
        if !path.is_file() {
            return Ok(None);
        }
        fs::read_to_string(&path)
            .map(Some)
            .map_err(|source| ConfigError::Io { path, source })
    }

    /// A track from the configured track directory, else a built-in one.
    pub fn load_track(&self, name: &str) -> Result<Track> {
        let text = self.read_asset(&self.server.torcs_server_config_dir, name)?;
        let track = match text {
            Some(t) => parse_track(&t),
            None if builtin_track_source(name).is_some() => builtin_track(name),
            None => return Err(ConfigError::invalid("server.track_names", format!("unknown track `{name}`"))),
        };
        track.map_err(|e| ConfigError::invalid("server.track_names", format!("track `{name}`: {e}")))
    }

    /// A car from the configured car directory, else a built-in one.
    pub fn load_car(&self, name: &str) -> Result<CarModel> {
        let text = self.read_asset(&self.server.scr_server_config_dir, name)?;
        let car = match text {
            Some(t) => parse_car(&t),
            None if builtin_car_source(name).is_some() => builtin_car(name),
            None => return Err(ConfigError::invalid("server.learning_car", format!("unknown car `{name}`"))),
        };
        car.map_err(|e| ConfigError::invalid("server.learning_car", format!("car `{name}`: {e}")))
    }

    pub fn check_assets(&self) -> Result<()> {
        for t in &self.server.track_names {
            self.load_track(t)?;
        }
        for c in self.server.learning_car.iter().chain(std::iter::once(&self.server.traffic_car)) {
            self.load_car(c)?;
        }
        for stage in &self.curriculum {
            for t in stage.track_names.iter().flatten() {
                self.load_track(t)?;
            }
            for c in stage.learning_car.iter().flatten() {
                self.load_car(c)?;
            }
        }
        Ok(())
    }

    pub fn comm_link(&self, agent: usize) -> Option<&CommLink> {
        self.communications.iter().find(|l| l.id == agent)
    }

    pub fn comm_buff_size(&self, agent: usize) -> usize {
        self.comm_link(agent)
            .and_then(|l| l.buff_size)
            .unwrap_or(self.agents[agent].observations.buff_size)
    }

    /// Width of one step of shared variables from `source`.
    pub fn comm_var_width(&self, source: usize, var: CommVar) -> usize {
        match var {
            CommVar::PeerActions => self.agents[source].action_width(),
            _ => 1,
        }
    }

    /// Length of the peer block appended to `agent`'s frames.
    pub fn comms_len(&self, agent: usize) -> usize {
        let Some(link) = self.comm_link(agent) else {
            return 0;
        };
        let per_step: usize = link
            .comms
            .iter()
            .map(|&j| link.vars.iter().map(|&v| self.comm_var_width(j, v)).sum::<usize>())
            .sum();
        per_step * self.comm_buff_size(agent)
    }
}

/// Where one car starts: meters from the start line and lateral track_pos.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spawn {
    pub distance: f64,
    pub track_pos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSetup {
    pub config: TrafficConfig,
    pub spawn: Spawn,
    pub seed: u64,
}

/// Everything that varies between episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSetup {
    pub track: String,
    pub learner_cars: Vec<String>,
    pub learner_spawns: Vec<Spawn>,
    pub n_traffic: usize,
    pub traffic: Vec<TrafficSetup>,
    pub add_noise_to_actions: bool,
    pub action_noise_std: f64,
    pub noisy_observations: bool,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn midpoint((lo, hi): (f64, f64)) -> f64 {
    0.5 * (lo + hi)
}

fn is_parking(b: TrafficBehavior) -> bool {
    matches!(b, TrafficBehavior::DriveAndParkAgent | TrafficBehavior::ParkedAgent)
}

/// Draw one episode's setup. With `randomize_env` off the result is the
/// deterministic first-choice setup and `rng` is not consumed.
pub fn sample_episode_setup<R: Rng + ?Sized>(cfg: &SimulationConfig, rng: &mut R) -> Result<EpisodeSetup> {
    let s = &cfg.server;
    let random = s.randomize_env;
    let n_l = cfg.n_learning();

    let track_name = if random {
        s.track_names.choose(rng)
    } else {
        s.track_names.first()
    }
    .ok_or_else(|| ConfigError::invalid("server.track_names", "empty track list"))?
    .clone();

    let mut learner_cars = Vec::with_capacity(n_l);
    for _ in 0..n_l {
        let car = if random {
            s.learning_car.choose(rng)
        } else {
            s.learning_car.first()
        }
        .ok_or_else(|| ConfigError::invalid("server.learning_car", "empty car list"))?;
        learner_cars.push(car.clone());
    }

    let max_t = cfg.max_traffic();
    let n_traffic = if random {
        rng.random_range(s.min_traffic_cars..=max_t)
    } else {
        s.min_traffic_cars
    };

    let learner_spawns = cfg
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| Spawn {
            distance: a
                .spawn_distance
                .unwrap_or(s.distance_to_start - LEARNER_SPACING * i as f64),
            track_pos: a.spawn_track_pos,
        })
        .collect();

    let mut traffic = Vec::with_capacity(n_traffic);
    for (k, t) in cfg.traffic.iter().take(n_traffic).enumerate() {
        let (spawn, seed) = if random {
            let d = uniform(rng, t.initial_distance);
            let tp = uniform(rng, t.initial_track_pos);
            (Spawn { distance: d, track_pos: tp }, rng.random::<u64>())
        } else {
            (
                Spawn {
                    distance: midpoint(t.initial_distance),
                    track_pos: midpoint(t.initial_track_pos),
                },
                k as u64,
            )
        };
        traffic.push(TrafficSetup {
            config: t.clone(),
            spawn,
            seed,
        });
    }

    if let Some(layout) = &cfg.parking_layout {
        place_parked_traffic(cfg, layout, &track_name, &mut traffic, rng)?;
    }

    Ok(EpisodeSetup {
        track: track_name,
        learner_cars,
        learner_spawns,
        n_traffic,
        traffic,
        add_noise_to_actions: s.add_noise_to_actions,
        action_noise_std: s.action_noise_std,
        noisy_observations: s.noisy_observations,
    })
}

fn place_parked_traffic<R: Rng + ?Sized>(
    cfg: &SimulationConfig,
    layout: &ParkingLayout,
    track_name: &str,
    traffic: &mut [TrafficSetup],
    rng: &mut R,
) -> Result<()> {
    let random = cfg.server.randomize_env;
    let parkers: Vec<usize> = (0..traffic.len())
        .filter(|&k| is_parking(traffic[k].config.behavior))
        .collect();
    if parkers.is_empty() {
        return Ok(());
    }
    let track = cfg.load_track(track_name)?;
    match *layout {
        ParkingLayout::Alternating {
            first_distance,
            spacing,
            side_track_pos,
            jitter_along,
            jitter_across,
            lead,
        } => {
            let half_width = 0.5 * track.width_at(track.wrap_s(first_distance).unwrap_or(0.0));
            let (ja, jx) = if random { (jitter_along, jitter_across) } else { (0.0, 0.0) };
            let slots = alternating_parking_slots(parkers.len(), first_distance, spacing, side_track_pos, half_width, ja, jx, rng);
            for (&k, slot) in parkers.iter().zip(slots) {
                let t = &mut traffic[k];
                let back = if t.config.behavior == TrafficBehavior::DriveAndParkAgent { lead } else { 0.0 };
                t.config.parking = Some(slot);
                t.spawn = Spawn {
                    distance: slot.distance - back,
                    track_pos: slot.track_pos,
                };
            }
        }
        ParkingLayout::Bottleneck {
            parking_distance,
            gap_width,
        } => {
            let (d, gap) = if random {
                (uniform(rng, parking_distance), uniform(rng, gap_width))
            } else {
                (midpoint(parking_distance), midpoint(gap_width))
            };
            let distance = cfg.server.distance_to_start + d;
            let half_width = 0.5 * track.width_at(track.wrap_s(distance).unwrap_or(0.0));
            let car = cfg.load_car(&cfg.server.traffic_car)?;
            let offset = ((0.5 * gap + 0.5 * car.width) / half_width).min(1.0);
            for (&k, side) in parkers.iter().take(2).zip([1.0, -1.0]) {
                let slot = Parking {
                    distance,
                    track_pos: side * offset,
                };
                let t = &mut traffic[k];
                t.config.parking = Some(slot);
                t.spawn = Spawn {
                    distance,
                    track_pos: slot.track_pos,
                };
            }
        }
    }
    Ok(())
}

/// The stage in force for a 1-based episode number: the first stage whose
/// `until_episode` is not below it, or the last stage once all have passed.
pub fn active_stage(schedule: &[CurriculumStage], episode: u64) -> Option<&CurriculumStage> {
    schedule
        .iter()
        .find(|st| episode <= st.until_episode)
        .or_else(|| schedule.last())
}

/// The base configuration with the active stage's overrides applied.
pub fn apply_curriculum(schedule: &[CurriculumStage], episode: u64, base: &SimulationConfig) -> Result<SimulationConfig> {
    let mut cfg = base.clone();
    let Some(stage) = active_stage(schedule, episode) else {
        return Ok(cfg);
    };
    let path = |key: &str| format!("curriculum(until_episode = {}).{key}", stage.until_episode);
    if let Some(n) = stage.n_learning_agents {
        if n == 0 || n > base.agents.len() {
            return Err(ConfigError::invalid(
                path("n_learning_agents"),
                format!("must lie in [1, {}]", base.agents.len()),
            ));
        }
        cfg.agents.truncate(n);
        cfg.communications.retain(|l| l.id < n && l.comms.iter().all(|&j| j < n));
    }
    let s = &mut cfg.server;
    if let Some(v) = &stage.learning_car {
        s.learning_car = v.clone();
    }
    if let Some(v) = &stage.track_names {
        s.track_names = v.clone();
    }
    if let Some(v) = stage.min_traffic_cars {
        s.min_traffic_cars = v;
    }
    if let Some(v) = stage.max_cars {
        if v > base.server.max_cars {
            return Err(ConfigError::invalid(
                path("max_cars"),
                format!("cannot exceed the base max_cars {}", base.server.max_cars),
            ));
        }
        s.max_cars = v;
    }
    if let Some(v) = stage.add_noise_to_actions {
        s.add_noise_to_actions = v;
    }
    if let Some(v) = stage.action_noise_std {
        s.action_noise_std = v;
    }
    if let Some(v) = stage.noisy_observations {
        s.noisy_observations = v;
    }
    if let Some(v) = stage.distance_to_start {
        s.distance_to_start = v;
    }
    if let Some(v) = stage.target_speed {
        for a in &mut cfg.agents {
            a.target_speed = v;
        }
    }
    if let Some(behaviors) = &stage.traffic_behaviors {
        if behaviors.len() > cfg.traffic.len() {
            return Err(ConfigError::invalid(path("traffic_behaviors"), "more behaviors than traffic records"));
        }
        for (t, &b) in cfg.traffic.iter_mut().zip(behaviors) {
            t.behavior = b;
        }
    }
    for t in &mut cfg.traffic {
        if let Some(v) = stage.initial_distance {
            t.initial_distance = v;
        }
        if let Some(v) = stage.initial_trackpos {
            t.initial_track_pos = v;
        }
    }
    if stage.parking_distance.is_some() || stage.gap_width.is_some() {
        match &mut cfg.parking_layout {
            Some(ParkingLayout::Bottleneck {
                parking_distance,
                gap_width,
            }) => {
                if let Some(v) = stage.parking_distance {
                    *parking_distance = v;
                }
                if let Some(v) = stage.gap_width {
                    *gap_width = v;
                }
            }
            _ => {
                return Err(ConfigError::invalid(
                    path("gap_width"),
                    "parking_distance and gap_width need a bottleneck parking layout",
                ))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
