//! Batch runner, scripted drivers, metrics and plot tables.
//!
//! Every message between a driver and the simulation goes through the wire
//! codec, also when both live in the same process, so an in-process batch
//! and a networked one see exactly the same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SimulationConfig;
use crate::control::{AgentAction, DesireAction, PrimitiveAction};
use crate::protocol::{decode_client, decode_server, encode_action, encode_meta, encode_server, ClientMessage, SensorMessage, ServerMessage};
use crate::sensing::MPS_TO_KMH;
use crate::server::udp::{connect_client, identify_client, UdpOptions, UdpServer};
use crate::server::{AgentOutcome, EpisodeSummary, ServerError, SessionInput, SessionKind, Simulation, StepReport, TraceRow, STEP_PERIOD};
use crate::track::Track;
use crate::traffic::TrafficAgent;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("unknown scripted agent `{0}` (expected center_follow, weave or full_throttle)")]
    UnknownAgent(String),
    #[error("unknown plot kind `{0}` (expected episode_reward, speed_profile or trajectory_xy)")]
    UnknownPlot(String),
    #[error("no episode records to summarize")]
    EmptyRecords,
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Whether the failure comes from the configuration rather than the run.
    pub fn is_config_error(&self) -> bool {
        matches!(self, HarnessError::UnknownAgent(_) | HarnessError::UnknownPlot(_))
            || matches!(
                self,
                HarnessError::Server(ServerError::Config(_) | ServerError::PortBudget { .. } | ServerError::PortRange(_))
            )
    }
}

/// Something that turns sensor frames into actions.
pub trait Driver: Send {
    fn act(&mut self, msg: &SensorMessage) -> DriverReply;

    /// Called when a new episode begins.
    fn reset(&mut self) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriverReply {
    Action(AgentAction),
    /// Ask the server to end this agent's episode.
    Meta,
}

impl From<AgentAction> for DriverReply {
    fn from(a: AgentAction) -> Self {
        DriverReply::Action(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedKind {
    CenterFollow,
    Weave,
    FullThrottle,
}

impl ScriptedKind {
    pub const ALL: [ScriptedKind; 3] = [ScriptedKind::CenterFollow, ScriptedKind::Weave, ScriptedKind::FullThrottle];

    pub fn as_str(self) -> &'static str {
        match self {
            ScriptedKind::CenterFollow => "center_follow",
            ScriptedKind::Weave => "weave",
            ScriptedKind::FullThrottle => "full_throttle",
        }
    }
}

impl fmt::Display for ScriptedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScriptedKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| HarnessError::UnknownAgent(s.to_string()))
    }
}

/// Who drives the learning cars in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentSpec {
    Scripted(ScriptedKind),
    /// Learners connect over UDP from another process.
    External,
}

impl FromStr for AgentSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "external" => Ok(AgentSpec::External),
            other => other.parse().map(AgentSpec::Scripted),
        }
    }
}

/// Lateral target used by the weave driver when passing.
pub const WEAVE_SIDE: f64 = 0.6;
/// Steps the weave driver holds its side after gaining a place.
pub const WEAVE_HOLD_STEPS: u32 = 25;
/// Largest change of the weave driver's lateral desire per step.
pub const WEAVE_SLEW: f64 = 0.015;
const WEAVE_LOOKAHEAD: f64 = 100.0;
/// Opponent sectors treated as "ahead": bearings within 30 degrees of the nose.
const AHEAD_SECTORS: std::ops::RangeInclusive<usize> = 15..=20;
const FIRST_LEFT_SECTOR: usize = 18;

#[derive(Debug, Clone)]
pub struct ScriptedDriver {
    kind: ScriptedKind,
    target_kmh: f64,
    normalized: bool,
    side: f64,
    desired: f64,
    last_rank: Option<u32>,
    flip_in: Option<u32>,
}

impl ScriptedDriver {
    /// `normalized` tells a primitive driver whether the server expects
    /// actions on [-1, 1] for every channel.
    pub fn new(kind: ScriptedKind, target_kmh: f64, normalized: bool) -> Self {
        Self {
            kind,
            target_kmh,
            normalized,
            side: 0.0,
            desired: 0.0,
            last_rank: None,
            flip_in: None,
        }
    }

    pub fn for_agent(kind: ScriptedKind, cfg: &SimulationConfig, agent: usize) -> Self {
        let a = &cfg.agents[agent];
        Self::new(kind, a.target_speed, a.normalize_actions)
    }

    fn weave(&mut self, msg: &SensorMessage) -> f64 {
        let goal = self.weave_goal(msg);
        self.desired += (goal - self.desired).clamp(-WEAVE_SLEW, WEAVE_SLEW);
        self.desired
    }

    fn weave_goal(&mut self, msg: &SensorMessage) -> f64 {
        let f = &msg.frame;
        if let Some(prev) = self.last_rank {
            if f.race_pos < prev {
                self.flip_in = Some(WEAVE_HOLD_STEPS);
            }
        }
        self.last_rank = Some(f.race_pos);
        if let Some(n) = self.flip_in {
            if n == 0 {
                self.side = -self.side;
                self.flip_in = None;
            } else {
                self.flip_in = Some(n - 1);
            }
        }
        if f.race_pos == 1 {
            return 0.0;
        }
        if self.side == 0.0 {
            let nearest = AHEAD_SECTORS
                .filter(|&k| f.opponents.get(k).is_some_and(|&d| d < WEAVE_LOOKAHEAD))
                .min_by(|&a, &b| f.opponents[a].total_cmp(&f.opponents[b]));
            if let Some(k) = nearest {
                self.side = if k >= FIRST_LEFT_SECTOR { -WEAVE_SIDE } else { WEAVE_SIDE };
            }
        }
        self.side
    }
}

impl Driver for ScriptedDriver {
    fn act(&mut self, msg: &SensorMessage) -> DriverReply {
        let action = match self.kind {
            ScriptedKind::CenterFollow => AgentAction::Desire(DesireAction::from_kmh(0.0, self.target_kmh)),
            ScriptedKind::Weave => {
                let tp = self.weave(msg);
                AgentAction::Desire(DesireAction::from_kmh(tp, self.target_kmh))
            }
            ScriptedKind::FullThrottle => {
                let f = &msg.frame;
                let steer = (f.angle - 0.5 * f.track_pos).clamp(-1.0, 1.0);
                let p = if self.normalized {
                    PrimitiveAction::new(steer, 1.0, -1.0)
                } else {
                    PrimitiveAction::new(steer, 1.0, 0.0)
                };
                AgentAction::Primitive(p)
            }
        };
        action.into()
    }

    fn reset(&mut self) {
        self.side = 0.0;
        self.desired = 0.0;
        self.last_rank = None;
        self.flip_in = None;
    }
}

/// What the batch recorded about one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub seed: u64,
    pub lap_length: f64,
    pub rows: Vec<TraceRow>,
    pub summary: EpisodeSummary,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub mean_fraction_of_lap: f64,
    pub average_speed_kmh: f64,
    pub completion_rate: f64,
    pub mean_total_reward: f64,
}

/// Means over agent outcomes. Average speed is total distance over total
/// driving time, not the mean of per-episode speeds.
pub fn compute_metrics(outcomes: &[AgentOutcome]) -> Result<Metrics, HarnessError> {
    if outcomes.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    let n = outcomes.len() as f64;
    let distance: f64 = outcomes.iter().map(|o| o.distance).sum();
    let time: f64 = outcomes.iter().map(|o| o.time).sum();
    Ok(Metrics {
        samples: outcomes.len(),
        mean_fraction_of_lap: outcomes.iter().map(|o| o.fraction_of_lap).sum::<f64>() / n,
        average_speed_kmh: if time > 0.0 { distance / time * MPS_TO_KMH } else { 0.0 },
        completion_rate: outcomes.iter().filter(|o| o.fraction_of_lap >= 1.0).count() as f64 / n,
        mean_total_reward: outcomes.iter().map(|o| o.total_reward).sum::<f64>() / n,
    })
}

/// Rebuild each learner's outcome from its trace rows: the row carrying a
/// done reason closes the agent's episode.
pub fn outcomes_from_trace(rows: &[TraceRow], lap_length: f64) -> Vec<AgentOutcome> {
    let mut rewards: BTreeMap<usize, f64> = BTreeMap::new();
    let mut out = Vec::new();
    for row in rows.iter().filter(|r| r.kind == SessionKind::Learning) {
        let total = rewards.entry(row.agent).or_insert(0.0);
        *total += row.reward;
        if let Some(reason) = row.done {
            let time = row.step as f64 * STEP_PERIOD;
            let fraction = row.dist_raced / lap_length;
            out.push(AgentOutcome {
                agent: row.agent,
                steps: row.step,
                fraction_of_lap: fraction,
                distance: row.dist_raced,
                time,
                average_speed_kmh: if time > 0.0 { row.dist_raced / time * MPS_TO_KMH } else { 0.0 },
                lap_completed: fraction >= 1.0,
                final_rank: row.race_pos,
                damage: row.damage,
                total_reward: *total,
                done_reason: reason,
            });
        }
    }
    out.sort_by_key(|o| o.agent);
    out
}

/// One entry of `summary.json` per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub episode: u64,
    pub seed: u64,
    pub track: String,
    pub lap_length: f64,
    pub n_traffic: usize,
    pub trace: String,
    pub steps: u64,
    pub wall_time_s: f64,
    pub outcomes: Vec<AgentOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub config: String,
    pub seed: u64,
    pub agent: String,
    pub episodes: Vec<EpisodeEntry>,
    /// Absent when the batch ran no episodes.
    pub metrics: Option<Metrics>,
}

impl BatchSummary {
    pub fn outcomes(&self) -> Vec<AgentOutcome> {
        self.episodes.iter().flat_map(|e| e.outcomes.iter().cloned()).collect()
    }
}

/// Routes messages between a [`Simulation`] and in-process clients, through
/// the text codec in both directions.
pub struct InProcessRunner {
    sim: Simulation,
    learners: Vec<Box<dyn Driver>>,
    traffic: Vec<Option<TrafficAgent>>,
    traffic_steps: Vec<u64>,
    pending: Vec<Option<SessionInput>>,
    /// Frames delivered to each session since the runner started.
    pub frames_received: Vec<u64>,
    started: bool,
}

impl InProcessRunner {
    /// `learners[i]` drives learning agent `i`.
    pub fn new(sim: Simulation, learners: Vec<Box<dyn Driver>>) -> Self {
        let n = sim.sessions().len();
        let n_traffic = sim.config().max_traffic();
        assert_eq!(learners.len(), sim.config().n_learning(), "one driver per learning agent");
        Self {
            traffic: (0..n_traffic).map(|k| sim.traffic_agent(k)).collect(),
            traffic_steps: vec![0; n_traffic],
            sim,
            learners,
            pending: vec![None; n],
            frames_received: vec![0; n],
            started: false,
        }
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    fn deliver(&mut self, outbox: &[Vec<ServerMessage>]) -> Result<(), HarnessError> {
        let n_traffic = self.traffic.len();
        for (session, msgs) in outbox.iter().enumerate() {
            for msg in msgs {
                let wire = encode_server(msg);
                let msg = decode_server(&wire).map_err(|e| HarnessError::Protocol(format!("{e}: {wire}")))?;
                match msg {
                    ServerMessage::Sensor(m) => {
                        self.frames_received[session] += 1;
                        if m.done {
                            continue;
                        }
                        let reply = if session < n_traffic {
                            match self.traffic[session].as_mut() {
                                Some(agent) => {
                                    let step = self.traffic_steps[session];
                                    self.traffic_steps[session] += 1;
                                    DriverReply::Action(AgentAction::Primitive(agent.act(&m.frame, step, STEP_PERIOD)))
                                }
                                None => continue,
                            }
                        } else {
                            self.learners[session - n_traffic].act(&m)
                        };
                        let text = match reply {
                            DriverReply::Action(a) => encode_action(&a),
                            DriverReply::Meta => encode_meta(),
                        };
                        self.pending[session] = Some(match decode_client(&text).map_err(|e| HarnessError::Protocol(e.to_string()))? {
                            ClientMessage::Action(a) => SessionInput::Action(a),
                            ClientMessage::Meta => SessionInput::Meta,
                            ClientMessage::Init { .. } => unreachable!("drivers never send init"),
                        });
                    }
                    ServerMessage::Restart => {
                        if session < n_traffic {
                            self.traffic[session] = self.sim.traffic_agent(session);
                            self.traffic_steps[session] = 0;
                        } else {
                            self.learners[session - n_traffic].reset();
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Advance one control step.
    pub fn step(&mut self) -> Result<StepReport, HarnessError> {
        if !self.started {
            self.started = true;
            let first = self.sim.initial_messages();
            self.deliver(&first)?;
        }
        let inputs: Vec<Option<SessionInput>> = self.pending.iter_mut().map(Option::take).collect();
        let report = self.sim.step(&inputs)?;
        self.deliver(&report.outbox)?;
        Ok(report)
    }

    /// Step until the current episode finishes.
    pub fn run_episode(&mut self) -> Result<(Vec<TraceRow>, EpisodeSummary), HarnessError> {
        let mut rows = Vec::new();
        loop {
            let report = self.step()?;
            rows.extend(report.rows);
            if let Some(summary) = report.finished {
                return Ok((rows, summary));
            }
        }
    }
}

/// Run a scripted learner over UDP until the server shuts down or `stop` is set.
pub fn run_udp_driver(server: SocketAddr, mut driver: Box<dyn Driver>, stop: &AtomicBool) -> Result<u64, HarnessError> {
    let socket = connect_client(server)?;
    let degrees: Vec<f64> = crate::sensing::default_beam_angles()
        .iter()
        .map(|a| a.to_degrees().round())
        .collect();
    if !identify_client(&socket, "scripted", &degrees, stop)? {
        return Ok(0);
    }
    drive_socket(&socket, driver.as_mut(), stop)
}

fn drive_socket(socket: &UdpSocket, driver: &mut dyn Driver, stop: &AtomicBool) -> Result<u64, HarnessError> {
    let mut frames = 0;
    let mut buf = [0u8; 8192];
    while !stop.load(Ordering::Relaxed) {
        let n = match socket.recv(&mut buf) {
            Ok(n) => n,
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e.into()),
        };
        let text = String::from_utf8_lossy(&buf[..n]);
        match decode_server(&text).map_err(|e| HarnessError::Protocol(e.to_string()))? {
            ServerMessage::Sensor(m) => {
                frames += 1;
                if !m.done {
                    let out = match driver.act(&m) {
                        DriverReply::Action(a) => encode_action(&a),
                        DriverReply::Meta => encode_meta(),
                    };
                    socket.send(out.as_bytes())?;
                }
            }
            ServerMessage::Restart => driver.reset(),
            ServerMessage::Shutdown => break,
            ServerMessage::Error(reason) => return Err(HarnessError::Protocol(reason)),
            ServerMessage::Identified | ServerMessage::Done(_) => {}
        }
    }
    Ok(frames)
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub episodes: u64,
    pub seed: u64,
    pub agent: AgentSpec,
    pub out_dir: PathBuf,
    pub realtime: bool,
    /// How long external learners get to identify.
    pub connect_timeout: Duration,
}

pub fn trace_file_name(episode: u64) -> String {
    format!("episode_{episode:05}.jsonl")
}

pub const SUMMARY_FILE: &str = "summary.json";

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, HarnessError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| HarnessError::Data {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(rows)
}

pub fn read_summary(path: &Path) -> Result<BatchSummary, HarnessError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn lap_length_of(cfg: &SimulationConfig, track: &str) -> Result<f64, HarnessError> {
    let t: Track = cfg.load_track(track).map_err(ServerError::Config)?;
    Ok(t.total_length())
}

impl EpisodeRecord {
    fn new(cfg: &SimulationConfig, seed: u64, rows: Vec<TraceRow>, summary: EpisodeSummary, wall_time_s: f64) -> Result<Self, HarnessError> {
        Ok(Self {
            episode: summary.episode,
            seed,
            lap_length: lap_length_of(cfg, &summary.track)?,
            rows,
            summary,
            wall_time_s,
        })
    }

    pub fn entry(&self) -> EpisodeEntry {
        EpisodeEntry {
            episode: self.episode,
            seed: self.seed,
            track: self.summary.track.clone(),
            lap_length: self.lap_length,
            n_traffic: self.summary.n_traffic,
            trace: trace_file_name(self.episode),
            steps: self.summary.steps,
            wall_time_s: self.wall_time_s,
            outcomes: self.summary.agents.clone(),
        }
    }
}

/// Run `episodes` episodes with in-process scripted learners and return
/// the records without touching the file system.
pub fn scripted_records(cfg: &SimulationConfig, kind: ScriptedKind, seed: u64, episodes: u64) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let mut out = Vec::new();
    run_scripted(cfg, kind, seed, episodes, false, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

/// Run `opts.episodes` episodes, writing one trace file per episode and
/// `summary.json` into `opts.out_dir`.
pub fn run_batch(cfg: &SimulationConfig, config_label: &str, opts: &BatchOptions) -> Result<BatchSummary, HarnessError> {
    fs::create_dir_all(&opts.out_dir)?;
    let mut entries = Vec::new();
    let mut sink = |record: EpisodeRecord| -> Result<(), HarnessError> {
        write_trace(&opts.out_dir.join(trace_file_name(record.episode)), &record.rows)?;
        entries.push(record.entry());
        Ok(())
    };
    if opts.episodes > 0 {
        match opts.agent {
            AgentSpec::Scripted(kind) => run_scripted(cfg, kind, opts.seed, opts.episodes, opts.realtime, &mut sink)?,
            AgentSpec::External => run_external(cfg, opts, &mut sink)?,
        }
    }
    let outcomes: Vec<AgentOutcome> = entries.iter().flat_map(|e| e.outcomes.iter().cloned()).collect();
    let summary = BatchSummary {
        config: config_label.to_string(),
        seed: opts.seed,
        agent: match opts.agent {
            AgentSpec::Scripted(k) => k.to_string(),
            AgentSpec::External => "external".into(),
        },
        metrics: if outcomes.is_empty() { None } else { Some(compute_metrics(&outcomes)?) },
        episodes: entries,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(opts.out_dir.join(SUMMARY_FILE), text)?;
    Ok(summary)
}

fn run_scripted(
    cfg: &SimulationConfig,
    kind: ScriptedKind,
    seed: u64,
    episodes: u64,
    realtime: bool,
    mut sink: impl FnMut(EpisodeRecord) -> Result<(), HarnessError>,
) -> Result<(), HarnessError> {
    let sim = Simulation::new(cfg.clone(), seed)?;
    let drivers: Vec<Box<dyn Driver>> = (0..cfg.n_learning())
        .map(|i| Box::new(ScriptedDriver::for_agent(kind, cfg, i)) as Box<dyn Driver>)
        .collect();
    let mut runner = InProcessRunner::new(sim, drivers);
    let period = Duration::from_secs_f64(STEP_PERIOD);
    for _ in 0..episodes {
        let started = Instant::now();
        let mut rows = Vec::new();
        let summary = loop {
            let tick = Instant::now();
            let report = runner.step()?;
            rows.extend(report.rows);
            if realtime {
                if let Some(rest) = period.checked_sub(tick.elapsed()) {
                    std::thread::sleep(rest);
                }
            }
            if let Some(s) = report.finished {
                break s;
            }
        };
        sink(EpisodeRecord::new(cfg, seed, rows, summary, started.elapsed().as_secs_f64())?)?;
    }
    Ok(())
}

fn run_external(
    cfg: &SimulationConfig,
    opts: &BatchOptions,
    mut sink: impl FnMut(EpisodeRecord) -> Result<(), HarnessError>,
) -> Result<(), HarnessError> {
    let server = UdpServer::bind(
        cfg.clone(),
        opts.seed,
        UdpOptions {
            realtime: opts.realtime,
            max_episodes: Some(opts.episodes),
            handshake_timeout: Some(opts.connect_timeout),
            ..UdpOptions::default()
        },
    )?;
    let mut rows = Vec::new();
    let mut started = Instant::now();
    let mut failure = None;
    server.run(|report| {
        if failure.is_some() {
            return;
        }
        rows.extend(report.rows.iter().cloned());
        if let Some(summary) = &report.finished {
            let record = EpisodeRecord::new(cfg, opts.seed, std::mem::take(&mut rows), summary.clone(), started.elapsed().as_secs_f64());
            if let Err(e) = record.and_then(&mut sink) {
                failure = Some(e);
            }
            started = Instant::now();
        }
    })?;
    failure.map_or(Ok(()), Err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    EpisodeReward,
    SpeedProfile,
    TrajectoryXy,
}

impl FromStr for PlotKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "episode_reward" => Ok(PlotKind::EpisodeReward),
            "speed_profile" => Ok(PlotKind::SpeedProfile),
            "trajectory_xy" => Ok(PlotKind::TrajectoryXy),
            other => Err(HarnessError::UnknownPlot(other.to_string())),
        }
    }
}

/// Column names per plot kind.
pub fn plot_header(kind: PlotKind) -> &'static [&'static str] {
    match kind {
        PlotKind::EpisodeReward => &["episode", "agent", "total_reward", "steps", "fraction_of_lap"],
        PlotKind::SpeedProfile => &["step", "agent", "speed_kmh"],
        PlotKind::TrajectoryXy => &["step", "agent", "x", "y"],
    }
}

/// Write a comma-separated table. Trace kinds read `rows` and use the
/// session number as the agent column; `episode_reward` reads `summary`.
pub fn emit_plot_data<W: Write>(kind: PlotKind, summary: Option<&BatchSummary>, rows: &[TraceRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(plot_header(kind))?;
    match kind {
        PlotKind::EpisodeReward => {
            for e in summary.map(|s| s.episodes.as_slice()).unwrap_or_default() {
                for o in &e.outcomes {
                    w.write_record([
                        e.episode.to_string(),
                        o.agent.to_string(),
                        o.total_reward.to_string(),
                        o.steps.to_string(),
                        o.fraction_of_lap.to_string(),
                    ])?;
                }
            }
        }
        PlotKind::SpeedProfile => {
            for r in rows {
                w.write_record([r.step.to_string(), r.session.to_string(), r.speed_x.to_string()])?;
            }
        }
        PlotKind::TrajectoryXy => {
            for r in rows {
                w.write_record([r.step.to_string(), r.session.to_string(), r.x.to_string(), r.y.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Recompute the metrics of a batch directory from its trace files.
pub fn metrics_from_dir(dir: &Path) -> Result<Metrics, HarnessError> {
    let summary = read_summary(&dir.join(SUMMARY_FILE))?;
    let mut outcomes = Vec::new();
    for e in &summary.episodes {
        let rows = read_trace(&dir.join(&e.trace))?;
        outcomes.extend(outcomes_from_trace(&rows, e.lap_length));
    }
    compute_metrics(&outcomes)
}
