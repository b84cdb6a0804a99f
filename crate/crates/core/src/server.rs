//! The lockstep world: session bookkeeping, the control step, the episode
//! lifecycle and the communication buffer. Transport lives in [`udp`]; the
//! [`Simulation`] itself only consumes decoded inputs and produces messages.

pub mod udp;

use std::collections::{HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{apply_curriculum, sample_episode_setup, CommVar, ConfigError, EpisodeSetup, SimulationConfig, Spawn};
use crate::control::{add_agent_action_noise, AgentAction, DesireAction, PrimitiveAction, TsController};
use crate::dynamics::collision::{apply_damage, detect_collisions, resolve_contact};
use crate::dynamics::{physics_tick, CarModel, SimulationFault, VehicleState, PHYSICS_DT};
use crate::protocol::{SensorMessage, ServerMessage};
use crate::reward::{DoneReason, DoneSpec, EpisodeTracker, RewardSpec, StepObservation};
use crate::sensing::{apply_observation_noise, build_sensor_frame, default_beam_angles, race_position, SensorFrame, WorldSnapshot, MPS_TO_KMH};
use crate::track::{lap_fraction, Track};
use crate::traffic::TrafficAgent;

/// Simulated seconds per control step.
pub const STEP_PERIOD: f64 = 0.02;
pub const TICKS_PER_STEP: u64 = 10;

const SEED_STREAM_NOISE: u64 = 0x6e6f_6973_6500_0001;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{needed} sessions do not fit in a budget of {budget} ports")]
    PortBudget { needed: usize, budget: usize },
    #[error("port {0} is outside the valid range")]
    PortRange(u32),
    #[error("cannot bind port {port}: {source}")]
    Bind { port: u16, source: std::io::Error },
    #[error("cannot place car at distance {distance}: {reason}")]
    Spawn { distance: f64, reason: String },
    #[error(transparent)]
    Fault(#[from] SimulationFault),
    #[error("network error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    Traffic,
    Learning,
}

/// One client slot: its kind, its index among sessions of that kind, and its port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub kind: SessionKind,
    pub index: usize,
    pub port: u16,
}

/// Consecutive ports from `base`: traffic sessions first, then learning sessions.
pub fn assign_ports(n_traffic: usize, n_learning: usize, base: u16, budget: Option<usize>) -> Result<Vec<SessionInfo>, ServerError> {
    let needed = n_traffic + n_learning;
    if let Some(budget) = budget {
        if needed > budget {
            return Err(ServerError::PortBudget { needed, budget });
        }
    }
    let last = u32::from(base) + needed as u32;
    if needed > 0 && last - 1 > u32::from(u16::MAX) {
        return Err(ServerError::PortRange(last - 1));
    }
    let kinds = std::iter::repeat_n(SessionKind::Traffic, n_traffic)
        .enumerate()
        .chain(std::iter::repeat_n(SessionKind::Learning, n_learning).enumerate());
    Ok(kinds
        .enumerate()
        .map(|(k, (index, kind))| SessionInfo {
            kind,
            index,
            port: base + k as u16,
        })
        .collect())
}

/// What arrived from one session before a step.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionInput {
    Action(AgentAction),
    /// The client asked to end its episode.
    Meta,
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentStatus {
    Running,
    Done(DoneReason),
}

/// One trace line: a car's state after a control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: u64,
    pub step: u64,
    pub session: usize,
    pub kind: SessionKind,
    pub agent: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// km/h
    pub speed_x: f64,
    pub speed_y: f64,
    pub track_pos: f64,
    pub dist_raced: f64,
    pub progress: f64,
    pub damage: f64,
    pub race_pos: u32,
    pub action: AgentAction,
    pub controls: PrimitiveAction,
    pub reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub done: Option<DoneReason>,
}

/// How one learning agent's episode went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub agent: usize,
    pub steps: u64,
    pub fraction_of_lap: f64,
    /// meters
    pub distance: f64,
    /// simulated seconds
    pub time: f64,
    pub average_speed_kmh: f64,
    pub lap_completed: bool,
    pub final_rank: u32,
    pub damage: f64,
    pub total_reward: f64,
    pub done_reason: DoneReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub track: String,
    pub n_traffic: usize,
    pub steps: u64,
    pub physics_ticks: u64,
    pub setup: EpisodeSetup,
    pub agents: Vec<AgentOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Messages per session, in sending order.
    pub outbox: Vec<Vec<ServerMessage>>,
    pub rows: Vec<TraceRow>,
    /// Set when the step ended the episode and the world was reset.
    pub finished: Option<EpisodeSummary>,
}

#[derive(Debug, Clone)]
struct LearnerState {
    index: usize,
    rewards: RewardSpec,
    dones: DoneSpec,
    tracker: EpisodeTracker,
    status: AgentStatus,
    done_step: u64,
    /// Distance, damage and rank when the agent finished.
    at_done: (f64, f64, u32),
    pending: Option<DoneReason>,
}

#[derive(Debug, Clone)]
enum Role {
    Traffic(usize),
    Learner(Box<LearnerState>),
}

#[derive(Debug, Clone)]
struct Car {
    session: usize,
    model: CarModel,
    state: VehicleState,
    race_origin: f64,
    lap_start_time: f64,
    laps: i64,
    action: AgentAction,
    controls: PrimitiveAction,
    controller: TsController,
    /// The last frame sent to this car's client, which its controller reads.
    frame: SensorFrame,
    role: Role,
}

impl Car {
    fn learner(&self) -> Option<&LearnerState> {
        match &self.role {
            Role::Learner(l) => Some(l),
            Role::Traffic(_) => None,
        }
    }

    fn learner_mut(&mut self) -> Option<&mut LearnerState> {
        match &mut self.role {
            Role::Learner(l) => Some(l),
            Role::Traffic(_) => None,
        }
    }

    fn is_running_learner(&self) -> bool {
        self.learner().is_some_and(|l| l.status == AgentStatus::Running)
    }
}

/// Shared variables one learner published at one step.
#[derive(Debug, Clone, Default)]
struct CommRecord {
    action: Vec<f64>,
    angle: f64,
    track_pos: f64,
    speed_x: f64,
    speed_y: f64,
    dist_raced: f64,
    race_pos: f64,
}

impl CommRecord {
    fn values(&self, var: CommVar, width: usize) -> Vec<f64> {
        match var {
            CommVar::PeerActions => {
                let mut v = self.action.clone();
                v.resize(width, 0.0);
                v
            }
            CommVar::Angle => vec![self.angle],
            CommVar::TrackPos => vec![self.track_pos],
            CommVar::SpeedX => vec![self.speed_x],
            CommVar::SpeedY => vec![self.speed_y],
            CommVar::DistRaced => vec![self.dist_raced],
            CommVar::RacePos => vec![self.race_pos],
        }
    }
}

fn action_values(a: &AgentAction) -> Vec<f64> {
    match a {
        AgentAction::Desire(d) => vec![d.track_pos, d.speed],
        AgentAction::Primitive(p) => vec![p.steer, p.accel, p.brake],
    }
}

fn braking() -> PrimitiveAction {
    PrimitiveAction::new(0.0, 0.0, 1.0)
}

/// The single-threaded simulation state machine behind both transports.
pub struct Simulation {
    base: SimulationConfig,
    cfg: SimulationConfig,
    sessions: Vec<SessionInfo>,
    beams: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    tracks: HashMap<String, Track>,
    episode: u64,
    setup: EpisodeSetup,
    track_name: String,
    cars: Vec<Car>,
    step_count: u64,
    episode_ticks: u64,
    total_ticks: u64,
    resets: u64,
    comm_history: VecDeque<Vec<Option<CommRecord>>>,
    traffic_agents: Vec<Option<TrafficAgent>>,
}

impl Simulation {
    pub fn new(config: SimulationConfig, seed: u64) -> Result<Self, ServerError> {
        config.validate()?;
        let sessions = assign_ports(
            config.max_traffic(),
            config.n_learning(),
            config.server.torcs_server_port,
            None,
        )?;
        let beams = vec![default_beam_angles().to_vec(); sessions.len()];
        let mut sim = Self {
            cfg: config.clone(),
            base: config,
            sessions,
            beams,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise_rng: ChaCha8Rng::seed_from_u64(seed ^ SEED_STREAM_NOISE),
            tracks: HashMap::new(),
            episode: 0,
            setup: EpisodeSetup {
                track: String::new(),
                learner_cars: Vec::new(),
                learner_spawns: Vec::new(),
                n_traffic: 0,
                traffic: Vec::new(),
                add_noise_to_actions: false,
                action_noise_std: 0.0,
                noisy_observations: false,
            },
            track_name: String::new(),
            cars: Vec::new(),
            step_count: 0,
            episode_ticks: 0,
            total_ticks: 0,
            resets: 0,
            comm_history: VecDeque::new(),
            traffic_agents: Vec::new(),
        };
        sim.start_episode()?;
        Ok(sim)
    }

    pub fn sessions(&self) -> &[SessionInfo] {
        &self.sessions
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn setup(&self) -> &EpisodeSetup {
        &self.setup
    }

    pub fn track(&self) -> &Track {
        &self.tracks[&self.track_name]
    }

    /// 1-based number of the episode in progress.
    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Physics ticks run in the current episode.
    pub fn episode_ticks(&self) -> u64 {
        self.episode_ticks
    }

    pub fn total_ticks(&self) -> u64 {
        self.total_ticks
    }

    pub fn resets(&self) -> u64 {
        self.resets
    }

    /// Store a session's rangefinder directions, given in degrees.
    pub fn set_beam_angles(&mut self, session: usize, degrees: &[f64]) {
        self.beams[session] = degrees.iter().map(|d| d.to_radians()).collect();
    }

    /// The behavior a traffic session should run this episode, if it is on track.
    pub fn traffic_agent(&self, slot: usize) -> Option<TrafficAgent> {
        self.traffic_agents.get(slot).cloned().flatten()
    }

    pub fn agent_status(&self, learner: usize) -> Option<AgentStatus> {
        self.cars
            .iter()
            .filter_map(Car::learner)
            .find(|l| l.index == learner)
            .map(|l| l.status)
    }

    pub fn vehicle(&self, session: usize) -> Option<&VehicleState> {
        self.cars.iter().find(|c| c.session == session).map(|c| &c.state)
    }

    fn learner_session(&self, i: usize) -> usize {
        self.max_traffic_slots() + i
    }

    fn max_traffic_slots(&self) -> usize {
        self.base.max_traffic()
    }

    fn load_track(&mut self, name: &str) -> Result<(), ServerError> {
        if !self.tracks.contains_key(name) {
            let track = self.cfg.load_track(name)?;
            self.tracks.insert(name.to_string(), track);
        }
        Ok(())
    }

    fn spawn_state(track: &Track, model: &CarModel, spawn: Spawn) -> Result<VehicleState, ServerError> {
        VehicleState::spawn(track, model, spawn.distance, spawn.track_pos).map_err(|e| ServerError::Spawn {
            distance: spawn.distance,
            reason: e.to_string(),
        })
    }

    fn start_episode(&mut self) -> Result<(), ServerError> {
        self.episode += 1;
        self.cfg = apply_curriculum(&self.base.curriculum, self.episode, &self.base)?;
        self.cfg.base_dir = self.base.base_dir.clone();
        self.setup = sample_episode_setup(&self.cfg, &mut self.rng)?;
        let track_name = self.setup.track.clone();
        self.load_track(&track_name)?;
        self.track_name = track_name;
        let track = &self.tracks[&self.track_name];

        let mut cars = Vec::new();
        self.traffic_agents = vec![None; self.max_traffic_slots()];
        let traffic_model = self.cfg.load_car(&self.cfg.server.traffic_car)?;
        for (k, t) in self.setup.traffic.iter().enumerate() {
            let state = Self::spawn_state(track, &traffic_model, t.spawn)?;
            let agent = TrafficAgent::new(t.config.clone(), t.spawn.distance, t.seed);
            cars.push(Car {
                session: k,
                model: traffic_model.clone(),
                state,
                race_origin: t.spawn.distance,
                lap_start_time: 0.0,
                laps: 0,
                action: AgentAction::Primitive(braking()),
                controls: braking(),
                controller: agent.controller.clone(),
                frame: SensorFrame::default(),
                role: Role::Traffic(k),
            });
            self.traffic_agents[k] = Some(agent);
        }
        for (i, agent) in self.cfg.agents.iter().enumerate() {
            let model = self.cfg.load_car(&self.setup.learner_cars[i])?;
            let spawn = self.setup.learner_spawns[i];
            let state = Self::spawn_state(track, &model, spawn)?;
            let dones = agent
                .done_spec(&self.cfg.server)
                .map_err(|m| ConfigError::invalid(format!("agents[{i}].dones"), m))?;
            let rewards = agent
                .reward_spec()
                .map_err(|m| ConfigError::invalid(format!("agents[{i}].rewards"), m))?;
            let idle = if agent.pid_assist {
                AgentAction::Desire(DesireAction::from_kmh(spawn.track_pos, 0.0))
            } else {
                AgentAction::Primitive(braking())
            };
            cars.push(Car {
                session: self.learner_session(i),
                model,
                state,
                race_origin: spawn.distance,
                lap_start_time: 0.0,
                laps: 0,
                action: idle,
                controls: braking(),
                controller: agent.controller(),
                frame: SensorFrame::default(),
                role: Role::Learner(Box::new(LearnerState {
                    index: i,
                    rewards,
                    dones,
                    tracker: EpisodeTracker::new(1),
                    status: AgentStatus::Running,
                    done_step: 0,
                    at_done: (0.0, 0.0, 0),
                    pending: None,
                })),
            });
        }
        self.cars = cars;
        self.step_count = 0;
        self.episode_ticks = 0;
        self.comm_history.clear();

        let coords = self.race_coords();
        for idx in 0..self.cars.len() {
            let rank = race_position(&coords, idx);
            if let Some(l) = self.cars[idx].learner_mut() {
                l.tracker = EpisodeTracker::new(rank);
            }
        }
        Ok(())
    }

    fn race_coords(&self) -> Vec<f64> {
        self.cars.iter().map(|c| c.race_origin + c.state.progress).collect()
    }

    fn lap_times(&self) -> Vec<f64> {
        let now = self.step_count as f64 * STEP_PERIOD;
        self.cars.iter().map(|c| now - c.lap_start_time).collect()
    }

    fn comm_block(&self, learner: usize) -> Vec<f64> {
        let Some(link) = self.cfg.comm_link(learner) else {
            return Vec::new();
        };
        let buff = self.cfg.comm_buff_size(learner);
        let mut out = Vec::with_capacity(self.cfg.comms_len(learner));
        for lag in 0..buff {
            let step_records = self.comm_history.get(lag);
            for &j in &link.comms {
                let width = self.cfg.agents[j].action_width();
                let record = step_records.and_then(|r| r.get(j)).and_then(|r| r.as_ref());
                for &var in &link.vars {
                    match record {
                        Some(r) => out.extend(r.values(var, width)),
                        None => out.extend(std::iter::repeat_n(0.0, self.cfg.comm_var_width(j, var))),
                    }
                }
            }
        }
        out
    }

    /// Frames for every car, with noise and peer blocks applied for learners.
    fn build_frames(&mut self) -> Vec<SensorFrame> {
        let coords = self.race_coords();
        let lap_times = self.lap_times();
        let states: Vec<VehicleState> = self.cars.iter().map(|c| c.state.clone()).collect();
        let track = &self.tracks[&self.track_name];
        let world = WorldSnapshot {
            track,
            cars: &states,
            race_coords: &coords,
            lap_times: &lap_times,
        };
        let mut frames = Vec::with_capacity(self.cars.len());
        for (idx, car) in self.cars.iter().enumerate() {
            let mut frame = build_sensor_frame(&world, idx, &self.beams[car.session]);
            if let Some(l) = car.learner() {
                frame = apply_observation_noise(&frame, self.setup.noisy_observations, &mut self.noise_rng);
                frame.comms = self.comm_block(l.index);
            }
            frames.push(frame);
        }
        frames
    }

    /// Messages opening the current episode: one frame per car on track.
    pub fn initial_messages(&mut self) -> Vec<Vec<ServerMessage>> {
        let mut outbox = vec![Vec::new(); self.sessions.len()];
        let frames = self.build_frames();
        for (car, frame) in self.cars.iter_mut().zip(frames) {
            car.frame = frame.clone();
            outbox[car.session].push(ServerMessage::Sensor(Box::new(SensorMessage {
                frame,
                reward: 0.0,
                done: false,
                done_reason: None,
            })));
        }
        outbox
    }

    /// Sessions that owe an action for the next step.
    pub fn awaiting(&self) -> Vec<usize> {
        self.cars
            .iter()
            .filter(|c| match &c.role {
                Role::Traffic(_) => true,
                Role::Learner(l) => l.status == AgentStatus::Running,
            })
            .map(|c| c.session)
            .collect()
    }

    fn realize(&mut self, idx: usize, noisy: Option<f64>) -> PrimitiveAction {
        let car = &mut self.cars[idx];
        let agent_cfg = car.learner().map(|l| self.cfg.agents[l.index].clone());
        let mut action = car.action;
        if let Some(std) = noisy {
            action = add_agent_action_noise(&action, std, &mut self.noise_rng);
        }
        match (action, agent_cfg) {
            (AgentAction::Desire(d), _) => car.controller.ts_to_primitive(d, &car.frame, STEP_PERIOD),
            (AgentAction::Primitive(p), None) => p.clipped(),
            (AgentAction::Primitive(p), Some(a)) => {
                let mut out = if a.normalize_actions {
                    PrimitiveAction {
                        gear: p.gear,
                        ..PrimitiveAction::from_normalized(p.steer, p.accel, p.brake)
                    }
                } else {
                    p.clipped()
                };
                if !a.gear_change {
                    out.gear = None;
                }
                if !a.throttle {
                    let desire = DesireAction::from_kmh(car.frame.track_pos, a.target_speed);
                    let auto = car.controller.ts_to_primitive(desire, &car.frame, STEP_PERIOD);
                    out.accel = auto.accel;
                    out.brake = auto.brake;
                }
                out
            }
        }
    }

    /// Run one control step. `inputs[s]` is what session `s` sent; `None`
    /// repeats that session's previous action.
    pub fn step(&mut self, inputs: &[Option<SessionInput>]) -> Result<StepReport, ServerError> {
        assert_eq!(inputs.len(), self.sessions.len(), "one input slot per session");
        for car in &mut self.cars {
            let running = car.is_running_learner();
            match (&inputs[car.session], &mut car.role) {
                (None, _) => {}
                (Some(SessionInput::Action(a)), Role::Traffic(_)) => car.action = *a,
                (Some(SessionInput::Action(a)), Role::Learner(_)) if running => car.action = *a,
                (Some(SessionInput::Meta), Role::Learner(l)) if running => l.pending = Some(DoneReason::Meta),
                (Some(SessionInput::Disconnected), Role::Learner(l)) if running => {
                    l.pending = Some(DoneReason::Disconnected)
                }
                (Some(SessionInput::Disconnected), Role::Traffic(_)) => car.action = AgentAction::Primitive(braking()),
                _ => {}
            }
        }

        let noise = self.setup.add_noise_to_actions.then_some(self.setup.action_noise_std);
        for idx in 0..self.cars.len() {
            let controls = match &self.cars[idx].role {
                Role::Learner(l) if l.status != AgentStatus::Running => braking(),
                Role::Learner(_) => self.realize(idx, noise),
                Role::Traffic(_) => self.realize(idx, None),
            };
            self.cars[idx].controls = controls;
        }

        let track = &self.tracks[&self.track_name];
        let models: Vec<CarModel> = self.cars.iter().map(|c| c.model.clone()).collect();
        let mut contact = vec![false; self.cars.len()];
        let ticks_before = self.episode_ticks;
        for _ in 0..TICKS_PER_STEP {
            for car in &mut self.cars {
                car.state = physics_tick(&car.state, &car.model, &car.controls, track, PHYSICS_DT)?;
            }
            let states: Vec<VehicleState> = self.cars.iter().map(|c| c.state.clone()).collect();
            for (i, j) in detect_collisions(&states, &models) {
                let (lo, hi) = self.cars.split_at_mut(j);
                resolve_contact(&mut lo[i].state, &models[i], &mut hi[0].state, &models[j]);
                contact[i] = true;
                contact[j] = true;
            }
            self.episode_ticks += 1;
            self.total_ticks += 1;
        }
        assert_eq!(self.episode_ticks - ticks_before, TICKS_PER_STEP, "tick ratio violated");
        for (car, hit) in self.cars.iter_mut().zip(&contact) {
            car.state = apply_damage(&car.state, *hit);
        }
        self.step_count += 1;
        let now = self.step_count as f64 * STEP_PERIOD;
        let lap_length = track.total_length();
        for car in &mut self.cars {
            let laps = (car.state.progress / lap_length).floor() as i64;
            if laps > car.laps {
                car.laps = laps;
                car.lap_start_time = now;
            }
        }

        let coords = self.race_coords();
        let mut rewards = vec![0.0; self.cars.len()];
        let mut newly_done = vec![None; self.cars.len()];
        for idx in 0..self.cars.len() {
            let rank = race_position(&coords, idx);
            let step = self.step_count;
            let car = &mut self.cars[idx];
            let frenet = track.project_to_frenet(car.state.position, car.state.heading);
            let Role::Learner(l) = &mut car.role else { continue };
            let target = self.cfg.agents[l.index].target_speed;
            if l.status != AgentStatus::Running {
                continue;
            }
            let outcome = l.tracker.step(
                StepObservation {
                    angle: frenet.angle,
                    track_pos: frenet.track_pos,
                    damage: car.state.damage,
                    progress: car.state.progress,
                    lap_length,
                    time: now,
                    rank,
                },
                &l.rewards,
                &l.dones,
                target / MPS_TO_KMH,
                STEP_PERIOD,
            );
            let cap = (l.tracker.step_count >= l.dones.max_steps).then_some(DoneReason::Timeout);
            let done = l.pending.take().or(outcome.done).or(cap);
            rewards[idx] = outcome.reward;
            if let Some(reason) = done {
                l.tracker.done = Some(reason);
                l.status = AgentStatus::Done(reason);
                l.done_step = step;
                l.at_done = (car.state.distance_raced, car.state.damage, rank);
                newly_done[idx] = Some(reason);
            }
        }

        let frames = self.build_frames();
        let mut record = vec![None; self.cfg.n_learning()];
        for (car, frame) in self.cars.iter().zip(&frames) {
            if let Some(l) = car.learner() {
                record[l.index] = Some(CommRecord {
                    action: action_values(&car.action),
                    angle: frame.angle,
                    track_pos: frame.track_pos,
                    speed_x: frame.speed_x,
                    speed_y: frame.speed_y,
                    dist_raced: frame.dist_raced,
                    race_pos: f64::from(frame.race_pos),
                });
            }
        }
        self.comm_history.push_front(record);
        let keep = (0..self.cfg.n_learning()).map(|i| self.cfg.comm_buff_size(i)).max().unwrap_or(1);
        self.comm_history.truncate(keep);

        let mut outbox = vec![Vec::new(); self.sessions.len()];
        let mut rows = Vec::with_capacity(self.cars.len());
        for (idx, (car, frame)) in self.cars.iter_mut().zip(frames).enumerate() {
            let (send, reason, agent, kind) = match &car.role {
                Role::Traffic(k) => (true, None, *k, SessionKind::Traffic),
                Role::Learner(l) => (
                    l.status == AgentStatus::Running || newly_done[idx].is_some(),
                    newly_done[idx],
                    l.index,
                    SessionKind::Learning,
                ),
            };
            if !send {
                continue;
            }
            rows.push(TraceRow {
                episode: self.episode,
                step: self.step_count,
                session: car.session,
                kind,
                agent,
                x: car.state.position.x,
                y: car.state.position.y,
                heading: car.state.heading,
                speed_x: car.state.v_long * MPS_TO_KMH,
                speed_y: car.state.v_lat * MPS_TO_KMH,
                track_pos: frame.track_pos,
                dist_raced: car.state.distance_raced,
                progress: car.state.progress,
                damage: car.state.damage,
                race_pos: frame.race_pos,
                action: car.action,
                controls: car.controls,
                reward: rewards[idx],
                done: reason,
            });
            car.frame = frame.clone();
            if reason == Some(DoneReason::Disconnected) {
                continue;
            }
            outbox[car.session].push(ServerMessage::Sensor(Box::new(SensorMessage {
                frame,
                reward: rewards[idx],
                done: reason.is_some(),
                done_reason: reason,
            })));
            if let Some(r) = reason {
                outbox[car.session].push(ServerMessage::Done(r));
            }
        }

        let all_done = self.cars.iter().all(|c| !c.is_running_learner());
        let finished = if all_done {
            let summary = self.summary();
            self.resets += 1;
            self.start_episode()?;
            for msgs in &mut outbox {
                msgs.push(ServerMessage::Restart);
            }
            for (s, msgs) in self.initial_messages().into_iter().enumerate() {
                outbox[s].extend(msgs);
            }
            Some(summary)
        } else {
            None
        };
        Ok(StepReport { outbox, rows, finished })
    }

    fn summary(&self) -> EpisodeSummary {
        let track = self.track();
        let coords = self.race_coords();
        let mut agents: Vec<AgentOutcome> = self
            .cars
            .iter()
            .enumerate()
            .filter_map(|(idx, car)| {
                let l = car.learner()?;
                let (reason, (distance, damage, rank)) = match l.status {
                    AgentStatus::Done(r) => (r, l.at_done),
                    AgentStatus::Running => (
                        DoneReason::Timeout,
                        (car.state.distance_raced, car.state.damage, race_position(&coords, idx)),
                    ),
                };
                let time = l.done_step as f64 * STEP_PERIOD;
                Some(AgentOutcome {
                    agent: l.index,
                    steps: l.done_step,
                    fraction_of_lap: lap_fraction(track, distance),
                    distance,
                    time,
                    average_speed_kmh: if time > 0.0 { distance / time * MPS_TO_KMH } else { 0.0 },
                    lap_completed: lap_fraction(track, distance) >= 1.0,
                    final_rank: rank,
                    damage,
                    total_reward: l.tracker.total_reward,
                    done_reason: reason,
                })
            })
            .collect();
        agents.sort_by_key(|a| a.agent);
        EpisodeSummary {
            episode: self.episode,
            track: self.track_name.clone(),
            n_traffic: self.setup.n_traffic,
            steps: self.step_count,
            physics_ticks: self.episode_ticks,
            setup: self.setup.clone(),
            agents,
        }
    }
}
