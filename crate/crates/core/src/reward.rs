//! Per-agent reward composition and termination checks.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ALPHA_REFERENCE: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum RewardSpecError {
    #[error("unknown reward component `{0}`")]
    UnknownComponent(String),
    #[error("reward component `{0}` listed twice")]
    Duplicate(String),
    #[error("weight of `{name}` must be finite and non-negative, got {weight}")]
    BadWeight { name: String, weight: f64 },
    #[error("unknown parameter `{param}` for reward component `{name}`")]
    UnknownParam { name: String, param: String },
    #[error("unknown done condition `{0}`")]
    UnknownDone(String),
    #[error("max_steps must be positive")]
    MaxSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Progress,
    AverageSpeed,
    AngularAccelerationPenalty,
    TurnBackwardPenalty,
    CollisionPenalty,
    Overtake,
    #[serde(rename = "rank_1")]
    Rank1,
}

impl RewardKind {
    pub const ALL: [RewardKind; 7] = [
        RewardKind::Progress,
        RewardKind::AverageSpeed,
        RewardKind::AngularAccelerationPenalty,
        RewardKind::TurnBackwardPenalty,
        RewardKind::CollisionPenalty,
        RewardKind::Overtake,
        RewardKind::Rank1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Progress => "progress",
            RewardKind::AverageSpeed => "average_speed",
            RewardKind::AngularAccelerationPenalty => "angular_acceleration_penalty",
            RewardKind::TurnBackwardPenalty => "turn_backward_penalty",
            RewardKind::CollisionPenalty => "collision_penalty",
            RewardKind::Overtake => "overtake",
            RewardKind::Rank1 => "rank_1",
        }
    }

    /// Penalties are subtracted in the weighted sum.
    pub fn is_penalty(self) -> bool {
        matches!(
            self,
            RewardKind::AngularAccelerationPenalty | RewardKind::TurnBackwardPenalty | RewardKind::CollisionPenalty
        )
    }

    fn params(self) -> &'static [&'static str] {
        match self {
            RewardKind::AngularAccelerationPenalty => &["alpha_reference"],
            _ => &[],
        }
    }
}

impl FromStr for RewardKind {
    type Err = RewardSpecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RewardKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RewardSpecError::UnknownComponent(s.to_string()))
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTerm {
    pub kind: RewardKind,
    pub weight: f64,
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardSpec {
    pub components: Vec<RewardTerm>,
}

impl RewardSpec {
    /// Build from (name, weight) pairs, validating names and weights.
    pub fn from_weights<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self, RewardSpecError> {
        let components = pairs
            .into_iter()
            .map(|(name, weight)| {
                Ok(RewardTerm {
                    kind: name.parse()?,
                    weight,
                    params: BTreeMap::new(),
                })
            })
            .collect::<Result<Vec<_>, RewardSpecError>>()?;
        let spec = RewardSpec { components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RewardSpecError> {
        let mut seen = HashSet::new();
        for term in &self.components {
            if !seen.insert(term.kind) {
                return Err(RewardSpecError::Duplicate(term.kind.to_string()));
            }
            if !(term.weight.is_finite() && term.weight >= 0.0) {
                return Err(RewardSpecError::BadWeight {
                    name: term.kind.to_string(),
                    weight: term.weight,
                });
            }
            if let Some(p) = term.params.keys().find(|p| !term.kind.params().contains(&p.as_str())) {
                return Err(RewardSpecError::UnknownParam {
                    name: term.kind.to_string(),
                    param: p.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, kind: RewardKind) -> bool {
        self.components.iter().any(|t| t.kind == kind)
    }
}

/// What one agent experienced during one control step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RewardContext {
    /// Signed meters advanced along the track this step.
    pub d: f64,
    /// Target advance per step, meters.
    pub s_target_step: f64,
    /// Target speed, m/s.
    pub s_target: f64,
    /// Most recent angles, oldest first; only the last three are used.
    pub angles: Vec<f64>,
    pub damage_delta: f64,
    pub turned_backward: bool,
    pub lap_completed: bool,
    /// Average speed over the lap just completed, m/s.
    pub s_avg: f64,
    pub rank_prev: u32,
    pub rank_now: u32,
    pub race_over: bool,
}

pub fn progress_reward(d: f64, s_target: f64) -> f64 {
    (d / s_target).min(1.0)
}

pub fn average_speed_reward(s_avg: f64, s_target: f64, lap_completed: bool) -> f64 {
    if lap_completed {
        s_avg / s_target
    } else {
        0.0
    }
}

pub fn angular_acceleration_penalty(a_t: f64, a_t1: f64, a_t2: f64, alpha_reference: f64) -> f64 {
    (a_t + a_t2 - 2.0 * a_t1).abs() / alpha_reference
}

pub fn fixed_event_penalties(turned_backward: bool, damage_delta: f64) -> (f64, f64) {
    (
        if turned_backward { 1.0 } else { 0.0 },
        if damage_delta > 0.0 { 1.0 } else { 0.0 },
    )
}

pub fn overtake_and_rank_rewards(rank_prev: u32, rank_now: u32, race_over: bool) -> (u32, u32) {
    let overtakes = rank_prev.saturating_sub(rank_now);
    let rank1 = u32::from(race_over && rank_now == 1);
    (overtakes, rank1)
}

/// Unweighted value of one component for this step.
pub fn component_value(term: &RewardTerm, ctx: &RewardContext) -> f64 {
    match term.kind {
        RewardKind::Progress => progress_reward(ctx.d, ctx.s_target_step),
        RewardKind::AverageSpeed => average_speed_reward(ctx.s_avg, ctx.s_target, ctx.lap_completed),
        RewardKind::AngularAccelerationPenalty => match ctx.angles.as_slice() {
            [.., a2, a1, a0] => {
                let alpha = term.params.get("alpha_reference").copied().unwrap_or(DEFAULT_ALPHA_REFERENCE);
                angular_acceleration_penalty(*a0, *a1, *a2, alpha)
            }
            _ => 0.0,
        },
        RewardKind::TurnBackwardPenalty => fixed_event_penalties(ctx.turned_backward, 0.0).0,
        RewardKind::CollisionPenalty => fixed_event_penalties(false, ctx.damage_delta).1,
        RewardKind::Overtake => overtake_and_rank_rewards(ctx.rank_prev, ctx.rank_now, ctx.race_over).0 as f64,
        RewardKind::Rank1 => overtake_and_rank_rewards(ctx.rank_prev, ctx.rank_now, ctx.race_over).1 as f64,
    }
}

/// Weighted sum of rewards minus weighted sum of penalties.
pub fn compose_reward(spec: &RewardSpec, ctx: &RewardContext) -> f64 {
    let mut rewards = 0.0;
    let mut penalties = 0.0;
    for term in &spec.components {
        let v = term.weight * component_value(term, ctx);
        if term.kind.is_penalty() {
            penalties += v;
        } else {
            rewards += v;
        }
    }
    rewards - penalties
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    OneLap,
    Rank1,
    /// Same success test as `Rank1`, kept under its own name.
    RaceOver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DoneCondition {
    TurnBackward,
    OutOfTrack,
    Collision,
    Timeout,
    TaskComplete(TaskKind),
}

impl FromStr for DoneCondition {
    type Err = RewardSpecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "turn_backward" => DoneCondition::TurnBackward,
            "out_of_track" => DoneCondition::OutOfTrack,
            "collision" => DoneCondition::Collision,
            "timeout" => DoneCondition::Timeout,
            "one_lap" => DoneCondition::TaskComplete(TaskKind::OneLap),
            "rank_1" => DoneCondition::TaskComplete(TaskKind::Rank1),
            "race_over" => DoneCondition::TaskComplete(TaskKind::RaceOver),
            other => return Err(RewardSpecError::UnknownDone(other.to_string())),
        })
    }
}

impl DoneCondition {
    pub fn name(self) -> &'static str {
        match self {
            DoneCondition::TurnBackward => "turn_backward",
            DoneCondition::OutOfTrack => "out_of_track",
            DoneCondition::Collision => "collision",
            DoneCondition::Timeout => "timeout",
            DoneCondition::TaskComplete(TaskKind::OneLap) => "one_lap",
            DoneCondition::TaskComplete(TaskKind::Rank1) => "rank_1",
            DoneCondition::TaskComplete(TaskKind::RaceOver) => "race_over",
        }
    }
}

/// Why an agent's episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    TaskComplete,
    Timeout,
    Collision,
    TurnBackward,
    OutOfTrack,
    /// The agent itself asked to stop.
    Meta,
    Disconnected,
    /// The simulation produced a non-finite state.
    Fault,
}

impl DoneReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DoneReason::TaskComplete => "task_complete",
            DoneReason::Timeout => "timeout",
            DoneReason::Collision => "collision",
            DoneReason::TurnBackward => "turn_backward",
            DoneReason::OutOfTrack => "out_of_track",
            DoneReason::Meta => "meta",
            DoneReason::Disconnected => "disconnected",
            DoneReason::Fault => "fault",
        }
    }
}

impl fmt::Display for DoneReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DoneReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            DoneReason::TaskComplete,
            DoneReason::Timeout,
            DoneReason::Collision,
            DoneReason::TurnBackward,
            DoneReason::OutOfTrack,
            DoneReason::Meta,
            DoneReason::Disconnected,
            DoneReason::Fault,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
        .ok_or_else(|| format!("unknown done reason `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneSpec {
    pub conditions: Vec<DoneCondition>,
    pub max_steps: u64,
    /// Allowed track_pos interval before out_of_track fires.
    pub track_limits: (f64, f64),
}

impl Default for DoneSpec {
    fn default() -> Self {
        Self {
            conditions: Vec::new(),
            max_steps: 10_000,
            track_limits: (-1.0, 1.0),
        }
    }
}

impl DoneSpec {
    pub fn validate(&self) -> Result<(), RewardSpecError> {
        if self.max_steps == 0 {
            return Err(RewardSpecError::MaxSteps);
        }
        Ok(())
    }

    fn has(&self, c: DoneCondition) -> bool {
        self.conditions.contains(&c)
    }

    fn task_complete(&self, s: &DoneInput) -> bool {
        self.conditions.iter().any(|c| match c {
            DoneCondition::TaskComplete(TaskKind::OneLap) => s.laps_completed >= 1,
            DoneCondition::TaskComplete(TaskKind::Rank1 | TaskKind::RaceOver) => s.rank_now == 1 && s.rank_start > 1,
            _ => false,
        })
    }
}

/// The slice of an agent's episode state the done check looks at.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DoneInput {
    pub step_count: u64,
    pub angle: f64,
    pub track_pos: f64,
    pub damage_delta: f64,
    pub laps_completed: u32,
    pub rank_now: u32,
    pub rank_start: u32,
}

pub fn turned_backward(angle: f64) -> bool {
    angle.abs() > FRAC_PI_2
}

/// First firing condition in the fixed order task_complete, timeout,
/// collision, turn_backward, out_of_track.
pub fn evaluate_done(spec: &DoneSpec, s: &DoneInput) -> Option<DoneReason> {
    let (lo, hi) = spec.track_limits;
    if spec.task_complete(s) {
        Some(DoneReason::TaskComplete)
    } else if spec.has(DoneCondition::Timeout) && s.step_count >= spec.max_steps {
        Some(DoneReason::Timeout)
    } else if spec.has(DoneCondition::Collision) && s.damage_delta > 0.0 {
        Some(DoneReason::Collision)
    } else if spec.has(DoneCondition::TurnBackward) && turned_backward(s.angle) {
        Some(DoneReason::TurnBackward)
    } else if spec.has(DoneCondition::OutOfTrack) && !(lo..=hi).contains(&s.track_pos) {
        Some(DoneReason::OutOfTrack)
    } else {
        None
    }
}

/// Running per-agent bookkeeping for rewards and dones across one episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeTracker {
    pub step_count: u64,
    pub angles: Vec<f64>,
    pub last_damage: f64,
    pub last_progress: f64,
    pub laps_completed: u32,
    pub lap_start_time: f64,
    pub lap_start_progress: f64,
    pub rank_start: u32,
    pub rank_prev: u32,
    pub done: Option<DoneReason>,
    pub total_reward: f64,
}

/// One step's observation of an agent, as seen by the tracker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepObservation {
    pub angle: f64,
    pub track_pos: f64,
    pub damage: f64,
    pub progress: f64,
    pub lap_length: f64,
    pub time: f64,
    pub rank: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: Option<DoneReason>,
    pub context: RewardContext,
}

impl EpisodeTracker {
    pub fn new(initial_rank: u32) -> Self {
        Self {
            rank_start: initial_rank,
            rank_prev: initial_rank,
            ..Self::default()
        }
    }

    /// Advance by one control step; `target_speed` is in m/s and `dt` the control period.
    pub fn step(
        &mut self,
        obs: StepObservation,
        rewards: &RewardSpec,
        dones: &DoneSpec,
        target_speed: f64,
        dt: f64,
    ) -> StepOutcome {
        self.step_count += 1;
        self.angles.push(obs.angle);
        if self.angles.len() > 3 {
            self.angles.remove(0);
        }
        let damage_delta = obs.damage - self.last_damage;
        self.last_damage = obs.damage;
        let d = obs.progress - self.last_progress;
        self.last_progress = obs.progress;

        let mut lap_completed = false;
        let mut s_avg = 0.0;
        if obs.progress - self.lap_start_progress >= obs.lap_length {
            lap_completed = true;
            let lap_time = obs.time - self.lap_start_time;
            s_avg = if lap_time > 0.0 { obs.lap_length / lap_time } else { 0.0 };
            self.laps_completed += 1;
            self.lap_start_time = obs.time;
            self.lap_start_progress += obs.lap_length;
        }

        let done_input = DoneInput {
            step_count: self.step_count,
            angle: obs.angle,
            track_pos: obs.track_pos,
            damage_delta,
            laps_completed: self.laps_completed,
            rank_now: obs.rank,
            rank_start: self.rank_start,
        };
        let done = self.done.or_else(|| evaluate_done(dones, &done_input));
        let context = RewardContext {
            d,
            s_target_step: target_speed * dt,
            s_target: target_speed,
            angles: self.angles.clone(),
            damage_delta,
            turned_backward: turned_backward(obs.angle),
            lap_completed,
            s_avg,
            rank_prev: self.rank_prev,
            rank_now: obs.rank,
            race_over: done.is_some(),
        };
        let reward = compose_reward(rewards, &context);
        self.total_reward += reward;
        self.rank_prev = obs.rank;
        self.done = done;
        StepOutcome { reward, done, context }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn progress_cap() {
        assert_eq!(progress_reward(0.0, 0.5), 0.0);
        assert_eq!(progress_reward(0.5, 0.5), 1.0);
        assert_eq!(progress_reward(1.0, 0.5), 1.0);
        let s = 100.0 / 3.6 * 0.02;
        assert!((progress_reward(0.2778, s) - 0.5).abs() < 1e-4);
        assert!(progress_reward(-0.1, 0.5) < 0.0);
    }

    #[test]
    fn average_speed_gating() {
        assert_eq!(average_speed_reward(20.0, 10.0, false), 0.0);
        assert_eq!(average_speed_reward(10.0, 10.0, true), 1.0);
        assert!((average_speed_reward(12.0, 10.0, true) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn angular_penalty_examples() {
        assert_eq!(angular_acceleration_penalty(0.1, 0.1, 0.1, 2.0), 0.0);
        assert!((angular_acceleration_penalty(2.0, 0.5, 0.0, 2.0) - 0.5).abs() < 1e-12);
        assert!(angular_acceleration_penalty(0.3, 0.2, 0.1, 2.0).abs() < 1e-12);
    }

    #[test]
    fn events_and_ranks() {
        assert_eq!(fixed_event_penalties(false, 0.0), (0.0, 0.0));
        assert_eq!(fixed_event_penalties(false, 1.0), (0.0, 1.0));
        assert_eq!(fixed_event_penalties(true, 0.0), (1.0, 0.0));
        assert_eq!(overtake_and_rank_rewards(3, 2, false), (1, 0));
        assert_eq!(overtake_and_rank_rewards(5, 2, false), (3, 0));
        assert_eq!(overtake_and_rank_rewards(2, 3, false), (0, 0));
        assert_eq!(overtake_and_rank_rewards(1, 1, true), (0, 1));
        assert_eq!(overtake_and_rank_rewards(2, 2, true), (0, 0));
    }

    #[test]
    fn composition_example() {
        let spec = RewardSpec::from_weights([("progress", 1.0), ("collision_penalty", 10.0)]).unwrap();
        let ctx = RewardContext {
            d: 0.6,
            s_target_step: 1.0,
            damage_delta: 1.0,
            ..Default::default()
        };
        assert!((compose_reward(&spec, &ctx) + 9.4).abs() < 1e-12);
        assert_eq!(compose_reward(&RewardSpec::default(), &ctx), 0.0);
    }

    #[test]
    fn spec_validation() {
        assert!(RewardSpec::from_weights([
            ("progress", 1.0),
            ("average_speed", 1.0),
            ("collision_penalty", 10.0),
            ("turn_backward_penalty", 10.0),
            ("angular_acceleration_penalty", 5.0),
        ])
        .is_ok());
        assert_eq!(
            RewardSpec::from_weights([("speedy", 1.0)]),
            Err(RewardSpecError::UnknownComponent("speedy".into()))
        );
        assert!(RewardSpec::from_weights([("progress", 1.0), ("progress", 2.0)]).is_err());
        assert!(RewardSpec::from_weights([("progress", f64::NAN)]).is_err());
    }

    fn spec(conds: &[&str]) -> DoneSpec {
        DoneSpec {
            conditions: conds.iter().map(|c| c.parse().unwrap()).collect(),
            max_steps: 100,
            track_limits: (-1.0, 1.0),
        }
    }

    #[test]
    fn done_examples() {
        let all = spec(&["one_lap", "timeout", "collision", "turn_backward", "out_of_track"]);
        let base = DoneInput {
            rank_now: 1,
            rank_start: 1,
            ..Default::default()
        };
        assert_eq!(evaluate_done(&all, &base), None);
        let t = DoneInput {
            step_count: 100,
            ..base.clone()
        };
        assert_eq!(evaluate_done(&all, &t), Some(DoneReason::Timeout));
        let o = DoneInput {
            track_pos: 1.01,
            ..base.clone()
        };
        assert_eq!(evaluate_done(&all, &o), Some(DoneReason::OutOfTrack));
        let l = DoneInput {
            laps_completed: 1,
            step_count: 100,
            track_pos: 3.0,
            ..base.clone()
        };
        assert_eq!(evaluate_done(&all, &l), Some(DoneReason::TaskComplete));
        let b = DoneInput {
            angle: 2.0,
            track_pos: 2.0,
            ..base.clone()
        };
        assert_eq!(evaluate_done(&all, &b), Some(DoneReason::TurnBackward));
        assert_eq!(evaluate_done(&spec(&[]), &b), None);
        assert!("flying".parse::<DoneCondition>().is_err());
    }

    #[test]
    fn rank_task_needs_an_overtake() {
        let s = spec(&["rank_1"]);
        let mut i = DoneInput {
            rank_now: 1,
            rank_start: 1,
            ..Default::default()
        };
        assert_eq!(evaluate_done(&s, &i), None);
        i.rank_start = 3;
        assert_eq!(evaluate_done(&s, &i), Some(DoneReason::TaskComplete));
    }

    #[test]
    fn tracker_latches_done_and_counts_laps() {
        let rewards = RewardSpec::from_weights([("progress", 1.0), ("average_speed", 1.0)]).unwrap();
        let dones = spec(&["out_of_track"]);
        let mut t = EpisodeTracker::new(1);
        let obs = |progress: f64, tp: f64, time: f64| StepObservation {
            angle: 0.0,
            track_pos: tp,
            damage: 0.0,
            progress,
            lap_length: 10.0,
            time,
            rank: 1,
        };
        let a = t.step(obs(1.0, 0.0, 0.1), &rewards, &dones, 50.0, 0.02);
        assert_eq!(a.done, None);
        assert_eq!(a.reward, 1.0);
        let b = t.step(obs(10.0, 0.0, 1.0), &rewards, &dones, 10.0, 0.02);
        assert!(b.context.lap_completed);
        assert!((b.context.s_avg - 10.0).abs() < 1e-12);
        let c = t.step(obs(11.0, 1.5, 1.1), &rewards, &dones, 10.0, 0.02);
        assert_eq!(c.done, Some(DoneReason::OutOfTrack));
        let d = t.step(obs(12.0, 0.0, 1.2), &rewards, &dones, 10.0, 0.02);
        assert_eq!(d.done, Some(DoneReason::OutOfTrack));
    }
}
