//! Text codec for the UDP protocol. Every datagram is ASCII; values travel
//! as parenthesized groups `(name v1 v2 ...)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{AgentAction, DesireAction, PrimitiveAction};
use crate::reward::DoneReason;
use crate::sensing::{SensorFrame, NUM_BEAMS, NUM_SECTORS};

pub const IDENTIFIED: &str = "***identified***";
pub const RESTART: &str = "***restart***";
pub const SHUTDOWN: &str = "***shutdown***";
const ERROR_PREFIX: &str = "***error***";
const DONE_PREFIX: &str = "***done***";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("expected field `{expected}`, found `{found}`")]
    UnexpectedField { expected: String, found: String },
    #[error("field `{field}` has {found} values, expected {expected}")]
    Arity { field: String, expected: usize, found: usize },
    #[error("field `{field}`: cannot parse `{value}`")]
    BadValue { field: String, value: String },
}

/// Format like C's `%g`: 6 significant digits, trailing zeros removed,
/// scientific notation outside [1e-4, 1e6). Negative zero prints as `0`.
pub fn format_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        let s = strip_zeros(&format!("{x:.decimals$}"));
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    }
}

fn strip_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Fixed six decimals, used for action values.
pub fn format_fixed(x: f64) -> String {
    let s = format!("{x:.6}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn parse_f64(field: &str, v: &str) -> Result<f64, CodecError> {
    v.parse().map_err(|_| CodecError::BadValue {
        field: field.into(),
        value: v.into(),
    })
}

fn parse_i64(field: &str, v: &str) -> Result<i64, CodecError> {
    v.parse().map_err(|_| CodecError::BadValue {
        field: field.into(),
        value: v.into(),
    })
}

/// Split `(a 1 2)(b 3)` into `[("a", ["1", "2"]), ("b", ["3"])]`.
pub fn parse_groups(text: &str) -> Result<Vec<(&str, Vec<&str>)>, CodecError> {
    let mut out = Vec::new();
    let mut rest = text.trim();
    while !rest.is_empty() {
        let body = rest
            .strip_prefix('(')
            .ok_or_else(|| CodecError::Malformed(format!("expected `(` at `{}`", preview(rest))))?;
        let end = body
            .find(')')
            .ok_or_else(|| CodecError::Malformed("unterminated group".into()))?;
        let inner = &body[..end];
        if inner.contains('(') {
            return Err(CodecError::Malformed(format!("nested group in `{inner}`")));
        }
        let mut words = inner.split_whitespace();
        let name = words
            .next()
            .ok_or_else(|| CodecError::Malformed("empty group".into()))?;
        out.push((name, words.collect()));
        rest = body[end + 1..].trim_start();
    }
    Ok(out)
}

fn preview(s: &str) -> &str {
    let end = s.char_indices().nth(24).map_or(s.len(), |(i, _)| i);
    &s[..end]
}

/// A sensor frame together with the server-side reward and done verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorMessage {
    pub frame: SensorFrame,
    pub reward: f64,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

fn push_group(out: &mut String, name: &str, values: impl IntoIterator<Item = String>) {
    out.push('(');
    out.push_str(name);
    for v in values {
        out.push(' ');
        out.push_str(&v);
    }
    out.push(')');
}

pub fn encode_sensor(msg: &SensorMessage) -> String {
    let f = &msg.frame;
    let mut out = String::with_capacity(1024);
    let one = |v: f64| std::iter::once(format_g(v));
    push_group(&mut out, "angle", one(f.angle));
    push_group(&mut out, "curLapTime", one(f.cur_lap_time));
    push_group(&mut out, "damage", one(f.damage));
    push_group(&mut out, "distFromStart", one(f.dist_from_start));
    push_group(&mut out, "distRaced", one(f.dist_raced));
    push_group(&mut out, "gear", std::iter::once(f.gear.to_string()));
    push_group(&mut out, "racePos", std::iter::once(f.race_pos.to_string()));
    push_group(&mut out, "rpm", one(f.rpm));
    push_group(&mut out, "speedX", one(f.speed_x));
    push_group(&mut out, "speedY", one(f.speed_y));
    push_group(&mut out, "speedZ", one(f.speed_z));
    push_group(&mut out, "track", f.track.iter().map(|&v| format_g(v)));
    push_group(&mut out, "trackPos", one(f.track_pos));
    push_group(&mut out, "opponents", f.opponents.iter().map(|&v| format_g(v)));
    push_group(&mut out, "reward", one(msg.reward));
    push_group(&mut out, "done", std::iter::once(u8::from(msg.done).to_string()));
    let reason = msg.done_reason.map_or("none", DoneReason::as_str);
    push_group(&mut out, "doneReason", std::iter::once(reason.to_string()));
    if !f.comms.is_empty() {
        push_group(&mut out, "comms", f.comms.iter().map(|&v| format_g(v)));
    }
    out
}

const SENSOR_FIELDS: [(&str, usize); 17] = [
    ("angle", 1),
    ("curLapTime", 1),
    ("damage", 1),
    ("distFromStart", 1),
    ("distRaced", 1),
    ("gear", 1),
    ("racePos", 1),
    ("rpm", 1),
    ("speedX", 1),
    ("speedY", 1),
    ("speedZ", 1),
    ("track", NUM_BEAMS),
    ("trackPos", 1),
    ("opponents", NUM_SECTORS),
    ("reward", 1),
    ("done", 1),
    ("doneReason", 1),
];

/// Decode a sensor string; the field order must be exactly the encoder's.
pub fn decode_sensor(text: &str) -> Result<SensorMessage, CodecError> {
    let groups = parse_groups(text)?;
    if groups.len() < SENSOR_FIELDS.len() {
        return Err(CodecError::Malformed(format!(
            "sensor message has {} fields, expected at least {}",
            groups.len(),
            SENSOR_FIELDS.len()
        )));
    }
    for (&(expected, arity), (name, values)) in SENSOR_FIELDS.iter().zip(&groups) {
        if *name != expected {
            return Err(CodecError::UnexpectedField {
                expected: expected.into(),
                found: (*name).into(),
            });
        }
        if values.len() != arity {
            return Err(CodecError::Arity {
                field: expected.into(),
                expected: arity,
                found: values.len(),
            });
        }
    }
    let num = |k: usize| parse_f64(SENSOR_FIELDS[k].0, groups[k].1[0]);
    let list = |k: usize| {
        groups[k]
            .1
            .iter()
            .map(|v| parse_f64(SENSOR_FIELDS[k].0, v))
            .collect::<Result<Vec<_>, _>>()
    };
    let race_pos = parse_i64("racePos", groups[6].1[0])?;
    let gear = parse_i64("gear", groups[5].1[0])?;
    let done = match groups[15].1[0] {
        "0" => false,
        "1" => true,
        other => {
            return Err(CodecError::BadValue {
                field: "done".into(),
                value: other.into(),
            })
        }
    };
    let done_reason = match groups[16].1[0] {
        "none" => None,
        other => Some(other.parse::<DoneReason>().map_err(|_| CodecError::BadValue {
            field: "doneReason".into(),
            value: other.into(),
        })?),
    };
    let comms = match groups.get(SENSOR_FIELDS.len()) {
        None => Vec::new(),
        Some(("comms", values)) => values
            .iter()
            .map(|v| parse_f64("comms", v))
            .collect::<Result<_, _>>()?,
        Some((other, _)) => {
            return Err(CodecError::UnexpectedField {
                expected: "comms".into(),
                found: (*other).into(),
            })
        }
    };
    if groups.len() > SENSOR_FIELDS.len() + 1 {
        return Err(CodecError::Malformed("trailing fields after comms".into()));
    }
    let frame = SensorFrame {
        angle: num(0)?,
        cur_lap_time: num(1)?,
        damage: num(2)?,
        dist_from_start: num(3)?,
        dist_raced: num(4)?,
        gear: i32::try_from(gear).map_err(|_| CodecError::BadValue {
            field: "gear".into(),
            value: gear.to_string(),
        })?,
        race_pos: u32::try_from(race_pos).map_err(|_| CodecError::BadValue {
            field: "racePos".into(),
            value: race_pos.to_string(),
        })?,
        rpm: num(7)?,
        speed_x: num(8)?,
        speed_y: num(9)?,
        speed_z: num(10)?,
        track: list(11)?,
        track_pos: num(12)?,
        opponents: list(13)?,
        comms,
    };
    Ok(SensorMessage {
        frame,
        reward: num(14)?,
        done,
        done_reason,
    })
}

/// Client-to-server actions as numbers on the wire, before any
/// normalization mapping or clipping.
pub fn encode_action(action: &AgentAction) -> String {
    let mut out = String::with_capacity(64);
    match action {
        AgentAction::Primitive(p) => {
            push_group(&mut out, "accel", [format_fixed(p.accel)]);
            push_group(&mut out, "brake", [format_fixed(p.brake)]);
            push_group(&mut out, "steer", [format_fixed(p.steer)]);
            if let Some(g) = p.gear {
                push_group(&mut out, "gear", [g.to_string()]);
            }
        }
        AgentAction::Desire(d) => {
            push_group(&mut out, "trackpos", [format_fixed(d.track_pos)]);
            push_group(&mut out, "speed", [format_fixed(d.speed)]);
        }
    }
    out
}

pub fn encode_meta() -> String {
    "(meta 1)".into()
}

pub fn encode_init(client_id: &str, beam_angles_deg: &[f64]) -> String {
    let mut out = String::with_capacity(16 + 8 * beam_angles_deg.len());
    out.push_str(client_id);
    push_group(&mut out, "init", beam_angles_deg.iter().map(|&a| format_g(a)));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    Init { client_id: String, beam_angles_deg: Vec<f64> },
    Action(AgentAction),
    Meta,
}

pub fn decode_client(text: &str) -> Result<ClientMessage, CodecError> {
    let text = text.trim();
    if let Some(idx) = text.find("(init") {
        let client_id = text[..idx].to_string();
        let groups = parse_groups(&text[idx..])?;
        let [(_, values)] = groups.as_slice() else {
            return Err(CodecError::Malformed("init takes exactly one group".into()));
        };
        if values.len() != NUM_BEAMS {
            return Err(CodecError::Arity {
                field: "init".into(),
                expected: NUM_BEAMS,
                found: values.len(),
            });
        }
        let beam_angles_deg = values
            .iter()
            .map(|v| parse_f64("init", v))
            .collect::<Result<_, _>>()?;
        return Ok(ClientMessage::Init {
            client_id,
            beam_angles_deg,
        });
    }
    let groups = parse_groups(text)?;
    let mut fields: Vec<(&str, f64)> = Vec::with_capacity(groups.len());
    for (name, values) in &groups {
        if !matches!(*name, "accel" | "brake" | "steer" | "gear" | "trackpos" | "speed" | "meta") {
            return Err(CodecError::Malformed(format!("unknown field `{name}`")));
        }
        if fields.iter().any(|(n, _)| n == name) {
            return Err(CodecError::Malformed(format!("field `{name}` repeated")));
        }
        if values.len() != 1 {
            return Err(CodecError::Arity {
                field: (*name).into(),
                expected: 1,
                found: values.len(),
            });
        }
        fields.push((name, parse_f64(name, values[0])?));
    }
    let get = |n: &str| fields.iter().find(|(k, _)| *k == n).map(|&(_, v)| v);
    if get("meta").is_some_and(|m| m != 0.0) {
        return Ok(ClientMessage::Meta);
    }
    if let (Some(track_pos), Some(speed)) = (get("trackpos"), get("speed")) {
        if fields.len() != 2 + usize::from(get("meta").is_some()) {
            return Err(CodecError::Malformed("desire actions carry only trackpos and speed".into()));
        }
        return Ok(ClientMessage::Action(AgentAction::Desire(DesireAction { track_pos, speed })));
    }
    match (get("accel"), get("brake"), get("steer")) {
        (Some(accel), Some(brake), Some(steer)) => {
            if get("trackpos").is_some() || get("speed").is_some() {
                return Err(CodecError::Malformed("mixed primitive and desire fields".into()));
            }
            let gear = match get("gear") {
                None => None,
                Some(g) if g.fract() == 0.0 && g.abs() < 100.0 => Some(g as i32),
                Some(g) => {
                    return Err(CodecError::BadValue {
                        field: "gear".into(),
                        value: g.to_string(),
                    })
                }
            };
            Ok(ClientMessage::Action(AgentAction::Primitive(PrimitiveAction {
                steer,
                accel,
                brake,
                gear,
            })))
        }
        _ => Err(CodecError::Malformed(format!(
            "incomplete action `{}`",
            preview(text)
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerMessage {
    Identified,
    Error(String),
    Sensor(Box<SensorMessage>),
    Done(DoneReason),
    Restart,
    Shutdown,
}

pub fn encode_server(msg: &ServerMessage) -> String {
    match msg {
        ServerMessage::Identified => IDENTIFIED.into(),
        ServerMessage::Error(reason) => format!("{ERROR_PREFIX} {reason}"),
        ServerMessage::Sensor(s) => encode_sensor(s),
        ServerMessage::Done(r) => {
            let mut out = String::from(DONE_PREFIX);
            let _ = write!(out, " (reason {})", r.as_str());
            out
        }
        ServerMessage::Restart => RESTART.into(),
        ServerMessage::Shutdown => SHUTDOWN.into(),
    }
}

pub fn decode_server(text: &str) -> Result<ServerMessage, CodecError> {
    let text = text.trim();
    match text {
        IDENTIFIED => return Ok(ServerMessage::Identified),
        RESTART => return Ok(ServerMessage::Restart),
        SHUTDOWN => return Ok(ServerMessage::Shutdown),
        _ => {}
    }
    if let Some(reason) = text.strip_prefix(ERROR_PREFIX) {
        return Ok(ServerMessage::Error(reason.trim().to_string()));
    }
    if let Some(rest) = text.strip_prefix(DONE_PREFIX) {
        let groups = parse_groups(rest)?;
        return match groups.as_slice() {
            [("reason", v)] if v.len() == 1 => v[0]
                .parse()
                .map(ServerMessage::Done)
                .map_err(|_| CodecError::BadValue {
                    field: "reason".into(),
                    value: v[0].into(),
                }),
            _ => Err(CodecError::Malformed(format!("bad done message `{}`", preview(text)))),
        };
    }
    decode_sensor(text).map(|s| ServerMessage::Sensor(Box::new(s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_format_matches_c() {
        let cases = [
            (0.0, "0"),
            (-0.0, "0"),
            (1.0, "1"),
            (200.0, "200"),
            (0.1, "0.1"),
            (-1.5, "-1.5"),
            (3.14159265, "3.14159"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (999999.5, "1e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-0.000001, "-1e-06"),
            (50.000001, "50"),
            (0.30000000000000004, "0.3"),
            (99.99996, "100"),
        ];
        for (x, s) in cases {
            assert_eq!(format_g(x), s, "{x}");
        }
    }

    #[test]
    fn fixed_format_drops_negative_zero() {
        assert_eq!(format_fixed(-0.0), "0.000000");
        assert_eq!(format_fixed(-1e-9), "0.000000");
        assert_eq!(format_fixed(0.5), "0.500000");
        assert_eq!(format_fixed(-0.25), "-0.250000");
    }

    #[test]
    fn desire_action_wire_form() {
        let a = AgentAction::Desire(DesireAction { track_pos: 0.0, speed: 0.5 });
        assert_eq!(encode_action(&a), "(trackpos 0.000000)(speed 0.500000)");
        assert_eq!(decode_client(&encode_action(&a)).unwrap(), ClientMessage::Action(a));
    }

    #[test]
    fn primitive_action_wire_form() {
        let mut p = PrimitiveAction::new(-0.5, 1.0, 0.0);
        p.gear = Some(2);
        let s = encode_action(&AgentAction::Primitive(p));
        assert_eq!(s, "(accel 1.000000)(brake 0.000000)(steer -0.500000)(gear 2)");
        assert_eq!(decode_client(&s).unwrap(), ClientMessage::Action(AgentAction::Primitive(p)));
        let no_gear = decode_client("(steer 0.1)(accel 0.2)(brake 0)").unwrap();
        assert_eq!(
            no_gear,
            ClientMessage::Action(AgentAction::Primitive(PrimitiveAction::new(0.1, 0.2, 0.0)))
        );
    }

    #[test]
    fn meta_and_bad_actions() {
        assert_eq!(decode_client("(meta 1)").unwrap(), ClientMessage::Meta);
        assert!(decode_client("(accel 1)(brake 0)").is_err());
        assert!(decode_client("(accel 1)(brake 0)(steer 0)(speed 1)").is_err());
        assert!(decode_client("(accel x)(brake 0)(steer 0)").is_err());
        assert!(decode_client("(fly 1)").is_err());
        assert!(decode_client("accel 1").is_err());
    }

    #[test]
    fn init_handshake() {
        let angles: Vec<f64> = (0..19).map(|i| -90.0 + 10.0 * i as f64).collect();
        let s = encode_init("SCR", &angles);
        assert!(s.starts_with("SCR(init -90 -80 "));
        assert!(s.ends_with(" 80 90)"));
        match decode_client(&s).unwrap() {
            ClientMessage::Init {
                client_id,
                beam_angles_deg,
            } => {
                assert_eq!(client_id, "SCR");
                assert_eq!(beam_angles_deg, angles);
            }
            other => panic!("{other:?}"),
        }
        let short = encode_init("SCR", &angles[..18]);
        assert!(matches!(decode_client(&short), Err(CodecError::Arity { found: 18, .. })));
    }

    #[test]
    fn sensor_round_trip() {
        let mut frame = SensorFrame {
            angle: 0.0123,
            speed_x: 49.87654321,
            race_pos: 2,
            gear: 3,
            ..SensorFrame::default()
        };
        frame.track[4] = 12.3456789;
        let msg = SensorMessage {
            frame,
            reward: -9.4,
            done: true,
            done_reason: Some(DoneReason::Collision),
        };
        let s = encode_sensor(&msg);
        assert!(s.starts_with("(angle 0.0123)(curLapTime 0)(damage 0)"));
        assert!(s.ends_with("(reward -9.4)(done 1)(doneReason collision)"));
        let back = decode_sensor(&s).unwrap();
        assert_eq!(back.frame.speed_x, 49.8765);
        assert_eq!(back.frame.track[4], 12.3457);
        assert_eq!(encode_sensor(&back), s);
    }

    #[test]
    fn sensor_with_comms_block() {
        let msg = SensorMessage {
            frame: SensorFrame {
                comms: vec![0.5, -1.0, 0.0],
                ..SensorFrame::default()
            },
            reward: 0.0,
            done: false,
            done_reason: None,
        };
        let s = encode_sensor(&msg);
        assert!(s.ends_with("(doneReason none)(comms 0.5 -1 0)"));
        assert_eq!(decode_sensor(&s).unwrap(), msg);
    }

    #[test]
    fn sensor_order_is_enforced() {
        let s = encode_sensor(&SensorMessage {
            frame: SensorFrame::default(),
            reward: 0.0,
            done: false,
            done_reason: None,
        });
        let swapped = s.replacen("(angle 0)(curLapTime 0)", "(curLapTime 0)(angle 0)", 1);
        assert!(matches!(decode_sensor(&swapped), Err(CodecError::UnexpectedField { .. })));
        let short = s.replacen("(track 200 ", "(track ", 1);
        assert!(matches!(decode_sensor(&short), Err(CodecError::Arity { .. })));
    }

    #[test]
    fn control_messages() {
        for m in [
            ServerMessage::Identified,
            ServerMessage::Restart,
            ServerMessage::Shutdown,
            ServerMessage::Done(DoneReason::OutOfTrack),
            ServerMessage::Error("init needs 19 angles".into()),
        ] {
            assert_eq!(decode_server(&encode_server(&m)).unwrap(), m);
        }
        assert_eq!(encode_server(&ServerMessage::Done(DoneReason::Timeout)), "***done*** (reason timeout)");
    }
}
