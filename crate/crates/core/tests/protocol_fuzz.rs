use multidrive::control::{AgentAction, DesireAction, PrimitiveAction};
use multidrive::protocol::{
    decode_client, decode_sensor, decode_server, encode_action, encode_sensor, encode_server, format_g, ClientMessage,
    SensorMessage, ServerMessage,
};
use multidrive::reward::DoneReason;
use multidrive::sensing::{SensorFrame, NUM_BEAMS, NUM_SECTORS};
use proptest::prelude::*;

const REASONS: [DoneReason; 8] = [
    DoneReason::TaskComplete,
    DoneReason::Timeout,
    DoneReason::Collision,
    DoneReason::TurnBackward,
    DoneReason::OutOfTrack,
    DoneReason::Meta,
    DoneReason::Disconnected,
    DoneReason::Fault,
];

fn actions() -> impl Strategy<Value = AgentAction> {
    let primitive = (-2.0f64..2.0, -1.0f64..2.0, -1.0f64..2.0, prop::option::of(-1i32..7))
        .prop_map(|(steer, accel, brake, gear)| AgentAction::Primitive(PrimitiveAction { steer, accel, brake, gear }));
    let desire =
        (-3.0f64..3.0, -3.0f64..3.0).prop_map(|(track_pos, speed)| AgentAction::Desire(DesireAction { track_pos, speed }));
    prop_oneof![primitive, desire]
}

fn values(a: &AgentAction) -> Vec<f64> {
    match a {
        AgentAction::Primitive(p) => vec![p.steer, p.accel, p.brake, p.gear.map_or(f64::NAN, f64::from)],
        AgentAction::Desire(d) => vec![d.track_pos, d.speed],
    }
}

/// Relative closeness expected after printing with six significant digits.
fn close_g(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 5e-6 * a.abs().max(b.abs())
}

fn messages() -> impl Strategy<Value = SensorMessage> {
    (
        (-3.2f64..3.2, -3.0f64..3.0, -50.0f64..300.0, 0.0f64..10_000.0, -1i32..7, 1u32..10),
        prop::collection::vec(-1.0f64..=200.0, NUM_BEAMS),
        prop::collection::vec(0.0f64..=200.0, NUM_SECTORS),
        (-100.0f64..100.0, prop::option::of(prop::sample::select(REASONS.to_vec()))),
        prop::collection::vec(-1.0f64..=1.0, 0..6),
    )
        .prop_map(|((angle, track_pos, speed_x, dist, gear, race_pos), track, opponents, (reward, reason), comms)| {
            SensorMessage {
                frame: SensorFrame {
                    angle,
                    track,
                    track_pos,
                    speed_x,
                    opponents,
                    gear,
                    dist_raced: dist,
                    dist_from_start: dist % 714.159,
                    race_pos,
                    comms,
                    ..SensorFrame::default()
                },
                reward,
                done: reason.is_some(),
                done_reason: reason,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn actions_survive_the_wire(action in actions()) {
        let text = encode_action(&action);
        let ClientMessage::Action(back) = decode_client(&text).unwrap() else {
            panic!("`{text}` did not decode to an action");
        };
        for (x, y) in values(&action).iter().zip(values(&back)) {
            prop_assert!((x.is_nan() && y.is_nan()) || (x - y).abs() <= 5e-7, "{x} vs {y} in `{text}`");
        }
        prop_assert_eq!(encode_action(&back), text);
    }

    #[test]
    fn sensors_survive_the_wire(msg in messages()) {
        let text = encode_sensor(&msg);
        let back = decode_sensor(&text).unwrap();
        let (f, g) = (&msg.frame, &back.frame);
        prop_assert!(close_g(f.angle, g.angle) && close_g(f.track_pos, g.track_pos) && close_g(f.speed_x, g.speed_x));
        prop_assert!(close_g(f.dist_raced, g.dist_raced) && close_g(msg.reward, back.reward));
        prop_assert!(f.track.iter().zip(&g.track).all(|(a, b)| close_g(*a, *b)));
        prop_assert!(f.opponents.iter().zip(&g.opponents).all(|(a, b)| close_g(*a, *b)));
        prop_assert_eq!(f.comms.len(), g.comms.len());
        prop_assert_eq!((f.gear, f.race_pos), (g.gear, g.race_pos));
        prop_assert_eq!((msg.done, msg.done_reason), (back.done, back.done_reason));
        prop_assert_eq!(encode_sensor(&back), text);
    }

    #[test]
    fn g_format_reparses_closely(x in prop::num::f64::NORMAL) {
        let y: f64 = format_g(x).parse().unwrap();
        prop_assert!(close_g(x, y), "{x} -> {}", format_g(x));
    }

    #[test]
    fn arbitrary_text_never_panics(text in ".{0,200}") {
        let _ = decode_client(&text);
        let _ = decode_server(&text);
    }

    #[test]
    fn corrupted_actions_are_rejected(action in actions(), cut in 1usize..40) {
        let text = encode_action(&action);
        let cut = cut.min(text.len() - 1);
        if let Ok(ClientMessage::Action(_)) = decode_client(&text[..cut]) {
            prop_assert!(false, "truncated `{}` accepted", &text[..cut]);
        }
    }
}

#[test]
fn invalid_actions_are_rejected() {
    for bad in [
        "",
        "(accel 1)(brake 0)",
        "(accel 1)(brake 0)(steer x)",
        "(accel 1)(brake 0)(steer 0)(steer 0)",
        "(accel 1)(brake 0)(steer 0)(gear 2.5)",
        "(accel 1)(brake 0)(steer 0)(trackpos 0)",
        "(trackpos 0)(speed 0)(gear 1)",
        "(accel 1 2)(brake 0)(steer 0)",
        "(accel 1)(brake 0)(steer 0)(nitro 1)",
        "(accel 1)(brake (0))(steer 0)",
        "(accel 1",
    ] {
        assert!(decode_client(bad).is_err(), "accepted `{bad}`");
    }
    assert_eq!(decode_client("(meta 1)").unwrap(), ClientMessage::Meta);
}

#[test]
fn control_messages_round_trip() {
    let mut all = vec![ServerMessage::Identified, ServerMessage::Restart, ServerMessage::Shutdown];
    all.push(ServerMessage::Error("unknown client".into()));
    all.extend(REASONS.iter().map(|&r| ServerMessage::Done(r)));
    for msg in all {
        assert_eq!(decode_server(&encode_server(&msg)).unwrap(), msg);
    }
    assert!(decode_server("***done*** (reason exploded)").is_err());
}
