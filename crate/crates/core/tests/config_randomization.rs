use std::path::Path;

use multidrive::config::{
    apply_curriculum, load_communications, load_config, parse_communications, parse_config, sample_episode_setup,
    AgentConfig, CurriculumStage, ParkingLayout, SimulationConfig,
};
use multidrive::track::builtin_track;
use multidrive::traffic::{TrafficBehavior, TrafficConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn minimal_config_fills_defaults() {
    let cfg = parse_config("[[agents]]\n").unwrap();
    assert_eq!(cfg.n_learning(), 1);
    assert!(cfg.traffic.is_empty());
    assert_eq!(cfg.server.track_names, vec!["oval".to_string()]);
    assert_eq!(cfg.server.learning_car, vec!["stock".to_string()]);
}

#[test]
fn car_budget_inequality_is_enforced() {
    let doc = "[server]\nmax_cars = 6\nmin_traffic_cars = 5\n[[agents]]\n[[agents]]\n";
    let err = parse_config(doc).unwrap_err();
    assert!(err.key_path().is_some_and(|p| p.contains("min_traffic_cars") || p.contains("max_cars")), "{err}");
}

#[test]
fn action_noise_range_is_enforced() {
    let err = parse_config("[server]\naction_noise_std = 1.5\n[[agents]]\n").unwrap_err();
    assert!(err.key_path().is_some_and(|p| p.contains("action_noise_std")), "{err}");
}

#[test]
fn unknown_keys_and_names_are_rejected() {
    assert!(parse_config("[server]\nturbo = true\n[[agents]]\n").is_err());
    assert!(parse_config("[[agents]]\ndones = [\"explode\"]\n").is_err());
    assert!(parse_config("[[agents]]\n[agents.rewards]\nstyle = 1.0\n").is_err());
    assert!(parse_config("[[agents]]\n[agents.observations]\nmode = \"vision\"\n").is_err());
    assert!(parse_config("[[agents]]\npid_latency = 0\n").is_err());
}

#[test]
fn headless_display_keys_are_accepted() {
    let cfg = parse_config("[server]\nvisualise = true\nno_of_visualisations = 3\n[[agents]]\n").unwrap();
    assert!(cfg.server.visualise);
}

#[test]
fn shipped_configs_load() {
    for name in ["oval.toml", "two_agents.toml", "narrow_overtake.toml"] {
        let cfg = load_config(&configs_dir().join(name)).unwrap();
        assert!(cfg.n_learning() >= 1, "{name}");
    }
    let links = load_communications(&configs_dir().join("comms.toml")).unwrap();
    assert_eq!(links.len(), 2);
    assert!(parse_communications("[[agent]]\nid = 0\nvars = [\"wings\"]\ncomms = [1]\n").is_err());
}

#[test]
fn traffic_count_splits_evenly() {
    let mut cfg = SimulationConfig {
        agents: vec![AgentConfig::default()],
        traffic: vec![TrafficConfig::default(); 5],
        ..SimulationConfig::default()
    };
    cfg.server.max_cars = 6;
    cfg.server.min_traffic_cars = 4;
    cfg.server.randomize_env = true;
    cfg.validate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fours = 0;
    for _ in 0..10_000 {
        let n = sample_episode_setup(&cfg, &mut rng).unwrap().n_traffic;
        assert!(n == 4 || n == 5);
        fours += usize::from(n == 4);
    }
    let p = fours as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&p), "P(4) = {p}");

    cfg.server.max_cars = 5;
    for _ in 0..100 {
        assert_eq!(sample_episode_setup(&cfg, &mut rng).unwrap().n_traffic, 4);
    }
}

#[test]
fn spawn_track_pos_moments() {
    let mut cfg = SimulationConfig {
        agents: vec![AgentConfig::default()],
        traffic: vec![TrafficConfig {
            initial_track_pos: (-0.5, 0.5),
            ..TrafficConfig::default()
        }],
        ..SimulationConfig::default()
    };
    cfg.server.max_cars = 2;
    cfg.server.min_traffic_cars = 1;
    cfg.server.randomize_env = true;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| sample_episode_setup(&cfg, &mut rng).unwrap().traffic[0].spawn.track_pos)
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(draws.iter().all(|v| (-0.5..=0.5).contains(v)));
    assert!(mean.abs() <= 0.02, "mean {mean}");
}

#[test]
fn fixed_setups_repeat_without_randomization() {
    let cfg = load_config(&configs_dir().join("two_agents.toml")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = sample_episode_setup(&cfg, &mut rng).unwrap();
    let b = sample_episode_setup(&cfg, &mut rng).unwrap();
    assert_eq!(a, b);
}

fn bottleneck_config() -> SimulationConfig {
    let mut cfg = SimulationConfig {
        agents: vec![AgentConfig::default()],
        traffic: vec![
            TrafficConfig {
                behavior: TrafficBehavior::ParkedAgent,
                ..TrafficConfig::default()
            };
            2
        ],
        parking_layout: Some(ParkingLayout::Bottleneck {
            parking_distance: (30.0, 35.0),
            gap_width: (2.76, 4.06),
        }),
        curriculum: vec![
            CurriculumStage {
                until_episode: 240,
                gap_width: Some((2.76, 4.06)),
                ..CurriculumStage::default()
            },
            CurriculumStage {
                until_episode: 300,
                gap_width: Some((2.76, 3.46)),
                ..CurriculumStage::default()
            },
        ],
        ..SimulationConfig::default()
    };
    cfg.server.max_cars = 3;
    cfg.server.min_traffic_cars = 2;
    cfg.server.track_names = vec!["narrow".into()];
    cfg
}

fn gap_of(cfg: &SimulationConfig) -> (f64, f64) {
    match cfg.parking_layout {
        Some(ParkingLayout::Bottleneck { gap_width, .. }) => gap_width,
        _ => panic!("bottleneck layout expected"),
    }
}

#[test]
fn curriculum_stages_switch_after_the_boundary() {
    let base = bottleneck_config();
    base.validate().unwrap();
    assert_eq!(apply_curriculum(&[], 10, &base).unwrap(), base);
    assert_eq!(gap_of(&apply_curriculum(&base.curriculum, 1, &base).unwrap()), (2.76, 4.06));
    assert_eq!(gap_of(&apply_curriculum(&base.curriculum, 240, &base).unwrap()), (2.76, 4.06));
    assert_eq!(gap_of(&apply_curriculum(&base.curriculum, 241, &base).unwrap()), (2.76, 3.46));
    assert_eq!(gap_of(&apply_curriculum(&base.curriculum, 300, &base).unwrap()), (2.76, 3.46));
}

#[test]
fn curriculum_rejects_foreign_keys() {
    let doc = "[[agents]]\n[[curriculum]]\nuntil_episode = 10\nmax_steps = 5\n";
    assert!(parse_config(doc).is_err());
    let doc = "[[agents]]\n[[curriculum]]\nuntil_episode = 10\n[[curriculum]]\nuntil_episode = 10\n";
    assert!(parse_config(doc).is_err());
}

fn random_config() -> impl Strategy<Value = SimulationConfig> {
    (
        1usize..4,
        0usize..4,
        0usize..4,
        prop::collection::vec(prop::sample::select(vec!["oval", "serpent", "hairpin", "narrow"]), 1..4),
        prop::collection::vec(prop::sample::select(vec!["stock", "sedan", "coupe", "buggy", "dtm"]), 1..4),
        (0.0f64..1.0, any::<bool>(), any::<bool>()),
        (0.0f64..200.0, 0.0f64..100.0, -1.0f64..0.0, 0.0f64..1.0, 0.0f64..150.0),
    )
        .prop_map(|(n_l, min_t, extra, tracks, cars, (std, random, noisy), (d0, dw, tp0, tpw, speed))| {
            let mut cfg = SimulationConfig {
                agents: (0..n_l)
                    .map(|_| AgentConfig {
                        target_speed: speed,
                        ..AgentConfig::default()
                    })
                    .collect(),
                traffic: vec![
                    TrafficConfig {
                        initial_distance: (d0, d0 + dw),
                        initial_track_pos: (tp0, (tp0 + tpw).min(1.0)),
                        ..TrafficConfig::default()
                    };
                    min_t + extra
                ],
                ..SimulationConfig::default()
            };
            cfg.server.max_cars = n_l + min_t + extra;
            cfg.server.min_traffic_cars = min_t;
            cfg.server.track_names = tracks.into_iter().map(String::from).collect();
            cfg.server.learning_car = cars.into_iter().map(String::from).collect();
            cfg.server.action_noise_std = std;
            cfg.server.randomize_env = random;
            cfg.server.noisy_observations = noisy;
            cfg
        })
}

proptest! {
    #[test]
    fn toml_round_trip_is_identity(cfg in random_config()) {
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = parse_config(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn sampled_setups_respect_the_config(cfg in random_config(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let setup = sample_episode_setup(&cfg, &mut rng).unwrap();
        let s = &cfg.server;
        prop_assert!(s.track_names.contains(&setup.track));
        prop_assert_eq!(setup.learner_cars.len(), cfg.n_learning());
        prop_assert!(setup.learner_cars.iter().all(|c| s.learning_car.contains(c)));
        prop_assert!(setup.n_traffic >= s.min_traffic_cars && setup.n_traffic <= cfg.max_traffic());
        prop_assert_eq!(setup.traffic.len(), setup.n_traffic);
        let track = builtin_track(&setup.track).unwrap();
        for t in &setup.traffic {
            let (lo, hi) = t.config.initial_distance;
            prop_assert!(t.spawn.distance >= lo && t.spawn.distance <= hi);
            prop_assert!(track.wrap_s(t.spawn.distance).is_ok());
            let (plo, phi) = t.config.initial_track_pos;
            prop_assert!(t.spawn.track_pos >= plo && t.spawn.track_pos <= phi);
        }
        for (i, sp) in setup.learner_spawns.iter().enumerate() {
            prop_assert_eq!(sp.distance, s.distance_to_start - 10.0 * i as f64);
        }
        if !s.randomize_env {
            prop_assert_eq!(&sample_episode_setup(&cfg, &mut rng).unwrap(), &setup);
        }
    }

    #[test]
    fn curriculum_is_a_pure_function(episode in 1u64..400) {
        let base = bottleneck_config();
        let a = apply_curriculum(&base.curriculum, episode, &base).unwrap();
        let b = apply_curriculum(&base.curriculum, episode, &base).unwrap();
        prop_assert_eq!(a, b);
    }
}
