use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::thread;
use std::time::Duration;

use multidrive::config::{load_config, SimulationConfig};
use multidrive::harness::{
    compute_metrics, emit_plot_data, metrics_from_dir, outcomes_from_trace, plot_header, read_summary, read_trace,
    run_batch, run_udp_driver, scripted_records, trace_file_name, AgentSpec, BatchOptions, PlotKind, ScriptedDriver,
    ScriptedKind, SUMMARY_FILE,
};
use multidrive::reward::DoneReason;
use multidrive::server::udp::{UdpOptions, UdpServer};
use multidrive::server::{AgentOutcome, SessionKind, StepReport};

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn short_oval(max_steps: u64) -> SimulationConfig {
    let mut cfg = load_config(&configs_dir().join("oval.toml")).unwrap();
    cfg.server.max_steps = max_steps;
    cfg
}

fn outcome(fraction: f64, distance: f64, time: f64, reward: f64) -> AgentOutcome {
    AgentOutcome {
        agent: 0,
        steps: (time / 0.02) as u64,
        fraction_of_lap: fraction,
        distance,
        time,
        average_speed_kmh: distance / time * 3.6,
        lap_completed: fraction >= 1.0,
        final_rank: 1,
        damage: 0.0,
        total_reward: reward,
        done_reason: DoneReason::Timeout,
    }
}

#[test]
fn metrics_examples() {
    let m = compute_metrics(&[outcome(0.5, 100.0, 10.0, 2.0), outcome(1.0, 300.0, 10.0, 4.0)]).unwrap();
    assert_eq!(m.samples, 2);
    assert!((m.mean_fraction_of_lap - 0.75).abs() < 1e-12);
    assert!((m.average_speed_kmh - 72.0).abs() < 1e-9);
    assert!((m.completion_rate - 0.5).abs() < 1e-12);
    assert!((m.mean_total_reward - 3.0).abs() < 1e-12);
    assert!(compute_metrics(&[]).is_err());
}

#[test]
fn traces_rebuild_the_summary() {
    let cfg = short_oval(300);
    let records = scripted_records(&cfg, ScriptedKind::CenterFollow, 4, 3).unwrap();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert!(r.rows.iter().all(|row| row.step <= cfg.server.max_steps));
        assert!(r.rows.windows(2).all(|w| w[0].step <= w[1].step));
        let rebuilt = outcomes_from_trace(&r.rows, r.lap_length);
        assert_eq!(rebuilt.len(), r.summary.agents.len());
        for (a, b) in rebuilt.iter().zip(&r.summary.agents) {
            assert_eq!((a.agent, a.steps, a.final_rank, a.done_reason), (b.agent, b.steps, b.final_rank, b.done_reason));
            assert!((a.distance - b.distance).abs() < 1e-9);
            assert!((a.fraction_of_lap - b.fraction_of_lap).abs() < 1e-9);
            assert!((a.total_reward - b.total_reward).abs() < 1e-9);
        }
    }
}

#[test]
fn batch_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let opts = BatchOptions {
        episodes: 2,
        seed: 9,
        agent: AgentSpec::Scripted(ScriptedKind::Weave),
        out_dir: dir.path().to_path_buf(),
        realtime: false,
        connect_timeout: Duration::from_secs(1),
    };
    let cfg = short_oval(200);
    let summary = run_batch(&cfg, "oval", &opts).unwrap();
    assert_eq!(read_summary(&dir.path().join(SUMMARY_FILE)).unwrap(), summary);
    assert_eq!(summary.episodes.len(), 2);
    for e in &summary.episodes {
        assert_eq!(e.trace, trace_file_name(e.episode));
        let rows = read_trace(&dir.path().join(&e.trace)).unwrap();
        assert!(!rows.is_empty());
    }
    let recomputed = metrics_from_dir(dir.path()).unwrap();
    let emitted = summary.metrics.clone().unwrap();
    assert_eq!(recomputed.samples, emitted.samples);
    assert!((recomputed.mean_fraction_of_lap - emitted.mean_fraction_of_lap).abs() < 1e-9);
    assert!((recomputed.average_speed_kmh - emitted.average_speed_kmh).abs() < 1e-9);
    assert!((recomputed.mean_total_reward - emitted.mean_total_reward).abs() < 1e-9);
}

#[test]
fn empty_batch_has_no_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let opts = BatchOptions {
        episodes: 0,
        seed: 1,
        agent: AgentSpec::Scripted(ScriptedKind::CenterFollow),
        out_dir: dir.path().to_path_buf(),
        realtime: false,
        connect_timeout: Duration::from_secs(1),
    };
    let summary = run_batch(&short_oval(10), "oval", &opts).unwrap();
    assert!(summary.episodes.is_empty());
    assert!(summary.metrics.is_none());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn plot_tables() {
    for (kind, name) in [
        (PlotKind::EpisodeReward, "episode_reward"),
        (PlotKind::SpeedProfile, "speed_profile"),
        (PlotKind::TrajectoryXy, "trajectory_xy"),
    ] {
        assert_eq!(name.parse::<PlotKind>().unwrap(), kind);
        let mut out = Vec::new();
        emit_plot_data(kind, None, &[], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{}\n", plot_header(kind).join(",")));
    }
    assert!("heatmap".parse::<PlotKind>().is_err());

    let records = scripted_records(&short_oval(50), ScriptedKind::FullThrottle, 2, 1).unwrap();
    let mut out = Vec::new();
    emit_plot_data(PlotKind::SpeedProfile, None, &records[0].rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), records[0].rows.len() + 1);
}

fn free_port_block(n: u16) -> u16 {
    'search: for base in (41_000..60_000).step_by(97) {
        let mut held = Vec::new();
        for k in 0..n {
            match UdpSocket::bind(("127.0.0.1", base + k)) {
                Ok(s) => held.push(s),
                Err(_) => continue 'search,
            }
        }
        return base;
    }
    panic!("no free port block");
}

#[test]
fn udp_episode_matches_the_step_budget() {
    let mut cfg = short_oval(150);
    cfg.server.torcs_server_port = free_port_block(1);
    let options = UdpOptions {
        max_episodes: Some(1),
        handshake_timeout: Some(Duration::from_secs(10)),
        ..UdpOptions::default()
    };
    let server = UdpServer::bind(cfg.clone(), 3, options).unwrap();
    let port = server.ports()[0];
    let handle = thread::spawn(move || {
        let mut reports: Vec<StepReport> = Vec::new();
        let episodes = server.run(|r| reports.push(r.clone())).unwrap();
        (episodes, reports)
    });
    let addr: SocketAddr = ([127, 0, 0, 1], port).into();
    let stop = AtomicBool::new(false);
    let driver = Box::new(ScriptedDriver::for_agent(ScriptedKind::CenterFollow, &cfg, 0));
    let frames = run_udp_driver(addr, driver, &stop).unwrap();
    let (episodes, reports) = handle.join().unwrap();
    assert_eq!(episodes, 1);
    let summary = reports.last().unwrap().finished.clone().unwrap();
    assert_eq!(summary.steps, 150);
    assert_eq!(summary.agents[0].done_reason, DoneReason::Timeout);
    assert!(frames >= 150);
    let rows: Vec<_> = reports.iter().flat_map(|r| r.rows.iter()).filter(|r| r.kind == SessionKind::Learning).collect();
    assert_eq!(rows.len(), 150);
    assert!(rows.last().unwrap().dist_raced > 0.0);
}
