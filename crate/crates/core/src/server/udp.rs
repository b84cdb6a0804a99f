//! UDP transport around [`Simulation`]. One socket per session; receiver
//! threads only forward datagrams into a queue and the stepping thread is
//! the only one that touches the world. Traffic sessions are served by
//! built-in client threads that talk to their ports like any other client.

use std::net::{IpAddr, Ipv4Addr, SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::{ServerError, SessionInput, SessionKind, Simulation, StepReport, STEP_PERIOD};
use crate::config::SimulationConfig;
use crate::control::AgentAction;
use crate::protocol::{decode_client, decode_server, encode_action, encode_init, encode_server, ClientMessage, ServerMessage};
use crate::sensing::default_beam_angles;
use crate::traffic::TrafficAgent;

const POLL: Duration = Duration::from_millis(50);
const MAX_DATAGRAM: usize = 8192;

#[derive(Debug, Clone)]
pub struct UdpOptions {
    pub host: IpAddr,
    /// Hold each control step to at least the simulated step period of wall time.
    pub realtime: bool,
    /// Stop after this many completed episodes.
    pub max_episodes: Option<u64>,
    /// Give up when not every session has identified within this time.
    pub handshake_timeout: Option<Duration>,
    /// Serve traffic sessions with the built-in traffic clients.
    pub traffic_clients: bool,
}

impl Default for UdpOptions {
    fn default() -> Self {
        Self {
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            realtime: false,
            max_episodes: None,
            handshake_timeout: None,
            traffic_clients: true,
        }
    }
}

struct Inbound {
    session: usize,
    from: SocketAddr,
    text: String,
}

pub struct UdpServer {
    sim: Simulation,
    sockets: Vec<UdpSocket>,
    peers: Vec<Option<SocketAddr>>,
    inbox: Receiver<Inbound>,
    stop: Arc<AtomicBool>,
    receivers: Vec<JoinHandle<()>>,
    traffic: Vec<(Sender<Option<TrafficAgent>>, JoinHandle<()>)>,
    options: UdpOptions,
    action_timeout: Duration,
}

impl UdpServer {
    /// Bind one socket per session on consecutive ports.
    pub fn bind(config: SimulationConfig, seed: u64, options: UdpOptions) -> Result<Self, ServerError> {
        let action_timeout = Duration::from_secs_f64(config.server.action_timeout);
        let sim = Simulation::new(config, seed)?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, inbox) = mpsc::channel();
        let mut sockets = Vec::new();
        let mut receivers = Vec::new();
        for (session, info) in sim.sessions().iter().enumerate() {
            let socket = UdpSocket::bind((options.host, info.port)).map_err(|source| ServerError::Bind { port: info.port, source })?;
            let reader = socket.try_clone()?;
            reader.set_read_timeout(Some(POLL))?;
            let tx = tx.clone();
            let stop = Arc::clone(&stop);
            receivers.push(thread::spawn(move || receive_loop(session, reader, tx, stop)));
            sockets.push(socket);
        }
        let peers = vec![None; sockets.len()];
        let mut server = Self {
            sim,
            sockets,
            peers,
            inbox,
            stop,
            receivers,
            traffic: Vec::new(),
            options,
            action_timeout,
        };
        if server.options.traffic_clients {
            server.spawn_traffic_clients();
        }
        Ok(server)
    }

    pub fn ports(&self) -> Vec<u16> {
        self.sim.sessions().iter().map(|s| s.port).collect()
    }

    /// A flag that ends [`UdpServer::run`] at the next step boundary.
    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }

    fn spawn_traffic_clients(&mut self) {
        for info in self.sim.sessions().iter().filter(|s| s.kind == SessionKind::Traffic) {
            let (tx, rx) = mpsc::channel();
            let addr = SocketAddr::new(self.options.host, info.port);
            let stop = Arc::clone(&self.stop);
            let slot = info.index;
            let handle = thread::spawn(move || {
                if let Err(e) = traffic_client(addr, rx, stop) {
                    warn!("traffic client {slot}: {e}");
                }
            });
            self.traffic.push((tx, handle));
        }
    }

    fn hand_out_traffic_agents(&self) {
        for (slot, (tx, _)) in self.traffic.iter().enumerate() {
            let _ = tx.send(self.sim.traffic_agent(slot));
        }
    }

    fn reply(&self, session: usize, to: SocketAddr, msg: &ServerMessage) {
        if let Err(e) = self.sockets[session].send_to(encode_server(msg).as_bytes(), to) {
            debug!("reply to session {session} failed: {e}");
        }
    }

    fn identify(&mut self, item: &Inbound, client_id: &str, degrees: &[f64]) {
        debug!("session {} identified as `{client_id}` from {}", item.session, item.from);
        self.sim.set_beam_angles(item.session, degrees);
        self.peers[item.session] = Some(item.from);
        self.reply(item.session, item.from, &ServerMessage::Identified);
    }

    fn handshake(&mut self) -> Result<bool, ServerError> {
        let started = Instant::now();
        while self.peers.iter().any(Option::is_none) {
            if self.stop.load(Ordering::Relaxed) {
                return Ok(false);
            }
            if let Some(limit) = self.options.handshake_timeout {
                if started.elapsed() > limit {
                    let missing: Vec<u16> = self
                        .peers
                        .iter()
                        .zip(self.ports())
                        .filter(|(p, _)| p.is_none())
                        .map(|(_, port)| port)
                        .collect();
                    return Err(ServerError::Io(std::io::Error::new(
                        std::io::ErrorKind::TimedOut,
                        format!("no client identified on ports {missing:?}"),
                    )));
                }
            }
            let item = match self.inbox.recv_timeout(POLL) {
                Ok(item) => item,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return Ok(false),
            };
            match decode_client(&item.text) {
                Ok(ClientMessage::Init {
                    client_id,
                    beam_angles_deg,
                }) => self.identify(&item, &client_id, &beam_angles_deg),
                Ok(_) => self.reply(item.session, item.from, &ServerMessage::Error("not identified".into())),
                Err(e) => self.reply(item.session, item.from, &ServerMessage::Error(e.to_string())),
            }
        }
        Ok(true)
    }

    fn dispatch(&self, outbox: &[Vec<ServerMessage>], broken: &mut [bool]) {
        for (session, msgs) in outbox.iter().enumerate() {
            let Some(peer) = self.peers[session] else { continue };
            for msg in msgs {
                if let Err(e) = self.sockets[session].send_to(encode_server(msg).as_bytes(), peer) {
                    warn!("session {session} unreachable: {e}");
                    broken[session] = true;
                }
            }
        }
    }

    fn collect_inputs(&mut self, broken: &mut [bool]) -> Vec<Option<SessionInput>> {
        let mut inputs: Vec<Option<SessionInput>> = vec![None; self.sockets.len()];
        let mut waiting = self.sim.awaiting();
        for &s in &waiting {
            if broken[s] {
                inputs[s] = Some(SessionInput::Disconnected);
                broken[s] = false;
            }
        }
        waiting.retain(|s| inputs[*s].is_none());
        let deadline = Instant::now() + self.action_timeout;
        while !waiting.is_empty() {
            let now = Instant::now();
            if now >= deadline || self.stop.load(Ordering::Relaxed) {
                debug!("step {}: no action from sessions {waiting:?}", self.sim.step_count());
                break;
            }
            let item = match self.inbox.recv_timeout((deadline - now).min(POLL)) {
                Ok(item) => item,
                Err(_) => continue,
            };
            match decode_client(&item.text) {
                Ok(ClientMessage::Init {
                    client_id,
                    beam_angles_deg,
                }) => self.identify(&item, &client_id, &beam_angles_deg),
                Ok(msg) if waiting.contains(&item.session) => {
                    self.peers[item.session] = Some(item.from);
                    inputs[item.session] = Some(match msg {
                        ClientMessage::Action(a) => SessionInput::Action(a),
                        _ => SessionInput::Meta,
                    });
                    waiting.retain(|&s| s != item.session);
                }
                Ok(_) => {}
                Err(e) => self.reply(item.session, item.from, &ServerMessage::Error(e.to_string())),
            }
        }
        inputs
    }

    /// Serve until `max_episodes` episodes finish or the stop flag is set.
    /// `on_step` sees every step report, including the one that ends an episode.
    pub fn run(mut self, mut on_step: impl FnMut(&StepReport)) -> Result<u64, ServerError> {
        let result = self.serve(&mut on_step);
        self.shutdown();
        result
    }

    fn serve(&mut self, on_step: &mut impl FnMut(&StepReport)) -> Result<u64, ServerError> {
        if !self.handshake()? {
            return Ok(0);
        }
        info!("all {} sessions identified on ports {:?}", self.sockets.len(), self.ports());
        let mut broken = vec![false; self.sockets.len()];
        self.hand_out_traffic_agents();
        let first = self.sim.initial_messages();
        self.dispatch(&first, &mut broken);
        let mut episodes = 0;
        let period = Duration::from_secs_f64(STEP_PERIOD);
        while !self.stop.load(Ordering::Relaxed) {
            let started = Instant::now();
            let inputs = self.collect_inputs(&mut broken);
            let report = self.sim.step(&inputs)?;
            on_step(&report);
            if let Some(summary) = &report.finished {
                episodes += 1;
                info!("episode {} finished after {} steps", summary.episode, summary.steps);
                if self.options.max_episodes.is_some_and(|m| episodes >= m) {
                    let last: Vec<Vec<ServerMessage>> = report
                        .outbox
                        .iter()
                        .map(|msgs| msgs.iter().take_while(|m| **m != ServerMessage::Restart).cloned().collect())
                        .collect();
                    self.dispatch(&last, &mut broken);
                    break;
                }
                self.hand_out_traffic_agents();
            }
            self.dispatch(&report.outbox, &mut broken);
            if self.options.realtime {
                if let Some(rest) = period.checked_sub(started.elapsed()) {
                    thread::sleep(rest);
                }
            }
        }
        Ok(episodes)
    }

    fn shutdown(&mut self) {
        let bye = vec![vec![ServerMessage::Shutdown]; self.sockets.len()];
        let mut broken = vec![false; self.sockets.len()];
        self.dispatch(&bye, &mut broken);
        self.stop.store(true, Ordering::Relaxed);
        for (tx, handle) in self.traffic.drain(..) {
            drop(tx);
            let _ = handle.join();
        }
        for handle in self.receivers.drain(..) {
            let _ = handle.join();
        }
    }
}

fn receive_loop(session: usize, socket: UdpSocket, tx: Sender<Inbound>, stop: Arc<AtomicBool>) {
    let mut buf = [0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::Relaxed) {
        match socket.recv_from(&mut buf) {
            Ok((n, from)) => {
                let text = String::from_utf8_lossy(&buf[..n]).into_owned();
                if tx.send(Inbound { session, from, text }).is_err() {
                    return;
                }
            }
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => debug!("session {session} receive error: {e}"),
        }
    }
}

/// A client socket bound to an ephemeral local port and connected to `server`.
pub fn connect_client(server: SocketAddr) -> std::io::Result<UdpSocket> {
    let local = if server.is_ipv4() { "127.0.0.1:0" } else { "[::1]:0" };
    let socket = UdpSocket::bind(local)?;
    socket.connect(server)?;
    socket.set_read_timeout(Some(POLL))?;
    Ok(socket)
}

/// Send the init message until the server acknowledges it.
pub fn identify_client(socket: &UdpSocket, client_id: &str, beam_angles_deg: &[f64], stop: &AtomicBool) -> std::io::Result<bool> {
    let init = encode_init(client_id, beam_angles_deg);
    let mut buf = [0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::Relaxed) {
        socket.send(init.as_bytes())?;
        let until = Instant::now() + Duration::from_millis(250);
        while Instant::now() < until {
            match socket.recv(&mut buf) {
                Ok(n) => match decode_server(&String::from_utf8_lossy(&buf[..n])) {
                    Ok(ServerMessage::Identified) => return Ok(true),
                    Ok(ServerMessage::Error(reason)) => {
                        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, reason))
                    }
                    _ => {}
                },
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(false)
}

fn default_degrees() -> Vec<f64> {
    default_beam_angles().iter().map(|a| a.to_degrees().round()).collect()
}

fn traffic_client(server: SocketAddr, agents: Receiver<Option<TrafficAgent>>, stop: Arc<AtomicBool>) -> std::io::Result<()> {
    let socket = connect_client(server)?;
    if !identify_client(&socket, "traffic", &default_degrees(), &stop)? {
        return Ok(());
    }
    let Ok(mut agent) = agents.recv() else { return Ok(()) };
    let mut step = 0;
    let mut buf = [0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::Relaxed) {
        let n = match socket.recv(&mut buf) {
            Ok(n) => n,
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e),
        };
        match decode_server(&String::from_utf8_lossy(&buf[..n])) {
            Ok(ServerMessage::Sensor(msg)) => {
                if let Some(a) = agent.as_mut() {
                    let controls = a.act(&msg.frame, step, STEP_PERIOD);
                    step += 1;
                    socket.send(encode_action(&AgentAction::Primitive(controls)).as_bytes())?;
                }
            }
            Ok(ServerMessage::Restart) => {
                let Ok(next) = agents.recv() else { return Ok(()) };
                agent = next;
                step = 0;
            }
            Ok(ServerMessage::Shutdown) => return Ok(()),
            Ok(_) => {}
            Err(e) => warn!("traffic client: undecodable message: {e}"),
        }
    }
    Ok(())
}
