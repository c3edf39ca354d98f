//! WebSocket front end for a live session.
//!
//! A [`Service`] accepts console clients, streams every state message to all
//! of them, and feeds their intent into an [`IntentMailbox`] and their
//! control actions into the session's control queue. The session loop stays
//! the only owner of engine state.

pub mod protocol;

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use cortexloop_core::session::{
    run_session, ClockMode, ControlAction, SessionConfig, SessionError, SessionFailure, SessionIo, SessionResult,
    StateMessage, SummaryMessage,
};
use cortexloop_core::subject::IntentMailbox;
use serde::Serialize;
use tungstenite::{Message, WebSocket};

pub use protocol::{parse_inbound, ErrorMessage, Inbound};

const POLL: Duration = Duration::from_millis(5);

/// Fan-out of serialized messages to every connected client.
#[derive(Clone, Default)]
struct Hub {
    clients: Arc<Mutex<Vec<Sender<Arc<str>>>>>,
}

impl Hub {
    fn subscribe(&self) -> Receiver<Arc<str>> {
        let (tx, rx) = mpsc::channel();
        self.clients.lock().unwrap_or_else(|e| e.into_inner()).push(tx);
        rx
    }

    fn broadcast(&self, text: Arc<str>) {
        self.clients
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .retain(|tx| tx.send(text.clone()).is_ok());
    }

    fn len(&self) -> usize {
        self.clients.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

/// Session time zero, set when the session starts. Intent arriving before
/// then is dropped.
#[derive(Clone, Default)]
struct SessionClock(Arc<Mutex<Option<Instant>>>);

impl SessionClock {
    fn start(&self) -> Instant {
        *self.0.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert_with(Instant::now)
    }

    fn now_s(&self) -> Option<f64> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).map(|t0| t0.elapsed().as_secs_f64())
    }
}

#[derive(Clone)]
struct Shared {
    hub: Hub,
    mailbox: IntentMailbox,
    control: Sender<ControlAction>,
    clock: SessionClock,
    stop: Arc<AtomicBool>,
}

/// How the lobby ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LobbyOutcome {
    Start,
    Abort,
    TimedOut,
}

pub struct Service {
    shared: Shared,
    control_rx: Option<Receiver<ControlAction>>,
    local_addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
}

impl Service {
    pub fn bind(addr: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let (control, control_rx) = mpsc::channel();
        let shared = Shared {
            hub: Hub::default(),
            mailbox: IntentMailbox::default(),
            control,
            clock: SessionClock::default(),
            stop: Arc::new(AtomicBool::new(false)),
        };
        let acceptor = {
            let shared = shared.clone();
            std::thread::Builder::new().name("ws-accept".into()).spawn(move || accept_loop(listener, shared))?
        };
        log::info!("console service listening on ws://{local_addr}");
        Ok(Self { shared, control_rx: Some(control_rx), local_addr, acceptor: Some(acceptor) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn mailbox(&self) -> &IntentMailbox {
        &self.shared.mailbox
    }

    pub fn client_count(&self) -> usize {
        self.shared.hub.len()
    }

    /// Fixes session time zero; later calls return the same instant.
    pub fn start_clock(&self) -> Instant {
        self.shared.clock.start()
    }

    pub fn broadcast<T: Serialize>(&self, msg: &T) {
        match serde_json::to_string(msg) {
            Ok(text) => self.shared.hub.broadcast(text.into()),
            Err(e) => log::error!("dropping unserializable message: {e}"),
        }
    }

    /// Blocks until a client sends `start` or `abort`. `next_mode` is
    /// meaningless before the session runs and is ignored.
    pub fn wait_for_start(&self, timeout: Option<Duration>) -> LobbyOutcome {
        let Some(rx) = self.control_rx.as_ref() else {
            return LobbyOutcome::Abort;
        };
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let wait = match deadline {
                Some(d) => match d.checked_duration_since(Instant::now()) {
                    Some(left) => left,
                    None => return LobbyOutcome::TimedOut,
                },
                None => Duration::from_secs(3600),
            };
            match rx.recv_timeout(wait) {
                Ok(ControlAction::Start) => return LobbyOutcome::Start,
                Ok(ControlAction::Abort) => return LobbyOutcome::Abort,
                Ok(ControlAction::NextMode) => {}
                Err(RecvTimeoutError::Timeout) if deadline.is_none() => {}
                Err(RecvTimeoutError::Timeout) => return LobbyOutcome::TimedOut,
                Err(RecvTimeoutError::Disconnected) => return LobbyOutcome::Abort,
            }
        }
    }

    /// Runs the session in realtime, streaming state to every client, then
    /// sends the summary. One session per service.
    pub fn run(&mut self, cfg: &SessionConfig) -> Result<SessionResult, SessionFailure> {
        if cfg.clock != ClockMode::Realtime {
            return Err(SessionError::Config("a live session runs on the realtime clock".into()).into());
        }
        let control = self
            .control_rx
            .take()
            .ok_or_else(|| SessionError::Config("this service already ran its session".into()))?;
        let hub = self.shared.hub.clone();
        let mut observer = |msg: &StateMessage| match serde_json::to_string(msg) {
            Ok(text) => hub.broadcast(text.into()),
            Err(e) => log::error!("dropping state message: {e}"),
        };
        let io = SessionIo {
            control: Some(control),
            observer: Some(&mut observer),
            mailbox: Some(self.shared.mailbox.clone()),
            origin: Some(self.start_clock()),
            ..Default::default()
        };
        let result = run_session(cfg, io);
        if let Ok(done) = &result {
            self.broadcast(&SummaryMessage::new(done.summary.clone()));
        }
        result
    }

    /// Closes every connection and stops accepting.
    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.acceptor.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

fn accept_loop(listener: TcpListener, shared: Shared) {
    let mut clients = Vec::new();
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = shared.clone();
                let spawned = std::thread::Builder::new()
                    .name(format!("ws-{peer}"))
                    .spawn(move || serve_client(stream, peer, shared));
                match spawned {
                    Ok(handle) => clients.push(handle),
                    Err(e) => log::error!("cannot serve {peer}: {e}"),
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
        clients.retain(|h: &JoinHandle<()>| !h.is_finished());
    }
    for handle in clients {
        let _ = handle.join();
    }
}

fn serve_client(stream: TcpStream, peer: SocketAddr, shared: Shared) {
    let setup = stream.set_nonblocking(false).and_then(|_| stream.set_nodelay(true));
    if let Err(e) = setup {
        log::warn!("{peer}: {e}");
        return;
    }
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("{peer}: handshake failed: {e}");
            return;
        }
    };
    if let Err(e) = ws.get_ref().set_read_timeout(Some(POLL)) {
        log::warn!("{peer}: {e}");
        return;
    }
    let outbound = shared.hub.subscribe();
    log::info!("{peer} connected");
    match pump(&mut ws, &outbound, &shared) {
        Ok(()) => log::info!("{peer} disconnected"),
        Err(e) => log::info!("{peer} dropped: {e}"),
    }
    // the mailbox is left alone; stale intent decays to idle on its own
}

fn pump(ws: &mut WebSocket<TcpStream>, outbound: &Receiver<Arc<str>>, shared: &Shared) -> tungstenite::Result<()> {
    loop {
        if shared.stop.load(Ordering::Relaxed) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        while let Ok(text) = outbound.try_recv() {
            ws.send(Message::text(&*text))?;
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                if let Err(message) = handle_inbound(text.as_str(), shared) {
                    ws.send(Message::text(ErrorMessage::new(message).to_json()))?;
                }
            }
            Ok(Message::Binary(_)) => {
                ws.send(Message::text(ErrorMessage::new("binary messages are not supported").to_json()))?;
            }
            Ok(Message::Close(_)) => {
                // tungstenite answers the close handshake on the next flush
                let _ = ws.flush();
                return Ok(());
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
    }
}

fn handle_inbound(text: &str, shared: &Shared) -> Result<(), String> {
    match parse_inbound(text)? {
        Inbound::Intent { u, v } => match shared.clock.now_s() {
            Some(t) => shared.mailbox.post(t, [u, v]),
            None => log::debug!("intent before session start dropped"),
        },
        Inbound::Control { action } => {
            shared.control.send(action).map_err(|_| "session is no longer accepting control".to_string())?;
        }
    }
    Ok(())
}
