//! WebSocket render service. One thread and one [`Session`] per client; pose
//! updates go through a single-slot mailbox, so a flood of poses collapses
//! to the latest one.

use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use crate::config::PipelineConfig;
use crate::dataset::SceneDataset;
use crate::error::{PipelineError, Result};
use crate::protocol::{encode_frame_message, encode_image, ClientMessage, FrameHeader, PoseMessage, ServerText};
use crate::session::{Backends, RenderRequest, Session};

/// A pending pose is rendered once the socket has been quiet this long...
const DRAIN_POLL: Duration = Duration::from_millis(1);
/// ...or once it has waited this long, whichever comes first.
const MAX_COALESCE: Duration = Duration::from_millis(50);
const IDLE_POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Default)]
pub struct ServiceStats {
    pub connections: AtomicU64,
    pub poses_received: AtomicU64,
    pub poses_coalesced: AtomicU64,
    pub frames_sent: AtomicU64,
    pub errors_sent: AtomicU64,
    /// Largest number of poses ever waiting for one client.
    pub max_pending: AtomicUsize,
}

impl ServiceStats {
    fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

pub struct Server {
    listener: TcpListener,
    dataset: Arc<SceneDataset>,
    config: Arc<PipelineConfig>,
    backends: Arc<Backends>,
    stats: Arc<ServiceStats>,
    shutdown: Arc<AtomicBool>,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    pub stats: Arc<ServiceStats>,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn stop(mut self) -> Result<()> {
        self.shutdown.store(true, Ordering::SeqCst);
        match self.thread.take().map(JoinHandle::join) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(PipelineError::Protocol("server thread panicked".into())),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, dataset: SceneDataset, config: PipelineConfig) -> Result<Self> {
        let backends = Arc::new(Backends::new(&config)?);
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Self {
            listener,
            dataset: Arc::new(dataset),
            config: Arc::new(config),
            backends,
            stats: Arc::default(),
            shutdown: Arc::default(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn stats(&self) -> Arc<ServiceStats> {
        self.stats.clone()
    }

    /// Accepts clients until shut down.
    pub fn run(self) -> Result<()> {
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !self.shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    ServiceStats::bump(&self.stats.connections);
                    let session =
                        Session::new(self.dataset.clone(), self.config.clone(), self.backends.clone())?;
                    let (stats, shutdown) = (self.stats.clone(), self.shutdown.clone());
                    workers.push(std::thread::spawn(move || {
                        if let Err(e) = serve_client(stream, session, &stats, &shutdown) {
                            log::warn!("client {peer}: {e}");
                        }
                    }));
                    workers.retain(|w| !w.is_finished());
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
                Err(e) => return Err(e.into()),
            }
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let (stats, shutdown) = (self.stats.clone(), self.shutdown.clone());
        let thread = std::thread::spawn(move || self.run());
        Ok(ServerHandle { addr, stats, shutdown, thread: Some(thread) })
    }
}

fn send_text(ws: &mut WebSocket<TcpStream>, msg: &ServerText, stats: &ServiceStats) -> Result<()> {
    if matches!(msg, ServerText::Error { .. }) {
        ServiceStats::bump(&stats.errors_sent);
    }
    ws.send(Message::text(serde_json::to_string(msg)?))?;
    Ok(())
}

fn render_and_send(ws: &mut WebSocket<TcpStream>, session: &mut Session, pose: &PoseMessage, stats: &ServiceStats) -> Result<()> {
    let outcome = pose.pose.to_camera().and_then(|camera| {
        session.render(&RenderRequest { frame: pose.frame, camera, refine: None })
    });
    match outcome {
        Ok(out) => {
            let encoding = pose.encoding.unwrap_or(session.config.encoding);
            let bytes = encode_image(&out.frame.color, encoding, session.config.jpeg_quality)?;
            let mut header = FrameHeader::new(pose.frame, out.timings.t_src_ms, out.timings.t_render_ms, encoding);
            header.pair = Some(out.pair);
            header.cache_hit = Some(out.cache_hit);
            ws.send(Message::binary(encode_frame_message(&header, &bytes)?))?;
            ServiceStats::bump(&stats.frames_sent);
            Ok(())
        }
        Err(e) => send_text(ws, &ServerText::Error { message: e.to_string() }, stats),
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut))
}

fn serve_client(stream: TcpStream, mut session: Session, stats: &ServiceStats, shutdown: &AtomicBool) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| PipelineError::Protocol(format!("handshake failed: {e}")))?;
    let mut pending: Option<(PoseMessage, Instant)> = None;
    loop {
        let wait = if pending.is_some() { DRAIN_POLL } else { IDLE_POLL };
        ws.get_ref().set_read_timeout(Some(wait))?;
        let quiet = match ws.read() {
            Ok(Message::Text(text)) => {
                match ClientMessage::parse(&text) {
                    Ok(ClientMessage::Pose(pose)) => {
                        ServiceStats::bump(&stats.poses_received);
                        let since = match pending.take() {
                            Some((_, t)) => {
                                ServiceStats::bump(&stats.poses_coalesced);
                                t
                            }
                            None => Instant::now(),
                        };
                        pending = Some((pose, since));
                        stats.max_pending.fetch_max(1, Ordering::Relaxed);
                    }
                    Ok(ClientMessage::Ping) => send_text(&mut ws, &ServerText::Pong, stats)?,
                    Err(e) => send_text(&mut ws, &ServerText::Error { message: e.to_string() }, stats)?,
                }
                false
            }
            Ok(Message::Binary(_)) => {
                send_text(&mut ws, &ServerText::Error { message: "binary messages are not accepted".into() }, stats)?;
                false
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => false,
            Err(e) if is_timeout(&e) => {
                if shutdown.load(Ordering::SeqCst) {
                    let _ = ws.close(None);
                    break;
                }
                true
            }
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => return Err(e.into()),
        };
        if matches!(&pending, Some((_, since)) if quiet || since.elapsed() >= MAX_COALESCE) {
            let (pose, _) = pending.take().expect("matched");
            render_and_send(&mut ws, &mut session, &pose, stats)?;
        }
    }
    Ok(())
}
