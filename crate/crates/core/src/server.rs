//! TCP ingestion: one handler thread per client connection pairs consecutive
//! steps into samples and pushes them into the shared memory buffer.

use std::collections::BTreeMap;
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use log::{debug, info, warn};
use socket2::{Domain, Protocol, Socket, Type};

use crate::buffer::SharedBuffer;
use crate::lorenz::Sample;
use crate::protocol::{read_frame, Message, ProtocolError, StepPairer, CONTROL_SIM_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionEnd {
    /// Bye received after all announced steps.
    Completed,
    /// Stream ended or failed before Bye; the unpaired state was discarded.
    Dropped,
    /// Malformed frame or protocol violation; connection closed by the server.
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    pub rho: f64,
    pub steps: u64,
    pub samples: u64,
    pub end: Option<ConnectionEnd>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestStats {
    pub sims: BTreeMap<u32, SimRecord>,
    /// `(sim_id, rho)` in the order the first step of each simulation arrived.
    pub first_step_order: Vec<(u32, f64)>,
    pub control_signals: u32,
    pub rejected_connections: u32,
    /// Connections between their Hello and their end.
    pub open_streams: usize,
    pub peak_streams: usize,
}

impl IngestStats {
    pub fn total_samples(&self) -> u64 {
        self.sims.values().map(|s| s.samples).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerOptions {
    /// Kernel receive buffer per connection. Small values make clients feel
    /// the trainer's pace instead of queueing whole trajectories in the kernel.
    pub recv_buffer_bytes: Option<usize>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            recv_buffer_bytes: Some(4096),
        }
    }
}

pub struct IngestServer {
    addr: SocketAddr,
    stats: Arc<Mutex<IngestStats>>,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
    handlers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

fn bind_listener(addr: SocketAddr, opts: &ServerOptions) -> io::Result<TcpListener> {
    let socket = Socket::new(Domain::for_address(addr), Type::STREAM, Some(Protocol::TCP))?;
    socket.set_reuse_address(true)?;
    if let Some(bytes) = opts.recv_buffer_bytes {
        socket.set_recv_buffer_size(bytes)?;
    }
    socket.bind(&addr.into())?;
    socket.listen(1024)?;
    Ok(socket.into())
}

impl IngestServer {
    pub fn start<A: ToSocketAddrs>(
        bind: A,
        buffer: SharedBuffer<Sample>,
        opts: ServerOptions,
    ) -> io::Result<Self> {
        let addr = bind
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no bind address"))?;
        let listener = bind_listener(addr, &opts)?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(Mutex::new(IngestStats::default()));
        let stop = Arc::new(AtomicBool::new(false));
        let handlers = Arc::new(Mutex::new(Vec::new()));
        let accept_thread = {
            let (stats, stop, handlers) = (stats.clone(), stop.clone(), handlers.clone());
            thread::Builder::new()
                .name("ingest-accept".into())
                .spawn(move || accept_loop(listener, buffer, stats, stop, handlers))?
        };
        info!("ingestion server listening on {addr}");
        Ok(Self {
            addr,
            stats,
            stop,
            accept_thread: Some(accept_thread),
            handlers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> IngestStats {
        self.stats.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Stops accepting and waits for every connection handler to finish.
    /// Make sure producers cannot block (consumer closed or clients gone) first.
    pub fn shutdown(mut self) -> IngestStats {
        self.stop_accepting();
        let handlers: Vec<_> = std::mem::take(&mut *self.handlers.lock().unwrap_or_else(|p| p.into_inner()));
        for h in handlers {
            let _ = h.join();
        }
        self.stats()
    }

    fn stop_accepting(&mut self) {
        if let Some(t) = self.accept_thread.take() {
            self.stop.store(true, Ordering::SeqCst);
            // Wake the blocking accept.
            let _ = TcpStream::connect(self.addr);
            let _ = t.join();
        }
    }
}

impl Drop for IngestServer {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

fn accept_loop(
    listener: TcpListener,
    buffer: SharedBuffer<Sample>,
    stats: Arc<Mutex<IngestStats>>,
    stop: Arc<AtomicBool>,
    handlers: Arc<Mutex<Vec<JoinHandle<()>>>>,
) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        // Counted at accept time: connections are accepted in arrival order,
        // so the launcher's end-of-ensemble connection is seen after every client's.
        buffer.producer_opened();
        let (buffer, stats) = (buffer.clone(), stats.clone());
        let spawned = thread::Builder::new()
            .name("ingest-conn".into())
            .spawn(move || {
                handle_connection(stream, &buffer, &stats);
                buffer.producer_closed();
            });
        match spawned {
            Ok(h) => handlers.lock().unwrap_or_else(|p| p.into_inner()).push(h),
            Err(e) => warn!("could not spawn connection handler: {e}"),
        }
    }
}

fn handle_connection(stream: TcpStream, buffer: &SharedBuffer<Sample>, stats: &Mutex<IngestStats>) {
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "?".into());
    let mut reader = BufReader::with_capacity(512, stream);
    let mut pairer = StepPairer::new();
    let lock = || stats.lock().unwrap_or_else(|p| p.into_inner());

    let end = loop {
        if pairer.sim_id().is_some() {
            buffer.wait_for_room();
        }
        let msg = match read_frame(&mut reader) {
            Ok(Some(msg)) => msg,
            Ok(None) => {
                if pairer.sim_id().is_none() {
                    debug!("{peer}: closed without sending anything");
                    return;
                }
                break ConnectionEnd::Dropped;
            }
            Err(ProtocolError::Io(e)) => {
                warn!("{peer}: read error: {e}");
                break ConnectionEnd::Dropped;
            }
            Err(e) => {
                warn!("{peer}: dropping connection: {e}");
                break ConnectionEnd::Rejected;
            }
        };
        if pairer.sim_id().is_none() && msg == (Message::Bye { sim_id: CONTROL_SIM_ID }) {
            info!("{peer}: ensemble finished");
            lock().control_signals += 1;
            buffer.mark_ensemble_finished();
            return;
        }
        let first_step = matches!(msg, Message::Step { t: 0, .. });
        match pairer.feed(msg) {
            Ok(sample) => {
                let sim_id = pairer.sim_id().expect("set by Hello");
                let mut g = lock();
                match msg {
                    Message::Hello { rho, .. } => {
                        g.open_streams += 1;
                        g.peak_streams = g.peak_streams.max(g.open_streams);
                        g.sims.insert(
                            sim_id,
                            SimRecord {
                                rho,
                                steps: 0,
                                samples: 0,
                                end: None,
                            },
                        );
                    }
                    Message::Step { .. } => {
                        let rec = g.sims.get_mut(&sim_id).expect("registered on Hello");
                        rec.steps += 1;
                        let rho = rec.rho;
                        if sample.is_some() {
                            rec.samples += 1;
                        }
                        if first_step {
                            g.first_step_order.push((sim_id, rho));
                        }
                    }
                    Message::Bye { .. } => {}
                }
                drop(g);
                if let Some(s) = sample {
                    buffer.push(s);
                }
                if pairer.is_finished() {
                    break ConnectionEnd::Completed;
                }
            }
            Err(e) => {
                warn!("{peer}: dropping connection: {e}");
                break ConnectionEnd::Rejected;
            }
        }
    };

    let mut g = lock();
    if end == ConnectionEnd::Rejected {
        g.rejected_connections += 1;
    }
    if let Some(rec) = pairer.sim_id().and_then(|id| g.sims.get_mut(&id)) {
        rec.end = Some(end);
        g.open_streams -= 1;
    }
    if end == ConnectionEnd::Dropped {
        info!(
            "{peer}: sim {:?} disconnected before Bye; pending state discarded",
            pairer.sim_id()
        );
    }
}
