//! Ensemble orchestration: parameter planning, a supervisor that keeps at most
//! `c` simulation clients alive, and the client itself.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use socket2::{Domain, Protocol, SockAddr, Socket, Type};

use crate::lorenz::{sample_initial_state, LorenzError, LorenzParams, State, TrajectorySpec};
use crate::protocol::{encode_into, Message, CONTROL_SIM_ID};

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const SIGNAL_ACK_TIMEOUT: Duration = Duration::from_secs(10);

/// Exit codes of the client subcommand.
pub const EXIT_FAULT_INJECTED: i32 = 3;
pub const EXIT_CONNECT_FAILED: i32 = 4;
pub const EXIT_STREAM_FAILED: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum LauncherError {
    #[error("invalid ensemble plan: {0}")]
    InvalidPlan(String),
    #[error("server {addr} unreachable: {source}")]
    ServerUnreachable { addr: SocketAddr, source: io::Error },
    #[error("failed to signal ensemble end: {0}")]
    Signal(io::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("could not connect to {addr}: {source}")]
    Connect { addr: SocketAddr, source: io::Error },
    #[error("stream failed after {steps_sent} steps: {source}")]
    Stream { steps_sent: u64, source: io::Error },
    #[error("simulation failed after {steps_sent} steps: {source}")]
    Simulation { steps_sent: u64, source: LorenzError },
    #[error("injected fault after {steps_sent} steps")]
    FaultInjected { steps_sent: u64 },
}

impl ClientError {
    pub fn steps_sent(&self) -> u64 {
        match self {
            ClientError::Connect { .. } => 0,
            ClientError::Stream { steps_sent, .. }
            | ClientError::Simulation { steps_sent, .. }
            | ClientError::FaultInjected { steps_sent } => *steps_sent,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Connect { .. } => EXIT_CONNECT_FAILED,
            ClientError::FaultInjected { .. } => EXIT_FAULT_INJECTED,
            _ => EXIT_STREAM_FAILED,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Trajectories ordered by increasing ρ.
    StreamingSweep,
    /// ρ drawn uniformly from the grid for every trajectory.
    RandomSampling,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::StreamingSweep => "streaming-sweep",
            Strategy::RandomSampling => "random-sampling",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "streaming-sweep" => Ok(Strategy::StreamingSweep),
            "random-sampling" => Ok(Strategy::RandomSampling),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

/// Per-trajectory constants shared by every ensemble member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryTemplate {
    pub sigma: f64,
    pub beta: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub substeps: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePlan {
    pub strategy: Strategy,
    pub rho_grid: Vec<f64>,
    pub n_trajectories: usize,
    pub concurrency: usize,
    pub seed: u64,
    pub trajectory: TrajectoryTemplate,
}

impl EnsemblePlan {
    pub fn validate(&self) -> Result<(), LauncherError> {
        if self.n_trajectories == 0 {
            return Err(LauncherError::InvalidPlan("n_trajectories must be >= 1".into()));
        }
        if self.concurrency == 0 {
            return Err(LauncherError::InvalidPlan("concurrency must be >= 1".into()));
        }
        if self.rho_grid.is_empty() {
            return Err(LauncherError::InvalidPlan("rho_grid must not be empty".into()));
        }
        if self.rho_grid.iter().any(|r| !r.is_finite()) {
            return Err(LauncherError::InvalidPlan("rho_grid must be finite".into()));
        }
        Ok(())
    }
}

/// Orders the ensemble's trajectory specs. Initial states are drawn after the
/// ρ assignment, in plan order, from the same rng.
pub fn plan_parameters<R: Rng + ?Sized>(plan: &EnsemblePlan, rng: &mut R) -> Vec<TrajectorySpec> {
    let n = plan.n_trajectories;
    let rhos: Vec<f64> = match plan.strategy {
        Strategy::StreamingSweep => {
            let mut grid = plan.rho_grid.clone();
            grid.sort_by(f64::total_cmp);
            let (base, extra) = (n / grid.len(), n % grid.len());
            grid.iter()
                .enumerate()
                .flat_map(|(i, &rho)| std::iter::repeat_n(rho, base + usize::from(i < extra)))
                .collect()
        }
        Strategy::RandomSampling => (0..n)
            .map(|_| plan.rho_grid[rng.random_range(0..plan.rho_grid.len())])
            .collect(),
    };
    let t = plan.trajectory;
    rhos.into_iter()
        .map(|rho| {
            let params = LorenzParams {
                rho,
                sigma: t.sigma,
                beta: t.beta,
            };
            TrajectorySpec::new(params, sample_initial_state(rng), t.dt, t.n_steps)
                .with_substeps(t.substeps)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClientStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl fmt::Display for ClientStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClientStatus::Pending => "pending",
            ClientStatus::Running => "running",
            ClientStatus::Done => "done",
            ClientStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientHandle {
    pub sim_id: u32,
    pub spec: TrajectorySpec,
    status: ClientStatus,
    /// Step frames written to the socket.
    pub steps_sent: u64,
    pub failure: Option<String>,
}

impl ClientHandle {
    pub fn new(sim_id: u32, spec: TrajectorySpec) -> Self {
        Self {
            sim_id,
            spec,
            status: ClientStatus::Pending,
            steps_sent: 0,
            failure: None,
        }
    }

    pub fn status(&self) -> ClientStatus {
        self.status
    }

    /// Moves the status forward; backwards transitions are ignored.
    pub fn advance(&mut self, next: ClientStatus) -> bool {
        let allowed = match (self.status, next) {
            (ClientStatus::Pending, ClientStatus::Running | ClientStatus::Failed) => true,
            (ClientStatus::Running, ClientStatus::Done | ClientStatus::Failed) => true,
            _ => false,
        };
        if allowed {
            self.status = next;
        }
        allowed
    }

    /// Samples the sent steps can form once paired.
    pub fn samples_sent(&self) -> u64 {
        self.steps_sent.saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LaunchMode {
    /// Each client is a child process running `program client ...`.
    Process { program: PathBuf },
    /// Each client is a thread of the current process.
    InProcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// Start the next planned client as soon as any slot frees.
    Backfill,
    /// Start a group of `c` clients only once the previous group has finished.
    Rigid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClientOptions {
    pub send_buffer_bytes: Option<usize>,
    /// Abort without Bye after this many steps.
    pub fail_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LauncherOptions {
    pub mode: LaunchMode,
    pub grouping: Grouping,
    pub send_buffer_bytes: Option<usize>,
    /// `(sim_id, steps)` pairs: that client aborts after sending `steps` steps.
    pub faults: Vec<(u32, u64)>,
}

impl Default for LauncherOptions {
    fn default() -> Self {
        Self {
            mode: LaunchMode::InProcess,
            grouping: Grouping::Backfill,
            send_buffer_bytes: Some(4096),
            faults: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub clients: Vec<ClientHandle>,
    pub peak_concurrency: usize,
}

impl EnsembleReport {
    pub fn count(&self, status: ClientStatus) -> usize {
        self.clients.iter().filter(|c| c.status == status).count()
    }

    pub fn total_samples_sent(&self) -> u64 {
        self.clients.iter().map(ClientHandle::samples_sent).sum()
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sim_id", "rho", "status", "samples_sent"])?;
        for c in &self.clients {
            w.write_record([
                c.sim_id.to_string(),
                format!("{:?}", c.spec.params.rho),
                c.status.to_string(),
                c.samples_sent().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Plans the ensemble from `plan.seed` and runs it against `server`.
pub fn run_ensemble(
    plan: &EnsemblePlan,
    server: SocketAddr,
    opts: &LauncherOptions,
) -> Result<EnsembleReport, LauncherError> {
    run_ensemble_until(plan, server, opts, &AtomicBool::new(false))
}

/// Like [`run_ensemble`], but stops starting clients once `cancel` is set.
/// Clients never started stay `Pending` in the report.
pub fn run_ensemble_until(
    plan: &EnsemblePlan,
    server: SocketAddr,
    opts: &LauncherOptions,
    cancel: &AtomicBool,
) -> Result<EnsembleReport, LauncherError> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let specs = plan_parameters(plan, &mut rng);
    run_specs(&specs, plan.concurrency, server, opts, cancel)
}

struct Completion {
    index: usize,
    steps_sent: u64,
    failure: Option<String>,
}

/// Runs the given specs in order (sim_id = position) with at most
/// `concurrency` live clients, then sends the ensemble-finished signal.
pub fn run_specs(
    specs: &[TrajectorySpec],
    concurrency: usize,
    server: SocketAddr,
    opts: &LauncherOptions,
    cancel: &AtomicBool,
) -> Result<EnsembleReport, LauncherError> {
    if concurrency == 0 {
        return Err(LauncherError::InvalidPlan("concurrency must be >= 1".into()));
    }
    if specs.len() >= CONTROL_SIM_ID as usize {
        return Err(LauncherError::InvalidPlan("too many trajectories".into()));
    }
    TcpStream::connect_timeout(&server, DEFAULT_CONNECT_TIMEOUT)
        .map_err(|source| LauncherError::ServerUnreachable { addr: server, source })?;

    let mut clients: Vec<ClientHandle> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| ClientHandle::new(i as u32, *s))
        .collect();
    let mut pending: VecDeque<usize> = (0..clients.len()).collect();
    let (tx, rx) = mpsc::channel::<Completion>();
    let mut live = 0usize;
    let mut peak = 0usize;

    while !pending.is_empty() || live > 0 {
        if cancel.load(Ordering::SeqCst) && !pending.is_empty() {
            info!("ensemble cancelled with {} clients not started", pending.len());
            pending.clear();
        }
        let may_start = match opts.grouping {
            Grouping::Backfill => true,
            Grouping::Rigid => live == 0,
        };
        while may_start && live < concurrency {
            let Some(index) = pending.pop_front() else { break };
            let client = &mut clients[index];
            let copts = ClientOptions {
                send_buffer_bytes: opts.send_buffer_bytes,
                fail_after: opts
                    .faults
                    .iter()
                    .find(|(id, _)| *id == client.sim_id)
                    .map(|&(_, k)| k),
            };
            match spawn_client(index, client, server, &copts, &opts.mode, tx.clone()) {
                Ok(()) => {
                    client.advance(ClientStatus::Running);
                    live += 1;
                    peak = peak.max(live);
                    debug!("client {} started (rho={})", client.sim_id, client.spec.params.rho);
                }
                Err(e) => {
                    warn!("client {}: spawn failure: {e}", client.sim_id);
                    client.failure = Some(format!("spawn failure: {e}"));
                    client.advance(ClientStatus::Failed);
                }
            }
        }
        if live == 0 {
            continue;
        }
        let done = rx.recv().expect("supervisor holds a sender");
        live -= 1;
        let client = &mut clients[done.index];
        client.steps_sent = done.steps_sent;
        match done.failure {
            None => {
                client.advance(ClientStatus::Done);
            }
            Some(msg) => {
                warn!("client {} failed: {msg}", client.sim_id);
                client.failure = Some(msg);
                client.advance(ClientStatus::Failed);
            }
        }
    }

    signal_ensemble_finished(server).map_err(LauncherError::Signal)?;
    let report = EnsembleReport {
        clients,
        peak_concurrency: peak,
    };
    info!(
        "ensemble finished: {} done, {} failed, peak concurrency {}",
        report.count(ClientStatus::Done),
        report.count(ClientStatus::Failed),
        report.peak_concurrency
    );
    Ok(report)
}

fn spawn_client(
    index: usize,
    client: &ClientHandle,
    server: SocketAddr,
    copts: &ClientOptions,
    mode: &LaunchMode,
    tx: mpsc::Sender<Completion>,
) -> io::Result<()> {
    let (sim_id, spec, copts) = (client.sim_id, client.spec, *copts);
    match mode {
        LaunchMode::InProcess => {
            thread::Builder::new()
                .name(format!("client-{sim_id}"))
                .spawn(move || {
                    let (steps_sent, failure) = match run_client(sim_id, &spec, server, &copts) {
                        Ok(n) => (n, None),
                        Err(e) => (e.steps_sent(), Some(e.to_string())),
                    };
                    let _ = tx.send(Completion {
                        index,
                        steps_sent,
                        failure,
                    });
                })?;
        }
        LaunchMode::Process { program } => {
            let args = ClientArgs::new(sim_id, &spec, server, &copts);
            let child = Command::new(program)
                .arg("client")
                .args(args.to_args())
                .stdin(Stdio::null())
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()?;
            thread::Builder::new()
                .name(format!("wait-{sim_id}"))
                .spawn(move || {
                    let completion = match child.wait_with_output() {
                        Ok(out) => {
                            let stdout = String::from_utf8_lossy(&out.stdout);
                            let steps_sent = parse_steps_sent(&stdout).unwrap_or(0);
                            let failure = (!out.status.success()).then(|| {
                                let stderr = String::from_utf8_lossy(&out.stderr);
                                let last = stderr.lines().last().unwrap_or("").trim().to_string();
                                format!("exited with {}: {last}", out.status)
                            });
                            Completion {
                                index,
                                steps_sent,
                                failure,
                            }
                        }
                        Err(e) => Completion {
                            index,
                            steps_sent: 0,
                            failure: Some(format!("wait failed: {e}")),
                        },
                    };
                    let _ = tx.send(completion);
                })?;
        }
    }
    Ok(())
}

fn parse_steps_sent(stdout: &str) -> Option<u64> {
    stdout
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("steps_sent="))
        .and_then(|v| v.trim().parse().ok())
}

/// Sends the reserved-id Bye on a fresh connection and waits for the server
/// to close it, which it does once the signal is recorded.
pub fn signal_ensemble_finished(server: SocketAddr) -> io::Result<()> {
    let mut s = TcpStream::connect_timeout(&server, DEFAULT_CONNECT_TIMEOUT)?;
    let mut frame = Vec::new();
    encode_into(&Message::Bye { sim_id: CONTROL_SIM_ID }, &mut frame);
    s.write_all(&frame)?;
    s.flush()?;
    s.set_read_timeout(Some(SIGNAL_ACK_TIMEOUT))?;
    let mut sink = [0u8; 16];
    while s.read(&mut sink)? > 0 {}
    Ok(())
}

fn connect(server: SocketAddr, send_buffer: Option<usize>) -> io::Result<TcpStream> {
    let socket = Socket::new(Domain::for_address(server), Type::STREAM, Some(Protocol::TCP))?;
    if let Some(bytes) = send_buffer {
        socket.set_send_buffer_size(bytes)?;
    }
    socket.set_tcp_nodelay(true)?;
    socket.connect_timeout(&SockAddr::from(server), DEFAULT_CONNECT_TIMEOUT)?;
    Ok(socket.into())
}

/// Simulates one trajectory and streams it: Hello, one Step per state as soon
/// as it is computed, then Bye. Returns the number of steps sent.
pub fn run_client(
    sim_id: u32,
    spec: &TrajectorySpec,
    server: SocketAddr,
    opts: &ClientOptions,
) -> Result<u64, ClientError> {
    spec.validate().map_err(|source| ClientError::Simulation {
        steps_sent: 0,
        source,
    })?;
    let mut stream =
        connect(server, opts.send_buffer_bytes).map_err(|source| ClientError::Connect { addr: server, source })?;
    let mut frame = Vec::with_capacity(64);
    let mut send = |stream: &mut TcpStream, msg: &Message, steps_sent: u64| {
        frame.clear();
        encode_into(msg, &mut frame);
        stream
            .write_all(&frame)
            .map_err(|source| ClientError::Stream { steps_sent, source })
    };

    send(
        &mut stream,
        &Message::Hello {
            sim_id,
            rho: spec.params.rho,
            dt: spec.dt,
            n_steps: spec.n_steps as u32,
        },
        0,
    )?;
    let mut steps_sent = 0u64;
    for (t, state) in spec.states().enumerate() {
        if opts.fail_after == Some(steps_sent) {
            return Err(ClientError::FaultInjected { steps_sent });
        }
        let state = state.map_err(|source| ClientError::Simulation { steps_sent, source })?;
        send(&mut stream, &Message::step(sim_id, t as u32, state), steps_sent)?;
        steps_sent += 1;
    }
    send(&mut stream, &Message::Bye { sim_id }, steps_sent)?;
    stream
        .flush()
        .map_err(|source| ClientError::Stream { steps_sent, source })?;
    Ok(steps_sent)
}

/// Command-line form of one client, shared by the supervisor and the binary.
#[derive(Debug, Clone, PartialEq, clap::Args)]
pub struct ClientArgs {
    #[arg(long)]
    pub server: SocketAddr,
    #[arg(long)]
    pub sim_id: u32,
    #[arg(long, allow_negative_numbers = true)]
    pub rho: f64,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub beta: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub x0: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub y0: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub z0: f64,
    #[arg(long)]
    pub dt: f64,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub substeps: u32,
    #[arg(long)]
    pub send_buffer: Option<usize>,
    #[arg(long)]
    pub fail_after: Option<u64>,
}

impl ClientArgs {
    pub fn new(sim_id: u32, spec: &TrajectorySpec, server: SocketAddr, opts: &ClientOptions) -> Self {
        Self {
            server,
            sim_id,
            rho: spec.params.rho,
            sigma: spec.params.sigma,
            beta: spec.params.beta,
            x0: spec.initial_state.x,
            y0: spec.initial_state.y,
            z0: spec.initial_state.z,
            dt: spec.dt,
            steps: spec.n_steps,
            substeps: spec.substeps,
            send_buffer: opts.send_buffer_bytes,
            fail_after: opts.fail_after,
        }
    }

    /// Floats use `{:?}`, which round-trips exactly.
    pub fn to_args(&self) -> Vec<String> {
        let mut args = vec![
            format!("--server={}", self.server),
            format!("--sim-id={}", self.sim_id),
            format!("--rho={:?}", self.rho),
            format!("--sigma={:?}", self.sigma),
            format!("--beta={:?}", self.beta),
            format!("--x0={:?}", self.x0),
            format!("--y0={:?}", self.y0),
            format!("--z0={:?}", self.z0),
            format!("--dt={:?}", self.dt),
            format!("--steps={}", self.steps),
            format!("--substeps={}", self.substeps),
        ];
        if let Some(b) = self.send_buffer {
            args.push(format!("--send-buffer={b}"));
        }
        if let Some(k) = self.fail_after {
            args.push(format!("--fail-after={k}"));
        }
        args
    }

    pub fn spec(&self) -> TrajectorySpec {
        let params = LorenzParams {
            rho: self.rho,
            sigma: self.sigma,
            beta: self.beta,
        };
        TrajectorySpec::new(params, State::new(self.x0, self.y0, self.z0), self.dt, self.steps)
            .with_substeps(self.substeps)
    }

    pub fn options(&self) -> ClientOptions {
        ClientOptions {
            send_buffer_bytes: self.send_buffer,
            fail_after: self.fail_after,
        }
    }

    /// Runs the client and prints `steps_sent=N` for the supervisor.
    /// Returns the process exit code.
    pub fn execute(&self) -> i32 {
        let result = run_client(self.sim_id, &self.spec(), self.server, &self.options());
        let steps = match &result {
            Ok(n) => *n,
            Err(e) => e.steps_sent(),
        };
        println!("steps_sent={steps}");
        match result {
            Ok(_) => 0,
            Err(ClientError::FaultInjected { .. }) => {
                eprintln!("client {}: injected fault after {steps} steps", self.sim_id);
                EXIT_FAULT_INJECTED
            }
            Err(e) => {
                eprintln!("client {}: {e}", self.sim_id);
                e.exit_code()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorenz::{DEFAULT_BETA, DEFAULT_SIGMA};

    fn plan(strategy: Strategy, n: usize) -> EnsemblePlan {
        EnsemblePlan {
            strategy,
            rho_grid: vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0],
            n_trajectories: n,
            concurrency: 3,
            seed: 7,
            trajectory: TrajectoryTemplate {
                sigma: DEFAULT_SIGMA,
                beta: DEFAULT_BETA,
                dt: 0.01,
                n_steps: 10,
                substeps: 1,
            },
        }
    }

    fn rhos(specs: &[TrajectorySpec]) -> Vec<f64> {
        specs.iter().map(|s| s.params.rho).collect()
    }

    #[test]
    fn sweep_splits_evenly_and_sorts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = plan_parameters(&plan(Strategy::StreamingSweep, 12), &mut rng);
        assert_eq!(
            rhos(&specs),
            vec![0.0, 0.0, 20.0, 20.0, 40.0, 40.0, 60.0, 60.0, 80.0, 80.0, 100.0, 100.0]
        );
    }

    #[test]
    fn sweep_remainder_goes_to_lowest_rho() {
        let mut p = plan(Strategy::StreamingSweep, 8);
        p.rho_grid = vec![100.0, 0.0, 50.0];
        let specs = plan_parameters(&p, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(rhos(&specs), vec![0.0, 0.0, 0.0, 50.0, 50.0, 50.0, 100.0, 100.0]);
    }

    #[test]
    fn random_sampling_counts_within_multinomial_bounds() {
        let specs = plan_parameters(&plan(Strategy::RandomSampling, 6000), &mut ChaCha8Rng::seed_from_u64(3));
        let bound = 3.0 * (1000.0f64 * 5.0 / 6.0).sqrt();
        for rho in [0.0, 20.0, 40.0, 60.0, 80.0, 100.0] {
            let n = specs.iter().filter(|s| s.params.rho == rho).count() as f64;
            assert!((n - 1000.0).abs() <= bound, "rho {rho}: {n}");
        }
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let p = plan(Strategy::RandomSampling, 50);
        let a = plan_parameters(&p, &mut ChaCha8Rng::seed_from_u64(11));
        let b = plan_parameters(&p, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_plans_rejected() {
        let mut p = plan(Strategy::StreamingSweep, 0);
        assert!(p.validate().is_err());
        p.n_trajectories = 1;
        p.concurrency = 0;
        assert!(p.validate().is_err());
        p.concurrency = 1;
        p.rho_grid.clear();
        assert!(p.validate().is_err());
    }

    #[test]
    fn status_only_moves_forward() {
        let spec = plan_parameters(&plan(Strategy::StreamingSweep, 1), &mut ChaCha8Rng::seed_from_u64(0))[0];
        let mut c = ClientHandle::new(0, spec);
        assert!(!c.advance(ClientStatus::Done));
        assert!(c.advance(ClientStatus::Running));
        assert!(!c.advance(ClientStatus::Pending));
        assert!(c.advance(ClientStatus::Done));
        assert!(!c.advance(ClientStatus::Failed));
        assert_eq!(c.status(), ClientStatus::Done);
    }

    #[test]
    fn client_args_round_trip() {
        let spec = plan_parameters(&plan(Strategy::RandomSampling, 1), &mut ChaCha8Rng::seed_from_u64(5))[0]
            .with_substeps(10);
        let opts = ClientOptions {
            send_buffer_bytes: Some(2048),
            fail_after: Some(4),
        };
        let args = ClientArgs::new(9, &spec, "127.0.0.1:4000".parse().unwrap(), &opts);
        #[derive(clap::Parser)]
        struct Wrap {
            #[command(flatten)]
            c: ClientArgs,
        }
        use clap::Parser;
        let parsed = Wrap::try_parse_from(std::iter::once("x".to_string()).chain(args.to_args())).unwrap();
        assert_eq!(parsed.c, args);
        assert_eq!(parsed.c.spec(), spec);
        assert_eq!(parsed.c.options(), opts);
    }

    #[test]
    fn report_csv_layout() {
        let spec = plan_parameters(&plan(Strategy::StreamingSweep, 1), &mut ChaCha8Rng::seed_from_u64(0))[0];
        let mut c = ClientHandle::new(0, spec);
        c.advance(ClientStatus::Running);
        c.advance(ClientStatus::Done);
        c.steps_sent = 10;
        let report = EnsembleReport {
            clients: vec![c],
            peak_concurrency: 1,
        };
        let mut out = Vec::new();
        report.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "sim_id,rho,status,samples_sent\n0,0.0,done,9\n");
    }

    #[test]
    fn steps_sent_line_parsed() {
        assert_eq!(parse_steps_sent("steps_sent=42\n"), Some(42));
        assert_eq!(parse_steps_sent("noise\n"), None);
    }
}
