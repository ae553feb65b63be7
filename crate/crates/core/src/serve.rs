//! Newline-delimited JSON over TCP. Each request line is answered by exactly
//! one response line on the same connection, in order. Connections are served
//! concurrently; per request the flow is classify, acquire, decode, release.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::router::RouterModel;
use crate::toylm::{tokenize, ToyLm};

pub const DEFAULT_MAX_NEW: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServeRequest {
    pub id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeResponse {
    pub id: String,
    pub domain: String,
    pub expert: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything a request needs: shared read-only base and router, and the
/// registry that governs residency.
pub struct ServeState {
    pub base: ToyLm,
    pub registry: Registry,
    pub router: RouterModel,
    domain_experts: BTreeMap<String, String>,
}

impl ServeState {
    /// Maps each domain to its registered expert (lowest id when several
    /// experts share a domain).
    pub fn new(base: ToyLm, registry: Registry, router: RouterModel) -> Result<Self> {
        if base.digest() != registry.config().base_digest {
            return Err(Error::DigestMismatch {
                expected: registry.config().base_digest.clone(),
                found: base.digest(),
            });
        }
        let mut domain_experts = BTreeMap::new();
        for m in registry.experts() {
            domain_experts.entry(m.domain).or_insert(m.id);
        }
        Ok(Self {
            base,
            registry,
            router,
            domain_experts,
        })
    }

    pub fn expert_for_domain(&self, domain: &str) -> Option<&str> {
        self.domain_experts.get(domain).map(String::as_str)
    }

    /// Resolves the expert (routing when none is named), pins it for the
    /// decode and returns the generated token ids.
    pub fn handle(&self, req: &ServeRequest) -> ServeResponse {
        let start = Instant::now();
        let mut resp = ServeResponse {
            id: req.id.clone(),
            domain: String::new(),
            expert: String::new(),
            tokens: None,
            latency_ms: 0.0,
            error: None,
        };
        match self.run(req, &mut resp) {
            Ok(tokens) => resp.tokens = Some(tokens),
            Err(e) => resp.error = Some(format!("{}: {e}", e.kind())),
        }
        resp.latency_ms = start.elapsed().as_secs_f64() * 1e3;
        resp
    }

    fn run(&self, req: &ServeRequest, resp: &mut ServeResponse) -> Result<Vec<u32>> {
        let expert = match &req.expert {
            Some(e) => {
                let meta = self.registry.meta(e).ok_or_else(|| Error::UnknownExpert(e.clone()))?;
                resp.domain = meta.domain;
                e.clone()
            }
            None => {
                let c = self.router.classify(&req.query);
                resp.domain = c.label.name.clone();
                self.expert_for_domain(&c.label.name)
                    .ok_or_else(|| Error::UnknownDomain(c.label.name.clone()))?
                    .to_string()
            }
        };
        resp.expert = expert.clone();
        let prompt = tokenize(&req.query);
        let lease = self.registry.acquire_blocking(&expert)?;
        let out = self.base.greedy_decode(Some(&lease), &prompt, req.max_new.unwrap_or(DEFAULT_MAX_NEW))?;
        drop(lease);
        Ok(out[prompt.len()..].to_vec())
    }

    /// Parses one request line and answers it; malformed lines get an error
    /// response with an empty id.
    pub fn handle_line(&self, line: &str) -> ServeResponse {
        match serde_json::from_str::<ServeRequest>(line) {
            Ok(req) => self.handle(&req),
            Err(e) => ServeResponse {
                id: String::new(),
                domain: String::new(),
                expert: String::new(),
                tokens: None,
                latency_ms: 0.0,
                error: Some(format!("bad_request: {e}")),
            },
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and joins the accept loop. Connections
    /// already open finish their current line and close with the client.
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_inner();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in background threads.
pub fn spawn_server(state: Arc<ServeState>, addr: impl ToSocketAddrs) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let state = Arc::clone(&state);
            std::thread::spawn(move || {
                let _ = serve_connection(&state, stream);
            });
        }
    });
    Ok(ServerHandle {
        addr: local,
        stop,
        thread: Some(thread),
    })
}

fn serve_connection(state: &ServeState, stream: TcpStream) -> std::io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = state.handle_line(&line);
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// A blocking client over one connection.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn send(&mut self, req: &ServeRequest) -> Result<ServeResponse> {
        serde_json::to_writer(&mut self.writer, req)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "server closed the connection")));
        }
        Ok(serde_json::from_str(&line)?)
    }
}
