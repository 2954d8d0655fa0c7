//! Line-delimited JSON over TCP in front of a [`Manager`].
//!
//! One request object per line, one response object per line, in order.
//! Every line gets an answer; errors come back as
//! `{"ok":false,"error":{"kind":..,"msg":..}}` and the connection stays open.

use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use hotlora_core::backbone::{Instruction, Observation};
use hotlora_core::manager::{InferenceRequest, InferenceResponse, Manager};
use hotlora_core::CoreError;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_ADDR: &str = "127.0.0.1:4117";

/// How often blocked reads wake up to check for shutdown.
const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("bad response line: {0}")]
    Protocol(String),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
enum WireRequest {
    Infer {
        instruction: String,
        observation: Vec<f32>,
        proprio: Vec<f32>,
    },
    Stats,
    ListExperts,
    ReloadRegistry,
}

const OPS: [&str; 4] = ["infer", "stats", "list_experts", "reload_registry"];

fn error_line(kind: &str, msg: impl std::fmt::Display) -> Value {
    json!({"ok": false, "error": {"kind": kind, "msg": msg.to_string()}})
}

fn lock(m: &Mutex<Manager>) -> MutexGuard<'_, Manager> {
    // A panic inside a request cannot leave serving half-merged (switch
    // restores before returning errors), so a poisoned lock is still usable.
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Wire form of an infer response.
pub fn infer_json(r: &InferenceResponse) -> Value {
    let a = &r.action_chunk.actions;
    let rows: Vec<Vec<f32>> = (0..a.rows()).map(|i| a.row(i).to_vec()).collect();
    json!({
        "ok": true,
        "actions": rows,
        "expert": r.expert_id,
        "switched": r.switched,
        "switch_ms": r.switch_latency_ms,
    })
}

fn dispatch(manager: &Mutex<Manager>, req: WireRequest) -> Result<Value, CoreError> {
    match req {
        WireRequest::Infer {
            instruction,
            observation,
            proprio,
        } => {
            let mut m = lock(manager);
            let cfg = m.base().config().clone();
            let request = InferenceRequest {
                instruction: Instruction::from_text(&instruction, &cfg),
                observation: Observation {
                    features: observation,
                    proprio,
                },
            };
            Ok(infer_json(&m.infer(&request)?))
        }
        WireRequest::Stats => {
            let s = lock(manager).stats().report();
            Ok(json!({
                "ok": true,
                "switches": s.switches,
                "failed_switches": s.failed_switches,
                "latency_min_ms": s.latency_min_ms,
                "latency_mean_ms": s.latency_mean_ms,
                "latency_p99_ms": s.latency_p99_ms,
                "hits": s.hits,
                "misses": s.misses,
                "requests": s.requests,
            }))
        }
        WireRequest::ListExperts => {
            let m = lock(manager);
            let experts: Vec<Value> = m
                .registry()
                .entries()
                .iter()
                .map(|e| json!({"instruction": e.instruction, "expert": e.expert_id, "bytes": e.file_bytes}))
                .collect();
            Ok(json!({"ok": true, "experts": experts, "active": m.active()}))
        }
        WireRequest::ReloadRegistry => {
            let n = lock(manager).reload_registry()?;
            Ok(json!({"ok": true, "experts": n}))
        }
    }
}

/// Answers one request line. Never fails: problems become error objects.
pub fn handle_line(manager: &Mutex<Manager>, line: &str) -> String {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return error_line("malformed_json", e).to_string(),
    };
    let op = value.get("op").and_then(Value::as_str);
    let reply = match op {
        None => error_line("bad_request", "missing string field \"op\""),
        Some(op) if !OPS.contains(&op) => error_line("unknown_op", format!("unknown op {op:?}; known: {}", OPS.join(", "))),
        Some(_) => match WireRequest::deserialize(value) {
            Err(e) => error_line("bad_request", e),
            Ok(req) => dispatch(manager, req).unwrap_or_else(|e| error_line(e.kind(), e)),
        },
    };
    reply.to_string()
}

/// Stops a running [`Server`] from another thread.
#[derive(Clone, Debug)]
pub struct ShutdownHandle {
    flag: Arc<AtomicBool>,
    addr: SocketAddr,
}

impl ShutdownHandle {
    /// Requests shutdown. In-flight requests finish and get their answer;
    /// [`Server::run`] returns once every connection thread has exited.
    pub fn shutdown(&self) {
        self.flag.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
    }
}

pub struct Server {
    listener: TcpListener,
    manager: Arc<Mutex<Manager>>,
    flag: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, manager: Manager) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            manager: Arc::new(Mutex::new(manager)),
            flag: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn shutdown_handle(&self) -> Result<ShutdownHandle> {
        Ok(ShutdownHandle {
            flag: self.flag.clone(),
            addr: self.local_addr()?,
        })
    }

    pub fn manager(&self) -> Arc<Mutex<Manager>> {
        self.manager.clone()
    }

    /// Accepts connections until shutdown, one thread per connection.
    pub fn run(self) -> Result<()> {
        let mut workers = Vec::new();
        for stream in self.listener.incoming() {
            if self.flag.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            let (m, f) = (self.manager.clone(), self.flag.clone());
            workers.push(thread::spawn(move || {
                // A dropped client only ends its own connection.
                let _ = connection(stream, &m, &f);
            }));
            workers.retain(|w| !w.is_finished());
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }
}

fn connection(stream: TcpStream, manager: &Mutex<Manager>, flag: &AtomicBool) -> io::Result<()> {
    stream.set_read_timeout(Some(POLL))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => return Ok(()),
            Ok(_) if buf.last() != Some(&b'\n') => return Ok(()), // EOF mid-line
            Ok(_) => {
                let reply = match std::str::from_utf8(&buf) {
                    Ok(line) if line.trim().is_empty() => None,
                    Ok(line) => Some(handle_line(manager, line.trim_end())),
                    Err(e) => Some(error_line("malformed_json", e).to_string()),
                };
                buf.clear();
                if let Some(r) = reply {
                    writer.write_all(r.as_bytes())?;
                    writer.write_all(b"\n")?;
                    writer.flush()?;
                }
            }
            // Partial input stays in `buf`; check for shutdown between polls.
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if flag.load(Ordering::SeqCst) {
                    return Ok(());
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}

/// Minimal blocking client, one request at a time.
pub struct Client {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Self {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    /// Sends one raw line and returns the raw reply line without its newline.
    pub fn call_raw(&mut self, line: &str) -> Result<String> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(ServiceError::Protocol("connection closed".into()));
        }
        Ok(reply.trim_end().to_string())
    }

    pub fn call(&mut self, request: &Value) -> Result<Value> {
        let reply = self.call_raw(&request.to_string())?;
        serde_json::from_str(&reply).map_err(|e| ServiceError::Protocol(format!("{e}: {reply}")))
    }

    pub fn infer(&mut self, instruction: &str, observation: &Observation) -> Result<Value> {
        self.call(&json!({
            "op": "infer",
            "instruction": instruction,
            "observation": observation.features,
            "proprio": observation.proprio,
        }))
    }
}

/// Decodes the `actions` field of an infer reply.
pub fn actions_from_json(reply: &Value) -> Result<Vec<Vec<f32>>> {
    let rows = reply
        .get("actions")
        .and_then(Value::as_array)
        .ok_or_else(|| ServiceError::Protocol(format!("no actions in {reply}")))?;
    rows.iter()
        .map(|r| {
            r.as_array()
                .ok_or_else(|| ServiceError::Protocol("action row is not an array".into()))?
                .iter()
                .map(|v| {
                    v.as_f64()
                        .map(|x| x as f32)
                        .ok_or_else(|| ServiceError::Protocol("non-numeric action".into()))
                })
                .collect()
        })
        .collect()
}
