//! Prediction server: serves a checkpoint over the wire protocol, optionally
//! stacked with output/input tampering wrappers.
//!
//! The model is immutable while serving. Each connection gets its own
//! freshly seeded wrapper stack over the shared base oracle, so concurrent
//! clients cannot perturb each other's reproducibility.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::attack::{wrap_oracle, WrapperSpec};
use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::extract::{ModelOracle, PredictionOracle};
use crate::nn::Model;
use crate::protocol::{decode_request, encode_response, Response};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ServerConfig {
    pub bind: String,
    pub checkpoint: PathBuf,
    /// Tampering wrappers, innermost first.
    pub wrappers: Vec<WrapperSpec>,
    pub max_connections: usize,
    /// Per-connection query budget; None means unlimited.
    pub query_limit: Option<u64>,
}

impl ServerConfig {
    pub fn new(bind: impl Into<String>, checkpoint: impl Into<PathBuf>) -> Self {
        ServerConfig {
            bind: bind.into(),
            checkpoint: checkpoint.into(),
            wrappers: Vec::new(),
            max_connections: 32,
            query_limit: None,
        }
    }
}

pub struct RunningServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    base: Arc<ModelOracle>,
}

impl RunningServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base-model queries served so far, across all connections.
    pub fn queries_served(&self) -> u64 {
        self.base.queries_served()
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Load the checkpoint named by the config and serve it.
pub fn serve(config: &ServerConfig) -> Result<RunningServer> {
    let (model, _) = load_checkpoint(&config.checkpoint)?;
    serve_model(model, config)
}

/// Serve an in-memory model (the checkpoint path in `config` is ignored).
pub fn serve_model(model: Model, config: &ServerConfig) -> Result<RunningServer> {
    // Validate the wrapper stack up front so bad specs fail at startup.
    let base = Arc::new(ModelOracle::new(model)?);
    wrap_oracle(base.clone(), &config.wrappers)?;

    let listener = TcpListener::bind(&config.bind)
        .map_err(|e| Error::Protocol(format!("bind {}: {e}", config.bind)))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::Protocol(format!("set_nonblocking: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Protocol(format!("local_addr: {e}")))?;

    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let base2 = base.clone();
    let wrappers = config.wrappers.clone();
    let query_limit = config.query_limit;
    let max_connections = config.max_connections.max(1);

    let handle = std::thread::spawn(move || {
        let active = Arc::new(AtomicUsize::new(0));
        loop {
            if stop2.load(Ordering::SeqCst) {
                break;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    if active.load(Ordering::SeqCst) >= max_connections {
                        let _ = refuse(stream);
                        continue;
                    }
                    active.fetch_add(1, Ordering::SeqCst);
                    let active2 = active.clone();
                    let oracle = match wrap_oracle(base2.clone(), &wrappers) {
                        Ok(o) => o,
                        Err(_) => {
                            active2.fetch_sub(1, Ordering::SeqCst);
                            continue;
                        }
                    };
                    std::thread::spawn(move || {
                        let _ = handle_connection(stream, oracle, query_limit);
                        active2.fetch_sub(1, Ordering::SeqCst);
                    });
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(_) => break,
            }
        }
    });

    Ok(RunningServer {
        addr,
        stop,
        handle: Some(handle),
        base,
    })
}

fn refuse(stream: TcpStream) -> std::io::Result<()> {
    let mut w = BufWriter::new(stream);
    let resp = Response::failure(None, "too many connections");
    writeln!(w, "{}", encode_response(&resp).expect("static response"))?;
    w.flush()
}

fn handle_connection(
    stream: TcpStream,
    oracle: Arc<dyn PredictionOracle>,
    query_limit: Option<u64>,
) -> std::io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut served = 0u64;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match decode_request(&line) {
            Err(_) => Response::failure(None, "parse"),
            Ok(req) => {
                if let Some(limit) = query_limit {
                    if served >= limit {
                        let resp = Response::failure(Some(req.id), "query limit exceeded");
                        writeln!(writer, "{}", encode_response(&resp).expect("encodable"))?;
                        writer.flush()?;
                        // metered API cut-off: close the connection
                        return Ok(());
                    }
                }
                if req.input.len() != oracle.input_dim() {
                    Response::failure(
                        Some(req.id),
                        format!(
                            "input has {} values, model expects {}",
                            req.input.len(),
                            oracle.input_dim()
                        ),
                    )
                } else if req.input.iter().any(|v| !v.is_finite()) {
                    Response::failure(Some(req.id), "non-finite input")
                } else {
                    served += 1;
                    match oracle.query(&req.input) {
                        Ok(probs) => Response::ok(req.id, probs),
                        Err(e) => Response::failure(Some(req.id), e.to_string()),
                    }
                }
            }
        };
        match encode_response(&resp) {
            Ok(line) => {
                writeln!(writer, "{line}")?;
                writer.flush()?;
            }
            Err(_) => {
                let fallback = Response::failure(resp.id, "encoding failure");
                writeln!(writer, "{}", encode_response(&fallback).expect("encodable"))?;
                writer.flush()?;
            }
        }
    }
    Ok(())
}
