//! Remote prediction oracle: the client side of the wire protocol,
//! satisfying the same oracle contract as an in-process model.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::extract::PredictionOracle;
use crate::protocol::{decode_response, encode_request, Request};

const RETRIES: usize = 3;
const BACKOFF_BASE_MS: u64 = 50;

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Connection {
    fn open(addr: &str) -> Result<Connection> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Protocol(format!("connect {addr}: {e}")))?;
        stream
            .set_nodelay(true)
            .map_err(|e| Error::Protocol(format!("nodelay: {e}")))?;
        let reader = BufReader::new(
            stream
                .try_clone()
                .map_err(|e| Error::Protocol(format!("clone stream: {e}")))?,
        );
        Ok(Connection {
            reader,
            writer: BufWriter::new(stream),
        })
    }
}

/// Oracle over a remote prediction server. Counts queries client-side and
/// reconnects with bounded backoff on connection loss.
pub struct RemoteOracle {
    addr: String,
    input_dim: usize,
    class_count: usize,
    conn: Mutex<Option<Connection>>,
    next_id: AtomicU64,
    queries: AtomicU64,
}

impl RemoteOracle {
    /// Connect eagerly; `input_dim`/`class_count` come from the caller's key
    /// and dataset context (the wire protocol has no metadata message).
    pub fn connect(addr: &str, input_dim: usize, class_count: usize) -> Result<Self> {
        let conn = Connection::open(addr)?;
        Ok(RemoteOracle {
            addr: addr.to_string(),
            input_dim,
            class_count,
            conn: Mutex::new(Some(conn)),
            next_id: AtomicU64::new(1),
            queries: AtomicU64::new(0),
        })
    }

    fn exchange(&self, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let requests: Vec<Request> = batch
            .iter()
            .map(|input| Request {
                id: self.next_id.fetch_add(1, Ordering::Relaxed),
                input: input.clone(),
            })
            .collect();

        let mut guard = self.conn.lock().expect("connection lock");
        let mut attempt = 0usize;
        loop {
            if guard.is_none() {
                *guard = Some(Connection::open(&self.addr)?);
            }
            let conn = guard.as_mut().expect("connection present");
            match Self::pipeline(conn, &requests) {
                Ok(answers) => {
                    self.queries
                        .fetch_add(requests.len() as u64, Ordering::Relaxed);
                    return Ok(answers);
                }
                Err(Error::Protocol(detail)) if attempt < RETRIES => {
                    // connection-level failure: drop, back off, reconnect
                    *guard = None;
                    std::thread::sleep(Duration::from_millis(BACKOFF_BASE_MS << attempt));
                    attempt += 1;
                    let _ = detail;
                }
                Err(e) => {
                    return Err(Error::Oracle {
                        queries_done: self.queries.load(Ordering::Relaxed),
                        detail: e.to_string(),
                    })
                }
            }
        }
    }

    fn pipeline(conn: &mut Connection, requests: &[Request]) -> Result<Vec<Vec<f64>>> {
        for req in requests {
            let line = encode_request(req)?;
            writeln!(conn.writer, "{line}")
                .map_err(|e| Error::Protocol(format!("write: {e}")))?;
        }
        conn.writer
            .flush()
            .map_err(|e| Error::Protocol(format!("flush: {e}")))?;

        let mut by_id: std::collections::HashMap<u64, Vec<f64>> =
            std::collections::HashMap::with_capacity(requests.len());
        let mut line = String::new();
        while by_id.len() < requests.len() {
            line.clear();
            let n = conn
                .reader
                .read_line(&mut line)
                .map_err(|e| Error::Protocol(format!("read: {e}")))?;
            if n == 0 {
                return Err(Error::Protocol("connection closed by server".into()));
            }
            let resp = decode_response(line.trim_end())?;
            if let Some(err) = resp.error {
                // server answered; not a connection failure, so don't retry
                return Err(Error::Oracle {
                    queries_done: 0,
                    detail: format!("server error: {err}"),
                });
            }
            let id = resp
                .id
                .ok_or_else(|| Error::Protocol("response without id".into()))?;
            let probs = resp
                .probs
                .ok_or_else(|| Error::Protocol("response without probs".into()))?;
            by_id.insert(id, probs);
        }
        requests
            .iter()
            .map(|r| {
                by_id
                    .remove(&r.id)
                    .ok_or_else(|| Error::Protocol(format!("missing response for id {}", r.id)))
            })
            .collect()
    }
}

impl PredictionOracle for RemoteOracle {
    fn query(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.exchange(std::slice::from_ref(&x.to_vec()))?.remove(0))
    }

    fn query_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        self.exchange(xs)
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn queries_served(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}
