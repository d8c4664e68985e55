use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use super::protocol::{self, decode_response, encode_request, hello_line, parse_hello_reply, response_len};
use super::{Embedder, Embedding};
use crate::error::{Error, Result};
use crate::image::ImageBuf;

enum Msg {
    Hello(String),
    Frame(Vec<u8>),
    Closed,
    Failed(String),
}

/// One child process. A reader thread forwards its output so that every
/// wait can be bounded by the timeout.
struct Connection {
    child: Child,
    stdin: Option<ChildStdin>,
    rx: Receiver<Msg>,
    dim: usize,
}

impl Connection {
    fn spawn(command: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(&command[0])
            .args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Handshake(format!("cannot start `{}`: {e}", command[0])))?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        let (dim_tx, dim_rx) = mpsc::channel::<usize>();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => return drop(tx.send(Msg::Closed)),
                Ok(_) => {}
                Err(e) => return drop(tx.send(Msg::Failed(e.to_string()))),
            }
            if tx.send(Msg::Hello(line)).is_err() {
                return;
            }
            let Ok(dim) = dim_rx.recv() else { return };
            loop {
                let mut buf = vec![0u8; response_len(dim)];
                let msg = match protocol::read_full(&mut reader, &mut buf) {
                    Ok(true) => Msg::Frame(buf),
                    Ok(false) => Msg::Closed,
                    Err(e) => Msg::Failed(e.to_string()),
                };
                let stop = !matches!(msg, Msg::Frame(_));
                if tx.send(msg).is_err() || stop {
                    return;
                }
            }
        });

        let mut conn = Connection {
            child,
            stdin,
            rx,
            dim: 0,
        };
        conn.send(hello_line().as_bytes())?;
        let dim = match conn.rx.recv_timeout(timeout) {
            Ok(Msg::Hello(line)) => parse_hello_reply(&line)?,
            Ok(Msg::Closed) => return Err(Error::Handshake("child exited before replying".into())),
            Ok(Msg::Failed(e)) => return Err(Error::Handshake(e)),
            Ok(Msg::Frame(_)) => unreachable!("frames follow the handshake"),
            Err(RecvTimeoutError::Timeout) => return Err(Error::EmbedderTimeout(timeout.as_secs_f64())),
            Err(RecvTimeoutError::Disconnected) => return Err(Error::EmbedderTerminated),
        };
        let _ = dim_tx.send(dim);
        conn.dim = dim;
        Ok(conn)
    }

    fn send(&mut self, bytes: &[u8]) -> Result<()> {
        let stdin = self.stdin.as_mut().ok_or(Error::EmbedderTerminated)?;
        stdin
            .write_all(bytes)
            .and_then(|_| stdin.flush())
            .map_err(|_| Error::EmbedderTerminated)
    }

    fn request(&mut self, id: u64, crop: &ImageBuf, timeout: Duration) -> Result<Vec<f64>> {
        self.send(&encode_request(id, crop))?;
        match self.rx.recv_timeout(timeout) {
            Ok(Msg::Frame(frame)) => {
                let (got, values) = decode_response(&frame, self.dim)?;
                if got != id {
                    return Err(Error::Protocol(format!("response id {got} does not match request id {id}")));
                }
                Ok(values)
            }
            Ok(Msg::Closed) | Err(RecvTimeoutError::Disconnected) => Err(Error::EmbedderTerminated),
            Ok(Msg::Failed(e)) => Err(Error::Protocol(e)),
            Ok(Msg::Hello(_)) => Err(Error::Protocol("unexpected handshake line".into())),
            Err(RecvTimeoutError::Timeout) => Err(Error::EmbedderTimeout(timeout.as_secs_f64())),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // Closing stdin asks the child to exit.
        drop(self.stdin.take());
        for _ in 0..50 {
            match self.child.try_wait() {
                Ok(Some(_)) | Err(_) => return,
                Ok(None) => thread::sleep(Duration::from_millis(2)),
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct Pool {
    idle: Vec<Connection>,
    live: usize,
}

/// Embedder backed by a pool of child processes speaking the framed
/// protocol. Each connection serves one request at a time; a connection
/// that fails in any way is discarded and replaced on demand.
pub struct ExternalEmbedder {
    command: Vec<String>,
    timeout: Duration,
    max: usize,
    dim: usize,
    pool: Mutex<Pool>,
    ready: Condvar,
    next_id: AtomicU64,
}

impl ExternalEmbedder {
    /// Starts one child immediately so that handshake problems surface here.
    pub fn spawn(command: Vec<String>, timeout_secs: f64, pool_size: usize) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::InvalidConfig("external command is empty".into()));
        }
        let timeout = Duration::from_secs_f64(timeout_secs);
        let first = Connection::spawn(&command, timeout)?;
        Ok(ExternalEmbedder {
            dim: first.dim,
            command,
            timeout,
            max: pool_size.max(1),
            pool: Mutex::new(Pool {
                idle: vec![first],
                live: 1,
            }),
            ready: Condvar::new(),
            next_id: AtomicU64::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn acquire(&self) -> Result<Connection> {
        let mut pool = self.pool.lock().unwrap();
        loop {
            if let Some(c) = pool.idle.pop() {
                return Ok(c);
            }
            if pool.live < self.max {
                pool.live += 1;
                drop(pool);
                return match Connection::spawn(&self.command, self.timeout) {
                    Ok(c) if c.dim == self.dim => Ok(c),
                    Ok(c) => {
                        self.discard();
                        Err(Error::DimensionMismatch {
                            expected: self.dim,
                            got: c.dim,
                        })
                    }
                    Err(e) => {
                        self.discard();
                        Err(e)
                    }
                };
            }
            pool = self.ready.wait(pool).unwrap();
        }
    }

    fn release(&self, conn: Connection) {
        self.pool.lock().unwrap().idle.push(conn);
        self.ready.notify_one();
    }

    fn discard(&self) {
        self.pool.lock().unwrap().live -= 1;
        self.ready.notify_one();
    }
}

impl Embedder for ExternalEmbedder {
    fn embed(&self, crop: &ImageBuf) -> Result<Embedding> {
        let mut conn = self.acquire()?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        match conn.request(id, crop, self.timeout).and_then(Embedding::new) {
            Ok(e) => {
                self.release(conn);
                Ok(e)
            }
            Err(e) => {
                drop(conn);
                self.discard();
                Err(e)
            }
        }
    }
}
