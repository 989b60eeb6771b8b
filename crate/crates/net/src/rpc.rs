//! Newline-delimited JSON RPC shared by the manager and both servers.
//!
//! Request: `{"id": .., "target": "control", "method": "ping", "params": {..}}`
//! Response: `{"id": .., "result": ..}` or `{"id": .., "error": {"code": .., "message": ..}}`

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub mod codes {
    pub const PARSE_ERROR: &str = "parse-error";
    pub const UNKNOWN_TARGET: &str = "unknown-target";
    pub const UNKNOWN_METHOD: &str = "unknown-method";
    pub const INVALID_PARAMS: &str = "invalid-params";
    pub const UPSTREAM_UNREACHABLE: &str = "upstream-unreachable";
    pub const EXECUTION_ERROR: &str = "execution-error";
    pub const TIMEOUT: &str = "timeout";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: Value,
    pub target: String,
    pub method: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{code}: {message}")]
pub struct RpcError {
    pub code: String,
    pub message: String,
}

impl RpcError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn invalid_params(message: impl Into<String>) -> Self {
        Self::new(codes::INVALID_PARAMS, message)
    }

    pub fn execution(message: impl std::fmt::Display) -> Self {
        Self::new(codes::EXECUTION_ERROR, message.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RpcError>,
}

impl Response {
    pub fn ok(id: Value, result: Value) -> Self {
        Self {
            id,
            result: Some(result),
            error: None,
        }
    }

    pub fn err(id: Value, error: RpcError) -> Self {
        Self {
            id,
            result: None,
            error: Some(error),
        }
    }

    pub fn into_result(self) -> Result<Value, RpcError> {
        match (self.result, self.error) {
            (_, Some(e)) => Err(e),
            (Some(v), None) => Ok(v),
            (None, None) => Ok(Value::Null),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

/// Deserializes method params, naming the offending field on failure.
/// Absent params are treated as an empty object.
pub fn parse_params<T: DeserializeOwned>(params: Value) -> Result<T, RpcError> {
    let params = if params.is_null() {
        Value::Object(Default::default())
    } else {
        params
    };
    serde_path_to_error::deserialize(params).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            RpcError::invalid_params(inner.to_string())
        } else {
            RpcError::invalid_params(format!("{path}: {inner}"))
        }
    })
}

pub trait Handler: Send + Sync + 'static {
    fn target(&self) -> &str;
    fn handle(&self, method: &str, params: Value) -> Result<Value, RpcError>;
}

/// Maps one request line to one response line.
pub fn dispatch_line(handler: &dyn Handler, line: &str) -> String {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<Value>(line)
                .ok()
                .and_then(|v| v.get("id").cloned())
                .unwrap_or(Value::Null);
            return Response::err(id, RpcError::new(codes::PARSE_ERROR, e.to_string())).to_line();
        }
    };
    let resp = if req.target != handler.target() {
        Response::err(
            req.id,
            RpcError::new(
                codes::UNKNOWN_TARGET,
                format!("unknown target `{}`", req.target),
            ),
        )
    } else {
        match handler.handle(&req.method, req.params) {
            Ok(v) => Response::ok(req.id, v),
            Err(e) => Response::err(req.id, e),
        }
    };
    resp.to_line()
}

/// Line-oriented TCP server; one thread per connection.
pub struct LineServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl LineServer {
    /// Serves `f(line) -> reply line` on every connection.
    pub fn spawn<F>(addr: impl ToSocketAddrs, name: &str, f: F) -> io::Result<Self>
    where
        F: Fn(&str) -> String + Send + Sync + 'static,
    {
        Self::spawn_with(
            addr,
            name,
            || (),
            Arc::new(move |_: &mut (), line: &str| f(line)),
        )
    }

    /// Like [`spawn`](Self::spawn) but with per-connection state created by `init`.
    pub fn spawn_with<S, I, F>(
        addr: impl ToSocketAddrs,
        name: &str,
        init: I,
        f: Arc<F>,
    ) -> io::Result<Self>
    where
        S: Send + 'static,
        I: Fn() -> S + Send + Sync + 'static,
        F: Fn(&mut S, &str) -> String + Send + Sync + 'static,
    {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Mutex::new(Vec::new()));
        let (s, c) = (Arc::clone(&stop), Arc::clone(&conns));
        let acceptor = thread::Builder::new()
            .name(format!("{name}-accept"))
            .spawn(move || {
                for conn in listener.incoming() {
                    if s.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    stream.set_nodelay(true).ok();
                    if let Ok(clone) = stream.try_clone() {
                        let mut list = c.lock().unwrap();
                        list.retain(|s: &TcpStream| s.peer_addr().is_ok());
                        list.push(clone);
                    }
                    let f = Arc::clone(&f);
                    let state = init();
                    thread::spawn(move || serve_lines(stream, state, f));
                }
            })?;
        Ok(Self {
            addr,
            stop,
            conns,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for c in self.conns.lock().unwrap().drain(..) {
            c.shutdown(Shutdown::Both).ok();
        }
        TcpStream::connect_timeout(&self.addr, Duration::from_millis(200)).ok();
        if let Some(a) = self.acceptor.take() {
            a.join().ok();
        }
    }
}

impl Drop for LineServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_lines<S, F>(stream: TcpStream, mut state: S, f: Arc<F>)
where
    F: Fn(&mut S, &str) -> String,
{
    let Ok(w) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(w);
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let mut reply = f(&mut state, trimmed);
        reply.push('\n');
        if writer
            .write_all(reply.as_bytes())
            .and_then(|_| writer.flush())
            .is_err()
        {
            return;
        }
    }
}

/// Serves a [`Handler`] over NDJSON.
pub struct RpcServer {
    inner: LineServer,
}

impl RpcServer {
    pub fn spawn(addr: impl ToSocketAddrs, handler: Arc<dyn Handler>) -> io::Result<Self> {
        let name = handler.target().to_string();
        let inner = LineServer::spawn(addr, &name, move |line| {
            dispatch_line(handler.as_ref(), line)
        })?;
        Ok(Self { inner })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.local_addr()
    }

    pub fn shutdown(&mut self) {
        self.inner.shutdown();
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] io::Error),
    #[error("timed out waiting for a response")]
    Timeout,
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error(transparent)]
    Server(#[from] RpcError),
}

/// A persistent client connection; calls are sequential.
pub struct RpcClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: AtomicU64,
}

impl RpcClient {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, ClientError> {
        let mut last = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(s) => {
                    s.set_nodelay(true).ok();
                    let w = s.try_clone()?;
                    return Ok(Self {
                        reader: BufReader::new(s),
                        writer: BufWriter::new(w),
                        next_id: AtomicU64::new(1),
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(ClientError::Transport(last.unwrap_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidInput, "no address")
        })))
    }

    /// Sends one raw line and returns the raw reply line without its newline.
    pub fn call_raw(&mut self, line: &str, timeout: Duration) -> Result<String, ClientError> {
        self.reader.get_ref().set_read_timeout(Some(timeout))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut reply = String::new();
        match self.reader.read_line(&mut reply) {
            Ok(0) => Err(ClientError::Transport(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "connection closed",
            ))),
            Ok(_) => {
                let trimmed = reply.trim_end_matches(['\n', '\r']).len();
                reply.truncate(trimmed);
                Ok(reply)
            }
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                Err(ClientError::Timeout)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn call(
        &mut self,
        target: &str,
        method: &str,
        params: Value,
        timeout: Duration,
    ) -> Result<Value, ClientError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let req = Request {
            id: Value::from(id),
            target: target.into(),
            method: method.into(),
            params,
        };
        let line = serde_json::to_string(&req).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let reply = self.call_raw(&line, timeout)?;
        let resp: Response =
            serde_json::from_str(&reply).map_err(|e| ClientError::Protocol(e.to_string()))?;
        if resp.id != id {
            return Err(ClientError::Protocol(format!(
                "response id {} != request id {id}",
                resp.id
            )));
        }
        Ok(resp.into_result()?)
    }
}

/// One round trip on a fresh connection.
pub fn client_call(
    addr: impl ToSocketAddrs,
    target: &str,
    method: &str,
    params: Value,
    timeout: Duration,
) -> Result<Value, ClientError> {
    RpcClient::connect(addr, timeout)?.call(target, method, params, timeout)
}
