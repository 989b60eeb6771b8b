//! The manager: a forwarding node between clients and the control and
//! readout servers. Request and response lines pass through unchanged.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::rpc::{
    codes, parse_params, ClientError, LineServer, Request, Response, RpcClient, RpcError,
};

pub const MANAGER_TARGET: &str = "manager";

#[derive(Debug, Clone)]
pub struct ManagerOptions {
    pub connect_timeout: Duration,
    /// Longest a forwarded call may take (acquisitions can run for seconds).
    pub upstream_timeout: Duration,
}

impl Default for ManagerOptions {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(2),
            upstream_timeout: Duration::from_secs(120),
        }
    }
}

struct Routes {
    table: BTreeMap<String, SocketAddr>,
    options: ManagerOptions,
}

#[derive(Default)]
struct ClientSession {
    upstreams: HashMap<String, RpcClient>,
}

#[derive(Deserialize)]
struct Envelope {
    #[serde(default)]
    id: Value,
    target: String,
}

impl Routes {
    fn local(&self, line: &str) -> String {
        let req: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                return Response::err(
                    Value::Null,
                    RpcError::new(codes::PARSE_ERROR, e.to_string()),
                )
                .to_line()
            }
        };
        let result = match req.method.as_str() {
            "ping" => parse_params::<Empty>(req.params).map(|_| json!("pong")),
            "routes" => parse_params::<Empty>(req.params).map(|_| {
                Value::Object(
                    self.table
                        .iter()
                        .map(|(k, v)| (k.clone(), Value::String(v.to_string())))
                        .collect(),
                )
            }),
            other => Err(RpcError::new(
                codes::UNKNOWN_METHOD,
                format!("unknown method `manager.{other}`"),
            )),
        };
        match result {
            Ok(v) => Response::ok(req.id, v),
            Err(e) => Response::err(req.id, e),
        }
        .to_line()
    }

    fn forward(&self, session: &mut ClientSession, line: &str) -> String {
        let env: Envelope = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) => {
                let id = serde_json::from_str::<Value>(line)
                    .ok()
                    .and_then(|v| v.get("id").cloned())
                    .unwrap_or(Value::Null);
                return Response::err(id, RpcError::new(codes::PARSE_ERROR, e.to_string()))
                    .to_line();
            }
        };
        if env.target == MANAGER_TARGET {
            return self.local(line);
        }
        let Some(addr) = self.table.get(&env.target) else {
            return Response::err(
                env.id,
                RpcError::new(
                    codes::UNKNOWN_TARGET,
                    format!("unknown target `{}`", env.target),
                ),
            )
            .to_line();
        };
        if !session.upstreams.contains_key(&env.target) {
            match RpcClient::connect(addr, self.options.connect_timeout) {
                Ok(c) => {
                    session.upstreams.insert(env.target.clone(), c);
                }
                Err(e) => {
                    return Response::err(
                        env.id,
                        RpcError::new(
                            codes::UPSTREAM_UNREACHABLE,
                            format!("{} at {addr}: {e}", env.target),
                        ),
                    )
                    .to_line()
                }
            }
        }
        let upstream = session
            .upstreams
            .get_mut(&env.target)
            .expect("connected above");
        match upstream.call_raw(line, self.options.upstream_timeout) {
            Ok(reply) => reply,
            Err(e) => {
                // The connection state is unknown after a failure; reconnect next time.
                session.upstreams.remove(&env.target);
                let err = match e {
                    ClientError::Timeout => {
                        RpcError::new(codes::TIMEOUT, format!("{} did not answer", env.target))
                    }
                    other => RpcError::new(
                        codes::UPSTREAM_UNREACHABLE,
                        format!("{}: {other}", env.target),
                    ),
                };
                Response::err(env.id, err).to_line()
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

pub struct Manager {
    server: LineServer,
}

impl Manager {
    /// `routes` maps target names (`control`, `readout`) to server addresses.
    pub fn spawn(
        addr: impl ToSocketAddrs,
        routes: BTreeMap<String, SocketAddr>,
        options: ManagerOptions,
    ) -> io::Result<Self> {
        let routes = Arc::new(Routes {
            table: routes,
            options,
        });
        let server = LineServer::spawn_with(
            addr,
            MANAGER_TARGET,
            ClientSession::default,
            Arc::new(move |session: &mut ClientSession, line: &str| routes.forward(session, line)),
        )?;
        Ok(Self { server })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn shutdown(&mut self) {
        self.server.shutdown();
    }
}
