use std::collections::BTreeMap;
use std::sync::Arc;

use mame_core::service::{self, Experiment, ServerConfig, ServiceState};
use serde_json::Value;

/// A server on an ephemeral port, on its own runtime thread. Dropping it
/// shuts the server down and waits for it.
pub struct TestServer {
    pub base: String,
    pub state: Arc<ServiceState>,
    runtime: Option<tokio::runtime::Runtime>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<()>>,
}

impl TestServer {
    pub fn start(config: ServerConfig, experiments: BTreeMap<String, Experiment>) -> Self {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let state = ServiceState::open(config, experiments).unwrap();
        let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel();
        let s = state.clone();
        let task = runtime.spawn(async move {
            service::serve(listener, s, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        Self {
            base,
            state,
            runtime: Some(runtime),
            shutdown: Some(tx),
            task: Some(task),
        }
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let (Some(rt), Some(task)) = (self.runtime.take(), self.task.take()) {
            let _ = rt.block_on(task);
            rt.shutdown_timeout(std::time::Duration::from_secs(10));
        }
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.halt();
    }
}

pub struct Client {
    agent: ureq::Agent,
    pub base: String,
}

pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

impl Client {
    pub fn new(base: &str) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(std::time::Duration::from_secs(120)))
            .build();
        Self {
            agent: ureq::Agent::new_with_config(config),
            base: base.to_string(),
        }
    }

    fn reply(r: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
        let r = r.unwrap();
        let status = r.status().as_u16();
        let body = r.into_body().read_to_vec().unwrap();
        Reply { status, body }
    }

    pub fn get(&self, path: &str) -> Reply {
        Self::reply(self.agent.get(format!("{}{path}", self.base)).call())
    }

    pub fn post(&self, path: &str, body: &Value) -> Reply {
        Self::reply(self.agent.post(format!("{}{path}", self.base)).send_json(body))
    }

    pub fn post_raw(&self, path: &str, body: &str, idempotency_key: Option<&str>) -> Reply {
        let mut req = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json");
        if let Some(k) = idempotency_key {
            req = req.header("Idempotency-Key", k);
        }
        Self::reply(req.send(body))
    }
}
