//! Minimal blocking JSON-over-HTTP plumbing for the remote clients.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// A remote call that failed after all attempts.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("request to {url} failed after {attempts} attempt(s): {message}")]
pub struct TransportError {
    pub url: String,
    pub attempts: u32,
    pub message: String,
}

/// Counting gate bounding the number of concurrent requests.
#[derive(Debug)]
pub(crate) struct InFlight {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    pub(crate) fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared client for the embedding, scoring and generation endpoints.
#[derive(Debug)]
pub(crate) struct JsonClient {
    agent: ureq::Agent,
    base: String,
    retries: u32,
    gate: InFlight,
}

impl JsonClient {
    pub(crate) fn new(endpoint: &str, retries: u32, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            base: endpoint.trim_end_matches('/').to_string(),
            retries,
            gate: InFlight::new(max_in_flight),
        }
    }

    /// POST `body` to `{endpoint}/{route}` and decode a JSON reply.
    ///
    /// Any status other than 200 counts as a failed attempt.
    pub(crate) fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        route: &str,
        body: &Req,
    ) -> Result<Resp, TransportError> {
        let url = format!("{}/{}", self.base, route);
        let _slot = self.gate.acquire();
        let mut attempts = 0;
        let mut last = String::new();
        while attempts <= self.retries {
            attempts += 1;
            match self.agent.post(&url).send_json(body) {
                Ok(mut resp) if resp.status() == 200 => match resp.body_mut().read_json::<Resp>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last = format!("invalid response body: {e}"),
                },
                Ok(resp) => last = format!("HTTP status {}", resp.status()),
                Err(e) => last = e.to_string(),
            }
            if attempts <= self.retries {
                std::thread::sleep(Duration::from_millis(50 * u64::from(attempts)));
            }
        }
        Err(TransportError {
            url,
            attempts,
            message: last,
        })
    }
}
