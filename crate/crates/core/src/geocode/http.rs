//! HTTP geocoding provider.
//!
//! Requests are `GET endpoint?address=..&key=..`; the response body follows
//! the common geocoding JSON layout:
//!
//! ```json
//! {"status": "OK",
//!  "results": [{"geometry": {"location": {"lat": 37.8, "lng": -122.27},
//!                            "location_type": "ROOFTOP"}}]}
//! ```
//!
//! HTTP 429 and `OVER_QUERY_LIMIT` are treated as rate-limit signals and
//! retried with exponential backoff, as are transport failures and 5xx.

use std::time::Duration;

use serde_json::Value;

use super::{GeocodeError, GeocodeProvider, GeocodeRequest, GeocodeResult, MatchQuality};
use crate::bim::Geocode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal blocking GET used by [`HttpProvider`].
pub trait Transport: Send + Sync {
    fn get(&self, url: &str, query: &[(&str, &str)]) -> Result<HttpResponse, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): base, 2·base, 4·base, ...
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct HttpProvider<T> {
    endpoint: String,
    api_key: String,
    transport: T,
    retry: RetryPolicy,
    sleep: Sleeper,
}

enum Outcome {
    Done(Result<GeocodeResult, GeocodeError>),
    RateLimited,
    Transient(String),
}

impl<T: Transport> HttpProvider<T> {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, transport: T) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            transport,
            retry: RetryPolicy::default(),
            sleep: Box::new(std::thread::sleep),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn attempt(&self, req: &GeocodeRequest) -> Outcome {
        let mut query = vec![("address", req.address()), ("key", self.api_key.as_str())];
        if let Some(region) = req.region_hint() {
            query.push(("region", region));
        }
        match self.transport.get(&self.endpoint, &query) {
            Err(e) => Outcome::Transient(e),
            Ok(resp) if resp.status == 429 => Outcome::RateLimited,
            Ok(resp) if resp.status >= 500 => Outcome::Transient(format!("HTTP {}", resp.status)),
            Ok(resp) if resp.status != 200 => {
                Outcome::Done(Err(GeocodeError::BadResponse(format!("HTTP {}", resp.status))))
            }
            Ok(resp) => match parse_response(&resp.body, req.address()) {
                Err(GeocodeError::RateLimited { .. }) => Outcome::RateLimited,
                other => Outcome::Done(other),
            },
        }
    }
}

impl<T: Transport> GeocodeProvider for HttpProvider<T> {
    fn lookup(&self, req: &GeocodeRequest) -> Result<GeocodeResult, GeocodeError> {
        let attempts = self.retry.max_attempts.max(1);
        for attempt in 1..=attempts {
            let outcome = self.attempt(req);
            let last = attempt == attempts;
            match outcome {
                Outcome::Done(r) => return r,
                Outcome::RateLimited if last => return Err(GeocodeError::RateLimited { attempts }),
                Outcome::Transient(message) if last => return Err(GeocodeError::Transport { attempts, message }),
                Outcome::RateLimited | Outcome::Transient(_) => {
                    log::debug!("geocoder attempt {attempt} failed, backing off");
                    (self.sleep)(self.retry.delay(attempt));
                }
            }
        }
        unreachable!("loop returns on the last attempt")
    }
}

/// Parses a geocoding JSON body into the first result.
pub fn parse_response(body: &str, address: &str) -> Result<GeocodeResult, GeocodeError> {
    let doc: Value = serde_json::from_str(body).map_err(|e| GeocodeError::BadResponse(e.to_string()))?;
    match doc.get("status").and_then(Value::as_str) {
        Some("OK") => {}
        Some("ZERO_RESULTS") => return Err(GeocodeError::NotFound(address.to_string())),
        Some("OVER_QUERY_LIMIT") => return Err(GeocodeError::RateLimited { attempts: 1 }),
        other => return Err(GeocodeError::BadResponse(format!("status {other:?}"))),
    }
    let first = doc
        .pointer("/results/0/geometry")
        .ok_or_else(|| GeocodeError::NotFound(address.to_string()))?;
    let coord = |k: &str| {
        first
            .pointer(&format!("/location/{k}"))
            .and_then(Value::as_f64)
            .ok_or_else(|| GeocodeError::BadResponse(format!("missing location.{k}")))
    };
    let geocode = Geocode::new(coord("lat")?, coord("lng")?)?;
    let match_quality = match first.get("location_type").and_then(Value::as_str) {
        Some("ROOFTOP") => MatchQuality::Exact,
        Some("RANGE_INTERPOLATED") => MatchQuality::Interpolated,
        _ => MatchQuality::Approximate,
    };
    Ok(GeocodeResult { geocode, match_quality })
}

/// Blocking transport over `ureq`.
#[cfg(feature = "http")]
pub struct UreqTransport {
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl Default for UreqTransport {
    fn default() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self { agent }
    }
}

#[cfg(feature = "http")]
impl Transport for UreqTransport {
    fn get(&self, url: &str, query: &[(&str, &str)]) -> Result<HttpResponse, String> {
        let mut resp = self
            .agent
            .get(url)
            .query_pairs(query.iter().copied())
            .call()
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}
