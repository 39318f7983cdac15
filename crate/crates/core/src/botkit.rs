//! Example webhook services: a stock quote bot, a weather bot and an echo bot.
//! Data comes from fixture tables, so responses are deterministic.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{Query, RawQuery, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

/// Fixture file shipped with the repository.
pub const DEFAULT_FIXTURES: &str = include_str!("../assets/botkit.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub price: String,
    pub change: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixtures {
    #[serde(default)]
    pub quotes: BTreeMap<String, Quote>,
    #[serde(default)]
    pub weather: BTreeMap<String, String>,
}

impl Fixtures {
    /// Parses fixture JSON, uppercasing symbols and lowercasing city codes.
    pub fn from_json(src: &str) -> anyhow::Result<Fixtures> {
        let raw: Fixtures = serde_json::from_str(src)?;
        let mut fx = Fixtures::default();
        for (sym, q) in raw.quotes {
            if fx.quotes.insert(sym.to_uppercase(), q).is_some() {
                anyhow::bail!("duplicate symbol {sym}");
            }
        }
        for (city, line) in raw.weather {
            if fx.weather.insert(city.to_lowercase(), line).is_some() {
                anyhow::bail!("duplicate city {city}");
            }
        }
        Ok(fx)
    }

    pub fn load(path: &Path) -> anyhow::Result<Fixtures> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn shipped() -> Fixtures {
        Self::from_json(DEFAULT_FIXTURES).expect("shipped fixtures are valid")
    }
}

/// Mirrors the classic quote script: `t <symbol>` → `SYMBOL : price change`.
pub fn quote_handler(fx: &Fixtures, t: Option<&str>, _u: Option<&str>) -> String {
    let t = match t {
        Some(t) if !t.is_empty() => t,
        _ => return "unknown".to_string(),
    };
    let symbol = match t.find(' ') {
        Some(i) if i > 0 => t[i + 1..].trim().to_uppercase(),
        _ => String::new(),
    };
    if symbol.is_empty() {
        return format!("{t}?? could not get ticket");
    }
    match fx.quotes.get(&symbol) {
        Some(q) => format!("{symbol} : {} {}", q.price, q.change),
        None => format!("{symbol}?? could not get ticket"),
    }
}

/// `w <city>` → the fixture forecast for that city.
pub fn weather_handler(fx: &Fixtures, t: Option<&str>, _u: Option<&str>) -> String {
    let city = t
        .unwrap_or_default()
        .split_whitespace()
        .nth(1)
        .map(str::to_lowercase)
        .unwrap_or_default();
    if city.is_empty() {
        return "no forecast".to_string();
    }
    match fx.weather.get(&city) {
        Some(line) => line.clone(),
        None => format!("no forecast for {city}"),
    }
}

pub fn echo_handler(t: Option<&str>, u: Option<&str>) -> String {
    format!("{}: {}", u.unwrap_or_default(), t.unwrap_or_default())
}

#[derive(Clone)]
struct BotState {
    fixtures: Arc<Fixtures>,
    requests: Arc<Mutex<Vec<String>>>,
}

type Params = Query<HashMap<String, String>>;

fn text_plain(body: String) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], body)
}

fn log_request(s: &BotState, path: &str, raw: Option<String>) {
    let line = match raw {
        Some(q) => format!("{path}?{q}"),
        None => path.to_string(),
    };
    s.requests.lock().push(line);
}

async fn quote(State(s): State<BotState>, RawQuery(raw): RawQuery, Query(p): Params) -> impl IntoResponse {
    log_request(&s, "/quote", raw);
    let body = quote_handler(&s.fixtures, p.get("t").map(String::as_str), p.get("u").map(String::as_str));
    text_plain(body + "\n")
}

async fn weather(State(s): State<BotState>, RawQuery(raw): RawQuery, Query(p): Params) -> impl IntoResponse {
    log_request(&s, "/weather", raw);
    let body = weather_handler(&s.fixtures, p.get("t").map(String::as_str), p.get("u").map(String::as_str));
    text_plain(body + "\n")
}

async fn echo(State(s): State<BotState>, RawQuery(raw): RawQuery, Query(p): Params) -> impl IntoResponse {
    log_request(&s, "/echo", raw);
    text_plain(echo_handler(p.get("t").map(String::as_str), p.get("u").map(String::as_str)))
}

pub fn router(fixtures: Fixtures) -> (Router, Arc<Mutex<Vec<String>>>) {
    let requests = Arc::new(Mutex::new(Vec::new()));
    let state = BotState {
        fixtures: Arc::new(fixtures),
        requests: requests.clone(),
    };
    let router = Router::new()
        .route("/quote", get(quote))
        .route("/weather", get(weather))
        .route("/echo", get(echo))
        .with_state(state);
    (router, requests)
}

/// A running fixture server.
pub struct BotServer {
    pub addr: SocketAddr,
    requests: Arc<Mutex<Vec<String>>>,
    task: JoinHandle<()>,
}

impl BotServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves in the background.
    pub async fn start(addr: SocketAddr, fixtures: Fixtures) -> std::io::Result<BotServer> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let (app, requests) = router(fixtures);
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(BotServer { addr, requests, task })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Path and raw query string of every request received so far.
    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().clone()
    }
}

impl Drop for BotServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}
