//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::process::ExitCode;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::routing::get;
use axum::Router;
use percent_encoding::percent_decode_str;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use regex::Regex;
use tokio::net::TcpListener;

use t411::botkit::{quote_handler, BotServer, Fixtures};
use t411::dispatch::{build_call, Dispatcher, MAX_REPLY_SCALARS};
use t411::domain::parse_command;
use t411::pipeline::Gateway;
use t411::registry::RegistryStore;
use t411::simulator::script::{settle, simulate, SimulateOptions};
use t411::transport::{ApiFamily, BudgetConfig, PollCursor, Transport, TransportError};
use t411::{percent_encode, Channel, Handle, SimWorld};

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const AMPLE: BudgetConfig = BudgetConfig {
    rest_capacity: 1_000_000,
    rest_window_seconds: 900,
    stream_capacity: 1_000,
    stream_window_seconds: 900,
};

fn local() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

fn gateway(world: &SimWorld, registry: RegistryStore) -> Gateway {
    Gateway::builder(Arc::new(world.clone()), registry.into_shared())
        .dispatcher(Dispatcher::http().timeout_seconds(5))
        .poll_interval(0)
        .build()
        .expect("gateway builds")
}

fn registry_with(entries: &[(&str, String)]) -> RegistryStore {
    let mut reg = RegistryStore::in_memory();
    for (key, url) in entries {
        reg.register(key, url, "ops").expect("fixture registration");
    }
    reg
}

fn only_reply_to(world: &SimWorld, author: &str) -> Result<String, String> {
    let replies: Vec<String> = world
        .read_outbox()
        .into_iter()
        .filter(|p| p.reply.recipient.as_str() == author)
        .map(|p| p.reply.text)
        .collect();
    match replies.as_slice() {
        [one] => Ok(one.clone()),
        other => Err(format!("expected one reply to {author}, got {other:?}")),
    }
}

async fn wire_example() -> Check {
    let bots = BotServer::start(local(), Fixtures::shipped()).await.map_err(|e| e.to_string())?;
    let world = SimWorld::new("t411");
    let gw = gateway(&world, registry_with(&[("t", format!("{}/quote", bots.base_url()))]));
    world.inject("abava", "@t411 t ORCL", Channel::Mention).unwrap();
    settle(&gw).await;

    let requests = bots.requests();
    ensure!(requests.len() == 1, "expected exactly one GET, saw {requests:?}");
    let query = requests[0].split_once('?').map(|(_, q)| q).unwrap_or("");
    ensure!(query == "t=t%20ORCL&u=abava", "query string was {query:?}");
    let reply = only_reply_to(&world, "abava")?;
    ensure!(reply == "@abava ORCL : 39.50 +0.12", "reply was {reply:?}");
    Ok(())
}

async fn dialogue_example() -> Check {
    let world = SimWorld::new("t411");
    let gw = gateway(&world, RegistryStore::in_memory());
    world.inject("abava", "@t411 how are you?", Channel::Mention).unwrap();
    settle(&gw).await;
    let reply = only_reply_to(&world, "abava")?;
    ensure!(reply == "@abava Let me see, just a minute please.", "reply was {reply:?}");
    Ok(())
}

async fn quote_handler_branches() -> Check {
    let fx = Fixtures::shipped();
    let absent = quote_handler(&fx, None, None);
    ensure!(absent == "unknown", "absent t gave {absent:?}");
    let bare = quote_handler(&fx, Some("t"), Some("abava"));
    ensure!(bare == "t?? could not get ticket", "bare key gave {bare:?}");

    let bots = BotServer::start(local(), fx).await.map_err(|e| e.to_string())?;
    let body = reqwest::get(format!("{}/quote", bots.base_url()))
        .await
        .map_err(|e| e.to_string())?
        .text()
        .await
        .map_err(|e| e.to_string())?;
    ensure!(body.trim() == "unknown", "GET without t gave {body:?}");

    let world = SimWorld::new("t411");
    let gw = gateway(&world, registry_with(&[("t", format!("{}/quote", bots.base_url()))]));
    world.inject("abava", "@t411 t", Channel::Mention).unwrap();
    settle(&gw).await;
    let reply = only_reply_to(&world, "abava")?;
    ensure!(reply == "@abava t?? could not get ticket", "reply was {reply:?}");
    Ok(())
}

async fn exactly_once_under_replay() -> Check {
    let bots = BotServer::start(local(), Fixtures::shipped()).await.map_err(|e| e.to_string())?;
    let world = SimWorld::with_budgets("t411", AMPLE);
    let gw = gateway(&world, registry_with(&[("e", format!("{}/echo", bots.base_url()))]));
    for i in 0..50 {
        let channel = if i % 2 == 0 { Channel::Mention } else { Channel::DirectMessage };
        world.inject(&format!("user{i}"), &format!("@t411 e {i}"), channel).unwrap();
    }
    for _ in 0..3 {
        gw.tick().await.map_err(|e| e.to_string())?;
        gw.process_all().await.map_err(|e| e.to_string())?;
    }
    gw.rewind_cursors();
    for _ in 0..3 {
        gw.tick().await.map_err(|e| e.to_string())?;
        gw.process_all().await.map_err(|e| e.to_string())?;
    }
    let outbox = world.read_outbox();
    ensure!(outbox.len() == 50, "expected 50 replies, got {}", outbox.len());
    let mut per_message: HashMap<u64, usize> = HashMap::new();
    for p in &outbox {
        *per_message.entry(p.reply.in_reply_to).or_default() += 1;
    }
    ensure!(
        per_message.len() == 50 && per_message.values().all(|n| *n == 1),
        "replies per message: {per_message:?}"
    );
    let calls = bots.requests().len();
    ensure!(calls == 50, "expected 50 webhook calls, got {calls}");
    Ok(())
}

async fn budget_independence() -> Check {
    let world = SimWorld::new("t411");
    let mut polls = 0;
    loop {
        match world.poll_new(PollCursor::new(Channel::Mention)).await {
            Ok(_) => polls += 1,
            Err(TransportError::RateLimited(ApiFamily::Rest)) => break,
            Err(e) => return Err(format!("unexpected poll error {e}")),
        }
        ensure!(polls <= 15, "polling was never rate limited");
    }
    ensure!(polls == 15, "rest budget allowed {polls} polls");
    let usage = world.budget_usage();
    ensure!(usage.streaming.used == 0, "streaming used {} after rest exhaustion", usage.streaming.used);
    let stream = world.open_stream().await;
    ensure!(stream.is_ok(), "stream refused after rest exhaustion: {:?}", stream.err());
    let usage = world.budget_usage();
    ensure!(usage.streaming.used == 1, "stream open cost {} units", usage.streaming.used);
    ensure!(usage.rest.remaining() == 0, "stream open changed rest budget");
    drop(stream);

    let other = SimWorld::new("t411");
    for _ in 0..3 {
        other.open_stream().await.map_err(|e| e.to_string())?;
    }
    ensure!(
        matches!(other.open_stream().await, Err(TransportError::RateLimited(ApiFamily::Streaming))),
        "fourth stream open was not rate limited"
    );
    ensure!(other.budget_usage().rest.used == 0, "streaming exhaustion touched rest budget");
    other.poll_new(PollCursor::new(Channel::Mention)).await.map_err(|e| e.to_string())?;
    Ok(())
}

async fn rate_limit_compliance() -> Check {
    let world = SimWorld::new("t411");
    let gw = gateway(&world, RegistryStore::in_memory());
    for i in 0..100 {
        world.inject(&format!("user{i}"), "@t411 hello", Channel::Mention).unwrap();
    }
    // Hand messages to the bus directly so no REST units go to polling.
    for msg in world.messages(Channel::Mention) {
        gw.bus().offer(msg);
    }
    gw.process_all().await.map_err(|e| e.to_string())?;
    ensure!(world.outbox_len() == 15, "posted {} in the first window", world.outbox_len());
    let queued = gw.retry_queue().len();
    ensure!(queued == 85, "expected 85 queued, got {queued}");

    gw.drain_retries().await;
    ensure!(world.outbox_len() == 15, "posted beyond the window: {}", world.outbox_len());
    ensure!(gw.retry_queue().len() == 85, "drain before reset dropped replies");

    world.advance_clock(900);
    gw.drain_retries().await;
    ensure!(world.outbox_len() == 30, "after reset posted {} in total", world.outbox_len());
    ensure!(gw.retry_queue().len() == 70, "after reset {} still queued", gw.retry_queue().len());

    let order: Vec<u64> = world.read_outbox().iter().map(|p| p.reply.in_reply_to).collect();
    ensure!(order.windows(2).all(|w| w[0] < w[1]), "replies posted out of order");
    Ok(())
}

fn random_body(rng: &mut StdRng) -> String {
    const POOLS: &[&[char]] = &[
        &['a', 'Z', 'q', '7', ' ', '.', '!', '?', '%', '&', '=', '+'],
        &['п', 'р', 'и', 'в', 'е', 'т', 'Ж', 'ё'],
        &['東', '京', '天', '気', '晴', 'れ', '。'],
        &['😀', '🚀', '🌧', '👍', '\u{1F3FD}', '❤'],
        &['e', '\u{301}', '\u{308}', 'a', '\u{20AC}'],
        &['\n', '\r', '\t', ' '],
    ];
    let len = rng.gen_range(0..=500);
    (0..len)
        .map(|_| {
            let pool = POOLS[rng.gen_range(0..POOLS.len())];
            pool[rng.gen_range(0..pool.len())]
        })
        .collect()
}

#[derive(serde::Deserialize)]
struct TParam {
    t: String,
}

async fn reply_length_bound() -> Check {
    let mut rng = StdRng::seed_from_u64(0x7411);
    let bodies: Arc<Vec<String>> = Arc::new((0..1000).map(|_| random_body(&mut rng)).collect());
    let app = Router::new()
        .route(
            "/body",
            get(|State(bodies): State<Arc<Vec<String>>>, Query(q): Query<TParam>| async move {
                let idx: usize = q.t.split_whitespace().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
                bodies[idx].clone()
            }),
        )
        .with_state(bodies.clone());
    let listener = TcpListener::bind(local()).await.map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let server = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });

    let world = SimWorld::with_budgets("t411", AMPLE);
    let gw = gateway(&world, registry_with(&[("f", format!("http://{addr}/body"))]));
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz0123456789_".chars().collect();
    let mut authors = HashMap::new();
    for i in 0..bodies.len() {
        let author: String = (0..rng.gen_range(1..=15))
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect();
        let channel = if rng.gen_bool(0.5) { Channel::Mention } else { Channel::DirectMessage };
        let id = world.inject(&author, &format!("@t411 f {i}"), channel).unwrap();
        authors.insert(id, author);
    }
    settle(&gw).await;
    server.abort();

    let outbox = world.read_outbox();
    ensure!(!outbox.is_empty(), "no replies were posted");
    ensure!(gw.retry_queue().is_empty(), "replies left in the retry queue");
    for p in &outbox {
        let n = p.reply.text.chars().count();
        ensure!(n <= MAX_REPLY_SCALARS, "reply to {} has {n} scalars", p.reply.in_reply_to);
        let author = &authors[&p.reply.in_reply_to];
        if p.reply.channel == Channel::Mention {
            let prefix = format!("@{author} ");
            ensure!(p.reply.text.starts_with(&prefix), "mention reply lost its prefix: {:?}", p.reply.text);
        }
    }
    Ok(())
}

fn random_string(rng: &mut StdRng) -> String {
    let len = rng.gen_range(0..=40);
    (0..len)
        .map(|_| match rng.gen_range(0..3) {
            0 => rng.gen_range(0x20u8..0x7f) as char,
            1 => rng.gen::<char>(),
            _ => char::from_u32(rng.gen_range(0x80..0x800)).unwrap_or('?'),
        })
        .collect()
}

async fn encoding_correctness() -> Check {
    let grammar = Regex::new(r"^(?:[A-Za-z0-9\-._~]|%[0-9A-F]{2})*$").unwrap();
    let mut rng = StdRng::seed_from_u64(411);
    let reg = t411::ServiceRegistration {
        key: t411::domain::normalize_key("k").unwrap(),
        webhook: "http://hooks.example/k".into(),
        owner: Handle::new("ops").unwrap(),
        registered_at: chrono::Utc::now(),
    };
    for _ in 0..10_000 {
        let s = random_string(&mut rng);
        let enc = percent_encode(&s);
        ensure!(grammar.is_match(&enc), "{s:?} encoded outside the grammar: {enc}");
        let dec = percent_decode_str(&enc).decode_utf8().map_err(|e| e.to_string())?;
        ensure!(dec == s, "{s:?} round-tripped to {dec:?}");

        let author_src: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let Ok(author) = Handle::new(&author_src) else { continue };
        let cmd = parse_command(&format!("k {s}"));
        let call = build_call(&reg, &cmd, &author);
        let url = url::Url::parse(&call.url).map_err(|e| format!("{}: {e}", call.url))?;
        let query = url.query().unwrap_or("");
        let pairs: Vec<(&str, &str)> = query.split('&').filter_map(|p| p.split_once('=')).collect();
        ensure!(pairs.len() == 2, "query {query:?} does not have two parameters");
        let t = percent_decode_str(pairs[0].1).decode_utf8().map_err(|e| e.to_string())?;
        let u = percent_decode_str(pairs[1].1).decode_utf8().map_err(|e| e.to_string())?;
        ensure!(pairs[0].0 == "t" && t == cmd.original, "t decoded to {t:?}");
        ensure!(pairs[1].0 == "u" && u == author.as_str(), "u decoded to {u:?}");
    }
    Ok(())
}

fn live_view(store: &RegistryStore) -> BTreeMap<String, (String, String)> {
    store
        .entries()
        .map(|r| (r.key.to_string(), (r.webhook.clone(), r.owner.as_str().to_string())))
        .collect()
}

fn registry_sequences(dir: &Path) -> Check {
    let mut rng = StdRng::seed_from_u64(9);
    let keys = ["w", "t", "E", "quote", "bad key", "", "x_1"];
    let owners = ["ops", "alice", "bob"];
    for seq in 0..1000 {
        let path = dir.join(format!("journal-{seq}.jsonl"));
        let mut live = RegistryStore::open(&path).map_err(|e| e.to_string())?;
        for _ in 0..rng.gen_range(1..=12) {
            let key = keys[rng.gen_range(0..keys.len())];
            let owner = owners[rng.gen_range(0..owners.len())];
            if rng.gen_bool(0.6) {
                let hook = format!("https://hooks.example/{}", rng.gen_range(0..5));
                let _ = live.register(key, &hook, owner);
            } else {
                let _ = live.unregister(key, owner);
            }
        }
        let replayed = RegistryStore::load(&path).map_err(|e| format!("sequence {seq}: {e}"))?;
        ensure!(
            live_view(&replayed) == live_view(&live),
            "sequence {seq}: replay differs from live registry"
        );
    }
    Ok(())
}

async fn crash_restore(dir: &Path) -> Check {
    let state = dir.join("engine-state.json");
    let world = SimWorld::with_budgets("t411", AMPLE);
    for i in 0..30 {
        let channel = if i % 3 == 0 { Channel::DirectMessage } else { Channel::Mention };
        world.inject(&format!("user{i}"), "@t411 hello", channel).unwrap();
    }
    let build = || {
        Gateway::builder(Arc::new(world.clone()), RegistryStore::in_memory().into_shared())
            .snapshot_path(state.clone())
            .poll_interval(0)
            .build()
            .map_err(|e| e.to_string())
    };
    {
        let first = build()?;
        first.tick().await.map_err(|e| e.to_string())?;
        for _ in 0..10 {
            first.process_one().await.map_err(|e| e.to_string())?;
        }
        // Dropped here with 20 messages still on its bus.
    }
    ensure!(world.outbox_len() == 10, "first run posted {}", world.outbox_len());
    let second = build()?;
    settle(&second).await;

    let mut per_message: HashMap<u64, usize> = HashMap::new();
    for p in world.read_outbox() {
        *per_message.entry(p.reply.in_reply_to).or_default() += 1;
    }
    let dupes: Vec<_> = per_message.iter().filter(|(_, n)| **n > 1).collect();
    ensure!(dupes.is_empty(), "duplicate replies after restore: {dupes:?}");
    ensure!(per_message.len() == 30, "{} of 30 messages answered", per_message.len());
    Ok(())
}

async fn persistence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().to_path_buf();
    tokio::task::spawn_blocking(move || registry_sequences(&path))
        .await
        .map_err(|e| e.to_string())??;
    crash_restore(dir.path()).await
}

async fn channel_symmetry() -> Check {
    let bots = BotServer::start(local(), Fixtures::shipped()).await.map_err(|e| e.to_string())?;
    let world = SimWorld::with_budgets("t411", AMPLE);
    let gw = gateway(
        &world,
        registry_with(&[
            ("e", format!("{}/echo", bots.base_url())),
            ("t", format!("{}/quote", bots.base_url())),
        ]),
    );
    let mut rng = StdRng::seed_from_u64(10);
    let texts = ["@t411 e ping", "@t411 t ORCL", "@t411 t", "@t411 how are you?", "@t411 hello"];
    let mut inbound = HashMap::new();
    for i in 0..60 {
        let channel = if rng.gen_bool(0.5) { Channel::Mention } else { Channel::DirectMessage };
        let author = format!("user{i}");
        let id = world.inject(&author, texts[rng.gen_range(0..texts.len())], channel).unwrap();
        inbound.insert(id, (channel, author));
    }
    settle(&gw).await;

    let outbox = world.read_outbox();
    ensure!(outbox.len() == 60, "{} replies for 60 messages", outbox.len());
    for p in outbox {
        let (channel, author) = &inbound[&p.reply.in_reply_to];
        ensure!(p.reply.channel == *channel, "reply to {} crossed channels", p.reply.in_reply_to);
        ensure!(p.reply.recipient.as_str() == author, "reply to {} went to {}", author, p.reply.recipient);
        match channel {
            Channel::Mention => ensure!(p.reply.text.starts_with(&format!("@{author} ")), "mention reply without prefix"),
            Channel::DirectMessage => ensure!(!p.reply.text.starts_with('@'), "direct reply with a mention prefix"),
        }
    }
    ensure!(
        world.outbox_for(Channel::DirectMessage).len()
            == inbound.values().filter(|(c, _)| *c == Channel::DirectMessage).count(),
        "direct message outbox does not match inbound direct messages"
    );
    Ok(())
}

fn demo_script() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/demo.scenario")
}

async fn demo_scenario() -> Check {
    let src = std::fs::read_to_string(demo_script()).map_err(|e| e.to_string())?;
    let report = simulate(&src, SimulateOptions::default()).await.map_err(|e| e.to_string())?;
    ensure!(report.expectations_met >= 1, "demo script has no expectations");

    let out = tokio::process::Command::new(env!("CARGO_BIN_EXE_gateway"))
        .arg("simulate")
        .arg("--script")
        .arg(demo_script())
        .output()
        .await
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure!(
        out.status.success(),
        "gateway simulate exited with {}: {}{}",
        out.status,
        stdout,
        String::from_utf8_lossy(&out.stderr)
    );
    let expected = format!("ok: {} steps, {} expectations met", report.steps, report.expectations_met);
    ensure!(stdout.trim() == expected, "gateway simulate printed {stdout:?}");
    Ok(())
}

type Criterion = (u32, &'static str, Pin<Box<dyn Future<Output = Check> + Send>>);

fn main() -> ExitCode {
    let runtime = tokio::runtime::Runtime::new().expect("runtime");
    let criteria: Vec<Criterion> = vec![
        (1, "webhook GET carries t and u exactly", Box::pin(wire_example())),
        (2, "chatbot dialogue reply", Box::pin(dialogue_example())),
        (3, "quote handler absent and bare-key branches", Box::pin(quote_handler_branches())),
        (4, "exactly-once replies under cursor replay", Box::pin(exactly_once_under_replay())),
        (5, "rest and streaming budgets are independent", Box::pin(budget_independence())),
        (6, "reply posts respect the rest window", Box::pin(rate_limit_compliance())),
        (7, "replies fit in 140 scalars with mention prefix", Box::pin(reply_length_bound())),
        (8, "percent-encoding round trip and grammar", Box::pin(encoding_correctness())),
        (9, "registry replay and crash restore", Box::pin(persistence())),
        (10, "replies return on the inbound channel", Box::pin(channel_symmetry())),
        (11, "demo scenario runs through the simulator", Box::pin(demo_scenario())),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        let started = std::time::Instant::now();
        let result = runtime.block_on(async {
            match tokio::spawn(check).await {
                Ok(r) => r,
                Err(e) => Err(format!("panicked: {e}")),
            }
        });
        match result {
            Ok(()) => println!("PASS criterion {n}: {name} ({:.1?})", started.elapsed()),
            Err(reason) => {
                failed += 1;
                println!("FAIL criterion {n}: {name}: {reason}");
            }
        }
    }
    println!("{} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
