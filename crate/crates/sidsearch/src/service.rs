//! Search-serving endpoint: newline-delimited text messages over TCP.
//!
//! One request per line, one response line per request. Fields are
//! space-separated `key=value` pairs after a message-type word; list values
//! are comma-separated; SID paths use the `'-'`-joined syntax. The `msg`
//! field of an error is always last and may contain spaces.
//!
//! Requests:
//!
//! ```text
//! search tokens=<u32,..> user=<u64> top_n=<usize>
//! admin op=insert path=<a-b-c> item=<u64>
//! admin op=remove path=<a-b-c> item=<u64>
//! admin op=reload checkpoint=<path>
//! shutdown
//! ```
//!
//! Responses:
//!
//! ```text
//! ok type=search model_version=<16 hex> trie_version=<u64> n=<usize> results=<item:path:score;..>
//! ok type=admin trie_version=<u64>
//! ok type=shutdown
//! err code=<bad_request|not_found|internal> msg=<text to end of line>
//! ```
//!
//! Scores are path log-probabilities printed as `{:.9e}`. Search requests
//! take a read lock on model and trie and may run concurrently; admin
//! insert/remove serialize as trie writers; `reload` swaps the model
//! atomically between requests.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use crate::checkpoint::{load_checkpoint, model_version};
use crate::codebook::{parse_path, path_string};
use crate::decode::{beam_search, rank_results, ModelPolicy};
use crate::model::{encode_query, ModelParams};
use crate::num::ParamStore;
use crate::trie::Trie;
use crate::{Error, Result};

struct ModelState {
    store: ParamStore,
    params: ModelParams,
    version: String,
}

/// Shared server state: readers-writer over the model and the trie.
pub struct Shared {
    model: RwLock<ModelState>,
    trie: RwLock<Trie>,
    beam_size: usize,
    stop: AtomicBool,
}

impl Shared {
    pub fn new(store: ParamStore, params: ModelParams, trie: Trie, beam_size: usize) -> Self {
        let version = model_version(&store);
        Self {
            model: RwLock::new(ModelState {
                store,
                params,
                version,
            }),
            trie: RwLock::new(trie),
            beam_size,
            stop: AtomicBool::new(false),
        }
    }
}

/// A running server bound to `addr`. Stops on a `shutdown` message or when
/// [`ServerHandle::shutdown`] is called.
pub struct ServerHandle {
    pub addr: std::net::SocketAddr,
    shared: Arc<Shared>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `addr` (use port 0 for an ephemeral port) and serves until shutdown.
pub fn serve(shared: Arc<Shared>, addr: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let accept_shared = Arc::clone(&shared);
    let join = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if accept_shared.stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let conn_shared = Arc::clone(&accept_shared);
            std::thread::spawn(move || {
                let _ = handle_connection(conn_shared, stream);
            });
        }
    });
    Ok(ServerHandle {
        addr: local,
        shared,
        join: Some(join),
    })
}

fn handle_connection(shared: Arc<Shared>, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = handle_request(&shared, line.trim());
        writer.write_all(response.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
    }
    Ok(())
}

fn err_line(code: &str, msg: impl std::fmt::Display) -> String {
    format!("err code={code} msg={msg}")
}

/// Dispatches one request line to one response line. Malformed input yields
/// a structured error; the connection stays usable.
pub fn handle_request(shared: &Shared, line: &str) -> String {
    let mut fields = line.split_whitespace();
    match fields.next() {
        Some("search") => match parse_kv_fields(fields) {
            Ok(kv) => handle_search(shared, &kv),
            Err(e) => err_line("bad_request", e),
        },
        Some("admin") => match parse_kv_fields(fields) {
            Ok(kv) => handle_admin(shared, &kv),
            Err(e) => err_line("bad_request", e),
        },
        Some("shutdown") => {
            shared.stop.store(true, Ordering::SeqCst);
            "ok type=shutdown".to_string()
        }
        Some(other) => err_line("bad_request", format!("unknown message type {other:?}")),
        None => err_line("bad_request", "empty request"),
    }
}

fn parse_kv_fields<'a>(
    fields: impl Iterator<Item = &'a str>,
) -> std::result::Result<Vec<(&'a str, &'a str)>, String> {
    fields
        .map(|f| {
            f.split_once('=')
                .ok_or_else(|| format!("expected key=value, got {f:?}"))
        })
        .collect()
}

fn get<'a>(kv: &[(&'a str, &'a str)], key: &str) -> std::result::Result<&'a str, String> {
    kv.iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| format!("missing field {key}"))
}

fn handle_search(shared: &Shared, kv: &[(&str, &str)]) -> String {
    let parsed = (|| -> std::result::Result<(Vec<u32>, u64, usize), String> {
        let tokens: Vec<u32> = get(kv, "tokens")?
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|_| format!("bad token id {t:?}")))
            .collect::<std::result::Result<_, _>>()?;
        let user: u64 = get(kv, "user")?
            .parse()
            .map_err(|_| "bad user id".to_string())?;
        let top_n: usize = get(kv, "top_n")?
            .parse()
            .map_err(|_| "bad top_n".to_string())?;
        if tokens.is_empty() && top_n > 0 {
            return Err("tokens must be non-empty".into());
        }
        Ok((tokens, user, top_n))
    })();
    let (tokens, user, top_n) = match parsed {
        Ok(v) => v,
        Err(e) => return err_line("bad_request", e),
    };

    let model = shared.model.read().expect("model lock");
    let trie = shared.trie.read().expect("trie lock");
    if top_n == 0 {
        return format!(
            "ok type=search model_version={} trie_version={} n=0 results=",
            model.version,
            trie.version()
        );
    }

    let result = (|| -> Result<String> {
        let qf = encode_query(&model.store, &model.params, &tokens, user)?;
        let policy = ModelPolicy {
            store: &model.store,
            params: &model.params,
            q: &qf.q,
            user_id: user,
        };
        let beam = shared.beam_size.max(top_n);
        let paths = beam_search(&policy, beam, top_n, Some(&trie))?;
        let ranked = rank_results(&paths, &trie);
        let results: Vec<String> = ranked
            .iter()
            .map(|r| format!("{}:{}:{:.9e}", r.item_id, path_string(&r.path), r.score))
            .collect();
        Ok(format!(
            "ok type=search model_version={} trie_version={} n={} results={}",
            model.version,
            trie.version(),
            results.len(),
            results.join(";")
        ))
    })();
    match result {
        Ok(line) => line,
        Err(e) => err_line("internal", e),
    }
}

fn handle_admin(shared: &Shared, kv: &[(&str, &str)]) -> String {
    let op = match get(kv, "op") {
        Ok(v) => v,
        Err(e) => return err_line("bad_request", e),
    };
    match op {
        "insert" | "remove" => {
            let parsed = (|| -> std::result::Result<(Vec<u16>, u64), String> {
                let path = parse_path(get(kv, "path")?).map_err(|e| e.to_string())?;
                let item: u64 = get(kv, "item")?
                    .parse()
                    .map_err(|_| "bad item id".to_string())?;
                Ok((path, item))
            })();
            let (path, item) = match parsed {
                Ok(v) => v,
                Err(e) => return err_line("bad_request", e),
            };
            let mut trie = shared.trie.write().expect("trie lock");
            if path.len() != trie.depth() {
                return err_line(
                    "bad_request",
                    format!("path length {} != k {}", path.len(), trie.depth()),
                );
            }
            let outcome = if op == "insert" {
                trie.insert(&path, item)
            } else {
                trie.remove(&path, item)
            };
            match outcome {
                Ok(()) => format!("ok type=admin trie_version={}", trie.version()),
                Err(e @ Error::TrieAbsent { .. }) => err_line("not_found", e),
                Err(e) => err_line("internal", e),
            }
        }
        "reload" => {
            let path = match get(kv, "checkpoint") {
                Ok(v) => v,
                Err(e) => return err_line("bad_request", e),
            };
            match reload_model(shared, Path::new(path)) {
                Ok(version) => {
                    let trie = shared.trie.read().expect("trie lock");
                    format!(
                        "ok type=admin trie_version={} model_version={version}",
                        trie.version()
                    )
                }
                Err(e) => err_line("internal", e),
            }
        }
        other => err_line("bad_request", format!("unknown admin op {other:?}")),
    }
}

fn reload_model(shared: &Shared, path: &Path) -> Result<String> {
    let (store, dims) = load_checkpoint(path)?;
    let params = ModelParams::bind(&store, dims)?;
    let version = model_version(&store);
    let mut model = shared.model.write().expect("model lock");
    *model = ModelState {
        store,
        params,
        version: version.clone(),
    };
    Ok(version)
}

/// Minimal line client used by tests, examples, and the smoke pipeline.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: &std::net::SocketAddr) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let writer = stream.try_clone()?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
        })
    }

    pub fn request(&mut self, line: &str) -> Result<String> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut response = String::new();
        self.reader.read_line(&mut response)?;
        Ok(response.trim_end().to_string())
    }
}

/// Parsed view of a `search` response, for programmatic clients.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub item_id: u64,
    pub path: Vec<u16>,
    pub score: f64,
}

pub fn parse_search_response(line: &str) -> Result<(String, u64, Vec<SearchHit>)> {
    let bad = |m: &str| Error::Parse {
        line: 0,
        message: format!("{m} in response {line:?}"),
    };
    if !line.starts_with("ok type=search ") {
        return Err(bad("not a search ok-response"));
    }
    let mut model_version = String::new();
    let mut trie_version = 0u64;
    let mut hits = Vec::new();
    for field in line.split_whitespace().skip(2) {
        let (key, value) = field.split_once('=').ok_or_else(|| bad("bad field"))?;
        match key {
            "model_version" => model_version = value.to_string(),
            "trie_version" => {
                trie_version = value.parse().map_err(|_| bad("bad trie_version"))?
            }
            "results" => {
                for part in value.split(';').filter(|p| !p.is_empty()) {
                    let mut bits = part.splitn(3, ':');
                    let item = bits.next().ok_or_else(|| bad("missing item"))?;
                    let path = bits.next().ok_or_else(|| bad("missing path"))?;
                    let score = bits.next().ok_or_else(|| bad("missing score"))?;
                    hits.push(SearchHit {
                        item_id: item.parse().map_err(|_| bad("bad item id"))?,
                        path: parse_path(path)?,
                        score: score.parse().map_err(|_| bad("bad score"))?,
                    });
                }
            }
            _ => {}
        }
    }
    Ok((model_version, trie_version, hits))
}
