//! Corpus generation and the line-oriented persistence format.
//!
//! File layout (all integers decimal, all reals printed with 9 significant
//! digits via `{:.8e}`; fields are space-separated, lists comma-separated):
//!
//! ```text
//! sidsearch-corpus v1
//! config n_items=.. n_queries=.. n_users=.. n_topics=.. subtopics_per_topic=..
//!        topic_dim=.. zipf_exponent=<r> n_records=.. candidates_per_record=..
//!        features_per_item=.. tokens_per_query=.. label_noise=<r>
//!        new_user_fraction=<r> holdout_fraction=<r> seed=..     (single line)
//! item <id> <live:0|1> <quality:r> <feature_tokens:u32,..> <topic:r,..>
//! query <id> <head:0|1> <weight:r> <tokens:u32,..> <topic:r,..>
//! user <id> <new:0|1>
//! record <query_id> <user_id> <train|test> <candidates:u64,..> <labels:u8,..>
//! end
//! ```
//!
//! Every real is quantized to this print format at generation time, so
//! save → load → save reproduces the file byte for byte.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cosine, Item, Query, SearchLogRecord, Split, User};
use crate::seeding;
use crate::{Error, Result};

/// Grade thresholds on (noisy) hidden cosine relevance.
const GRADE3_MIN: f64 = 0.88;
const GRADE2_MIN: f64 = 0.75;
const GRADE1_MIN: f64 = 0.30;
/// Relevant items below this quality are demoted one grade.
const LOW_QUALITY: f64 = 0.2;

const ITEM_NOISE_TOKENS: u32 = 64;
const QUERY_NOISE_TOKENS: u32 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_items: usize,
    pub n_queries: usize,
    pub n_users: usize,
    pub n_topics: usize,
    pub subtopics_per_topic: usize,
    pub topic_dim: usize,
    pub zipf_exponent: f64,
    pub n_records: usize,
    pub candidates_per_record: usize,
    pub features_per_item: usize,
    pub tokens_per_query: usize,
    pub label_noise: f64,
    pub new_user_fraction: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_queries: 500,
            n_users: 200,
            n_topics: 12,
            subtopics_per_topic: 4,
            topic_dim: 16,
            zipf_exponent: 1.1,
            n_records: 4000,
            candidates_per_record: 8,
            features_per_item: 6,
            tokens_per_query: 4,
            label_noise: 0.03,
            new_user_fraction: 0.3,
            holdout_fraction: 0.2,
            seed: 42,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.n_items < 10 {
            return Err(Error::InvalidArgument("corpus: n_items must be >= 10".into()));
        }
        if self.n_topics < 2 {
            return Err(Error::InvalidArgument("corpus: n_topics must be >= 2".into()));
        }
        if self.n_topics > self.n_items {
            return Err(Error::InvalidArgument(
                "corpus: n_topics exceeds n_items".into(),
            ));
        }
        if self.n_queries == 0 || self.n_users == 0 || self.n_records == 0 {
            return Err(Error::InvalidArgument(
                "corpus: n_queries, n_users, n_records must be positive".into(),
            ));
        }
        if self.candidates_per_record < 2 || self.candidates_per_record >= self.n_items {
            return Err(Error::InvalidArgument(
                "corpus: candidates_per_record must be in [2, n_items)".into(),
            ));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::InvalidArgument(
                "corpus: zipf_exponent must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Item feature-id space: 0 is reserved OOV, then topic tokens,
    /// subtopic tokens, and noise tokens.
    pub fn feature_vocab_size(&self) -> usize {
        1 + self.n_topics + self.n_topics * self.subtopics_per_topic + ITEM_NOISE_TOKENS as usize
    }

    /// Query token-id space, laid out like the feature space.
    pub fn query_vocab_size(&self) -> usize {
        1 + self.n_topics + self.n_topics * self.subtopics_per_topic + QUERY_NOISE_TOKENS as usize
    }
}

pub struct Corpus {
    pub config: CorpusConfig,
    pub items: Vec<Item>,
    pub queries: Vec<Query>,
    pub users: Vec<User>,
    pub records: Vec<SearchLogRecord>,
}

impl Corpus {
    pub fn item(&self, id: u64) -> &Item {
        &self.items[id as usize]
    }

    pub fn query(&self, id: u64) -> &Query {
        &self.queries[id as usize]
    }

    pub fn user(&self, id: u64) -> &User {
        &self.users[id as usize]
    }

    /// Hidden relevance in [0, 1]: clamped cosine of the hidden topic vectors.
    pub fn hidden_relevance(&self, query_id: u64, item_id: u64) -> f64 {
        cosine(
            &self.query(query_id).topic_vector,
            &self.item(item_id).topic_vector,
        )
        .clamp(0.0, 1.0)
    }

    pub fn train_records(&self) -> impl Iterator<Item = &SearchLogRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn test_records(&self) -> impl Iterator<Item = &SearchLogRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    /// Flip the live flag on a seeded fraction of items, simulating catalog
    /// drift between trie snapshots.
    pub fn toggle_live(&mut self, fraction: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "live-toggle"));
        for item in &mut self.items {
            if rng.random_range(0.0..1.0) < fraction {
                item.live = !item.live;
            }
        }
    }
}

/// Quantize to the persisted 9-significant-digit print format.
fn q9(x: f64) -> f64 {
    fmt9(x).parse().expect("q9 round-trip")
}

fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    normalize(v)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = crate::num::dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn quantized_unit(v: Vec<f64>) -> Vec<f64> {
    normalize(v).into_iter().map(q9).collect()
}

/// Zipf sampler over ranks 1..=n with exponent s.
struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    fn new(n: usize, s: f64) -> Self {
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for r in 1..=n {
            acc += (r as f64).powf(-s);
            cumulative.push(acc);
        }
        let total = acc;
        cumulative.iter_mut().for_each(|c| *c /= total);
        Self { cumulative }
    }

    fn mass(&self, rank: usize) -> f64 {
        let prev = if rank >= 2 { self.cumulative[rank - 2] } else { 0.0 };
        self.cumulative[rank - 1] - prev
    }

    /// Sample a rank in 1..=n.
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random_range(0.0..1.0);
        self.cumulative.partition_point(|&c| c < u) + 1
    }
}

/// Generate a full synthetic corpus. Deterministic for a fixed config.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let cfg = config.clone();
    let n_sub = cfg.n_topics * cfg.subtopics_per_topic;

    let mut rng_geo = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "geometry"));
    let topic_centers: Vec<Vec<f64>> = (0..cfg.n_topics)
        .map(|_| unit_gaussian(&mut rng_geo, cfg.topic_dim))
        .collect();
    let sub_centers: Vec<Vec<f64>> = (0..n_sub)
        .map(|i| {
            let t = i / cfg.subtopics_per_topic;
            let dir = unit_gaussian(&mut rng_geo, cfg.topic_dim);
            let mut v = topic_centers[t].clone();
            crate::num::axpy(&mut v, 0.45, &dir);
            normalize(v)
        })
        .collect();

    // Items.
    let mut rng_items = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "items"));
    let sub_token_base = 1 + cfg.n_topics as u32;
    let noise_token_base = sub_token_base + n_sub as u32;
    let items: Vec<Item> = (0..cfg.n_items)
        .map(|i| {
            let topic = rng_items.random_range(0..cfg.n_topics);
            let sub_local = rng_items.random_range(0..cfg.subtopics_per_topic);
            let sub = topic * cfg.subtopics_per_topic + sub_local;
            let mut v = sub_centers[sub].clone();
            for x in v.iter_mut() {
                *x += 0.08 * gaussian(&mut rng_items);
            }
            let topic_tok = 1 + topic as u32;
            let sub_tok = sub_token_base + sub as u32;
            let mut feats = Vec::with_capacity(cfg.features_per_item);
            for slot in 0..cfg.features_per_item {
                feats.push(match slot {
                    0 | 1 => topic_tok,
                    2 | 3 => sub_tok,
                    _ => noise_token_base + rng_items.random_range(0..ITEM_NOISE_TOKENS),
                });
            }
            Item {
                item_id: i as u64,
                topic_vector: quantized_unit(v),
                feature_tokens: feats,
                quality: q9(rng_items.random_range(0.0..1.0)),
                live: true,
            }
        })
        .collect();

    // Queries with Zipf weights over a shuffled rank assignment.
    let mut rng_queries = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "queries"));
    let zipf = ZipfSampler::new(cfg.n_queries, cfg.zipf_exponent);
    let mut ranks: Vec<usize> = (1..=cfg.n_queries).collect();
    ranks.shuffle(&mut rng_queries);
    let head_cutoff = (cfg.n_queries as f64 * 0.2).ceil() as usize;
    let queries: Vec<Query> = (0..cfg.n_queries)
        .map(|i| {
            let topic = rng_queries.random_range(0..cfg.n_topics);
            let sub_local = rng_queries.random_range(0..cfg.subtopics_per_topic);
            let sub = topic * cfg.subtopics_per_topic + sub_local;
            let mut v = sub_centers[sub].clone();
            for x in v.iter_mut() {
                *x += 0.08 * gaussian(&mut rng_queries);
            }
            let topic_tok = 1 + topic as u32;
            let sub_tok = sub_token_base + sub as u32;
            let mut tokens = Vec::with_capacity(cfg.tokens_per_query);
            for slot in 0..cfg.tokens_per_query {
                tokens.push(match slot {
                    0 => topic_tok,
                    1 => sub_tok,
                    _ => noise_token_base + rng_queries.random_range(0..QUERY_NOISE_TOKENS),
                });
            }
            let rank = ranks[i];
            Query {
                query_id: i as u64,
                tokens,
                topic_vector: quantized_unit(v),
                weight: q9(zipf.mass(rank)),
                head: rank <= head_cutoff,
            }
        })
        .collect();

    // Users; new users get less session traffic.
    let mut rng_users = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "users"));
    let users: Vec<User> = (0..cfg.n_users)
        .map(|i| User {
            user_id: i as u64,
            is_new: rng_users.random_range(0.0..1.0) < cfg.new_user_fraction,
        })
        .collect();
    let user_weights: Vec<f64> = users
        .iter()
        .map(|u| if u.is_new { 0.3 } else { 1.0 })
        .collect();
    let user_cdf: Vec<f64> = {
        let total: f64 = user_weights.iter().sum();
        let mut acc = 0.0;
        user_weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect()
    };

    // Per-query pool of most-relevant items, by hidden cosine.
    let pool_size = 40.min(cfg.n_items);
    let relevant_pools: Vec<Vec<u64>> = queries
        .iter()
        .map(|q| {
            let mut scored: Vec<(f64, u64)> = items
                .iter()
                .map(|it| (cosine(&q.topic_vector, &it.topic_vector), it.item_id))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.truncate(pool_size);
            scored.into_iter().map(|(_, id)| id).collect()
        })
        .collect();

    // Records: Zipf query, weighted user, relevant + random candidates.
    let mut rng_rec = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "records"));
    // Zipf rank -> query id.
    let mut rank_to_query = vec![0usize; cfg.n_queries + 1];
    for (qi, &rank) in ranks.iter().enumerate() {
        rank_to_query[rank] = qi;
    }
    let n_relevant_slots = (cfg.candidates_per_record / 2).max(1);
    let mut records = Vec::with_capacity(cfg.n_records);
    for _ in 0..cfg.n_records {
        let qid = rank_to_query[zipf.sample(&mut rng_rec)] as u64;
        let u: f64 = rng_rec.random_range(0.0..1.0);
        let uid = user_cdf.partition_point(|&c| c < u).min(cfg.n_users - 1) as u64;
        let split = if rng_rec.random_range(0.0..1.0) < cfg.holdout_fraction {
            Split::Test
        } else {
            Split::Train
        };

        let query = &queries[qid as usize];
        let pool = &relevant_pools[qid as usize];
        let mut cands: Vec<u64> = Vec::with_capacity(cfg.candidates_per_record);
        while cands.len() < n_relevant_slots {
            let pick = pool[rng_rec.random_range(0..pool.len())];
            if !cands.contains(&pick) {
                cands.push(pick);
            }
        }
        while cands.len() < cfg.candidates_per_record {
            let pick = rng_rec.random_range(0..cfg.n_items) as u64;
            if !cands.contains(&pick) {
                cands.push(pick);
            }
        }
        cands.shuffle(&mut rng_rec);

        let mut labels: Vec<u8> = cands
            .iter()
            .map(|&iid| {
                let item = &items[iid as usize];
                let rel = cosine(&query.topic_vector, &item.topic_vector)
                    + cfg.label_noise * gaussian(&mut rng_rec);
                grade(rel, item.quality)
            })
            .collect();

        // Invariants: at least one positive and at least one grade-0 negative.
        if !labels.iter().any(|&l| l > 0) {
            let best = pool[0];
            let slot = 0;
            cands[slot] = best;
            let item = &items[best as usize];
            labels[slot] = grade(cosine(&query.topic_vector, &item.topic_vector), item.quality).max(1);
        }
        if !labels.iter().any(|&l| l == 0) {
            let slot = cands.len() - 1;
            let mut forced: Option<u64> = None;
            for _ in 0..32 {
                let pick = rng_rec.random_range(0..cfg.n_items) as u64;
                let item = &items[pick as usize];
                if cosine(&query.topic_vector, &item.topic_vector) < 0.2 && !cands.contains(&pick) {
                    forced = Some(pick);
                    break;
                }
            }
            // Crowded geometry: fall back to the globally farthest item.
            let pick = forced.unwrap_or_else(|| {
                items
                    .iter()
                    .filter(|it| !cands.contains(&it.item_id))
                    .map(|it| (cosine(&query.topic_vector, &it.topic_vector), it.item_id))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .expect("n_items exceeds candidates_per_record")
                    .1
            });
            cands[slot] = pick;
            labels[slot] = 0;
        }

        records.push(SearchLogRecord {
            query_id: qid,
            user_id: uid,
            candidates: cands,
            labels,
            split,
        });
    }

    Ok(Corpus {
        config: cfg,
        items,
        queries,
        users,
        records,
    })
}

fn grade(noisy_relevance: f64, quality: f64) -> u8 {
    let g = if noisy_relevance >= GRADE3_MIN {
        3
    } else if noisy_relevance >= GRADE2_MIN {
        2
    } else if noisy_relevance >= GRADE1_MIN {
        1
    } else {
        0
    };
    if g >= 2 && quality < LOW_QUALITY {
        g - 1
    } else {
        g
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn join9(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt9(*x)).collect::<Vec<_>>().join(",")
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let c = &corpus.config;
    writeln!(w, "sidsearch-corpus v1")?;
    writeln!(
        w,
        "config n_items={} n_queries={} n_users={} n_topics={} subtopics_per_topic={} \
         topic_dim={} zipf_exponent={} n_records={} candidates_per_record={} \
         features_per_item={} tokens_per_query={} label_noise={} new_user_fraction={} \
         holdout_fraction={} seed={}",
        c.n_items,
        c.n_queries,
        c.n_users,
        c.n_topics,
        c.subtopics_per_topic,
        c.topic_dim,
        fmt9(c.zipf_exponent),
        c.n_records,
        c.candidates_per_record,
        c.features_per_item,
        c.tokens_per_query,
        fmt9(c.label_noise),
        fmt9(c.new_user_fraction),
        fmt9(c.holdout_fraction),
        c.seed
    )?;
    for it in &corpus.items {
        writeln!(
            w,
            "item {} {} {} {} {}",
            it.item_id,
            it.live as u8,
            fmt9(it.quality),
            join(&it.feature_tokens),
            join9(&it.topic_vector)
        )?;
    }
    for q in &corpus.queries {
        writeln!(
            w,
            "query {} {} {} {} {}",
            q.query_id,
            q.head as u8,
            fmt9(q.weight),
            join(&q.tokens),
            join9(&q.topic_vector)
        )?;
    }
    for u in &corpus.users {
        writeln!(w, "user {} {}", u.user_id, u.is_new as u8)?;
    }
    for r in &corpus.records {
        writeln!(
            w,
            "record {} {} {} {} {}",
            r.query_id,
            r.user_id,
            match r.split {
                Split::Train => "train",
                Split::Test => "test",
            },
            join(&r.candidates),
            join(&r.labels)
        )?;
    }
    writeln!(w, "end")?;
    Ok(())
}

struct LineParser<'a> {
    line_no: usize,
    fields: std::str::SplitWhitespace<'a>,
}

impl<'a> LineParser<'a> {
    fn new(line_no: usize, rest: std::str::SplitWhitespace<'a>) -> Self {
        Self { line_no, fields: rest }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line_no,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.fields
            .next()
            .ok_or_else(|| self.err(format!("missing field {what}")))
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let raw = self.next(what)?;
        raw.parse()
            .map_err(|_| self.err(format!("bad {what}: {raw:?}")))
    }

    fn parse_list<T: std::str::FromStr>(&mut self, what: &str) -> Result<Vec<T>> {
        let raw = self.next(what)?;
        raw.split(',')
            .map(|tok| {
                tok.parse()
                    .map_err(|_| self.err(format!("bad {what} entry: {tok:?}")))
            })
            .collect()
    }

    fn parse_kv<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self.next(key)?;
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| self.err(format!("expected {key}=<value>, got {raw:?}")))?;
        if k != key {
            return Err(self.err(format!("expected key {key}, got {k}")));
        }
        v.parse()
            .map_err(|_| self.err(format!("bad value for {key}: {v:?}")))
    }

    fn parse_bool01(&mut self, what: &str) -> Result<bool> {
        match self.next(what)? {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(self.err(format!("bad {what}: {other:?} (want 0|1)"))),
        }
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);

    let mut config: Option<CorpusConfig> = None;
    let mut items = Vec::new();
    let mut queries = Vec::new();
    let mut users = Vec::new();
    let mut records = Vec::new();
    let mut saw_end = false;

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line_no == 1 {
            if line.trim() != "sidsearch-corpus v1" {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("bad header {line:?}"),
                });
            }
            continue;
        }
        let mut fields = line.split_whitespace();
        let tag = match fields.next() {
            Some(t) => t,
            None => continue,
        };
        let mut p = LineParser::new(line_no, fields);
        match tag {
            "config" => {
                config = Some(CorpusConfig {
                    n_items: p.parse_kv("n_items")?,
                    n_queries: p.parse_kv("n_queries")?,
                    n_users: p.parse_kv("n_users")?,
                    n_topics: p.parse_kv("n_topics")?,
                    subtopics_per_topic: p.parse_kv("subtopics_per_topic")?,
                    topic_dim: p.parse_kv("topic_dim")?,
                    zipf_exponent: p.parse_kv("zipf_exponent")?,
                    n_records: p.parse_kv("n_records")?,
                    candidates_per_record: p.parse_kv("candidates_per_record")?,
                    features_per_item: p.parse_kv("features_per_item")?,
                    tokens_per_query: p.parse_kv("tokens_per_query")?,
                    label_noise: p.parse_kv("label_noise")?,
                    new_user_fraction: p.parse_kv("new_user_fraction")?,
                    holdout_fraction: p.parse_kv("holdout_fraction")?,
                    seed: p.parse_kv("seed")?,
                });
            }
            "item" => {
                items.push(Item {
                    item_id: p.parse("item_id")?,
                    live: p.parse_bool01("live")?,
                    quality: p.parse("quality")?,
                    feature_tokens: p.parse_list("feature_tokens")?,
                    topic_vector: p.parse_list("topic_vector")?,
                });
            }
            "query" => {
                queries.push(Query {
                    query_id: p.parse("query_id")?,
                    head: p.parse_bool01("head")?,
                    weight: p.parse("weight")?,
                    tokens: p.parse_list("tokens")?,
                    topic_vector: p.parse_list("topic_vector")?,
                });
            }
            "user" => {
                users.push(User {
                    user_id: p.parse("user_id")?,
                    is_new: p.parse_bool01("new")?,
                });
            }
            "record" => {
                let query_id = p.parse("query_id")?;
                let user_id = p.parse("user_id")?;
                let split = match p.next("split")? {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => {
                        return Err(Error::Parse {
                            line: line_no,
                            message: format!("bad split {other:?}"),
                        })
                    }
                };
                let candidates: Vec<u64> = p.parse_list("candidates")?;
                let labels: Vec<u8> = p.parse_list("labels")?;
                if candidates.len() != labels.len() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "candidates/labels length mismatch".into(),
                    });
                }
                records.push(SearchLogRecord {
                    query_id,
                    user_id,
                    candidates,
                    labels,
                    split,
                });
            }
            "end" => {
                saw_end = true;
            }
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown tag {other:?}"),
                });
            }
        }
    }

    let config = config.ok_or(Error::Parse {
        line: 0,
        message: "missing config line".into(),
    })?;
    if !saw_end {
        return Err(Error::Parse {
            line: 0,
            message: "missing end marker (truncated file)".into(),
        });
    }
    Ok(Corpus {
        config,
        items,
        queries,
        users,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            n_items: 200,
            n_queries: 60,
            n_users: 30,
            n_topics: 6,
            n_records: 300,
            seed: 7,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_roundtrips() {
        let cfg = small_config();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.corpus");
        let pb = dir.path().join("b.corpus");
        save_corpus(&a, &pa).unwrap();
        save_corpus(&b, &pb).unwrap();
        let bytes_a = std::fs::read(&pa).unwrap();
        let bytes_b = std::fs::read(&pb).unwrap();
        assert_eq!(bytes_a, bytes_b, "same seed must give byte-identical corpora");

        // Lossless reload: saving the parsed corpus reproduces the bytes.
        let reloaded = load_corpus(&pa).unwrap();
        let pc = dir.path().join("c.corpus");
        save_corpus(&reloaded, &pc).unwrap();
        assert_eq!(bytes_a, std::fs::read(&pc).unwrap());
        assert_eq!(reloaded.records, a.records);
    }

    #[test]
    fn every_record_has_positive_and_negative() {
        let corpus = generate_corpus(&small_config()).unwrap();
        for r in &corpus.records {
            assert!(r.labels.iter().any(|&l| l > 0), "record lacks positive");
            assert!(r.labels.iter().any(|&l| l == 0), "record lacks grade-0");
            assert_eq!(r.candidates.len(), r.labels.len());
        }
    }

    #[test]
    fn head_queries_carry_most_session_mass() {
        let cfg = CorpusConfig {
            n_items: 100,
            n_queries: 500,
            n_records: 20000,
            zipf_exponent: 1.1,
            seed: 3,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let head_sessions = corpus
            .records
            .iter()
            .filter(|r| corpus.query(r.query_id).head)
            .count();
        let frac = head_sessions as f64 / corpus.records.len() as f64;
        assert!(frac >= 0.6, "head mass {frac} below 0.6");
    }

    #[test]
    fn degenerate_config_is_rejected() {
        let cfg = CorpusConfig {
            n_items: 10,
            n_topics: 11,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&cfg).is_err());
        let cfg = CorpusConfig {
            n_items: 5,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn topic_vectors_are_unit_norm() {
        let corpus = generate_corpus(&small_config()).unwrap();
        for it in &corpus.items {
            let n = crate::num::dot(&it.topic_vector, &it.topic_vector).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert!(!it.feature_tokens.is_empty());
        }
    }

    #[test]
    fn grades_track_hidden_cosine() {
        // Spearman rank correlation between grade and hidden cosine.
        let corpus = generate_corpus(&small_config()).unwrap();
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for r in &corpus.records {
            for (iid, &label) in r.candidates.iter().zip(&r.labels) {
                let c = cosine(
                    &corpus.query(r.query_id).topic_vector,
                    &corpus.item(*iid).topic_vector,
                );
                pairs.push((c, label as f64));
            }
        }
        let rho = spearman(&pairs);
        assert!(rho > 0.7, "spearman {rho} <= 0.7");
    }

    fn ranks(values: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut out = vec![0.0; values.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }

    fn spearman(pairs: &[(f64, f64)]) -> f64 {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let rx = ranks(&xs);
        let ry = ranks(&ys);
        let n = rx.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..rx.len() {
            let dx = rx[i] - mx;
            let dy = ry[i] - my;
            cov += dx * dy;
            vx += dx * dx;
            vy += dy * dy;
        }
        cov / (vx.sqrt() * vy.sqrt())
    }
}
