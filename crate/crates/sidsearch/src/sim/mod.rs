//! Synthetic search-log environment.
//!
//! Stands in for production logs: a corpus of items with hidden topic
//! geometry, a Zipf-distributed query pool, graded-label search sessions,
//! a simulated fine-ranking reward, and a position-biased click model.
//! Hidden state (topic vectors) drives labels, rewards, and clicks but is
//! never exposed to the model, which only sees integer feature/token ids.

mod corpus;
mod interact;

pub use corpus::{generate_corpus, load_corpus, save_corpus, Corpus, CorpusConfig};
pub use interact::{
    attention, expected_interaction_reward, simulate_interactions, system_reward,
    InteractionOutcome, RewardWeights,
};

/// One item in the corpus. `topic_vector` is hidden ground truth; the model
/// only ever sees `feature_tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub item_id: u64,
    pub topic_vector: Vec<f64>,
    pub feature_tokens: Vec<u32>,
    pub quality: f64,
    pub live: bool,
}

/// One query in the pool, with its Zipf sampling weight and head/tail tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub query_id: u64,
    pub tokens: Vec<u32>,
    pub topic_vector: Vec<f64>,
    pub weight: f64,
    pub head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub user_id: u64,
    pub is_new: bool,
}

/// Which lifecycle slice a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One search session: a query, a user, and graded candidates.
///
/// Grades: 0 = irrelevant/unexposed negative, 1 = relevant low quality,
/// 2 = relevant, 3 = relevant high quality.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchLogRecord {
    pub query_id: u64,
    pub user_id: u64,
    pub candidates: Vec<u64>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl SearchLogRecord {
    pub fn positives(&self) -> impl Iterator<Item = (u64, u8)> + '_ {
        self.candidates
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l > 0)
            .map(|(&c, &l)| (c, l))
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = crate::num::dot(a, a).sqrt();
    let nb = crate::num::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    crate::num::dot(a, b) / (na * nb)
}
