//! Simulated fine-ranking reward and position-biased user interactions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Corpus;
use crate::seeding;

/// Fixed blend weights of the simulated ranking system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub relevance: f64,
    pub quality: f64,
    pub noise: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            relevance: 0.7,
            quality: 0.2,
            noise: 0.1,
        }
    }
}

/// System-estimated score in [0, 1]: a weighted blend of hidden relevance,
/// item quality, and seeded per-(query, user, item) noise.
pub fn system_reward(
    corpus: &Corpus,
    weights: &RewardWeights,
    query_id: u64,
    user_id: u64,
    item_id: u64,
    seed: u64,
) -> f64 {
    let rel = corpus.hidden_relevance(query_id, item_id);
    let quality = corpus.item(item_id).quality;
    let noise = if weights.noise != 0.0 {
        let s = seeding::derive_keyed(seed, "system-reward", &[query_id, user_id, item_id]);
        ChaCha8Rng::seed_from_u64(s).random_range(0.0..1.0)
    } else {
        0.0
    };
    (weights.relevance * rel + weights.quality * quality + weights.noise * noise).clamp(0.0, 1.0)
}

/// Position-bias attention at 1-based rank r: `1 / log2(r + 1)`.
pub fn attention(rank: usize) -> f64 {
    1.0 / ((rank as f64) + 1.0).log2()
}

/// Outcome of one exposed item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionOutcome {
    pub item_id: u64,
    pub click: bool,
    /// Zero whenever `click` is false.
    pub watch_fraction: f64,
}

/// Watch fractions are drawn as `u^(1/(0.5 + 2 rel))`, skewing toward 1 for
/// relevant items; the closed-form mean below keeps probe metrics
/// deterministic.
fn watch_exponent(rel: f64) -> f64 {
    1.0 / (0.5 + 2.0 * rel)
}

fn expected_watch(rel: f64) -> f64 {
    let a = watch_exponent(rel);
    1.0 / (a + 1.0)
}

/// Position-biased click model over a ranked exposure list:
/// `P(click at rank r) = attention(r) * attractiveness(item)` with
/// attractiveness = hidden relevance.
pub fn simulate_interactions(
    corpus: &Corpus,
    ranked_items: &[u64],
    query_id: u64,
    _user_id: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<InteractionOutcome> {
    ranked_items
        .iter()
        .enumerate()
        .map(|(i, &item_id)| {
            let rank = i + 1;
            let attract = corpus.hidden_relevance(query_id, item_id);
            let p = attention(rank) * attract;
            let click = rng.random_range(0.0..1.0) < p;
            let watch_fraction = if click {
                rng.random_range(0.0f64..1.0).powf(watch_exponent(attract))
            } else {
                0.0
            };
            InteractionOutcome {
                item_id,
                click,
                watch_fraction,
            }
        })
        .collect()
}

/// Deterministic expectation of the per-item interaction reward
/// `click * (0.5 + 0.5 * watch_fraction)` at the given 1-based rank.
pub fn expected_interaction_reward(corpus: &Corpus, query_id: u64, item_id: u64, rank: usize) -> f64 {
    let attract = corpus.hidden_relevance(query_id, item_id);
    let p_click = attention(rank) * attract;
    p_click * (0.5 + 0.5 * expected_watch(attract))
}
