//! Offline evaluation: Recall@K, MRR, valid-path rate, with query head/tail
//! and user new/existing slices.
//!
//! Two probe splits are built from held-out records: RK (positives = the
//! candidates the simulated ranking system prefers) and CK (positives =
//! items clicked under the position-biased interaction model).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::{beam_search, rank_results, ModelPolicy};
use crate::model::{encode_query, ModelParams};
use crate::num::ParamStore;
use crate::seeding;
use crate::sim::{simulate_interactions, system_reward, Corpus, RewardWeights};
use crate::trie::Trie;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// System-preferred positives.
    Rk,
    /// Clicked positives.
    Ck,
}

impl SplitKind {
    pub fn name(&self) -> &'static str {
        match self {
            SplitKind::Rk => "rk",
            SplitKind::Ck => "ck",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeRecord {
    pub query_id: u64,
    pub user_id: u64,
    pub positives: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub kind: SplitKind,
    pub records: Vec<ProbeRecord>,
}

/// Builds the RK and CK probe splits from the corpus's held-out records.
///
/// RK: top `top_m` candidates by simulated system reward. CK: candidates are
/// ranked by system reward, the top `top_m` exposed, and clicked items become
/// positives; zero-click records are dropped (positives must be non-empty).
pub fn build_splits(
    corpus: &Corpus,
    weights: &RewardWeights,
    top_m: usize,
    seed: u64,
) -> (EvalSplit, EvalSplit) {
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "eval-clicks"));
    let mut rk = Vec::new();
    let mut ck = Vec::new();
    for record in corpus.test_records() {
        let mut scored: Vec<(f64, u64)> = record
            .candidates
            .iter()
            .map(|&item| {
                (
                    system_reward(corpus, weights, record.query_id, record.user_id, item, seed),
                    item,
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let exposed: Vec<u64> = scored.iter().take(top_m).map(|(_, id)| *id).collect();

        rk.push(ProbeRecord {
            query_id: record.query_id,
            user_id: record.user_id,
            positives: exposed.clone(),
        });

        let outcomes = simulate_interactions(corpus, &exposed, record.query_id, record.user_id, &mut rng);
        let clicked: Vec<u64> = outcomes
            .iter()
            .filter(|o| o.click)
            .map(|o| o.item_id)
            .collect();
        if !clicked.is_empty() {
            ck.push(ProbeRecord {
                query_id: record.query_id,
                user_id: record.user_id,
                positives: clicked,
            });
        }
    }
    (
        EvalSplit {
            kind: SplitKind::Rk,
            records: rk,
        },
        EvalSplit {
            kind: SplitKind::Ck,
            records: ck,
        },
    )
}

/// Aggregated metrics for one slice of probe records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceMetrics {
    pub recall_at_k: f64,
    pub mrr: f64,
    pub valid_rate: f64,
    pub records: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub kind: SplitKind,
    pub k: usize,
    pub constrained: bool,
    pub overall: SliceMetrics,
    /// `(slice name, metrics)` for query_head/query_tail/user_new/user_existing.
    pub slices: Vec<(String, SliceMetrics)>,
}

struct PerRecord {
    recall: f64,
    reciprocal_rank: f64,
    valid_rate: f64,
    head: bool,
    new_user: bool,
}

/// Order-independent mean: contributions are sorted before summation so the
/// result does not depend on record order.
fn stable_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs retrieval for every probe record and aggregates Recall@K, MRR, and
/// valid-path rate, overall and per slice.
///
/// `constrained = false` decodes without the trie (paths may be invalid;
/// only resolvable ones enter the ranking), which is what drags valid_rate
/// below 1.0.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    store: &ParamStore,
    params: &ModelParams,
    trie: &Trie,
    corpus: &Corpus,
    split: &EvalSplit,
    k: usize,
    beam_size: usize,
    top_n: usize,
    constrained: bool,
) -> Result<Evaluation> {
    if k < 1 {
        return Err(Error::InvalidArgument("evaluate: K must be >= 1".into()));
    }
    if split.records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "evaluate: empty {} split",
            split.kind.name()
        )));
    }

    let mut rows = Vec::with_capacity(split.records.len());
    for probe in &split.records {
        let qf = encode_query(store, params, &corpus.query(probe.query_id).tokens, probe.user_id)?;
        let policy = ModelPolicy {
            store,
            params,
            q: &qf.q,
            user_id: probe.user_id,
        };
        let paths = beam_search(
            &policy,
            beam_size,
            top_n,
            if constrained { Some(trie) } else { None },
        )?;
        let valid_rate = if paths.is_empty() {
            0.0
        } else {
            paths.iter().filter(|p| trie.contains_path(&p.path)).count() as f64
                / paths.len() as f64
        };
        let valid_paths: Vec<_> = paths
            .iter()
            .filter(|p| trie.contains_path(&p.path))
            .cloned()
            .collect();
        let ranked = rank_results(&valid_paths, trie);

        let total_positives = probe.positives.len() as f64;
        let hits_topk = ranked
            .iter()
            .take(k)
            .filter(|r| probe.positives.contains(&r.item_id))
            .count() as f64;
        let recall = hits_topk / total_positives;
        let reciprocal_rank = ranked
            .iter()
            .position(|r| probe.positives.contains(&r.item_id))
            .map(|idx| 1.0 / (idx + 1) as f64)
            .unwrap_or(0.0);

        rows.push(PerRecord {
            recall,
            reciprocal_rank,
            valid_rate,
            head: corpus.query(probe.query_id).head,
            new_user: corpus.user(probe.user_id).is_new,
        });
    }

    let aggregate = |filter: &dyn Fn(&PerRecord) -> bool| -> SliceMetrics {
        let selected: Vec<&PerRecord> = rows.iter().filter(|r| filter(r)).collect();
        SliceMetrics {
            recall_at_k: stable_mean(selected.iter().map(|r| r.recall)),
            mrr: stable_mean(selected.iter().map(|r| r.reciprocal_rank)),
            valid_rate: stable_mean(selected.iter().map(|r| r.valid_rate)),
            records: selected.len(),
        }
    };

    let overall = aggregate(&|_| true);
    let slices = vec![
        ("query_head".to_string(), aggregate(&|r| r.head)),
        ("query_tail".to_string(), aggregate(&|r| !r.head)),
        ("user_new".to_string(), aggregate(&|r| r.new_user)),
        ("user_existing".to_string(), aggregate(&|r| !r.new_user)),
    ];
    Ok(Evaluation {
        kind: split.kind,
        k,
        constrained,
        overall,
        slices,
    })
}
