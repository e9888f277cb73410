//! Trie-constrained beam search over the factorized decoder.
//!
//! The search is generic over a [`SequencePolicy`] so hand-built
//! distributions can drive oracle tests; [`ModelPolicy`] adapts the real
//! decoder. All candidate paths share the fixed depth `k`, so no length
//! normalization is applied.

use crate::codebook::SidPath;
use crate::model::{decode_step, ModelParams};
use crate::num::ParamStore;
use crate::trie::Trie;
use crate::{Error, Result};

/// Per-level next-token distribution source.
pub trait SequencePolicy {
    /// Path depth k.
    fn levels(&self) -> usize;
    /// Codes per level W.
    fn vocab(&self) -> usize;
    /// Natural-log probabilities over the next level's codes.
    fn next_log_probs(&self, prefix: &[u16]) -> Vec<f64>;
}

/// The trained decoder conditioned on one (query embedding, user) pair.
pub struct ModelPolicy<'a> {
    pub store: &'a ParamStore,
    pub params: &'a ModelParams,
    pub q: &'a [f64],
    pub user_id: u64,
}

impl SequencePolicy for ModelPolicy<'_> {
    fn levels(&self) -> usize {
        self.params.dims.k
    }

    fn vocab(&self) -> usize {
        self.params.dims.w
    }

    fn next_log_probs(&self, prefix: &[u16]) -> Vec<f64> {
        let fwd = decode_step(self.store, self.params, self.q, self.user_id, prefix)
            .expect("prefix shorter than k with in-range codes");
        fwd.probs.iter().map(|p| p.ln()).collect()
    }
}

/// One scored candidate path.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPath {
    pub path: SidPath,
    pub log_prob: f64,
}

/// Beam search for the `top_n` best length-k paths.
///
/// With a trie supplied, expansion at every level is restricted to
/// `trie.feasible(prefix)`, so every returned path resolves to at least one
/// item; an empty trie yields an empty result. Exactly the top `beam_size`
/// extensions survive each level, ordered by log-probability with ties
/// broken lexicographically on the path.
pub fn beam_search<P: SequencePolicy>(
    policy: &P,
    beam_size: usize,
    top_n: usize,
    trie: Option<&Trie>,
) -> Result<Vec<ScoredPath>> {
    if top_n < 1 || beam_size < top_n {
        return Err(Error::InvalidArgument(format!(
            "beam_search: need beam_size >= top_n >= 1, got {beam_size} / {top_n}"
        )));
    }
    if let Some(t) = trie {
        if t.depth() != policy.levels() {
            return Err(Error::InvalidArgument(format!(
                "beam_search: trie depth {} != decoder levels {}",
                t.depth(),
                policy.levels()
            )));
        }
    }

    let k = policy.levels();
    let w = policy.vocab();
    let mut beams: Vec<ScoredPath> = vec![ScoredPath {
        path: Vec::new(),
        log_prob: 0.0,
    }];

    for _level in 0..k {
        let mut extensions: Vec<ScoredPath> = Vec::with_capacity(beams.len() * w);
        for beam in &beams {
            let log_probs = policy.next_log_probs(&beam.path);
            debug_assert_eq!(log_probs.len(), w);
            match trie {
                Some(t) => {
                    for code in t.feasible(&beam.path) {
                        let mut path = beam.path.clone();
                        path.push(code);
                        extensions.push(ScoredPath {
                            path,
                            log_prob: beam.log_prob + log_probs[code as usize],
                        });
                    }
                }
                None => {
                    for code in 0..w as u16 {
                        let mut path = beam.path.clone();
                        path.push(code);
                        extensions.push(ScoredPath {
                            path,
                            log_prob: beam.log_prob + log_probs[code as usize],
                        });
                    }
                }
            }
        }
        extensions.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then(a.path.cmp(&b.path)));
        extensions.truncate(beam_size);
        beams = extensions;
        if beams.is_empty() {
            return Ok(Vec::new());
        }
    }

    beams.truncate(top_n);
    Ok(beams)
}

/// A retrieved item with the score of the path it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub item_id: u64,
    pub path: SidPath,
    pub score: f64,
}

/// Flattens scored paths into a ranked item list: paths in score order as
/// given, items within a path ascending by id, each item scored with its
/// path's log-probability.
pub fn rank_results(paths: &[ScoredPath], trie: &Trie) -> Vec<RankedItem> {
    let mut out = Vec::new();
    for sp in paths {
        let mut items = trie.resolve(&sp.path);
        items.dedup();
        for item_id in items {
            out.push(RankedItem {
                item_id,
                path: sp.path.clone(),
                score: sp.log_prob,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed per-prefix distributions for oracle tests.
    struct TablePolicy {
        k: usize,
        w: usize,
        table: std::collections::HashMap<Vec<u16>, Vec<f64>>,
    }

    impl SequencePolicy for TablePolicy {
        fn levels(&self) -> usize {
            self.k
        }
        fn vocab(&self) -> usize {
            self.w
        }
        fn next_log_probs(&self, prefix: &[u16]) -> Vec<f64> {
            self.table[prefix].iter().map(|p| p.ln()).collect()
        }
    }

    fn worked_example_policy() -> TablePolicy {
        let mut table = std::collections::HashMap::new();
        table.insert(vec![], vec![0.6, 0.4]);
        table.insert(vec![0], vec![0.3, 0.7]);
        table.insert(vec![1], vec![0.2, 0.8]);
        TablePolicy { k: 2, w: 2, table }
    }

    /// Independent oracle: enumerate all W^k paths, accumulating the level
    /// log-probabilities left to right exactly like a sequential decode.
    fn exhaustive<P: SequencePolicy>(policy: &P) -> Vec<ScoredPath> {
        let mut acc = vec![ScoredPath {
            path: Vec::new(),
            log_prob: 0.0,
        }];
        for _ in 0..policy.levels() {
            let mut next = Vec::new();
            for sp in &acc {
                let lp = policy.next_log_probs(&sp.path);
                for code in 0..policy.vocab() as u16 {
                    let mut path = sp.path.clone();
                    path.push(code);
                    next.push(ScoredPath {
                        path,
                        log_prob: sp.log_prob + lp[code as usize],
                    });
                }
            }
            acc = next;
        }
        acc.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then(a.path.cmp(&b.path)));
        acc
    }

    #[test]
    fn constrained_beats_invalid_higher_mass_path() {
        let policy = worked_example_policy();
        let mut trie = Trie::new(2);
        trie.insert(&[0, 0], 1).unwrap();
        trie.insert(&[1, 1], 2).unwrap();

        let results = beam_search(&policy, 4, 4, Some(&trie)).unwrap();
        assert_eq!(results.len(), 2);
        assert_eq!(results[0].path, vec![1, 1]);
        assert!((results[0].log_prob - (0.4f64 * 0.8).ln()).abs() < 1e-12);
        assert_eq!(results[1].path, vec![0, 0]);
        assert!((results[1].log_prob - (0.6f64 * 0.3).ln()).abs() < 1e-12);

        // Unconstrained, the top path is the invalid 0-1.
        let unconstrained = beam_search(&policy, 4, 4, None).unwrap();
        assert_eq!(unconstrained[0].path, vec![0, 1]);
        assert!((unconstrained[0].log_prob - (0.6f64 * 0.7).ln()).abs() < 1e-12);
    }

    #[test]
    fn full_width_beam_equals_exhaustive_enumeration() {
        let policy = worked_example_policy();
        let beam = beam_search(&policy, 4, 4, None).unwrap();
        assert_eq!(beam, exhaustive(&policy));
    }

    #[test]
    fn single_feasible_path_under_uniform_decoder() {
        struct Uniform;
        impl SequencePolicy for Uniform {
            fn levels(&self) -> usize {
                3
            }
            fn vocab(&self) -> usize {
                4
            }
            fn next_log_probs(&self, _prefix: &[u16]) -> Vec<f64> {
                vec![(0.25f64).ln(); 4]
            }
        }
        let mut trie = Trie::new(3);
        trie.insert(&[2, 0, 3], 9).unwrap();
        let results = beam_search(&Uniform, 8, 4, Some(&trie)).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].path, vec![2, 0, 3]);
        assert!((results[0].log_prob - 3.0 * 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_trie_gives_empty_result() {
        let policy = worked_example_policy();
        let trie = Trie::new(2);
        assert!(beam_search(&policy, 4, 2, Some(&trie)).unwrap().is_empty());
    }

    #[test]
    fn bad_beam_settings_rejected() {
        let policy = worked_example_policy();
        assert!(beam_search(&policy, 1, 2, None).is_err());
        assert!(beam_search(&policy, 0, 0, None).is_err());
    }

    #[test]
    fn widening_beam_never_hurts_top_score() {
        // Monotonicity across B on a fixed random policy.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _trial in 0..20 {
            let mut table = std::collections::HashMap::new();
            let (k, w) = (3usize, 4usize);
            let mut stack = vec![Vec::<u16>::new()];
            while let Some(prefix) = stack.pop() {
                if prefix.len() == k {
                    continue;
                }
                let mut probs: Vec<f64> = (0..w).map(|_| rng.random_range(0.01..1.0)).collect();
                let total: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= total);
                table.insert(prefix.clone(), probs);
                for c in 0..w as u16 {
                    let mut p = prefix.clone();
                    p.push(c);
                    stack.push(p);
                }
            }
            let policy = TablePolicy { k, w, table };
            let mut prev_best = f64::NEG_INFINITY;
            for b in 1..=(w.pow(k as u32)) {
                let top = beam_search(&policy, b, 1, None).unwrap();
                assert!(top[0].log_prob >= prev_best - 1e-15);
                prev_best = prev_best.max(top[0].log_prob);
            }
        }
    }

    #[test]
    fn rank_results_flattening() {
        let mut trie = Trie::new(1);
        trie.insert(&[0], 3).unwrap();
        trie.insert(&[0], 9).unwrap();
        trie.insert(&[1], 5).unwrap();
        let paths = vec![
            ScoredPath {
                path: vec![0],
                log_prob: -1.0,
            },
            ScoredPath {
                path: vec![1],
                log_prob: -2.0,
            },
        ];
        let ranked = rank_results(&paths, &trie);
        let ids: Vec<u64> = ranked.iter().map(|r| r.item_id).collect();
        assert_eq!(ids, vec![3, 9, 5]);
        assert_eq!(ranked[0].score, -1.0);
        assert_eq!(ranked[2].score, -2.0);

        assert!(rank_results(&[], &trie).is_empty());
    }
}
