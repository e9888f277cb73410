//! Unified pre-training.
//!
//! One optimization step jointly updates the query encoder, item encoder,
//! codebook maps, and decoder from three objectives:
//!
//! * residual contrastive alignment with L2 similarity, level n's latent
//!   aligned on top of a gradient-blocked sum of earlier latents, negatives
//!   following a coarse-to-fine curriculum (in-batch at level 1,
//!   prefix-bucket hard negatives deeper);
//! * the quantization alignment loss with its two stop-gradient halves;
//! * reject-sampling next-token prediction over the current quantized paths,
//!   with grade-0 candidates weighted to zero.
//!
//! Stop-gradient semantics are realized through a per-step [`BatchPlan`]
//! that freezes every `sg[..]` value (prefix sums, quantized vectors, argmin
//! assignments, sampled negatives). During training the plan is rebuilt from
//! the current parameters each step, so frozen and live values coincide; the
//! finite-difference harness reuses a fixed plan, which is exactly the value
//! function whose derivative the analytic gradients define.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::{quantize, EffectiveCodebook, SidPath};
use crate::model::{
    backprop_decode, backprop_item, backprop_query, decode_step, encode_item, encode_query,
    ItemForward, ModelParams, QueryForward,
};
use crate::num::{dist_sq, logsumexp, Optimizer, OptimizerKind, ParamStore};
use crate::seeding;
use crate::sim::{Corpus, SearchLogRecord};
use crate::{Error, Result};

/// `sim(q, d) = 1 - ||q - d||^2`; preserves the additive geometry of
/// residual sums, unlike cosine.
pub fn l2_similarity(q: &[f64], d: &[f64]) -> f64 {
    1.0 - dist_sq(q, d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub tau: f64,
    pub lambda_contrast: f64,
    pub lambda_codebook: f64,
    pub lambda_ntp: f64,
    /// Reject-sampling weights per grade 0..=3; w(0) must be 0.
    pub label_weights: [f64; 4],
    pub alpha1: f64,
    pub alpha2: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Level-1 in-batch negative cap.
    pub in_batch_negatives: usize,
    /// Pool size for prefix-bucket hard negatives at levels >= 2.
    pub hard_negative_pool: usize,
    /// Contrastive anchors per record (highest grades first).
    pub anchors_per_record: usize,
    /// Residual accumulation in the contrastive positive (RCL).
    pub residual_accumulation: bool,
    /// Prefix-bucket hard negatives at deeper levels (CF curriculum).
    pub coarse_to_fine: bool,
    /// Re-quantize the corpus into prefix buckets every this many steps.
    pub prefix_refresh_steps: usize,
    pub use_adam: bool,
    /// Cosine-decay the learning rate to 10% of its initial value.
    pub cosine_decay: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda_contrast: 1.0,
            lambda_codebook: 1.0,
            lambda_ntp: 1.0,
            label_weights: [0.0, 0.5, 1.0, 2.0],
            alpha1: 1.0,
            alpha2: 0.25,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            steps: 600,
            in_batch_negatives: 12,
            hard_negative_pool: 8,
            anchors_per_record: 2,
            residual_accumulation: true,
            coarse_to_fine: true,
            prefix_refresh_steps: 60,
            use_adam: false,
            cosine_decay: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("pretrain: tau must be > 0".into()));
        }
        if self.label_weights[0] != 0.0 {
            return Err(Error::InvalidArgument(
                "pretrain: label weight w(0) must be 0".into(),
            ));
        }
        if self.label_weights.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(
                "pretrain: label weights must be non-decreasing in grade".into(),
            ));
        }
        if self.lambda_contrast < 0.0 || self.lambda_codebook < 0.0 || self.lambda_ntp < 0.0 {
            return Err(Error::InvalidArgument(
                "pretrain: loss weights must be >= 0".into(),
            ));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument(
                "pretrain: batch_size and steps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        if self.use_adam {
            OptimizerKind::Adam {
                lr: self.learning_rate,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            }
        } else {
            OptimizerKind::Sgd {
                lr: self.learning_rate,
                momentum: self.momentum,
            }
        }
    }
}

/// Loss and gradients of one softmax-contrastive term with L2 similarity:
/// `-log exp(sim(q,d+)/tau) / (exp(sim(q,d+)/tau) + sum exp(sim(q,d-)/tau))`.
pub struct ContrastiveGrads {
    pub loss: f64,
    pub grad_q: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// An empty negative set yields loss 0 and zero gradients (the denominator
/// equals the numerator).
pub fn contrastive_term(
    q: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
) -> Result<ContrastiveGrads> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(
            "contrastive_term: tau must be > 0".into(),
        ));
    }
    let dim = q.len();
    let mut scaled: Vec<f64> = Vec::with_capacity(1 + negatives.len());
    scaled.push(l2_similarity(q, positive) / tau);
    for neg in negatives {
        scaled.push(l2_similarity(q, neg) / tau);
    }
    let lse = logsumexp(&scaled);
    let loss = lse - scaled[0];

    // Softmax weights over {positive} ∪ negatives.
    let weights: Vec<f64> = scaled.iter().map(|a| (a - lse).exp()).collect();

    let mut grad_q = vec![0.0; dim];
    let mut grad_positive = vec![0.0; dim];
    let mut grad_negatives = vec![vec![0.0; dim]; negatives.len()];
    // d loss / d a_j = w_j - [j = positive]; d sim / d q = -2 (q - v);
    // d sim / d v = 2 (q - v).
    for (j, vector) in std::iter::once(positive)
        .chain(negatives.iter().map(|v| v.as_slice()))
        .enumerate()
    {
        let da = weights[j] - if j == 0 { 1.0 } else { 0.0 };
        let coeff = 2.0 * da / tau;
        for i in 0..dim {
            let diff = q[i] - vector[i];
            grad_q[i] -= coeff * diff;
            if j == 0 {
                grad_positive[i] += coeff * diff;
            } else {
                grad_negatives[j - 1][i] += coeff * diff;
            }
        }
    }
    Ok(ContrastiveGrads {
        loss,
        grad_q,
        grad_positive,
        grad_negatives,
    })
}

/// Residual contrastive loss over all k levels.
///
/// Level n's positive is `sg[sum_{m<n} d^(m)] + d^(n)`; the stop-gradient
/// means `grad_latents[n]` carries only level n's flow while `grad_q`
/// accumulates every level. Negative vectors are taken as given (the caller
/// assembles them at matching accumulation depth).
pub struct RclGrads {
    pub loss: f64,
    pub level_losses: Vec<f64>,
    pub grad_q: Vec<f64>,
    pub grad_latents: Vec<Vec<f64>>,
    pub grad_negatives: Vec<Vec<Vec<f64>>>,
}

pub fn residual_contrastive_loss(
    q: &[f64],
    latents: &[Vec<f64>],
    negatives_per_level: &[Vec<Vec<f64>>],
    tau: f64,
) -> Result<RclGrads> {
    if negatives_per_level.len() != latents.len() {
        return Err(Error::InvalidArgument(
            "residual_contrastive_loss: one negative set per level required".into(),
        ));
    }
    let dim = q.len();
    let mut prefix = vec![0.0; dim];
    let mut grad_q = vec![0.0; dim];
    let mut grad_latents = Vec::with_capacity(latents.len());
    let mut grad_negatives = Vec::with_capacity(latents.len());
    let mut level_losses = Vec::with_capacity(latents.len());
    let mut loss = 0.0;
    for (n, d) in latents.iter().enumerate() {
        let mut positive = prefix.clone();
        crate::num::axpy(&mut positive, 1.0, d);
        let term = contrastive_term(q, &positive, &negatives_per_level[n], tau)?;
        loss += term.loss;
        level_losses.push(term.loss);
        crate::num::axpy(&mut grad_q, 1.0, &term.grad_q);
        grad_latents.push(term.grad_positive);
        grad_negatives.push(term.grad_negatives);
        crate::num::axpy(&mut prefix, 1.0, d);
    }
    Ok(RclGrads {
        loss,
        level_losses,
        grad_q,
        grad_latents,
        grad_negatives,
    })
}

/// Weighted next-token-prediction loss over one quantized path:
/// `-w(grade) * sum_n log p(s^(n) | q, u, s^(<n))`.
///
/// Decoder/user/prefix gradients are accumulated into the store scaled by
/// `grad_scale`; the query-embedding gradient (same scaling) is returned for
/// chaining into the query encoder. Grade 0 contributes exactly zero loss
/// and gradients.
#[allow(clippy::too_many_arguments)]
pub fn ntp_loss(
    store: &mut ParamStore,
    params: &ModelParams,
    q: &[f64],
    user_id: u64,
    path: &[u16],
    grade: u8,
    label_weights: &[f64; 4],
    grad_scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let weight = label_weights[grade.min(3) as usize];
    if weight == 0.0 {
        return Ok((0.0, vec![0.0; q.len()]));
    }
    let mut nll = 0.0;
    let mut grad_q = vec![0.0; q.len()];
    for n in 0..path.len() {
        let fwd = decode_step(store, params, q, user_id, &path[..n])?;
        let target = path[n] as usize;
        nll -= fwd.probs[target].max(f64::MIN_POSITIVE).ln();
        let mut dlogits: Vec<f64> = fwd.probs.clone();
        dlogits[target] -= 1.0;
        dlogits.iter_mut().for_each(|g| *g *= weight * grad_scale);
        let gq = backprop_decode(store, params, &fwd, &dlogits);
        crate::num::axpy(&mut grad_q, 1.0, &gq);
    }
    Ok((weight * nll, grad_q))
}

/// Item-to-path assignment of the whole corpus plus prefix buckets, rebuilt
/// periodically from the current quantization (the hard-negative curriculum
/// reads the previous refresh, mirroring how the trie is maintained).
pub struct SidIndex {
    pub paths: Vec<SidPath>,
    buckets: HashMap<(usize, SidPath), Vec<u64>>,
}

impl SidIndex {
    pub fn build(store: &ParamStore, params: &ModelParams, corpus: &Corpus) -> Result<Self> {
        let cb = EffectiveCodebook::materialize(store, params);
        let mut paths = Vec::with_capacity(corpus.items.len());
        for item in &corpus.items {
            let fwd = encode_item(store, params, &item.feature_tokens)?;
            let (path, _) = quantize(&fwd.latents, &cb);
            paths.push(path);
        }
        Ok(Self::from_paths(paths))
    }

    pub fn from_paths(paths: Vec<SidPath>) -> Self {
        let mut buckets: HashMap<(usize, SidPath), Vec<u64>> = HashMap::new();
        for (item_id, path) in paths.iter().enumerate() {
            for plen in 1..path.len() {
                buckets
                    .entry((plen, path[..plen].to_vec()))
                    .or_default()
                    .push(item_id as u64);
            }
        }
        Self { paths, buckets }
    }

    pub fn path(&self, item_id: u64) -> &SidPath {
        &self.paths[item_id as usize]
    }

    /// Items whose path starts with `prefix` (ascending by id).
    pub fn prefix_bucket(&self, prefix: &[u16]) -> &[u64] {
        self.buckets
            .get(&(prefix.len(), prefix.to_vec()))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

/// Negative item ids for one (anchor record, positive, level).
///
/// Level index 0 draws uniform in-batch negatives: candidates of other
/// records, never anything labeled relevant for the anchor query. Deeper
/// levels draw from the positive's SID-prefix bucket of length `level`,
/// padded from the in-batch pool when the bucket is too small.
#[allow(clippy::too_many_arguments)]
pub fn sample_negatives(
    level: usize,
    anchor: &SearchLogRecord,
    positive: u64,
    batch: &[&SearchLogRecord],
    sid_index: Option<&SidIndex>,
    in_batch_cap: usize,
    hard_pool_cap: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u64> {
    // Everything known-relevant for the anchor query, from any batch record
    // that shares the query.
    let mut excluded: BTreeSet<u64> = batch
        .iter()
        .filter(|r| r.query_id == anchor.query_id)
        .flat_map(|r| r.positives().map(|(id, _)| id))
        .collect();
    excluded.insert(positive);

    let in_batch_pool: Vec<u64> = {
        let mut pool: BTreeSet<u64> = BTreeSet::new();
        for record in batch {
            if std::ptr::eq(*record, anchor) {
                continue;
            }
            for &c in &record.candidates {
                if !excluded.contains(&c) {
                    pool.insert(c);
                }
            }
        }
        pool.into_iter().collect()
    };

    let pick = |pool: &[u64], cap: usize, rng: &mut ChaCha8Rng| -> Vec<u64> {
        if pool.len() <= cap {
            pool.to_vec()
        } else {
            let mut chosen: Vec<u64> = pool.choose_multiple(rng, cap).copied().collect();
            chosen.sort_unstable();
            chosen
        }
    };

    if level == 0 {
        return pick(&in_batch_pool, in_batch_cap, rng);
    }
    let Some(index) = sid_index else {
        return pick(&in_batch_pool, in_batch_cap, rng);
    };

    let prefix = &index.path(positive)[..level];
    let bucket: Vec<u64> = index
        .prefix_bucket(prefix)
        .iter()
        .copied()
        .filter(|id| !excluded.contains(id))
        .collect();
    let mut negatives = pick(&bucket, hard_pool_cap, rng);
    if negatives.len() < hard_pool_cap {
        let pad_pool: Vec<u64> = in_batch_pool
            .iter()
            .copied()
            .filter(|id| !negatives.contains(id))
            .collect();
        negatives.extend(pick(&pad_pool, hard_pool_cap - negatives.len(), rng));
    }
    negatives
}

/// Frozen per-item state for one step: the argmin path, the quantized
/// vectors (`sg[e]`), and the latents feeding every `sg[..]` prefix sum.
struct ItemPlan {
    path: SidPath,
    e_frozen: Vec<Vec<f64>>,
    d_frozen: Vec<Vec<f64>>,
}

struct AnchorPlan {
    record_idx: usize,
    positive: u64,
    /// Per level: negative item ids.
    negatives: Vec<Vec<u64>>,
}

/// Everything sampled or stop-gradient-frozen for one batch step.
pub struct BatchPlan {
    items: BTreeMap<u64, ItemPlan>,
    anchors: Vec<AnchorPlan>,
}

/// Per-step loss report (values before the parameter update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_contrast: f64,
    pub l_codebook: f64,
    pub l_ntp: f64,
    pub l_total: f64,
}

pub fn build_plan(
    store: &ParamStore,
    params: &ModelParams,
    corpus: &Corpus,
    batch: &[&SearchLogRecord],
    sid_index: Option<&SidIndex>,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchPlan> {
    let cb = EffectiveCodebook::materialize(store, params);
    let mut items: BTreeMap<u64, ItemPlan> = BTreeMap::new();
    let add_item = |id: u64, items: &mut BTreeMap<u64, ItemPlan>| -> Result<()> {
        if items.contains_key(&id) {
            return Ok(());
        }
        let fwd = encode_item(store, params, &corpus.item(id).feature_tokens)?;
        let (path, e_frozen) = quantize(&fwd.latents, &cb);
        items.insert(
            id,
            ItemPlan {
                path,
                e_frozen,
                d_frozen: fwd.latents,
            },
        );
        Ok(())
    };

    for record in batch {
        for &c in &record.candidates {
            add_item(c, &mut items)?;
        }
    }

    let mut anchors = Vec::new();
    for (record_idx, record) in batch.iter().enumerate() {
        let mut positives: Vec<(u64, u8)> = record.positives().collect();
        positives.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        positives.truncate(cfg.anchors_per_record);
        for (positive, _grade) in positives {
            let mut negatives = Vec::with_capacity(params.dims.k);
            for level in 0..params.dims.k {
                let use_hard = cfg.coarse_to_fine && level > 0 && sid_index.is_some();
                let negs = sample_negatives(
                    if use_hard { level } else { 0 },
                    record,
                    positive,
                    batch,
                    if use_hard { sid_index } else { None },
                    cfg.in_batch_negatives,
                    cfg.hard_negative_pool,
                    rng,
                );
                for &n in &negs {
                    add_item(n, &mut items)?;
                }
                negatives.push(negs);
            }
            anchors.push(AnchorPlan {
                record_idx,
                positive,
                negatives,
            });
        }
    }

    Ok(BatchPlan { items, anchors })
}

/// Evaluates the combined objective on a batch under a fixed plan and
/// accumulates all analytic gradients (scaled by the lambda weights and the
/// batch normalizers) into the store.
pub fn loss_and_grads(
    store: &mut ParamStore,
    params: &ModelParams,
    corpus: &Corpus,
    batch: &[&SearchLogRecord],
    plan: &BatchPlan,
    cfg: &PretrainConfig,
) -> Result<LossReport> {
    let k = params.dims.k;
    let dim = params.dims.dim;

    // Live forward passes.
    let query_fwds: Vec<QueryForward> = batch
        .iter()
        .map(|r| encode_query(store, params, &corpus.query(r.query_id).tokens, r.user_id))
        .collect::<Result<_>>()?;
    let item_fwds: BTreeMap<u64, ItemForward> = plan
        .items
        .keys()
        .map(|&id| encode_item(store, params, &corpus.item(id).feature_tokens).map(|f| (id, f)))
        .collect::<Result<_>>()?;
    let cb = EffectiveCodebook::materialize(store, params);

    let mut grad_q: Vec<Vec<f64>> = vec![vec![0.0; dim]; batch.len()];
    let mut grad_d: BTreeMap<u64, Vec<Vec<f64>>> = plan
        .items
        .keys()
        .map(|&id| (id, vec![vec![0.0; dim]; k]))
        .collect();

    // Residual contrastive alignment.
    let mut l_contrast = 0.0;
    if cfg.lambda_contrast > 0.0 && !plan.anchors.is_empty() {
        let inv = 1.0 / plan.anchors.len() as f64;
        let scale = cfg.lambda_contrast * inv;
        for anchor in &plan.anchors {
            let q = &query_fwds[anchor.record_idx].q;
            let pos_plan = &plan.items[&anchor.positive];
            let pos_live = &item_fwds[&anchor.positive].latents;
            let mut pos_prefix = vec![0.0; dim];
            for level in 0..k {
                // Positive at this level: sg[prefix] + live d^(level).
                let mut positive = pos_prefix.clone();
                crate::num::axpy(&mut positive, 1.0, &pos_live[level]);
                let neg_ids = &anchor.negatives[level];
                let neg_vecs: Vec<Vec<f64>> = neg_ids
                    .iter()
                    .map(|id| {
                        let neg_plan = &plan.items[id];
                        let neg_live = &item_fwds[id].latents;
                        let mut v = vec![0.0; dim];
                        if cfg.residual_accumulation {
                            for m in 0..level {
                                crate::num::axpy(&mut v, 1.0, &neg_plan.d_frozen[m]);
                            }
                        }
                        crate::num::axpy(&mut v, 1.0, &neg_live[level]);
                        v
                    })
                    .collect();
                let term = contrastive_term(q, &positive, &neg_vecs, cfg.tau)?;
                l_contrast += term.loss * inv;
                crate::num::axpy(&mut grad_q[anchor.record_idx], scale, &term.grad_q);
                crate::num::axpy(
                    &mut grad_d.get_mut(&anchor.positive).unwrap()[level],
                    scale,
                    &term.grad_positive,
                );
                for (id, gneg) in neg_ids.iter().zip(&term.grad_negatives) {
                    crate::num::axpy(&mut grad_d.get_mut(id).unwrap()[level], scale, gneg);
                }
                if cfg.residual_accumulation {
                    crate::num::axpy(&mut pos_prefix, 1.0, &pos_plan.d_frozen[level]);
                }
            }
        }
    }

    // Quantization alignment: a1 moves the codebook toward sg[d], a2 commits
    // the encoder toward sg[e].
    let mut l_codebook = 0.0;
    if cfg.lambda_codebook > 0.0 && !plan.items.is_empty() {
        let inv = 1.0 / plan.items.len() as f64;
        let scale = cfg.lambda_codebook * inv;
        for (id, item_plan) in &plan.items {
            let live = &item_fwds[id].latents;
            let mut grad_entries = Vec::with_capacity(k);
            for n in 0..k {
                let e_live = cb.entry(n, item_plan.path[n] as usize);
                l_codebook += (cfg.alpha1 * dist_sq(&item_plan.d_frozen[n], e_live)
                    + cfg.alpha2 * dist_sq(&live[n], &item_plan.e_frozen[n]))
                    * inv;
                grad_entries.push(
                    e_live
                        .iter()
                        .zip(&item_plan.d_frozen[n])
                        .map(|(ev, dv)| 2.0 * cfg.alpha1 * (ev - dv))
                        .collect::<Vec<f64>>(),
                );
                let gd = &mut grad_d.get_mut(id).unwrap()[n];
                for i in 0..dim {
                    gd[i] += scale * 2.0 * cfg.alpha2 * (live[n][i] - item_plan.e_frozen[n][i]);
                }
            }
            crate::codebook::backprop_entries(store, params, &item_plan.path, &grad_entries, scale);
        }
    }

    // Reject-sampling next-token prediction over frozen paths.
    let mut l_ntp = 0.0;
    if cfg.lambda_ntp > 0.0 {
        let contributing: usize = batch
            .iter()
            .flat_map(|r| r.labels.iter())
            .filter(|&&l| cfg.label_weights[l.min(3) as usize] > 0.0)
            .count();
        if contributing > 0 {
            let inv = 1.0 / contributing as f64;
            let scale = cfg.lambda_ntp * inv;
            for (record_idx, record) in batch.iter().enumerate() {
                let q = query_fwds[record_idx].q.clone();
                for (&cand, &grade) in record.candidates.iter().zip(&record.labels) {
                    if cfg.label_weights[grade.min(3) as usize] == 0.0 {
                        continue;
                    }
                    let path = plan.items[&cand].path.clone();
                    let (loss, gq) = ntp_loss(
                        store,
                        params,
                        &q,
                        record.user_id,
                        &path,
                        grade,
                        &cfg.label_weights,
                        scale,
                    )?;
                    l_ntp += loss * inv;
                    crate::num::axpy(&mut grad_q[record_idx], 1.0, &gq);
                }
            }
        }
    }

    // Flush accumulated input gradients through the encoders.
    for (id, gd) in &grad_d {
        backprop_item(store, params, &item_fwds[id], gd);
    }
    for (record_idx, gq) in grad_q.iter().enumerate() {
        backprop_query(store, params, &query_fwds[record_idx], gq);
    }

    let l_total = cfg.lambda_contrast * l_contrast
        + cfg.lambda_codebook * l_codebook
        + cfg.lambda_ntp * l_ntp;
    Ok(LossReport {
        l_contrast,
        l_codebook,
        l_ntp,
        l_total,
    })
}

/// One optimization step: plan, gradients, update. The report carries the
/// pre-update loss values. A non-finite total aborts with diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    store: &mut ParamStore,
    optimizer: &mut Optimizer,
    params: &ModelParams,
    corpus: &Corpus,
    batch: &[&SearchLogRecord],
    sid_index: Option<&SidIndex>,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("pretrain_step: empty batch".into()));
    }
    let plan = build_plan(store, params, corpus, batch, sid_index, cfg, rng)?;
    store.zero_grads();
    let report = loss_and_grads(store, params, corpus, batch, &plan, cfg)?;
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite(format!(
            "pretrain_step at step {}: contrast={} codebook={} ntp={}",
            store.step(),
            report.l_contrast,
            report.l_codebook,
            report.l_ntp
        )));
    }
    optimizer.apply(store);
    store.assert_finite()?;
    Ok(report)
}

/// Per-step row of the metrics CSV.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub report: LossReport,
    /// Per-level code-usage perplexity at the most recent refresh.
    pub perplexities: Vec<f64>,
}

/// Full pre-training loop over the corpus's train records: seeded batch
/// shuffling, prefix-bucket refresh every `prefix_refresh_steps`, one
/// metrics row per step.
pub fn run_pretrain(
    store: &mut ParamStore,
    params: &ModelParams,
    corpus: &Corpus,
    cfg: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    let train: Vec<&SearchLogRecord> = corpus.train_records().collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("run_pretrain: no train records".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "pretrain"));
    let mut optimizer = Optimizer::new(cfg.optimizer_kind(), store);

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut sid_index = SidIndex::build(store, params, corpus)?;
    let mut perplexities = crate::codebook::utilization(&sid_index.paths, params.dims.w)?;

    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step > 0 && step % cfg.prefix_refresh_steps == 0 {
            sid_index = SidIndex::build(store, params, corpus)?;
            perplexities = crate::codebook::utilization(&sid_index.paths, params.dims.w)?;
        }
        if cfg.cosine_decay {
            let progress = step as f64 / cfg.steps as f64;
            let scale = 0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos());
            optimizer.set_lr(cfg.learning_rate * scale);
        }
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]]);
            cursor += 1;
        }
        let report = pretrain_step(
            store,
            &mut optimizer,
            params,
            corpus,
            &batch,
            Some(&sid_index),
            cfg,
            &mut rng,
        )?;
        let row = StepMetrics {
            step,
            report,
            perplexities: perplexities.clone(),
        };
        on_step(&row);
        rows.push(row);
    }
    Ok(rows)
}
