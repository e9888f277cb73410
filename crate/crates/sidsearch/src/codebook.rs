//! Multi-level vector-quantization codebook.
//!
//! Entries are parameterized SimVQ-style: a frozen Gaussian basis `B_n`
//! (W x dim) times a learnable square map `M_n`, so every entry moves on
//! every update and dead codes are recycled implicitly. A directly-learnable
//! variant (`CodebookMode::Direct`) is kept as the collapse-prone ablation.

use crate::model::{CodebookMode, ModelParams};
use crate::num::{dist_sq, ParamStore};
use crate::{Error, Result};

/// A semantic-ID path: one code index per level, length exactly `k`.
pub type SidPath = Vec<u16>;

/// Renders a path as the canonical `'-'`-joined form, e.g. `"17-203-5"`.
pub fn path_string(path: &[u16]) -> String {
    path.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// Parses the `'-'`-joined form.
pub fn parse_path(s: &str) -> Result<SidPath> {
    s.split('-')
        .map(|tok| {
            tok.parse::<u16>()
                .map_err(|_| Error::InvalidArgument(format!("bad path component {tok:?} in {s:?}")))
        })
        .collect()
}

/// Materialized per-level entry tables (`W x dim` each), recomputed from the
/// parameter store once per step and shared read-only afterwards.
pub struct EffectiveCodebook {
    pub dim: usize,
    pub w: usize,
    /// levels[n] is row-major W x dim.
    pub levels: Vec<Vec<f64>>,
}

impl EffectiveCodebook {
    /// E_n = B_n M_n under SimVQ; the entry tensor itself in direct mode.
    pub fn materialize(store: &ParamStore, params: &ModelParams) -> Self {
        let dims = &params.dims;
        let d = dims.dim;
        let levels = (0..dims.k)
            .map(|n| match params.codebook_mode {
                CodebookMode::SimVq => {
                    let basis = store.value(params.basis[n]);
                    let map = store.value(params.maps[n]);
                    let mut out = vec![0.0; dims.w * d];
                    for j in 0..dims.w {
                        let b = &basis[j * d..(j + 1) * d];
                        let e = &mut out[j * d..(j + 1) * d];
                        for c in 0..d {
                            let mut acc = 0.0;
                            for r in 0..d {
                                acc += b[r] * map[r * d + c];
                            }
                            e[c] = acc;
                        }
                    }
                    out
                }
                CodebookMode::Direct => store.value(params.entries[n]).to_vec(),
            })
            .collect();
        Self {
            dim: d,
            w: dims.w,
            levels,
        }
    }

    pub fn entry(&self, level: usize, code: usize) -> &[f64] {
        &self.levels[level][code * self.dim..(code + 1) * self.dim]
    }

    /// Nearest entry by squared L2 distance; ties break to the lowest index.
    pub fn nearest(&self, level: usize, v: &[f64]) -> u16 {
        let mut best = 0u16;
        let mut best_d = f64::INFINITY;
        for j in 0..self.w {
            let d = dist_sq(self.entry(level, j), v);
            if d < best_d {
                best_d = d;
                best = j as u16;
            }
        }
        best
    }
}

/// Nearest-neighbor quantization of the k item latents.
///
/// Returns the code path and the quantized vectors `e^(n) = E_n[s^(n)]`.
pub fn quantize(latents: &[Vec<f64>], codebook: &EffectiveCodebook) -> (SidPath, Vec<Vec<f64>>) {
    let mut path = Vec::with_capacity(latents.len());
    let mut quantized = Vec::with_capacity(latents.len());
    for (n, d) in latents.iter().enumerate() {
        let s = codebook.nearest(n, d);
        path.push(s);
        quantized.push(codebook.entry(n, s as usize).to_vec());
    }
    (path, quantized)
}

/// Quantization alignment loss across levels:
/// `sum_n a1 ||sg[d] - e||^2 + a2 ||d - sg[e]||^2`.
///
/// The a1 term moves only the codebook (via `grad_entries`); the a2 term
/// moves only the encoder (via `grad_latents`).
pub struct CodebookLossResult {
    pub loss: f64,
    /// d loss / d d^(n), from the a2 commitment term only.
    pub grad_latents: Vec<Vec<f64>>,
    /// d loss / d e^(n), from the a1 term only.
    pub grad_entries: Vec<Vec<f64>>,
}

pub fn codebook_loss(
    latents: &[Vec<f64>],
    quantized: &[Vec<f64>],
    alpha1: f64,
    alpha2: f64,
) -> CodebookLossResult {
    debug_assert_eq!(latents.len(), quantized.len());
    let mut loss = 0.0;
    let mut grad_latents = Vec::with_capacity(latents.len());
    let mut grad_entries = Vec::with_capacity(latents.len());
    for (d, e) in latents.iter().zip(quantized) {
        let sq = dist_sq(d, e);
        loss += (alpha1 + alpha2) * sq;
        grad_latents.push(
            d.iter()
                .zip(e)
                .map(|(dv, ev)| 2.0 * alpha2 * (dv - ev))
                .collect(),
        );
        grad_entries.push(
            d.iter()
                .zip(e)
                .map(|(dv, ev)| 2.0 * alpha1 * (ev - dv))
                .collect(),
        );
    }
    CodebookLossResult {
        loss,
        grad_latents,
        grad_entries,
    }
}

/// Routes `d loss / d e^(n)` into the learnable codebook tensors: through
/// `E_n = B_n M_n` for SimVQ (`dM += b_s ⊗ de`), directly into the entry row
/// otherwise.
pub fn backprop_entries(
    store: &mut ParamStore,
    params: &ModelParams,
    path: &[u16],
    grad_entries: &[Vec<f64>],
    scale: f64,
) {
    for (n, (&code, de)) in path.iter().zip(grad_entries).enumerate() {
        match params.codebook_mode {
            CodebookMode::SimVq => {
                let b = store.row(params.basis[n], code as usize).to_vec();
                store.add_grad_outer(params.maps[n], &b, de, scale);
            }
            CodebookMode::Direct => {
                store.add_grad_row(params.entries[n], code as usize, de, scale);
            }
        }
    }
}

/// Straight-through estimator: the forward value is the quantized vector,
/// the backward gradient passes unchanged to the raw latent. Pair this
/// value with [`straight_through_grad`] when routing the downstream
/// gradient.
pub fn straight_through(latent: &[f64], quantized: &[f64]) -> Vec<f64> {
    debug_assert_eq!(latent.len(), quantized.len());
    quantized.to_vec()
}

/// The backward half of [`straight_through`]: gradient w.r.t. the latent is
/// the downstream gradient, unchanged.
pub fn straight_through_grad(downstream: &[f64]) -> Vec<f64> {
    downstream.to_vec()
}

/// Per-level code-usage perplexity `exp(H)` of the index frequencies.
pub fn utilization(assignments: &[SidPath], w: usize) -> Result<Vec<f64>> {
    if assignments.is_empty() {
        return Err(Error::InvalidArgument("utilization: no assignments".into()));
    }
    let k = assignments[0].len();
    let mut counts = vec![vec![0u64; w]; k];
    for path in assignments {
        debug_assert_eq!(path.len(), k);
        for (n, &c) in path.iter().enumerate() {
            counts[n][c as usize] += 1;
        }
    }
    let total = assignments.len() as f64;
    Ok(counts
        .iter()
        .map(|level| {
            let h: f64 = level
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total;
                    -p * p.ln()
                })
                .sum();
            h.exp()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CodebookMode, ModelDims, ModelParams};
    use crate::num::{grad_check, ParamStore};

    fn book(entries: Vec<Vec<f64>>) -> EffectiveCodebook {
        let dim = entries[0].len();
        let w = entries.len();
        EffectiveCodebook {
            dim,
            w,
            levels: vec![entries.into_iter().flatten().collect()],
        }
    }

    #[test]
    fn nearest_by_hand_distances() {
        // entries {(0,0), (1,1)}, d = (0.9, 0.8): distances 1.45 vs 0.05.
        let cb = book(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let (path, e) = quantize(&[vec![0.9, 0.8]], &cb);
        assert_eq!(path, vec![1]);
        assert_eq!(e[0], vec![1.0, 1.0]);
    }

    #[test]
    fn exact_match_and_tie_break() {
        let cb = book(vec![
            vec![0.5, 0.5],
            vec![9.0, 9.0],
            vec![1.0, 0.0],
            vec![7.0, 7.0],
            vec![8.0, 8.0],
            vec![0.0, 1.0],
        ]);
        // Exact hit on entry 0.
        let (path, e) = quantize(&[vec![0.5, 0.5]], &cb);
        assert_eq!(path, vec![0]);
        assert_eq!(e[0], vec![0.5, 0.5]);
        // Equidistant from entries 2 and 5: lowest index wins.
        let (path, _) = quantize(&[vec![0.5, 0.5]], &book(vec![
            vec![9.0, 9.0],
            vec![9.0, 9.0],
            vec![1.0, 0.0],
            vec![9.0, 9.0],
            vec![9.0, 9.0],
            vec![0.0, 1.0],
        ]));
        assert_eq!(path, vec![2]);
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let mut store = ParamStore::new();
        let dims = ModelDims {
            dim: 6,
            k: 2,
            w: 5,
            query_vocab: 4,
            feature_vocab: 4,
            n_users: 2,
        };
        let params = ModelParams::register(&mut store, dims, CodebookMode::SimVq, 3);
        let cb = EffectiveCodebook::materialize(&store, &params);
        use rand::Rng;
        for _ in 0..50 {
            let latents: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let (path, e) = quantize(&latents, &cb);
            let (path2, _) = quantize(&e, &cb);
            assert_eq!(path, path2);
        }
    }

    #[test]
    fn codebook_loss_values_by_hand() {
        // e == d -> 0.
        let r = codebook_loss(&[vec![0.3, -0.2]], &[vec![0.3, -0.2]], 1.0, 0.25);
        assert_eq!(r.loss, 0.0);
        // k=1, d=(1,0), e=(0,0), a1=a2=1 -> 1 + 1 = 2.
        let r = codebook_loss(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]], 1.0, 1.0);
        assert!((r.loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn codebook_loss_stop_gradient_split() {
        let r = codebook_loss(&[vec![1.0, 0.0]], &[vec![0.0, 0.5]], 0.7, 0.2);
        // a2 term only: 2 a2 (d - e).
        assert!((r.grad_latents[0][0] - 2.0 * 0.2 * 1.0).abs() < 1e-12);
        assert!((r.grad_latents[0][1] - 2.0 * 0.2 * -0.5).abs() < 1e-12);
        // a1 term only: 2 a1 (e - d).
        assert!((r.grad_entries[0][0] - 2.0 * 0.7 * -1.0).abs() < 1e-12);
        assert!((r.grad_entries[0][1] - 2.0 * 0.7 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn codebook_gradients_match_finite_differences() {
        // dim=4, W=3, k=2 with the argmin assignment held fixed. The value
        // function must honor the stop-gradients: sg[e] in the a2 term stays
        // at its base-point value while the a1 term sees the live entries.
        let mut store = ParamStore::new();
        let dims = ModelDims {
            dim: 4,
            k: 2,
            w: 3,
            query_vocab: 4,
            feature_vocab: 6,
            n_users: 2,
        };
        let params = ModelParams::register(&mut store, dims, CodebookMode::SimVq, 11);
        let cb0 = EffectiveCodebook::materialize(&store, &params);
        let latents: Vec<Vec<f64>> = vec![vec![0.3, -0.1, 0.2, 0.05], vec![-0.2, 0.4, 0.0, 0.1]];
        let (frozen_path, frozen_e) = quantize(&latents, &cb0);
        let (alpha1, alpha2) = (1.0, 0.25);

        let report = grad_check(
            &mut store,
            |s| {
                let cb = EffectiveCodebook::materialize(s, &params);
                let mut loss = 0.0;
                let mut grad_entries = Vec::new();
                for (n, d) in latents.iter().enumerate() {
                    let e_live = cb.entry(n, frozen_path[n] as usize);
                    loss += alpha1 * crate::num::dist_sq(d, e_live);
                    loss += alpha2 * crate::num::dist_sq(d, &frozen_e[n]);
                    grad_entries.push(
                        e_live
                            .iter()
                            .zip(d)
                            .map(|(ev, dv)| 2.0 * alpha1 * (ev - dv))
                            .collect::<Vec<f64>>(),
                    );
                }
                backprop_entries(s, &params, &frozen_path, &grad_entries, 1.0);
                Ok(loss)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report}");
    }

    #[test]
    fn straight_through_forward_is_quantized_value() {
        let d = vec![0.1, 0.9];
        let e = vec![0.0, 1.0];
        assert_eq!(straight_through(&d, &e), e);
        let g = vec![0.3, -0.4];
        assert_eq!(straight_through_grad(&g), g);
    }

    #[test]
    fn utilization_by_hand() {
        // All on one code -> 1.0.
        let paths: Vec<SidPath> = (0..5).map(|_| vec![2u16]).collect();
        let p = utilization(&paths, 8).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);

        // Uniform over 8 codes -> 8.0.
        let paths: Vec<SidPath> = (0..8).map(|c| vec![c as u16]).collect();
        let p = utilization(&paths, 8).unwrap();
        assert!((p[0] - 8.0).abs() < 1e-9);

        // Counts {4,4,8} over W=3 -> exp(H) = 2 sqrt(2).
        let mut paths: Vec<SidPath> = Vec::new();
        paths.extend((0..4).map(|_| vec![0u16]));
        paths.extend((0..4).map(|_| vec![1u16]));
        paths.extend((0..8).map(|_| vec![2u16]));
        let p = utilization(&paths, 3).unwrap();
        assert!((p[0] - 2.0 * 2.0f64.sqrt()).abs() < 1e-9, "{}", p[0]);
    }

    #[test]
    fn path_string_roundtrip() {
        let p = vec![17u16, 203, 5];
        assert_eq!(path_string(&p), "17-203-5");
        assert_eq!(parse_path("17-203-5").unwrap(), p);
        assert!(parse_path("17-x-5").is_err());
    }
}
