//! Central finite-difference verification of hand-derived gradients.

use super::ParamStore;
use crate::{Error, Result};

/// Per-tensor maximum relative error between analytic and central-difference
/// gradients.
#[derive(Debug)]
pub struct GradCheckReport {
    /// `(tensor name, max relative error over its coordinates)`.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, err) in &self.per_param {
            writeln!(f, "{name:<28} max rel err {err:.3e}")?;
        }
        write!(f, "overall max rel err {:.3e}", self.max_rel_err)
    }
}

/// Compares the analytic gradient of `loss_fn` against central finite
/// differences, coordinate by coordinate, over every trainable tensor.
///
/// `loss_fn` must return the scalar loss and accumulate its analytic
/// gradients into the store; it must be deterministic in the parameter
/// values (any sampling frozen beforehand). Relative error per coordinate
/// is `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(store: &mut ParamStore, mut loss_fn: F, epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "grad_check: epsilon {epsilon} outside (0, 1e-2]"
        )));
    }

    store.zero_grads();
    let base = loss_fn(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at unperturbed parameters".into()));
    }
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();

    let mut per_param = Vec::new();
    let mut overall: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        if !store.is_trainable(id) {
            continue;
        }
        let name = store.name(id).to_string();
        let n = store.value(id).len();
        let mut max_err: f64 = 0.0;
        for i in 0..n {
            let orig = store.value(id)[i];

            store.value_mut(id)[i] = orig + epsilon;
            let plus = loss_fn(store)?;
            store.value_mut(id)[i] = orig - epsilon;
            let minus = loss_fn(store)?;
            store.value_mut(id)[i] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while perturbing {name}[{i}]"
                )));
            }
            let fd = (plus - minus) / (2.0 * epsilon);
            let a = analytic[id.0][i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
        overall = overall.max(max_err);
        per_param.push((name, max_err));
    }

    // Leave the store with the analytic gradients of the unperturbed point.
    store.zero_grads();
    let _ = loss_fn(store)?;

    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let x = store.register("x", 1, 1, Init::Zero, &mut rng);
        store.value_mut(x)[0] = 3.0;

        // f(x) = x^2, analytic gradient 2x = 6.
        let report = grad_check(
            &mut store,
            |s| {
                let v = s.value(x)[0];
                s.add_grad(x, &[2.0 * v], 1.0);
                Ok(v * v)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report}");
        assert!((store.grad(x)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let _x = store.register("x", 2, 2, Init::Normal(1.0), &mut rng);
        let report = grad_check(&mut store, |_| Ok(42.0), 1e-4).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let x = store.register("spike", 1, 1, Init::Zero, &mut rng);
        // Finite at 0, NaN once perturbed.
        let err = grad_check(
            &mut store,
            |s| {
                let v = s.value(x)[0];
                Ok(if v == 0.0 { 1.0 } else { f64::NAN })
            },
            1e-5,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("spike"), "message was: {msg}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        let mut store = ParamStore::new();
        assert!(grad_check(&mut store, |_| Ok(0.0), 0.0).is_err());
        assert!(grad_check(&mut store, |_| Ok(0.0), 0.5).is_err());
    }
}
