//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamSet;

/// Relative errors below this magnitude floor are measured against the floor.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst parameter.
    pub worst_index: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `loss_grad`'s accumulated gradient with `(L(θ+ε) − L(θ−ε)) / 2ε`
/// on up to `probes` randomly chosen parameters.
pub fn check_gradients<M, F>(model: &M, probes: usize, eps: f64, seed: u64, loss_grad: F) -> GradCheckReport
where
    M: ParamSet + Clone,
    F: Fn(&M, &mut M) -> f64,
{
    let mut grad = model.clone();
    grad.zero_grad();
    loss_grad(model, &mut grad);
    let total = model.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample(&mut rng, total, probes.min(total));
    let mut probe = model.clone();
    let mut scratch = model.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst_index: 0 };
    for idx in chosen.iter() {
        let orig = model.get_flat(idx);
        probe.set_flat(idx, orig + eps);
        let plus = loss_grad(&probe, &mut scratch);
        probe.set_flat(idx, orig - eps);
        let minus = loss_grad(&probe, &mut scratch);
        probe.set_flat(idx, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(grad.get_flat(idx), numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = idx;
        }
        report.checked += 1;
    }
    report
}
