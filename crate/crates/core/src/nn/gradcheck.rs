use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamStore};

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Denominator floor. Structurally zero gradients (for example the key bias of
/// an attention layer, which softmax cancels) leave only round-off in the
/// central difference, so below this magnitude the check is effectively
/// absolute: a relative tolerance of 1e-3 means an absolute one of 1e-9.
const FLOOR: f64 = 1e-6;

/// Checks the analytic gradient of `loss` against central differences with
/// step `h` on up to `per_param` randomly chosen coordinates of every
/// parameter. `loss(store, want_grads)` must be deterministic.
pub fn gradient_check<F>(store: &mut ParamStore, mut loss: F, h: f64, per_param: usize, seed: u64) -> GradCheck
where
    F: FnMut(&ParamStore, bool) -> (f64, Option<Gradients>),
{
    let (_, grads) = loss(store, true);
    let grads = grads.expect("loss must return gradients when asked");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.get(id).len();
        let picks: Vec<usize> = if per_param >= len {
            (0..len).collect()
        } else {
            sample(&mut rng, len, per_param).into_vec()
        };
        for flat in picks {
            let analytic = grads
                .get(id)
                .map_or(0.0, |g| g.as_slice().expect("standard layout")[flat]);
            let orig = store.get(id).as_slice().expect("standard layout")[flat];
            store.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig + h;
            let (plus, _) = loss(store, false);
            store.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig - h;
            let (minus, _) = loss(store, false);
            store.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), flat));
            }
        }
    }
    report
}
