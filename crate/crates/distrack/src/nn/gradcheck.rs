//! Central-difference gradient checking against the tape's reverse pass.

use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Probe a scalar-valued build function at the given `(param, flat_index)`
/// coordinates: compare the analytic gradient from one reverse pass with a
/// central finite difference of two forward passes at `step`. Returns the
/// maximum relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn max_relative_error(
    store: &mut ParamStore,
    build: impl Fn(&mut Tape, &ParamStore) -> Var,
    probes: &[(usize, usize)],
    step: f64,
) -> f64 {
    let mut tape = Tape::new();
    let out = build(&mut tape, store);
    let grads = tape.backward(out, store.len());

    let mut worst: f64 = 0.0;
    for &(param, flat) in probes {
        let analytic = grads.by_param[param]
            .as_ref()
            .map(|g| g.as_slice().unwrap()[flat])
            .unwrap_or(0.0);

        let original = store.value(param).as_slice().unwrap()[flat];
        let eval = |store: &mut ParamStore, value: f64| -> f64 {
            store.value_mut(param).as_slice_mut().unwrap()[flat] = value;
            let mut tape = Tape::new();
            let out = build(&mut tape, store);
            tape.scalar_value(out)
        };
        let plus = eval(store, original + step);
        let minus = eval(store, original - step);
        store.value_mut(param).as_slice_mut().unwrap()[flat] = original;

        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}
