use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

const GRAD_FLOOR: f64 = 1e-6;

/// Worst relative error between tape gradients and central finite differences
/// over every parameter scalar of `store`.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, 1e-6 · max(1, ‖a‖∞))`.
/// The floor keeps central-difference roundoff, which grows with the magnitude of
/// the loss and its gradient, from dominating components that are effectively zero.
pub fn max_relative_error(
    store: &mut ParamStore,
    h: f64,
    loss: impl Fn(&mut Tape) -> Result<Var>,
) -> Result<f64> {
    let grads = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        Ok(tape.scalar(l))
    };
    let scale = store
        .ids()
        .filter_map(|id| grads.get(id))
        .flat_map(|g| g.data.iter())
        .fold(1.0f64, |m, x| m.max(x.abs()));
    let floor = GRAD_FLOOR * scale;
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data[k];
            store.value_mut(id).data[k] = orig + h;
            let up = eval(store)?;
            store.value_mut(id).data[k] = orig - h;
            let down = eval(store)?;
            store.value_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data[k]);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if std::env::var_os("VAGCO_GRADCHECK_DEBUG").is_some() && err > 1e-5 {
                eprintln!("{} [{k}] analytic {analytic:e} numeric {numeric:e} err {err:e}", store.name(id));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
