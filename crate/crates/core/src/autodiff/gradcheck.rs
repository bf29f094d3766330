use crate::scalar::Real;

use super::{AutodiffError, ParamStore, Tape, Tensor, Var};

/// Max over coordinates of `|analytic - central_diff| / max(1, |analytic|)`
/// for a scalar-valued `f` evaluated at `x`.
pub fn gradcheck<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<T, AutodiffError>
where
    T: Real,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let mut scratch = ParamStore::new();
    tape.backward(y, &mut scratch)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut eval = |probe: Tensor<T>| -> Result<T, AutodiffError> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let out = f(&mut t, v)?;
        let val = t.value(out).item();
        if !val.is_finite() {
            return Err(AutodiffError::NonFinite("function value".into()));
        }
        Ok(val)
    };
    let two_h = T::lit(2.0) * h;
    let mut worst = T::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / two_h;
        let a = analytic.data()[i];
        let err = (a - fd).abs() / T::one().max(a.abs());
        if !err.is_finite() {
            return Err(AutodiffError::NonFinite(format!("gradient coordinate {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Same check over every parameter of `store` instead of a single input.
pub fn gradcheck_params<T, F>(mut f: F, store: &mut ParamStore<T>, h: T) -> Result<T, AutodiffError>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var, AutodiffError>,
{
    store.clear_grads();
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    tape.backward(y, store)?;
    let analytic: Vec<Option<Tensor<T>>> = store.iter().map(|p| p.grad.clone()).collect();
    store.clear_grads();
    let two_h = T::lit(2.0) * h;
    let mut worst = T::zero();
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let mut t = Tape::new();
            let v = f(&mut t, store)?;
            let fp = t.value(v).item();
            store.value_mut(id).data_mut()[i] = orig - h;
            let mut t = Tape::new();
            let v = f(&mut t, store)?;
            let fm = t.value(v).item();
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (fp - fm) / two_h;
            let a = analytic[pi].as_ref().map_or(T::zero(), |g| g.data()[i]);
            let err = (a - fd).abs() / T::one().max(a.abs());
            if !err.is_finite() {
                return Err(AutodiffError::NonFinite(format!("gradient of {}", store.get(id).name)));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
