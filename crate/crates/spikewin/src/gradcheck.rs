//! Central-difference verification of tape gradients. 64-bit only; finite
//! differences at 32-bit drown in rounding noise.

use crate::error::{Error, Result};
use crate::optim::{Ctx, ParamStore};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Where the worst disagreement between analytic and numeric was found.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

fn scalar_loss(tape: &Tape<f64>, loss: ValueId) -> Result<f64> {
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            tape.shape(loss)
        )));
    }
    Ok(v[0])
}

/// Check d(loss)/dx for a single input tensor against central differences
/// with step `h`. Returns the max relative error
/// `|analytic - numeric| / (|numeric| + 1e-8)` over all coordinates.
///
/// The closure is evaluated twice up front; any bitwise difference in the
/// loss is reported as a determinism error, since central differences are
/// meaningless for a non-deterministic function.
pub fn finite_diff_check<F>(x: &Tensor<f64>, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, ValueId) -> Result<ValueId>,
{
    let eval = |f: &mut F, t: &Tensor<f64>| -> Result<(Tape<f64>, ValueId, ValueId)> {
        let mut tape = Tape::new();
        let id = tape.leaf(&t.clone().with_grad());
        let loss = f(&mut tape, id)?;
        Ok((tape, id, loss))
    };

    let (tape1, xid, loss1) = eval(&mut f, x)?;
    let v1 = scalar_loss(&tape1, loss1)?;
    let (tape2, _, loss2) = eval(&mut f, x)?;
    let v2 = scalar_loss(&tape2, loss2)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Determinism(format!(
            "loss changed between identical evaluations: {v1:?} vs {v2:?}"
        )));
    }

    let grads = tape1.backward(loss1)?;
    let analytic = grads.dense(xid, x.numel());

    let mut max_err = 0.0f64;
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let xp = Tensor::new(x.shape(), data.clone())?;
        let (tp, _, lp) = eval(&mut f, &xp)?;
        let fp = scalar_loss(&tp, lp)?;
        data[i] = orig - h;
        let xm = Tensor::new(x.shape(), data.clone())?;
        let (tm, _, lm) = eval(&mut f, &xm)?;
        let fm = scalar_loss(&tm, lm)?;
        data[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        max_err = max_err.max(rel_err(analytic[i], numeric));
    }
    Ok(max_err)
}

/// Check d(loss)/dθ for every trainable parameter in a store against
/// central differences. The closure builds the forward pass through a
/// [`Ctx`], exactly as model code does, so whole blocks can be verified
/// without restating them.
pub fn check_params<F>(store: &mut ParamStore<f64>, h: f64, mut f: F) -> Result<GradReport>
where
    F: FnMut(&mut Tape<f64>, &mut Ctx<f64>) -> Result<ValueId>,
{
    let keys: Vec<_> = store.keys().filter(|&k| store.is_trainable(k)).collect();

    // Analytic pass (plus the determinism probe), extracting dense per-param
    // gradients before the tape borrow of the store ends.
    let analytic: Vec<Vec<f64>> = {
        let (tape, ctx, v1, loss) = forward_once(&mut f, store)?;
        let v2 = forward_once(&mut f, store)?.2;
        if v1.to_bits() != v2.to_bits() {
            return Err(Error::Determinism(format!(
                "loss changed between identical evaluations: {v1:?} vs {v2:?}"
            )));
        }
        let grads = tape.backward(loss)?;
        keys.iter()
            .map(|&k| {
                let n = store.tensor(k).numel();
                match ctx.bound_id(k) {
                    Some(id) => grads.dense(id, n),
                    None => vec![0.0; n],
                }
            })
            .collect()
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    for (ki, &key) in keys.iter().enumerate() {
        let n = store.tensor(key).numel();
        for i in 0..n {
            let orig = store.tensor(key).data()[i];
            store.tensor_mut(key).data_mut()[i] = orig + h;
            let fp = forward_once(&mut f, store)?.2;
            store.tensor_mut(key).data_mut()[i] = orig - h;
            let fm = forward_once(&mut f, store)?.2;
            store.tensor_mut(key).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic[ki][i], numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = store.name(key).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn forward_once<'s, F>(
    f: &mut F,
    store: &'s ParamStore<f64>,
) -> Result<(Tape<f64>, Ctx<'s, f64>, f64, ValueId)>
where
    F: FnMut(&mut Tape<f64>, &mut Ctx<f64>) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(store, true);
    let loss = f(&mut tape, &mut ctx)?;
    let v = scalar_loss(&tape, loss)?;
    Ok((tape, ctx, v, loss))
}
