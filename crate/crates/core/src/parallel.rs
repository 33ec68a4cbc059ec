//! Data-parallel map over examples with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] fans work out over
//! rayon's pool; without it every call runs in order on the caller's thread.
//! Results are always returned in input order and reduced sequentially, so
//! both paths produce bit-identical numbers.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::nn::{reduce_grads, Binder, ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// `items.iter().map(f).collect()`, possibly in parallel.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Mean loss and mean parameter gradients over a batch.
///
/// Each example gets its own tape; `loss_fn` builds the scalar loss for one
/// example against parameters bound from `store`.
pub fn batch_gradients<T, F>(
    exec: Exec,
    store: &ParamStore,
    batch: &[T],
    loss_fn: F,
) -> Result<(f64, ParamGrads)>
where
    T: Sync,
    F: for<'t> Fn(&Binder<'t, '_>, &T) -> Result<Var<'t>> + Sync + Send,
{
    let (loss, grads, _) = batch_gradients_with(exec, store, batch, |b, item| Ok((loss_fn(b, item)?, ())))?;
    Ok((loss, grads))
}

/// Like [`batch_gradients`], also collecting a per-example side value.
pub fn batch_gradients_with<T, X, F>(
    exec: Exec,
    store: &ParamStore,
    batch: &[T],
    loss_fn: F,
) -> Result<(f64, ParamGrads, Vec<X>)>
where
    T: Sync,
    X: Send,
    F: for<'t> Fn(&Binder<'t, '_>, &T) -> Result<(Var<'t>, X)> + Sync + Send,
{
    let parts = map(exec, batch, |item| -> Result<(f64, ParamGrads, X)> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, store);
        let (loss, extra) = loss_fn(&binder, item)?;
        let value = loss.item();
        let grads = tape.backward(loss)?;
        Ok((value, binder.collect(grads), extra))
    });
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    let mut extras = Vec::with_capacity(parts.len());
    for part in parts {
        let (loss, g, x) = part?;
        total += loss;
        grads.push(g);
        extras.push(x);
    }
    let n = batch.len().max(1) as f64;
    Ok((total / n, reduce_grads(grads, 1.0 / n), extras))
}
