//! Central-difference gradient verification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::real::{rl, Real};

/// Compare the populated `store` gradients against central differences of
/// `f`, probing every coordinate of every parameter.
///
/// Per coordinate the error is |fd − ad| / max(|fd|, |ad|, 1e-8); the maximum
/// over all coordinates is returned. `f` must be deterministic.
pub fn finite_diff_check<T: Real, F>(f: F, store: &mut ParamStore<T>, eps: T) -> Result<T>
where
    F: Fn(&ParamStore<T>) -> Result<T>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let mut max_err = T::zero();
    for id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = (0..n).collect();
        let err = check_coords(&f, store, id, &coords, eps)?;
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Like [`finite_diff_check`] but probing at most `max_coords` randomly
/// chosen coordinates per parameter — the full pipeline has too many
/// coordinates for exhaustive probing in a CLI gradcheck.
pub fn finite_diff_check_sampled<T: Real, F>(
    f: F,
    store: &mut ParamStore<T>,
    eps: T,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<(ParamId, T)>>
where
    F: Fn(&ParamStore<T>) -> Result<T>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > max_coords {
            coords.shuffle(&mut rng);
            coords.truncate(max_coords);
            coords.sort_unstable();
        }
        let err = check_coords(&f, store, id, &coords, eps)?;
        out.push((id, err));
    }
    Ok(out)
}

fn check_coords<T: Real, F>(
    f: &F,
    store: &mut ParamStore<T>,
    id: ParamId,
    coords: &[usize],
    eps: T,
) -> Result<T>
where
    F: Fn(&ParamStore<T>) -> Result<T>,
{
    let floor = rl::<T>(1e-8);
    let two = rl::<T>(2.0);
    let mut max_err = T::zero();
    for &c in coords {
        let orig = store.value(id).data()[c];
        store.get_mut(id).value.data_mut()[c] = orig + eps;
        let fp = f(store)?;
        store.get_mut(id).value.data_mut()[c] = orig - eps;
        let fm = f(store)?;
        store.get_mut(id).value.data_mut()[c] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite probe value for {} coord {c}",
                store.get(id).name
            )));
        }
        let fd = (fp - fm) / (two * eps);
        let ad = store.grad(id).data()[c];
        let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(floor);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
